"""
Кодированные дифракционные картины (CDP): случайные фазовые маски,
прямой и сопряженный операторы через БПФ, блочный шаг STAF, блочная
инициализация и драйвер восстановления.
"""
import logging
import math
from dataclasses import dataclass, field as dc_field, replace
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from scipy import fft as sp_fft
from scipy import linalg

from initialization import (
    InitConfig,
    InitProblem,
    InitSolver,
    ProgressCallback,
    VrOpiConfig,
    power_method,
    problem_from_rows,
)
from refinement import DEFAULT_GAMMA, SUCCESS_THRESHOLD, PassRecorder, RunTrace
from signal_model import Field, Iterate, MeasurementSet, SensingEnsemble, Signal
from utils import ArgumentError, NumericalError, SeedLike, make_rng, seed_to_int, split_seed

logger = logging.getLogger(__name__)

# Фазовые задержки масок {1, −1, j, −j}
PHASE_DELAYS = np.array([1.0, -1.0, 1.0j, -1.0j], dtype=np.complex128)
DEFAULT_MASKS = 8
CDP_MAX_PASSES = 300.0


@dataclass(frozen=True, eq=False)
class MaskSet:
    """K диагональных масок длины n, строка k задает диагональ D^(k)."""

    masks: np.ndarray

    def __post_init__(self):
        masks = np.array(self.masks, dtype=np.complex128, copy=True)
        if masks.ndim != 2 or masks.shape[0] < 1 or masks.shape[1] < 1:
            raise ArgumentError("MaskSet: нужна матрица K x n с K, n >= 1")
        distance = np.min(np.abs(masks[..., None] - PHASE_DELAYS), axis=-1)
        if np.any(distance > 1e-12):
            raise ArgumentError("MaskSet: элементы масок должны лежать в {1, -1, j, -j}")
        masks.setflags(write=False)
        object.__setattr__(self, "masks", masks)

    @property
    def K(self) -> int:
        return self.masks.shape[0]

    @property
    def n(self) -> int:
        return self.masks.shape[1]


@dataclass(frozen=True, eq=False)
class CdpMeasurements:
    """Амплитуды psi^(k) = |F D^(k) x| по блокам (K x n)."""

    psi_blocks: np.ndarray

    def __post_init__(self):
        psi = np.array(self.psi_blocks, dtype=np.float64, copy=True)
        if psi.ndim != 2 or psi.size < 1:
            raise ArgumentError("CdpMeasurements: нужна матрица K x n")
        if not np.all(np.isfinite(psi)) or np.any(psi < 0):
            raise ArgumentError("CdpMeasurements: амплитуды должны быть конечными и неотрицательными")
        psi.setflags(write=False)
        object.__setattr__(self, "psi_blocks", psi)

    @property
    def K(self) -> int:
        return self.psi_blocks.shape[0]

    @property
    def n(self) -> int:
        return self.psi_blocks.shape[1]

    @property
    def m(self) -> int:
        return self.psi_blocks.size

    def to_measurement_set(self) -> MeasurementSet:
        """Плоский набор измерений в порядке k*n + j (как строки cdp_sensing_rows)."""
        return MeasurementSet(self.psi_blocks.ravel())

    def norm_estimate(self) -> float:
        """‖x‖ ≈ sqrt(Σ_k ‖psi^(k)‖² / K): каждая маска сохраняет энергию."""
        return math.sqrt(float(np.sum(self.psi_blocks ** 2)) / self.K)


def gen_masks(n: int, K: int = DEFAULT_MASKS, seed: SeedLike = None) -> MaskSet:
    """
    Генерирует K масок с независимыми равновероятными элементами из
    {1, −1, j, −j}.

    Args:
        n (int): Длина сигнала
        K (int): Число масок
        seed: Семя генератора

    Returns:
        MaskSet: Маски
    """
    if n < 1 or K < 1:
        raise ArgumentError(f"gen_masks: нужно n, K >= 1, получено n={n}, K={K}")
    symbols = make_rng(seed).integers(0, PHASE_DELAYS.size, size=(int(K), int(n)))
    return MaskSet(PHASE_DELAYS[symbols])


def _as_vector(z: Union[Signal, Iterate, np.ndarray], n: int) -> np.ndarray:
    if isinstance(z, Signal):
        z = z.entries
    elif isinstance(z, Iterate):
        z = z.z
    z = np.asarray(z)
    if z.shape != (n,):
        raise ArgumentError(f"Вектор длины {z.shape} не согласован с n = {n}")
    return z


def cdp_apply(z: Union[Signal, Iterate, np.ndarray], masks: MaskSet) -> np.ndarray:
    """
    Прямой оператор: строка k равна F D^(k) z (унитарное ДПФ).

    Args:
        z: Вектор длины n
        masks (MaskSet): Маски

    Returns:
        np.ndarray: Комплексная матрица K x n
    """
    zv = _as_vector(z, masks.n)
    return sp_fft.fft(masks.masks * zv[None, :], axis=1, norm="ortho")


def cdp_adjoint(r: np.ndarray, masks: MaskSet) -> np.ndarray:
    """
    Сопряженный оператор Σ_k D^(k)ᴴ Fᴴ r^(k).

    Args:
        r (np.ndarray): Матрица K x n
        masks (MaskSet): Маски

    Returns:
        np.ndarray: Вектор длины n
    """
    r = np.asarray(r)
    if r.shape != masks.masks.shape:
        raise ArgumentError(f"Ожидалась матрица {masks.masks.shape}, получено {r.shape}")
    return np.sum(masks.masks.conj() * sp_fft.ifft(r, axis=1, norm="ortho"), axis=0)


def cdp_forward(x: Union[Signal, np.ndarray], masks: MaskSet) -> CdpMeasurements:
    """
    Измерения psi^(k) = |F D^(k) x| для всех масок.

    Args:
        x: Сигнал длины n
        masks (MaskSet): Маски

    Returns:
        CdpMeasurements: Амплитуды по блокам
    """
    return CdpMeasurements(np.abs(cdp_apply(x, masks)))


def cdp_sensing_rows(masks: MaskSet) -> SensingEnsemble:
    """
    Эквивалентный плотный ансамбль: строка k*n + j равна conj(F_j ⊙ d_k),
    так что её скалярное произведение с z совпадает с (F D^(k) z)_j.
    Только для малых n (проверки и сравнения).
    """
    dft = linalg.dft(masks.n, scale="sqrtn")
    rows = (dft[None, :, :] * masks.masks[:, None, :]).conj()
    return SensingEnsemble(rows.reshape(masks.K * masks.n, masks.n), Field.COMPLEX)


def _block_residual(u: np.ndarray, psi_k: np.ndarray, gamma: float) -> np.ndarray:
    magnitude = np.abs(u)
    keep = magnitude >= psi_k / (1.0 + gamma)
    phase = np.where(magnitude > 0, u / np.where(magnitude > 0, magnitude, 1.0), 1.0)
    return np.where(keep, u - psi_k * phase, 0.0)


def _psi_matrix(psi_blocks: Union[CdpMeasurements, np.ndarray], masks: MaskSet) -> np.ndarray:
    psi = psi_blocks.psi_blocks if isinstance(psi_blocks, CdpMeasurements) else np.asarray(psi_blocks)
    if psi.shape != masks.masks.shape:
        raise ArgumentError(f"Амплитуды {psi.shape} не согласованы с масками {masks.masks.shape}")
    return psi


def block_staf_step(z: Iterate, masks: MaskSet, psi_blocks: Union[CdpMeasurements, np.ndarray],
                    k: int, mu: float, gamma: float = DEFAULT_GAMMA) -> Iterate:
    """
    Блочный шаг STAF по всем картинам маски k (индекс с нуля):
    u = F D^(k) z, z' = z − (mu/n)·D^(k)ᴴ Fᴴ r с усеченной невязкой r.

    Args:
        z (Iterate): Текущая оценка
        masks (MaskSet): Маски
        psi_blocks: Амплитуды K x n
        k (int): Номер маски, 0 <= k < K
        mu (float): Шаг (делится на n)
        gamma (float): Порог усечения

    Returns:
        Iterate: Новая оценка
    """
    if not 0 <= k < masks.K:
        raise ArgumentError(f"Номер маски {k} вне диапазона [0, {masks.K})")
    if not mu > 0:
        raise ArgumentError(f"Шаг mu должен быть положительным, получено {mu}")
    psi = _psi_matrix(psi_blocks, masks)
    zv = np.asarray(_as_vector(z, masks.n), dtype=np.complex128)
    mask = masks.masks[k]
    residual = _block_residual(sp_fft.fft(mask * zv, norm="ortho"), psi[k], gamma)
    new_z = zv - (mu / masks.n) * mask.conj() * sp_fft.ifft(residual, norm="ortho")
    if not np.all(np.isfinite(new_z)):
        raise NumericalError("Блочный шаг дал нечисловые значения")
    return Iterate(new_z, Field.COMPLEX, z.pass_count)


def cdp_loss(z: Union[Iterate, np.ndarray], masks: MaskSet, meas: CdpMeasurements) -> float:
    """Амплитудные потери ½ Σ_k Σ_j (psi_j^(k) − |(F D^(k) z)_j|)²."""
    residual = _psi_matrix(meas, masks) - np.abs(cdp_apply(z, masks))
    return float(0.5 * np.sum(residual * residual))


@dataclass(frozen=True, eq=False)
class CdpInitProblem:
    """
    Ī₀ на плоском списке nK картин. Строки CDP имеют единичную норму,
    поэтому выбор идет просто по наибольшим psi. Ȳ₀ применяется через БПФ.
    """

    masks: MaskSet
    selected: np.ndarray
    selection: np.ndarray = dc_field(init=False, repr=False)

    def __post_init__(self):
        selected = np.array(self.selected, dtype=np.int64)
        total = self.masks.K * self.masks.n
        if selected.size < 1 or selected.min() < 0 or selected.max() >= total:
            raise ArgumentError("CdpInitProblem: индексы вне диапазона [0, nK)")
        if np.any(np.diff(selected) <= 0):
            raise ArgumentError("CdpInitProblem: индексы должны быть уникальными и упорядоченными")
        selection = np.zeros(total, dtype=bool)
        selection[selected] = True
        selection = selection.reshape(self.masks.K, self.masks.n)
        selected.setflags(write=False)
        selection.setflags(write=False)
        object.__setattr__(self, "selected", selected)
        object.__setattr__(self, "selection", selection)

    @property
    def field(self) -> Field:
        return Field.COMPLEX

    @property
    def size(self) -> int:
        return self.selected.size

    @property
    def n(self) -> int:
        return self.masks.n

    @property
    def K(self) -> int:
        return self.masks.K

    @property
    def discarded(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.K * self.n), self.selected)

    def apply(self, u: np.ndarray) -> np.ndarray:
        """Ȳ₀u = (1/|Ī₀|) Σ_k D^(k)ᴴ Fᴴ (sel_k ⊙ F D^(k) u)."""
        return cdp_adjoint(self.selection * cdp_apply(u, self.masks), self.masks) / self.size

    def block_apply(self, k: int, u: np.ndarray) -> np.ndarray:
        """Несмещенная оценка Ȳ₀u по одной маске: (K/|Ī₀|)·D^(k)ᴴ Fᴴ (sel_k ⊙ F D^(k) u)."""
        mask = self.masks.masks[k]
        coded = sp_fft.fft(mask * u, norm="ortho") * self.selection[k]
        return (self.K / self.size) * mask.conj() * sp_fft.ifft(coded, norm="ortho")

    def to_init_problem(self) -> InitProblem:
        """Плотная копия через cdp_sensing_rows (для проверок при малых n)."""
        rows = cdp_sensing_rows(self.masks).rows[self.selected]
        prob = problem_from_rows(rows, Field.COMPLEX)
        return replace(prob, selected=self.selected, source_dims=(self.K * self.n, self.n))


def select_cdp_index_set(meas: CdpMeasurements, masks: MaskSet, size: int) -> CdpInitProblem:
    """
    Выбирает size картин с наибольшими psi (равные значения по
    возрастанию плоского индекса k*n + j).

    Args:
        meas (CdpMeasurements): Амплитуды
        masks (MaskSet): Маски
        size (int): |Ī₀|

    Returns:
        CdpInitProblem: Задача инициализации
    """
    psi = _psi_matrix(meas, masks).ravel()
    if not 1 <= size <= psi.size:
        raise ArgumentError(f"|Ī₀| должно лежать в [1, {psi.size}], получено {size}")
    order = np.argsort(-psi, kind="stable")
    return CdpInitProblem(masks, np.sort(order[:size]))


def _resolve_block_vr(prob: CdpInitProblem, cfg: VrOpiConfig) -> Tuple[float, int]:
    eta = cfg.eta if cfg.eta is not None else prob.size / (2.0 * prob.K)
    epoch_len = cfg.epoch_len if cfg.epoch_len is not None else prob.K
    return replace(cfg, eta=eta, epoch_len=epoch_len).resolve(prob.size)


def cdp_vr_opi(prob: CdpInitProblem, cfg: VrOpiConfig = VrOpiConfig(),
               u0: Optional[np.ndarray] = None,
               callback: Optional[ProgressCallback] = None) -> np.ndarray:
    """
    Блочный VR-OPI: в каждой эпохе полный Ȳ₀ũ и T шагов по случайной
    маске с поправкой на якорь ũ. По умолчанию eta = |Ī₀|/(2K) (блочный
    оператор имеет норму K/|Ī₀|) и T = K.

    Args:
        prob (CdpInitProblem): Задача
        cfg (VrOpiConfig): Параметры
        u0 (Optional[np.ndarray]): Начальный вектор
        callback (Optional[ProgressCallback]): Вызывается после каждой эпохи

    Returns:
        np.ndarray: Единичный вектор
    """
    eta, epoch_len = _resolve_block_vr(prob, cfg)
    rng = make_rng(cfg.seed)
    masks = prob.masks.masks
    if u0 is None:
        u_tilde = rng.standard_normal(prob.n) + 1j * rng.standard_normal(prob.n)
    else:
        u_tilde = np.array(u0, dtype=np.complex128)
        if u_tilde.shape != (prob.n,) or np.linalg.norm(u_tilde) == 0:
            raise ArgumentError("Начальный вектор должен быть ненулевым вектором длины n")
    u_tilde = u_tilde / np.linalg.norm(u_tilde)
    scale = prob.K / prob.size
    passes_per_epoch = 1.0 + epoch_len / prob.K

    for epoch in range(cfg.epochs):
        anchors = prob.selection * cdp_apply(u_tilde, prob.masks)
        eta_w = eta * cdp_adjoint(anchors, prob.masks) / prob.size
        u = u_tilde.copy()
        zero_events = 0
        for k in rng.integers(0, prob.K, size=epoch_len):
            coded = sp_fft.fft(masks[k] * u, norm="ortho") * prob.selection[k] - anchors[k]
            nu = u + (eta * scale) * masks[k].conj() * sp_fft.ifft(coded, norm="ortho") + eta_w
            norm_nu = np.linalg.norm(nu)
            if norm_nu == 0.0:
                zero_events += 1
                continue
            u = nu / norm_nu
        if zero_events:
            logger.warning("Блочный VR-OPI: эпоха %d, нулевых шагов %d", epoch, zero_events)
        if not np.all(np.isfinite(u)):
            raise NumericalError("Блочный VR-OPI: нечисловые значения итерации")
        u_tilde = u
        if callback is not None:
            callback((epoch + 1) * passes_per_epoch, u_tilde)
    return u_tilde / np.linalg.norm(u_tilde)


def init_cdp(masks: MaskSet, meas: CdpMeasurements, cfg: InitConfig = InitConfig()) -> Iterate:
    """
    Инициализация для CDP: выбор Ī₀ по наибольшим psi, главный вектор
    (степенной метод или блочный VR-OPI), масштаб sqrt(Σ psi²/K).

    Args:
        masks (MaskSet): Маски
        meas (CdpMeasurements): Амплитуды
        cfg (InitConfig): Параметры

    Returns:
        Iterate: z₀
    """
    size = cfg.resolve_size(meas.m)
    prob = select_cdp_index_set(meas, masks, size)
    if cfg.solver is InitSolver.POWER:
        logger.debug("CDP-инициализация: степенной метод, |Ī₀|=%d, итераций %d", size, cfg.power_iters)
        u = power_method(prob, cfg.power_iters, cfg.seed)
    elif cfg.solver is InitSolver.VR_OPI:
        vr_cfg = cfg.vr_opi if cfg.vr_opi.seed is not None else replace(cfg.vr_opi, seed=cfg.seed)
        eta, epoch_len = _resolve_block_vr(prob, vr_cfg)
        logger.debug("CDP-инициализация: блочный VR-OPI, |Ī₀|=%d, eta=%.4g, S=%d, T=%d",
                     size, eta, vr_cfg.epochs, epoch_len)
        u = cdp_vr_opi(prob, vr_cfg)
    else:
        raise ArgumentError(f"Неизвестный метод инициализации {cfg.solver!r}")
    return Iterate(meas.norm_estimate() * u, Field.COMPLEX)


@dataclass(frozen=True)
class CdpSolverConfig:
    """Параметры блочного STAF; шаг mu = step·n, так что mu/n = step."""

    gamma: float = DEFAULT_GAMMA
    step: float = 1.0
    max_passes: float = CDP_MAX_PASSES
    target_rel_err: float = SUCCESS_THRESHOLD
    seed: SeedLike = None

    def validate(self) -> None:
        if not self.gamma > 0 or not self.step > 0 or not self.max_passes > 0:
            raise ArgumentError("CdpSolverConfig: gamma, step и max_passes должны быть положительными")
        if self.target_rel_err < 0:
            raise ArgumentError("target_rel_err не может быть отрицательной")

    def echo(self) -> Dict[str, Any]:
        return {
            "solver": "block-staf",
            "gamma": self.gamma,
            "step": self.step,
            "max_passes": self.max_passes,
            "target_rel_err": self.target_rel_err,
            "seed": seed_to_int(self.seed),
        }


def run_block_staf(masks: MaskSet, meas: CdpMeasurements, z0: Iterate,
                   cfg: CdpSolverConfig = CdpSolverConfig(), truth: Optional[Signal] = None,
                   success_threshold: float = SUCCESS_THRESHOLD) -> RunTrace:
    """
    Блочный STAF: в каждом проходе K блочных шагов со случайной маской,
    одна запись ошибки и потерь на проход.

    Args:
        masks (MaskSet): Маски
        meas (CdpMeasurements): Амплитуды
        z0 (Iterate): Начальная оценка
        cfg (CdpSolverConfig): Параметры
        truth (Optional[Signal]): Истинный сигнал
        success_threshold (float): Порог успеха

    Returns:
        RunTrace: История запуска
    """
    cfg.validate()
    psi = _psi_matrix(meas, masks)
    z = np.array(_as_vector(z0, masks.n), dtype=np.complex128)
    K, n = masks.K, masks.n
    echo = cfg.echo()
    logger.debug("Блочный STAF: n=%d, K=%d, параметры %s", n, K, echo)
    rng = make_rng(cfg.seed)
    recorder = PassRecorder(lambda v: cdp_loss(v, masks, meas), n, truth, cfg.target_rel_err, psi.ravel())
    total_steps = int(round(cfg.max_passes * K))
    done = 0
    stop = recorder.record(z)
    while not stop and done < total_steps:
        count = min(K, total_steps - done)
        for k in rng.integers(0, K, size=count):
            mask = masks.masks[k]
            residual = _block_residual(sp_fft.fft(mask * z, norm="ortho"), psi[k], cfg.gamma)
            z -= cfg.step * mask.conj() * sp_fft.ifft(residual, norm="ortho")
        done += count
        stop = recorder.record(z)
    return recorder.trace(z, done / K, success_threshold, echo)


def recover_cdp(x: Signal, masks: MaskSet, init_cfg: InitConfig = InitConfig(),
                cfg: CdpSolverConfig = CdpSolverConfig()) -> RunTrace:
    """
    Полный конвейер для одного сигнала: измерения, инициализация и
    блочный STAF. Вещественный сигнал встраивается как комплексный с
    нулевой мнимой частью.

    Args:
        x (Signal): Сигнал
        masks (MaskSet): Маски
        init_cfg (InitConfig): Параметры инициализации
        cfg (CdpSolverConfig): Параметры уточнения

    Returns:
        RunTrace: История запуска
    """
    truth = Signal(np.asarray(x.entries, dtype=np.complex128), Field.COMPLEX)
    meas = cdp_forward(truth, masks)
    init_seed, refine_seed = split_seed(cfg.seed, 2)
    if init_cfg.seed is None:
        init_cfg = replace(init_cfg, seed=init_seed)
    z0 = init_cdp(masks, meas, init_cfg)
    return run_block_staf(masks, meas, z0, replace(cfg, seed=refine_seed), truth)
