"""
Этап уточнения: усеченный стохастический шаг, усеченный шаг Качмажа,
выбор индексов, детерминированный базовый TAF, драйвер STAF и
диагностика (усеченный градиент, условие регулярности).
"""
import json
import logging
import math
from dataclasses import dataclass, field as dc_field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Union

import numpy as np
import pandas as pd

from signal_model import (
    Field,
    Iterate,
    MeasurementSet,
    SensingEnsemble,
    Signal,
    align_phase,
    amplitude_loss,
    relative_error,
)
from utils import (
    ArgumentError,
    DataError,
    DivergenceError,
    ExperimentIOError,
    NumericalError,
    SeedLike,
    has_plateaued,
    make_rng,
    seed_to_int,
)

logger = logging.getLogger(__name__)

DEFAULT_GAMMA = 0.7
MU_REAL = 0.8
MU_COMPLEX = 1.2
TAF_MU = 0.8
DEFAULT_MAX_PASSES = 1000.0
# Критерий успеха: относительная ошибка меньше 1e-5
SUCCESS_THRESHOLD = 1e-5
DIVERGENCE_LIMIT = 1e6
PLATEAU_WINDOW = 5
PLATEAU_TOL = 1e-12
# Потери ниже LOSS_FLOOR·½Σpsi² считаются нулевыми (уровень округления)
LOSS_FLOOR = 1e-24

# Оценки из анализа локальной сходимости вещественного случая: предел mu·n,
# множитель сжатия 1 − NU_CONSTANT/n и поправки ZETA1, ZETA2 условия регулярности
MU_CEILING = 1.0835
NU_CONSTANT = 0.1139
ZETA1 = 0.0782
ZETA2 = 0.2463


class StepRule(str, Enum):
    CONSTANT = "constant"
    KACZMARZ = "kaczmarz"


class Sampling(str, Enum):
    UNIFORM = "uniform"
    NORM_PROPORTIONAL = "norm"
    CYCLIC = "cyclic"


@dataclass(frozen=True)
class SolverConfig:
    """
    Параметры STAF. mu=None дает 0.8/n (вещественный случай) или 1.2/n
    (комплексный); при sampling=None равномерный выбор для постоянного шага и
    выбор пропорционально ‖a_i‖² для шага Качмажа.
    """

    gamma: float = DEFAULT_GAMMA
    step_rule: StepRule = StepRule.CONSTANT
    mu: Optional[float] = None
    sampling: Optional[Sampling] = None
    max_passes: float = DEFAULT_MAX_PASSES
    target_rel_err: float = SUCCESS_THRESHOLD
    seed: SeedLike = None

    def validate(self) -> None:
        if not self.gamma > 0:
            raise ArgumentError(f"gamma должна быть положительной, получено {self.gamma}")
        if self.mu is not None and not self.mu > 0:
            raise ArgumentError(f"mu должен быть положительным, получено {self.mu}")
        if not self.max_passes > 0:
            raise ArgumentError(f"max_passes должен быть положительным, получено {self.max_passes}")
        if self.target_rel_err < 0:
            raise ArgumentError("target_rel_err не может быть отрицательной")

    def resolve_mu(self, n: int, field: Field) -> float:
        if self.mu is not None:
            return float(self.mu)
        return (MU_REAL if field is Field.REAL else MU_COMPLEX) / n

    def resolve_sampling(self) -> Sampling:
        if self.sampling is not None:
            return self.sampling
        if self.step_rule is StepRule.KACZMARZ:
            return Sampling.NORM_PROPORTIONAL
        return Sampling.UNIFORM

    def echo(self, n: int, field: Field) -> Dict[str, Any]:
        """Итоговые значения параметров для логов и JSON-сводок."""
        return {
            "gamma": self.gamma,
            "step_rule": self.step_rule.value,
            "mu": self.resolve_mu(n, field) if self.step_rule is StepRule.CONSTANT else None,
            "sampling": self.resolve_sampling().value,
            "max_passes": self.max_passes,
            "target_rel_err": self.target_rel_err,
            "seed": seed_to_int(self.seed),
        }


@dataclass(frozen=True, eq=False)
class RunTrace:
    """История запуска: по одной записи на проход (m шагов)."""

    rel_err_per_pass: List[float]
    loss_per_pass: List[float]
    final: Iterate
    passes_used: float
    success: bool
    success_threshold: float = SUCCESS_THRESHOLD
    config_echo: Dict[str, Any] = dc_field(default_factory=dict)

    @property
    def final_rel_err(self) -> float:
        return self.rel_err_per_pass[-1] if self.rel_err_per_pass else float("nan")


def truncation_indicator(inner: complex, psi_i: float, gamma: float) -> bool:
    """
    Правило усечения 𝟙{|a_iᴴz| >= psi_i/(1+gamma)}.

    Args:
        inner: Скалярное произведение a_iᴴz
        psi_i (float): Амплитуда
        gamma (float): Порог усечения

    Returns:
        bool: True, если слагаемое градиента сохраняется
    """
    return bool(abs(inner) >= psi_i / (1.0 + gamma))


def _phase(c: complex) -> complex:
    # sign(0) := 1
    magnitude = abs(c)
    return c / magnitude if magnitude > 0 else 1.0


def _update(z: np.ndarray, a: np.ndarray, psi_i: float, step: float, gamma: float) -> np.ndarray:
    c = np.vdot(a, z)
    if not truncation_indicator(c, psi_i, gamma):
        return z
    return z - (step * (c - psi_i * _phase(c))) * a


def _single_step_args(z: Iterate, a_i: np.ndarray):
    a = np.asarray(a_i)
    if a.shape != (z.n,):
        raise ArgumentError(f"Строка длины {a.shape} не согласована с n = {z.n}")
    dtype = np.result_type(z.z.dtype, a.dtype)
    return np.asarray(z.z, dtype=dtype), a


def _finish_step(new_z: np.ndarray, z: Iterate) -> Iterate:
    if not np.all(np.isfinite(new_z)):
        raise NumericalError("Шаг дал нечисловые значения")
    return Iterate.from_array(new_z, z.pass_count)


def stochastic_step(z: Iterate, a_i: np.ndarray, psi_i: float, mu: float,
                    gamma: float = DEFAULT_GAMMA) -> Iterate:
    """
    Усеченный стохастический шаг
    z' = z − mu(a_iᴴz − psi_i·sign(a_iᴴz))·a_i, если правило усечения выполнено.

    Args:
        z (Iterate): Текущая оценка
        a_i (np.ndarray): Измерительный вектор
        psi_i (float): Амплитуда
        mu (float): Шаг
        gamma (float): Порог усечения

    Returns:
        Iterate: Новая оценка
    """
    if not mu > 0:
        raise ArgumentError(f"Шаг mu должен быть положительным, получено {mu}")
    zv, a = _single_step_args(z, a_i)
    return _finish_step(_update(zv, a, float(psi_i), float(mu), gamma), z)


def kaczmarz_step(z: Iterate, a_i: np.ndarray, psi_i: float,
                  gamma: float = DEFAULT_GAMMA) -> Iterate:
    """
    Усеченный шаг Качмажа с mu = 1/‖a_i‖²: после срабатывания
    a_iᴴz' = psi_i·sign(a_iᴴz).

    Args:
        z (Iterate): Текущая оценка
        a_i (np.ndarray): Измерительный вектор
        psi_i (float): Амплитуда
        gamma (float): Порог усечения

    Returns:
        Iterate: Новая оценка
    """
    zv, a = _single_step_args(z, a_i)
    sq_norm = float(np.vdot(a, a).real)
    if sq_norm == 0.0:
        raise DataError("Шаг Качмажа не определен для нулевой строки")
    return _finish_step(_update(zv, a, float(psi_i), 1.0 / sq_norm, gamma), z)


def _norm_probabilities(ens: SensingEnsemble) -> np.ndarray:
    return ens.row_sq_norms / ens.row_sq_norms.sum()


def _draw_indices(scheme: Sampling, ens: SensingEnsemble, start: int,
                  count: int, rng: np.random.Generator,
                  probabilities: Optional[np.ndarray] = None) -> np.ndarray:
    if scheme is Sampling.UNIFORM:
        return rng.integers(0, ens.m, size=count)
    if scheme is Sampling.NORM_PROPORTIONAL:
        p = _norm_probabilities(ens) if probabilities is None else probabilities
        return rng.choice(ens.m, size=count, p=p)
    if scheme is Sampling.CYCLIC:
        return (start + np.arange(count)) % ens.m
    raise ArgumentError(f"Неизвестная схема выбора {scheme!r}")


def sample_index(scheme: Sampling, ens: SensingEnsemble, step_counter: int,
                 rng: np.random.Generator) -> int:
    """
    Индекс уравнения (с нуля): равномерно, пропорционально ‖a_i‖² или по кругу.

    Args:
        scheme (Sampling): Схема
        ens (SensingEnsemble): Ансамбль
        step_counter (int): Номер шага (для кругового обхода)
        rng (np.random.Generator): Генератор

    Returns:
        int: Индекс
    """
    return int(_draw_indices(scheme, ens, step_counter, 1, rng)[0])


def _residuals(z: np.ndarray, ens: SensingEnsemble, meas: MeasurementSet, gamma: float) -> np.ndarray:
    c = ens.inner(z)
    magnitude = np.abs(c)
    keep = magnitude >= meas.psi / (1.0 + gamma)
    phase = np.where(magnitude > 0, c / np.where(magnitude > 0, magnitude, 1.0), 1.0)
    return np.where(keep, c - meas.psi * phase, 0.0)


def _check_problem(z: np.ndarray, ens: SensingEnsemble, meas: MeasurementSet) -> None:
    if z.shape != (ens.n,):
        raise ArgumentError(f"Оценка длины {z.shape} не согласована с n = {ens.n}")
    if meas.m != ens.m:
        raise ArgumentError(f"Число измерений {meas.m} не совпадает с m = {ens.m}")


def truncated_gradient(z: Union[Iterate, np.ndarray], ens: SensingEnsemble,
                       meas: MeasurementSet, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """
    Усеченный градиент Σ_i (a_iᴴz − psi_i·sign(a_iᴴz))·a_i·𝟙{...} без
    нормировки на m.

    Args:
        z: Оценка
        ens (SensingEnsemble): Ансамбль
        meas (MeasurementSet): Измерения
        gamma (float): Порог усечения

    Returns:
        np.ndarray: Вектор градиента
    """
    zv = z.z if isinstance(z, Iterate) else np.asarray(z)
    _check_problem(zv, ens, meas)
    return ens.rows.T @ _residuals(zv, ens, meas, gamma)


def taf_full_step(z: Iterate, ens: SensingEnsemble, meas: MeasurementSet,
                  mu: float = TAF_MU, gamma: float = DEFAULT_GAMMA) -> Iterate:
    """Детерминированный шаг TAF: z − (mu/m)·∇ℓ_tr(z)."""
    grad = truncated_gradient(z, ens, meas, gamma)
    return _finish_step(z.z - (mu / ens.m) * grad, z)


def regularity_inner_product(z: Union[Iterate, np.ndarray], x: Signal, ens: SensingEnsemble,
                             meas: MeasurementSet, gamma: float = DEFAULT_GAMMA) -> float:
    """
    Диагностика условия регулярности ⟨h, ∇ℓ_tr(z)/m⟩, h = z − x после
    выравнивания глобальной фазы.

    Args:
        z: Оценка
        x (Signal): Истинный сигнал
        ens (SensingEnsemble): Ансамбль
        meas (MeasurementSet): Измерения
        gamma (float): Порог усечения

    Returns:
        float: Вещественная часть скалярного произведения
    """
    zv = z.z if isinstance(z, Iterate) else np.asarray(z)
    aligned = align_phase(zv, x)
    h = aligned - x.entries
    grad = truncated_gradient(aligned, ens, meas, gamma) / ens.m
    return float(np.vdot(h, grad).real)


def expected_step_distance(z: Union[Iterate, np.ndarray], x: Signal, ens: SensingEnsemble,
                           meas: MeasurementSet, cfg: SolverConfig = SolverConfig()) -> float:
    """
    Точное математическое ожидание dist²(z⁺, x) по всем m исходам одного
    шага (перебором), с весами выбранной схемы выбора индексов.

    Args:
        z: Оценка
        x (Signal): Истинный сигнал
        ens (SensingEnsemble): Ансамбль
        meas (MeasurementSet): Измерения
        cfg (SolverConfig): Правило шага и схема выбора

    Returns:
        float: E[dist²(z⁺, x)]
    """
    zv = z.z if isinstance(z, Iterate) else np.asarray(z)
    _check_problem(zv, ens, meas)
    residual = _residuals(zv, ens, meas, cfg.gamma)
    if cfg.step_rule is StepRule.KACZMARZ:
        steps = 1.0 / ens.row_sq_norms
    else:
        steps = np.full(ens.m, cfg.resolve_mu(ens.n, ens.field))
    candidates = zv[None, :] - (steps * residual)[:, None] * ens.rows
    xv = x.entries
    sq_norms = np.einsum("ij,ij->i", candidates.conj(), candidates).real
    cross = np.abs(candidates @ xv.conj())
    dist_sq = np.maximum(sq_norms + np.vdot(xv, xv).real - 2.0 * cross, 0.0)
    if cfg.resolve_sampling() is Sampling.NORM_PROPORTIONAL:
        weights = _norm_probabilities(ens)
    else:
        weights = np.full(ens.m, 1.0 / ens.m)
    return float(weights @ dist_sq)


def _start_vector(z0: Iterate, ens: SensingEnsemble, meas: MeasurementSet) -> np.ndarray:
    if z0.field is Field.COMPLEX and ens.field is Field.REAL:
        raise ArgumentError("Комплексная начальная оценка для вещественной задачи")
    z = np.array(z0.z, dtype=ens.field.dtype)
    _check_problem(z, ens, meas)
    return z


class PassRecorder:
    """Записи раз в проход и проверки остановки/расходимости."""

    def __init__(self, loss_fn: Callable[[np.ndarray], float], n: int,
                 truth: Optional[Signal], target: float, psi: Optional[np.ndarray] = None):
        self.loss_fn, self.truth, self.target = loss_fn, truth, target
        self.loss_floor = 0.0 if psi is None else LOSS_FLOOR * 0.5 * float(np.dot(psi, psi))
        self.rel_errs: List[float] = []
        self.losses: List[float] = []
        if truth is not None and truth.n != n:
            raise ArgumentError("Истинный сигнал не согласован с размерностью задачи")

    def record(self, z: np.ndarray) -> bool:
        """Возвращает True, если запуск пора остановить."""
        if not np.all(np.isfinite(z)):
            raise NumericalError("Итерация содержит нечисловые значения")
        loss = self.loss_fn(z)
        self.losses.append(loss)
        if self.truth is None:
            self.rel_errs.append(float("nan"))
            return loss <= self.loss_floor or has_plateaued(self.losses, PLATEAU_WINDOW, PLATEAU_TOL)
        rel = relative_error(z, self.truth)
        self.rel_errs.append(rel)
        if rel > DIVERGENCE_LIMIT:
            raise DivergenceError(f"Относительная ошибка {rel:.3g} превысила {DIVERGENCE_LIMIT:g}")
        return rel < self.target

    def trace(self, z: np.ndarray, passes: float, threshold: float,
              echo: Dict[str, Any]) -> RunTrace:
        success = self.truth is not None and self.rel_errs[-1] < threshold
        return RunTrace(self.rel_errs, self.losses, Iterate.from_array(z, passes),
                        passes, bool(success), threshold, echo)


def run_staf(ens: SensingEnsemble, meas: MeasurementSet, z0: Iterate,
             cfg: SolverConfig = SolverConfig(), truth: Optional[Signal] = None,
             success_threshold: float = SUCCESS_THRESHOLD) -> RunTrace:
    """
    Драйвер STAF: max_passes·m одиночных усеченных шагов, запись ошибки и
    потерь раз в проход, остановка по target_rel_err (если известен x) или
    по выходу потерь на плато.

    Args:
        ens (SensingEnsemble): Ансамбль
        meas (MeasurementSet): Измерения
        z0 (Iterate): Начальная оценка
        cfg (SolverConfig): Параметры
        truth (Optional[Signal]): Истинный сигнал для контроля ошибки
        success_threshold (float): Порог успеха

    Returns:
        RunTrace: История запуска
    """
    cfg.validate()
    z = _start_vector(z0, ens, meas)
    m, n = ens.m, ens.n
    gamma = cfg.gamma
    mu = cfg.resolve_mu(n, ens.field)
    sampling = cfg.resolve_sampling()
    echo = cfg.echo(n, ens.field)
    logger.debug("STAF: m=%d, n=%d, параметры %s", m, n, echo)

    kaczmarz = cfg.step_rule is StepRule.KACZMARZ
    if kaczmarz and np.any(ens.row_sq_norms == 0):
        raise DataError("Шаг Качмажа не определен для нулевой строки")
    if not kaczmarz and ens.field is Field.REAL and mu * n > MU_CEILING:
        logger.warning("Шаг mu·n = %.3g выше оценки устойчивости %.4g, сходимость не гарантирована",
                       mu * n, MU_CEILING)
    rows = ens.rows
    psi = meas.psi.tolist()
    thresholds = (meas.psi / (1.0 + gamma)).tolist()
    steps = (1.0 / ens.row_sq_norms).tolist() if kaczmarz else None
    probabilities = _norm_probabilities(ens) if sampling is Sampling.NORM_PROPORTIONAL else None
    rng = make_rng(cfg.seed)
    vdot = np.vdot

    recorder = PassRecorder(lambda v: amplitude_loss(v, ens, meas), n, truth, cfg.target_rel_err, meas.psi)
    total_steps = int(round(cfg.max_passes * m))
    done = 0
    stop = recorder.record(z)
    while not stop and done < total_steps:
        count = min(m, total_steps - done)
        for i in _draw_indices(sampling, ens, done, count, rng, probabilities).tolist():
            a = rows[i]
            c = vdot(a, z)
            magnitude = abs(c)
            if magnitude < thresholds[i]:
                continue
            phase = c / magnitude if magnitude > 0.0 else 1.0
            step = steps[i] if kaczmarz else mu
            z -= (step * (c - psi[i] * phase)) * a
        done += count
        stop = recorder.record(z)
    return recorder.trace(z, done / m, success_threshold, echo)


def run_taf(ens: SensingEnsemble, meas: MeasurementSet, z0: Iterate, mu: float = TAF_MU,
            gamma: float = DEFAULT_GAMMA, max_iters: int = int(DEFAULT_MAX_PASSES),
            truth: Optional[Signal] = None, target_rel_err: float = SUCCESS_THRESHOLD,
            success_threshold: float = SUCCESS_THRESHOLD) -> RunTrace:
    """
    Базовый детерминированный TAF: один полный усеченный градиентный шаг
    на проход по данным.

    Args:
        ens (SensingEnsemble): Ансамбль
        meas (MeasurementSet): Измерения
        z0 (Iterate): Начальная оценка
        mu (float): Шаг (внутри делится на m)
        gamma (float): Порог усечения
        max_iters (int): Число итераций
        truth (Optional[Signal]): Истинный сигнал
        target_rel_err (float): Порог остановки
        success_threshold (float): Порог успеха

    Returns:
        RunTrace: История запуска
    """
    if not mu > 0 or not gamma > 0 or max_iters < 1:
        raise ArgumentError("TAF: mu, gamma и число итераций должны быть положительными")
    z = _start_vector(z0, ens, meas)
    echo = {"solver": "taf", "mu": mu, "gamma": gamma, "max_passes": max_iters,
            "target_rel_err": target_rel_err}
    logger.debug("TAF: m=%d, n=%d, параметры %s", ens.m, ens.n, echo)
    recorder = PassRecorder(lambda v: amplitude_loss(v, ens, meas), ens.n, truth, target_rel_err, meas.psi)
    scale = mu / ens.m
    done = 0
    stop = recorder.record(z)
    while not stop and done < max_iters:
        z = z - scale * (ens.rows.T @ _residuals(z, ens, meas, gamma))
        done += 1
        stop = recorder.record(z)
    return recorder.trace(z, float(done), success_threshold, echo)


def trace_frame(trace: RunTrace) -> pd.DataFrame:
    """Таблица (pass, rel_err, loss) по проходам."""
    return pd.DataFrame({
        "pass": np.arange(len(trace.loss_per_pass)),
        "rel_err": trace.rel_err_per_pass,
        "loss": trace.loss_per_pass,
    })


def trace_summary(trace: RunTrace) -> Dict[str, Any]:
    """JSON-сводка запуска."""
    final = trace.final_rel_err
    return {
        "passes_used": trace.passes_used,
        "final_rel_err": None if math.isnan(final) else final,
        "final_loss": trace.loss_per_pass[-1],
        "success": trace.success,
        "success_threshold": trace.success_threshold,
        "config_echo": trace.config_echo,
    }


def save_trace(trace: RunTrace, path: Union[str, Path]) -> Path:
    """
    Сохраняет историю в CSV (path) и сводку в JSON рядом (*.json).

    Args:
        trace (RunTrace): История
        path: Путь к CSV

    Returns:
        Path: Путь к JSON-сводке
    """
    csv_path = Path(path)
    json_path = csv_path.with_suffix(".json")
    try:
        trace_frame(trace).to_csv(csv_path, index=False, float_format="%.17g")
        json_path.write_text(json.dumps(trace_summary(trace), indent=2))
    except OSError as e:
        raise ExperimentIOError(csv_path, f"не удалось сохранить историю: {e}") from e
    logger.info("История запуска сохранена в %s и %s", csv_path, json_path)
    return json_path
