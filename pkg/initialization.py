"""
Ортогонально-продвигающая инициализация: выбор индексов, собственные
векторы матрицы Ȳ₀ (степенной метод и VR-OPI), масштабирование по оценке
нормы и диагностика спектрального зазора.

По умолчанию в Ī₀ берется ⌈m/6⌉ строк, а не 5m/6: при 5m/6 направление x
остается внутри сплошного спектра Ȳ₀ и начальная ошибка не опускается ниже 1
(медиана 1.24 против 0.56 при n = 100, m = 800). Доля 5/6 доступна через
InitConfig.fraction. Шаг VR-OPI по умолчанию 1/sqrt(|Ī₀|) для нормированных
строк, шаг 20/m дает VrOpiConfig.unnormalized_rows.
"""
import logging
import math
from dataclasses import dataclass, field as dc_field, replace
from enum import Enum
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.sparse.linalg import LinearOperator, eigsh

from signal_model import Field, Iterate, MeasurementSet, SensingEnsemble
from utils import ArgumentError, DataError, NumericalError, SeedLike, make_rng

logger = logging.getLogger(__name__)

# Доля строк с наибольшими psi_i/‖a_i‖, попадающих в Ī₀
DEFAULT_FRACTION = 1.0 / 6.0
# До этой размерности спектр считается плотным разложением
ORACLE_MAX_N = 512
POWER_MAX_RESTARTS = 3
DEFAULT_POWER_ITERS = 100

# callback(проходы по выбранным данным, текущий единичный вектор)
ProgressCallback = Callable[[float, np.ndarray], None]


class InitSolver(str, Enum):
    POWER = "power"
    VR_OPI = "vr-opi"


@dataclass(frozen=True, eq=False)
class InitProblem:
    """
    Нормированные строки d_i = a_i/‖a_i‖ для i из Ī₀, уложенные построчно
    (|Ī₀| x n). Матрица Ȳ₀ = (1/|Ī₀|) Σ d_i d_iᴴ явно не строится.
    """

    selected: np.ndarray
    normalized_rows: np.ndarray
    source_dims: Tuple[int, int]
    field: Field = Field.REAL

    def __post_init__(self):
        selected = np.array(self.selected, dtype=np.int64)
        rows = np.ascontiguousarray(self.normalized_rows, dtype=self.field.dtype)
        if selected.size < 1 or rows.shape[0] != selected.size:
            raise ArgumentError("InitProblem: нужен непустой набор строк")
        if np.any(np.diff(selected) <= 0):
            raise ArgumentError("InitProblem: индексы должны быть уникальными и упорядоченными")
        selected.setflags(write=False)
        rows.setflags(write=False)
        object.__setattr__(self, "selected", selected)
        object.__setattr__(self, "normalized_rows", rows)

    @property
    def size(self) -> int:
        return self.selected.size

    @property
    def n(self) -> int:
        return self.normalized_rows.shape[1]

    @property
    def discarded(self) -> np.ndarray:
        """Дополнение I₀: строки, наиболее ортогональные к x."""
        return np.setdiff1d(np.arange(self.source_dims[0]), self.selected)

    def apply(self, u: np.ndarray) -> np.ndarray:
        return apply_Y(self, u)


@dataclass(frozen=True)
class EigenReport:
    lambda1: float
    lambda2: float
    delta: float
    defined: bool = True
    v1: Optional[np.ndarray] = dc_field(default=None, repr=False, compare=False)

    def to_dict(self) -> Dict[str, Any]:
        return {"lambda1": self.lambda1, "lambda2": self.lambda2,
                "delta": self.delta if self.defined else None}


@dataclass(frozen=True)
class VrOpiConfig:
    """
    Параметры VR-OPI. eta=None означает шаг 1/sqrt(|Ī₀|) для нормированных
    строк, epoch_len=None означает T = |Ī₀|.
    """

    eta: Optional[float] = None
    epochs: int = 100
    epoch_len: Optional[int] = None
    seed: SeedLike = None

    @classmethod
    def unnormalized_rows(cls, m: int, **kwargs) -> "VrOpiConfig":
        """Шаг eta = 20/m для ненормированных строк."""
        return cls(eta=20.0 / m, **kwargs)

    def resolve(self, size: int) -> Tuple[float, int]:
        eta = self.eta if self.eta is not None else 1.0 / math.sqrt(size)
        epoch_len = self.epoch_len if self.epoch_len is not None else size
        if eta <= 0 or self.epochs < 1 or epoch_len < 1:
            raise ArgumentError(f"VrOpiConfig: параметры должны быть положительны ({eta}, {self.epochs}, {epoch_len})")
        return float(eta), int(epoch_len)

    def passes_per_epoch(self, size: int) -> float:
        """Полный градиент плюс T одиночных шагов, в проходах по Ī₀."""
        _, epoch_len = self.resolve(size)
        return 1.0 + epoch_len / size


@dataclass(frozen=True)
class InitConfig:
    solver: InitSolver = InitSolver.VR_OPI
    size: Optional[int] = None
    fraction: float = DEFAULT_FRACTION
    power_iters: int = DEFAULT_POWER_ITERS
    vr_opi: VrOpiConfig = VrOpiConfig()
    seed: SeedLike = None

    @classmethod
    def for_budget(cls, solver: InitSolver, passes: int, seed: SeedLike = None, **kwargs) -> "InitConfig":
        """
        Конфигурация с бюджетом в проходах по выбранным данным: степенной
        метод тратит один проход на итерацию, эпоха VR-OPI тратит два.
        """
        if passes < 1:
            raise ArgumentError("Бюджет инициализации должен быть не меньше одного прохода")
        if solver is InitSolver.POWER:
            return cls(solver=solver, power_iters=int(passes), seed=seed, **kwargs)
        return cls(solver=solver, vr_opi=VrOpiConfig(epochs=max(1, int(passes) // 2)), seed=seed, **kwargs)

    def resolve_size(self, m: int) -> int:
        if self.size is not None:
            return int(self.size)
        if not 0 < self.fraction <= 1:
            raise ArgumentError(f"Доля Ī₀ должна лежать в (0, 1], получено {self.fraction}")
        return max(1, min(m, math.ceil(round(self.fraction * m, 9))))


def default_index_set_size(m: int, fraction: float = DEFAULT_FRACTION) -> int:
    """Размер |Ī₀| = ⌈fraction·m⌉."""
    return InitConfig(fraction=fraction).resolve_size(m)


def problem_from_rows(rows: np.ndarray, field: Optional[Field] = None) -> InitProblem:
    """
    Строит InitProblem напрямую из строк (все строки считаются выбранными).

    Args:
        rows (np.ndarray): Матрица k x n
        field (Optional[Field]): Поле; по умолчанию определяется по типу

    Returns:
        InitProblem: Задача с нормированными строками
    """
    rows = np.asarray(rows)
    if field is None:
        field = Field.COMPLEX if np.iscomplexobj(rows) else Field.REAL
    rows = np.array(rows, dtype=field.dtype)
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms == 0):
        raise DataError("Нулевая строка не может быть нормирована")
    return InitProblem(np.arange(rows.shape[0]), rows / norms[:, None], rows.shape, field)


def planted_gap_problem(n: int, gap: float, size: Optional[int] = None,
                        seed: SeedLike = None) -> InitProblem:
    """
    Синтетическая задача с известным зазором: строки берутся из столбцов случайной
    ортогональной матрицы с кратностями, дающими λ₂/λ₁ = 1 − gap.

    Args:
        n (int): Размерность (n >= 2)
        gap (float): Требуемый зазор δ в (0, 1)
        size (Optional[int]): Число строк; по умолчанию 20n
        seed: Семя поворота

    Returns:
        InitProblem: Задача
    """
    if n < 2 or not 0 < gap < 1:
        raise ArgumentError("planted_gap_problem: нужно n >= 2 и 0 < gap < 1")
    size = 20 * n if size is None else int(size)
    top = size // 5
    second = int(round(top * (1.0 - gap)))
    rest = size - top - second
    if rest < n - 2 or second < 1:
        raise ArgumentError("planted_gap_problem: слишком мало строк для такой размерности")
    counts = np.zeros(n, dtype=np.int64)
    counts[0], counts[1] = top, second
    if n > 2:
        counts[2:] = rest // (n - 2)
        counts[2:2 + rest % (n - 2)] += 1
    else:
        counts[0] += rest
    basis, _ = np.linalg.qr(make_rng(seed).standard_normal((n, n)))
    rows = np.repeat(basis.T, counts, axis=0)
    return problem_from_rows(rows, Field.REAL)


def select_index_set(meas: MeasurementSet, ens: SensingEnsemble, size: int) -> InitProblem:
    """
    Выбирает Ī₀: индексы size наибольших отношений psi_i/‖a_i‖.
    Равные отношения упорядочиваются по возрастанию индекса.

    Args:
        meas (MeasurementSet): Измерения
        ens (SensingEnsemble): Ансамбль
        size (int): |Ī₀|

    Returns:
        InitProblem: Выбранные нормированные строки
    """
    if meas.m != ens.m:
        raise ArgumentError(f"Число измерений {meas.m} не совпадает с m = {ens.m}")
    if not 1 <= size <= ens.m:
        raise ArgumentError(f"|Ī₀| должно лежать в [1, {ens.m}], получено {size}")
    norms = np.sqrt(ens.row_sq_norms)
    if np.any(norms == 0):
        raise DataError("Нулевая строка в ансамбле: отношение psi_i/‖a_i‖ не определено")
    ratios = meas.psi / norms
    order = np.argsort(-ratios, kind="stable")
    selected = np.sort(order[:size])
    rows = ens.rows[selected] / norms[selected, None]
    return InitProblem(selected, rows, (ens.m, ens.n), ens.field)


def apply_Y(prob: InitProblem, u: np.ndarray) -> np.ndarray:
    """
    Ȳ₀u = (1/|Ī₀|) Σ d_i (d_iᴴu) за O(n|Ī₀|) без построения матрицы n x n.

    Args:
        prob (InitProblem): Задача
        u (np.ndarray): Вектор длины n

    Returns:
        np.ndarray: Ȳ₀u
    """
    u = np.asarray(u)
    if u.shape != (prob.n,):
        raise ArgumentError(f"Ожидался вектор длины {prob.n}, получено {u.shape}")
    rows = prob.normalized_rows
    return rows.T @ (rows.conj() @ u) / prob.size


def _random_unit(rng: np.random.Generator, n: int, fld: Field) -> np.ndarray:
    u = rng.standard_normal(n)
    if fld is Field.COMPLEX:
        u = u + 1j * rng.standard_normal(n)
    return u / np.linalg.norm(u)


def _start_vector(u0: Optional[np.ndarray], rng: np.random.Generator, n: int, fld: Field) -> np.ndarray:
    if u0 is None:
        return _random_unit(rng, n, fld)
    u = np.array(u0, dtype=fld.dtype)
    if u.shape != (n,) or np.linalg.norm(u) == 0:
        raise ArgumentError("Начальный вектор должен быть ненулевым вектором длины n")
    return u / np.linalg.norm(u)


def power_method(prob: Any, iters: int = DEFAULT_POWER_ITERS, seed: SeedLike = None,
                 u0: Optional[np.ndarray] = None,
                 callback: Optional[ProgressCallback] = None) -> np.ndarray:
    """
    Степенной метод u_{t+1} = Ȳ₀u_t/‖Ȳ₀u_t‖. Работает с любой задачей,
    у которой есть n, field и apply(u).

    Args:
        prob: Задача инициализации
        iters (int): Число итераций
        seed: Семя случайного старта
        u0 (Optional[np.ndarray]): Начальный вектор
        callback (Optional[ProgressCallback]): Вызывается после каждой итерации

    Returns:
        np.ndarray: Единичный вектор
    """
    if iters < 1:
        raise ArgumentError("Число итераций степенного метода должно быть >= 1")
    rng = make_rng(seed)
    u = _start_vector(u0, rng, prob.n, prob.field)
    restarts = 0
    done = 0
    while done < iters:
        v = prob.apply(u)
        norm_v = np.linalg.norm(v)
        if norm_v == 0.0:
            restarts += 1
            if restarts > POWER_MAX_RESTARTS:
                raise NumericalError("Степенной метод: Ȳ₀u = 0 после всех перезапусков")
            logger.warning("Степенной метод: Ȳ₀u = 0, перезапуск %d", restarts)
            u = _random_unit(rng, prob.n, prob.field)
            continue
        u = v / norm_v
        done += 1
        if callback is not None:
            callback(float(done), u)
    return u / np.linalg.norm(u)


def vr_opi(prob: InitProblem, cfg: VrOpiConfig = VrOpiConfig(),
           u0: Optional[np.ndarray] = None,
           callback: Optional[ProgressCallback] = None) -> np.ndarray:
    """
    VR-OPI: S эпох; в каждой один полный градиент w = Ȳ₀ũ_s и T шагов
    nu = u + eta[d_i(d_iᴴu − d_iᴴũ_s) + w] с нормировкой, i равномерно из Ī₀.

    Args:
        prob (InitProblem): Задача
        cfg (VrOpiConfig): Параметры
        u0 (Optional[np.ndarray]): Начальный вектор ũ_0
        callback (Optional[ProgressCallback]): Вызывается после каждой эпохи

    Returns:
        np.ndarray: Единичный вектор ũ_S
    """
    eta, epoch_len = cfg.resolve(prob.size)
    rng = make_rng(cfg.seed)
    rows = prob.normalized_rows
    conj_rows = rows.conj() if prob.field is Field.COMPLEX else rows
    u_tilde = _start_vector(u0, rng, prob.n, prob.field)
    passes_per_epoch = 1.0 + epoch_len / prob.size
    zero_limit = epoch_len / 10.0

    for epoch in range(cfg.epochs):
        anchor = conj_rows @ u_tilde
        eta_w = eta * (rows.T @ anchor) / prob.size
        u = u_tilde.copy()
        zero_events = 0
        for i in rng.integers(0, prob.size, size=epoch_len):
            coef = eta * (np.dot(conj_rows[i], u) - anchor[i])
            nu = u + coef * rows[i] + eta_w
            norm_nu = np.linalg.norm(nu)
            if norm_nu == 0.0:
                zero_events += 1
                continue
            u = nu / norm_nu
        if zero_events:
            logger.warning("VR-OPI: эпоха %d, нулевых шагов %d", epoch, zero_events)
        if zero_events > zero_limit:
            raise NumericalError(f"VR-OPI: {zero_events} нулевых шагов за эпоху из {epoch_len}")
        if not np.all(np.isfinite(u)):
            raise NumericalError("VR-OPI: нечисловые значения итерации")
        u_tilde = u
        if callback is not None:
            callback((epoch + 1) * passes_per_epoch, u_tilde)
    return u_tilde / np.linalg.norm(u_tilde)


def scale_estimate(u: np.ndarray, meas: MeasurementSet) -> Iterate:
    """
    z₀ = sqrt((1/m) Σ psi_i²) · u.

    Args:
        u (np.ndarray): Единичный вектор
        meas (MeasurementSet): Измерения

    Returns:
        Iterate: Начальная оценка
    """
    u = np.asarray(u)
    if u.ndim != 1:
        raise ArgumentError("Ожидался вектор")
    if abs(np.linalg.norm(u) - 1.0) > 1e-9:
        raise ArgumentError(f"Вектор должен быть единичным, ‖u‖ = {np.linalg.norm(u)}")
    scale = math.sqrt(float(np.mean(meas.y)))
    return Iterate.from_array(scale * u)


def _dense_Y(prob: InitProblem) -> np.ndarray:
    rows = prob.normalized_rows
    return rows.T @ rows.conj() / prob.size


def eigen_report(prob: InitProblem, with_vector: bool = True) -> EigenReport:
    """
    Два старших собственных значения Ȳ₀ и зазор δ = (λ₁ − λ₂)/λ₁.
    Для n <= 512 используется плотное разложение, иначе метод Ланцоша
    на матрично-свободном операторе.

    Args:
        prob (InitProblem): Задача
        with_vector (bool): Сохранить главный собственный вектор

    Returns:
        EigenReport: Отчет
    """
    n = prob.n
    if n == 1:
        values = np.array([0.0, float(np.real(_dense_Y(prob))[0, 0])])
        vectors = np.ones((1, 2), dtype=prob.field.dtype)
    elif n <= ORACLE_MAX_N:
        values, vectors = linalg.eigh(_dense_Y(prob), subset_by_index=[n - 2, n - 1])
    else:
        operator = LinearOperator((n, n), matvec=prob.apply, dtype=prob.field.dtype)
        values, vectors = eigsh(operator, k=2, which="LA", tol=1e-10)
        values = np.real(values)
        order = np.argsort(values)
        values, vectors = values[order], vectors[:, order]
    lambda1 = max(float(values[-1]), 0.0)
    lambda2 = min(max(float(values[-2]), 0.0), lambda1)
    v1 = vectors[:, -1] / np.linalg.norm(vectors[:, -1]) if with_vector else None
    if lambda1 == 0.0:
        logger.warning("Ȳ₀ = 0: зазор не определен")
        return EigenReport(0.0, 0.0, float("nan"), defined=False, v1=v1)
    return EigenReport(lambda1, lambda2, (lambda1 - lambda2) / lambda1, v1=v1)


def init_orthogonality_promoting(ens: SensingEnsemble, meas: MeasurementSet,
                                 cfg: InitConfig = InitConfig()) -> Iterate:
    """
    Полная инициализация: выбор Ī₀, главный собственный вектор выбранным
    методом и масштабирование по оценке нормы.

    Args:
        ens (SensingEnsemble): Ансамбль
        meas (MeasurementSet): Измерения
        cfg (InitConfig): Параметры

    Returns:
        Iterate: z₀
    """
    size = cfg.resolve_size(ens.m)
    prob = select_index_set(meas, ens, size)
    if cfg.solver is InitSolver.POWER:
        logger.debug("Инициализация: степенной метод, |Ī₀|=%d, итераций %d", size, cfg.power_iters)
        u = power_method(prob, cfg.power_iters, cfg.seed)
    elif cfg.solver is InitSolver.VR_OPI:
        vr_cfg = cfg.vr_opi if cfg.vr_opi.seed is not None else replace(cfg.vr_opi, seed=cfg.seed)
        eta, epoch_len = vr_cfg.resolve(size)
        logger.debug("Инициализация: VR-OPI, |Ī₀|=%d, eta=%.4g, S=%d, T=%d",
                     size, eta, vr_cfg.epochs, epoch_len)
        u = vr_opi(prob, vr_cfg)
    else:
        raise ArgumentError(f"Неизвестный метод инициализации {cfg.solver!r}")
    return scale_estimate(u, meas)
