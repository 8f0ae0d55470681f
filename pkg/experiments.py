"""
Экспериментальный стенд: спецификации экспериментов, параллельные
Монте-Карло испытания с независимыми потоками случайных чисел, сводные
таблицы результатов и их запись в CSV/JSON.
"""
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field as dc_field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats

from cdp_operator import CdpSolverConfig, gen_masks, recover_cdp
from image_io import load_png, make_gradient_image, merge_channels, save_png, split_channels, to_display_range
from initialization import (
    DEFAULT_FRACTION,
    InitConfig,
    InitSolver,
    eigen_report,
    init_orthogonality_promoting,
    planted_gap_problem,
    power_method,
    select_index_set,
    vr_opi,
)
from refinement import (
    DEFAULT_GAMMA,
    DIVERGENCE_LIMIT,
    SUCCESS_THRESHOLD,
    TAF_MU,
    RunTrace,
    Sampling,
    SolverConfig,
    StepRule,
    run_staf,
    run_taf,
)
from signal_model import (
    Field,
    Iterate,
    MeasurementSet,
    SensingEnsemble,
    Signal,
    gen_gaussian_sensing,
    gen_gaussian_signal,
    measure,
)
from utils import (
    ArgumentError,
    DataError,
    ExperimentIOError,
    NumericalError,
    median_iqr,
    pad_to_length,
    passes_to_threshold,
    trial_seed,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
RESULT_COLUMNS = ["grid_point", "variant", "pass_index", "statistic", "value", "spread", "trials"]
SORT_KEYS = ["grid_point", "variant", "pass_index", "statistic"]
# Порог для гонки инициализаций: 1 − |⟨u, v₁⟩|² <= 1e-6
ALIGNMENT_TARGET = 1e-6
LOG_FLOOR = 1e-16
# Окно проверки выхода на плато в шумовом эксперименте
NOISE_PLATEAU_PASSES = 100
TRUTH_INIT = "truth"
TAF_VARIANT = "taf"
VARIANTS = (StepRule.CONSTANT.value, StepRule.KACZMARZ.value, TAF_VARIANT)
INIT_CHOICES = (InitSolver.POWER.value, InitSolver.VR_OPI.value, TRUTH_INIT)


class ExperimentKind(str, Enum):
    EIGENGAP_SWEEP = "eigengap"
    INIT_RACE = "init-race"
    SUCCESS_RATE = "success-rate"
    CONVERGENCE_TRACE = "trace"
    NOISE_RUN = "noise"
    CDP_IMAGE = "cdp-image"


# Значения по умолчанию для каждого вида эксперимента (сетка: m/n, sigma или K)
KIND_DEFAULTS: Dict[ExperimentKind, Dict[str, Any]] = {
    ExperimentKind.SUCCESS_RATE: {
        "grid": [round(1.0 + 0.5 * i, 1) for i in range(13)],
        "step_rules": [StepRule.KACZMARZ.value],
        "target_rel_err": SUCCESS_THRESHOLD,
    },
    ExperimentKind.CONVERGENCE_TRACE: {
        "grid": [5.0],
        "step_rules": [StepRule.CONSTANT.value, StepRule.KACZMARZ.value],
        "target_rel_err": 1e-12,
    },
    ExperimentKind.EIGENGAP_SWEEP: {
        "grid": [round(1.0 + 0.5 * i, 1) for i in range(11)],
        "n": 500,
        "trials": 10,
    },
    ExperimentKind.INIT_RACE: {
        "grid": [8.0],
        "trials": 10,
    },
    ExperimentKind.NOISE_RUN: {
        "grid": [0.1],
        "step_rules": [StepRule.CONSTANT.value, StepRule.KACZMARZ.value],
        "target_rel_err": 0.0,
    },
    ExperimentKind.CDP_IMAGE: {
        "grid": [8.0],
        "trials": 1,
        "passes": 300.0,
        "init_solver": InitSolver.VR_OPI.value,
        "target_rel_err": SUCCESS_THRESHOLD,
    },
}


@dataclass(frozen=True)
class ExperimentSpec:
    """
    Описание эксперимента. Точки сетки: m/n (success-rate, trace,
    eigengap, init-race), sigma (noise) или число масок K (cdp-image).
    """

    kind: ExperimentKind
    grid: Tuple[float, ...]
    n: int = 100
    trials: int = 50
    field: Field = Field.REAL
    step_rules: Tuple[str, ...] = (StepRule.KACZMARZ.value,)
    sampling: Optional[Sampling] = None
    gamma: float = DEFAULT_GAMMA
    mu: Optional[float] = None
    passes: float = 1000.0
    target_rel_err: float = SUCCESS_THRESHOLD
    init_solver: str = InitSolver.POWER.value
    init_passes: int = 100
    fraction: float = DEFAULT_FRACTION
    ratio: float = 5.0
    planted_gap: Optional[float] = None
    image: Optional[str] = None
    image_size: int = 64
    seed: int = 0
    out: Optional[str] = None
    fmt: str = "csv"
    workers: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ExperimentKind(self.kind))
        object.__setattr__(self, "field", Field(self.field))
        object.__setattr__(self, "grid", tuple(float(g) for g in self.grid))
        object.__setattr__(self, "step_rules", tuple(str(r) for r in self.step_rules))
        if self.sampling is not None:
            object.__setattr__(self, "sampling", Sampling(self.sampling))

    @classmethod
    def for_kind(cls, kind: Union[ExperimentKind, str], **overrides) -> "ExperimentSpec":
        """Спецификация с умолчаниями вида эксперимента; None в overrides игнорируется."""
        kind = ExperimentKind(kind)
        values = dict(KIND_DEFAULTS[kind])
        values.update({key: value for key, value in overrides.items() if value is not None})
        return cls(kind=kind, **values)

    def validate(self) -> None:
        if self.trials < 1:
            raise ArgumentError(f"Число испытаний должно быть >= 1, получено {self.trials}")
        if not self.grid:
            raise ArgumentError("Сетка эксперимента пуста")
        if self.n < 1 or self.passes <= 0 or self.init_passes < 1:
            raise ArgumentError("n, passes и init_passes должны быть положительными")
        if not self.gamma > 0 or (self.mu is not None and not self.mu > 0):
            raise ArgumentError("gamma и mu должны быть положительными")
        if self.kind in (ExperimentKind.NOISE_RUN, ExperimentKind.CDP_IMAGE):
            if any(g < 0 for g in self.grid):
                raise ArgumentError(f"Точки сетки должны быть неотрицательными: {self.grid}")
        elif any(g <= 0 for g in self.grid):
            raise ArgumentError(f"Точки сетки m/n должны быть положительными: {self.grid}")
        if self.kind is ExperimentKind.CDP_IMAGE and any(g < 1 or g != int(g) for g in self.grid):
            raise ArgumentError(f"Число масок должно быть целым >= 1: {self.grid}")
        unknown = [r for r in self.step_rules if r not in VARIANTS]
        if unknown or not self.step_rules:
            raise ArgumentError(f"Неизвестные правила шага {unknown}, допустимы {VARIANTS}")
        if self.init_solver not in INIT_CHOICES:
            raise ArgumentError(f"Неизвестная инициализация {self.init_solver!r}, допустимы {INIT_CHOICES}")
        if self.kind is ExperimentKind.CDP_IMAGE and self.init_solver == TRUTH_INIT:
            raise ArgumentError("Инициализация truth не поддерживается в эксперименте cdp-image")
        if self.planted_gap is not None and not 0 < self.planted_gap < 1:
            raise ArgumentError("planted_gap должен лежать в (0, 1)")
        if self.fmt not in ("csv", "json"):
            raise ArgumentError(f"Неизвестный формат {self.fmt!r}")
        if self.workers is not None and self.workers < 1:
            raise ArgumentError("workers должно быть >= 1")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["kind"] = self.kind.value
        data["field"] = self.field.value
        data["grid"] = list(self.grid)
        data["step_rules"] = list(self.step_rules)
        data["sampling"] = None if self.sampling is None else self.sampling.value
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise DataError(f"Неизвестные поля спецификации: {sorted(unknown)}")
        if "kind" not in data:
            raise DataError("В спецификации нет поля kind")
        try:
            return cls(**data)
        except (TypeError, ValueError) as e:
            raise DataError(f"Некорректная спецификация: {e}") from e


def save_spec(spec: ExperimentSpec, path: Union[str, Path]) -> Path:
    """Сохраняет спецификацию в JSON."""
    path = Path(path)
    try:
        path.write_text(json.dumps(spec.to_dict(), indent=2))
    except OSError as e:
        raise ExperimentIOError(path, f"не удалось записать спецификацию: {e}") from e
    return path


def load_spec(path: Union[str, Path]) -> ExperimentSpec:
    """Загружает спецификацию, сохраненную save_spec."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as e:
        raise ExperimentIOError(path, f"не удалось прочитать спецификацию: {e}") from e
    except json.JSONDecodeError as e:
        raise ExperimentIOError(path, f"некорректный JSON: {e}") from e
    return ExperimentSpec.from_dict(data)


@dataclass(eq=False)
class ResultTable:
    """Сводная таблица: одна строка на (точка сетки, вариант, проход, статистика)."""

    frame: pd.DataFrame
    spec: Optional[ExperimentSpec] = None
    artifacts: List[str] = dc_field(default_factory=list)

    @classmethod
    def from_records(cls, records: Iterable[Dict[str, Any]], spec: Optional[ExperimentSpec] = None,
                     artifacts: Optional[List[str]] = None) -> "ResultTable":
        frame = pd.DataFrame(list(records), columns=RESULT_COLUMNS)
        frame = frame.astype({"grid_point": float, "pass_index": float, "value": float,
                              "spread": float, "trials": np.int64, "variant": object,
                              "statistic": object})
        frame = frame.sort_values(SORT_KEYS, na_position="first", kind="mergesort").reset_index(drop=True)
        return cls(frame, spec, list(artifacts or []))

    def __len__(self) -> int:
        return len(self.frame)

    def select(self, statistic: str, variant: Optional[str] = None,
               grid_point: Optional[float] = None, summary: Optional[bool] = None) -> pd.DataFrame:
        """Фильтр строк по статистике, варианту, точке сетки и типу (сводка/проход)."""
        frame = self.frame[self.frame["statistic"] == statistic]
        if variant is not None:
            frame = frame[frame["variant"] == variant]
        if grid_point is not None:
            frame = frame[np.isclose(frame["grid_point"], grid_point)]
        if summary is True:
            frame = frame[frame["pass_index"].isna()]
        elif summary is False:
            frame = frame[frame["pass_index"].notna()]
        return frame

    def value(self, statistic: str, variant: Optional[str] = None,
              grid_point: Optional[float] = None) -> float:
        """Единственное значение сводной статистики."""
        frame = self.select(statistic, variant, grid_point, summary=True)
        if len(frame) != 1:
            raise ArgumentError(f"Ожидалась одна строка {statistic}/{variant}/{grid_point}, найдено {len(frame)}")
        return float(frame["value"].iloc[0])


def _record(grid_point: float, variant: str, statistic: str, value: float,
            spread: float = math.nan, trials: int = 0,
            pass_index: float = math.nan) -> Dict[str, Any]:
    return {"grid_point": float(grid_point), "variant": variant, "pass_index": float(pass_index),
            "statistic": statistic, "value": float(value), "spread": float(spread), "trials": int(trials)}


def _json_number(value: Any) -> Any:
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def emit(table: ResultTable, fmt: str, path: Union[str, Path]) -> Path:
    """
    Записывает таблицу в CSV (с заголовком) или JSON-объект со схемой
    {"schema_version", "spec", "rows"}. Числа пишутся с 17 значащими цифрами.

    Args:
        table (ResultTable): Таблица
        fmt (str): "csv" или "json"
        path: Путь к файлу

    Returns:
        Path: Путь к файлу
    """
    path = Path(path)
    try:
        if fmt == "csv":
            table.frame.to_csv(path, index=False, float_format="%.17g")
        elif fmt == "json":
            rows = [{key: _json_number(value) for key, value in row.items()}
                    for row in table.frame.to_dict(orient="records")]
            payload = {
                "schema_version": SCHEMA_VERSION,
                "spec": None if table.spec is None else table.spec.to_dict(),
                "artifacts": table.artifacts,
                "rows": rows,
            }
            path.write_text(json.dumps(payload, indent=2, allow_nan=True))
        else:
            raise ArgumentError(f"Неизвестный формат {fmt!r}")
    except OSError as e:
        raise ExperimentIOError(path, f"не удалось записать таблицу: {e}") from e
    logger.info("Таблица результатов (%d строк) записана в %s", len(table), path)
    return path


def load_table(path: Union[str, Path]) -> ResultTable:
    """Читает таблицу, записанную emit (формат по расширению .json/.csv)."""
    path = Path(path)
    try:
        if path.suffix == ".json":
            payload = json.loads(path.read_text())
            if payload.get("schema_version") != SCHEMA_VERSION:
                raise DataError(f"{path}: неподдерживаемая версия схемы {payload.get('schema_version')}")
            rows = [{key: (math.nan if value is None and key in ("pass_index", "spread", "grid_point", "value")
                           else value) for key, value in row.items()} for row in payload["rows"]]
            spec = None if payload.get("spec") is None else ExperimentSpec.from_dict(payload["spec"])
            return ResultTable.from_records(rows, spec, payload.get("artifacts"))
        frame = pd.read_csv(path, float_precision="round_trip",
                            dtype={"variant": str, "statistic": str})
        return ResultTable.from_records(frame.to_dict(orient="records"))
    except OSError as e:
        raise ExperimentIOError(path, f"не удалось прочитать таблицу: {e}") from e


def resolve_workers(spec: ExperimentSpec) -> int:
    """Число процессов: спецификация > STAF_WORKERS > число ядер."""
    if spec.workers is not None:
        return int(spec.workers)
    env = os.getenv("STAF_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as e:
            raise ArgumentError(f"STAF_WORKERS должно быть целым, получено {env!r}") from e
    return os.cpu_count() or 1


def _map_trials(fn: Callable[[Any], Any], tasks: Sequence[Any], workers: int) -> List[Any]:
    # Порядок результатов совпадает с порядком задач при любом числе процессов
    if workers <= 1 or len(tasks) <= 1:
        return [fn(task) for task in tasks]
    chunksize = max(1, len(tasks) // (4 * workers))
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return list(pool.map(fn, tasks, chunksize=chunksize))


def _trial_tasks(spec: ExperimentSpec) -> List[Tuple[ExperimentSpec, int, int]]:
    return [(spec, g, t) for g in range(len(spec.grid)) for t in range(spec.trials)]


def _check_kind(spec: ExperimentSpec, kind: ExperimentKind) -> None:
    if spec.kind is not kind:
        raise ArgumentError(f"Ожидался эксперимент {kind.value}, получено {spec.kind.value}")
    spec.validate()


def _synthetic_instance(spec: ExperimentSpec, m_over_n: float, sigma: float,
                        streams: Sequence[np.random.SeedSequence]
                        ) -> Tuple[Signal, SensingEnsemble, MeasurementSet]:
    m = max(1, int(round(m_over_n * spec.n)))
    x = gen_gaussian_signal(spec.n, spec.field, streams[0])
    ens = gen_gaussian_sensing(m, spec.n, spec.field, streams[1])
    meas = measure(ens, x, sigma, streams[2])
    return x, ens, meas


def initial_estimate(spec: ExperimentSpec, ens: SensingEnsemble, meas: MeasurementSet,
                     x: Optional[Signal], seed: Any) -> Iterate:
    """
    Начальная оценка по спецификации: "power", "vr-opi" с бюджетом
    init_passes или "truth" (z₀ = x, нужен истинный сигнал).
    """
    if spec.init_solver == TRUTH_INIT:
        if x is None:
            raise ArgumentError("Инициализация truth требует истинного сигнала")
        return Iterate(x.entries, x.field)
    cfg = InitConfig.for_budget(InitSolver(spec.init_solver), spec.init_passes, seed,
                                fraction=spec.fraction)
    return init_orthogonality_promoting(ens, meas, cfg)


def solver_config(spec: ExperimentSpec, variant: str, seed: Any = None) -> SolverConfig:
    """SolverConfig для варианта; mu из спецификации относится только к постоянному шагу."""
    rule = StepRule(variant)
    return SolverConfig(
        gamma=spec.gamma,
        step_rule=rule,
        mu=spec.mu if rule is StepRule.CONSTANT else None,
        sampling=spec.sampling,
        max_passes=spec.passes,
        target_rel_err=spec.target_rel_err,
        seed=seed,
    )


def refine(spec: ExperimentSpec, variant: str, ens: SensingEnsemble, meas: MeasurementSet,
           z0: Iterate, x: Optional[Signal], seed: Any) -> RunTrace:
    """Уточнение выбранным вариантом: STAF (constant/kaczmarz) или базовый TAF."""
    if variant == TAF_VARIANT:
        return run_taf(ens, meas, z0, mu=TAF_MU, gamma=spec.gamma, max_iters=int(spec.passes),
                       truth=x, target_rel_err=spec.target_rel_err)
    return run_staf(ens, meas, z0, solver_config(spec, variant, seed), truth=x)


def _log_configs(spec: ExperimentSpec) -> None:
    for variant in spec.step_rules:
        if variant == TAF_VARIANT:
            echo = {"solver": TAF_VARIANT, "mu": TAF_MU, "gamma": spec.gamma, "max_passes": spec.passes}
        else:
            echo = solver_config(spec, variant, spec.seed).echo(spec.n, spec.field)
        logger.info("Конфигурация решателя %s: %s", variant, echo)


def _variant_traces(spec: ExperimentSpec, m_over_n: float, sigma: float,
                    grid_index: int, trial: int) -> Dict[str, Optional[RunTrace]]:
    streams = trial_seed(spec.seed, grid_index, trial).spawn(4 + len(spec.step_rules))
    x, ens, meas = _synthetic_instance(spec, m_over_n, sigma, streams[:3])
    try:
        z0 = initial_estimate(spec, ens, meas, x, streams[3])
    except NumericalError as e:
        logger.warning("Испытание %d/%d: инициализация не удалась (%s)", grid_index, trial, e)
        return {variant: None for variant in spec.step_rules}
    traces: Dict[str, Optional[RunTrace]] = {}
    for offset, variant in enumerate(spec.step_rules):
        try:
            traces[variant] = refine(spec, variant, ens, meas, z0, x, streams[4 + offset])
        except NumericalError as e:
            # расходимость считается неудачным испытанием
            logger.warning("Испытание %d/%d, %s: %s", grid_index, trial, variant, e)
            traces[variant] = None
    return traces


def _success_trial(task: Tuple[ExperimentSpec, int, int]) -> Dict[str, Tuple[bool, float, float]]:
    spec, grid_index, trial = task
    traces = _variant_traces(spec, spec.grid[grid_index], 0.0, grid_index, trial)
    return {variant: (False, float(spec.passes), DIVERGENCE_LIMIT) if trace is None
            else (trace.success, trace.passes_used, trace.final_rel_err)
            for variant, trace in traces.items()}


def _trace_trial(task: Tuple[ExperimentSpec, int, int]) -> Dict[str, List[float]]:
    spec, grid_index, trial = task
    if spec.kind is ExperimentKind.NOISE_RUN:
        m_over_n, sigma = spec.ratio, spec.grid[grid_index]
    else:
        m_over_n, sigma = spec.grid[grid_index], 0.0
    traces = _variant_traces(spec, m_over_n, sigma, grid_index, trial)
    return {variant: [DIVERGENCE_LIMIT] if trace is None else list(trace.rel_err_per_pass)
            for variant, trace in traces.items()}


def _group_by_grid(spec: ExperimentSpec, results: Sequence[Any]) -> List[List[Any]]:
    return [list(results[g * spec.trials:(g + 1) * spec.trials]) for g in range(len(spec.grid))]


def run_success_rate(spec: ExperimentSpec) -> ResultTable:
    """
    Доля успешных испытаний (ошибка < 1e-5) для каждой точки m/n и
    каждого варианта уточнения; полный конвейер инициализация + уточнение.

    Args:
        spec (ExperimentSpec): Спецификация вида success-rate

    Returns:
        ResultTable: success_rate (среднее, биномиальное ст. откл.),
            passes_used_median и final_rel_err_median
    """
    _check_kind(spec, ExperimentKind.SUCCESS_RATE)
    _log_configs(spec)
    results = _map_trials(_success_trial, _trial_tasks(spec), resolve_workers(spec))
    records = []
    for grid_point, group in zip(spec.grid, _group_by_grid(spec, results)):
        for variant in spec.step_rules:
            outcomes = [trial[variant] for trial in group]
            successes = np.array([o[0] for o in outcomes], dtype=np.float64)
            rate = float(successes.mean())
            records.append(_record(grid_point, variant, "success_rate", rate,
                                   math.sqrt(rate * (1.0 - rate) / spec.trials), spec.trials))
            median, q25, q75 = median_iqr(np.array([o[1] for o in outcomes]))
            records.append(_record(grid_point, variant, "passes_used_median", median, q75 - q25, spec.trials))
            median, q25, q75 = median_iqr(np.array([o[2] for o in outcomes]))
            records.append(_record(grid_point, variant, "final_rel_err_median", median, q75 - q25, spec.trials))
            logger.info("m/n = %.2f, %s: доля успехов %.2f", grid_point, variant, rate)
    return ResultTable.from_records(records, spec)


def _trace_records(grid_point: float, variant: str, traces: List[List[float]],
                   length: int) -> List[Dict[str, Any]]:
    padded = np.vstack([pad_to_length(trace, length) for trace in traces])
    median, q25, q75 = median_iqr(padded, axis=0)
    records = []
    for index in range(length):
        records.append(_record(grid_point, variant, "rel_err_median", median[index],
                               q75[index] - q25[index], len(traces), index))
        records.append(_record(grid_point, variant, "rel_err_q25", q25[index], trials=len(traces),
                               pass_index=index))
        records.append(_record(grid_point, variant, "rel_err_q75", q75[index], trials=len(traces),
                               pass_index=index))
    reached = [passes_to_threshold(trace, SUCCESS_THRESHOLD) for trace in traces]
    passes = np.array([length if r is None else float(r) for r in reached])
    p_median, p_q25, p_q75 = median_iqr(passes)
    spread = p_q75 - p_q25
    records.append(_record(grid_point, variant, "passes_to_threshold_median", p_median, spread, len(traces)))
    finals = padded[:, -1]
    f_median, f_q25, f_q75 = median_iqr(finals)
    records.append(_record(grid_point, variant, "final_rel_err_median", f_median, f_q75 - f_q25, len(traces)))
    records.append(_record(grid_point, variant, "success_rate",
                           float(np.mean(finals < SUCCESS_THRESHOLD)), trials=len(traces)))
    return records


def _run_traces(spec: ExperimentSpec) -> Tuple[List[Dict[str, Any]], List[List[Dict[str, List[float]]]]]:
    _log_configs(spec)
    results = _map_trials(_trace_trial, _trial_tasks(spec), resolve_workers(spec))
    length = int(math.ceil(spec.passes)) + 1
    records = []
    groups = _group_by_grid(spec, results)
    for grid_point, group in zip(spec.grid, groups):
        for variant in spec.step_rules:
            records.extend(_trace_records(grid_point, variant, [trial[variant] for trial in group], length))
        logger.info("Точка сетки %.3g: обработано испытаний %d", grid_point, len(group))
    return records, groups


def run_convergence_trace(spec: ExperimentSpec) -> ResultTable:
    """
    Медиана и квартили относительной ошибки по проходам для каждого
    варианта (постоянный шаг, шаг Качмажа, TAF).

    Args:
        spec (ExperimentSpec): Спецификация вида trace

    Returns:
        ResultTable: rel_err_median/q25/q75 по проходам и сводки
    """
    _check_kind(spec, ExperimentKind.CONVERGENCE_TRACE)
    records, _ = _run_traces(spec)
    return ResultTable.from_records(records, spec)


def run_noise(spec: ExperimentSpec) -> ResultTable:
    """
    Траектории ошибки при шуме sigma (точки сетки) и m/n = ratio.
    Дополнительно plateau_change: относительное изменение медианы
    за последние 100 проходов.

    Args:
        spec (ExperimentSpec): Спецификация вида noise

    Returns:
        ResultTable: Таблица результатов
    """
    _check_kind(spec, ExperimentKind.NOISE_RUN)
    records, groups = _run_traces(spec)
    length = int(math.ceil(spec.passes)) + 1
    window = min(NOISE_PLATEAU_PASSES, length - 1)
    for sigma, group in zip(spec.grid, groups):
        for variant in spec.step_rules:
            padded = np.vstack([pad_to_length(trial[variant], length) for trial in group])
            median = np.median(padded, axis=0)
            old, new = median[-1 - window], median[-1]
            change = abs(new - old) / old if old > 0 else 0.0
            records.append(_record(sigma, variant, "plateau_change", change, trials=len(group)))
            logger.info("sigma = %.3g, %s: медиана финальной ошибки %.3g", sigma, variant, new)
    return ResultTable.from_records(records, spec)


def _eigengap_trial(task: Tuple[ExperimentSpec, int, int]) -> Optional[Tuple[float, float, float]]:
    spec, grid_index, trial = task
    streams = trial_seed(spec.seed, grid_index, trial).spawn(3)
    x, ens, meas = _synthetic_instance(spec, spec.grid[grid_index], 0.0, streams)
    size = InitConfig(fraction=spec.fraction).resolve_size(ens.m)
    report = eigen_report(select_index_set(meas, ens, size), with_vector=False)
    if not report.defined:
        return None
    return report.delta, report.lambda1, report.lambda2


def run_eigengap_sweep(spec: ExperimentSpec) -> ResultTable:
    """
    Среднее и стандартное отклонение зазора δ матрицы Ȳ₀ по сетке m/n
    и ранговая корреляция Спирмена δ с m/n (строка trend без точки сетки).

    Args:
        spec (ExperimentSpec): Спецификация вида eigengap

    Returns:
        ResultTable: Таблица результатов
    """
    _check_kind(spec, ExperimentKind.EIGENGAP_SWEEP)
    results = _map_trials(_eigengap_trial, _trial_tasks(spec), resolve_workers(spec))
    records = []
    means = []
    for grid_point, group in zip(spec.grid, _group_by_grid(spec, results)):
        defined = np.array([r for r in group if r is not None], dtype=np.float64).reshape(-1, 3)
        count = defined.shape[0]
        if count == 0:
            logger.warning("m/n = %.2f: зазор не определен ни в одном испытании", grid_point)
            means.append(math.nan)
            continue
        std = defined.std(axis=0, ddof=1) if count > 1 else np.zeros(3)
        for column, name in enumerate(("delta", "lambda1", "lambda2")):
            records.append(_record(grid_point, "oracle", name, defined[:, column].mean(), std[column], count))
        means.append(float(defined[:, 0].mean()))
        logger.info("m/n = %.2f: средний зазор %.4f", grid_point, means[-1])
    finite = [(g, d) for g, d in zip(spec.grid, means) if not math.isnan(d)]
    if len(finite) >= 2:
        rho = stats.spearmanr([g for g, _ in finite], [d for _, d in finite]).correlation
        records.append(_record(math.nan, "trend", "spearman_rho", rho, trials=spec.trials))
    return ResultTable.from_records(records, spec)


def _race_curve(u_history: List[Tuple[float, np.ndarray]], prob: Any, lambda1: float,
                v1: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    passes = np.array([p for p, _ in u_history])
    energy = []
    alignment = []
    for _, u in u_history:
        rayleigh = float(np.vdot(u, prob.apply(u)).real)
        energy.append(max(1.0 - rayleigh / lambda1, LOG_FLOOR))
        alignment.append(max(1.0 - abs(np.vdot(v1, u)) ** 2, LOG_FLOOR))
    return passes, np.log10(energy), np.log10(alignment)


def _race_trial(task: Tuple[ExperimentSpec, int, int]) -> Dict[str, Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    spec, grid_index, trial = task
    streams = trial_seed(spec.seed, grid_index, trial).spawn(6)
    if spec.planted_gap is not None:
        size = max(1, int(round(spec.grid[grid_index] * spec.n)))
        prob = planted_gap_problem(spec.n, spec.planted_gap, size, streams[0])
    else:
        x, ens, meas = _synthetic_instance(spec, spec.grid[grid_index], 0.0, streams[:3])
        prob = select_index_set(meas, ens, InitConfig(fraction=spec.fraction).resolve_size(ens.m))
    report = eigen_report(prob)
    rng = np.random.default_rng(streams[3])
    u0 = rng.standard_normal(prob.n)
    if prob.field is Field.COMPLEX:
        u0 = u0 + 1j * rng.standard_normal(prob.n)
    u0 = u0 / np.linalg.norm(u0)

    history: Dict[str, List[Tuple[float, np.ndarray]]] = {}
    for solver in (InitSolver.POWER, InitSolver.VR_OPI):
        points: List[Tuple[float, np.ndarray]] = [(0.0, u0)]
        cfg = InitConfig.for_budget(solver, spec.init_passes, streams[4])
        if solver is InitSolver.POWER:
            power_method(prob, cfg.power_iters, streams[5], u0=u0,
                         callback=lambda passes, u: points.append((passes, u.copy())))
        else:
            vr_opi(prob, replace(cfg.vr_opi, seed=streams[5]), u0=u0,
                   callback=lambda passes, u: points.append((passes, u.copy())))
        history[solver.value] = points
    return {name: _race_curve(points, prob, report.lambda1, report.v1)
            for name, points in history.items()}


def run_init_race(spec: ExperimentSpec) -> ResultTable:
    """
    Гонка степенного метода и VR-OPI на одних и тех же задачах и с одним
    стартовым вектором: log10(1 − uᴴȲ₀u/λ₁) и log10(1 − |⟨u, v₁⟩|²) по
    проходам, v₁ берется из плотного разложения. С planted_gap точки сетки
    задают число строк синтетической задачи в единицах n.

    Args:
        spec (ExperimentSpec): Спецификация вида init-race

    Returns:
        ResultTable: Таблица результатов
    """
    _check_kind(spec, ExperimentKind.INIT_RACE)
    results = _map_trials(_race_trial, _trial_tasks(spec), resolve_workers(spec))
    records = []
    for grid_point, group in zip(spec.grid, _group_by_grid(spec, results)):
        for variant in (InitSolver.POWER.value, InitSolver.VR_OPI.value):
            passes = group[0][variant][0]
            for column, name in ((1, "energy_gap_log10"), (2, "alignment_gap_log10")):
                curves = np.vstack([trial[variant][column] for trial in group])
                median, q25, q75 = median_iqr(curves, axis=0)
                for index, pass_value in enumerate(passes):
                    records.append(_record(grid_point, variant, f"{name}_median", median[index],
                                           q75[index] - q25[index], len(group), pass_value))
            reached = []
            for trial in group:
                hits = np.nonzero(trial[variant][2] <= math.log10(ALIGNMENT_TARGET))[0]
                reached.append(trial[variant][0][hits[0]] if hits.size else spec.init_passes + 1.0)
            median, q25, q75 = median_iqr(np.array(reached))
            spread = q75 - q25
            records.append(_record(grid_point, variant, "passes_to_alignment_median", median, spread, len(group)))
            logger.info("Точка %.3g, %s: медиана проходов до 1e-6 равна %s", grid_point, variant, median)
    return ResultTable.from_records(records, spec)


def _cdp_trial(task: Tuple[ExperimentSpec, int, int, int]) -> Tuple[float, float, Optional[np.ndarray]]:
    spec, grid_index, trial, channel = task
    image = _load_image(spec)
    reference = split_channels(image)[channel]
    if not np.any(reference):
        # Нулевой канал восстанавливается точно при z = 0
        logger.info("CDP, K=%d, канал %d: нулевой канал, восстановление не требуется",
                    int(spec.grid[grid_index]), channel)
        return 0.0, 0.0, np.zeros(reference.size) if trial == 0 else None
    streams = trial_seed(spec.seed, grid_index, trial).spawn(1 + 2 * image.shape[2])
    masks = gen_masks(reference.size, int(spec.grid[grid_index]), streams[0])
    init_cfg = InitConfig.for_budget(InitSolver(spec.init_solver), spec.init_passes,
                                     streams[1 + 2 * channel], fraction=spec.fraction)
    cfg = CdpSolverConfig(gamma=spec.gamma, step=1.0 if spec.mu is None else spec.mu,
                          max_passes=spec.passes, target_rel_err=spec.target_rel_err,
                          seed=streams[2 + 2 * channel])
    try:
        trace = recover_cdp(Signal(reference), masks, init_cfg, cfg)
    except NumericalError as e:
        logger.warning("CDP, K=%d, канал %d: %s", int(spec.grid[grid_index]), channel, e)
        return DIVERGENCE_LIMIT, float(spec.passes), None
    display = to_display_range(trace.final.z, reference) if trial == 0 else None
    return trace.final_rel_err, trace.passes_used, display


def _load_image(spec: ExperimentSpec) -> np.ndarray:
    if spec.image is None:
        return make_gradient_image(spec.image_size, spec.image_size)
    return load_png(spec.image)


def recovered_image_path(spec: ExperimentSpec, masks: int) -> Optional[Path]:
    """Путь восстановленного PNG рядом с таблицей результатов."""
    if spec.out is None:
        return None
    out = Path(spec.out)
    return out.with_name(f"{out.stem}_K{masks}.png")


def run_cdp_image(spec: ExperimentSpec) -> ResultTable:
    """
    Восстановление изображения по CDP: каждый канал восстанавливается как отдельный сигнал,
    инициализация и блочный STAF. Пишет восстановленный PNG (первое
    испытание) для каждого K из сетки.

    Args:
        spec (ExperimentSpec): Спецификация вида cdp-image

    Returns:
        ResultTable: Ошибки по каналам, доля успехов и пути к PNG
    """
    _check_kind(spec, ExperimentKind.CDP_IMAGE)
    image = _load_image(spec)
    height, width, channels = image.shape
    logger.info("CDP: изображение %dx%d, каналов %d, сетка K = %s", width, height, channels, spec.grid)
    solver_echo = CdpSolverConfig(gamma=spec.gamma, step=1.0 if spec.mu is None else spec.mu,
                                  max_passes=spec.passes, target_rel_err=spec.target_rel_err)
    logger.info("Конфигурация решателя block-staf: %s, init=%s, init_passes=%s",
                solver_echo.echo(), spec.init_solver, spec.init_passes)
    if spec.planted_gap is not None:
        logger.warning("planted_gap не используется в эксперименте cdp-image")
    tasks = [(spec, g, t, c) for g in range(len(spec.grid)) for t in range(spec.trials)
             for c in range(channels)]
    results = _map_trials(_cdp_trial, tasks, resolve_workers(spec))
    records = []
    artifacts = []
    per_grid = spec.trials * channels
    for g, grid_point in enumerate(spec.grid):
        block = results[g * per_grid:(g + 1) * per_grid]
        errors = np.array([r[0] for r in block]).reshape(spec.trials, channels)
        passes = np.array([r[1] for r in block]).reshape(spec.trials, channels)
        for c in range(channels):
            median, q25, q75 = median_iqr(errors[:, c])
            spread = q75 - q25
            records.append(_record(grid_point, "block-staf", f"rel_err_channel{c}", median, spread, spec.trials))
        success = float(np.mean(np.all(errors < SUCCESS_THRESHOLD, axis=1)))
        records.append(_record(grid_point, "block-staf", "success_rate", success,
                               math.sqrt(success * (1.0 - success) / spec.trials), spec.trials))
        median, q25, q75 = median_iqr(passes.max(axis=1))
        records.append(_record(grid_point, "block-staf", "passes_used_median", median, q75 - q25, spec.trials))
        path = recovered_image_path(spec, int(grid_point))
        displays = [r[2] for r in block[:channels]]
        if path is not None and all(d is not None for d in displays):
            save_png(path, merge_channels(displays, (height, width)))
            artifacts.append(str(path))
        logger.info("K = %d: доля успехов %.2f, ошибки по каналам %s", int(grid_point), success,
                    np.array2string(np.median(errors, axis=0), precision=3))
    return ResultTable.from_records(records, spec, artifacts)


RUNNERS: Dict[ExperimentKind, Callable[[ExperimentSpec], ResultTable]] = {
    ExperimentKind.SUCCESS_RATE: run_success_rate,
    ExperimentKind.CONVERGENCE_TRACE: run_convergence_trace,
    ExperimentKind.EIGENGAP_SWEEP: run_eigengap_sweep,
    ExperimentKind.INIT_RACE: run_init_race,
    ExperimentKind.NOISE_RUN: run_noise,
    ExperimentKind.CDP_IMAGE: run_cdp_image,
}


def run_experiment(spec: ExperimentSpec) -> ResultTable:
    """
    Запускает эксперимент по виду и, если задан out, записывает таблицу.

    Args:
        spec (ExperimentSpec): Спецификация

    Returns:
        ResultTable: Таблица результатов
    """
    spec.validate()
    logger.info("Эксперимент %s: n=%d, испытаний %d, сетка %s, seed=%d",
                spec.kind.value, spec.n, spec.trials, list(spec.grid), spec.seed)
    table = RUNNERS[spec.kind](spec)
    if spec.out is not None:
        emit(table, spec.fmt, spec.out)
    return table
