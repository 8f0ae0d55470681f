"""
Базовая модель задачи восстановления фазы: сигналы, измерительные ансамбли,
амплитудные измерения, расстояния с точностью до глобальной фазы и
амплитудная функция потерь.
"""
import json
import logging
import zipfile
from dataclasses import dataclass, field as dc_field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from utils import (
    ArgumentError,
    DataError,
    DomainError,
    ExperimentIOError,
    SeedLike,
    StafError,
    make_rng,
    seed_meta,
    seed_to_int,
)

logger = logging.getLogger(__name__)

# Версия формата файлов задач
PROBLEM_FORMAT_VERSION = 1


class Field(str, Enum):
    REAL = "real"
    COMPLEX = "complex"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float64) if self is Field.REAL else np.dtype(np.complex128)


def _frozen(values: np.ndarray) -> np.ndarray:
    values.setflags(write=False)
    return values


def _field_array(values: Any, fld: Field, name: str) -> np.ndarray:
    array = np.asarray(values)
    if fld is Field.REAL and np.iscomplexobj(array):
        raise ArgumentError(f"{name}: комплексные значения в вещественной задаче")
    array = np.array(array, dtype=fld.dtype, copy=True)
    if not np.all(np.isfinite(array)):
        raise ArgumentError(f"{name}: найдены нечисловые значения")
    return array


@dataclass(frozen=True, eq=False)
class Signal:
    """Неизвестный вектор x (истинное значение в экспериментах)."""

    entries: np.ndarray
    field: Field = Field.REAL

    def __post_init__(self):
        entries = _field_array(self.entries, self.field, "Signal")
        if entries.ndim != 1 or entries.size < 1:
            raise ArgumentError("Signal: нужен вектор длины n >= 1")
        object.__setattr__(self, "entries", _frozen(entries))

    @classmethod
    def from_array(cls, entries: np.ndarray) -> "Signal":
        fld = Field.COMPLEX if np.iscomplexobj(entries) else Field.REAL
        return cls(entries, fld)

    @property
    def n(self) -> int:
        return self.entries.size

    def norm(self) -> float:
        return float(np.linalg.norm(self.entries))


@dataclass(frozen=True, eq=False)
class SensingEnsemble:
    """Стопка измерительных векторов a_1..a_m (строки матрицы A)."""

    rows: np.ndarray
    field: Field = Field.REAL
    row_sq_norms: np.ndarray = dc_field(init=False)

    def __post_init__(self):
        rows = _field_array(self.rows, self.field, "SensingEnsemble")
        if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 1:
            raise ArgumentError("SensingEnsemble: нужна матрица m x n с m, n >= 1")
        rows = np.ascontiguousarray(rows)
        norms = np.einsum("ij,ij->i", rows.conj(), rows).real.copy()
        object.__setattr__(self, "rows", _frozen(rows))
        object.__setattr__(self, "row_sq_norms", _frozen(norms))

    @property
    def m(self) -> int:
        return self.rows.shape[0]

    @property
    def n(self) -> int:
        return self.rows.shape[1]

    def inner(self, z: np.ndarray) -> np.ndarray:
        """Все скалярные произведения a_iᴴz."""
        return self.rows.conj() @ z


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    """Амплитуды psi_i и метаданные шума."""

    psi: np.ndarray
    noise_sigma: float = 0.0
    seed_meta: Dict[str, Any] = dc_field(default_factory=dict)

    def __post_init__(self):
        psi = np.array(self.psi, dtype=np.float64, copy=True)
        if psi.ndim != 1 or psi.size < 1:
            raise ArgumentError("MeasurementSet: нужен вектор амплитуд длины m >= 1")
        if not np.all(np.isfinite(psi)):
            raise ArgumentError("MeasurementSet: найдены нечисловые амплитуды")
        if self.noise_sigma < 0:
            raise ArgumentError("MeasurementSet: sigma должна быть неотрицательной")
        object.__setattr__(self, "psi", _frozen(psi))

    @property
    def m(self) -> int:
        return self.psi.size

    @property
    def y(self) -> np.ndarray:
        """Квадраты амплитуд y_i = psi_i²."""
        return self.psi * self.psi


@dataclass(frozen=True, eq=False)
class Iterate:
    """Текущая оценка z и число пройденных проходов по данным."""

    z: np.ndarray
    field: Field = Field.REAL
    pass_count: float = 0.0

    def __post_init__(self):
        z = _field_array(self.z, self.field, "Iterate")
        if z.ndim != 1 or z.size < 1:
            raise ArgumentError("Iterate: нужен вектор длины n >= 1")
        if self.pass_count < 0:
            raise ArgumentError("Iterate: число проходов не может быть отрицательным")
        object.__setattr__(self, "z", _frozen(z))

    @classmethod
    def from_array(cls, z: np.ndarray, pass_count: float = 0.0) -> "Iterate":
        """Поле определяется по типу массива."""
        fld = Field.COMPLEX if np.iscomplexobj(z) else Field.REAL
        return cls(z, fld, pass_count)

    @property
    def n(self) -> int:
        return self.z.size


VectorLike = Union[Signal, Iterate, np.ndarray]


def _vector(value: VectorLike) -> np.ndarray:
    if isinstance(value, Signal):
        return value.entries
    if isinstance(value, Iterate):
        return value.z
    return np.asarray(value)


def _check_field(n: int, fld: Field) -> None:
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ArgumentError(f"Размерность должна быть положительным целым, получено {n!r}")
    if not isinstance(fld, Field):
        raise ArgumentError(f"Неизвестное поле {fld!r}")


def _gaussian(rng: np.random.Generator, shape: Tuple[int, ...], fld: Field) -> np.ndarray:
    if fld is Field.REAL:
        return rng.standard_normal(shape)
    # N(0, 1/2) на каждую компоненту, чтобы E|x_j|² = 1
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def gen_gaussian_signal(n: int, field: Field = Field.REAL, seed: SeedLike = None) -> Signal:
    """
    Генерирует гауссов сигнал x ~ N(0, I_n) или CN(0, I_n).

    Args:
        n (int): Размерность
        field (Field): Вещественное или комплексное поле
        seed: Семя генератора

    Returns:
        Signal: Сигнал
    """
    _check_field(n, field)
    return Signal(_gaussian(make_rng(seed), (int(n),), field), field)


def gen_gaussian_sensing(m: int, n: int, field: Field = Field.REAL,
                         seed: SeedLike = None) -> SensingEnsemble:
    """
    Генерирует m независимых гауссовых измерительных векторов.

    Args:
        m (int): Число уравнений
        n (int): Размерность
        field (Field): Поле
        seed: Семя генератора

    Returns:
        SensingEnsemble: Ансамбль с кешированными нормами строк
    """
    _check_field(m, field)
    _check_field(n, field)
    rng = make_rng(seed)
    rows = _gaussian(rng, (int(m), int(n)), field)
    zero = ~np.any(rows != 0, axis=1)
    while np.any(zero):
        # событие нулевой вероятности, но строку все равно перегенерируем
        logger.warning("Нулевые строки при генерации: %d, перегенерация", int(zero.sum()))
        rows[zero] = _gaussian(rng, (int(zero.sum()), int(n)), field)
        zero = ~np.any(rows != 0, axis=1)
    return SensingEnsemble(rows, field)


def measure(ens: SensingEnsemble, x: Signal, sigma: float = 0.0,
            seed: SeedLike = None) -> MeasurementSet:
    """
    Амплитудные измерения psi_i = |a_iᴴx| + eta_i, eta_i ~ N(0, sigma²‖x‖²).
    Отрицательные зашумленные значения сохраняются как есть.

    Args:
        ens (SensingEnsemble): Ансамбль
        x (Signal): Сигнал
        sigma (float): Уровень шума в единицах ‖x‖
        seed: Семя шума

    Returns:
        MeasurementSet: Измерения
    """
    if x.n != ens.n:
        raise ArgumentError(f"Размерность сигнала {x.n} не совпадает с n = {ens.n}")
    if x.field is not ens.field:
        raise ArgumentError("Поле сигнала не совпадает с полем ансамбля")
    if sigma < 0:
        raise ArgumentError("sigma должна быть неотрицательной")
    psi = np.abs(ens.inner(x.entries))
    if sigma > 0:
        rng = make_rng(seed)
        psi = psi + sigma * x.norm() * rng.standard_normal(ens.m)
    return MeasurementSet(psi, float(sigma), seed_meta(seed))


def _pair(z: VectorLike, x: VectorLike) -> Tuple[np.ndarray, np.ndarray]:
    zv, xv = _vector(z), _vector(x)
    if zv.shape != xv.shape or zv.ndim != 1:
        raise ArgumentError(f"Несовпадение размерностей: {zv.shape} и {xv.shape}")
    return zv, xv


def dist(z: VectorLike, x: VectorLike) -> float:
    """
    Расстояние до множества решений: min‖z ± x‖ (вещественный случай) и
    min_phi ‖z − x e^{i phi}‖ (комплексный, замкнутая формула).

    Args:
        z: Оценка
        x: Истинный сигнал

    Returns:
        float: Расстояние
    """
    zv, xv = _pair(z, x)
    if not (np.iscomplexobj(zv) or np.iscomplexobj(xv)):
        return float(min(np.linalg.norm(zv - xv), np.linalg.norm(zv + xv)))
    sq = np.vdot(zv, zv).real + np.vdot(xv, xv).real - 2.0 * abs(np.vdot(xv, zv))
    return float(np.sqrt(max(sq, 0.0)))


def relative_error(z: VectorLike, x: VectorLike) -> float:
    """Относительная ошибка dist(z, x) / ‖x‖."""
    zv, xv = _pair(z, x)
    norm_x = float(np.linalg.norm(xv))
    if norm_x == 0.0:
        raise DomainError("Относительная ошибка не определена при ‖x‖ = 0")
    return dist(zv, xv) / norm_x


def align_phase(z: VectorLike, x: VectorLike) -> np.ndarray:
    """
    Поворачивает z на глобальную фазу, ближайшую к x (в вещественном
    случае меняет знак), так что ‖align_phase(z, x) − x‖ = dist(z, x).

    Args:
        z: Оценка
        x: Опорный сигнал

    Returns:
        np.ndarray: Выровненная оценка
    """
    zv, xv = _pair(z, x)
    c = np.vdot(xv, zv)
    if abs(c) == 0.0:
        return zv.copy()
    if not (np.iscomplexobj(zv) or np.iscomplexobj(xv)):
        return zv * (1.0 if c.real >= 0 else -1.0)
    return zv * (np.conj(c) / abs(c))


def amplitude_loss(z: VectorLike, ens: SensingEnsemble, meas: MeasurementSet) -> float:
    """
    Амплитудная функция потерь ½ Σ (psi_i − |a_iᴴz|)².

    Args:
        z: Оценка
        ens (SensingEnsemble): Ансамбль
        meas (MeasurementSet): Измерения

    Returns:
        float: Значение потерь
    """
    zv = _vector(z)
    if zv.shape != (ens.n,) or meas.m != ens.m:
        raise ArgumentError("Размерности оценки, ансамбля и измерений не согласованы")
    residual = meas.psi - np.abs(ens.inner(zv))
    return float(0.5 * np.dot(residual, residual))


def _interleave(values: np.ndarray) -> np.ndarray:
    if np.iscomplexobj(values):
        return np.ascontiguousarray(values).view(np.float64)
    return np.asarray(values, dtype=np.float64)


def _deinterleave(values: np.ndarray, fld: Field) -> np.ndarray:
    values = np.ascontiguousarray(values, dtype=np.float64)
    if fld is Field.COMPLEX:
        return values.view(np.complex128)
    return values


def _header(ens: SensingEnsemble, meas: MeasurementSet, seed: SeedLike) -> Dict[str, Any]:
    return {
        "version": PROBLEM_FORMAT_VERSION,
        "field": ens.field.value,
        "m": ens.m,
        "n": ens.n,
        "sigma": meas.noise_sigma,
        "seed": seed_to_int(seed),
        "seed_meta": meas.seed_meta,
    }


def _unpack(header: Dict[str, Any], rows: np.ndarray, psi: np.ndarray,
            signal: Optional[np.ndarray]) -> Tuple[SensingEnsemble, MeasurementSet, Optional[Signal]]:
    fld = Field(header["field"])
    m, n = int(header["m"]), int(header["n"])
    rows = _deinterleave(np.asarray(rows, dtype=np.float64).reshape(m, -1), fld)
    if rows.shape != (m, n):
        raise DataError(f"Размер матрицы {rows.shape} не совпадает с заголовком ({m}, {n})")
    ens = SensingEnsemble(rows, fld)
    meas = MeasurementSet(np.asarray(psi, dtype=np.float64), float(header["sigma"]),
                          dict(header.get("seed_meta") or {}))
    x = None
    if signal is not None and np.size(signal):
        x = Signal(_deinterleave(np.asarray(signal, dtype=np.float64), fld), fld)
    return ens, meas, x


def problem_to_dict(ens: SensingEnsemble, meas: MeasurementSet, x: Optional[Signal] = None,
                    seed: SeedLike = None) -> Dict[str, Any]:
    """
    JSON-представление задачи (для небольших тестовых наборов).

    Args:
        ens (SensingEnsemble): Ансамбль
        meas (MeasurementSet): Измерения
        x (Optional[Signal]): Истинный сигнал
        seed: Семя, записываемое в заголовок

    Returns:
        Dict[str, Any]: Словарь с заголовком и построчными данными
    """
    return {
        "header": _header(ens, meas, seed),
        "rows": _interleave(ens.rows).ravel().tolist(),
        "psi": meas.psi.tolist(),
        "signal": None if x is None else _interleave(x.entries).tolist(),
    }


def problem_from_dict(data: Dict[str, Any]) -> Tuple[SensingEnsemble, MeasurementSet, Optional[Signal]]:
    """Обратное преобразование к problem_to_dict."""
    try:
        return _unpack(data["header"], np.asarray(data["rows"]), np.asarray(data["psi"]),
                       None if data.get("signal") is None else np.asarray(data["signal"]))
    except KeyError as e:
        raise DataError(f"В описании задачи нет поля {e}") from e


def save_problem(path: Union[str, Path], ens: SensingEnsemble, meas: MeasurementSet,
                 x: Optional[Signal] = None, seed: SeedLike = None) -> Path:
    """
    Сохраняет задачу в колоночный контейнер .npz (или JSON для пути *.json).

    Args:
        path: Путь к файлу
        ens (SensingEnsemble): Ансамбль
        meas (MeasurementSet): Измерения
        x (Optional[Signal]): Истинный сигнал
        seed: Семя для заголовка

    Returns:
        Path: Путь к записанному файлу
    """
    path = Path(path)
    try:
        if path.suffix == ".json":
            path.write_text(json.dumps(problem_to_dict(ens, meas, x, seed)))
        else:
            with path.open("wb") as handle:
                np.savez(
                    handle,
                    header=np.array(json.dumps(_header(ens, meas, seed))),
                    rows=_interleave(ens.rows),
                    psi=meas.psi,
                    signal=np.empty(0) if x is None else _interleave(x.entries),
                )
    except OSError as e:
        raise ExperimentIOError(path, f"не удалось записать задачу: {e}") from e
    logger.info("Задача m=%d, n=%d сохранена в %s", ens.m, ens.n, path)
    return path


def load_problem(path: Union[str, Path]) -> Tuple[SensingEnsemble, MeasurementSet, Optional[Signal]]:
    """
    Загружает задачу, сохраненную save_problem.

    Args:
        path: Путь к .npz или .json

    Returns:
        tuple: (ансамбль, измерения, сигнал или None)
    """
    path = Path(path)
    try:
        if path.suffix == ".json":
            return problem_from_dict(json.loads(path.read_text()))
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            return _unpack(header, data["rows"], data["psi"], data["signal"])
    except StafError:
        raise
    except OSError as e:
        raise ExperimentIOError(path, f"не удалось прочитать задачу: {e}") from e
    except (zipfile.BadZipFile, EOFError, KeyError, ValueError) as e:
        raise ExperimentIOError(path, f"поврежденный файл задачи: {e}") from e
