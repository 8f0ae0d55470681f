import logging
from typing import Any, Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)

# Seed, ветка SeedSequence или готовый генератор
SeedLike = Union[None, int, np.random.SeedSequence, np.random.Generator]


class StafError(Exception):
    """Базовая ошибка пакета."""


class ArgumentError(StafError, ValueError):
    """Недопустимые аргументы: размеры, поле, диапазоны параметров."""


class DataError(StafError, ValueError):
    """Дефектные данные (например, нулевая строка измерительной матрицы)."""


class DomainError(StafError, ValueError):
    """Величина не определена для переданных данных."""


class NumericalError(StafError, ArithmeticError):
    """Нечисловые значения или вырожденные итерации."""


class DivergenceError(NumericalError):
    """Относительная ошибка уточнения вышла за допустимый предел."""


class ExperimentIOError(StafError, OSError):
    """Ошибка чтения или записи файла; всегда содержит путь."""

    def __init__(self, path: Any, message: str):
        super().__init__(f"{path}: {message}")
        self.path = str(path)


def make_rng(seed: SeedLike = None) -> np.random.Generator:
    """
    Создает генератор PCG64 из семени.

    Args:
        seed: int, SeedSequence или уже готовый Generator

    Returns:
        np.random.Generator: генератор случайных чисел
    """
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def as_seed_sequence(seed: SeedLike) -> np.random.SeedSequence:
    """Приводит семя к SeedSequence (генератор отдает свою последовательность)."""
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, np.random.Generator):
        return seed.bit_generator.seed_seq
    return np.random.SeedSequence(seed)


def trial_seed(seed: int, grid_index: int, trial: int) -> np.random.SeedSequence:
    """
    Устойчивое разбиение потока: семя испытания зависит только от
    (seed, grid_index, trial), а не от порядка выполнения.

    Args:
        seed (int): Базовое семя эксперимента
        grid_index (int): Номер точки сетки
        trial (int): Номер испытания

    Returns:
        np.random.SeedSequence: Семя испытания
    """
    return np.random.SeedSequence(seed, spawn_key=(grid_index, trial))


def split_seed(seed: SeedLike, count: int) -> Tuple[np.random.SeedSequence, ...]:
    """Делит семя на count независимых потоков."""
    return tuple(as_seed_sequence(seed).spawn(count))


def seed_meta(seed: SeedLike) -> Dict[str, Any]:
    """
    Описание происхождения случайного потока для MeasurementSet.

    Args:
        seed: Семя

    Returns:
        Dict[str, Any]: entropy и spawn_key (None для готового генератора)
    """
    if isinstance(seed, np.random.Generator):
        return {"entropy": None, "spawn_key": None}
    seq = as_seed_sequence(seed)
    entropy = seq.entropy
    if isinstance(entropy, (list, tuple)):
        entropy = [int(e) for e in entropy]
    elif entropy is not None:
        entropy = int(entropy)
    return {"entropy": entropy, "spawn_key": [int(k) for k in seq.spawn_key]}


def seed_to_int(seed: SeedLike) -> Optional[int]:
    """Целое семя для заголовков файлов (None, если семя не целое)."""
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    return None


def passes_to_threshold(errors: Sequence[float], threshold: float) -> Optional[int]:
    """
    Находит первый проход, на котором ошибка опустилась ниже порога.

    Args:
        errors (Sequence[float]): Ошибка по проходам (индекс = номер прохода)
        threshold (float): Порог

    Returns:
        Optional[int]: Номер прохода или None, если порог не достигнут
    """
    for index, value in enumerate(errors):
        if value < threshold:
            return index
    return None


def has_plateaued(values: Sequence[float], window: int, rel_tol: float) -> bool:
    """
    Проверяет, что последние window значений меняются не более чем на rel_tol.

    Args:
        values (Sequence[float]): Ряд значений
        window (int): Длина окна
        rel_tol (float): Допустимое относительное изменение

    Returns:
        bool: True, если ряд вышел на плато
    """
    if len(values) <= window:
        return False
    old = float(values[-window - 1])
    new = float(values[-1])
    scale = max(abs(old), abs(new))
    if scale == 0.0:
        return True
    return abs(new - old) / scale < rel_tol


def median_iqr(samples: np.ndarray, axis: int = 0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Медиана и квартили по оси испытаний.

    Args:
        samples (np.ndarray): Массив испытаний
        axis (int): Ось испытаний

    Returns:
        tuple: (медиана, 25-й перцентиль, 75-й перцентиль)
    """
    q25, median, q75 = np.percentile(samples, [25.0, 50.0, 75.0], axis=axis)
    return median, q25, q75


def fit_log_linear(errors: Iterable[float]) -> Tuple[float, float]:
    """
    Линейная регрессия log10(ошибки) по номеру прохода.

    Args:
        errors (Iterable[float]): Положительные ошибки по проходам

    Returns:
        tuple: (наклон, R²)
    """
    values = np.asarray(list(errors), dtype=np.float64)
    if values.size < 3:
        raise ArgumentError("Для регрессии нужно хотя бы три точки")
    if np.any(values <= 0):
        raise ArgumentError("Логарифм определен только для положительных ошибок")
    fit = stats.linregress(np.arange(values.size, dtype=np.float64), np.log10(values))
    return float(fit.slope), float(fit.rvalue ** 2)


def pad_to_length(values: Sequence[float], length: int) -> np.ndarray:
    """Дополняет ряд последним значением (запуск остановился раньше)."""
    out = np.empty(length, dtype=np.float64)
    count = min(len(values), length)
    out[:count] = values[:count]
    if count < length:
        out[count:] = values[count - 1] if count else np.nan
    return out
