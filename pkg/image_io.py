"""
Чтение и запись PNG для эксперимента с изображением: загрузка, разделение
на каналы, обратная сборка и приведение восстановленного канала к
диапазону [0, 255].
"""
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from signal_model import align_phase
from utils import ArgumentError, ExperimentIOError

logger = logging.getLogger(__name__)

VALID_EXTENSIONS = (".png",)


def load_png(path: Union[str, Path], size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """
    Загружает PNG как массив H x W x C со значениями в [0, 1].

    Args:
        path: Путь к файлу
        size (Optional[Tuple[int, int]]): (ширина, высота) для изменения размера

    Returns:
        np.ndarray: Изображение (C = 1 для оттенков серого, иначе 3)
    """
    path = Path(path)
    if path.suffix.lower() not in VALID_EXTENSIONS:
        raise ExperimentIOError(path, f"неподдерживаемый формат, ожидается {', '.join(VALID_EXTENSIONS)}")
    try:
        with Image.open(path) as img:
            mode = "L" if img.mode in ("L", "LA", "I", "I;16", "1") else "RGB"
            img = img.convert(mode)
            if size is not None:
                img = img.resize(size)
            pixels = np.asarray(img, dtype=np.float64) / 255.0
    except FileNotFoundError as e:
        raise ExperimentIOError(path, "файл не найден") from e
    except (UnidentifiedImageError, OSError) as e:
        raise ExperimentIOError(path, f"не удалось прочитать изображение: {e}") from e
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    logger.info("Загружено изображение %s: %dx%d, каналов %d", path, pixels.shape[1], pixels.shape[0], pixels.shape[2])
    return pixels


def save_png(path: Union[str, Path], image: np.ndarray) -> Path:
    """
    Сохраняет 8-битное изображение H x W x C (C = 1 или 3).

    Args:
        path: Путь к файлу
        image (np.ndarray): Значения в [0, 255]

    Returns:
        Path: Путь к файлу
    """
    path = Path(path)
    pixels = np.asarray(image)
    if pixels.ndim == 3 and pixels.shape[2] == 1:
        pixels = pixels[:, :, 0]
    if pixels.ndim not in (2, 3) or (pixels.ndim == 3 and pixels.shape[2] != 3):
        raise ArgumentError(f"Ожидалось изображение H x W или H x W x 3, получено {pixels.shape}")
    pixels = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    try:
        Image.fromarray(pixels).save(path, format="PNG")
    except OSError as e:
        raise ExperimentIOError(path, f"не удалось записать изображение: {e}") from e
    logger.info("Изображение сохранено в %s", path)
    return path


def split_channels(image: np.ndarray) -> List[np.ndarray]:
    """
    Разделяет изображение на каналы, каждый вытянут в вектор длины H·W.

    Args:
        image (np.ndarray): Массив H x W x C или H x W

    Returns:
        List[np.ndarray]: Векторы каналов
    """
    pixels = np.asarray(image, dtype=np.float64)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    if pixels.ndim != 3:
        raise ArgumentError(f"Ожидалось изображение H x W x C, получено {pixels.shape}")
    return [np.ascontiguousarray(pixels[:, :, c]).ravel() for c in range(pixels.shape[2])]


def merge_channels(channels: Sequence[np.ndarray], shape: Tuple[int, int]) -> np.ndarray:
    """Собирает векторы каналов обратно в массив H x W x C."""
    height, width = shape
    if not channels:
        raise ArgumentError("Нет каналов для сборки изображения")
    for channel in channels:
        if np.size(channel) != height * width:
            raise ArgumentError(f"Канал длины {np.size(channel)} не соответствует размеру {shape}")
    return np.stack([np.asarray(c).reshape(height, width) for c in channels], axis=2)


def to_display_range(recovered: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """
    Убирает глобальную фазу относительно исходного канала, берет
    вещественную часть и переводит значения из [0, 1] в [0, 255].

    Args:
        recovered (np.ndarray): Восстановленный (комплексный) канал
        reference (np.ndarray): Исходный канал в [0, 1]

    Returns:
        np.ndarray: Значения в [0, 255]
    """
    reference = np.asarray(reference, dtype=np.complex128)
    aligned = align_phase(np.asarray(recovered, dtype=np.complex128), reference)
    return np.clip(np.real(aligned), 0.0, 1.0) * 255.0


def make_gradient_image(height: int = 64, width: int = 64, channels: int = 3) -> np.ndarray:
    """
    Синтетическое тестовое изображение: горизонтальный, вертикальный и
    диагональный градиенты в каналах, значения в [0.1, 0.9].

    Args:
        height (int): Высота
        width (int): Ширина
        channels (int): 1 или 3

    Returns:
        np.ndarray: Массив H x W x C
    """
    if height < 1 or width < 1 or channels not in (1, 3):
        raise ArgumentError("make_gradient_image: нужно height, width >= 1 и 1 или 3 канала")
    rows = np.linspace(0.0, 1.0, height)[:, None]
    cols = np.linspace(0.0, 1.0, width)[None, :]
    planes = [0.1 + 0.8 * cols * np.ones_like(rows),
              0.1 + 0.8 * rows * np.ones_like(cols),
              0.1 + 0.4 * (rows + cols)]
    return np.stack(planes[:channels], axis=2)
