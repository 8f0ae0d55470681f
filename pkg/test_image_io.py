"""Проверки чтения и записи изображений для эксперимента CDP."""
import numpy as np
import pytest
from PIL import Image

from image_io import load_png, make_gradient_image, merge_channels, save_png, split_channels, to_display_range
from utils import ArgumentError, ExperimentIOError


def test_gradient_image_shape_and_range():
    image = make_gradient_image(16, 24)
    assert image.shape == (16, 24, 3)
    assert image.min() == pytest.approx(0.1)
    assert image.max() == pytest.approx(0.9)
    assert make_gradient_image(4, 4, channels=1).shape == (4, 4, 1)
    with pytest.raises(ArgumentError):
        make_gradient_image(4, 4, channels=2)


def test_png_round_trip(tmp_path):
    image = make_gradient_image(8, 8)
    path = save_png(tmp_path / "gradient.png", image * 255.0)
    loaded = load_png(path)
    assert loaded.shape == (8, 8, 3)
    np.testing.assert_allclose(loaded, image, atol=0.5 / 255.0 + 1e-12)


def test_grayscale_png_has_one_channel(tmp_path):
    path = tmp_path / "gray.png"
    Image.fromarray(np.full((5, 7), 128, dtype=np.uint8)).save(path)
    loaded = load_png(path, size=(4, 3))
    assert loaded.shape == (3, 4, 1)
    np.testing.assert_allclose(loaded, 128 / 255.0)


def test_split_and_merge_channels():
    image = make_gradient_image(6, 5)
    channels = split_channels(image)
    assert len(channels) == 3 and channels[0].shape == (30,)
    np.testing.assert_array_equal(merge_channels(channels, (6, 5)), image)
    with pytest.raises(ArgumentError):
        merge_channels(channels, (5, 5))


def test_display_range_removes_global_phase():
    reference = np.array([0.0, 0.5, 1.0, 0.25])
    recovered = np.exp(1.3j) * reference
    np.testing.assert_allclose(to_display_range(recovered, reference), reference * 255.0, atol=1e-9)
    clipped = to_display_range(np.array([2.0, -1.0]), np.array([1.0, 0.0]))
    np.testing.assert_allclose(clipped, [255.0, 0.0])


def test_io_errors_name_the_path(tmp_path):
    with pytest.raises(ExperimentIOError) as missing:
        load_png(tmp_path / "missing.png")
    assert missing.value.path == str(tmp_path / "missing.png")
    with pytest.raises(ExperimentIOError):
        load_png(tmp_path / "image.jpg")
    broken = tmp_path / "broken.png"
    broken.write_bytes(b"not an image")
    with pytest.raises(ExperimentIOError):
        load_png(broken)
