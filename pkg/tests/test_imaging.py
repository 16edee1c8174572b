"""Image I/O scaling, quantization bounds, and color conversions against
per-pixel scalar oracles."""

import numpy as np
import pytest
from PIL import Image

from uwrestore import container
from uwrestore.errors import ImageIOError, ShapeError
from uwrestore.imaging import (
    ImageGray,
    ImageRGB,
    load_image,
    load_image_any,
    quantize_u8,
    rgb_to_hsv,
    rgb_to_lab,
    save_image,
    save_image_any,
)

import oracles


def rand_img(seed, h=8, w=8):
    return ImageRGB(np.random.default_rng(seed).uniform(0, 1, (h, w, 3)))


# ---------------------------------------------------------------------------
# containers clamp and validate
# ---------------------------------------------------------------------------


def test_image_types_clamp():
    img = ImageRGB(np.array([[[1.5, -0.2, 0.5]]]))
    assert img.pixels.tolist() == [[[1.0, 0.0, 0.5]]]
    gray = ImageGray(np.array([[2.0, -1.0]]))
    assert gray.values.tolist() == [[1.0, 0.0]]


def test_image_types_reject_bad_shapes():
    with pytest.raises(ShapeError):
        ImageRGB(np.zeros((4, 4)))
    with pytest.raises(ShapeError):
        ImageRGB(np.zeros((4, 4, 4)))
    with pytest.raises(ShapeError):
        ImageGray(np.zeros((4, 4, 3)))
    with pytest.raises(ShapeError):
        ImageRGB(np.full((2, 2, 3), np.nan))


# ---------------------------------------------------------------------------
# load / save
# ---------------------------------------------------------------------------


def test_load_8bit_scaling(tmp_path):
    path = tmp_path / "x.png"
    Image.fromarray(np.array([[[255, 0, 128]]], dtype=np.uint8), "RGB").save(path)
    img = load_image(path)
    assert img.pixels[0, 0, 0] == 1.0
    assert img.pixels[0, 0, 1] == 0.0
    assert np.isclose(img.pixels[0, 0, 2], 128 / 255)


def test_load_16bit_png(tmp_path):
    path = tmp_path / "d.png"
    arr = np.array([[0, 32768, 65535]], dtype=np.uint16)
    im = Image.new("I;16", (3, 1))
    im.putdata([int(v) for v in arr[0]])
    im.save(path)
    img = load_image(path)
    assert img.pixels[0, 0, 0] == 0.0
    assert np.isclose(img.pixels[0, 1, 0], 32768 / 65535)
    assert img.pixels[0, 2, 0] == 1.0


def test_grayscale_replicates_channels(tmp_path):
    path = tmp_path / "g.png"
    Image.fromarray(np.array([[10, 200]], dtype=np.uint8), "L").save(path)
    img = load_image(path)
    assert img.pixels.shape == (1, 2, 3)
    assert np.all(img.pixels[0, 0] == 10 / 255)


def test_ppm_roundtrip(tmp_path):
    path = tmp_path / "p.ppm"
    arr = np.array([[[10, 20, 30], [250, 0, 90]]], dtype=np.uint8)
    Image.fromarray(arr, "RGB").save(path)
    img = load_image(path)
    assert np.allclose(img.pixels, arr / 255.0)


def test_quantization_values():
    assert quantize_u8(np.array([0.5]))[0] == 128  # round half up
    assert quantize_u8(np.array([1.0]))[0] == 255
    assert quantize_u8(np.array([0.0]))[0] == 0


def test_save_load_roundtrip_bound(tmp_path):
    img = rand_img(0, 16, 16)
    path = tmp_path / "r.png"
    save_image(img, path)
    back = load_image(path)
    assert np.abs(back.pixels - img.pixels).max() <= 0.5 / 255 + 1e-9


def test_save_gray_png(tmp_path):
    gray = ImageGray(np.array([[0.0, 0.5, 1.0]]))
    path = tmp_path / "g.png"
    save_image(gray, path)
    assert list(np.asarray(Image.open(path))[0]) == [0, 128, 255]


def test_load_errors_carry_path(tmp_path):
    missing = tmp_path / "none.png"
    with pytest.raises(ImageIOError, match="none.png"):
        load_image(missing)
    corrupt = tmp_path / "c.png"
    corrupt.write_bytes(b"this is not a png")
    with pytest.raises(ImageIOError, match="c.png"):
        load_image(corrupt)


def test_save_unwritable_path():
    img = rand_img(1, 4, 4)
    with pytest.raises(ImageIOError):
        save_image(img, "/nonexistent-dir/sub/x.png")


def test_mttb_image_roundtrip_exact(tmp_path):
    img = rand_img(2, 6, 6)
    path = tmp_path / "e.mttb"
    save_image_any(img, path)
    back = load_image_any(path)
    assert np.array_equal(back.pixels, img.pixels)


def test_mttb_gray_promotes_to_rgb(tmp_path):
    path = tmp_path / "m.mttb"
    vals = np.random.default_rng(3).uniform(0, 1, (4, 5))
    container.write_tensors(path, {"map": vals})
    img = load_image_any(path)
    assert img.pixels.shape == (4, 5, 3)
    assert np.array_equal(img.pixels[:, :, 1], vals)


def test_load_is_deterministic(tmp_path):
    path = tmp_path / "d.png"
    save_image(rand_img(4, 8, 8), path)
    a = load_image(path).pixels
    b = load_image(path).pixels
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# color conversions
# ---------------------------------------------------------------------------


def test_lab_white_black():
    lab = rgb_to_lab(ImageRGB(np.ones((1, 1, 3))))
    assert np.isclose(lab[0, 0, 0], 100.0, atol=0.01)
    assert abs(lab[0, 0, 1]) < 0.01 and abs(lab[0, 0, 2]) < 0.01
    lab0 = rgb_to_lab(ImageRGB(np.zeros((1, 1, 3))))
    assert np.isclose(lab0[0, 0, 0], 0.0, atol=1e-9)


def test_lab_matches_scalar_chain():
    mid = rgb_to_lab(ImageRGB(np.full((1, 1, 3), 0.5)))[0, 0]
    ref = oracles.lab_pixel(0.5, 0.5, 0.5)
    assert np.allclose(mid, ref, atol=1e-9)

    img = rand_img(5, 4, 4)
    lab = rgb_to_lab(img)
    for y in range(4):
        for x in range(4):
            ref = oracles.lab_pixel(*img.pixels[y, x])
            assert np.allclose(lab[y, x], ref, atol=1e-9)


def test_hsv_achromatic_and_red():
    hsv = rgb_to_hsv(ImageRGB(np.full((1, 1, 3), 0.4)))
    assert hsv[0, 0, 1] == 0.0  # gray has no saturation
    red = rgb_to_hsv(ImageRGB(np.array([[[1.0, 0.0, 0.0]]])))[0, 0]
    assert np.allclose(red, [0.0, 1.0, 1.0], atol=1e-12)


def test_hsv_matches_pixel_formula():
    img = rand_img(6, 5, 5)
    hsv = rgb_to_hsv(img)
    for y in range(5):
        for x in range(5):
            ref = oracles.hsv_pixel(*img.pixels[y, x])
            assert np.allclose(hsv[y, x], ref, atol=1e-9)


def test_hsv_inverse_roundtrip():
    img = rand_img(7, 6, 6)
    hsv = rgb_to_hsv(img)
    for y in range(6):
        for x in range(6):
            rgb = oracles.hsv_to_rgb_pixel(*hsv[y, x])
            assert np.allclose(rgb, img.pixels[y, x], atol=1e-6)


def test_conversions_pure():
    img = rand_img(8, 4, 4)
    assert np.array_equal(rgb_to_lab(img), rgb_to_lab(img))
    assert np.array_equal(rgb_to_hsv(img), rgb_to_hsv(img))
