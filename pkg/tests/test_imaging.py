import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from skinlesion.imaging import BoundingBox, crop, read_image, rescale_unit, resize_bilinear, to_grayscale, write_png

rgb_images = arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12), st.just(3)))


def test_grayscale_white_black():
    assert np.all(to_grayscale(np.full((3, 4, 3), 255, np.uint8)) == 255.0)
    assert np.all(to_grayscale(np.zeros((3, 4, 3), np.uint8)) == 0.0)


def test_grayscale_single_pixel():
    # 0.299*100 + 0.587*200 + 0.114*50, evaluated by hand
    px = np.array([[[100, 200, 50]]], np.uint8)
    assert to_grayscale(px)[0, 0] == pytest.approx(153.0, abs=1e-4)


@given(rgb_images, st.floats(0.0, 1.0))
def test_grayscale_scales_linearly(img, alpha):
    # channel rounding moves each value by <= 0.5 and the weights sum to 1
    scaled = (img.astype(np.float64) * alpha).round().astype(np.uint8)
    assert np.allclose(to_grayscale(scaled), alpha * to_grayscale(img), atol=0.5 + 1e-3)


def test_resize_512_to_256():
    img = np.random.default_rng(0).integers(0, 256, (512, 512, 3), dtype=np.uint8)
    assert resize_bilinear(img, 256, 256).shape == (256, 256, 3)


@given(rgb_images)
def test_resize_identity(img):
    out = resize_bilinear(img, img.shape[1], img.shape[0])
    assert out.dtype == img.dtype and np.array_equal(out, img)


def test_resize_two_pixel_row():
    out = resize_bilinear(np.array([[0.0, 100.0]], np.float32), 4, 1)
    assert out.shape == (1, 4)
    assert np.all(np.diff(out[0]) >= 0)
    assert out[0, 0] == 0 and out[0, -1] == 100


@settings(max_examples=50)
@given(arrays(np.float32, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=st.floats(-50, 50, width=32)),
       st.integers(1, 20), st.integers(1, 20))
def test_resize_convex(img, w, h):
    out = resize_bilinear(img, w, h)
    assert out.shape == (h, w)
    assert out.min() >= img.min() - 1e-4 and out.max() <= img.max() + 1e-4


def test_resize_zero_dimension():
    with pytest.raises(ValueError):
        resize_bilinear(np.zeros((4, 4), np.float32), 0, 4)


def test_rescale_values():
    img = np.array([[[255, 0, 51]]], np.uint8)
    out = rescale_unit(img)
    assert out.dtype == np.float32
    assert out[0, 0, 0] == 1.0 and out[0, 0, 1] == 0.0
    assert out[0, 0, 2] == pytest.approx(0.2)


@given(rgb_images)
def test_rescale_round_trip(img):
    assert np.array_equal(np.rint(rescale_unit(img) * 255).astype(np.uint8), img)


def test_crop_cases():
    img = np.arange(20 * 30 * 3, dtype=np.int64).reshape(20, 30, 3).astype(np.uint8)
    assert np.array_equal(crop(img, BoundingBox.full(img.shape)), img)
    assert np.array_equal(crop(img, BoundingBox(4, 7, 1, 1))[0, 0], img[4, 7])
    grad = np.add.outer(np.arange(20), np.arange(30)).astype(np.uint8)[..., None].repeat(3, axis=2)
    window = crop(grad, BoundingBox(5, 9, 10, 10))
    for r in range(10):
        for c in range(10):
            assert np.array_equal(window[r, c], grad[5 + r, 9 + c])


def test_crop_out_of_bounds():
    with pytest.raises(ValueError):
        crop(np.zeros((5, 5, 3), np.uint8), BoundingBox(3, 3, 3, 3))


@given(st.integers(0, 5), st.integers(0, 5), st.integers(1, 5), st.integers(1, 5),
       st.integers(0, 4), st.integers(0, 4), st.integers(1, 4), st.integers(1, 4))
def test_crop_composes(t1, l1, h1, w1, t2, l2, h2, w2):
    img = np.random.default_rng(1).integers(0, 256, (12, 12, 3), dtype=np.uint8)
    b1, b2 = BoundingBox(t1, l1, h1, w1), BoundingBox(t2, l2, h2, w2)
    if not b2.fits((h1, w1)):
        return
    assert np.array_equal(crop(crop(img, b1), b2), crop(img, b2.shifted(t1, l1)))


def test_bbox_iou():
    a = BoundingBox(0, 0, 10, 10)
    assert a.iou(a) == 1.0
    assert a.iou(BoundingBox(20, 20, 5, 5)) == 0.0
    assert a.iou(BoundingBox(0, 5, 10, 10)) == pytest.approx(50 / 150)


def test_png_round_trip(tmp_path):
    img = np.random.default_rng(2).integers(0, 256, (7, 9, 3), dtype=np.uint8)
    write_png(tmp_path / "x.png", img)
    assert np.array_equal(read_image(tmp_path / "x.png"), img)


def test_read_corrupt(tmp_path):
    p = tmp_path / "bad.jpg"
    p.write_bytes(b"not an image")
    with pytest.raises(OSError):
        read_image(p)
