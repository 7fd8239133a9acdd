"""Netpbm IO golden tests and the distortion bank."""

import numpy as np
import pytest

from tempqt.errors import ArgumentError, ParseError
from tempqt.imaging import (
    DISTORTION_KINDS,
    DistortionSpec,
    GrayImage,
    apply_distortion,
    load_image,
    pseudo_mos,
    quantize_to_8bit,
    save_image,
)


def write(tmp_path, name, data: bytes):
    p = tmp_path / name
    p.write_bytes(data)
    return p


# ---------------------------------------------------------------------------
# decoding


def test_p5_golden(tmp_path):
    p = write(tmp_path, "a.pgm", b"P5\n2 2\n255\n" + bytes([0, 128, 64, 255]))
    img = load_image(p)
    assert (img.height, img.width) == (2, 2)
    assert np.allclose(img.pixels, np.array([[0, 128], [64, 255]]) / 255.0, atol=1e-7)


def test_p2_ascii_with_comments(tmp_path):
    text = b"P2 # ascii gray\n# a comment line\n3 1\n255\n0 127 255\n"
    img = load_image(write(tmp_path, "a.pgm", text))
    assert img.pixels.shape == (1, 3)
    assert np.allclose(img.pixels, [[0.0, 127 / 255.0, 1.0]], atol=1e-7)


def test_p6_luma_reduction(tmp_path):
    # one red, one green, one blue pixel; Rec.601 weights
    raster = bytes([255, 0, 0, 0, 255, 0, 0, 0, 255])
    img = load_image(write(tmp_path, "a.ppm", b"P6\n3 1\n255\n" + raster))
    assert np.allclose(img.pixels, [[0.299, 0.587, 0.114]], atol=1e-7)


def test_p3_ascii_color(tmp_path):
    img = load_image(write(tmp_path, "a.ppm", b"P3\n1 1\n255\n255 255 255\n"))
    assert img.pixels[0, 0] == pytest.approx(1.0)


def test_maxval_65535_big_endian(tmp_path):
    raster = (65535).to_bytes(2, "big") + (0).to_bytes(2, "big")
    img = load_image(write(tmp_path, "a.pgm", b"P5\n2 1\n65535\n" + raster))
    assert np.allclose(img.pixels, [[1.0, 0.0]])


@pytest.mark.parametrize(
    "data",
    [
        b"P7\n1 1\n255\n\x00",
        b"P5\n0 1\n255\n",
        b"P5\n1 1\n254\n\x00",
        b"P5\n2 2\n255\n\x00\x00",  # truncated raster
        b"P2\n1 1\n255\n999\n",  # sample exceeds maxval
        b"P2\n1 1\n255\n",  # missing sample
        b"P5\nx 1\n255\n\x00",
    ],
)
def test_malformed_files_raise(tmp_path, data):
    with pytest.raises(ParseError):
        load_image(write(tmp_path, "bad.pgm", data))


def test_save_golden_and_round_trip(tmp_path):
    img = GrayImage(1, 2, np.array([[0.0, 1.0]], dtype=np.float32))
    path = tmp_path / "out.pgm"
    save_image(img, path)
    assert path.read_bytes() == b"P5\n2 1\n255\n\x00\xff"
    back = load_image(path)
    assert np.array_equal(back.pixels, img.pixels)


def test_quantize_matches_save_load(tmp_path):
    rng = np.random.default_rng(0)
    img = GrayImage.from_array(rng.random((9, 7), dtype=np.float64).astype(np.float32))
    path = tmp_path / "q.pgm"
    save_image(img, path)
    assert np.array_equal(load_image(path).pixels, quantize_to_8bit(img).pixels)


def test_gray_image_validation():
    with pytest.raises(ArgumentError):
        GrayImage(2, 2, np.zeros((2, 3)))
    with pytest.raises(ArgumentError):
        GrayImage(1, 2, np.array([[0.0, 1.5]]))
    with pytest.raises(ArgumentError):
        GrayImage(1, 1, np.array([[np.nan]]))


# ---------------------------------------------------------------------------
# distortions


def ramp_image(n=32):
    g = np.linspace(0.0, 1.0, n * n, dtype=np.float32).reshape(n, n)
    return GrayImage(n, n, g)


def test_spec_validation():
    with pytest.raises(ArgumentError):
        DistortionSpec("salt_pepper", 1)
    with pytest.raises(ArgumentError):
        DistortionSpec("white_noise", 6)
    with pytest.raises(ArgumentError):
        DistortionSpec("white_noise", 2.5)


def test_pseudo_mos_ladder():
    vals = [pseudo_mos(DistortionSpec("gaussian_blur", s)) for s in range(6)]
    assert vals == pytest.approx([1.0, 0.82, 0.64, 0.46, 0.28, 0.10])


@pytest.mark.parametrize("kind", DISTORTION_KINDS)
def test_severity_zero_is_identity(kind):
    img = ramp_image()
    out = apply_distortion(img, DistortionSpec(kind, 0, seed=3))
    assert np.array_equal(out.pixels, img.pixels)


@pytest.mark.parametrize("kind", DISTORTION_KINDS)
def test_distortions_deterministic(kind):
    img = ramp_image()
    spec = DistortionSpec(kind, 3, seed=11)
    a = apply_distortion(img, spec)
    b = apply_distortion(img, spec)
    assert np.array_equal(a.pixels, b.pixels)


def test_noise_seed_changes_output():
    img = ramp_image()
    a = apply_distortion(img, DistortionSpec("white_noise", 3, seed=1))
    b = apply_distortion(img, DistortionSpec("white_noise", 3, seed=2))
    assert not np.array_equal(a.pixels, b.pixels)


def test_blur_reduces_variance_monotonically():
    rng = np.random.default_rng(5)
    img = GrayImage.from_array(rng.random((32, 32)).astype(np.float32))
    variances = [
        float(apply_distortion(img, DistortionSpec("gaussian_blur", s)).pixels.var())
        for s in range(6)
    ]
    assert all(variances[i + 1] < variances[i] for i in range(5))


def test_noise_error_grows_with_severity():
    img = ramp_image()
    errs = [
        float(
            np.abs(
                apply_distortion(img, DistortionSpec("white_noise", s, seed=4)).pixels
                - img.pixels
            ).mean()
        )
        for s in range(6)
    ]
    assert all(errs[i + 1] > errs[i] for i in range(5))


def test_quantize_reduces_level_count():
    img = ramp_image()
    levels = [
        np.unique(apply_distortion(img, DistortionSpec("block_quantize", s)).pixels).size
        for s in (1, 3, 5)
    ]
    assert levels[0] > levels[1] > levels[2]


def test_outputs_stay_in_range():
    img = ramp_image()
    for kind in DISTORTION_KINDS:
        for sev in (1, 5):
            out = apply_distortion(img, DistortionSpec(kind, sev, seed=9)).pixels
            assert out.min() >= 0.0 and out.max() <= 1.0
