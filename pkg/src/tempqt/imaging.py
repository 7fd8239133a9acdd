"""Image decoding/encoding, grayscale conversion, and synthetic distortions.

File support is deliberately narrow: binary and ASCII PGM/PPM (P2, P3,
P5, P6) with maxval 255 or 65535. Color input is reduced to luma with
the Rec.601 weights. Values are held as float32 in [0, 1].

The distortion bank is three parametric families with severity 1..5
(severity 0 is accepted as an identity passthrough). The noise family
draws from the counter-based generator in :mod:`tempqt.rng`, so a given
(image, spec) pair produces bit-identical output on every run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ParseError
from .rng import CounterRng, derive_seed

DISTORTION_KINDS = ("gaussian_blur", "white_noise", "block_quantize")

_LUMA_R, _LUMA_G, _LUMA_B = 0.299, 0.587, 0.114
_WHITESPACE = b" \t\n\r\x0b\x0c"


@dataclass
class GrayImage:
    """Single-channel image, float32 pixels in [0, 1], shape (H, W)."""

    height: int
    width: int
    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim != 2 or arr.shape != (self.height, self.width):
            raise ArgumentError(
                f"pixel array shape {arr.shape} does not match {self.height}x{self.width}"
            )
        arr = arr.astype(np.float32, copy=False)
        if not np.all(np.isfinite(arr)):
            raise ArgumentError("pixels must be finite")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ArgumentError("pixels must lie in [0, 1]")
        self.pixels = arr

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "GrayImage":
        arr = np.asarray(arr)
        return cls(arr.shape[0], arr.shape[1], arr)


class _HeaderReader:
    """Tokenizer over a netpbm header; tracks byte offsets for errors."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def _skip_filler(self) -> None:
        data = self.data
        while self.pos < len(data):
            ch = data[self.pos : self.pos + 1]
            if ch in (b"#",):
                nl = data.find(b"\n", self.pos)
                self.pos = len(data) if nl < 0 else nl + 1
            elif ch and ch in _WHITESPACE:
                self.pos += 1
            else:
                return

    def token(self, what: str) -> tuple[bytes, int]:
        self._skip_filler()
        if self.pos >= len(self.data):
            raise ParseError(f"unexpected end of file while reading {what}", self.pos)
        start = self.pos
        data = self.data
        while self.pos < len(data) and data[self.pos : self.pos + 1] not in _WHITESPACE:
            if data[self.pos : self.pos + 1] == b"#":
                break
            self.pos += 1
        return data[start : self.pos], start

    def integer(self, what: str) -> tuple[int, int]:
        tok, start = self.token(what)
        if not tok.isdigit():
            raise ParseError(f"expected an integer for {what}, got {tok!r}", start)
        return int(tok), start


def _parse_pnm(data: bytes) -> tuple[str, int, int, int, np.ndarray]:
    reader = _HeaderReader(data)
    magic, off = reader.token("magic number")
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise ParseError(f"unsupported magic {magic!r}", off)
    magic = magic.decode()
    width, off = reader.integer("width")
    if width < 1:
        raise ParseError("width must be positive", off)
    height, off = reader.integer("height")
    if height < 1:
        raise ParseError("height must be positive", off)
    maxval, off = reader.integer("maxval")
    if maxval not in (255, 65535):
        raise ParseError(f"unsupported maxval {maxval} (expected 255 or 65535)", off)
    channels = 3 if magic in ("P3", "P6") else 1
    count = width * height * channels

    if magic in ("P5", "P6"):
        # exactly one whitespace byte separates the header from the raster
        if reader.pos >= len(data) or data[reader.pos : reader.pos + 1] not in _WHITESPACE:
            raise ParseError("expected a whitespace byte after maxval", reader.pos)
        raster_at = reader.pos + 1
        itemsize = 2 if maxval == 65535 else 1
        need = count * itemsize
        if len(data) - raster_at < need:
            raise ParseError(
                f"truncated raster: need {need} bytes, file has {len(data) - raster_at}",
                len(data),
            )
        raw = data[raster_at : raster_at + need]
        dtype = ">u2" if maxval == 65535 else np.uint8
        samples = np.frombuffer(raw, dtype=dtype).astype(np.float64)
    else:
        values = np.empty(count, dtype=np.float64)
        for i in range(count):
            v, off = reader.integer("sample value")
            if v > maxval:
                raise ParseError(f"sample {v} exceeds maxval {maxval}", off)
            values[i] = v
        samples = values

    return magic, width, height, maxval, samples


def load_image(path) -> GrayImage:
    """Load a PGM or PPM file as a grayscale image in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic, width, height, maxval, samples = _parse_pnm(data)
    scaled = samples / float(maxval)
    if magic in ("P3", "P6"):
        rgb = scaled.reshape(height, width, 3)
        gray = _LUMA_R * rgb[:, :, 0] + _LUMA_G * rgb[:, :, 1] + _LUMA_B * rgb[:, :, 2]
    else:
        gray = scaled.reshape(height, width)
    return GrayImage(height, width, np.clip(gray, 0.0, 1.0).astype(np.float32))


def save_image(img: GrayImage, path) -> None:
    """Write an 8-bit binary PGM; pixels are rounded to the 255 grid."""
    q = np.clip(np.rint(img.pixels.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(q.tobytes())


def quantize_to_8bit(img: GrayImage) -> GrayImage:
    """Snap pixels to the 8-bit grid, matching a save/load round trip."""
    q = np.clip(np.rint(img.pixels.astype(np.float64) * 255.0), 0, 255) / 255.0
    return GrayImage(img.height, img.width, q.astype(np.float32))


# ---------------------------------------------------------------------------
# distortions


@dataclass(frozen=True)
class DistortionSpec:
    """One distortion to apply: a family, a severity, and a noise seed."""

    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DISTORTION_KINDS:
            raise ArgumentError(f"unknown distortion kind {self.kind!r}")
        if not isinstance(self.severity, (int, np.integer)) or not 0 <= self.severity <= 5:
            raise ArgumentError(f"severity must be an integer in 0..5, got {self.severity!r}")


def pseudo_mos(spec: DistortionSpec) -> float:
    """Synthetic subjective score: 1 at severity 0, falling 0.18 per step."""
    return 1.0 - 0.18 * spec.severity


def _gaussian_blur(img: GrayImage, severity: int) -> np.ndarray:
    sigma = 0.5 * severity
    if sigma == 0.0:
        return img.pixels.copy()
    radius = max(1, int(np.ceil(3.0 * sigma)))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    kernel /= kernel.sum()
    # separable pass with edge replication
    p = img.pixels.astype(np.float64)
    padded = np.pad(p, ((0, 0), (radius, radius)), mode="edge")
    rows = np.zeros_like(p)
    for k, wgt in enumerate(kernel):
        rows += wgt * padded[:, k : k + img.width]
    padded = np.pad(rows, ((radius, radius), (0, 0)), mode="edge")
    out = np.zeros_like(p)
    for k, wgt in enumerate(kernel):
        out += wgt * padded[k : k + img.height, :]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _white_noise(img: GrayImage, severity: int, seed: int) -> np.ndarray:
    std = 0.04 * severity
    if std == 0.0:
        return img.pixels.copy()
    rng = CounterRng(seed)
    noise = rng.normal(img.height * img.width).reshape(img.height, img.width) * std
    return np.clip(img.pixels.astype(np.float64) + noise, 0.0, 1.0).astype(np.float32)


def _block_quantize(img: GrayImage, severity: int) -> np.ndarray:
    if severity == 0:
        return img.pixels.copy()
    levels = 2 ** (7 - severity)
    step = 1.0 / levels
    p = img.pixels.astype(np.float64)
    out = np.empty_like(p)
    # Quantize deviations from each 8x8 block's mean so a fully flattened
    # block settles exactly at its original average.
    for top in range(0, img.height, 8):
        for left in range(0, img.width, 8):
            block = p[top : top + 8, left : left + 8]
            m = block.mean()
            out[top : top + 8, left : left + 8] = m + np.rint((block - m) / step) * step
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_distortion(img: GrayImage, spec: DistortionSpec) -> GrayImage:
    """Apply one distortion; severity 0 returns an identical copy."""
    if spec.kind == "gaussian_blur":
        out = _gaussian_blur(img, spec.severity)
    elif spec.kind == "white_noise":
        out = _white_noise(img, spec.severity, spec.seed)
    else:
        out = _block_quantize(img, spec.severity)
    return GrayImage(img.height, img.width, out)


# ---------------------------------------------------------------------------
# procedural content for experiments and tests


def make_texture(height: int, width: int, seed: int) -> GrayImage:
    """Procedural base texture: a fixed multi-band grid with seeded jitter.

    All instances share the same four-band spectrum (checkerboard plus
    gratings at periods ~6, ~12, and ~20 pixels) and differ in phases,
    small amplitude jitter, and axis orientation. Every blur severity
    removes a distinct band, every 8x8 block carries contrast for
    quantization to bite, and the shared spectrum keeps the family
    narrow enough for short training schedules to generalize across
    instances. Content diversity is deliberately traded away: these
    textures exercise distortion-severity ordering, not cross-content
    robustness.
    """
    if height < 1 or width < 1:
        raise ArgumentError("texture dims must be positive")
    rng = CounterRng(derive_seed(seed, "texture"))
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    checker = 2.0 * ((xs + ys) % 2) - 1.0
    field = (0.42 + 0.08 * rng.uniform(1)[0]) * checker
    # (period, base weight, direction pair) per grating band
    bands = [(6.0, 0.95, (1.0, 0.7)), (12.0, 0.80, (0.6, -1.0)), (20.0, 0.60, (1.0, -0.35))]
    for period, weight, (dx, dy) in bands:
        phase = 2.0 * np.pi * rng.uniform(1)[0]
        w = weight * (0.9 + 0.2 * rng.uniform(1)[0])
        field += w * np.sin(2.0 * np.pi * (dx * xs + dy * ys) / period + phase)
    if rng.uniform(1)[0] < 0.5:
        field = field[:, ::-1]
    if rng.uniform(1)[0] < 0.5:
        field = field[::-1, :]
    lo, hi = field.min(), field.max()
    if hi - lo < 1e-9:
        return GrayImage(height, width, np.full((height, width), 0.5, dtype=np.float32))
    # leave headroom at both ends so additive noise is not mostly clipped
    norm = 0.08 + 0.84 * (field - lo) / (hi - lo)
    return GrayImage(height, width, np.ascontiguousarray(norm).astype(np.float32))
