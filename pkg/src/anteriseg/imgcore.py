"""Core image/tensor types, color-space conversions and file I/O.

Images are 8-bit RGB or grayscale arrays wrapped in thin validated
containers. Color math follows the sRGB (D65) conventions: the hexcone
HSV model with hue in degrees [0, 360], and CIE L*a*b* through the
sRGB -> linear -> XYZ chain. Tensors use a small self-describing binary
format (see write_tensor/read_tensor).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import TensorFormatError, ValidationError

TENSOR_MAGIC = b"ATNS1\n"

# sRGB <-> XYZ (D65) matrices and white point
_RGB2XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ2RGB = np.linalg.inv(_RGB2XYZ)
# white point taken from the matrix itself so that pure white lands on
# exactly (100, 0, 0) instead of drifting by the rounding of tabulated D65
_WHITE_D65 = _RGB2XYZ.sum(axis=1)

GRAY_WEIGHTS = (0.299, 0.587, 0.114)


def _validated(arr: np.ndarray, ndim: int, what: str) -> np.ndarray:
    a = np.asarray(arr)
    if a.dtype != np.uint8:
        raise ValidationError(f"{what}: expected uint8 data, got {a.dtype}")
    if a.ndim != ndim:
        raise ValidationError(f"{what}: expected {ndim}-d array, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValidationError(f"{what}: empty image {a.shape}")
    a = a.copy()
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False, repr=False)
class ImageRGB8:
    """8-bit RGB image; data has shape (height, width, 3), row-major."""

    data: np.ndarray

    def __post_init__(self):
        a = _validated(self.data, 3, "ImageRGB8")
        if a.shape[2] != 3:
            raise ValidationError(f"ImageRGB8: expected 3 channels, got {a.shape[2]}")
        object.__setattr__(self, "data", a)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def __repr__(self):
        return f"ImageRGB8({self.width}x{self.height})"


@dataclass(frozen=True, eq=False, repr=False)
class ImageGray8:
    """8-bit single-channel image; data has shape (height, width)."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _validated(self.data, 2, "ImageGray8"))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def __repr__(self):
        return f"ImageGray8({self.width}x{self.height})"


@dataclass(frozen=True, eq=False, repr=False)
class BitMask:
    """Boolean mask with the dimensions of the image it belongs to."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.dtype != np.bool_:
            raise ValidationError(f"BitMask: expected bool data, got {a.dtype}")
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise ValidationError(f"BitMask: bad shape {a.shape}")
        a = a.copy()
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def count(self) -> int:
        return int(self.data.sum())

    def __repr__(self):
        return f"BitMask({self.width}x{self.height}, {self.count()} set)"


@dataclass(frozen=True, eq=False, repr=False)
class Tensor32:
    """Float32 tensor of rank >= 1 (used for embeddings, gradients, heatmaps)."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float32)
        if a.ndim < 1:
            raise ValidationError("Tensor32: rank-0 tensors are not supported")
        a = np.ascontiguousarray(a)
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def shape(self) -> tuple:
        return tuple(int(s) for s in self.data.shape)

    def __repr__(self):
        return f"Tensor32(shape={self.shape})"


def _check_pixel(r, g, b) -> tuple:
    out = []
    for name, v in (("r", r), ("g", g), ("b", b)):
        f = float(v)
        if not f.is_integer():
            raise ValidationError(f"pixel component {name}={v!r} is not an integer")
        if not 0 <= f <= 255:
            raise ValidationError(f"pixel component {name}={v!r} outside 0..255")
        out.append(f)
    return tuple(out)


def rgb_to_hsv_array(rgb: np.ndarray) -> np.ndarray:
    """Vectorized hexcone HSV. rgb: (..., 3) in 0..255. Returns float (...,3):
    H in degrees [0, 360), S and V in [0, 1]. H = 0 where S = 0."""
    a = np.asarray(rgb, dtype=np.float64) / 255.0
    r, g, b = a[..., 0], a[..., 1], a[..., 2]
    mx = np.max(a, axis=-1)
    mn = np.min(a, axis=-1)
    c = mx - mn
    safe_c = np.where(c == 0, 1.0, c)

    h = np.where(
        mx == r,
        ((g - b) / safe_c) % 6.0,
        np.where(mx == g, (b - r) / safe_c + 2.0, (r - g) / safe_c + 4.0),
    )
    h = np.where(c == 0, 0.0, 60.0 * h)
    s = np.where(mx == 0, 0.0, c / np.where(mx == 0, 1.0, mx))
    return np.stack([h, s, mx], axis=-1)


def rgb_to_hsv(r, g, b) -> tuple:
    """Convert one 8-bit RGB pixel to (hue_deg, saturation, value)."""
    rf, gf, bf = _check_pixel(r, g, b)
    h, s, v = rgb_to_hsv_array(np.array([rf, gf, bf]))
    return float(h), float(s), float(v)


def hsv_to_rgb_array(hsv: np.ndarray) -> np.ndarray:
    """Inverse hexcone transform. hsv: (..., 3) with H degrees, S/V in [0,1].
    Returns float RGB in 0..255 (not rounded)."""
    a = np.asarray(hsv, dtype=np.float64)
    h, s, v = a[..., 0] % 360.0, a[..., 1], a[..., 2]
    c = v * s
    hp = h / 60.0
    x = c * (1.0 - np.abs(hp % 2.0 - 1.0))
    z = np.zeros_like(c)
    sextant = np.floor(hp).astype(int) % 6
    r1 = np.choose(sextant, [c, x, z, z, x, c])
    g1 = np.choose(sextant, [x, c, c, x, z, z])
    b1 = np.choose(sextant, [z, z, x, c, c, x])
    m = v - c
    return np.stack([r1 + m, g1 + m, b1 + m], axis=-1) * 255.0


def hsv_to_rgb(h, s, v) -> tuple:
    r, g, b = hsv_to_rgb_array(np.array([float(h), float(s), float(v)]))
    return float(r), float(g), float(b)


def _srgb_to_linear(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.clip(c, 0.0, 1.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1.0 / 2.4) - 0.055)


_LAB_EPS = (6.0 / 29.0) ** 3
_LAB_KAPPA = (29.0 / 6.0) ** 2 / 3.0  # t/(3 delta^2) slope below the cube-root knee


def _lab_f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _LAB_EPS, np.cbrt(t), _LAB_KAPPA * t + 4.0 / 29.0)


def _lab_finv(t: np.ndarray) -> np.ndarray:
    return np.where(t > 6.0 / 29.0, t ** 3, (t - 4.0 / 29.0) / _LAB_KAPPA)


def rgb_to_lab_array(rgb: np.ndarray) -> np.ndarray:
    """Vectorized sRGB (D65) -> CIE L*a*b*. rgb: (..., 3) in 0..255."""
    a = np.asarray(rgb, dtype=np.float64) / 255.0
    lin = _srgb_to_linear(a)
    xyz = lin @ _RGB2XYZ.T
    f = _lab_f(xyz / _WHITE_D65)
    L = 116.0 * f[..., 1] - 16.0
    aa = 500.0 * (f[..., 0] - f[..., 1])
    bb = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, aa, bb], axis=-1)


def rgb_to_lab(r, g, b) -> tuple:
    """Convert one 8-bit RGB pixel to (L*, a*, b*), D65 white point."""
    rf, gf, bf = _check_pixel(r, g, b)
    L, aa, bb = rgb_to_lab_array(np.array([rf, gf, bf]))
    return float(L), float(aa), float(bb)


def lab_to_rgb_array(lab: np.ndarray) -> np.ndarray:
    """Inverse of rgb_to_lab_array. Returns float RGB in 0..255, gamut-clipped."""
    a = np.asarray(lab, dtype=np.float64)
    L, aa, bb = a[..., 0], a[..., 1], a[..., 2]
    fy = (L + 16.0) / 116.0
    fx = fy + aa / 500.0
    fz = fy - bb / 200.0
    xyz = np.stack([_lab_finv(fx), _lab_finv(fy), _lab_finv(fz)], axis=-1) * _WHITE_D65
    lin = xyz @ _XYZ2RGB.T
    return _linear_to_srgb(lin) * 255.0


def to_grayscale(img: ImageRGB8) -> ImageGray8:
    """Luma grayscale: round(0.299 R + 0.587 G + 0.114 B)."""
    w = np.array(GRAY_WEIGHTS)
    y = img.data.astype(np.float64) @ w
    return ImageGray8(np.clip(np.rint(y), 0, 255).astype(np.uint8))


def load_image(path) -> ImageRGB8:
    """Load a PNG/JPEG file as 8-bit RGB."""
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"image file not found: {p}")
    with Image.open(p) as im:
        return ImageRGB8(np.asarray(im.convert("RGB"), dtype=np.uint8))


def save_image(img, path) -> None:
    """Write an ImageRGB8/ImageGray8 as PNG (mode inferred from the type)."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(img, ImageRGB8):
        Image.fromarray(np.asarray(img.data), mode="RGB").save(p, format="PNG")
    elif isinstance(img, ImageGray8):
        Image.fromarray(np.asarray(img.data), mode="L").save(p, format="PNG")
    else:
        raise ValidationError(f"save_image: unsupported type {type(img).__name__}")


def write_tensor(t: Tensor32, path) -> None:
    """Serialize: magic 'ATNS1\\n', one JSON header line, raw LE float32 payload."""
    header = json.dumps({"dtype": "f32", "shape": list(t.shape)}, sort_keys=True)
    payload = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(header.encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload)


def read_tensor(path, allow_nonfinite: bool = False) -> Tensor32:
    """Read a tensor file written by write_tensor; byte-exact round trip."""
    p = Path(path)
    with open(p, "rb") as fh:
        magic = fh.read(len(TENSOR_MAGIC))
        if magic != TENSOR_MAGIC:
            raise TensorFormatError(f"{p}: bad magic {magic!r}")
        header_line = fh.readline()
        if not header_line.endswith(b"\n"):
            raise TensorFormatError(f"{p}: truncated header")
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise TensorFormatError(f"{p}: unparseable header: {e}") from e
        if header.get("dtype") != "f32":
            raise TensorFormatError(f"{p}: unsupported dtype {header.get('dtype')!r}")
        shape = header.get("shape")
        if (
            not isinstance(shape, list)
            or len(shape) == 0
            or not all(isinstance(s, int) and s > 0 for s in shape)
        ):
            raise TensorFormatError(f"{p}: bad shape {shape!r} (rank >= 1 required)")
        n = int(np.prod(shape))
        payload = fh.read()
    if len(payload) != 4 * n:
        raise TensorFormatError(
            f"{p}: payload holds {len(payload)} bytes, shape {shape} needs {4 * n}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
    bad = int(np.size(arr) - np.isfinite(arr).sum())
    if bad and not allow_nonfinite:
        raise TensorFormatError(f"{p}: {bad} non-finite value(s) in payload")
    return Tensor32(arr)
