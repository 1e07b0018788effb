"""Pixel-level kernels: blur, CLAHE, Canny edges, dilation, inpainting, resize.

All kernels are plain numpy implementations with pinned numeric conventions:

* Gaussian blur: separable sampled kernel, radius ceil(3*sigma), edge-clamp.
* CLAHE: per-tile 256-bin clipped histogram (clip limit expressed as a multiple
  of the uniform bin height), clipped excess redistributed uniformly in one
  pass, per-tile LUT from the mid-bin CDF normalized to full range, bilinear
  interpolation between the four surrounding tile LUTs. Constant images stay
  within +/-1 gray level at the default clip of 2.0.
* Canny: blur -> Sobel -> non-maximum suppression over 4 quantized directions
  -> double-threshold hysteresis (8-connectivity). Gradient magnitude is
  scaled by 1/4 so thresholds live on a 0..360-ish scale for 8-bit input.
* Telea inpainting: fast-marching front from the mask boundary inward; each
  filled pixel is the normalized direction*distance*level weighted average of
  non-hole neighbors within the radius. Pixels outside the mask are untouched.
"""

from __future__ import annotations

import heapq
import math

import numpy as np

from .errors import ValidationError
from .imgcore import (
    BitMask,
    ImageGray8,
    ImageRGB8,
    Tensor32,
    lab_to_rgb_array,
    rgb_to_lab_array,
)

_BIG = 1e6


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized sampled Gaussian, taps at -r..r with r = ceil(3*sigma)."""
    if sigma <= 0:
        raise ValidationError(f"sigma must be > 0, got {sigma}")
    r = int(math.ceil(3.0 * sigma))
    xs = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(xs ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def _conv1d_axis(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """Correlate along one axis with edge-clamped borders."""
    r = (len(kernel) - 1) // 2
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (r, r)
    p = np.pad(arr, pad, mode="edge")
    out = np.zeros_like(arr, dtype=np.float64)
    sl = [slice(None)] * arr.ndim
    n = arr.shape[axis]
    for i, w in enumerate(kernel):
        sl[axis] = slice(i, i + n)
        out += w * p[tuple(sl)]
    return out


def blur_float(arr: np.ndarray, sigma: float) -> np.ndarray:
    k = gaussian_kernel1d(sigma)
    return _conv1d_axis(_conv1d_axis(arr.astype(np.float64), k, 0), k, 1)


def gaussian_blur(img: ImageGray8, sigma: float) -> ImageGray8:
    out = blur_float(img.data, sigma)
    return ImageGray8(np.clip(np.rint(out), 0, 255).astype(np.uint8))


# ---------------------------------------------------------------------------
# CLAHE


def _tile_edges(n: int, tiles: int) -> np.ndarray:
    return np.rint(np.linspace(0.0, n, tiles + 1)).astype(int)


def _tile_lut(hist: np.ndarray, clip_limit: float) -> np.ndarray:
    """LUT (256 float entries) from one tile histogram."""
    h = hist.astype(np.float64)
    if np.count_nonzero(h) <= 1:
        # a flat tile has no contrast to spread; clipping would smear its
        # single spike across all bins and shift the value, so map it to itself
        return np.arange(256, dtype=np.float64)
    total = h.sum()
    limit = clip_limit * total / 256.0
    if np.isfinite(limit):
        excess = np.maximum(h - limit, 0.0).sum()
        h = np.minimum(h, limit) + excess / 256.0
    cdf = np.cumsum(h)
    mid = cdf - h / 2.0
    lo, hi = mid[0], mid[-1]
    if hi <= lo:
        return np.arange(256, dtype=np.float64)
    return 255.0 * (mid - lo) / (hi - lo)


def _clahe_core(
    vals: np.ndarray, clip_limit: float, tiles_x: int, tiles_y: int, interp_values: bool
) -> np.ndarray:
    """Adaptive equalization of a float array on the 0..255 scale."""
    if clip_limit < 1.0:
        raise ValidationError(f"clip_limit must be >= 1.0, got {clip_limit}")
    if tiles_x < 1 or tiles_y < 1:
        raise ValidationError("tile grid must be at least 1x1")
    hgt, wid = vals.shape
    if hgt < tiles_y or wid < tiles_x:
        raise ValidationError(
            f"image {wid}x{hgt} smaller than tile grid {tiles_x}x{tiles_y}"
        )
    v = np.clip(vals, 0.0, 255.0)
    q = np.rint(v).astype(np.int64)

    ey = _tile_edges(hgt, tiles_y)
    ex = _tile_edges(wid, tiles_x)
    luts = np.empty((tiles_y, tiles_x, 256), dtype=np.float64)
    for i in range(tiles_y):
        for j in range(tiles_x):
            tile = q[ey[i] : ey[i + 1], ex[j] : ex[j + 1]]
            hist = np.bincount(tile.ravel(), minlength=256)
            luts[i, j] = _tile_lut(hist, clip_limit)

    cy = (ey[:-1] + ey[1:] - 1) / 2.0
    cx = (ex[:-1] + ex[1:] - 1) / 2.0

    def axis_blend(coords, centers):
        hi_idx = np.searchsorted(centers, coords)
        lo_idx = np.clip(hi_idx - 1, 0, len(centers) - 1)
        hi_idx = np.clip(hi_idx, 0, len(centers) - 1)
        span = centers[hi_idx] - centers[lo_idx]
        frac = np.where(span > 0, (coords - centers[lo_idx]) / np.where(span > 0, span, 1.0), 0.0)
        return lo_idx, hi_idx, np.clip(frac, 0.0, 1.0)

    y0, y1, fy = axis_blend(np.arange(hgt, dtype=np.float64), cy)
    x0, x1, fx = axis_blend(np.arange(wid, dtype=np.float64), cx)
    fy = fy[:, None]
    fx = fx[None, :]

    def lookup(ti, tj):
        # ti: (hgt,), tj: (wid,) tile indices; gather mapped values per pixel
        if interp_values:
            v0 = np.floor(v).astype(np.int64)
            v1 = np.minimum(v0 + 1, 255)
            f = v - v0
            m0 = luts[ti[:, None], tj[None, :], v0]
            m1 = luts[ti[:, None], tj[None, :], v1]
            return m0 * (1.0 - f) + m1 * f
        return luts[ti[:, None], tj[None, :], q]

    out = (
        (1.0 - fy) * (1.0 - fx) * lookup(y0, x0)
        + (1.0 - fy) * fx * lookup(y0, x1)
        + fy * (1.0 - fx) * lookup(y1, x0)
        + fy * fx * lookup(y1, x1)
    )
    return out


def clahe_gray(img: ImageGray8, clip_limit: float = 2.0, tiles: int = 8) -> ImageGray8:
    """CLAHE on a grayscale image with a tiles x tiles grid."""
    out = _clahe_core(img.data.astype(np.float64), clip_limit, tiles, tiles, False)
    return ImageGray8(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def clahe_l_channel(img: ImageRGB8, clip_limit: float = 2.0, tiles: int = 8) -> ImageRGB8:
    """CLAHE applied to the L* channel of CIE Lab; a*/b* pass through."""
    lab = rgb_to_lab_array(img.data)
    lch = np.clip(lab[..., 0] * 2.55, 0.0, 255.0)
    out = _clahe_core(lch, clip_limit, tiles, tiles, True)
    lab2 = lab.copy()
    lab2[..., 0] = np.clip(out, 0.0, 255.0) / 2.55
    rgb = lab_to_rgb_array(lab2)
    return ImageRGB8(np.clip(np.rint(rgb), 0, 255).astype(np.uint8))


# ---------------------------------------------------------------------------
# Canny

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def _correlate2d_edge(arr: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    r = kernel.shape[0] // 2
    p = np.pad(arr, r, mode="edge")
    hgt, wid = arr.shape
    out = np.zeros((hgt, wid), dtype=np.float64)
    for dy in range(kernel.shape[0]):
        for dx in range(kernel.shape[1]):
            w = kernel[dy, dx]
            if w != 0.0:
                out += w * p[dy : dy + hgt, dx : dx + wid]
    return out


def sobel_gradients(arr: np.ndarray) -> tuple:
    """(gx, gy) from the 3x3 Sobel operators, edge-clamped borders."""
    f = arr.astype(np.float64)
    return _correlate2d_edge(f, _SOBEL_X), _correlate2d_edge(f, _SOBEL_Y)


def _nms(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Thin to local maxima along the quantized gradient direction.

    A plateau of two equal magnitudes keeps exactly one pixel (predecessor
    compared with >=, successor with >)."""
    hgt, wid = mag.shape
    angle = np.degrees(np.arctan2(gy, gx)) % 180.0
    sector = np.zeros(mag.shape, dtype=np.int8)
    sector[(angle >= 22.5) & (angle < 67.5)] = 1
    sector[(angle >= 67.5) & (angle < 112.5)] = 2
    sector[(angle >= 112.5) & (angle < 157.5)] = 3

    pad = np.zeros((hgt + 2, wid + 2), dtype=np.float64)
    pad[1:-1, 1:-1] = mag

    def shifted(dy, dx):
        return pad[1 + dy : 1 + dy + hgt, 1 + dx : 1 + dx + wid]

    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    keep = np.zeros(mag.shape, dtype=bool)
    for s, (dy, dx) in offsets.items():
        prev_m = shifted(-dy, -dx)
        next_m = shifted(dy, dx)
        keep |= (sector == s) & (mag >= prev_m) & (mag > next_m)
    return keep & (mag > 0)


def _hysteresis(strong: np.ndarray, weak: np.ndarray) -> np.ndarray:
    """Keep weak pixels 8-connected to a strong pixel."""
    hgt, wid = strong.shape
    out = strong.copy()
    frontier = strong.copy()
    while frontier.any():
        p = np.zeros((hgt + 2, wid + 2), dtype=bool)
        p[1:-1, 1:-1] = frontier
        grown = np.zeros_like(out)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy or dx:
                    grown |= p[1 + dy : 1 + dy + hgt, 1 + dx : 1 + dx + wid]
        frontier = grown & weak & ~out
        out |= frontier
    return out


def canny(
    img: ImageGray8, sigma: float = 1.4, low: float = 50.0, high: float = 150.0
) -> BitMask:
    """Canny edge mask. Thresholds apply to the Sobel magnitude / 4."""
    if not 0 <= low <= high:
        raise ValidationError(f"need 0 <= low <= high, got low={low} high={high}")
    f = blur_float(img.data, sigma)
    gx, gy = sobel_gradients(f)
    mag = np.hypot(gx, gy) / 4.0
    thin = _nms(mag, gx, gy)
    strong = thin & (mag >= high)
    weak = thin & (mag >= low)
    return BitMask(_hysteresis(strong, weak))


# ---------------------------------------------------------------------------
# Morphology


def dilate(mask: BitMask, kernel_size: int) -> BitMask:
    """Binary dilation with a square kernel_size x kernel_size element (odd)."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValidationError(f"kernel_size must be odd and >= 1, got {kernel_size}")
    r = kernel_size // 2
    hgt, wid = mask.data.shape
    p = np.zeros((hgt + 2 * r, wid + 2 * r), dtype=bool)
    p[r : r + hgt, r : r + wid] = mask.data
    out = np.zeros((hgt, wid), dtype=bool)
    for dy in range(kernel_size):
        for dx in range(kernel_size):
            out |= p[dy : dy + hgt, dx : dx + wid]
    return BitMask(out)


# ---------------------------------------------------------------------------
# Telea fast-marching inpainting

_KNOWN, _BAND, _INSIDE = 0, 1, 2


def _fmm_solve(t1: float, t2: float) -> float:
    """One quadrant of the |grad T| = 1 update."""
    tmin = min(t1, t2)
    if tmin >= _BIG:
        return _BIG
    diff = abs(t1 - t2)
    if diff >= 1.0:
        return tmin + 1.0
    return (t1 + t2 + math.sqrt(2.0 - diff * diff)) / 2.0


def inpaint_telea(img, mask: BitMask, radius: int = 3):
    """Fill mask pixels by marching the boundary inward (Telea's scheme).

    Accepts ImageRGB8 or ImageGray8, returns the same type. Pixels outside
    the mask are byte-exact unchanged."""
    if radius < 1:
        raise ValidationError(f"radius must be >= 1, got {radius}")
    gray = isinstance(img, ImageGray8)
    if not gray and not isinstance(img, ImageRGB8):
        raise ValidationError(f"inpaint_telea: unsupported type {type(img).__name__}")
    hgt, wid = img.height, img.width
    if (mask.height, mask.width) != (hgt, wid):
        raise ValidationError(
            f"mask {mask.width}x{mask.height} does not match image {wid}x{hgt}"
        )
    hole = mask.data
    if hole.all():
        raise ValidationError("mask covers the entire image; nothing to inpaint from")
    if not hole.any():
        return type(img)(img.data)

    vals = img.data.astype(np.float64)
    if gray:
        vals = vals[:, :, None]

    flags = np.where(hole, _INSIDE, _KNOWN).astype(np.int8)
    dist = np.where(hole, _BIG, 0.0)

    # initial band: known pixels 4-adjacent to the hole
    heap = []
    nbrs4 = ((-1, 0), (1, 0), (0, -1), (0, 1))
    border = np.zeros_like(hole)
    for dy, dx in nbrs4:
        sh = np.zeros_like(hole)
        ys = slice(max(dy, 0), hgt + min(dy, 0))
        yd = slice(max(-dy, 0), hgt + min(-dy, 0))
        xs = slice(max(dx, 0), wid + min(dx, 0))
        xd = slice(max(-dx, 0), wid + min(-dx, 0))
        sh[yd, xd] = hole[ys, xs]
        border |= sh
    border &= ~hole
    for y, x in zip(*np.nonzero(border)):
        flags[y, x] = _BAND
        heapq.heappush(heap, (0.0, int(y), int(x)))

    win = range(-radius, radius + 1)
    r2 = float(radius * radius)

    def paint(y: int, x: int) -> None:
        # gradient of the arrival time at (y, x), one-sided where needed
        def t_at(yy, xx):
            if 0 <= yy < hgt and 0 <= xx < wid and flags[yy, xx] != _INSIDE:
                return dist[yy, xx]
            return None

        def grad_comp(tm, tp):
            if tm is not None and tp is not None:
                return (tp - tm) / 2.0
            if tp is not None:
                return tp - dist[y, x]
            if tm is not None:
                return dist[y, x] - tm
            return 0.0

        ny = grad_comp(t_at(y - 1, x), t_at(y + 1, x))
        nx = grad_comp(t_at(y, x - 1), t_at(y, x + 1))
        nrm = math.hypot(ny, nx)
        if nrm > 0:
            ny, nx = ny / nrm, nx / nrm

        acc = np.zeros(vals.shape[2], dtype=np.float64)
        wsum = 0.0
        for dy in win:
            yy = y + dy
            if yy < 0 or yy >= hgt:
                continue
            for dx in win:
                xx = x + dx
                if (dy == 0 and dx == 0) or xx < 0 or xx >= wid:
                    continue
                d2 = float(dy * dy + dx * dx)
                if d2 > r2 or flags[yy, xx] == _INSIDE:
                    continue
                length = math.sqrt(d2)
                direction = abs(dy * ny + dx * nx) / length
                if direction < 1e-6:
                    direction = 1e-6
                w = direction * (1.0 / d2) * (1.0 / (1.0 + abs(dist[y, x] - dist[yy, xx])))
                acc += w * vals[yy, xx]
                wsum += w
        if wsum > 0:
            vals[y, x] = acc / wsum

    while heap:
        t, y, x = heapq.heappop(heap)
        if flags[y, x] == _KNOWN or t > dist[y, x]:
            continue
        flags[y, x] = _KNOWN
        for dy, dx in nbrs4:
            yy, xx = y + dy, x + dx
            if not (0 <= yy < hgt and 0 <= xx < wid) or flags[yy, xx] == _KNOWN:
                continue
            up = dist[yy - 1, xx] if yy > 0 and flags[yy - 1, xx] != _INSIDE else _BIG
            dn = dist[yy + 1, xx] if yy < hgt - 1 and flags[yy + 1, xx] != _INSIDE else _BIG
            lf = dist[yy, xx - 1] if xx > 0 and flags[yy, xx - 1] != _INSIDE else _BIG
            rt = dist[yy, xx + 1] if xx < wid - 1 and flags[yy, xx + 1] != _INSIDE else _BIG
            t_new = min(
                _fmm_solve(lf, up),
                _fmm_solve(rt, up),
                _fmm_solve(lf, dn),
                _fmm_solve(rt, dn),
            )
            if t_new < dist[yy, xx]:
                dist[yy, xx] = t_new
            if flags[yy, xx] == _INSIDE:
                paint(yy, xx)
                flags[yy, xx] = _BAND
            heapq.heappush(heap, (dist[yy, xx], yy, xx))

    out = np.clip(np.rint(vals), 0, 255).astype(np.uint8)
    if gray:
        out = out[:, :, 0]
    # only hole pixels may differ
    result = img.data.copy()
    result[hole] = out[hole]
    return type(img)(result)


# ---------------------------------------------------------------------------
# Resampling


def bilinear_sample(arr: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample arr (H,W) or (H,W,C) at float coords, edge-clamped."""
    hgt, wid = arr.shape[:2]
    sy = np.clip(ys, 0.0, hgt - 1.0)
    sx = np.clip(xs, 0.0, wid - 1.0)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, hgt - 1)
    x1 = np.minimum(x0 + 1, wid - 1)
    fy = sy - y0
    fx = sx - x0
    if arr.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    f = arr.astype(np.float64)
    return (
        f[y0, x0] * (1 - fy) * (1 - fx)
        + f[y0, x1] * (1 - fy) * fx
        + f[y1, x0] * fy * (1 - fx)
        + f[y1, x1] * fy * fx
    )


def resize_bilinear_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with the align-corners=false convention."""
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"target size must be positive, got {out_w}x{out_h}")
    hgt, wid = arr.shape[:2]
    sy = (np.arange(out_h, dtype=np.float64) + 0.5) * (hgt / out_h) - 0.5
    sx = (np.arange(out_w, dtype=np.float64) + 0.5) * (wid / out_w) - 0.5
    yy, xx = np.meshgrid(sy, sx, indexing="ij")
    return bilinear_sample(arr, yy, xx)


def resize_bilinear(obj, out_h: int, out_w: int):
    """Resize an ImageRGB8 / ImageGray8 / rank-2 Tensor32, preserving the type."""
    if isinstance(obj, (ImageRGB8, ImageGray8)):
        out = resize_bilinear_array(obj.data, out_h, out_w)
        return type(obj)(np.clip(np.rint(out), 0, 255).astype(np.uint8))
    if isinstance(obj, Tensor32):
        if len(obj.shape) != 2:
            raise ValidationError(f"resize_bilinear: need a rank-2 tensor, got {obj.shape}")
        return Tensor32(resize_bilinear_array(obj.data.astype(np.float64), out_h, out_w))
    raise ValidationError(f"resize_bilinear: unsupported type {type(obj).__name__}")
