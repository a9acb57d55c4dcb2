"""Dense 4D volumes and the spatial primitives built on them.

A volume carries two in-plane axes (H rows, W columns), a slice axis C and
a feature-channel axis K, stored in that memory order as float32.  All
operations are pure: they return new arrays and never mutate their inputs,
and identical inputs give bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidShapeError, InvalidSpecError, MetadataError

Spacing = tuple[float, float, float]


@dataclass
class Volume4D:
    """H x W x C x K float32 tensor with optional (dy, dx, dz) mm spacing."""

    data: np.ndarray
    spacing: Spacing | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 3:
            self.data = self.data[..., np.newaxis]
        if self.data.ndim != 4:
            raise InvalidShapeError(f"expected 3D or 4D data, got {self.data.ndim}D")
        if any(s < 1 for s in self.data.shape):
            raise InvalidShapeError(f"all dims must be >= 1, got {self.data.shape}")
        if self.data.dtype != np.float32:
            self.data = self.data.astype(np.float32)
        if not np.isfinite(self.data).all():
            raise InvalidShapeError("volume contains non-finite values")
        if self.spacing is not None:
            self.spacing = tuple(float(s) for s in self.spacing)
            if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
                raise MetadataError(f"spacing must be three positive floats, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.data.shape)

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[:3])

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def with_data(self, data: np.ndarray, spacing: Spacing | None = None) -> "Volume4D":
        """New volume around `data`, keeping this volume's spacing unless overridden."""
        return Volume4D(data, self.spacing if spacing is None else spacing)


@dataclass(frozen=True)
class NeighborhoodSpec:
    """Odd-sized 3D window with per-axis stride and a padding mode."""

    size: tuple[int, int, int]
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: str = "reflect"

    def __post_init__(self):
        if len(self.size) != 3 or any(s < 1 or s % 2 == 0 for s in self.size):
            raise InvalidSpecError(f"window sizes must be odd and >= 1, got {self.size}")
        if len(self.stride) != 3 or any(s < 1 for s in self.stride):
            raise InvalidSpecError(f"strides must be >= 1, got {self.stride}")
        if self.padding not in ("reflect", "zero"):
            raise InvalidSpecError(f"padding must be 'reflect' or 'zero', got {self.padding!r}")


def gather_neighborhoods(v: Volume4D, spec: NeighborhoodSpec) -> np.ndarray:
    """Collect the 3D neighborhood around every (strided) voxel as a row vector.

    Rows are ordered voxel-major (H outer, then W, then C); within a row the
    layout is spatial-major with the K channels fastest, so a row reshapes to
    (S_H, S_W, S_C, K).  Out-of-bounds voxels are filled per the padding mode.

    Returns an array of shape (ceil(H/s_H) * ceil(W/s_W) * ceil(C/s_C), S_H*S_W*S_C*K).
    """
    sh, sw, sc = spec.size
    for size, dim in zip(spec.size, v.spatial_shape):
        # A single mirror reflection can extend an axis by at most its own length.
        if size // 2 > dim:
            raise InvalidSpecError(
                f"window {spec.size} too large for volume extent {v.spatial_shape}"
            )
    ph, pw, pc = sh // 2, sw // 2, sc // 2
    mode = "reflect" if spec.padding == "reflect" else "constant"
    padded = np.pad(v.data, ((ph, ph), (pw, pw), (pc, pc), (0, 0)), mode=mode)
    win = sliding_window_view(padded, (sh, sw, sc), axis=(0, 1, 2))
    win = win[:: spec.stride[0], :: spec.stride[1], :: spec.stride[2]]
    # (H', W', C', K, S_H, S_W, S_C) -> rows of (S_H, S_W, S_C, K)
    rows = win.transpose(0, 1, 2, 4, 5, 6, 3).reshape(-1, sh * sw * sc * v.channels)
    return np.ascontiguousarray(rows, dtype=np.float32)


def max_pool(v: Volume4D, window: tuple[int, int, int] = (2, 2, 2),
             stride: tuple[int, int, int] = (2, 2, 2)) -> Volume4D:
    """Channel-wise max over non-overlapping 2x2x2 blocks; trailing odd voxels drop."""
    if window != (2, 2, 2) or stride != (2, 2, 2):
        raise InvalidSpecError("only 2x2x2 pooling with stride 2 is supported")
    h, w, c, k = v.shape
    if h < 2 or w < 2 or c < 2:
        raise InvalidShapeError(f"all spatial dims must be >= 2 to pool, got {v.spatial_shape}")
    h2, w2, c2 = h // 2, w // 2, c // 2
    blocks = v.data[: 2 * h2, : 2 * w2, : 2 * c2].reshape(h2, 2, w2, 2, c2, 2, k)
    pooled = blocks.max(axis=(1, 3, 5))
    spacing = tuple(2.0 * s for s in v.spacing) if v.spacing else None
    return Volume4D(pooled, spacing)


def _axis_coords(n_in: int, n_out: int) -> np.ndarray:
    """Align-corners sample positions; a singleton output samples the axis midpoint."""
    if n_out == 1:
        return np.array([0.5 * (n_in - 1)])
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def _axis_coords_centers(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel sample positions: output voxel centers map to the centers
    of their covering input blocks (the pooled-feature grid)."""
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    return np.clip(x, 0.0, n_in - 1)


def _lerp_axis_at(data: np.ndarray, axis: int, x: np.ndarray) -> np.ndarray:
    n_in = data.shape[axis]
    i0 = np.clip(np.floor(x).astype(np.int64), 0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = x - i0
    shape = [1] * data.ndim
    shape[axis] = x.shape[0]
    w = w.reshape(shape)
    lo = np.take(data, i0, axis=axis)
    hi = np.take(data, i1, axis=axis)
    return lo + (hi - lo) * w


def _lerp_axis(data: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    if data.shape[axis] == n_out:
        return data
    return _lerp_axis_at(data, axis, _axis_coords(data.shape[axis], n_out))


def resize_trilinear(v: Volume4D, target: tuple[int, int, int]) -> Volume4D:
    """Separable linear resize of the three spatial axes, align-corners convention."""
    if any(t < 1 for t in target):
        raise InvalidShapeError(f"target dims must be >= 1, got {target}")
    out = v.data.astype(np.float64)
    for axis, n_out in enumerate(target):
        out = _lerp_axis(out, axis, n_out)
    spacing = None
    if v.spacing:
        spacing = tuple(s * n_in / n_out
                        for s, n_in, n_out in zip(v.spacing, v.spatial_shape, target))
    return Volume4D(out.astype(np.float32), spacing)


def resize_trilinear_centers(v: Volume4D, target: tuple[int, int, int]) -> Volume4D:
    """Linear resize with half-pixel alignment: output voxels sample the
    centers of their covering input blocks, matching the grid that repeated
    2x pooling produces.  Used to bring supervision onto coarse hop grids."""
    if any(t < 1 for t in target):
        raise InvalidShapeError(f"target dims must be >= 1, got {target}")
    out = v.data.astype(np.float64)
    for axis, n_out in enumerate(target):
        if out.shape[axis] != n_out:
            out = _lerp_axis_at(out, axis, _axis_coords_centers(out.shape[axis], n_out))
    return Volume4D(out.astype(np.float32))


def _lanczos_weights(n_in: int, n_out: int, scale: float, a: int = 3):
    """Sparse per-output-sample taps of a normalized Lanczos-a kernel.

    Output sample j reads input coordinate j * scale; out-of-range taps clamp
    to the edge and weights are renormalized to sum to one.
    """
    x = np.arange(n_out) * scale
    base = np.floor(x).astype(np.int64)
    offsets = np.arange(1 - a, a + 1)
    idx = base[:, None] + offsets[None, :]
    t = x[:, None] - idx
    w = np.sinc(t) * np.sinc(t / a)
    w[np.abs(t) >= a] = 0.0
    idx = np.clip(idx, 0, n_in - 1)
    w /= w.sum(axis=1, keepdims=True)
    return idx, w


def _lanczos_axis(data: np.ndarray, axis: int, n_out: int, scale: float) -> np.ndarray:
    n_in = data.shape[axis]
    idx, w = _lanczos_weights(n_in, n_out, scale)
    moved = np.moveaxis(data, axis, 0)
    out = np.zeros((n_out,) + moved.shape[1:])
    for tap in range(idx.shape[1]):
        out += moved[idx[:, tap]] * w[:, tap].reshape((n_out,) + (1,) * (moved.ndim - 1))
    return np.moveaxis(out, 0, axis)


def resample_lanczos(v: Volume4D, target_spacing: Spacing) -> Volume4D:
    """Resample to a physical voxel spacing with a separable Lanczos-3 kernel."""
    if v.spacing is None:
        raise MetadataError("resampling requires voxel spacing metadata")
    if any(s <= 0 for s in target_spacing):
        raise MetadataError(f"target spacing must be positive, got {target_spacing}")
    out = v.data.astype(np.float64)
    for axis, (s_in, s_out) in enumerate(zip(v.spacing, target_spacing)):
        n_in = out.shape[axis]
        n_out = max(1, int(np.floor(n_in * s_in / s_out + 0.5)))
        if s_in == s_out and n_out == n_in:
            continue
        out = _lanczos_axis(out, axis, n_out, s_out / s_in)
    return Volume4D(out.astype(np.float32), tuple(float(s) for s in target_spacing))


def resample_nearest_labels(labels: np.ndarray, spacing: Spacing,
                            target_spacing: Spacing) -> np.ndarray:
    """Nearest-neighbor companion of `resample_lanczos` for integer label maps."""
    out = labels
    for axis, (s_in, s_out) in enumerate(zip(spacing, target_spacing)):
        n_in = out.shape[axis]
        n_out = max(1, int(np.floor(n_in * s_in / s_out + 0.5)))
        coords = np.arange(n_out) * (s_out / s_in)
        idx = np.clip(np.rint(coords).astype(np.int64), 0, n_in - 1)
        out = np.take(out, idx, axis=axis)
    return out


def resize_nearest_labels(labels: np.ndarray, target: tuple[int, ...]) -> np.ndarray:
    """Nearest-neighbor resize of a label map, align-corners convention."""
    out = labels
    for axis, n_out in enumerate(target):
        n_in = out.shape[axis]
        if n_in == n_out:
            continue
        idx = np.clip(np.rint(_axis_coords(n_in, n_out)).astype(np.int64), 0, n_in - 1)
        out = np.take(out, idx, axis=axis)
    return out


def median_filter_2d(labels: np.ndarray, window: int = 7) -> np.ndarray:
    """Per-slice lower-median filter over a window x window in-plane neighborhood.

    Slices (axis 2) are filtered independently with reflect padding.  The lower
    median of the sorted window is always one of the input labels, so no new
    label can appear.
    """
    if window < 1 or window % 2 == 0:
        raise InvalidSpecError(f"window must be odd and >= 1, got {window}")
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise InvalidShapeError(f"expected (H, W, C) labels, got shape {labels.shape}")
    if window == 1:
        return labels.copy()
    pad = window // 2
    kth = (window * window - 1) // 2
    out = np.empty_like(labels)
    for c in range(labels.shape[2]):
        padded = np.pad(labels[:, :, c], pad, mode="reflect")
        win = sliding_window_view(padded, (window, window))
        flat = win.reshape(labels.shape[0], labels.shape[1], window * window)
        out[:, :, c] = np.partition(flat, kth, axis=-1)[..., kth]
    return out


def _clahe_tile_lut(tile_bins: np.ndarray, clip_limit: float, n_bins: int) -> np.ndarray:
    hist = np.bincount(tile_bins.ravel(), minlength=n_bins).astype(np.float64)
    if clip_limit > 0:
        clip = max(clip_limit * tile_bins.size / n_bins, 1.0)
        excess = np.maximum(hist - clip, 0.0).sum()
        hist = np.minimum(hist, clip) + excess / n_bins
    cdf = np.cumsum(hist) / hist.sum()
    cdf_min = cdf[np.nonzero(hist)[0][0]]
    if cdf_min >= 1.0:
        # single occupied bin: equalization is degenerate, keep the level
        return (np.arange(n_bins) + 0.5) / n_bins
    return (cdf - cdf_min) / (1.0 - cdf_min)


def clahe(image: np.ndarray, clip_limit: float = 2.0, tiles: tuple[int, int] = (8, 8),
          n_bins: int = 256) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization of one 2D float image.

    Each tile's histogram is clipped at `clip_limit` times the uniform bin
    height (excess redistributed uniformly) and equalized; per-pixel mappings
    are blended bilinearly between the four nearest tile centers.  Output
    values lie in [0, 1].
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise InvalidShapeError(f"expected a 2D image, got shape {img.shape}")
    if not np.isfinite(img).all():
        raise InvalidShapeError("image contains non-finite values")
    th, tw = tiles
    if th < 1 or tw < 1:
        raise InvalidSpecError(f"tile counts must be >= 1, got {tiles}")
    h, w = img.shape
    th, tw = min(th, h), min(tw, w)
    lo, hi = img.min(), img.max()
    if hi <= lo:
        return np.clip(img, 0.0, 1.0)
    norm = (img - lo) / (hi - lo)
    bins = np.minimum((norm * n_bins).astype(np.int64), n_bins - 1)

    hb = np.linspace(0, h, th + 1).astype(np.int64)
    wb = np.linspace(0, w, tw + 1).astype(np.int64)
    luts = np.empty((th, tw, n_bins))
    for i in range(th):
        for j in range(tw):
            luts[i, j] = _clahe_tile_lut(bins[hb[i]:hb[i + 1], wb[j]:wb[j + 1]],
                                         clip_limit, n_bins)

    def blend_coords(bounds, n_tiles, n_pix):
        centers = (bounds[:-1] + bounds[1:] - 1) / 2.0
        pos = np.arange(n_pix, dtype=np.float64)
        i0 = np.clip(np.searchsorted(centers, pos, side="right") - 1, 0, n_tiles - 1)
        i1 = np.minimum(i0 + 1, n_tiles - 1)
        span = np.where(i1 > i0, centers[i1] - centers[i0], 1.0)
        frac = np.clip((pos - centers[i0]) / span, 0.0, 1.0)
        return i0, i1, frac

    r0, r1, fr = blend_coords(hb, th, h)
    c0, c1, fc = blend_coords(wb, tw, w)
    fr = fr[:, None]
    fc = fc[None, :]
    top = (luts[r0[:, None], c0[None, :], bins] * (1 - fc)
           + luts[r0[:, None], c1[None, :], bins] * fc)
    bot = (luts[r1[:, None], c0[None, :], bins] * (1 - fc)
           + luts[r1[:, None], c1[None, :], bins] * fc)
    return np.clip(top * (1 - fr) + bot * fr, 0.0, 1.0)


def pad_to_multiple(data: np.ndarray, multiple: int,
                    axes: tuple[int, ...] = (0, 1, 2)) -> tuple[np.ndarray, tuple[int, ...]]:
    """Reflect-pad the given axes at their high end up to the next multiple.

    Returns the padded array and the per-axis pad counts (for later cropping).
    """
    pads = [0] * data.ndim
    widths = []
    for axis in range(data.ndim):
        if axis in axes:
            pads[axis] = (-data.shape[axis]) % multiple
        widths.append((0, pads[axis]))
    if any(p for p in pads):
        data = np.pad(data, widths, mode="reflect")
    return data, tuple(pads[a] for a in axes)
