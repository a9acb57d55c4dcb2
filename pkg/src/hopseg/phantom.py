"""Synthetic T2-like fixtures with analytically exact masks.

Each phantom is a dark volume with a smooth intensity ramp, Gaussian noise
and one bright ellipsoid "gland" of randomized center, radii and
orientation; 3-class fixtures nest a darker inner ellipsoid strictly
inside it.  Geometry parameters are recorded in the case metadata.
"""

from __future__ import annotations

import numpy as np

from .io import Case
from .volume import Volume4D

NOISE_SIGMA = 0.05
_BACKGROUND = 0.15
_GLAND_LEVEL = 0.75
_INNER_LEVEL = 0.45
_RAMP_SPAN = 0.10


def _rotation(rng: np.random.Generator) -> np.ndarray:
    """In-plane rotation plus small out-of-plane tilts (keeps the ellipsoid
    inside thin-slab volumes)."""
    phi = rng.uniform(0.0, 2.0 * np.pi)
    tilt_a = rng.uniform(-0.1, 0.1)
    tilt_b = rng.uniform(-0.1, 0.1)
    cz, sz = np.cos(phi), np.sin(phi)
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    ca, sa = np.cos(tilt_a), np.sin(tilt_a)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]])
    cb, sb = np.cos(tilt_b), np.sin(tilt_b)
    ry = np.array([[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]])
    return rz @ rx @ ry


def _radial(shape, center, radii, rot) -> np.ndarray:
    """Normalized ellipsoid radius at every voxel center (1.0 on the surface)."""
    grids = np.meshgrid(*(np.arange(s, dtype=np.float64) for s in shape),
                        indexing="ij")
    rel = np.stack([g - c for g, c in zip(grids, center)], axis=-1)
    local = rel @ rot  # rot columns are the ellipsoid axes
    return np.sqrt(((local / radii) ** 2).sum(axis=-1))


def _inside(shape, center, radii, rot) -> np.ndarray:
    return _radial(shape, center, radii, rot) <= 1.0


def _membership(radial: np.ndarray, mean_radius: float, edge_width: float) -> np.ndarray:
    """Inside-fraction ramp: 1 deep inside, 0 far outside, linear over
    roughly `edge_width` voxels around the surface (partial-volume look)."""
    if edge_width <= 0.0:
        return (radial <= 1.0).astype(np.float64)
    signed_voxels = (1.0 - radial) * mean_radius
    return np.clip(signed_voxels / edge_width + 0.5, 0.0, 1.0)


def _smooth_field(rng: np.random.Generator, shape, n_waves: int = 6) -> np.ndarray:
    """Zero-centered smooth random field (a few low-frequency plane waves)."""
    grids = np.meshgrid(*(np.arange(s, dtype=np.float64) for s in shape),
                        indexing="ij")
    field = np.zeros(shape, dtype=np.float64)
    for _ in range(n_waves):
        freq = rng.uniform(0.02, 0.12, size=3)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        field += np.cos(2.0 * np.pi * sum(f * g for f, g in zip(freq, grids)) + phase)
    return field / n_waves


def make_phantoms(n: int, seed: int = 0, shape: tuple[int, int, int] = (64, 64, 16),
                  n_classes: int = 2, texture: float = 0.0, edge_width: float = 0.0,
                  n_distractors: int = 0, contrast: float = _GLAND_LEVEL - _BACKGROUND,
                  spacing: tuple[float, float, float] = (0.625, 0.625, 1.5)) -> list[Case]:
    """Generate `n` phantom cases; a fixed seed reproduces the set exactly.

    `texture` adds tissue-like smooth intensity heterogeneity on top of the
    base levels; `edge_width` softens the gland border over that many voxels
    (partial-volume look); `n_distractors` scatters that many gland-bright
    background blobs (bladder/rectum-like clutter); `contrast` sets the
    gland-to-background intensity gap.  Defaults give clean high-contrast
    two-level phantoms.  Masks are always the analytic ellipsoid interiors
    regardless of clutter.
    """
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    if n_classes not in (2, 3):
        raise ValueError(f"phantoms support 2 or 3 classes, got {n_classes}")
    rng = np.random.Generator(np.random.PCG64(seed))
    extent = np.array(shape, dtype=np.float64)
    cases = []
    for i in range(n):
        center = extent / 2.0 + rng.uniform(-0.06, 0.06, size=3) * extent
        radii = rng.uniform(0.18, 0.28, size=3) * extent
        rot = _rotation(rng)
        radial = _radial(shape, center, radii, rot)
        gland = radial <= 1.0
        inside = _membership(radial, float(radii.mean()), edge_width)

        mask = np.zeros(shape, dtype=np.int32)
        meta = {"center": center.tolist(), "radii": radii.tolist()}
        image = np.full(shape, _BACKGROUND)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        grids = np.meshgrid(*(np.arange(s) / max(s - 1, 1) for s in shape),
                            indexing="ij")
        ramp = sum(g * d for g, d in zip(grids, direction))
        image += _RAMP_SPAN * (ramp - ramp.min())
        image += contrast * inside

        if n_classes == 3:
            inner_radii = radii * rng.uniform(0.45, 0.60)
            inner_radial = _radial(shape, center, inner_radii, rot)
            inner = (inner_radial <= 1.0) & gland  # strict nesting
            inner_frac = _membership(inner_radial, float(inner_radii.mean()),
                                     edge_width) * inside
            image -= 0.5 * contrast * inner_frac
            mask[gland] = 2  # peripheral shell
            mask[inner] = 1  # transition core
            meta["inner_radii"] = inner_radii.tolist()
        else:
            mask[gland] = 1

        if texture > 0.0:
            image += texture * _smooth_field(rng, shape)
            image[gland] += texture * _smooth_field(rng, shape)[gland]

        for _ in range(n_distractors):
            b_center = rng.uniform(0.0, 1.0, size=3) * (extent - 1)
            b_radii = rng.uniform(0.02, 0.08, size=3) * extent + 1.0
            b_level = _BACKGROUND + contrast * rng.uniform(0.5, 1.25)
            blob = _membership(_radial(shape, b_center, b_radii, np.eye(3)),
                               float(b_radii.mean()), max(edge_width, 1.0))
            blob[gland] = 0.0  # clutter is background-class only
            image = image * (1.0 - blob) + b_level * blob

        image = image + rng.normal(0.0, NOISE_SIGMA, size=shape)
        image = np.clip(image, 0.0, 1.0)
        cases.append(Case(id=f"phantom_{seed}_{i:03d}", image=Volume4D(image, spacing),
                          mask=mask, source="synthetic", meta=meta))
    return cases
