"""Saab and channel-wise Saab transforms.

A Saab unit maps a flattened neighborhood vector x of length N to M affine
features y_m = a_m . x + b: component 0 projects onto the fixed constant
(DC) direction, the rest onto PCA eigenvectors of the DC-removed signal,
with one shared bias b chosen so every training feature is nonnegative.
Energies track each component's fraction of the signal variance and are
propagated multiplicatively down the channel tree to prune weak children.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyHopError, InsufficientDataError, InvalidShapeError
from .volume import NeighborhoodSpec, Volume4D, gather_neighborhoods

BIAS_MARGIN = 1e-6
_APPLY_CHUNK = 1 << 20


@dataclass
class SaabUnit:
    """Learned transform for one channel: DC anchor, AC anchors, bias, energies.

    Anchors are float64 rows (orthonormal to 1e-8 demands better than float32
    storage); `energies` are fractions of this unit's own input variance
    (slot 0 the DC fraction, the rest the PCA eigenvalue fractions,
    non-increasing).
    """

    n_in: int
    dc_anchor: np.ndarray
    ac_anchors: np.ndarray
    bias: float
    energies: np.ndarray

    @property
    def n_components(self) -> int:
        return 1 + self.ac_anchors.shape[0]

    def anchors(self) -> np.ndarray:
        """All anchor rows, DC first, as a (M, N) float64 matrix."""
        return np.concatenate([self.dc_anchor[np.newaxis, :], self.ac_anchors], axis=0)


@dataclass(frozen=True)
class EnergyNode:
    """One retained child in the energy tree (global energy fraction)."""

    hop: int
    parent_channel: int
    component_index: int
    energy: float


@dataclass
class VoxelHopModel:
    """One encoder hop: per-parent Saab units plus energy-tree bookkeeping."""

    hop: int
    spec: NeighborhoodSpec
    n_parents: int
    parent_energies: np.ndarray
    units: list[SaabUnit]
    component_indices: list[np.ndarray] = field(default_factory=list)
    nodes: list[EnergyNode] = field(default_factory=list)

    @property
    def n_children(self) -> int:
        return sum(u.n_components for u in self.units)

    @property
    def child_energies(self) -> np.ndarray:
        return np.array([n.energy for n in self.nodes])


class _MomentStats:
    """Per-volume sufficient statistics combined order-independently.

    Each volume contributes its own (count, sum, second moment, projection
    minimum); combination sorts contributions entry-wise before summing so
    the result is exactly invariant to volume order and duplication.
    """

    def __init__(self, n_in: int):
        self.n_in = n_in
        self.counts: list[int] = []
        self.sums: list[np.ndarray] = []
        self.moments: list[np.ndarray] = []

    def add(self, rows: np.ndarray) -> None:
        x = rows.astype(np.float64)
        self.counts.append(x.shape[0])
        self.sums.append(x.sum(axis=0))
        self.moments.append(x.T @ x)

    def combine(self) -> tuple[int, np.ndarray, np.ndarray]:
        count = int(np.sum(np.sort(np.array(self.counts))))
        total = np.sort(np.stack(self.sums), axis=0).sum(axis=0)
        moment = np.sort(np.stack(self.moments), axis=0).sum(axis=0)
        return count, total, moment


def _solve_anchors(count: int, total: np.ndarray, moment: np.ndarray,
                   max_components: int | None):
    """Eigendecompose the DC-removed covariance built from raw moments.

    Returns float64 AC anchors (rows, descending eigenvalue, sign-canonical),
    the DC variance and the eigenvalues.
    """
    n = total.shape[0]
    mean = total / count
    cov = moment / count - np.outer(mean, mean)
    dc = np.full(n, 1.0 / np.sqrt(n))
    dc_var = max(float(dc @ cov @ dc), 0.0)
    proj = np.eye(n) - np.outer(dc, dc)
    cov_ac = proj @ cov @ proj
    cov_ac = 0.5 * (cov_ac + cov_ac.T)
    eigvals, eigvecs = np.linalg.eigh(cov_ac)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.maximum(eigvals[order], 0.0)
    eigvecs = eigvecs[:, order].T

    limit = n - 1 if max_components is None else min(max_components - 1, n - 1)
    rank_tol = eigvals[0] * 1e-10 if eigvals.size and eigvals[0] > 0 else np.inf
    keep = min(limit, int(np.sum(eigvals > rank_tol)))
    anchors = eigvecs[:keep]
    # re-orthogonalize against DC (no-op up to rounding) and fix signs
    anchors = anchors - np.outer(anchors @ dc, dc)
    norms = np.linalg.norm(anchors, axis=1, keepdims=True)
    anchors = anchors / np.where(norms > 0, norms, 1.0)
    if keep:
        flip = np.sign(anchors[np.arange(keep), np.argmax(np.abs(anchors), axis=1)])
        anchors = anchors * np.where(flip == 0, 1.0, flip)[:, np.newaxis]
    return dc, anchors, dc_var, eigvals[:keep]


def _project(rows: np.ndarray, anchor_matrix: np.ndarray) -> np.ndarray:
    """Raw anchor projections (no bias), float64 accumulation, float32 out."""
    out = np.empty((rows.shape[0], anchor_matrix.shape[0]), dtype=np.float32)
    a64 = np.ascontiguousarray(anchor_matrix.T, dtype=np.float64)
    for start in range(0, rows.shape[0], _APPLY_CHUNK):
        chunk = rows[start:start + _APPLY_CHUNK].astype(np.float64)
        out[start:start + _APPLY_CHUNK] = (chunk @ a64).astype(np.float32)
    return out


def _finish_unit(n_in: int, stats: _MomentStats, max_components: int | None,
                 row_sets: list[np.ndarray]):
    count, total, moment = stats.combine()
    dc, anchors, dc_var, eigvals = _solve_anchors(count, total, moment, max_components)
    total_var = dc_var + float(eigvals.sum())
    if total_var > 0:
        energies = np.concatenate([[dc_var], eigvals]) / total_var
    else:
        energies = np.zeros(1 + len(eigvals))
        energies[0] = 1.0
    unit = SaabUnit(n_in=n_in, dc_anchor=dc, ac_anchors=anchors, bias=0.0,
                    energies=energies)
    matrix = unit.anchors()
    low = min(float(_project(rows, matrix).min()) for rows in row_sets)
    unit.bias = float(max(0.0, -low) + BIAS_MARGIN)
    return unit


def saab_fit(rows: np.ndarray, max_components: int | None = None) -> SaabUnit:
    """Fit one Saab unit on a matrix of flattened neighborhoods.

    The DC anchor is fixed analytically; AC anchors come from PCA of the
    DC-removed rows, keeping at most max_components - 1 of them (and never
    more than the covariance rank).  The shared bias makes every training
    projection nonnegative.
    """
    rows = np.asarray(rows)
    if rows.ndim != 2:
        raise InvalidShapeError(f"expected a 2D sample matrix, got shape {rows.shape}")
    n_samples, n_in = rows.shape
    if n_samples < 2:
        raise InsufficientDataError(f"need at least 2 samples, got {n_samples}")
    if max_components is not None and max_components < 1:
        raise InvalidShapeError(f"max_components must be >= 1, got {max_components}")
    stats = _MomentStats(n_in)
    stats.add(rows)
    return _finish_unit(n_in, stats, max_components, [rows])


def saab_apply(unit: SaabUnit, rows: np.ndarray) -> np.ndarray:
    """Project rows onto a unit's anchors and add its bias: (n, M) float32."""
    rows = np.asarray(rows)
    if rows.ndim != 2 or rows.shape[1] != unit.n_in:
        raise InvalidShapeError(
            f"expected rows of length {unit.n_in}, got shape {rows.shape}"
        )
    return _project(rows, unit.anchors()) + np.float32(unit.bias)


def _prune_unit(unit: SaabUnit, keep_ac: np.ndarray) -> SaabUnit:
    return SaabUnit(
        n_in=unit.n_in,
        dc_anchor=unit.dc_anchor,
        ac_anchors=unit.ac_anchors[keep_ac],
        bias=unit.bias,
        energies=np.concatenate([unit.energies[:1], unit.energies[1 + keep_ac]]),
    )


def _channel_rows(volumes, channel: int, spec: NeighborhoodSpec,
                  max_rows: int | None) -> list[np.ndarray]:
    row_sets = []
    for v in volumes:
        rows = gather_neighborhoods(Volume4D(v.data[..., channel:channel + 1]), spec)
        if max_rows is not None and rows.shape[0] > max_rows:
            step = -(-rows.shape[0] // max_rows)
            rows = rows[::step]
        row_sets.append(rows)
    return row_sets


def cw_saab_fit(fmaps, spec: NeighborhoodSpec, energy_threshold: float,
                parent_energies, hop: int = 1,
                max_rows_per_volume: int | None = 2_000_000,
                max_components: int | None = None) -> VoxelHopModel:
    """Fit one channel-wise Saab hop over one or more feature volumes.

    Each parent channel gets its own unit over that channel's flattened
    spatial neighborhoods.  Child energies are the parent energy times the
    local eigenvalue fraction; AC children below `energy_threshold` are
    discarded (`max_components` additionally caps each unit before
    thresholding).  DC children are always retained so deeper hops keep
    the local mean.
    """
    volumes = [fmaps] if isinstance(fmaps, Volume4D) else list(fmaps)
    if not volumes:
        raise InsufficientDataError("need at least one training volume")
    k_in = volumes[0].channels
    if any(v.channels != k_in for v in volumes):
        raise InvalidShapeError("training volumes disagree on channel count")
    parent_energies = np.asarray(parent_energies, dtype=np.float64)
    if parent_energies.shape != (k_in,):
        raise InvalidShapeError(
            f"expected {k_in} parent energies, got shape {parent_energies.shape}"
        )

    n_in = int(np.prod(spec.size))
    units, component_indices, nodes = [], [], []
    kept_ac_total = 0
    candidate_ac_total = 0
    for channel in range(k_in):
        row_sets = _channel_rows(volumes, channel, spec, max_rows_per_volume)
        stats = _MomentStats(n_in)
        for rows in row_sets:
            if rows.shape[0] < 2:
                raise InsufficientDataError(
                    f"channel {channel}: need at least 2 neighborhood rows"
                )
            stats.add(rows)
        full = _finish_unit(n_in, stats, max_components, row_sets)
        candidate_ac_total += full.n_components - 1
        child = parent_energies[channel] * full.energies
        keep_ac = np.nonzero(child[1:] >= energy_threshold)[0]
        kept_ac_total += keep_ac.size
        unit = _prune_unit(full, keep_ac)
        units.append(unit)
        comps = np.concatenate([[0], keep_ac + 1]).astype(np.int64)
        component_indices.append(comps)
        local = np.concatenate([child[:1], child[1 + keep_ac]])
        for comp, energy in zip(comps, local):
            nodes.append(EnergyNode(hop=hop, parent_channel=channel,
                                    component_index=int(comp), energy=float(energy)))
    # a constant input has no AC candidates at all: that is a valid DC-only
    # hop, whereas a threshold that discards every existing candidate is a
    # configuration error
    if kept_ac_total == 0 and candidate_ac_total > 0:
        raise EmptyHopError(
            f"hop {hop}: energy threshold {energy_threshold} discarded every AC child"
        )
    return VoxelHopModel(hop=hop, spec=spec, n_parents=k_in,
                         parent_energies=parent_energies, units=units,
                         component_indices=component_indices, nodes=nodes)


def cw_saab_apply(model: VoxelHopModel, fmap: Volume4D) -> Volume4D:
    """Transform a feature volume with a fitted hop; output channels are the
    retained children in (parent, component) order, spatial dims unchanged."""
    if fmap.channels != model.n_parents:
        raise InvalidShapeError(
            f"expected {model.n_parents} channels, got {fmap.channels}"
        )
    h, w, c, _ = fmap.shape
    feats = [
        saab_apply(unit, gather_neighborhoods(
            Volume4D(fmap.data[..., k:k + 1]), model.spec))
        for k, unit in enumerate(model.units)
    ]
    out = np.concatenate(feats, axis=1).reshape(h, w, c, -1)
    return Volume4D(out, fmap.spacing)
