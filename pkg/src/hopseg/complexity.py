"""Parameter and inference-FLOP accounting (see docs/complexity.md)."""

from __future__ import annotations

import numpy as np

from .boost import TreeEnsemble
from .saab import SaabUnit

_TRILINEAR_FLOPS = 14  # 7 lerps x (1 sub + 1 fma)
_MEDIAN_FLOPS = 2 * 49  # expected quickselect comparisons for a 7x7 window


def unit_params(unit: SaabUnit) -> int:
    """Learned numbers in one Saab unit: AC weights plus the shared bias.

    The DC anchor is analytic, not learned, so it contributes nothing.
    """
    return unit.n_in * (unit.n_components - 1) + 1


def ensemble_params(ensemble: TreeEnsemble) -> int:
    """Two numbers per split (feature id, threshold) plus one per leaf."""
    total = 0
    for round_trees in ensemble.trees:
        for tree in round_trees:
            splits = tree.n_nodes - tree.n_leaves
            total += 2 * splits + tree.n_leaves
    return total


def _decoder_ensembles(model):
    for stage in model.decoder.stages:
        yield stage.hop, stage.main
        for refiner in stage.refiners:
            yield stage.hop, refiner


def count_params(model) -> int:
    saab = sum(unit_params(u) for hop in model.encoder.hops for u in hop.units)
    trees = sum(ensemble_params(e) for _, e in _decoder_ensembles(model))
    return saab + trees


def param_breakdown(model) -> dict:
    saab = sum(unit_params(u) for hop in model.encoder.hops for u in hop.units)
    trees = sum(ensemble_params(e) for _, e in _decoder_ensembles(model))
    return {"saab": saab, "trees": trees, "total": saab + trees}


def _hop_voxels(input_shape, depth) -> list[int]:
    shape = np.array(input_shape, dtype=np.int64)
    counts = []
    for _ in range(depth):
        counts.append(int(np.prod(shape)))
        shape = shape // 2
    return counts


def _ensemble_traversal_flops(ensemble: TreeEnsemble) -> int:
    """Comparisons per example: one per tree level walked."""
    return sum(tree.depth() for round_trees in ensemble.trees for tree in round_trees)


def estimate_flops(model, input_shape: tuple[int, int, int]) -> int:
    return flop_breakdown(model, input_shape)["total"]


def flop_breakdown(model, input_shape: tuple[int, int, int]) -> dict:
    """Inference FLOPs at a given input size, by component.

    Saab projections cost 2N multiply-adds per component per voxel; tree
    stages cost one comparison per level walked per tree per voxel plus a
    softmax; upsampling costs 14 FLOPs per interpolated value; the final
    median filter sorts a 49-entry window per pixel.  Neighborhood
    gathering is pure memory movement and is excluded.
    """
    depth = model.encoder.depth
    voxels = _hop_voxels(input_shape, depth)
    k = model.decoder.n_classes

    saab = 0
    for hop, vox in zip(model.encoder.hops, voxels):
        per_voxel = sum(2 * u.n_in * u.n_components for u in hop.units)
        saab += vox * per_voxel

    trees = 0
    softmax = 0
    for hop_index, ensemble in _decoder_ensembles(model):
        vox = voxels[hop_index - 1]
        trees += vox * _ensemble_traversal_flops(ensemble)
        softmax += vox * 4 * k

    upsample = 0
    for stage_pos, hop_index in enumerate(range(depth, 1, -1)):
        carried_channels = k * (stage_pos + 1)
        upsample += voxels[hop_index - 2] * carried_channels * _TRILINEAR_FLOPS

    median = voxels[0] * _MEDIAN_FLOPS

    total = saab + trees + softmax + upsample + median
    return {"saab": saab, "trees": trees, "softmax": softmax,
            "upsample": upsample, "median_filter": median, "total": total}
