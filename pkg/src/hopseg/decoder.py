"""Coarse-to-fine segmentation decoding.

Starting at the coarsest hop, each stage concatenates position encoding,
the cumulatively upsampled probabilities of all coarser stages and the
encoder's skip features, classifies every voxel with a boosted ensemble,
then smooths the soft decisions by re-classifying each voxel from the
3x3x3 neighborhood of current decisions.  The finest stage's argmax,
median-filtered per slice, is the output mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boost import (BoostParams, TreeEnsemble, balanced_subsample, ensemble_fit,
                    predict_proba)
from .errors import (DegenerateLabelsError, EmptySupervisionError,
                     InvalidShapeError)
from .metrics import dsc_per_class
from .volume import (NeighborhoodSpec, Volume4D, gather_neighborhoods,
                     median_filter_2d, resize_trilinear,
                     resize_trilinear_centers)

_SLS_SPEC = NeighborhoodSpec((3, 3, 3), (1, 1, 1), "reflect")


@dataclass(frozen=True)
class DecoderConfig:
    confidence_threshold: float = 0.9
    sls_iterations: int = 2
    sls_rounds: int = 32
    sample_budget: int = 500_000
    class_balance_ratio: float = 3.0
    median_window: int = 7
    # coarser hops have 8-512x fewer voxels; raising this above 1 scales
    # their boosting rounds up where per-voxel inference is nearly free
    hop_rounds_scale: float = 1.0
    boost: BoostParams = field(default_factory=BoostParams)

    def hop_boost(self, hop: int) -> BoostParams:
        mult = max(1, int(round(self.hop_rounds_scale ** (hop - 1))))
        d = self.boost.to_dict()
        d["n_rounds"] = self.boost.n_rounds * mult
        return BoostParams(**d)

    def hop_sls_boost(self, hop: int) -> BoostParams:
        mult = max(1, int(round(self.hop_rounds_scale ** (hop - 1))))
        d = self.boost.to_dict()
        d["n_rounds"] = self.sls_rounds * mult
        return BoostParams(**d)


@dataclass
class HopStage:
    hop: int
    main: TreeEnsemble
    refiners: list[TreeEnsemble]


@dataclass
class DecoderModel:
    n_classes: int
    depth: int
    config: DecoderConfig
    stages: list[HopStage]  # processing order: hop L down to hop 1
    fit_report: dict = field(default_factory=dict)


def position_encoding(shape: tuple[int, int, int]) -> Volume4D:
    """Normalized (x, y, z) voxel coordinates as a 3-channel volume.

    Channel 0 runs along W, channel 1 along H, channel 2 along C, each in
    [0, 1]; a singleton axis encodes as 0.5.
    """
    h, w, c = shape
    if h < 1 or w < 1 or c < 1:
        raise InvalidShapeError(f"shape components must be >= 1, got {shape}")

    def coords(n: int) -> np.ndarray:
        if n == 1:
            return np.array([0.5], dtype=np.float32)
        return (np.arange(n) / (n - 1)).astype(np.float32)

    out = np.empty((h, w, c, 3), dtype=np.float32)
    out[..., 0] = coords(w)[np.newaxis, :, np.newaxis]
    out[..., 1] = coords(h)[:, np.newaxis, np.newaxis]
    out[..., 2] = coords(c)[np.newaxis, np.newaxis, :]
    return Volume4D(out)


def one_hot(labels: np.ndarray, n_classes: int) -> Volume4D:
    """Encode an (H, W, C) integer label map as an n_classes-channel volume."""
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise InvalidShapeError(f"expected (H, W, C) labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise InvalidShapeError(f"labels outside [0, {n_classes})")
    out = np.zeros(labels.shape + (n_classes,), dtype=np.float32)
    np.put_along_axis(out, labels[..., np.newaxis].astype(np.int64), 1.0, axis=3)
    return Volume4D(out)


def downsample_labels(mask_onehot: Volume4D, hop_shape: tuple[int, int, int],
                      confidence_threshold: float):
    """Trilinear soft labels at a hop's grid plus the confident-voxel mask.

    Sampling is half-pixel aligned so coarse labels land on the pooled
    feature grid.  A voxel is selected for training iff its largest class
    value reaches the confidence threshold; raises if nothing survives.
    """
    soft = resize_trilinear_centers(mask_onehot, hop_shape)
    selected = soft.data.max(axis=3) >= confidence_threshold
    if not selected.any():
        raise EmptySupervisionError(
            f"no voxel reached confidence {confidence_threshold} at shape {hop_shape}"
        )
    return soft, selected


def propagate_predictions(carried: Volume4D | None, soft: Volume4D) -> Volume4D:
    """One step of cumulative prediction upsampling: concatenate the carried
    coarse probabilities with this hop's soft decisions and upsample 2x."""
    if carried is None:
        stacked = soft
    else:
        if carried.spatial_shape != soft.spatial_shape:
            raise InvalidShapeError(
                f"carried shape {carried.spatial_shape} != soft shape {soft.spatial_shape}"
            )
        stacked = Volume4D(np.concatenate([carried.data, soft.data], axis=3))
    target = tuple(2 * s for s in stacked.spatial_shape)
    return resize_trilinear(stacked, target)


def aggregate_features(hop: int, f_e: Volume4D,
                       coarser_soft: list[Volume4D] | None = None,
                       carried: Volume4D | None = None) -> Volume4D:
    """Per-voxel concatenation (F_s, F_p, F_e) at a hop's grid.

    `coarser_soft` lists soft decisions from the coarsest hop inward; they
    are folded by the cumulative upsampling recurrence.  Alternatively a
    pre-propagated `carried` map may be passed directly.
    """
    if coarser_soft:
        if carried is not None:
            raise InvalidShapeError("pass either coarser_soft or carried, not both")
        fp = None
        for soft in coarser_soft:
            fp = propagate_predictions(fp, soft)
    else:
        fp = carried
    parts = [position_encoding(f_e.spatial_shape).data]
    if fp is not None:
        if fp.spatial_shape != f_e.spatial_shape:
            raise InvalidShapeError(
                f"propagated shape {fp.spatial_shape} != encoder shape {f_e.spatial_shape}"
            )
        parts.append(fp.data)
    parts.append(f_e.data)
    return Volume4D(np.concatenate(parts, axis=3))


def _predict_soft(ensemble: TreeEnsemble, feats: Volume4D) -> Volume4D:
    h, w, c, d = feats.shape
    probs = predict_proba(ensemble, feats.data.reshape(-1, d))
    return Volume4D(probs.reshape(h, w, c, -1).astype(np.float32))


def sls_refine(soft: Volume4D, ensembles) -> Volume4D:
    """Iterative soft-label smoothing: each pass re-classifies every voxel
    from the flattened 3x3x3 neighborhood of the current soft decisions."""
    out = soft
    for ensemble in ensembles:
        rows = gather_neighborhoods(out, _SLS_SPEC)
        probs = predict_proba(ensemble, rows)
        out = Volume4D(probs.reshape(out.shape[:3] + (-1,)).astype(np.float32))
    return out


def _stage_forward(stage: HopStage, feats: Volume4D) -> Volume4D:
    return sls_refine(_predict_soft(stage.main, feats), stage.refiners)


def _train_rows(maps: list[Volume4D], selections: list[np.ndarray]) -> np.ndarray:
    rows = [m.data.reshape(-1, m.channels)[sel.reshape(-1)]
            for m, sel in zip(maps, selections)]
    return np.concatenate(rows, axis=0)


def _mean_fg_dsc(softs, truths, n_classes) -> float:
    scores = []
    for soft, truth in zip(softs, truths):
        pred = np.argmax(soft.data, axis=3)
        scores.extend(dsc_per_class(pred, truth, n_classes))
    return float(np.mean(scores))


def decoder_fit(features_per_case: list[list[Volume4D]], masks: list[np.ndarray],
                n_classes: int, config: DecoderConfig | None = None,
                seed: int = 0) -> DecoderModel:
    """Fit all decoder stages coarse-to-fine.

    `features_per_case[c][i-1]` is case c's encoder map at hop i.  Coarser
    stages' own training-set predictions (not ground truth) feed the
    cumulative probability features of finer stages, mirroring inference.
    """
    if not features_per_case or len(features_per_case) != len(masks):
        raise InvalidShapeError("need one encoder feature list per mask")
    depth = len(features_per_case[0])
    config = config or DecoderConfig()
    rng = np.random.Generator(np.random.PCG64(seed))
    onehots = [one_hot(m, n_classes) for m in masks]
    hop_truths = {}

    carried: list[Volume4D | None] = [None] * len(masks)
    stages: list[HopStage] = []
    report_hops = []
    for hop in range(depth, 0, -1):
        feats, selections, labels = [], [], []
        for case, per_hop in enumerate(features_per_case):
            f_e = per_hop[hop - 1]
            feats.append(aggregate_features(hop, f_e, carried=carried[case]))
            try:
                soft_gt, selected = downsample_labels(
                    onehots[case], f_e.spatial_shape, config.confidence_threshold)
            except EmptySupervisionError as err:
                raise EmptySupervisionError(f"hop {hop}, case {case}: {err}") from err
            selections.append(selected)
            labels.append(np.argmax(soft_gt.data, axis=3)[selected])
            hop_truths.setdefault(hop, []).append(np.argmax(soft_gt.data, axis=3))

        x = _train_rows(feats, selections)
        y = np.concatenate(labels)
        pick = balanced_subsample(y, config.sample_budget,
                                  config.class_balance_ratio, rng)
        fit_seed = int(rng.integers(0, 2**31 - 1))
        try:
            main = ensemble_fit(x[pick], y[pick], config.hop_boost(hop),
                                seed=fit_seed, n_classes=n_classes)
        except DegenerateLabelsError as err:
            raise DegenerateLabelsError(f"hop {hop}: {err}") from err

        softs = [_predict_soft(main, f) for f in feats]
        pre_sls = _mean_fg_dsc(softs, hop_truths[hop], n_classes)

        refiners = []
        sls_params = config.hop_sls_boost(hop)
        for _ in range(config.sls_iterations):
            xr = np.concatenate(
                [gather_neighborhoods(s, _SLS_SPEC)[sel.reshape(-1)]
                 for s, sel in zip(softs, selections)], axis=0)
            fit_seed = int(rng.integers(0, 2**31 - 1))
            refiner = ensemble_fit(xr[pick], y[pick], sls_params, seed=fit_seed,
                                   n_classes=n_classes)
            refiners.append(refiner)
            softs = [sls_refine(s, [refiner]) for s in softs]
        post_sls = _mean_fg_dsc(softs, hop_truths[hop], n_classes)

        stages.append(HopStage(hop=hop, main=main, refiners=refiners))
        entry = {"hop": hop, "train_dsc_pre_sls": pre_sls,
                 "train_dsc_post_sls": post_sls, "n_train": int(pick.size)}
        if hop == 1:
            filtered = [median_filter_2d(np.argmax(s.data, axis=3),
                                         config.median_window) for s in softs]
            entry["train_dsc_post_median"] = float(np.mean(
                [np.mean(dsc_per_class(f, t, n_classes))
                 for f, t in zip(filtered, masks)]))
            entry["train_dsc_full_res"] = float(np.mean(
                [np.mean(dsc_per_class(np.argmax(s.data, axis=3), t, n_classes))
                 for s, t in zip(softs, masks)]))
        report_hops.append(entry)

        if hop > 1:
            carried = [propagate_predictions(c, s)
                       for c, s in zip(carried, softs)]

    return DecoderModel(n_classes=n_classes, depth=depth, config=config,
                        stages=stages, fit_report={"hops": report_hops})


def decoder_predict(model: DecoderModel, features: list[Volume4D]):
    """Run all stages coarse-to-fine on one case's encoder features.

    Returns the full-resolution soft decision map and the label mask after
    argmax (ties to the lowest class) and the per-slice median filter.
    """
    if len(features) != model.depth:
        raise InvalidShapeError(
            f"expected {model.depth} hop feature maps, got {len(features)}"
        )
    carried = None
    soft = None
    for stage in model.stages:
        f_e = features[stage.hop - 1]
        feats = aggregate_features(stage.hop, f_e, carried=carried)
        soft = _stage_forward(stage, feats)
        if stage.hop > 1:
            carried = propagate_predictions(carried, soft)
    labels = median_filter_2d(np.argmax(soft.data, axis=3).astype(np.int32),
                              model.config.median_window)
    return soft, labels
