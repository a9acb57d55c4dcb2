"""End-to-end orchestration: preprocessing, training, prediction, evaluation.

Preprocessing regularizes every case to a fixed physical resolution,
enhances contrast, resizes in-plane and pads the slice axis; prediction
runs the encoder-decoder at that geometry and maps results back onto each
case's original voxel grid.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig
from .decoder import DecoderModel, decoder_fit, decoder_predict
from .encoder import EncoderModel, encoder_apply, encoder_fit
from .errors import HopsegError, IngestError, MetadataError
from .io import Case
from .metrics import dsc, dsc_per_class
from .volume import (Volume4D, clahe, pad_to_multiple, resample_lanczos,
                     resample_nearest_labels, resize_nearest_labels,
                     resize_trilinear)

FORMAT_VERSION = 1


@dataclass
class GeometryRecord:
    """Forward transform bookkeeping needed to invert predictions."""

    original_shape: tuple[int, int, int]
    original_spacing: tuple[float, float, float]
    resampled_shape: tuple[int, int, int]
    crop_origin: tuple[int, int] | None
    crop_shape: tuple[int, int] | None
    resized_shape: tuple[int, int, int]
    pad_slices: int


@dataclass
class SegmentationModel:
    """Serializable artifact: config plus fitted encoder and decoder."""

    config: PipelineConfig
    encoder: EncoderModel
    decoder: DecoderModel
    version: int = FORMAT_VERSION

    @property
    def task(self) -> str:
        return self.config.task

    @property
    def n_classes(self) -> int:
        return self.config.n_classes


@dataclass
class PredictionResult:
    case_id: str
    labels: np.ndarray | None = None
    soft: Volume4D | None = None
    error: str | None = None


@dataclass
class EvalReport:
    task: str
    per_case: list[dict]
    mean_dsc: list[float]
    std_dsc: list[float]
    n_parameters: int
    flops: int
    timings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "per_case": self.per_case,
            "mean_dsc": self.mean_dsc,
            "std_dsc": self.std_dsc,
            "n_parameters": self.n_parameters,
            "flops": self.flops,
            "timings": self.timings,
        }


def _normalize(data: np.ndarray) -> np.ndarray:
    lo, hi = data.min(), data.max()
    if hi <= lo:
        return np.zeros_like(data)
    return (data - lo) / (hi - lo)


def _crop_window(center: float, size: int, extent: int) -> tuple[int, int]:
    size = min(size, extent)
    start = int(round(center - size / 2.0))
    start = max(0, min(start, extent - size))
    return start, size


def _mask_centroid(mask: np.ndarray) -> tuple[float, float] | None:
    fg = np.nonzero(mask > 0)
    if fg[0].size == 0:
        return None
    return float(fg[0].mean()), float(fg[1].mean())


def preprocess(case: Case, config: PipelineConfig,
               crop_centroid: tuple[float, float] | None = None) -> Case:
    """Resample to the target spacing, normalize, CLAHE, resize, pad slices.

    The mask (when present) follows the same geometric chain with
    nearest-neighbor interpolation.  The returned case carries a
    GeometryRecord in its metadata for inverting predictions.
    """
    pre = config.preprocess
    if case.image.spacing is None:
        raise MetadataError(f"case {case.id}: missing voxel spacing")
    resampled = resample_lanczos(case.image, pre.target_spacing)
    data = _normalize(resampled.data[..., 0].astype(np.float64))
    data = np.stack([clahe(data[:, :, c], pre.clahe_clip, pre.clahe_tiles,
                           pre.clahe_bins)
                     for c in range(data.shape[2])], axis=2)
    mask = None
    if case.mask is not None:
        if case.mask.min() < 0 or case.mask.max() >= config.n_classes:
            raise IngestError(
                f"case {case.id}: mask labels outside [0, {config.n_classes})"
            )
        mask = resample_nearest_labels(case.mask, case.image.spacing,
                                       pre.target_spacing)
        if mask.shape != data.shape:
            raise IngestError(
                f"case {case.id}: resampled mask shape {mask.shape} != image {data.shape}"
            )

    crop_origin = crop_shape = None
    if config.task == "zonal":
        if crop_centroid is None:
            if pre.zonal_crop_source == "mask":
                if mask is None:
                    raise MetadataError(
                        f"case {case.id}: zonal crop needs a mask (or an explicit centroid)"
                    )
                crop_centroid = _mask_centroid(mask)
            if crop_centroid is None:  # empty mask or "center"/"model" source
                crop_centroid = (data.shape[0] / 2.0, data.shape[1] / 2.0)
        h0, ch = _crop_window(crop_centroid[0], pre.zonal_crop, data.shape[0])
        w0, cw = _crop_window(crop_centroid[1], pre.zonal_crop, data.shape[1])
        crop_origin, crop_shape = (h0, w0), (ch, cw)
        data = data[h0:h0 + ch, w0:w0 + cw]
        if mask is not None:
            mask = mask[h0:h0 + ch, w0:w0 + cw]

    target = (pre.resize_inplane, pre.resize_inplane, data.shape[2])
    resized = resize_trilinear(Volume4D(data), target)
    if mask is not None:
        mask = resize_nearest_labels(mask, target)
    padded, (pad_c,) = pad_to_multiple(resized.data, pre.pad_multiple, axes=(2,))
    if mask is not None:
        mask, _ = pad_to_multiple(mask, pre.pad_multiple, axes=(2,))

    geometry = GeometryRecord(
        original_shape=case.image.spatial_shape,
        original_spacing=case.image.spacing,
        resampled_shape=resampled.spatial_shape,
        crop_origin=crop_origin,
        crop_shape=crop_shape,
        resized_shape=target,
        pad_slices=pad_c,
    )
    meta = dict(case.meta)
    meta["geometry"] = geometry
    return Case(id=case.id, image=Volume4D(padded, pre.target_spacing),
                mask=mask, source=case.source, meta=meta)


def _take_nearest(arr: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    idx = np.clip(np.rint(coords).astype(np.int64), 0, arr.shape[axis] - 1)
    return np.take(arr, idx, axis=axis)


def _take_linear(arr: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    n = arr.shape[axis]
    i0 = np.clip(np.floor(coords).astype(np.int64), 0, n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    w = np.clip(coords - i0, 0.0, 1.0)
    shape = [1] * arr.ndim
    shape[axis] = coords.shape[0]
    w = w.reshape(shape)
    lo = np.take(arr, i0, axis=axis)
    hi = np.take(arr, i1, axis=axis)
    return lo + (hi - lo) * w


def _resize_coords(n_from: int, n_to: int) -> np.ndarray:
    """Coordinates of `n_from` output samples inside an `n_to`-long source,
    inverting an align-corners resize from n_from to n_to."""
    if n_from == 1 or n_to == 1:
        return np.full(n_from, 0.5 * (n_to - 1))
    return np.arange(n_from) * ((n_to - 1) / (n_from - 1))


def invert_geometry(volume: np.ndarray, geometry: GeometryRecord,
                    config: PipelineConfig, linear: bool,
                    background: np.ndarray | float = 0) -> np.ndarray:
    """Map a predicted array at model geometry back onto the original grid.

    `volume` is (H, W, C) or (H, W, C, K); labels use nearest-neighbor
    lookups, soft maps linear interpolation.
    """
    take = _take_linear if linear else _take_nearest
    keep = volume.shape[2] - geometry.pad_slices
    out = volume[:, :, :keep]
    inplane = geometry.crop_shape or geometry.resampled_shape[:2]
    for axis, n in enumerate(inplane):
        out = take(out, _resize_coords(n, geometry.resized_shape[axis]), axis)
    if geometry.crop_origin is not None:
        canvas_shape = geometry.resampled_shape + tuple(volume.shape[3:])
        canvas = np.empty(canvas_shape, dtype=out.dtype)
        canvas[...] = background
        h0, w0 = geometry.crop_origin
        ch, cw = geometry.crop_shape
        canvas[h0:h0 + ch, w0:w0 + cw] = out
        out = canvas
    for axis in range(3):
        scale = geometry.original_spacing[axis] / config.preprocess.target_spacing[axis]
        coords = np.arange(geometry.original_shape[axis]) * scale
        out = take(out, coords, axis)
    return out


def train(cases: list[Case], config: PipelineConfig | None = None) -> SegmentationModel:
    """Preprocess, fit the encoder on all cases, then fit the decoder."""
    config = config or PipelineConfig()
    if not cases:
        raise IngestError("no training cases")
    for case in cases:
        if case.mask is None:
            raise IngestError(f"case {case.id}: training requires a mask")
    prepared = [preprocess(c, config) for c in cases]
    volumes = [c.image for c in prepared]
    masks = [c.mask for c in prepared]
    encoder = encoder_fit(volumes, config.encoder)
    feats = [encoder_apply(encoder, v) for v in volumes]
    decoder = decoder_fit(feats, masks, config.n_classes, config.decoder,
                          seed=config.seed)
    return SegmentationModel(config=config, encoder=encoder, decoder=decoder)


def _predict_case(model: SegmentationModel, case: Case,
                  centroid: tuple[float, float] | None) -> PredictionResult:
    try:
        prepared = preprocess(case, model.config, crop_centroid=centroid)
        feats = encoder_apply(model.encoder, prepared.image)
        soft, labels = decoder_predict(model.decoder, feats)
        geometry = prepared.meta["geometry"]
        out_labels = invert_geometry(labels, geometry, model.config, linear=False)
        bg = np.zeros(model.n_classes, dtype=np.float32)
        bg[0] = 1.0
        out_soft = invert_geometry(soft.data, geometry, model.config,
                                   linear=True, background=bg)
        return PredictionResult(case_id=case.id,
                                labels=out_labels.astype(np.int32),
                                soft=Volume4D(out_soft, case.image.spacing))
    except HopsegError as err:
        return PredictionResult(case_id=case.id, error=f"{type(err).__name__}: {err}")


def _zonal_centroid(model: SegmentationModel, case: Case,
                    centroid_model: "SegmentationModel | None"):
    pre = model.config.preprocess
    if pre.zonal_crop_source != "model" or centroid_model is None:
        return None
    result = _predict_case(centroid_model, case, None)
    if result.error or result.labels is None or not (result.labels > 0).any():
        return None
    fg = np.nonzero(result.labels > 0)
    scale = [case.image.spacing[a] / pre.target_spacing[a] for a in range(2)]
    return (float(fg[0].mean()) * scale[0], float(fg[1].mean()) * scale[1])


def predict(model: SegmentationModel, cases: list[Case], workers: int = 1,
            centroid_model: "SegmentationModel | None" = None) -> list[PredictionResult]:
    """Segment each case; one failing case reports an error without
    aborting the batch.  Results are independent of the worker count."""
    centroids = [(_zonal_centroid(model, c, centroid_model)
                  if model.task == "zonal" else None) for c in cases]
    if workers <= 1 or len(cases) <= 1:
        return [_predict_case(model, c, ct) for c, ct in zip(cases, centroids)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_predict_case, model, c, ct)
                   for c, ct in zip(cases, centroids)]
        return [f.result() for f in futures]


def evaluate(model: SegmentationModel, cases: list[Case],
             workers: int = 1) -> EvalReport:
    """Predict every case with a mask and report per-class DSC plus
    complexity figures."""
    from .complexity import count_params, estimate_flops

    t0 = time.perf_counter()
    results = predict(model, cases, workers=workers)
    predict_seconds = time.perf_counter() - t0

    per_case = []
    scored = []
    for case, result in zip(cases, results):
        entry: dict = {"id": case.id}
        if result.error:
            entry["error"] = result.error
        elif case.mask is None:
            entry["dsc"] = None
        else:
            entry["dsc"] = dsc_per_class(result.labels, case.mask, model.n_classes)
            scored.append(entry["dsc"])
        per_case.append(entry)
    if scored:
        arr = np.array(scored)
        mean = [float(m) for m in arr.mean(axis=0)]
        std = [float(s) for s in arr.std(axis=0)]
    else:
        mean, std = [], []

    nominal = (model.config.preprocess.resize_inplane,
               model.config.preprocess.resize_inplane, 32)
    return EvalReport(
        task=model.task,
        per_case=per_case,
        mean_dsc=mean,
        std_dsc=std,
        n_parameters=count_params(model),
        flops=estimate_flops(model, nominal),
        timings={"predict_seconds": predict_seconds,
                 "seconds_per_case": predict_seconds / max(1, len(cases))},
    )
