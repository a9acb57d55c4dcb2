"""Pipeline configuration: every tunable default, JSON round-trippable."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

from .boost import BoostParams
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .errors import InvalidSpecError

TASKS = {"gland": 2, "zonal": 3}


@dataclass(frozen=True)
class PreprocessConfig:
    target_spacing: tuple[float, float, float] = (0.625, 0.625, 1.5)
    resize_inplane: int = 128
    pad_multiple: int = 8
    clahe_clip: float = 2.0
    clahe_tiles: tuple[int, int] = (8, 8)
    clahe_bins: int = 256
    zonal_crop: int = 256
    zonal_crop_source: str = "mask"  # "mask", "center", or "model"


@dataclass(frozen=True)
class PipelineConfig:
    task: str = "gland"
    seed: int = 42
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self):
        if self.task not in TASKS:
            raise InvalidSpecError(f"task must be one of {sorted(TASKS)}, got {self.task!r}")

    @property
    def n_classes(self) -> int:
        return TASKS[self.task]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @staticmethod
    def from_dict(raw: dict) -> "PipelineConfig":
        base = PipelineConfig()
        pre = raw.get("preprocess", {})
        enc = raw.get("encoder", {})
        dec = dict(raw.get("decoder", {}))
        boost = dec.pop("boost", {})
        return PipelineConfig(
            task=raw.get("task", base.task),
            seed=int(raw.get("seed", base.seed)),
            preprocess=_merge(PreprocessConfig(), pre,
                              tuples=("target_spacing", "clahe_tiles")),
            encoder=_merge(EncoderConfig(), enc, tuples=("window", "stride")),
            decoder=replace(_merge(DecoderConfig(), dec),
                            boost=_merge(BoostParams(), boost)),
        )

    @staticmethod
    def from_json(text: str) -> "PipelineConfig":
        return PipelineConfig.from_dict(json.loads(text))


def _merge(defaults, overrides: dict, tuples: tuple[str, ...] = ()):
    if not overrides:
        return defaults
    known = asdict(defaults)
    unknown = set(overrides) - set(known)
    if unknown:
        raise InvalidSpecError(
            f"unknown {type(defaults).__name__} keys: {sorted(unknown)}"
        )
    fixed = {k: tuple(v) if k in tuples else v for k, v in overrides.items()}
    return replace(defaults, **fixed)
