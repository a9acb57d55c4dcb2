"""Fine-to-coarse representation learning: cascaded hops with pooling between.

Hop 1 transforms the raw single-channel volume; each later hop transforms
the 2x max-pooled output of the previous one, threading parent energies
through so weak channels are pruned consistently across the cascade.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientDataError, InvalidShapeError
from .saab import VoxelHopModel, cw_saab_apply, cw_saab_fit
from .volume import NeighborhoodSpec, Volume4D, max_pool


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 4
    window: tuple[int, int, int] = (3, 3, 3)
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: str = "reflect"
    energy_threshold: float = 0.002
    max_ac_per_unit: int | None = 12
    max_rows_per_volume: int = 2_000_000

    def spec(self) -> NeighborhoodSpec:
        return NeighborhoodSpec(self.window, self.stride, self.padding)

    @property
    def max_components(self) -> int | None:
        return None if self.max_ac_per_unit is None else self.max_ac_per_unit + 1


@dataclass
class EncoderModel:
    config: EncoderConfig
    hops: list[VoxelHopModel] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.hops)

    def hop_channels(self) -> list[int]:
        return [h.n_children for h in self.hops]


def _check_divisible(v: Volume4D, depth: int) -> None:
    factor = 2 ** (depth - 1)
    if any(s % factor for s in v.spatial_shape):
        raise InvalidShapeError(
            f"spatial dims {v.spatial_shape} must be divisible by {factor}"
        )


def encoder_fit(volumes, config: EncoderConfig | None = None) -> EncoderModel:
    """Fit the hop cascade on training volumes (no labels involved)."""
    config = config or EncoderConfig()
    volumes = [volumes] if isinstance(volumes, Volume4D) else list(volumes)
    if not volumes:
        raise InsufficientDataError("need at least one training volume")
    for v in volumes:
        _check_divisible(v, config.depth)
        if v.channels != 1:
            raise InvalidShapeError(f"encoder input must be single-channel, got K={v.channels}")
    spec = config.spec()
    parent_energies = np.ones(1)
    current = volumes
    hops = []
    for hop in range(1, config.depth + 1):
        model = cw_saab_fit(current, spec, config.energy_threshold, parent_energies,
                            hop=hop, max_rows_per_volume=config.max_rows_per_volume,
                            max_components=config.max_components)
        hops.append(model)
        if hop < config.depth:
            feats = [cw_saab_apply(model, v) for v in current]
            current = [max_pool(f) for f in feats]
            parent_energies = model.child_energies
    return EncoderModel(config=config, hops=hops)


def encoder_apply(model: EncoderModel, v: Volume4D) -> list[Volume4D]:
    """Feature maps for every hop, finest first, each at its hop's resolution."""
    _check_divisible(v, model.config.depth)
    out = []
    current = v
    for i, hop in enumerate(model.hops):
        feats = cw_saab_apply(hop, current)
        out.append(feats)
        if i + 1 < len(model.hops):
            current = max_pool(feats)
    return out
