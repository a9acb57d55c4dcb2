"""Single-file model container.

Layout: 4 magic bytes, little-endian uint32 format version, uint64 header
length, a canonical JSON header (config, structure, energies, section
directory), then raw little-endian float32/int32 sections holding anchors,
biases and tree nodes.  Loading an unknown version fails loudly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .boost import BoostParams, Tree, TreeEnsemble
from .config import PipelineConfig
from .decoder import DecoderConfig, DecoderModel, HopStage
from .encoder import EncoderConfig, EncoderModel
from .errors import ModelFormatError
from .pipeline import FORMAT_VERSION, SegmentationModel
from .saab import EnergyNode, SaabUnit, VoxelHopModel
from .volume import NeighborhoodSpec

MAGIC = b"HSEG"
_DTYPES = {"float32": "<f4", "int32": "<i4", "float64": "<f8"}


class _SectionWriter:
    def __init__(self):
        self.directory = []
        self.chunks = []
        self.offset = 0

    def add(self, name: str, array: np.ndarray, dtype: str) -> None:
        data = np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tobytes()
        self.directory.append({"name": name, "dtype": dtype,
                               "shape": list(array.shape), "offset": self.offset})
        self.chunks.append(data)
        self.offset += len(data)


class _SectionReader:
    def __init__(self, payload: bytes, directory: list[dict]):
        self.payload = payload
        self.sections = {d["name"]: d for d in directory}

    def get(self, name: str) -> np.ndarray:
        try:
            d = self.sections[name]
        except KeyError:
            raise ModelFormatError(f"missing model section {name!r}") from None
        dtype = np.dtype(_DTYPES[d["dtype"]])
        count = int(np.prod(d["shape"])) if d["shape"] else 1
        arr = np.frombuffer(self.payload, dtype=dtype,
                            count=count, offset=d["offset"])
        return arr.reshape(d["shape"]).astype(dtype.newbyteorder("="))


def _write_ensemble(w: _SectionWriter, prefix: str, ens: TreeEnsemble) -> dict:
    flat = {"feature": [], "threshold": [], "left": [], "right": [], "value": []}
    node_counts = []
    for round_trees in ens.trees:
        for tree in round_trees:
            node_counts.append(tree.n_nodes)
            flat["feature"].append(tree.feature)
            flat["threshold"].append(tree.threshold)
            flat["left"].append(tree.left)
            flat["right"].append(tree.right)
            flat["value"].append(tree.value)
    for key in ("feature", "left", "right"):
        arr = np.concatenate(flat[key]) if flat[key] else np.zeros(0, np.int32)
        w.add(f"{prefix}/{key}", arr, "int32")
    for key in ("threshold", "value"):
        arr = np.concatenate(flat[key]) if flat[key] else np.zeros(0, np.float32)
        w.add(f"{prefix}/{key}", arr, "float32")
    w.add(f"{prefix}/base_score", ens.base_score, "float32")
    return {"n_classes": ens.n_classes, "n_features": ens.n_features,
            "n_rounds": ens.n_rounds, "node_counts": node_counts,
            "params": ens.params.to_dict()}


def _read_ensemble(r: _SectionReader, prefix: str, meta: dict) -> TreeEnsemble:
    feature = r.get(f"{prefix}/feature")
    threshold = r.get(f"{prefix}/threshold")
    left = r.get(f"{prefix}/left")
    right = r.get(f"{prefix}/right")
    value = r.get(f"{prefix}/value")
    trees: list[list[Tree]] = []
    pos = 0
    counts = meta["node_counts"]
    k = meta["n_classes"]
    for rnd in range(meta["n_rounds"]):
        row = []
        for cls in range(k):
            n = counts[rnd * k + cls]
            sl = slice(pos, pos + n)
            row.append(Tree(feature=feature[sl], threshold=threshold[sl],
                            left=left[sl], right=right[sl], value=value[sl]))
            pos += n
        trees.append(row)
    return TreeEnsemble(n_classes=k, n_features=meta["n_features"],
                        base_score=r.get(f"{prefix}/base_score"),
                        trees=trees, params=BoostParams(**meta["params"]))


def _encoder_header(w: _SectionWriter, encoder: EncoderModel) -> dict:
    hops = []
    for hop in encoder.hops:
        prefix = f"encoder/hop{hop.hop}"
        units = []
        biases = []
        for k, unit in enumerate(hop.units):
            # anchors carry the 1e-8 orthonormality contract: float64 sections
            w.add(f"{prefix}/unit{k}/anchors", unit.anchors(), "float64")
            biases.append(unit.bias)
            units.append({
                "n_in": unit.n_in,
                "n_components": unit.n_components,
                "energies": [float(e) for e in unit.energies],
                "components": hop.component_indices[k].tolist(),
            })
        w.add(f"{prefix}/biases", np.array(biases, dtype=np.float64), "float64")
        hops.append({
            "hop": hop.hop,
            "n_parents": hop.n_parents,
            "parent_energies": [float(e) for e in hop.parent_energies],
            "spec": {"size": list(hop.spec.size), "stride": list(hop.spec.stride),
                     "padding": hop.spec.padding},
            "units": units,
            "child_energies": [float(n.energy) for n in hop.nodes],
        })
    return {"config": asdict(encoder.config), "hops": hops}


def _read_encoder(r: _SectionReader, header: dict) -> EncoderModel:
    cfg = dict(header["config"])
    cfg["window"] = tuple(cfg["window"])
    cfg["stride"] = tuple(cfg["stride"])
    config = EncoderConfig(**cfg)
    hops = []
    for hop_meta in header["hops"]:
        h = hop_meta["hop"]
        prefix = f"encoder/hop{h}"
        biases = r.get(f"{prefix}/biases")
        units, component_indices, nodes = [], [], []
        energy_iter = iter(hop_meta["child_energies"])
        for k, umeta in enumerate(hop_meta["units"]):
            anchors = r.get(f"{prefix}/unit{k}/anchors")
            comps = np.array(umeta["components"], dtype=np.int64)
            units.append(SaabUnit(
                n_in=umeta["n_in"],
                dc_anchor=anchors[0],
                ac_anchors=anchors[1:],
                bias=float(biases[k]),
                energies=np.array(umeta["energies"], dtype=np.float64),
            ))
            component_indices.append(comps)
            for comp in comps:
                nodes.append(EnergyNode(hop=h, parent_channel=k,
                                        component_index=int(comp),
                                        energy=float(next(energy_iter))))
        spec = NeighborhoodSpec(tuple(hop_meta["spec"]["size"]),
                                tuple(hop_meta["spec"]["stride"]),
                                hop_meta["spec"]["padding"])
        hops.append(VoxelHopModel(
            hop=h, spec=spec, n_parents=hop_meta["n_parents"],
            parent_energies=np.array(hop_meta["parent_energies"], dtype=np.float64),
            units=units, component_indices=component_indices, nodes=nodes))
    return EncoderModel(config=config, hops=hops)


def _decoder_header(w: _SectionWriter, decoder: DecoderModel) -> dict:
    stages = []
    for stage in decoder.stages:
        prefix = f"decoder/hop{stage.hop}"
        stage_meta = {"hop": stage.hop,
                      "main": _write_ensemble(w, f"{prefix}/main", stage.main),
                      "refiners": [_write_ensemble(w, f"{prefix}/refine{r}", ref)
                                   for r, ref in enumerate(stage.refiners)]}
        stages.append(stage_meta)
    return {"n_classes": decoder.n_classes, "depth": decoder.depth,
            "config": asdict(decoder.config), "stages": stages}


def _read_decoder(r: _SectionReader, header: dict) -> DecoderModel:
    cfg = dict(header["config"])
    boost = BoostParams(**cfg.pop("boost"))
    config = DecoderConfig(boost=boost, **cfg)
    stages = []
    for smeta in header["stages"]:
        prefix = f"decoder/hop{smeta['hop']}"
        main = _read_ensemble(r, f"{prefix}/main", smeta["main"])
        refiners = [_read_ensemble(r, f"{prefix}/refine{i}", m)
                    for i, m in enumerate(smeta["refiners"])]
        stages.append(HopStage(hop=smeta["hop"], main=main, refiners=refiners))
    return DecoderModel(n_classes=header["n_classes"], depth=header["depth"],
                        config=config, stages=stages)


def save_model(model: SegmentationModel, path) -> None:
    w = _SectionWriter()
    header = {
        "format": "hopseg-model",
        "version": model.version,
        "config": model.config.to_dict(),
        "encoder": _encoder_header(w, model.encoder),
        "decoder": _decoder_header(w, model.decoder),
    }
    header["sections"] = w.directory
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", model.version))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for chunk in w.chunks:
            fh.write(chunk)


def load_model(path) -> SegmentationModel:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ModelFormatError(f"{path}: not a model file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {version}")
    (header_len,) = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16:16 + header_len].decode())
    payload = raw[16 + header_len:]
    reader = _SectionReader(payload, header["sections"])
    config = PipelineConfig.from_dict(header["config"])
    encoder = _read_encoder(reader, header["encoder"])
    decoder = _read_decoder(reader, header["decoder"])
    return SegmentationModel(config=config, encoder=encoder, decoder=decoder,
                             version=version)
