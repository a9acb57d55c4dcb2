"""Case ingestion: NIfTI-1 volumes and the raw float32 fixture format.

A case pairs an image with an optional integer mask found by filename stem
(`foo.nii.gz` + `foo_mask.nii.gz`, or `foo.raw` + `foo_mask.raw`).  The raw
format is little-endian float32 in voxel-major (H, W, C[, K]) order with a
JSON sidecar carrying shape and spacing.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IngestError
from .volume import Volume4D

_NIFTI_DTYPES = {
    2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32,
    64: np.float64, 256: np.int8, 512: np.uint16, 768: np.uint32,
}
_MASK_SUFFIX = "_mask"
_IMAGE_EXTENSIONS = (".nii", ".nii.gz", ".raw")


@dataclass
class Case:
    """One subject: image volume, optional label mask, provenance path."""

    id: str
    image: Volume4D
    mask: np.ndarray | None = None
    source: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mask is not None:
            self.mask = np.asarray(self.mask).astype(np.int32)
            if tuple(self.mask.shape) != self.image.spatial_shape:
                raise IngestError(
                    f"case {self.id}: mask shape {tuple(self.mask.shape)} does not "
                    f"match image shape {self.image.spatial_shape}"
                )


def _read_nifti(path: Path):
    raw = gzip.open(path, "rb").read() if path.name.endswith(".gz") else path.read_bytes()
    if len(raw) < 352:
        raise IngestError(f"{path}: truncated NIfTI file")
    order = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != 348:
        order = ">"
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != 348:
            raise IngestError(f"{path}: not a NIfTI-1 file (bad sizeof_hdr)")
    magic = raw[344:348]
    if magic[:3] not in (b"n+1", b"ni1"):
        raise IngestError(f"{path}: bad NIfTI magic {magic!r}")
    if magic[:3] == b"ni1":
        raise IngestError(f"{path}: detached .hdr/.img pairs are not supported")
    dim = struct.unpack_from(f"{order}8h", raw, 40)
    (datatype,) = struct.unpack_from(f"{order}h", raw, 70)
    pixdim = struct.unpack_from(f"{order}8f", raw, 76)
    (vox_offset,) = struct.unpack_from(f"{order}f", raw, 108)
    slope, inter = struct.unpack_from(f"{order}2f", raw, 112)

    ndim = dim[0]
    if ndim < 3 or any(d > 1 for d in dim[4:4 + max(0, ndim - 3)]):
        raise IngestError(f"{path}: expected a 3D series, got dim={dim[:ndim + 1]}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if datatype not in _NIFTI_DTYPES:
        raise IngestError(f"{path}: unsupported NIfTI datatype {datatype}")
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(order)
    offset = max(int(vox_offset), 352)
    count = nx * ny * nz
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    if data.size != count:
        raise IngestError(f"{path}: voxel data truncated")
    arr = data.reshape((nx, ny, nz), order="F").astype(np.float64)
    if slope not in (0.0, 1.0) or inter != 0.0:
        arr = arr * (slope if slope != 0.0 else 1.0) + inter
    # NIfTI fastest axis is x (columns): reorder to (rows, columns, slices)
    arr = np.transpose(arr, (1, 0, 2))
    spacing = (float(pixdim[2]), float(pixdim[1]), float(pixdim[3]))
    if any(s <= 0 for s in spacing):
        spacing = None
    return arr, spacing


def _read_raw(path: Path):
    sidecar = path.with_suffix(".json")
    if not sidecar.exists():
        raise IngestError(f"{path}: missing JSON sidecar {sidecar.name}")
    try:
        meta = json.loads(sidecar.read_text())
    except json.JSONDecodeError as err:
        raise IngestError(f"{sidecar}: invalid JSON ({err})") from err
    shape = tuple(int(s) for s in meta.get("shape", ()))
    if len(shape) not in (3, 4):
        raise IngestError(f"{sidecar}: shape must have 3 or 4 entries, got {shape}")
    data = np.fromfile(path, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise IngestError(
            f"{path}: expected {int(np.prod(shape))} float32 values, found {data.size}"
        )
    spacing = meta.get("spacing")
    if spacing is not None:
        spacing = tuple(float(s) for s in spacing)
    return data.reshape(shape).astype(np.float64), spacing


def write_raw(path, data: np.ndarray, spacing=None) -> None:
    """Write a volume in the raw float32 + JSON sidecar fixture format."""
    path = Path(path)
    arr = np.ascontiguousarray(data, dtype="<f4")
    arr.tofile(path)
    meta = {"shape": list(arr.shape),
            "spacing": list(float(s) for s in spacing) if spacing else None}
    path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True))


def _read_volume(path: Path):
    name = path.name
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return _read_nifti(path)
    if name.endswith(".raw"):
        return _read_raw(path)
    raise IngestError(f"{path}: unknown volume extension")


def _stem(path: Path) -> str:
    name = path.name
    for ext in _IMAGE_EXTENSIONS:
        if name.endswith(ext):
            return name[: -len(ext)]
    return path.stem


def load_case(image_path, mask_path=None) -> Case:
    """Read one image (and optional mask) into a Case."""
    image_path = Path(image_path)
    arr, spacing = _read_volume(image_path)
    if arr.ndim == 4 and arr.shape[3] == 1:
        arr = arr[..., 0]
    if arr.ndim != 3:
        raise IngestError(f"{image_path}: expected a 3D image, got shape {arr.shape}")
    mask = None
    if mask_path is not None:
        mask_arr, _ = _read_volume(Path(mask_path))
        if mask_arr.ndim == 4 and mask_arr.shape[3] == 1:
            mask_arr = mask_arr[..., 0]
        mask = np.rint(mask_arr).astype(np.int32)
    return Case(id=_stem(image_path), image=Volume4D(arr, spacing),
                mask=mask, source=str(image_path))


def ingest(path) -> list[Case]:
    """Load every case under a directory (or a single volume file).

    Images and `*_mask` files pair by stem; a mask whose shape disagrees with
    its image raises with both shapes in the message.
    """
    path = Path(path)
    if not path.exists():
        raise IngestError(f"{path}: no such path")
    if path.is_file():
        return [load_case(path)]
    files = sorted(p for p in path.iterdir()
                   if p.is_file() and p.name.endswith(_IMAGE_EXTENSIONS))
    masks = {}
    images = []
    for p in files:
        stem = _stem(p)
        if stem.endswith(_MASK_SUFFIX):
            masks[stem[: -len(_MASK_SUFFIX)]] = p
        else:
            images.append((stem, p))
    cases = []
    for stem, p in images:
        cases.append(load_case(p, masks.get(stem)))
    return cases
