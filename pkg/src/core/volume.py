"""
Volumetric data model and file I/O.

Images, masks and landmark sets are immutable after construction. A volume is
stored on disk as a `<name>.json` header plus a `<name>.raw` payload of
little-endian float32 values in x-fastest order, so that
`data[i + W*(j + H*k)]` addresses voxel (i, j, k). In memory the array has
shape (W, H, D) and is indexed `data[i, j, k]`.
"""

import csv
import json
import os
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from utils.errors import GeometryError, VolumeFormatError
from utils.file_utils import atomic_write_bytes, atomic_write_text, split_pair_path
from utils.log_utils import get_logger

logger = get_logger(__name__)

Dims = Tuple[int, int, int]
Spacing = Tuple[float, float, float]

HEADER_DTYPE = "f32"
HEADER_ORDER = "x-fastest"
PAYLOAD_DTYPE = np.dtype("<f4")
MASK_THRESHOLD = 0.5


def _as_dims(dims: Sequence[int]) -> Dims:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise GeometryError(f"dims must be three positive integers, got {dims}")
    return dims


def _as_spacing(spacing: Sequence[float]) -> Spacing:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise GeometryError(f"spacing must be three positive numbers, got {spacing}")
    return spacing


def _frozen(array: np.ndarray, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar image with millimetre spacing."""

    dims: Dims
    spacing: Spacing
    data: np.ndarray

    def __post_init__(self):
        dims = _as_dims(self.dims)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))
        data = _frozen(self.data, np.float32)
        if data.shape != dims:
            raise GeometryError(f"data shape {data.shape} does not match dims {dims}")
        if not np.all(np.isfinite(data)):
            raise VolumeFormatError("volume intensities must be finite")
        object.__setattr__(self, "data", data)

    @property
    def num_voxels(self) -> int:
        return int(np.prod(self.dims))

    def same_geometry(self, other: "Volume") -> bool:
        return self.dims == other.dims and np.allclose(self.spacing, other.spacing)

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(self.dims, self.spacing, data)


@dataclass(frozen=True, eq=False)
class MaskVolume(Volume):
    """A mask on the same grid as a Volume; binary on load, soft after warping."""

    def __post_init__(self):
        super().__post_init__()
        if np.any(self.data < 0.0) or np.any(self.data > 1.0):
            raise VolumeFormatError("mask values must lie in [0, 1]")

    @classmethod
    def from_array(cls, values: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0),
                   binarize: bool = True) -> "MaskVolume":
        values = np.asarray(values, dtype=np.float64)
        if binarize:
            values = (values >= MASK_THRESHOLD).astype(np.float32)
        else:
            values = np.clip(values, 0.0, 1.0)
        return cls(values.shape, spacing, values)

    @property
    def binary(self) -> np.ndarray:
        return self.data >= MASK_THRESHOLD

    def with_data(self, data: np.ndarray) -> "MaskVolume":
        return MaskVolume(self.dims, self.spacing, np.clip(data, 0.0, 1.0))


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """K landmark coordinates in continuous voxel units, with unique ids."""

    points: np.ndarray
    ids: Tuple[str, ...]

    def __post_init__(self):
        points = _frozen(self.points, np.float64).reshape(-1, 3) if np.size(self.points) else None
        if points is None or points.shape[0] < 1:
            raise VolumeFormatError("a landmark set needs at least one point")
        ids = tuple(str(i) for i in self.ids)
        if len(ids) != points.shape[0]:
            raise VolumeFormatError(f"{len(ids)} ids for {points.shape[0]} points")
        if len(set(ids)) != len(ids):
            raise VolumeFormatError("landmark ids must be unique")
        if not np.all(np.isfinite(points)):
            raise VolumeFormatError("landmark coordinates must be finite")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "ids", ids)

    @property
    def count(self) -> int:
        return int(self.points.shape[0])

    def out_of_bounds(self, dims: Sequence[int]) -> np.ndarray:
        """Boolean flag per point lying outside [0, dim-1] on any axis."""
        upper = np.asarray(dims, dtype=np.float64) - 1.0
        return np.any((self.points < 0.0) | (self.points > upper), axis=1)

    def with_points(self, points: np.ndarray) -> "LandmarkSet":
        return LandmarkSet(points, self.ids)


def rescale_minmax(volume: Volume) -> Volume:
    """Per-volume min-max rescale to [0, 1]; a constant volume maps to zeros."""
    data = volume.data.astype(np.float64)
    lo, hi = float(data.min()), float(data.max())
    if hi - lo <= 0.0:
        return volume.with_data(np.zeros_like(data))
    return volume.with_data((data - lo) / (hi - lo))


def _read_header(header_path: str) -> dict:
    if not os.path.exists(header_path):
        raise FileNotFoundError(f"Header not found: {header_path}")
    with open(header_path, "r", encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise VolumeFormatError(f"Malformed header {header_path}: {e}") from e


def _read_payload(payload_path: str, expected_values: int) -> np.ndarray:
    if not os.path.exists(payload_path):
        raise FileNotFoundError(f"Payload not found: {payload_path}")
    with open(payload_path, "rb") as f:
        raw = f.read()
    if len(raw) != expected_values * PAYLOAD_DTYPE.itemsize:
        raise VolumeFormatError(
            f"Payload {payload_path} holds {len(raw) / PAYLOAD_DTYPE.itemsize:g} values, "
            f"header expects {expected_values}"
        )
    return np.frombuffer(raw, dtype=PAYLOAD_DTYPE)


def load_volume(path: str, normalize: bool = False) -> Volume:
    """
    Load a volume from its header+payload pair.

    Args:
        path: `<name>`, `<name>.json` or `<name>.raw`
        normalize: Apply per-volume min-max rescaling to [0, 1]

    Returns:
        The decoded Volume (bit-exact to the payload unless normalized)
    """
    header_path, payload_path = split_pair_path(path)
    header = _read_header(header_path)
    try:
        dims = _as_dims(header["dims"])
        spacing = _as_spacing(header["spacing"])
    except KeyError as e:
        raise VolumeFormatError(f"Header {header_path} is missing {e}") from e
    if header.get("dtype", HEADER_DTYPE) != HEADER_DTYPE:
        raise VolumeFormatError(f"Unsupported dtype {header.get('dtype')!r}")
    if header.get("order", HEADER_ORDER) != HEADER_ORDER:
        raise VolumeFormatError(f"Unsupported voxel order {header.get('order')!r}")

    flat = _read_payload(payload_path, int(np.prod(dims)))
    if not np.all(np.isfinite(flat)):
        raise VolumeFormatError(f"Payload {payload_path} contains non-finite values")
    volume = Volume(dims, spacing, flat.reshape(dims, order="F"))
    logger.debug(f"Loaded volume {header_path} dims={dims} spacing={spacing}")
    return rescale_minmax(volume) if normalize else volume


def save_volume(volume: Volume, path: str) -> None:
    """Write `volume` as `<name>.json` + `<name>.raw`; `load_volume` inverts it bit-exactly."""
    header_path, payload_path = split_pair_path(path)
    header = {
        "dims": list(volume.dims),
        "spacing": list(volume.spacing),
        "dtype": HEADER_DTYPE,
        "order": HEADER_ORDER,
    }
    payload = np.asarray(volume.data, dtype=PAYLOAD_DTYPE).ravel(order="F").tobytes()
    atomic_write_bytes(payload_path, payload)
    atomic_write_text(header_path, json.dumps(header) + "\n")


def load_mask(path: str, binarize: bool = True) -> MaskVolume:
    """Load a mask, binarized at 0.5 unless `binarize` is off."""
    volume = load_volume(path)
    return MaskVolume.from_array(volume.data, volume.spacing, binarize=binarize)


def save_mask(mask: MaskVolume, path: str) -> None:
    save_volume(mask, path)


def _parse_row(row: Sequence[str], line_no: int) -> Optional[Tuple[str, Tuple[float, float, float]]]:
    cells = [c.strip() for c in row]
    if not cells or all(c == "" for c in cells):
        return None
    if len(cells) != 4:
        raise VolumeFormatError(f"Landmark row {line_no}: expected 4 fields id,x,y,z, got {len(cells)}")
    try:
        coords = (float(cells[1]), float(cells[2]), float(cells[3]))
    except ValueError as e:
        raise VolumeFormatError(f"Landmark row {line_no}: {e}") from e
    return cells[0], coords


def load_landmarks(path: str, dims: Optional[Sequence[int]] = None, strict: bool = False) -> LandmarkSet:
    """
    Parse a landmark CSV with rows `id,x,y,z` (header row optional).

    Args:
        path: CSV file path
        dims: Volume dims used for the bounds check (skipped when None)
        strict: Raise instead of warning on out-of-bounds points

    Returns:
        The parsed LandmarkSet
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Landmark file not found: {path}")
    ids, points = [], []
    with open(path, "r", encoding="utf-8", newline="") as f:
        for line_no, row in enumerate(csv.reader(f), 1):
            if line_no == 1 and len(row) == 4 and row[0].strip().lower() == "id":
                continue
            parsed = _parse_row(row, line_no)
            if parsed is None:
                continue
            ids.append(parsed[0])
            points.append(parsed[1])
    if not points:
        raise VolumeFormatError(f"Landmark file {path} contains no landmarks")

    landmarks = LandmarkSet(np.asarray(points), tuple(ids))
    if dims is not None:
        outside = landmarks.out_of_bounds(dims)
        if np.any(outside):
            bad = [landmarks.ids[i] for i in np.flatnonzero(outside)]
            message = f"Landmarks outside volume bounds {tuple(dims)}: {', '.join(bad)}"
            if strict:
                raise GeometryError(message)
            logger.warning(f"⚠️ {message}")
    return landmarks


def save_landmarks(landmarks: LandmarkSet, path: str) -> None:
    lines = ["id,x,y,z"]
    for lid, (x, y, z) in zip(landmarks.ids, landmarks.points):
        lines.append(f"{lid},{float(x)!r},{float(y)!r},{float(z)!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def check_same_geometry(a: Volume, b: Volume, what: str = "volumes") -> None:
    if a.dims != b.dims:
        raise GeometryError(f"{what} have different dims: {a.dims} vs {b.dims}")
