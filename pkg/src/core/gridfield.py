"""
Control-grid geometry, gridded displacement fields and their upsampling.

All three interpolation families are separable, so a dense field is
`u[c] = Σ_ijk μ[c,i,j,k] · Bx[x,i] · By[y,j] · Bz[z,k]`. Each family is
reduced to one (dim × n_ctrl) weight matrix per axis; upsampling and its
adjoint are then three small contractions. Displacements are in voxels.
"""

import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import BSpline

from utils.errors import ConfigError, GeometryError, VolumeFormatError
from utils.file_utils import atomic_write_bytes, atomic_write_text, read_json, split_pair_path
from utils.log_utils import get_logger

logger = get_logger(__name__)

Dims = Tuple[int, int, int]

TRILINEAR = "trilinear"
BSPLINE = "bspline"
GAUSSIAN = "gaussian"
KERNEL_KINDS = (TRILINEAR, BSPLINE, GAUSSIAN)
_KIND_ALIASES = {"bspline3": BSPLINE, "bspl": BSPLINE, "deconv": GAUSSIAN, "linear": TRILINEAR}

SIGMA2_FLOOR = 1e-6
DEFAULT_GAUSSIAN_SIGMA = 0.5
BSPLINE_DEGREE = 3
PAYLOAD_DTYPE = np.dtype("<f4")


def _as_triple(values: Sequence[int], what: str) -> Dims:
    values = tuple(int(v) for v in values)
    if len(values) != 3:
        raise GeometryError(f"{what} must have three entries, got {values}")
    return values


def _frozen(array, dtype=np.float64) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class ControlGrid:
    """Axis-aligned lattice of control points spanning the image, endpoints inclusive."""

    grid_dims: Dims
    image_dims: Dims

    @property
    def num_points(self) -> int:
        return int(np.prod(self.grid_dims))

    @property
    def spacing(self) -> Tuple[float, float, float]:
        """Control spacing along each axis, in voxels."""
        return tuple((n - 1) / (g - 1) for n, g in zip(self.image_dims, self.grid_dims))

    def axis_coords(self, axis: int) -> np.ndarray:
        return np.linspace(0.0, self.image_dims[axis] - 1.0, self.grid_dims[axis])

    @property
    def coords(self) -> np.ndarray:
        """(G, 3) control-point coordinates, flattened in C order over (g_w, g_h, g_d)."""
        axes = np.meshgrid(*(self.axis_coords(a) for a in range(3)), indexing="ij")
        return np.stack([a.ravel() for a in axes], axis=1)

    @property
    def normalized_coords(self) -> np.ndarray:
        """(G, 3) control coordinates scaled to [0, 1]."""
        axes = np.meshgrid(*(np.linspace(0.0, 1.0, g) for g in self.grid_dims), indexing="ij")
        return np.stack([a.ravel() for a in axes], axis=1)


def make_control_grid(image_dims: Sequence[int], grid_dims: Sequence[int]) -> ControlGrid:
    """
    Build the control lattice linspace(0,W-1,g_w) ⊗ linspace(0,H-1,g_h) ⊗ linspace(0,D-1,g_d).

    Args:
        image_dims: (W, H, D) voxel counts, each ≥ 2
        grid_dims: (g_w, g_h, g_d) control counts, each in [2, image_dim]

    Returns:
        The ControlGrid
    """
    image_dims = _as_triple(image_dims, "image_dims")
    grid_dims = _as_triple(grid_dims, "grid_dims")
    if any(g < 2 for g in grid_dims):
        raise GeometryError(f"grid_dim must be ≥ 2, got {grid_dims}")
    if any(n < 2 for n in image_dims):
        raise GeometryError(f"image_dim must be ≥ 2, got {image_dims}")
    if any(g > n for g, n in zip(grid_dims, image_dims)):
        raise GeometryError(f"grid_dims {grid_dims} exceed image_dims {image_dims}")
    return ControlGrid(grid_dims, image_dims)


@dataclass(frozen=True)
class InterpKernel:
    """Basis-function family used to lift control displacements to voxels."""

    kind: str = TRILINEAR
    sigma: float = DEFAULT_GAUSSIAN_SIGMA
    degree: int = BSPLINE_DEGREE

    def __post_init__(self):
        kind = _KIND_ALIASES.get(str(self.kind).lower(), str(self.kind).lower())
        if kind not in KERNEL_KINDS:
            raise ConfigError(f"Unknown kernel kind {self.kind!r}; expected one of {KERNEL_KINDS}")
        object.__setattr__(self, "kind", kind)
        if kind == GAUSSIAN and not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ConfigError(f"gaussian sigma must be > 0, got {self.sigma}")
        if kind == BSPLINE and self.degree != BSPLINE_DEGREE:
            raise ConfigError("only the cubic B-spline (degree 3) is supported")

    def knot_vector(self, n_ctrl: int) -> np.ndarray:
        """Open-uniform knots [0]*p + linspace(0,1,n-p+1) + [1]*p for n control points."""
        p = self.degree
        if n_ctrl < p + 1:
            raise GeometryError(
                f"cubic B-spline needs at least {p + 1} control points per axis (grid_dim ≥ {p + 1}), got {n_ctrl}"
            )
        return np.concatenate([np.zeros(p), np.linspace(0.0, 1.0, n_ctrl - p + 1), np.ones(p)])


@dataclass(frozen=True, eq=False)
class GriddedField:
    """Control-point displacement means μ (and, in Bayesian mode, raw variances η)."""

    grid: ControlGrid
    mu: np.ndarray
    eta: Optional[np.ndarray] = None

    def __post_init__(self):
        shape = (3,) + self.grid.grid_dims
        mu = _frozen(self.mu)
        if mu.shape != shape:
            raise GeometryError(f"mu shape {mu.shape} does not match grid {shape}")
        if not np.all(np.isfinite(mu)):
            raise GeometryError("mu must be finite")
        object.__setattr__(self, "mu", mu)
        if self.eta is not None:
            eta = _frozen(self.eta)
            if eta.shape != shape:
                raise GeometryError(f"eta shape {eta.shape} does not match grid {shape}")
            if not np.all(np.isfinite(eta)):
                raise GeometryError("eta must be finite")
            object.__setattr__(self, "eta", eta)

    @property
    def bayesian(self) -> bool:
        return self.eta is not None

    @property
    def sigma2(self) -> Optional[np.ndarray]:
        if self.eta is None:
            return None
        return np.maximum(softplus(self.eta), SIGMA2_FLOOR)

    @classmethod
    def zeros(cls, grid: ControlGrid, bayesian: bool = False) -> "GriddedField":
        shape = (3,) + grid.grid_dims
        return cls(grid, np.zeros(shape), np.zeros(shape) if bayesian else None)

    def mean_only(self) -> "GriddedField":
        return GriddedField(self.grid, self.mu)


@dataclass(frozen=True, eq=False)
class DenseField:
    """Per-voxel displacement u with shape (3, W, H, D)."""

    u: np.ndarray
    dims: Dims = field(init=False)

    def __post_init__(self):
        u = _frozen(self.u)
        if u.ndim != 4 or u.shape[0] != 3:
            raise GeometryError(f"dense field must have shape (3, W, H, D), got {u.shape}")
        if not np.all(np.isfinite(u)):
            raise GeometryError("dense field must be finite")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "dims", tuple(int(d) for d in u.shape[1:]))

    @classmethod
    def zeros(cls, dims: Sequence[int]) -> "DenseField":
        return cls(np.zeros((3,) + tuple(dims)))


# ---------------------------------------------------------------------------
# Per-axis basis weights
# ---------------------------------------------------------------------------

def _cell_positions(dim: int, n_ctrl: int) -> np.ndarray:
    """Voxel positions expressed in control-cell units; integers land exactly on nodes."""
    return np.arange(dim, dtype=np.float64) * (n_ctrl - 1) / (dim - 1)


def trilinear_weights(n_ctrl: int, dim: int) -> np.ndarray:
    s = _cell_positions(dim, n_ctrl)
    return np.maximum(0.0, 1.0 - np.abs(s[:, None] - np.arange(n_ctrl)[None, :]))


def bspline_weights(n_ctrl: int, dim: int, kernel: InterpKernel) -> np.ndarray:
    knots = kernel.knot_vector(n_ctrl)
    params = np.arange(dim, dtype=np.float64) / (dim - 1)
    return BSpline.design_matrix(params, knots, kernel.degree).toarray()


def gaussian_weights(n_ctrl: int, dim: int, sigma: float) -> np.ndarray:
    s = _cell_positions(dim, n_ctrl)
    raw = np.exp(-0.5 * ((s[:, None] - np.arange(n_ctrl)[None, :]) / sigma) ** 2)
    return raw / raw.sum(axis=1, keepdims=True)


@lru_cache(maxsize=256)
def _cached_axis_weights(kind: str, sigma: float, degree: int, n_ctrl: int, dim: int) -> np.ndarray:
    kernel = InterpKernel(kind, sigma, degree)
    if kind == TRILINEAR:
        weights = trilinear_weights(n_ctrl, dim)
    elif kind == BSPLINE:
        weights = bspline_weights(n_ctrl, dim, kernel)
    else:
        weights = gaussian_weights(n_ctrl, dim, sigma)
    weights.setflags(write=False)
    return weights


def axis_weights(kernel: InterpKernel, n_ctrl: int, dim: int) -> np.ndarray:
    """(dim, n_ctrl) basis matrix for one axis."""
    return _cached_axis_weights(kernel.kind, float(kernel.sigma), int(kernel.degree), int(n_ctrl), int(dim))


def grid_weights(kernel: InterpKernel, grid: ControlGrid) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return tuple(axis_weights(kernel, g, n) for g, n in zip(grid.grid_dims, grid.image_dims))


def upsample_array(values: np.ndarray, weights: Sequence[np.ndarray]) -> np.ndarray:
    """Apply separable weights to a (C, g_w, g_h, g_d) array → (C, W, H, D)."""
    wx, wy, wz = weights
    out = np.einsum("cijk,xi->cxjk", values, wx)
    out = np.einsum("cxjk,yj->cxyk", out, wy)
    return np.einsum("cxyk,zk->cxyz", out, wz)


def upsample_adjoint(dense: np.ndarray, weights: Sequence[np.ndarray]) -> np.ndarray:
    """Transpose of `upsample_array`: (C, W, H, D) → (C, g_w, g_h, g_d)."""
    wx, wy, wz = weights
    out = np.einsum("cxyz,zk->cxyk", dense, wz)
    out = np.einsum("cxyk,yj->cxjk", out, wy)
    return np.einsum("cxjk,xi->cijk", out, wx)


def _check_dims(f: GriddedField, dims: Sequence[int]) -> None:
    if tuple(int(d) for d in dims) != f.grid.image_dims:
        raise GeometryError(f"requested dims {tuple(dims)} differ from the grid's image_dims {f.grid.image_dims}")


def upsample_trilinear(f: GriddedField, dims: Sequence[int]) -> DenseField:
    """Trilinear lift of μ; interpolates μ exactly at voxels that coincide with control points."""
    return upsample(f, dims, InterpKernel(TRILINEAR))


def upsample_bspline(f: GriddedField, dims: Sequence[int], kernel: Optional[InterpKernel] = None) -> DenseField:
    """Cubic B-spline lift; control values act as spline coefficients (no node interpolation)."""
    kernel = kernel or InterpKernel(BSPLINE)
    if kernel.kind != BSPLINE:
        raise ConfigError(f"upsample_bspline needs a bspline kernel, got {kernel.kind}")
    return upsample(f, dims, kernel)


def upsample_gaussian(f: GriddedField, dims: Sequence[int], kernel: Optional[InterpKernel] = None) -> DenseField:
    """Normalised Gaussian splatting, σ measured in control-cell widths."""
    kernel = kernel or InterpKernel(GAUSSIAN)
    if kernel.kind != GAUSSIAN:
        raise ConfigError(f"upsample_gaussian needs a gaussian kernel, got {kernel.kind}")
    return upsample(f, dims, kernel)


def upsample(f: GriddedField, dims: Sequence[int], kernel: InterpKernel) -> DenseField:
    _check_dims(f, dims)
    return DenseField(upsample_array(f.mu, grid_weights(kernel, f.grid)))


def upsample_sigma2(f: GriddedField, kernel: InterpKernel) -> np.ndarray:
    """Dense σ²(x) per component, lifted with the same kernel as μ and floored."""
    if not f.bayesian:
        raise GeometryError("field has no variance parameters")
    dense = upsample_array(f.sigma2, grid_weights(kernel, f.grid))
    return np.maximum(dense, SIGMA2_FLOOR)


def fit_gridded_field(dense: DenseField, grid: ControlGrid, kernel: InterpKernel) -> GriddedField:
    """
    Least-squares control values whose upsampling best reproduces `dense`.

    The upsampling operator is a Kronecker product of the per-axis matrices, so
    its pseudo-inverse factors into the per-axis pseudo-inverses.
    """
    if dense.dims != grid.image_dims:
        raise GeometryError(f"dense dims {dense.dims} differ from grid image_dims {grid.image_dims}")
    pinvs = tuple(np.linalg.pinv(w) for w in grid_weights(kernel, grid))
    mu = upsample_array(dense.u, pinvs)
    return GriddedField(grid, mu)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _component_major(values: np.ndarray) -> bytes:
    return b"".join(np.asarray(c, dtype=PAYLOAD_DTYPE).ravel(order="F").tobytes() for c in values)


def _from_component_major(flat: np.ndarray, spatial: Dims) -> np.ndarray:
    n = int(np.prod(spatial))
    return np.stack([flat[c * n:(c + 1) * n].reshape(spatial, order="F") for c in range(3)]).astype(np.float64)


def field_to_bytes(f: GriddedField) -> Tuple[bytes, bytes]:
    """
    Serialize a gridded field.

    Returns:
        (header, payload): JSON header bytes, and float32 μ then η, each
        component-major (all x-components, then y, then z), x-fastest within a component
    """
    header = {
        "grid_dims": list(f.grid.grid_dims),
        "image_dims": list(f.grid.image_dims),
        "bayesian": f.bayesian,
        "dtype": "f32",
        "order": "x-fastest",
    }
    payload = _component_major(f.mu)
    if f.bayesian:
        payload += _component_major(f.eta)
    return json.dumps(header).encode("utf-8"), payload


def bytes_to_field(header, payload: bytes) -> GriddedField:
    if isinstance(header, (bytes, str)):
        header = json.loads(header)
    try:
        grid = make_control_grid(header["image_dims"], header["grid_dims"])
        bayesian = bool(header["bayesian"])
    except KeyError as e:
        raise VolumeFormatError(f"field header is missing {e}") from e
    per_block = 3 * grid.num_points
    expected = per_block * (2 if bayesian else 1) * PAYLOAD_DTYPE.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(f"field payload has {len(payload)} bytes, header implies {expected}")
    flat = np.frombuffer(payload, dtype=PAYLOAD_DTYPE)
    mu = _from_component_major(flat[:per_block], grid.grid_dims)
    eta = _from_component_major(flat[per_block:], grid.grid_dims) if bayesian else None
    return GriddedField(grid, mu, eta)


def save_field(f: GriddedField, path: str) -> None:
    header_path, payload_path = split_pair_path(path)
    header, payload = field_to_bytes(f)
    atomic_write_bytes(payload_path, payload)
    atomic_write_bytes(header_path, header + b"\n")


def _read_payload(payload_path: str) -> bytes:
    try:
        with open(payload_path, "rb") as fh:
            return fh.read()
    except FileNotFoundError:
        raise FileNotFoundError(f"Payload not found: {payload_path}") from None


def load_field(path: str) -> GriddedField:
    header_path, payload_path = split_pair_path(path)
    return bytes_to_field(read_json(header_path), _read_payload(payload_path))


def save_dense_field(dense: DenseField, path: str) -> None:
    header_path, payload_path = split_pair_path(path)
    header = {"dims": list(dense.dims), "components": 3, "dtype": "f32", "order": "x-fastest"}
    atomic_write_bytes(payload_path, _component_major(dense.u))
    atomic_write_text(header_path, json.dumps(header) + "\n")


def load_dense_field(path: str) -> DenseField:
    header_path, payload_path = split_pair_path(path)
    header = read_json(header_path)
    dims = _as_triple(header["dims"], "dims")
    payload = _read_payload(payload_path)
    expected = 3 * int(np.prod(dims)) * PAYLOAD_DTYPE.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(f"dense field payload has {len(payload)} bytes, header implies {expected}")
    return DenseField(_from_component_major(np.frombuffer(payload, dtype=PAYLOAD_DTYPE), dims))


def load_any_field(path: str, kernel: Optional[InterpKernel] = None) -> DenseField:
    """Load a dense field, or a gridded field upsampled with `kernel` (trilinear by default)."""
    header_path, _ = split_pair_path(path)
    header = read_json(header_path)
    if "grid_dims" in header:
        gridded = load_field(path)
        return upsample(gridded, gridded.grid.image_dims, kernel or InterpKernel(TRILINEAR))
    return load_dense_field(path)
