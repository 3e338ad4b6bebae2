"""
Pull-back warping: output(x) = trilinear sample of the moving image at x + u(x).
"""

from enum import Enum
from typing import Tuple, Union

import numpy as np

from core.gridfield import DenseField
from core.volume import MaskVolume, Volume
from utils.errors import ConfigError, GeometryError


class BoundaryPolicy(str, Enum):
    """How samples outside [0, dim-1] are resolved."""

    CLAMP = "clamp"
    ZERO = "zero"

    @classmethod
    def parse(cls, value: Union[str, "BoundaryPolicy"]) -> "BoundaryPolicy":
        try:
            return cls(value)
        except ValueError:
            raise ConfigError(f"boundary must be 'clamp' or 'zero', got {value!r}") from None


def identity_coords(dims) -> np.ndarray:
    """(3, W, H, D) voxel coordinates."""
    return np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij"))


def _axis_setup(coord: np.ndarray, n: int, policy: BoundaryPolicy):
    """Lower corner index, fractional offset, corner validity and derivative gate along one axis."""
    if policy is BoundaryPolicy.CLAMP:
        inside = (coord >= 0.0) & (coord <= n - 1)
        c = np.clip(coord, 0.0, n - 1.0)
        i0 = np.minimum(np.floor(c), n - 2).astype(np.int64)
        frac = c - i0
        valid0 = np.ones(c.shape, dtype=bool)
        valid1 = valid0
        gate = inside.astype(np.float64)
    else:
        i0 = np.floor(coord).astype(np.int64)
        frac = coord - i0
        valid0 = (i0 >= 0) & (i0 <= n - 1)
        valid1 = (i0 + 1 >= 0) & (i0 + 1 <= n - 1)
        gate = np.ones(coord.shape)
    return i0, frac, (valid0, valid1), gate


def sample_trilinear(image: np.ndarray, coords: np.ndarray, policy: BoundaryPolicy = BoundaryPolicy.CLAMP,
                     with_gradient: bool = False):
    """
    Trilinear interpolation of `image` at continuous voxel coordinates.

    Args:
        image: (W, H, D) array
        coords: (3, ...) sample positions
        policy: Boundary handling
        with_gradient: Also return ∂value/∂coords, shape (3, ...)

    Returns:
        values, or (values, gradient)
    """
    image = np.asarray(image, dtype=np.float64)
    if any(n < 2 for n in image.shape):
        raise GeometryError(f"trilinear sampling needs ≥ 2 voxels per axis, got {image.shape}")
    policy = BoundaryPolicy.parse(policy)
    setups = [_axis_setup(coords[a], image.shape[a], policy) for a in range(3)]
    (ix, fx, vx, gx), (iy, fy, vy, gy), (iz, fz, vz, gz) = setups

    values = np.zeros(coords.shape[1:])
    grad = np.zeros(coords.shape) if with_gradient else None
    wx = (1.0 - fx, fx)
    wy = (1.0 - fy, fy)
    wz = (1.0 - fz, fz)
    sign = (-1.0, 1.0)
    shape = np.array(image.shape) - 1
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                valid = vx[a] & vy[b] & vz[c]
                xi = np.clip(ix + a, 0, shape[0])
                yi = np.clip(iy + b, 0, shape[1])
                zi = np.clip(iz + c, 0, shape[2])
                corner = np.where(valid, image[xi, yi, zi], 0.0)
                values += wx[a] * wy[b] * wz[c] * corner
                if with_gradient:
                    grad[0] += sign[a] * wy[b] * wz[c] * corner
                    grad[1] += wx[a] * sign[b] * wz[c] * corner
                    grad[2] += wx[a] * wy[b] * sign[c] * corner
    if with_gradient:
        grad *= np.stack([gx, gy, gz])
        return values, grad
    return values


def warp_array(image: np.ndarray, u: np.ndarray, policy: BoundaryPolicy = BoundaryPolicy.CLAMP,
               with_gradient: bool = False):
    """Warp a raw (W, H, D) array by a (3, W, H, D) displacement."""
    if u.shape != (3,) + tuple(image.shape):
        raise GeometryError(f"field shape {u.shape[1:]} does not match image shape {image.shape}")
    return sample_trilinear(image, identity_coords(image.shape) + u, policy, with_gradient)


def _check_field(volume: Volume, field: DenseField) -> None:
    if field.dims != volume.dims:
        raise GeometryError(f"field dims {field.dims} do not match volume dims {volume.dims}")


def warp_volume(m: Volume, field: DenseField, policy: BoundaryPolicy = BoundaryPolicy.CLAMP) -> Volume:
    _check_field(m, field)
    return m.with_data(warp_array(m.data, field.u, policy))


def warp_mask(s: MaskVolume, field: DenseField, policy: BoundaryPolicy = BoundaryPolicy.CLAMP) -> MaskVolume:
    """Warp a mask; the result stays soft (no re-binarization)."""
    _check_field(s, field)
    return MaskVolume(s.dims, s.spacing, np.clip(warp_array(s.data, field.u, policy), 0.0, 1.0))


def warp_with_gradient(m: Volume, u: np.ndarray, policy: BoundaryPolicy = BoundaryPolicy.CLAMP
                       ) -> Tuple[np.ndarray, np.ndarray]:
    """Warped values and the image gradient at the sample points (the derivative w.r.t. u)."""
    return warp_array(m.data, u, policy, with_gradient=True)
