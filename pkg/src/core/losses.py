"""
Training objectives and their analytic gradients with respect to control points.

The chain is: control values → (linear upsampling) → dense field → (pull-back
warp) → voxel residuals / soft-mask overlap / bending stencils. Each term's
adjoint is formed per voxel and pulled back through the transpose of the
upsampling weights, so the gradient has the shape of the gridded field.
"""

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from core.gridfield import (
    SIGMA2_FLOOR,
    ControlGrid,
    GriddedField,
    InterpKernel,
    grid_weights,
    sigmoid,
    softplus,
    upsample_adjoint,
    upsample_array,
)
from core.volume import MaskVolume, Volume
from core.warp import BoundaryPolicy, sample_trilinear, warp_array
from utils.errors import ConfigError, GeometryError

ArrayLike = Union[Volume, np.ndarray]


@dataclass(frozen=True)
class LossWeights:
    lambda0: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.1
    lambda_grid: float = 0.0
    epsilon: float = 1e-5
    mc_samples: int = 4

    def __post_init__(self):
        for name in ("lambda0", "lambda1", "lambda2", "lambda3", "lambda_grid"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be ≥ 0, got {value}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if int(self.mc_samples) < 1:
            raise ConfigError(f"mc_samples must be ≥ 1, got {self.mc_samples}")

    def effective(self, has_masks: bool) -> "LossWeights":
        """Dice only contributes when both masks are supplied."""
        return self if has_masks else replace(self, lambda2=0.0)


@dataclass
class LossBreakdown:
    total: float
    similarity: float
    dice: float
    bending: float
    grid_similarity: float = 0.0
    mean_dense: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def terms(self) -> dict:
        return {
            "similarity": self.similarity,
            "dice": self.dice,
            "bending": self.bending,
            "grid_similarity": self.grid_similarity,
        }


@dataclass
class GridGradient:
    """∂L/∂μ and, in Bayesian mode, ∂L/∂η, shaped like the gridded field."""

    mu: np.ndarray
    eta: Optional[np.ndarray] = None


def _data(x: ArrayLike) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Volume) else x, dtype=np.float64)


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise GeometryError(f"{what}: shapes differ {a.shape} vs {b.shape}")


def mse_sim(warped: ArrayLike, fixed: ArrayLike) -> float:
    """Mean squared intensity difference over the voxel domain."""
    w, f = _data(warped), _data(fixed)
    _check_same_shape(w, f, "mse_sim")
    return float(np.mean((w - f) ** 2))


def uncertainty_loss(warped_samples: Sequence[ArrayLike], fixed: ArrayLike, sigma2_dense: np.ndarray,
                     w: LossWeights, normalize: bool = False) -> float:
    """
    Uncertainty-weighted similarity: (1/S) Σ_s Σ_x ℓ_s(x)/(2σ²(x)) + λ0 Σ_x log σ²(x).

    Args:
        warped_samples: The S warped moving images
        fixed: Fixed image
        sigma2_dense: Positive variance per voxel
        w: Loss weights (λ0 is read from here)
        normalize: Divide both sums by the voxel count N

    Returns:
        The scalar loss
    """
    if len(warped_samples) == 0:
        raise ConfigError("uncertainty_loss needs at least one Monte-Carlo sample")
    f = _data(fixed)
    sigma2 = np.asarray(sigma2_dense, dtype=np.float64)
    _check_same_shape(sigma2, f, "uncertainty_loss sigma2")
    if np.any(~(sigma2 > 0)):
        raise ConfigError("sigma2 must be > 0 everywhere")
    mean_sq = np.zeros_like(f)
    for sample in warped_samples:
        s = _data(sample)
        _check_same_shape(s, f, "uncertainty_loss sample")
        mean_sq += (s - f) ** 2
    mean_sq /= len(warped_samples)
    value = float(np.sum(mean_sq / (2.0 * sigma2)) + w.lambda0 * np.sum(np.log(sigma2)))
    return value / f.size if normalize else value


def draw_noise(rng: np.random.Generator, grid_dims: Sequence[int], samples: int) -> List[np.ndarray]:
    return [rng.standard_normal((3,) + tuple(grid_dims)) for _ in range(samples)]


def mc_sample_field(f: GriddedField, noise: np.ndarray) -> GriddedField:
    """Reparameterised draw μ' = μ + sqrt(σ²) ⊙ ε (returned without variance)."""
    if not f.bayesian:
        raise ConfigError("mc_sample_field needs a Bayesian field")
    noise = np.asarray(noise, dtype=np.float64)
    _check_same_shape(noise, f.mu, "mc_sample_field noise")
    return GriddedField(f.grid, f.mu + np.sqrt(f.sigma2) * noise)


def dice_loss(warped: ArrayLike, fixed: ArrayLike, epsilon: float = 1e-5) -> float:
    """Soft Dice loss 1 − 2Σ(s_fix·s_warp)/(Σs_fix + Σs_warp + ε)."""
    w, f = _data(warped), _data(fixed)
    _check_same_shape(w, f, "dice_loss")
    return float(1.0 - 2.0 * np.sum(f * w) / (np.sum(f) + np.sum(w) + epsilon))


# Central second-difference stencils: (multiplier, [(offset, coefficient), ...]).
def _unit(axis: int, step: int) -> Tuple[int, int, int]:
    offset = [0, 0, 0]
    offset[axis] = step
    return tuple(offset)


def _bending_stencils():
    stencils = []
    for a in range(3):
        stencils.append((1.0, [(_unit(a, 1), 1.0), ((0, 0, 0), -2.0), (_unit(a, -1), 1.0)]))
    for a in range(3):
        for b in range(a + 1, 3):
            taps = []
            for sa in (1, -1):
                for sb in (1, -1):
                    offset = tuple(x + y for x, y in zip(_unit(a, sa), _unit(b, sb)))
                    taps.append((offset, 0.25 * sa * sb))
            stencils.append((2.0, taps))
    return stencils


_BENDING_STENCILS = _bending_stencils()


def _interior_slices(shape, offset):
    return tuple(slice(1 + d, n - 1 + d) for n, d in zip(shape, offset))


def _apply_stencil(arr: np.ndarray, taps) -> np.ndarray:
    return sum(coeff * arr[_interior_slices(arr.shape, off)] for off, coeff in taps)


def _apply_stencil_adjoint(residual: np.ndarray, taps, shape) -> np.ndarray:
    out = np.zeros(shape)
    for off, coeff in taps:
        out[_interior_slices(shape, off)] += coeff * residual
    return out


def _bending_u(field_or_u) -> np.ndarray:
    u = np.asarray(getattr(field_or_u, "u", field_or_u), dtype=np.float64)
    if u.ndim != 4 or u.shape[0] != 3:
        raise GeometryError(f"bending energy needs a (3, W, H, D) field, got {u.shape}")
    if any(n < 3 for n in u.shape[1:]):
        raise GeometryError(f"bending energy needs ≥ 3 voxels per axis, got {u.shape[1:]}")
    return u


def bending_energy(field) -> float:
    """
    Mean over interior voxels of Σ_ρ|∂²u/∂ρ²|² + 2 Σ_{ρ<ϱ}|∂²u/∂ρ∂ϱ|², summed over components.
    """
    u = _bending_u(field)
    interior = int(np.prod([n - 2 for n in u.shape[1:]]))
    total = 0.0
    for multiplier, taps in _BENDING_STENCILS:
        for comp in u:
            total += multiplier * float(np.sum(_apply_stencil(comp, taps) ** 2))
    return total / interior


def bending_energy_gradient(field) -> np.ndarray:
    u = _bending_u(field)
    interior = int(np.prod([n - 2 for n in u.shape[1:]]))
    grad = np.zeros_like(u)
    for multiplier, taps in _BENDING_STENCILS:
        for c, comp in enumerate(u):
            grad[c] += (2.0 * multiplier / interior) * _apply_stencil_adjoint(
                _apply_stencil(comp, taps), taps, comp.shape)
    return grad


def grid_similarity(fixed: Volume, moving: Volume, grid: ControlGrid, mu: np.ndarray,
                    policy: BoundaryPolicy = BoundaryPolicy.CLAMP, with_gradient: bool = False):
    """MSE between the fixed image at the control points R and the moving image at R + μ."""
    coords = grid.coords.T
    f_r = sample_trilinear(fixed.data, coords, policy)
    moved = sample_trilinear(moving.data, coords + mu.reshape(3, -1), policy, with_gradient)
    m_r, m_grad = moved if with_gradient else (moved, None)
    residual = m_r - f_r
    value = float(np.mean(residual ** 2))
    if not with_gradient:
        return value
    grad = (2.0 / residual.size) * residual * m_grad
    return value, grad.reshape(mu.shape)


def _check_inputs(pair, field: GriddedField, masks) -> Tuple[Volume, Volume]:
    fixed, moving = pair
    if fixed.dims != moving.dims:
        raise GeometryError(f"fixed dims {fixed.dims} differ from moving dims {moving.dims}")
    if field.grid.image_dims != fixed.dims:
        raise GeometryError(f"field spans {field.grid.image_dims}, images are {fixed.dims}")
    if masks is not None:
        for mask in masks:
            if mask.dims != fixed.dims:
                raise GeometryError(f"mask dims {mask.dims} differ from image dims {fixed.dims}")
    return fixed, moving


def _evaluate(pair, field: GriddedField, kernel: InterpKernel, masks, w: LossWeights,
              noise, policy, need_grad: bool):
    fixed, moving = _check_inputs(pair, field, masks)
    policy = BoundaryPolicy.parse(policy)
    w = w.effective(masks is not None)
    weights = grid_weights(kernel, field.grid)
    f = fixed.data.astype(np.float64)
    n_vox = f.size
    mean_dense = upsample_array(field.mu, weights)

    g_mu = np.zeros_like(field.mu)
    g_sigma2 = np.zeros_like(field.mu) if field.bayesian else None

    # similarity
    if not field.bayesian:
        warped = warp_array(moving.data, mean_dense, policy, with_gradient=need_grad)
        warped, img_grad = warped if need_grad else (warped, None)
        residual = warped - f
        similarity = float(np.mean(residual ** 2))
        if need_grad and w.lambda1 > 0:
            g_mu += w.lambda1 * upsample_adjoint((2.0 / n_vox) * residual * img_grad, weights)
    else:
        if noise is None or len(noise) == 0:
            raise ConfigError("a Bayesian field needs Monte-Carlo noise draws")
        samples = len(noise)
        sigma2_grid = field.sigma2
        std_grid = np.sqrt(sigma2_grid)
        raw_dense = upsample_array(sigma2_grid, weights).mean(axis=0)
        sigma2_dense = np.maximum(raw_dense, SIGMA2_FLOOR)
        warped_samples = []
        for eps in noise:
            eps = np.asarray(eps, dtype=np.float64)
            _check_same_shape(eps, field.mu, "noise draw")
            dense_s = upsample_array(field.mu + std_grid * eps, weights)
            out = warp_array(moving.data, dense_s, policy, with_gradient=need_grad)
            warped_s, img_grad = out if need_grad else (out, None)
            warped_samples.append(warped_s)
            if need_grad and w.lambda1 > 0:
                d_dense = (warped_s - f) / (n_vox * samples * sigma2_dense) * img_grad
                g_sample = w.lambda1 * upsample_adjoint(d_dense, weights)
                g_mu += g_sample
                g_sigma2 += g_sample * eps / (2.0 * std_grid)
        similarity = uncertainty_loss(warped_samples, f, sigma2_dense, w, normalize=True)
        if need_grad and w.lambda1 > 0:
            mean_sq = sum((s - f) ** 2 for s in warped_samples) / samples
            d_sigma2 = (-mean_sq / (2.0 * sigma2_dense ** 2) + w.lambda0 / sigma2_dense) / n_vox
            d_sigma2 = d_sigma2 * (raw_dense > SIGMA2_FLOOR) / 3.0
            g_sigma2 += w.lambda1 * upsample_adjoint(np.broadcast_to(d_sigma2, field.mu.shape[:1] + f.shape), weights)

    # dice on the mean field
    dice = 0.0
    if w.lambda2 > 0:
        fixed_mask, moving_mask = masks
        sf = fixed_mask.data.astype(np.float64)
        out = warp_array(moving_mask.data, mean_dense, policy, with_gradient=need_grad)
        sw, mask_grad = out if need_grad else (out, None)
        inter = float(np.sum(sf * sw))
        denom = float(np.sum(sf) + np.sum(sw) + w.epsilon)
        dice = 1.0 - 2.0 * inter / denom
        if need_grad:
            d_sw = -2.0 * (sf * denom - inter) / denom ** 2
            g_mu += w.lambda2 * upsample_adjoint(d_sw * mask_grad, weights)

    # bending on the mean field
    bending = 0.0
    if w.lambda3 > 0 or all(n >= 3 for n in f.shape):
        bending = bending_energy(mean_dense)
        if need_grad and w.lambda3 > 0:
            g_mu += w.lambda3 * upsample_adjoint(bending_energy_gradient(mean_dense), weights)

    grid_term = 0.0
    if w.lambda_grid > 0:
        out = grid_similarity(fixed, moving, field.grid, field.mu, policy, with_gradient=need_grad)
        grid_term, g_grid = out if need_grad else (out, None)
        if need_grad:
            g_mu += w.lambda_grid * g_grid

    total = w.lambda1 * similarity + w.lambda2 * dice + w.lambda3 * bending + w.lambda_grid * grid_term
    breakdown = LossBreakdown(total, similarity, dice, bending, grid_term, mean_dense=mean_dense)
    if not need_grad:
        return breakdown, None

    g_eta = None
    if field.bayesian:
        g_eta = g_sigma2 * sigmoid(field.eta) * (softplus(field.eta) > SIGMA2_FLOOR)
    return breakdown, GridGradient(g_mu, g_eta)


def total_loss(pair: Tuple[Volume, Volume], field: GriddedField, kernel: InterpKernel,
               masks: Optional[Tuple[MaskVolume, MaskVolume]] = None, w: LossWeights = LossWeights(),
               noise: Optional[Sequence[np.ndarray]] = None,
               policy: BoundaryPolicy = BoundaryPolicy.CLAMP) -> LossBreakdown:
    """
    L = λ1·L_sim + λ2·L_dice + λ3·L_bend (+ λ_grid·L_sim^grid).

    Args:
        pair: (fixed, moving)
        field: Gridded field; Bayesian fields use the uncertainty-weighted similarity
        kernel: Upsampling kernel
        masks: Optional (fixed_mask, moving_mask); Dice is dropped without them
        w: Loss weights
        noise: S standard-normal draws shaped like μ (Bayesian mode only)
        policy: Warp boundary policy

    Returns:
        LossBreakdown with the weighted total and every unweighted term
    """
    breakdown, _ = _evaluate(pair, field, kernel, masks, w, noise, policy, need_grad=False)
    return breakdown


def loss_and_gradient(pair, field: GriddedField, kernel: InterpKernel, masks=None,
                      w: LossWeights = LossWeights(), noise=None,
                      policy: BoundaryPolicy = BoundaryPolicy.CLAMP) -> Tuple[LossBreakdown, GridGradient]:
    return _evaluate(pair, field, kernel, masks, w, noise, policy, need_grad=True)


def grad_total_wrt_grid(pair, field: GriddedField, kernel: InterpKernel, masks=None,
                        w: LossWeights = LossWeights(), noise=None,
                        policy: BoundaryPolicy = BoundaryPolicy.CLAMP) -> GridGradient:
    """∂L/∂μ (and ∂L/∂η in Bayesian mode) via the analytic chain rule."""
    return loss_and_gradient(pair, field, kernel, masks, w, noise, policy)[1]
