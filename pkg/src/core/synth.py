"""
Synthetic phantoms with known ground-truth deformations.

A pair is built so that the ground-truth field is exactly the pull-back field
a registration should recover: fixed = source ∘ (x + u_gt) and moving = source.
"""

import os
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

from core.gridfield import DenseField, GriddedField, InterpKernel, load_field, make_control_grid, save_field, upsample
from core.metrics import jacobian_stats
from core.volume import (
    LandmarkSet,
    MaskVolume,
    Volume,
    load_landmarks,
    load_mask,
    load_volume,
    rescale_minmax,
    save_landmarks,
    save_mask,
    save_volume,
)
from core.warp import BoundaryPolicy, sample_trilinear, warp_mask, warp_volume
from utils.errors import ConfigError, GeometryError
from utils.file_utils import atomic_write_json, read_json
from utils.log_utils import get_logger
from utils.rng import make_rng

logger = get_logger(__name__)

MIN_PHANTOM_DIM = 16
NUM_TEXTURE_WAVES = 8
NUM_LANDMARKS = 8
LANDMARK_SEPARATION = 3.0


@dataclass(frozen=True, eq=False)
class Phantom:
    volume: Volume
    mask: MaskVolume
    landmarks: LandmarkSet


@dataclass(frozen=True, eq=False)
class SynthPair:
    fixed: Volume
    moving: Volume
    fixed_mask: MaskVolume
    moving_mask: MaskVolume
    fixed_landmarks: LandmarkSet
    moving_landmarks: LandmarkSet
    gt_field: GriddedField
    gt_dense: DenseField
    seed: int
    intensity_noise: float
    label_noise: float
    kernel: InterpKernel = InterpKernel()

    @property
    def masks(self):
        return self.fixed_mask, self.moving_mask


def _texture(dims, rng: np.random.Generator) -> np.ndarray:
    """Sum of low-frequency cosines, scaled to [-1, 1]."""
    axes = np.meshgrid(*(np.arange(n, dtype=np.float64) / n for n in dims), indexing="ij")
    texture = np.zeros(dims)
    for _ in range(NUM_TEXTURE_WAVES):
        freq = rng.uniform(0.5, 2.5, size=3) * rng.choice([-1.0, 1.0], size=3)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        texture += np.cos(2.0 * np.pi * sum(f * ax for f, ax in zip(freq, axes)) + phase)
    peak = np.abs(texture).max()
    return texture / peak if peak > 0 else texture


def _pick_landmarks(texture: np.ndarray, region: np.ndarray) -> np.ndarray:
    """Greedy choice of well-separated texture extrema inside `region`."""
    peaks = (ndimage.maximum_filter(texture, size=5) == texture) | (ndimage.minimum_filter(texture, size=5) == texture)
    strength = np.abs(texture - texture[region].mean())
    candidates = []
    for pool in (peaks & region, region):
        idx = np.argwhere(pool)
        order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0], -strength[pool]))
        candidates.extend(idx[order])
    chosen: List[np.ndarray] = []
    for point in candidates:
        if all(np.linalg.norm(point - c) >= LANDMARK_SEPARATION for c in chosen):
            chosen.append(point)
        if len(chosen) == NUM_LANDMARKS:
            break
    if len(chosen) < NUM_LANDMARKS:
        raise GeometryError("phantom interior too small to place landmarks")
    return np.asarray(chosen, dtype=np.float64)


def make_phantom(dims: Sequence[int], seed: int, index: int = 0,
                 spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> Phantom:
    """
    Ellipsoidal organ with band-limited internal texture, its mask and 8 landmarks.

    Args:
        dims: Volume dims, each ≥ 16
        seed: Run seed
        index: Item counter so a dataset gets independent phantoms
        spacing: Voxel spacing written to the volumes

    Returns:
        Phantom; identical for identical (dims, seed, index)
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < MIN_PHANTOM_DIM for d in dims):
        raise GeometryError(f"phantom dims must be ≥ {MIN_PHANTOM_DIM} per axis, got {dims}")
    rng = make_rng(seed, "synth.phantom", index)
    center = np.array([n * rng.uniform(0.45, 0.55) for n in dims])
    semi = np.array([n * rng.uniform(0.3, 0.4) for n in dims])
    axes = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")
    radius2 = sum(((ax - c) / s) ** 2 for ax, c, s in zip(axes, center, semi))
    inside = radius2 <= 1.0

    texture = _texture(dims, rng)
    image = 0.15 + 0.85 * inside * (0.6 + 0.4 * texture)
    image = ndimage.gaussian_filter(image, sigma=1.0, mode="nearest")
    volume = rescale_minmax(Volume(dims, spacing, image))
    mask = MaskVolume(dims, spacing, inside.astype(np.float32))

    interior = ndimage.binary_erosion(inside, iterations=2)
    points = _pick_landmarks(texture, interior)
    landmarks = LandmarkSet(points, tuple(f"L{i + 1}" for i in range(len(points))))
    return Phantom(volume, mask, landmarks)


def make_gt_field(grid_dims: Sequence[int], max_disp: float, seed: int, image_dims: Sequence[int],
                  kernel: InterpKernel = InterpKernel(), index: int = 0) -> GriddedField:
    """
    Smooth random control displacements bounded by `max_disp` voxels.

    Raises:
        ConfigError: max_disp < 0 or above a third of the control spacing
        GeometryError: the upsampled field folds
    """
    grid = make_control_grid(image_dims, grid_dims)
    if max_disp < 0:
        raise ConfigError(f"max_disp must be ≥ 0, got {max_disp}")
    limit = min(grid.spacing) / 3.0
    if max_disp > limit:
        raise ConfigError(f"max_disp {max_disp} exceeds a third of the control spacing ({limit:.3f}); folding risk")
    if max_disp == 0:
        return GriddedField.zeros(grid)
    rng = make_rng(seed, "synth.gt_field", index)
    values = rng.uniform(-max_disp, max_disp, size=(3,) + grid.grid_dims)
    values = ndimage.uniform_filter(values, size=(1, 3, 3, 3), mode="nearest")
    gt = GriddedField(grid, values)
    report = jacobian_stats(upsample(gt, grid.image_dims, kernel))
    if report.folding_percent > 0:
        raise GeometryError(f"ground-truth field folds on {report.folding_percent:.2f}% of voxels")
    return gt


def _sample_field(dense: DenseField, points: np.ndarray) -> np.ndarray:
    coords = points.T
    return np.stack([sample_trilinear(dense.u[c], coords, BoundaryPolicy.CLAMP) for c in range(3)], axis=1)


def _fixed_space_points(dense: DenseField, moving_points: np.ndarray, iterations: int = 50) -> np.ndarray:
    """Solve p + u(p) = q for p by fixed-point iteration."""
    upper = np.asarray(dense.dims, dtype=np.float64) - 1.0
    p = moving_points.copy()
    for _ in range(iterations):
        p = np.clip(moving_points - _sample_field(dense, p), 0.0, upper)
    return p


def _flip_boundary(mask: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    binary = mask >= 0.5
    boundary = ndimage.binary_dilation(binary) ^ ndimage.binary_erosion(binary)
    idx = np.flatnonzero(boundary)
    count = int(round(rate * idx.size))
    out = binary.copy().ravel()
    if count:
        flip = rng.choice(idx, size=count, replace=False)
        out[flip] = ~out[flip]
    return out.reshape(mask.shape).astype(np.float32)


def make_pair(phantom: Phantom, gt: GriddedField, intensity_noise: float = 0.0, label_noise: float = 0.0,
              seed: int = 0, kernel: InterpKernel = InterpKernel(), index: int = 0) -> SynthPair:
    """
    Build a fixed/moving pair whose pull-back ground truth is `gt`.

    Args:
        phantom: Source image, mask and landmarks (they become the moving side)
        gt: Ground-truth gridded field spanning the phantom
        intensity_noise: Std of additive Gaussian noise on both images
        label_noise: Fraction of mask boundary voxels flipped on both masks
        seed: Run seed for the noise draws
        kernel: Kernel used to lift the ground truth
        index: Item counter

    Returns:
        SynthPair with moving landmarks = fixed landmarks + u_gt(fixed landmarks)
    """
    if intensity_noise < 0:
        raise ConfigError(f"intensity noise must be ≥ 0, got {intensity_noise}")
    if not 0.0 <= label_noise <= 1.0:
        raise ConfigError(f"label noise rate must lie in [0, 1], got {label_noise}")
    volume = phantom.volume
    if gt.grid.image_dims != volume.dims:
        raise GeometryError(f"gt field spans {gt.grid.image_dims}, phantom is {volume.dims}")

    dense = upsample(gt, volume.dims, kernel)
    fixed = warp_volume(volume, dense)
    fixed_mask = warp_mask(phantom.mask, dense)
    moving_mask = phantom.mask

    fixed_points = _fixed_space_points(dense, phantom.landmarks.points)
    fixed_landmarks = phantom.landmarks.with_points(fixed_points)
    moving_landmarks = phantom.landmarks.with_points(fixed_points + _sample_field(dense, fixed_points))

    rng = make_rng(seed, "synth.pair", index)
    moving = volume
    if intensity_noise > 0:
        fixed = fixed.with_data(fixed.data + rng.normal(0.0, intensity_noise, volume.dims))
        moving = moving.with_data(moving.data + rng.normal(0.0, intensity_noise, volume.dims))
    if label_noise > 0:
        fixed_mask = MaskVolume(volume.dims, volume.spacing, _flip_boundary(fixed_mask.data, label_noise, rng))
        moving_mask = MaskVolume(volume.dims, volume.spacing, _flip_boundary(moving_mask.data, label_noise, rng))

    return SynthPair(fixed, moving, fixed_mask, moving_mask, fixed_landmarks, moving_landmarks,
                     gt, dense, seed, float(intensity_noise), float(label_noise), kernel)


def make_synth_pairs(count: int, dims: Sequence[int], grid_dims: Sequence[int], max_disp: float, seed: int,
                     intensity_noise: float = 0.0, label_noise: float = 0.0,
                     kernel: InterpKernel = InterpKernel(), start: int = 0) -> List[SynthPair]:
    """`count` independent pairs, item i seeded by the counter `start + i`."""
    if count < 1:
        raise ConfigError(f"count must be ≥ 1, got {count}")
    pairs = []
    for index in range(start, start + count):
        phantom = make_phantom(dims, seed, index)
        gt = make_gt_field(grid_dims, max_disp, seed, dims, kernel, index)
        pairs.append(make_pair(phantom, gt, intensity_noise, label_noise, seed, kernel, index))
    logger.debug(f"Generated {count} synthetic pairs dims={tuple(dims)} grid={tuple(grid_dims)}")
    return pairs


# ---------------------------------------------------------------------------
# Pair directories
# ---------------------------------------------------------------------------

def save_pair(pair: SynthPair, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    save_volume(pair.fixed, os.path.join(directory, "fixed"))
    save_volume(pair.moving, os.path.join(directory, "moving"))
    save_mask(pair.fixed_mask, os.path.join(directory, "fixed_mask"))
    save_mask(pair.moving_mask, os.path.join(directory, "moving_mask"))
    save_landmarks(pair.fixed_landmarks, os.path.join(directory, "fixed_landmarks.csv"))
    save_landmarks(pair.moving_landmarks, os.path.join(directory, "moving_landmarks.csv"))
    save_field(pair.gt_field, os.path.join(directory, "gt_field"))
    atomic_write_json(os.path.join(directory, "pair.json"), {
        "seed": pair.seed,
        "intensity_noise": pair.intensity_noise,
        "label_noise": pair.label_noise,
        "kernel": {"kind": pair.kernel.kind, "sigma": pair.kernel.sigma},
    })


def load_pair(directory: str) -> SynthPair:
    meta = read_json(os.path.join(directory, "pair.json"))
    kernel = InterpKernel(meta["kernel"]["kind"], meta["kernel"]["sigma"])
    fixed = load_volume(os.path.join(directory, "fixed"))
    gt = load_field(os.path.join(directory, "gt_field"))
    return SynthPair(
        fixed=fixed,
        moving=load_volume(os.path.join(directory, "moving")),
        fixed_mask=load_mask(os.path.join(directory, "fixed_mask"), binarize=False),
        moving_mask=load_mask(os.path.join(directory, "moving_mask")),
        fixed_landmarks=load_landmarks(os.path.join(directory, "fixed_landmarks.csv"), fixed.dims),
        moving_landmarks=load_landmarks(os.path.join(directory, "moving_landmarks.csv"), fixed.dims),
        gt_field=gt,
        gt_dense=upsample(gt, fixed.dims, kernel),
        seed=int(meta["seed"]),
        intensity_noise=float(meta["intensity_noise"]),
        label_noise=float(meta["label_noise"]),
        kernel=kernel,
    )


def endpoint_error(estimate: DenseField, truth: DenseField, region: Optional[np.ndarray] = None) -> float:
    """Mean Euclidean distance between two dense fields, in voxels."""
    if estimate.dims != truth.dims:
        raise GeometryError(f"field dims differ: {estimate.dims} vs {truth.dims}")
    err = np.linalg.norm(estimate.u - truth.u, axis=0)
    return float(err[region].mean() if region is not None else err.mean())
