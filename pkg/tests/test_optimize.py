import math

import numpy as np
import pytest

from core.gridfield import DenseField, GriddedField, InterpKernel, make_control_grid
from core.losses import LossBreakdown, LossWeights, bending_energy
from core.metrics import dice_score
from core.optimize import RegistrationConfig, _check_finite, dof_sweep, plateaued, register_pair
from core.synth import endpoint_error, make_pair, make_phantom, make_synth_pairs
from core.volume import Volume
from core.warp import warp_mask
from utils.errors import ConfigError, DivergenceError, GeometryError


def _quiet(**kwargs) -> RegistrationConfig:
    kwargs.setdefault("log_every", 0)
    return RegistrationConfig(**kwargs)


def test_identical_images_stay_at_identity(smooth_volume):
    result = register_pair(smooth_volume, smooth_volume, cfg=_quiet(grid_dims=(3, 3, 3), max_iters=30, patience=3))
    assert np.all(result.field.mu == 0)
    assert result.final_terms.total == pytest.approx(0.0, abs=1e-12)
    assert result.converged
    assert result.iterations < 30
    assert np.array_equal(result.warped.data, smooth_volume.data)


def test_loss_rise_after_a_new_best_is_not_a_plateau():
    assert not plateaued([1.0, 0.6, 0.5, 0.65], tol=1e-5, patience=2)
    assert plateaued([1.0, 0.6, 0.5, 0.65, 0.7], tol=1e-5, patience=2)
    assert not plateaued([1.0, 0.6], tol=1e-5, patience=2)
    assert plateaued([0.0, 0.0, 0.0], tol=0.0, patience=2)


def test_slow_improvement_below_tolerance_is_a_plateau():
    trace = [1.0, 0.999999, 0.999998, 0.999997]
    assert plateaued(trace, tol=1e-5, patience=3)
    assert not plateaued(trace, tol=1e-7, patience=3)


def test_non_finite_term_is_named():
    with pytest.raises(DivergenceError, match="dice.*iteration 7"):
        _check_finite(LossBreakdown(1.0, 1.0, float("nan"), 0.0), 7)
    with pytest.raises(DivergenceError, match="total"):
        _check_finite(LossBreakdown(float("inf"), 1.0, 0.0, 0.0), 0)
    _check_finite(LossBreakdown(1.0, 1.0, 0.0, 0.0), 0)


@pytest.mark.parametrize("kwargs", [
    {"learning_rate": 0.0},
    {"lr_decay": 1.5},
    {"max_iters": 0},
    {"patience": 0},
    {"boundary": "wrap"},
])
def test_config_is_validated(kwargs):
    with pytest.raises(ConfigError):
        RegistrationConfig(**kwargs)


def test_grid_larger_than_image_is_rejected(smooth_volume):
    with pytest.raises(GeometryError):
        register_pair(smooth_volume, smooth_volume, cfg=_quiet(grid_dims=(9, 9, 9), max_iters=1))


def test_mismatched_images_are_rejected(smooth_volume):
    other = Volume((8, 8, 7), (1.0, 1.0, 1.0), np.zeros((8, 8, 7)))
    with pytest.raises(GeometryError):
        register_pair(smooth_volume, other, cfg=_quiet(max_iters=1))


def test_schedule_ends_on_last_stage(smooth_volume, rng):
    moving = Volume(smooth_volume.dims, smooth_volume.spacing, np.roll(smooth_volume.data, 1, axis=0))
    cfg = _quiet(schedule=((3, 3, 3), (4, 4, 4)), max_iters=3, kernel=InterpKernel("linear"))
    result = register_pair(smooth_volume, moving, cfg=cfg)
    assert result.field.grid.grid_dims == (4, 4, 4)
    assert result.iterations == 6
    assert len(result.loss_trace) == 6
    assert result.dense.dims == smooth_volume.dims


def test_bayesian_run_keeps_variances(smooth_volume, cube_mask):
    moving = Volume(smooth_volume.dims, smooth_volume.spacing, np.roll(smooth_volume.data, 1, axis=1))
    cfg = _quiet(grid_dims=(3, 3, 3), bayesian=True, max_iters=3, kernel=InterpKernel("linear"), seed=5)
    first = register_pair(smooth_volume, moving, (cube_mask, cube_mask), cfg)
    second = register_pair(smooth_volume, moving, (cube_mask, cube_mask), cfg)
    assert first.field.bayesian
    assert np.all(first.field.sigma2 > 0)
    assert first.loss_trace == second.loss_trace
    assert first.report.dice is not None


@pytest.fixture(scope="module")
def recovery_suite():
    return make_synth_pairs(10, (32, 32, 32), (5, 5, 5), 2.0, seed=11)


@pytest.mark.slow
def test_recovers_synthetic_deformations(recovery_suite):
    cfg = _quiet(grid_dims=(5, 5, 5))
    errors, identity, dice = [], [], []
    for pair in recovery_suite:
        result = register_pair(pair.fixed, pair.moving, pair.masks, cfg,
                               (pair.fixed_landmarks, pair.moving_landmarks))
        errors.append(endpoint_error(result.dense, pair.gt_dense))
        identity.append(endpoint_error(DenseField.zeros(pair.fixed.dims), pair.gt_dense))
        dice.append(dice_score(pair.fixed_mask, warp_mask(pair.moving_mask, result.dense)))
        assert min(result.loss_trace) < result.loss_trace[0]
        assert result.report.jacobian.folding_percent == 0.0
    assert np.mean(errors) < 0.5
    assert np.mean(errors) < np.mean(identity)
    assert np.mean(dice) > 0.95


@pytest.mark.slow
def test_recovers_rigid_shift():
    dims = (32, 32, 32)
    phantom = make_phantom(dims, seed=2)
    control = make_control_grid(dims, (5, 5, 5))
    shift = np.array([2.0, 0.0, 0.0]).reshape(3, 1, 1, 1)
    pair = make_pair(phantom, GriddedField(control, np.broadcast_to(shift, (3, 5, 5, 5)).copy()), seed=2)
    result = register_pair(pair.fixed, pair.moving, pair.masks, _quiet(grid_dims=(5, 5, 5)))
    assert endpoint_error(result.dense, pair.gt_dense) < 0.5


@pytest.mark.slow
def test_stronger_bending_weight_gives_smoother_fields(recovery_suite):
    bending, largest = [], []
    for lambda3 in (0.0, 1e2, 1e4):
        cfg = _quiet(grid_dims=(5, 5, 5), weights=LossWeights(lambda3=lambda3))
        results = [register_pair(p.fixed, p.moving, p.masks, cfg) for p in recovery_suite]
        bending.append(float(np.mean([bending_energy(r.dense) for r in results])))
        largest.append(max(float(np.abs(r.field.mu).max()) for r in results))
    assert bending[0] > 0.0
    assert largest[0] > 0.1
    for weaker, stronger in zip(bending, bending[1:]):
        assert stronger <= weaker + 1e-9


@pytest.mark.slow
def test_dof_sweep_single_cell():
    pairs = make_synth_pairs(1, (24, 24, 24), (4, 4, 4), 1.0, seed=4, label_noise=0.1)
    rows = dof_sweep(pairs, [(4, 4, 4)], _quiet(max_iters=3))
    assert len(rows) == 1
    row = rows[0]
    assert row.grid == (4, 4, 4)
    assert row.noise == pytest.approx(0.1)
    assert row.pairs == 1
    assert 0.0 <= row.dice <= 1.0
    assert math.isfinite(row.endpoint_error)
    assert row.to_dict()["grid"] == "4x4x4"


def test_dof_sweep_needs_input():
    with pytest.raises(ConfigError):
        dof_sweep([], [(4, 4, 4)])

