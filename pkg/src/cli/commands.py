"""
Subcommand handlers. Each takes the parsed namespace and returns a
CommandResult naming its inputs, outputs and primary output path.
"""

import argparse
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from core.gridfield import InterpKernel, load_any_field, load_field, save_dense_field, save_field, upsample
from core.gridnet import (
    AttentionSpec, EncoderSpec, GridRegNet, NetworkConfig, ProjectorSpec, TrainConfig,
    infer, load_checkpoint, select_grid, train,
)
from core.losses import LossWeights
from core.metrics import evaluate_registration, load_case_scores, paired_tests, rows_to_csv, save_report
from core.optimize import RegistrationConfig, dof_sweep, register_pair
from core.synth import load_pair, make_synth_pairs, save_pair
from core.volume import load_landmarks, load_mask, load_volume, save_mask, save_volume
from core.warp import BoundaryPolicy, warp_mask, warp_volume
from utils.errors import ConfigError
from utils.file_utils import atomic_write_text, find_pair_dirs
from utils.log_utils import get_logger

logger = get_logger(__name__)


@dataclass
class CommandResult:
    primary: str
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    summary: str = ""


def _kernel(args: argparse.Namespace) -> InterpKernel:
    return InterpKernel(args.kernel, args.gaussian_sigma)


def _weights(args: argparse.Namespace) -> LossWeights:
    return LossWeights(
        lambda0=args.lambda0,
        lambda1=args.lambda1,
        lambda2=args.lambda2,
        lambda3=args.lambda3,
        lambda_grid=args.lambda_grid,
        epsilon=args.epsilon,
        mc_samples=args.mc_samples,
    )


def _optional_pair(first: Optional[str], second: Optional[str], what: str) -> bool:
    if bool(first) != bool(second):
        raise ConfigError(f"{what} must be given for both fixed and moving, or neither")
    return bool(first)


def _paths(**paths: Optional[str]) -> Dict[str, str]:
    return {k: v for k, v in paths.items() if v}


def _load_pairs(root: str) -> List:
    dirs = find_pair_dirs(root)
    if not dirs:
        raise ConfigError(f"no pair directories found under {root}")
    logger.info(f"📂 Loading {len(dirs)} pairs from {root}")
    return [load_pair(d) for d in dirs]


# ---------------------------------------------------------------------------
# Handlers
# ---------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> CommandResult:
    pairs = make_synth_pairs(args.count, args.dims, args.grid, args.max_disp, args.seed,
                             args.intensity_noise, args.label_noise, _kernel(args))
    os.makedirs(args.out, exist_ok=True)
    outputs = {}
    for index, pair in enumerate(pairs):
        directory = os.path.join(args.out, f"pair_{index:03d}")
        save_pair(pair, directory)
        outputs[f"pair_{index:03d}"] = directory
    return CommandResult(args.out, outputs=outputs, summary=f"Wrote {len(pairs)} pairs to {args.out}")


def cmd_register(args: argparse.Namespace) -> CommandResult:
    fixed = load_volume(args.fixed, normalize=args.normalize)
    moving = load_volume(args.moving, normalize=args.normalize)
    masks = None
    if _optional_pair(args.fixed_mask, args.moving_mask, "masks"):
        masks = (load_mask(args.fixed_mask, binarize=False), load_mask(args.moving_mask, binarize=False))
    landmarks = None
    if _optional_pair(args.fixed_landmarks, args.moving_landmarks, "landmarks"):
        landmarks = (load_landmarks(args.fixed_landmarks, fixed.dims), load_landmarks(args.moving_landmarks, fixed.dims))

    cfg = RegistrationConfig(
        grid_dims=args.grid,
        kernel=_kernel(args),
        bayesian=args.bayesian,
        weights=_weights(args),
        learning_rate=args.lr,
        lr_decay=args.lr_decay,
        max_iters=args.iters,
        tol=args.tol,
        seed=args.seed,
        boundary=args.boundary,
        schedule=tuple(args.schedule or ()),
    )
    result = register_pair(fixed, moving, masks, cfg, landmarks)

    save_field(result.field, args.out_field)
    if args.out_warped:
        save_volume(result.warped, args.out_warped)
    if args.out_dense:
        save_dense_field(result.dense, args.out_dense)
    if args.report:
        save_report(result.report, args.report, args.report_format)

    dice = f", dice {result.report.dice:.4f}" if result.report.dice is not None else ""
    return CommandResult(
        args.out_field,
        inputs=_paths(fixed=args.fixed, moving=args.moving, fixed_mask=args.fixed_mask, moving_mask=args.moving_mask,
                      fixed_landmarks=args.fixed_landmarks, moving_landmarks=args.moving_landmarks),
        outputs=_paths(field=args.out_field, warped=args.out_warped, dense=args.out_dense, report=args.report),
        summary=f"Registered in {result.iterations} iterations{dice}",
    )


def cmd_train(args: argparse.Namespace) -> CommandResult:
    pairs = _load_pairs(args.data)
    validation = _load_pairs(args.val_data) if args.val_data else None
    net = GridRegNet(NetworkConfig(
        image_dims=pairs[0].fixed.dims,
        encoder=EncoderSpec(levels=args.levels, base_channels=args.base_channels),
        projector=ProjectorSpec(enabled=args.projector),
        attention=AttentionSpec(heads=args.heads, head_dim=args.head_dim, decoder_channels=args.decoder_channels),
        bayesian=args.bayesian,
        kernel=_kernel(args),
        seed=args.seed,
    ))
    cfg = TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        max_steps=args.max_steps,
        grid_set=tuple(args.grids),
        weights=_weights(args),
        seed=args.seed,
        checkpoint=args.checkpoint,
    )
    result = train(pairs, cfg, net, validation)

    if args.report:
        rows = [{"epoch": epoch, "validation_loss": loss} for epoch, loss in enumerate(result.validation_losses)]
        save_report(rows, args.report, args.report_format)
    return CommandResult(
        args.checkpoint,
        inputs=_paths(data=args.data, val_data=args.val_data),
        outputs=_paths(checkpoint=args.checkpoint, report=args.report),
        summary=f"Trained {result.steps} steps, validation loss "
                f"{result.validation_losses[0]:.6g} → {result.validation_losses[-1]:.6g}",
    )


def cmd_infer(args: argparse.Namespace) -> CommandResult:
    net = load_checkpoint(args.checkpoint)
    fixed = load_volume(args.fixed)
    moving = load_volume(args.moving)
    result = infer(net, fixed, moving, args.grid, BoundaryPolicy.parse(args.boundary))
    save_field(result.field, args.out_field)
    if args.out_warped:
        save_volume(result.warped, args.out_warped)
    if args.out_sigma:
        if result.sigma2 is None:
            raise ConfigError("--out-sigma needs a Bayesian checkpoint")
        save_volume(result.sigma2, args.out_sigma)
    return CommandResult(
        args.out_field,
        inputs=_paths(checkpoint=args.checkpoint, fixed=args.fixed, moving=args.moving),
        outputs=_paths(field=args.out_field, warped=args.out_warped, sigma=args.out_sigma),
        summary=f"Predicted a {result.field.grid.grid_dims} field",
    )


def cmd_select_grid(args: argparse.Namespace) -> CommandResult:
    if not args.report:
        raise ConfigError("select-grid needs --report")
    net = load_checkpoint(args.checkpoint)
    pairs = _load_pairs(args.data)
    selection = select_grid(net, pairs, args.grids, _weights(args))
    rows = [{"grid": "x".join(str(g) for g in r["grid"]), "dice": r["dice"], "loss": r["loss"],
             "chosen": r["grid"] == selection.chosen} for r in selection.rows]
    save_report(rows, args.report, args.report_format)
    return CommandResult(
        args.report,
        inputs=_paths(checkpoint=args.checkpoint, data=args.data),
        outputs=_paths(report=args.report),
        summary=f"Selected grid {selection.chosen}",
    )


def cmd_warp(args: argparse.Namespace) -> CommandResult:
    policy = BoundaryPolicy.parse(args.boundary)
    dense = load_any_field(args.field, _kernel(args))
    if args.mask:
        save_mask(warp_mask(load_mask(args.moving), dense, policy), args.out)
    else:
        save_volume(warp_volume(load_volume(args.moving), dense, policy), args.out)
    return CommandResult(args.out, inputs=_paths(moving=args.moving, field=args.field), outputs=_paths(warped=args.out))


def cmd_upsample(args: argparse.Namespace) -> CommandResult:
    gridded = load_field(args.field)
    dense = upsample(gridded, gridded.grid.image_dims, _kernel(args))
    save_dense_field(dense, args.out)
    return CommandResult(args.out, inputs=_paths(field=args.field), outputs=_paths(dense=args.out),
                         summary=f"Upsampled {gridded.grid.grid_dims} → {dense.dims}")


def cmd_eval(args: argparse.Namespace) -> CommandResult:
    if not args.report:
        raise ConfigError("eval needs --report")
    dense = load_any_field(args.field, _kernel(args))
    fixed_mask = warped_mask = None
    spacing = args.spacing
    if _optional_pair(args.fixed_mask, args.moving_mask, "masks"):
        fixed_mask = load_mask(args.fixed_mask)
        warped_mask = warp_mask(load_mask(args.moving_mask), dense)
        spacing = spacing or fixed_mask.spacing
    landmarks: Tuple = (None, None)
    if _optional_pair(args.fixed_landmarks, args.moving_landmarks, "landmarks"):
        landmarks = (load_landmarks(args.fixed_landmarks, dense.dims), load_landmarks(args.moving_landmarks, dense.dims))
    report = evaluate_registration(dense, fixed_mask, warped_mask, landmarks[0], landmarks[1],
                                   spacing or (1.0, 1.0, 1.0))
    save_report(report, args.report, args.report_format)
    return CommandResult(
        args.report,
        inputs=_paths(field=args.field, fixed_mask=args.fixed_mask, moving_mask=args.moving_mask,
                      fixed_landmarks=args.fixed_landmarks, moving_landmarks=args.moving_landmarks),
        outputs=_paths(report=args.report),
        summary=f"Folding {report.jacobian.folding_percent:.3f}%",
    )


def cmd_stats(args: argparse.Namespace) -> CommandResult:
    if not args.report:
        raise ConfigError("stats needs --report")
    baseline = load_case_scores(args.baseline)
    lower = set(args.lower_better)

    def oriented(scores: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        return {m: (-v if m in lower else v) for m, v in scores.items()}

    scores_a: Dict[str, np.ndarray] = {}
    scores_b: Dict[str, np.ndarray] = {}
    families: Dict[str, str] = {}
    inputs = {"baseline": args.baseline}
    for item in args.method:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise ConfigError(f"--method expects NAME=CSV, got {item!r}")
        inputs[name] = path
        method = oriented(load_case_scores(path))
        base = oriented(baseline)
        for metric in sorted(set(method) & set(base)):
            key = f"{name}:{metric}"
            scores_a[key], scores_b[key], families[key] = method[metric], base[metric], metric
    if not scores_a:
        raise ConfigError("no metric columns shared between the baseline and the methods")

    tests = paired_tests(scores_a, scores_b, families, args.alternative, args.alpha)
    save_report(tests, args.report, args.report_format)
    significant = sum(t.reject for t in tests)
    return CommandResult(args.report, inputs=inputs, outputs=_paths(report=args.report),
                         summary=f"{significant}/{len(tests)} comparisons significant at FDR {args.alpha}")


def cmd_dof_sweep(args: argparse.Namespace) -> CommandResult:
    grids = [g for g in args.grids if not isinstance(g, str)]
    if len(grids) != len(args.grids):
        raise ConfigError("dof-sweep takes explicit grid sizes only")
    kernel = _kernel(args)
    cfg = RegistrationConfig(
        kernel=kernel,
        bayesian=args.bayesian,
        weights=_weights(args),
        learning_rate=args.lr,
        lr_decay=args.lr_decay,
        max_iters=args.iters,
        tol=args.tol,
        seed=args.seed,
        boundary=args.boundary,
        log_every=0,
    )
    rows = []
    for noise in args.noise:
        pairs = make_synth_pairs(args.pairs, args.dims, args.gt_grid, args.max_disp, args.seed,
                                 args.intensity_noise, noise, kernel)
        noise_rows = dof_sweep(pairs, grids, cfg, noise, workers=args.threads)
        best = max(noise_rows, key=lambda r: r.dice)
        logger.info(f"📊 label noise {noise}: best Dice {best.dice:.4f} at grid {best.grid}")
        rows.extend(noise_rows)

    atomic_write_text(args.out, rows_to_csv([r.to_dict() for r in rows]))
    if args.report:
        save_report([r.to_dict() for r in rows], args.report, args.report_format)
    return CommandResult(args.out, outputs=_paths(table=args.out, report=args.report),
                         summary=f"Wrote {len(rows)} rows to {args.out}")
