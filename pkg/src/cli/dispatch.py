"""
Command-line entry point: argument parsing, config-file merging, exit codes
and the run manifest written next to each command's primary output.
"""

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from cli import __version__
from cli import commands
from utils.errors import ConfigError, GridRegError
from utils.file_utils import atomic_write_json, read_json
from utils.log_utils import configure_logging, get_logger

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

KERNEL_CHOICES = ("trilinear", "bspline", "gaussian")
MANIFEST_SKIP_KEYS = ("command", "config")


# ---------------------------------------------------------------------------
# Argument types
# ---------------------------------------------------------------------------

def parse_triple(text: str, kind=int):
    parts = [p for p in str(text).replace("x", ",").split(",") if p.strip()]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
    try:
        return tuple(kind(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid values in {text!r}") from None


def parse_grid(text: str):
    """`g,g,g` with every g ≥ 2."""
    dims = parse_triple(text)
    if any(g < 2 for g in dims):
        raise argparse.ArgumentTypeError(f"grid_dim must be ≥ 2, got {text}")
    return dims


def parse_grid_or_dense(text: str):
    if text.strip().lower() == "dense":
        return "dense"
    return parse_grid(text)


def parse_grid_list(text: str) -> List:
    """
    Grid list: isotropic sizes `5,8,10,15`, explicit triples `5x5x5,8x8x4`, or
    `dense` entries, comma separated.
    """
    grids = []
    for item in (p.strip() for p in text.split(",") if p.strip()):
        if item.lower() == "dense":
            grids.append("dense")
        elif "x" in item:
            grids.append(parse_grid(item))
        else:
            grids.append(parse_grid(f"{item},{item},{item}"))
    if not grids:
        raise argparse.ArgumentTypeError("grid list must not be empty")
    return grids


def parse_schedule(text: str) -> List:
    stages = parse_grid_list(text)
    if any(isinstance(s, str) for s in stages):
        raise argparse.ArgumentTypeError("schedules take explicit grid sizes only")
    return stages


def parse_float_list(text: str) -> List[float]:
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid number list {text!r}") from None


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _common_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--seed", type=int, default=0, help="Run seed for every random stream (default: 0)")
    parent.add_argument("--threads", type=positive_int, default=1, help="Worker threads where supported (default: 1)")
    parent.add_argument("--config", help="JSON file of flag defaults; explicit flags win")
    parent.add_argument("--report", help="Write a report to this path")
    parent.add_argument("--report-format", choices=("json", "csv"), default="json",
                        help="Report format (default: json)")
    verbosity = parent.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    verbosity.add_argument("--quiet", action="store_true", help="Warnings and errors only")
    return parent


def _add_kernel(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kernel", "--upsample", dest="kernel", choices=KERNEL_CHOICES, default="trilinear",
                   help="Upsampling kernel (default: trilinear)")
    p.add_argument("--gaussian-sigma", type=float, default=0.5,
                   help="Gaussian kernel width in control cells (default: 0.5)")


def _add_weights(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda0", type=float, default=0.5, help="Uncertainty penalty λ0 (default: 0.5)")
    p.add_argument("--lambda1", type=float, default=1.0, help="Similarity weight λ1 (default: 1.0)")
    p.add_argument("--lambda2", type=float, default=1.0, help="Dice weight λ2, used when masks exist (default: 1.0)")
    p.add_argument("--lambda3", type=float, default=0.1, help="Bending-energy weight λ3 (default: 0.1)")
    p.add_argument("--lambda-grid", type=float, default=0.0, help="Grid-level similarity weight (default: 0)")
    p.add_argument("--epsilon", type=float, default=1e-5, help="Dice smoothing ε (default: 1e-5)")
    p.add_argument("--mc-samples", type=positive_int, default=4, help="Monte-Carlo samples S (default: 4)")


def _add_optimizer(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iters", type=positive_int, default=200, help="Max iterations per stage (default: 200)")
    p.add_argument("--lr", type=float, default=0.1, help="Adam step size in voxels (default: 0.1)")
    p.add_argument("--lr-decay", type=float, default=0.99, help="Per-iteration step decay (default: 0.99)")
    p.add_argument("--tol", type=float, default=1e-5, help="Relative improvement of the best loss required within 10 iterations")
    p.add_argument("--bayesian", action="store_true", help="Optimise variances too (uncertainty loss)")
    p.add_argument("--boundary", choices=("clamp", "zero"), default="clamp", help="Warp boundary (default: clamp)")


def _add_network(p: argparse.ArgumentParser) -> None:
    p.add_argument("--levels", type=positive_int, default=3, help="Encoder levels L (default: 3)")
    p.add_argument("--base-channels", type=positive_int, default=16, help="Base channels C (default: 16)")
    p.add_argument("--heads", type=positive_int, default=4, help="Attention heads H (default: 4)")
    p.add_argument("--head-dim", type=positive_int, default=16, help="Per-head width d (default: 16)")
    p.add_argument("--decoder-channels", type=positive_int, default=64, help="Decoder channels (default: 64)")
    p.add_argument("--no-projector", dest="projector", action="store_false",
                   help="Take tokens from the coarsest encoder map only")
    p.add_argument("--no-bayesian", dest="bayesian", action="store_false", help="Predict means only")


EPILOG = """
Examples:
  # Generate 10 synthetic 32³ pairs with ground truth from a 5³ grid
  python scripts/gridreg.py synth --out data/synth --count 10 --grid 5,5,5 --max-disp 2

  # Register one pair and write the field, warped image and a metric report
  python scripts/gridreg.py register --fixed data/synth/pair_000/fixed --moving data/synth/pair_000/moving \\
    --fixed-mask data/synth/pair_000/fixed_mask --moving-mask data/synth/pair_000/moving_mask \\
    --grid 5,5,5 --kernel trilinear --out-field out/field --out-warped out/warped --report out/metrics.json

  # Degrees-of-freedom sweep over grids and label-noise levels
  python scripts/gridreg.py dof-sweep --grids 5,8,10,15 --noise 0,0.1,0.3 --out out/dof.csv

  # Grid-adaptive training, then grid selection on validation pairs
  python scripts/gridreg.py train --data data/synth --checkpoint out/net --epochs 5
  python scripts/gridreg.py select-grid --checkpoint out/net --data data/val --grids 5,8,10,15 --report out/grids.csv --report-format csv
"""


def build_parsers() -> Tuple[argparse.ArgumentParser, Dict[str, argparse.ArgumentParser]]:
    """The top-level parser and its subcommand parsers by name."""
    parser = argparse.ArgumentParser(
        prog="gridreg",
        description="Sparse control-grid deformable image registration",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=EPILOG,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    common = _common_parent()
    subparsers: Dict[str, argparse.ArgumentParser] = {}

    def add(name, handler, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(handler=handler)
        subparsers[name] = p
        return p

    p = add("synth", commands.cmd_synth, "Generate synthetic pairs with ground-truth deformations")
    p.add_argument("--out", required=True, help="Output dataset directory")
    p.add_argument("--count", type=positive_int, default=1, help="Number of pairs (default: 1)")
    p.add_argument("--dims", type=parse_triple, default=(32, 32, 32), help="Volume dims W,H,D (default: 32,32,32)")
    p.add_argument("--grid", type=parse_grid, default=(5, 5, 5), help="Ground-truth grid g,g,g (default: 5,5,5)")
    p.add_argument("--max-disp", type=float, default=2.0, help="Max control displacement in voxels (default: 2)")
    p.add_argument("--intensity-noise", type=float, default=0.0, help="Gaussian intensity noise σ_n")
    p.add_argument("--label-noise", type=float, default=0.0, help="Fraction of mask boundary voxels flipped")
    _add_kernel(p)

    p = add("register", commands.cmd_register, "Register a moving volume onto a fixed volume")
    p.add_argument("--fixed", required=True, help="Fixed volume")
    p.add_argument("--moving", required=True, help="Moving volume")
    p.add_argument("--fixed-mask", help="Fixed mask (enables Dice with --moving-mask)")
    p.add_argument("--moving-mask", help="Moving mask")
    p.add_argument("--fixed-landmarks", help="Fixed landmark CSV (for the report)")
    p.add_argument("--moving-landmarks", help="Moving landmark CSV (for the report)")
    p.add_argument("--normalize", action="store_true", help="Min-max rescale each volume to [0, 1]")
    p.add_argument("--grid", type=parse_grid, default=(5, 5, 5), help="Control grid g,g,g (default: 5,5,5)")
    p.add_argument("--schedule", type=parse_schedule, help="Coarse-to-fine grids, e.g. 5,10")
    p.add_argument("--out-field", required=True, help="Output gridded field")
    p.add_argument("--out-warped", help="Output warped moving volume")
    p.add_argument("--out-dense", help="Output dense displacement field")
    _add_kernel(p)
    _add_optimizer(p)
    _add_weights(p)

    p = add("train", commands.cmd_train, "Train the grid network on synthetic pairs")
    p.add_argument("--data", required=True, help="Dataset directory of pair folders")
    p.add_argument("--val-data", help="Validation dataset directory (default: training data)")
    p.add_argument("--checkpoint", required=True, help="Output checkpoint")
    p.add_argument("--grids", type=parse_grid_list, default=[(5, 5, 5), (8, 8, 8), (10, 10, 10), (15, 15, 15)],
                   help="Grid set sampled per step (default: 5,8,10,15)")
    p.add_argument("--epochs", type=positive_int, default=10, help="Epochs (default: 10)")
    p.add_argument("--batch-size", type=positive_int, default=4, help="Batch size (default: 4)")
    p.add_argument("--lr", type=float, default=1e-4, help="Learning rate (default: 1e-4)")
    p.add_argument("--max-steps", type=positive_int, help="Stop after this many steps")
    _add_network(p)
    _add_kernel(p)
    _add_weights(p)

    p = add("infer", commands.cmd_infer, "Predict a field with a trained checkpoint")
    p.add_argument("--checkpoint", required=True, help="Checkpoint")
    p.add_argument("--fixed", required=True, help="Fixed volume")
    p.add_argument("--moving", required=True, help="Moving volume")
    p.add_argument("--grid", type=parse_grid_or_dense, default=(5, 5, 5), help="Control grid or 'dense'")
    p.add_argument("--out-field", required=True, help="Output gridded field")
    p.add_argument("--out-warped", help="Output warped moving volume (mean field)")
    p.add_argument("--out-sigma", help="Output dense variance map (Bayesian checkpoints)")
    p.add_argument("--boundary", choices=("clamp", "zero"), default="clamp", help="Warp boundary (default: clamp)")

    p = add("select-grid", commands.cmd_select_grid, "Choose the grid size with the best validation Dice")
    p.add_argument("--checkpoint", required=True, help="Checkpoint")
    p.add_argument("--data", required=True, help="Validation dataset directory")
    p.add_argument("--grids", type=parse_grid_list, default=[(5, 5, 5), (8, 8, 8), (10, 10, 10), (15, 15, 15)],
                   help="Candidate grids (default: 5,8,10,15)")
    _add_weights(p)

    p = add("warp", commands.cmd_warp, "Warp a volume or mask by a field")
    p.add_argument("--moving", required=True, help="Volume (or mask with --mask)")
    p.add_argument("--field", required=True, help="Gridded or dense field")
    p.add_argument("--out", required=True, help="Output volume")
    p.add_argument("--mask", action="store_true", help="Treat the input as a mask")
    p.add_argument("--boundary", choices=("clamp", "zero"), default="clamp", help="Warp boundary (default: clamp)")
    _add_kernel(p)

    p = add("upsample", commands.cmd_upsample, "Upsample a gridded field to a dense field")
    p.add_argument("--field", required=True, help="Gridded field")
    p.add_argument("--out", required=True, help="Output dense field")
    _add_kernel(p)

    p = add("eval", commands.cmd_eval, "Compute the metric report for a registration")
    p.add_argument("--field", required=True, help="Gridded or dense field")
    p.add_argument("--fixed-mask", help="Fixed mask")
    p.add_argument("--moving-mask", help="Moving mask")
    p.add_argument("--fixed-landmarks", help="Fixed landmark CSV")
    p.add_argument("--moving-landmarks", help="Moving landmark CSV")
    p.add_argument("--spacing", type=lambda t: parse_triple(t, float), help="Voxel spacing in mm")
    _add_kernel(p)

    p = add("stats", commands.cmd_stats, "Paired t-tests with BH-FDR per metric family")
    p.add_argument("--baseline", required=True, help="Per-case CSV of the reference method")
    p.add_argument("--method", action="append", required=True, metavar="NAME=CSV",
                   help="Per-case CSV of a compared method (repeatable)")
    p.add_argument("--lower-better", action="append", default=[], metavar="METRIC",
                   help="Metric where smaller is better (repeatable)")
    p.add_argument("--alternative", choices=("greater", "two-sided"), default="greater",
                   help="greater = method better than baseline (default)")
    p.add_argument("--alpha", type=float, default=0.05, help="FDR level (default: 0.05)")

    p = add("dof-sweep", commands.cmd_dof_sweep, "Accuracy versus grid size and label noise on synthetic pairs")
    p.add_argument("--grids", type=parse_grid_list, default=[(5, 5, 5), (8, 8, 8), (10, 10, 10), (15, 15, 15)],
                   help="Grids to compare (default: 5,8,10,15)")
    p.add_argument("--noise", type=parse_float_list, default=[0.0], help="Label-noise levels, comma separated")
    p.add_argument("--pairs", type=positive_int, default=5, help="Pairs per noise level (default: 5)")
    p.add_argument("--dims", type=parse_triple, default=(32, 32, 32), help="Volume dims (default: 32,32,32)")
    p.add_argument("--gt-grid", type=parse_grid, default=(5, 5, 5), help="Ground-truth grid (default: 5,5,5)")
    p.add_argument("--max-disp", type=float, default=2.0, help="Ground-truth max displacement (default: 2)")
    p.add_argument("--intensity-noise", type=float, default=0.0, help="Gaussian intensity noise σ_n")
    p.add_argument("--out", required=True, help="Output CSV table")
    _add_kernel(p)
    _add_optimizer(p)
    _add_weights(p)
    return parser, subparsers


def build_parser() -> argparse.ArgumentParser:
    return build_parsers()[0]


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    subcommand: str
    config: Dict[str, object]
    seed: int
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    version: str = __version__
    seconds: float = 0.0


def manifest_path(primary: str) -> str:
    if os.path.isdir(primary):
        return os.path.join(primary, "run.manifest.json")
    base, ext = os.path.splitext(primary)
    return (base if ext.lower() in (".json", ".raw", ".csv") else primary) + ".manifest.json"


def _config_values(values: object, command: str, path: str) -> Dict[str, object]:
    """Flag values from a plain config object or from a RunManifest of the same subcommand."""
    if not isinstance(values, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    if "subcommand" in values and isinstance(values.get("config"), dict):
        if values["subcommand"] != command:
            raise ConfigError(f"{path} is a manifest of '{values['subcommand']}', not '{command}'")
        return {k: v for k, v in values["config"].items() if k not in MANIFEST_SKIP_KEYS}
    return values


def _apply_config(subparsers: Dict[str, argparse.ArgumentParser], argv: Sequence[str]) -> None:
    """Install `--config` JSON values as defaults of the chosen subcommand."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config or known.command not in subparsers:
        return
    sub = subparsers[known.command]
    values = _config_values(read_json(known.config), known.command, known.config)
    values = {k.replace("-", "_"): v for k, v in values.items()}
    valid = {a.dest for a in sub._actions}
    unknown = sorted(k for k in values if k not in valid)
    if unknown:
        raise ConfigError(f"unknown keys in {known.config}: {', '.join(unknown)}")
    for action in sub._actions:
        if action.dest in values and values[action.dest] is not None:
            action.required = False
    sub.set_defaults(**values)


def _resolved_config(args: argparse.Namespace) -> Dict[str, object]:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("handler",)}


def _echo_settings(args: argparse.Namespace) -> None:
    print(f"🔄 Running {args.command}...")
    for key, value in _resolved_config(args).items():
        if key in ("command", "config") or value is None or value is False:
            continue
        print(f"   {key.replace('_', ' ').capitalize()}: {value}")
    print()


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse `argv`, run the subcommand and write its RunManifest.

    Returns:
        0 on success, 2 on usage or configuration errors, 1 on runtime errors
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subparsers = build_parsers()
    try:
        _apply_config(subparsers, argv)
        args, extras = parser.parse_known_args(argv)
        if extras:
            sub = subparsers[args.command]
            flags = sorted(s for a in sub._actions for s in a.option_strings if s.startswith("--"))
            sub.error(f"unrecognized arguments: {' '.join(extras)}\nvalid flags: {', '.join(flags)}")
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    configure_logging(level)
    if not args.quiet:
        _echo_settings(args)

    started = time.time()
    try:
        result = args.handler(args)
    except ConfigError as e:
        print(f"❌ Invalid configuration: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (GridRegError, OSError, ValueError) as e:
        print(f"❌ {args.command} failed: {e}", file=sys.stderr)
        logger.debug("traceback", exc_info=True)
        return EXIT_RUNTIME

    manifest = RunManifest(
        subcommand=args.command,
        config=_resolved_config(args),
        seed=args.seed,
        inputs=result.inputs,
        outputs=result.outputs,
        seconds=round(time.time() - started, 3),
    )
    path = manifest_path(result.primary)
    atomic_write_json(path, asdict(manifest))
    if not args.quiet:
        print(f"✅ {result.summary or args.command + ' completed'}")
        print(f"   Manifest: {path}")
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())
