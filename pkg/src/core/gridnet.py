"""
Toy-scale grid registration network.

A strided-conv encoder produces L feature maps. Each map is projected to the
same N_p tokens of width C_p. A cross-attention decoder turns one query per
control point (a positional encoding of its normalized coordinate plus a
grid-size embedding) into a mean displacement and, optionally, a raw variance.
No weight shape depends on the control-grid size, so one set of weights runs at
any grid.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core import autodiff as ad
from core.autodiff import Parameter, Tape
from core.gridfield import (
    ControlGrid,
    DenseField,
    GriddedField,
    InterpKernel,
    make_control_grid,
    upsample,
    upsample_sigma2,
)
from core.losses import LossWeights, draw_noise, loss_and_gradient, total_loss
from core.metrics import dice_score
from core.optim import Adam
from core.volume import Volume
from core.warp import BoundaryPolicy, warp_mask, warp_volume
from utils.errors import ConfigError, DivergenceError, GeometryError, ShapeError, VolumeFormatError
from utils.file_utils import atomic_write_bytes, atomic_write_text, read_json, split_pair_path
from utils.log_utils import get_logger
from utils.rng import make_rng

logger = get_logger(__name__)

DENSE = "dense"
DEFAULT_GRID_SET = ((5, 5, 5), (8, 8, 8), (10, 10, 10), (15, 15, 15))
CHECKPOINT_FORMAT = "gridreg-checkpoint/1"
GRID_EMBED_SCALE = 16.0

GridSpec = Union[str, Sequence[int]]


@dataclass(frozen=True)
class EncoderSpec:
    levels: int = 3
    base_channels: int = 16
    in_channels: int = 2

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError(f"encoder levels must be ≥ 1, got {self.levels}")
        if self.base_channels < 1:
            raise ConfigError(f"base channels must be ≥ 1, got {self.base_channels}")

    def channels(self, level: int) -> int:
        """Output channels of encoder level `level` (1-based)."""
        return self.base_channels * 2 ** (level - 1)

    def check_dims(self, dims: Sequence[int]) -> None:
        factor = 2 ** self.levels
        if any(d % factor for d in dims):
            raise GeometryError(f"input dims {tuple(dims)} must be divisible by 2^{self.levels} = {factor}")


@dataclass(frozen=True)
class ProjectorSpec:
    enabled: bool = True
    width: Optional[int] = None

    def token_width(self, encoder: EncoderSpec) -> int:
        return self.width or 8 * encoder.base_channels


@dataclass(frozen=True)
class AttentionSpec:
    heads: int = 4
    head_dim: int = 16
    decoder_channels: int = 64

    def __post_init__(self):
        if self.heads < 1 or self.head_dim < 1 or self.decoder_channels < 1:
            raise ConfigError(f"attention sizes must be ≥ 1, got {self}")

    @property
    def inner(self) -> int:
        return self.heads * self.head_dim


@dataclass(frozen=True)
class NetworkConfig:
    image_dims: Tuple[int, int, int] = (32, 32, 32)
    encoder: EncoderSpec = EncoderSpec()
    projector: ProjectorSpec = ProjectorSpec()
    attention: AttentionSpec = AttentionSpec()
    pe_frequencies: int = 8
    bayesian: bool = True
    zero_head: bool = True
    kernel: InterpKernel = InterpKernel()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_dims", tuple(int(d) for d in self.image_dims))
        self.encoder.check_dims(self.image_dims)
        if self.pe_frequencies < 1:
            raise ConfigError(f"pe_frequencies must be ≥ 1, got {self.pe_frequencies}")

    @property
    def token_dims(self) -> Tuple[int, int, int]:
        return tuple(d // 2 ** self.encoder.levels for d in self.image_dims)

    @property
    def decoder_levels(self) -> Tuple[int, ...]:
        """Encoder levels feeding the decoder, coarsest first."""
        if not self.projector.enabled:
            return (self.encoder.levels,)
        return tuple(range(self.encoder.levels, 0, -1))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["kernel"] = {"kind": self.kernel.kind, "sigma": self.kernel.sigma}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        return cls(
            image_dims=tuple(data["image_dims"]),
            encoder=EncoderSpec(**data["encoder"]),
            projector=ProjectorSpec(**data["projector"]),
            attention=AttentionSpec(**data["attention"]),
            pe_frequencies=data["pe_frequencies"],
            bayesian=data["bayesian"],
            zero_head=data["zero_head"],
            kernel=InterpKernel(data["kernel"]["kind"], data["kernel"]["sigma"]),
            seed=data["seed"],
        )


def resolve_grid(spec: GridSpec, config: NetworkConfig) -> Tuple[int, int, int]:
    """Turn a grid spec into dims; "dense" means the first encoder feature-map size."""
    if isinstance(spec, str):
        if spec.lower() != DENSE:
            raise ConfigError(f"grid spec must be g,g,g or {DENSE!r}, got {spec!r}")
        return tuple(d // 2 for d in config.image_dims)
    return tuple(int(g) for g in spec)


class PosEncoding:
    """Sinusoidal encodings of normalized control coordinates, cached per grid size."""

    def __init__(self, frequencies: int = 8):
        self.frequencies = frequencies
        self.computations = 0
        self._cache: Dict[Tuple[int, int, int], np.ndarray] = {}

    @property
    def channels(self) -> int:
        return 6 * self.frequencies

    @property
    def query_width(self) -> int:
        return 2 * self.channels

    def sinusoid(self, t: np.ndarray) -> np.ndarray:
        """(n, 3) values → (n, 6F) sin/cos features at frequencies π·2^k."""
        t = np.atleast_2d(np.asarray(t, dtype=np.float64))
        angles = t[:, :, None] * (np.pi * 2.0 ** np.arange(self.frequencies))
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=2).reshape(t.shape[0], -1)

    def queries(self, grid_dims: Sequence[int]) -> np.ndarray:
        """(G, 12F) read-only queries: ψ(R) followed by φ(g_w, g_h, g_d)."""
        key = tuple(int(g) for g in grid_dims)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        axes = np.meshgrid(*(np.linspace(0.0, 1.0, g) for g in key), indexing="ij")
        coords = np.stack([a.ravel() for a in axes], axis=1)
        psi = self.sinusoid(coords)
        phi = np.broadcast_to(self.sinusoid(np.asarray(key) / GRID_EMBED_SCALE), psi.shape)
        queries = np.concatenate([psi, phi], axis=1)
        queries.setflags(write=False)
        self._cache[key] = queries
        self.computations += 1
        return queries


def attend(tape: Tape, queries: ad.TapeNode, tokens: ad.TapeNode, w_q, w_k, w_v, w_o,
           heads: int, head_dim: int) -> Tuple[ad.TapeNode, List[ad.TapeNode]]:
    """Multi-head scaled dot-product cross-attention on the tape."""
    q = ad.matmul(tape, queries, w_q)
    k = ad.matmul(tape, tokens, w_k)
    v = ad.matmul(tape, tokens, w_v)
    outputs, weights = [], []
    for h in range(heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        logits = ad.matmul(tape, ad.columns(tape, q, lo, hi), ad.transpose(tape, ad.columns(tape, k, lo, hi)))
        attn = ad.softmax_rows(tape, ad.scale(tape, logits, 1.0 / math.sqrt(head_dim)))
        weights.append(attn)
        outputs.append(ad.matmul(tape, attn, ad.columns(tape, v, lo, hi)))
    merged = outputs[0] if heads == 1 else ad.concat_channels(tape, outputs, axis=-1)
    return ad.matmul(tape, merged, w_o), weights


def cross_attention(queries: np.ndarray, tokens: np.ndarray, w_q: np.ndarray, w_k: np.ndarray,
                    w_v: np.ndarray, w_o: np.ndarray, spec: AttentionSpec, return_weights: bool = False):
    """
    softmax(Q_h K_hᵀ/√d) V_h per head, concatenated and projected by W_O.

    Args:
        queries: (G, C_q)
        tokens: (N_p, C_t)
        w_q: (C_q, H·d); w_k, w_v: (C_t, H·d); w_o: (H·d, C_out)
        spec: Head count and width
        return_weights: Also return the per-head (G, N_p) attention matrices

    Returns:
        (G, C_out) array, optionally with the attention matrices
    """
    inner = spec.inner
    if w_q.shape != (queries.shape[1], inner):
        raise ShapeError(f"W_Q {w_q.shape} does not match query width {queries.shape[1]} and H·d={inner}")
    for name, w in (("W_K", w_k), ("W_V", w_v)):
        if w.shape != (tokens.shape[1], inner):
            raise ShapeError(f"{name} {w.shape} does not match token width {tokens.shape[1]} and H·d={inner}")
    if w_o.shape[0] != inner:
        raise ShapeError(f"W_O {w_o.shape} does not match H·d={inner}")
    tape = Tape(np.float64)
    out, weights = attend(tape, tape.constant(queries), tape.constant(tokens), tape.constant(w_q),
                          tape.constant(w_k), tape.constant(w_v), tape.constant(w_o), spec.heads, spec.head_dim)
    if return_weights:
        return out.value, [w.value for w in weights]
    return out.value


class GridRegNet:
    """Encoder, projectors and cross-attention decoder with named parameters."""

    def __init__(self, config: NetworkConfig = NetworkConfig(), initialize: bool = True):
        self.config = config
        self.pe = PosEncoding(config.pe_frequencies)
        self.params: Dict[str, Parameter] = {}
        self._build()
        if initialize:
            for index, p in enumerate(self.params.values()):
                p.initialize(make_rng(config.seed, "gridnet.init", index))

    def _add(self, name: str, shape, init: str, fan_in: Optional[int] = None) -> None:
        self.params[name] = Parameter(name, shape, init, fan_in=fan_in)

    def _build(self) -> None:
        cfg = self.config
        enc, att = cfg.encoder, cfg.attention
        width = cfg.projector.token_width(enc)
        c_prev = enc.in_channels
        for level in range(1, enc.levels + 1):
            c = enc.channels(level)
            self._add(f"enc{level}.w", (c, c_prev, 3, 3, 3), "he", fan_in=c_prev * 27)
            self._add(f"enc{level}.b", (c, 1, 1, 1), "zeros")
            c_prev = c

        hidden = 8 * enc.base_channels
        for level in cfg.decoder_levels:
            c_in = enc.channels(level)
            for i in range(enc.levels - level):
                self._add(f"proj{level}.conv{i}.w", (hidden, c_in, 2, 2, 2), "he", fan_in=c_in * 8)
                self._add(f"proj{level}.conv{i}.b", (hidden, 1, 1, 1), "zeros")
                c_in = hidden
            self._add(f"proj{level}.lin.w", (c_in, width), "xavier")
            self._add(f"proj{level}.lin.b", (1, width), "zeros")

        token_width = width + att.decoder_channels
        levels = cfg.decoder_levels
        for i, level in enumerate(levels):
            self._add(f"dec{level}.wq", (self.pe.query_width, att.inner), "xavier")
            self._add(f"dec{level}.wk", (token_width, att.inner), "xavier")
            self._add(f"dec{level}.wv", (token_width, att.inner), "xavier")
            self._add(f"dec{level}.wo", (att.inner, att.decoder_channels), "xavier")
            if i < len(levels) - 1:
                self._add(f"dec{level}.ws", (token_width, att.decoder_channels), "he")

        outputs = 6 if cfg.bayesian else 3
        self._add("head.w", (att.decoder_channels, outputs), "zeros" if cfg.zero_head else "xavier")
        self._add("head.b", (1, outputs), "zeros")

    @property
    def parameter_list(self) -> List[Parameter]:
        return list(self.params.values())

    def _p(self, tape: Tape, name: str) -> ad.TapeNode:
        return tape.param(self.params[name])

    def forward(self, tape: Tape, fixed: Volume, moving: Volume, grid_dims: Sequence[int]) -> ad.TapeNode:
        """
        Record one forward pass.

        Returns:
            (G, 6) node [μ_x, μ_y, μ_z, η_x, η_y, η_z] per control point ((G, 3) without the Bayesian head)
        """
        cfg = self.config
        if fixed.dims != cfg.image_dims or moving.dims != cfg.image_dims:
            raise GeometryError(f"network expects {cfg.image_dims}, got {fixed.dims} and {moving.dims}")
        enc, att = cfg.encoder, cfg.attention

        x = tape.constant(np.stack([fixed.data, moving.data]))
        features = []
        for level in range(1, enc.levels + 1):
            x = ad.conv3_stride2(tape, x, self._p(tape, f"enc{level}.w"), padding=1)
            x = ad.relu(tape, ad.add(tape, x, self._p(tape, f"enc{level}.b")))
            features.append(x)

        projected = {}
        for level in cfg.decoder_levels:
            y = features[level - 1]
            for i in range(enc.levels - level):
                y = ad.conv3_stride2(tape, y, self._p(tape, f"proj{level}.conv{i}.w"))
                y = ad.relu(tape, ad.add(tape, y, self._p(tape, f"proj{level}.conv{i}.b")))
            tokens = ad.reshape_flatten(tape, y)
            projected[level] = ad.add(tape, ad.matmul(tape, tokens, self._p(tape, f"proj{level}.lin.w")),
                                      self._p(tape, f"proj{level}.lin.b"))

        queries = tape.constant(self.pe.queries(grid_dims))
        n_tokens = int(np.prod(cfg.token_dims))
        state = tape.constant(np.zeros((n_tokens, att.decoder_channels)))
        hidden = None
        levels = cfg.decoder_levels
        for i, level in enumerate(levels):
            tokens = ad.concat_channels(tape, [projected[level], state], axis=-1)
            y, _ = attend(tape, queries, tokens,
                          self._p(tape, f"dec{level}.wq"), self._p(tape, f"dec{level}.wk"),
                          self._p(tape, f"dec{level}.wv"), self._p(tape, f"dec{level}.wo"),
                          att.heads, att.head_dim)
            hidden = y if hidden is None else ad.add(tape, hidden, y)
            if i < len(levels) - 1:
                state = ad.relu(tape, ad.matmul(tape, tokens, self._p(tape, f"dec{level}.ws")))

        out = ad.matmul(tape, ad.relu(tape, hidden), self._p(tape, "head.w"))
        return ad.add(tape, out, self._p(tape, "head.b"))

    def to_field(self, out: np.ndarray, grid: ControlGrid) -> GriddedField:
        shape = (3,) + grid.grid_dims
        mu = np.asarray(out[:, :3], dtype=np.float64).T.reshape(shape)
        eta = np.asarray(out[:, 3:6], dtype=np.float64).T.reshape(shape) if self.config.bayesian else None
        return GriddedField(grid, mu, eta)

    def control_grid(self, grid: GridSpec) -> ControlGrid:
        return make_control_grid(self.config.image_dims, resolve_grid(grid, self.config))

    def predict(self, fixed: Volume, moving: Volume, grid: GridSpec, dtype=np.float32) -> GriddedField:
        control = self.control_grid(grid)
        tape = Tape(dtype)
        return self.to_field(self.forward(tape, fixed, moving, control.grid_dims).value, control)

    def parameter_bytes(self) -> bytes:
        return b"".join(np.asarray(p.value, dtype="<f4").tobytes() for p in self.params.values())


def field_gradient_to_output(grad, bayesian: bool) -> np.ndarray:
    """Reorder a (3, g_w, g_h, g_d) gradient (and η part) into the (G, 3|6) output layout."""
    parts = [grad.mu.reshape(3, -1).T]
    if bayesian:
        parts.append(grad.eta.reshape(3, -1).T)
    return np.concatenate(parts, axis=1)


def pair_loss(net: GridRegNet, tape: Tape, pair, grid_dims: Sequence[int], weights: LossWeights,
              kernel: InterpKernel, rng: Optional[np.random.Generator] = None):
    """Forward one pair, evaluate the registration loss and attach it to the tape."""
    control = make_control_grid(net.config.image_dims, grid_dims)
    out = net.forward(tape, pair.fixed, pair.moving, control.grid_dims)
    field = net.to_field(out.value, control)
    noise = None
    if field.bayesian:
        noise = draw_noise(rng or make_rng(0, "gridnet.noise"), control.grid_dims, weights.mc_samples)
    breakdown, grad = loss_and_gradient((pair.fixed, pair.moving), field, kernel, pair.masks, weights, noise)
    loss = ad.attach_loss(tape, out, breakdown.total, field_gradient_to_output(grad, field.bayesian))
    return loss, breakdown


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 4
    epochs: int = 10
    max_steps: Optional[int] = None
    grid_set: Tuple[GridSpec, ...] = DEFAULT_GRID_SET
    weights: LossWeights = LossWeights()
    seed: int = 0
    checkpoint: Optional[str] = None
    validation_grid: Optional[GridSpec] = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError(f"batch size and epochs must be ≥ 1, got {self.batch_size}, {self.epochs}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"max_steps must be ≥ 1, got {self.max_steps}")
        if not self.grid_set:
            raise ConfigError("grid set must not be empty")
        object.__setattr__(self, "grid_set", tuple(
            g if isinstance(g, str) else tuple(int(v) for v in g) for g in self.grid_set))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["grid_set"] = [g if isinstance(g, str) else list(g) for g in self.grid_set]
        return out


@dataclass
class TrainResult:
    net: GridRegNet
    train_losses: List[float] = field(default_factory=list)
    validation_losses: List[float] = field(default_factory=list)
    grid_history: List[Tuple[int, int, int]] = field(default_factory=list)
    steps: int = 0


def validation_loss(net: GridRegNet, pairs: Sequence, grid: GridSpec, weights: LossWeights, seed: int = 0) -> float:
    """Mean total loss over `pairs` at one grid, with fixed noise draws."""
    if not pairs:
        raise ConfigError("validation set is empty")
    control = net.control_grid(grid)
    losses = []
    for index, pair in enumerate(pairs):
        field = net.predict(pair.fixed, pair.moving, control.grid_dims)
        noise = None
        if field.bayesian:
            noise = draw_noise(make_rng(seed, "gridnet.validation", index), control.grid_dims, weights.mc_samples)
        losses.append(total_loss((pair.fixed, pair.moving), field, net.config.kernel, pair.masks, weights, noise).total)
    return float(np.mean(losses))


def train(pairs: Sequence, cfg: TrainConfig = TrainConfig(), net: Optional[GridRegNet] = None,
          validation: Optional[Sequence] = None) -> TrainResult:
    """
    Grid-adaptive training: every step draws its control-grid size from `cfg.grid_set`.

    Args:
        pairs: Training pairs (objects with fixed, moving and masks)
        cfg: Training configuration
        net: Network to train (a fresh one sized to the pairs when None)
        validation: Validation pairs (the training pairs when None)

    Returns:
        TrainResult with per-step losses and per-epoch validation losses (index 0 = before training)
    """
    if not pairs:
        raise ConfigError("training set is empty")
    if len(pairs) < 8:
        logger.warning(f"⚠️ Training on only {len(pairs)} pairs")
    net = net or GridRegNet(NetworkConfig(image_dims=pairs[0].fixed.dims, seed=cfg.seed))
    validation = list(validation) if validation else list(pairs)
    val_grid = cfg.validation_grid or cfg.grid_set[0]
    kernel = net.config.kernel
    adam = Adam(cfg.learning_rate)
    result = TrainResult(net)
    result.validation_losses.append(validation_loss(net, validation, val_grid, cfg.weights, cfg.seed))
    logger.info(f"🔄 Initial validation loss {result.validation_losses[0]:.6g}")

    step = 0
    for epoch in range(cfg.epochs):
        order = make_rng(cfg.seed, "gridnet.shuffle", epoch).permutation(len(pairs))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            choice = make_rng(cfg.seed, "gridnet.grid", step).integers(len(cfg.grid_set))
            grid_dims = resolve_grid(cfg.grid_set[choice], net.config)
            summed: Dict[str, np.ndarray] = {}
            batch_loss = 0.0
            for k, index in enumerate(batch):
                tape = Tape(np.float32)
                loss, breakdown = pair_loss(net, tape, pairs[index], grid_dims, cfg.weights, kernel,
                                            make_rng(cfg.seed, "gridnet.noise", step, k))
                if not np.isfinite(breakdown.total):
                    raise DivergenceError(f"non-finite training loss at step {step}")
                batch_loss += breakdown.total
                for name, g in ad.backward(tape, loss).items():
                    summed[name] = summed[name] + g if name in summed else g.astype(np.float64)
            grads = {name: g / len(batch) for name, g in summed.items()}
            updated = adam.step({name: p.value for name, p in net.params.items()}, grads)
            for name, value in updated.items():
                net.params[name].assign(value)
            result.train_losses.append(batch_loss / len(batch))
            result.grid_history.append(grid_dims)
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        result.validation_losses.append(validation_loss(net, validation, val_grid, cfg.weights, cfg.seed))
        logger.info(f"📈 Epoch {epoch + 1}/{cfg.epochs}: step {step}, "
                    f"train loss {result.train_losses[-1]:.6g}, validation loss {result.validation_losses[-1]:.6g}")
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break

    result.steps = step
    if cfg.checkpoint:
        save_checkpoint(net, cfg.checkpoint, extra={"train": cfg.to_dict()})
    return result


@dataclass
class GridSelection:
    chosen: Tuple[int, int, int]
    rows: List[dict]


def select_grid(net: GridRegNet, pairs: Sequence, grids: Sequence[GridSpec],
                weights: LossWeights = LossWeights()) -> GridSelection:
    """Pick the grid with the best mean validation Dice; ties go to the coarser grid."""
    if not pairs:
        raise ConfigError("validation set is empty")
    if not grids:
        raise ConfigError("grid list is empty")
    rows = []
    for spec in grids:
        control = net.control_grid(spec)
        dices = []
        for pair in pairs:
            dense = upsample(net.predict(pair.fixed, pair.moving, control.grid_dims).mean_only(),
                             net.config.image_dims, net.config.kernel)
            dices.append(dice_score(pair.fixed_mask, warp_mask(pair.moving_mask, dense)))
        loss = validation_loss(net, pairs, control.grid_dims, weights)
        rows.append({"grid": control.grid_dims, "dice": float(np.mean(dices)), "loss": loss})
        logger.info(f"📊 grid {control.grid_dims}: dice={rows[-1]['dice']:.4f} loss={loss:.6g}")
    best = max(r["dice"] for r in rows)
    candidates = [r for r in rows if r["dice"] >= best - 1e-12]
    chosen = min(candidates, key=lambda r: int(np.prod(r["grid"])))["grid"]
    return GridSelection(chosen, rows)


@dataclass
class InferenceResult:
    field: GriddedField
    dense: DenseField
    warped: Volume
    sigma2: Optional[Volume] = None


def infer(net: GridRegNet, fixed: Volume, moving: Volume, grid: GridSpec,
          policy: BoundaryPolicy = BoundaryPolicy.CLAMP) -> InferenceResult:
    """Warp with the mean field; Bayesian networks also return the dense σ² map (component mean)."""
    field = net.predict(fixed, moving, grid)
    dense = upsample(field.mean_only(), fixed.dims, net.config.kernel)
    warped = warp_volume(moving, dense, policy)
    sigma2 = None
    if field.bayesian:
        sigma2 = Volume(fixed.dims, fixed.spacing, upsample_sigma2(field, net.config.kernel).mean(axis=0))
    return InferenceResult(field, dense, warped, sigma2)


def save_checkpoint(net: GridRegNet, path: str, extra: Optional[dict] = None) -> None:
    """JSON manifest plus little-endian f32 parameter payloads in manifest order."""
    header_path, payload_path = split_pair_path(path)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": net.config.to_dict(),
        "seed": net.config.seed,
        "parameters": [{"name": p.name, "shape": list(p.shape), "init": p.init} for p in net.params.values()],
    }
    if extra:
        manifest.update(extra)
    atomic_write_bytes(payload_path, net.parameter_bytes())
    atomic_write_text(header_path, json.dumps(manifest, indent=2) + "\n")
    logger.info(f"💾 Checkpoint written to {header_path}")


def load_checkpoint(path: str) -> GridRegNet:
    header_path, payload_path = split_pair_path(path)
    manifest = read_json(header_path)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise VolumeFormatError(f"{header_path} is not a {CHECKPOINT_FORMAT} manifest")
    net = GridRegNet(NetworkConfig.from_dict(manifest["config"]), initialize=False)
    try:
        with open(payload_path, "rb") as f:
            payload = np.frombuffer(f.read(), dtype="<f4")
    except FileNotFoundError:
        raise FileNotFoundError(f"Checkpoint payload not found: {payload_path}") from None
    offset = 0
    for entry in manifest["parameters"]:
        param = net.params.get(entry["name"])
        if param is None or list(param.shape) != list(entry["shape"]):
            raise VolumeFormatError(f"checkpoint parameter {entry['name']} {entry['shape']} does not fit the network")
        size = int(np.prod(param.shape))
        if offset + size > payload.size:
            raise VolumeFormatError(f"checkpoint payload too short at {entry['name']}")
        param.assign(payload[offset:offset + size].reshape(param.shape))
        offset += size
    if offset != payload.size or len(manifest["parameters"]) != len(net.params):
        raise VolumeFormatError("checkpoint payload does not match the manifest")
    return net
