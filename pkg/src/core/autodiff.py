"""
Tape-based reverse-mode differentiation over dense numpy arrays.

A Tape is rebuilt on every forward pass. Each primitive appends one TapeNode
holding its value and a closure that maps the upstream adjoint to adjoints for
its parents; `backward` walks the tape in reverse and accumulates them.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from utils.errors import ShapeError

INIT_KINDS = ("he", "xavier", "zeros", "normal")
FD_ROUNDOFF = 1e-13
SCALE_FLOOR = 1e-3


@dataclass
class Parameter:
    """Named trainable tensor."""

    name: str
    shape: Tuple[int, ...]
    init: str = "xavier"
    fan_in: Optional[int] = None
    fan_out: Optional[int] = None
    value: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if self.init not in INIT_KINDS:
            raise ShapeError(f"unknown init {self.init!r} for {self.name}; expected one of {INIT_KINDS}")

    def initialize(self, rng: np.random.Generator) -> "Parameter":
        fan_in = self.fan_in or (self.shape[0] if self.shape else 1)
        fan_out = self.fan_out or (self.shape[-1] if self.shape else 1)
        if self.init == "zeros":
            value = np.zeros(self.shape)
        elif self.init == "he":
            value = rng.normal(0.0, np.sqrt(2.0 / fan_in), self.shape)
        elif self.init == "xavier":
            value = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), self.shape)
        else:
            value = rng.normal(0.0, 0.1, self.shape)
        self.value = value.astype(np.float32)
        return self

    def assign(self, value: np.ndarray) -> None:
        value = np.asarray(value)
        if value.shape != self.shape:
            raise ShapeError(f"assign {self.name}: expected {self.shape}, got {value.shape}")
        if not np.all(np.isfinite(value)):
            raise ShapeError(f"assign {self.name}: non-finite values")
        self.value = value.astype(np.float32)


@dataclass
class TapeNode:
    id: int
    op: str
    parents: Tuple[int, ...]
    value: np.ndarray = field(repr=False)
    backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = field(default=None, repr=False)
    param_name: Optional[str] = None
    grad: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape


class Tape:
    """Ordered record of one forward pass; 64-bit for checking, 32-bit for training."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.nodes: List[TapeNode] = []
        self._params: Dict[str, TapeNode] = {}

    def record(self, op: str, parents: Sequence[TapeNode], value, backward_fn=None) -> TapeNode:
        node = TapeNode(len(self.nodes), op, tuple(p.id for p in parents),
                        np.asarray(value, dtype=self.dtype), backward_fn)
        self.nodes.append(node)
        return node

    def constant(self, value) -> TapeNode:
        return self.record("const", (), value)

    def param(self, p: Parameter) -> TapeNode:
        """Leaf for a Parameter; reusing it on the same tape returns the same node."""
        if p.name not in self._params:
            if p.value is None:
                raise ShapeError(f"parameter {p.name} is not initialized")
            node = self.record("param", (), p.value)
            node.param_name = p.name
            self._params[p.name] = node
        return self._params[p.name]


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: TapeNode, b: TapeNode) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def add(tape: Tape, a: TapeNode, b: TapeNode) -> TapeNode:
    _broadcast_shape("add", a, b)
    return tape.record("add", (a, b), a.value + b.value,
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(tape: Tape, a: TapeNode, b: TapeNode) -> TapeNode:
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return tape.record("mul", (a, b), av * bv,
                       lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def scale(tape: Tape, a: TapeNode, factor: float) -> TapeNode:
    return tape.record("scale", (a,), a.value * factor, lambda g: (g * factor,))


def matmul(tape: Tape, a: TapeNode, b: TapeNode) -> TapeNode:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return tape.record("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def transpose(tape: Tape, a: TapeNode) -> TapeNode:
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got {a.shape}")
    return tape.record("transpose", (a,), a.value.T, lambda g: (g.T,))


def relu(tape: Tape, a: TapeNode) -> TapeNode:
    """relu'(0) is taken as 0."""
    active = a.value > 0
    return tape.record("relu", (a,), np.where(active, a.value, 0.0), lambda g: (g * active,))


def softplus(tape: Tape, a: TapeNode) -> TapeNode:
    x = a.value
    value = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)
    slope = 0.5 * (1.0 + np.tanh(0.5 * x))
    return tape.record("softplus", (a,), value, lambda g: (g * slope,))


def softmax_rows(tape: Tape, a: TapeNode) -> TapeNode:
    """Row-wise softmax over the last axis; backward is p ⊙ (g − Σ g p)."""
    if a.value.ndim != 2:
        raise ShapeError(f"softmax_rows: expected a matrix, got {a.shape}")
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    return tape.record("softmax_rows", (a,), p, lambda g: (p * (g - (g * p).sum(axis=1, keepdims=True)),))


def concat_channels(tape: Tape, nodes: Sequence[TapeNode], axis: int = -1) -> TapeNode:
    values = [n.value for n in nodes]
    try:
        value = np.concatenate(values, axis=axis)
    except ValueError:
        raise ShapeError(f"concat_channels: incompatible shapes {[n.shape for n in nodes]}") from None
    sizes = np.cumsum([v.shape[axis] for v in values])[:-1]
    return tape.record("concat_channels", nodes, value, lambda g: tuple(np.split(g, sizes, axis=axis)))


def columns(tape: Tape, a: TapeNode, start: int, stop: int) -> TapeNode:
    if a.value.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"columns: cannot take [{start}:{stop}] of {a.shape}")

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return tape.record("columns", (a,), a.value[:, start:stop], backward)


def reshape_flatten(tape: Tape, a: TapeNode) -> TapeNode:
    """(C, D, H, W) feature map → (D·H·W, C) token matrix, tokens in C order."""
    if a.value.ndim < 2:
        raise ShapeError(f"reshape_flatten: expected (C, ...) input, got {a.shape}")
    channels = a.shape[0]
    return tape.record("reshape_flatten", (a,), a.value.reshape(channels, -1).T,
                       lambda g: (g.T.reshape(a.shape),))


def reshape(tape: Tape, a: TapeNode, shape: Tuple[int, ...]) -> TapeNode:
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return tape.record("reshape", (a,), value, lambda g: (g.reshape(a.shape),))


def conv3_stride2(tape: Tape, x: TapeNode, w: TapeNode, padding: int = 0) -> TapeNode:
    """
    3D cross-correlation with stride 2.

    Args:
        tape: Active tape
        x: (C_in, D, H, W) input
        w: (C_out, C_in, k, k, k) kernel
        padding: Zero padding on every side

    Returns:
        (C_out, D', H', W') node with D' = (D + 2·padding − k)//2 + 1
    """
    if x.value.ndim != 4 or w.value.ndim != 5 or w.shape[1] != x.shape[0] or len(set(w.shape[2:])) != 1:
        raise ShapeError(f"conv3_stride2: incompatible shapes {x.shape} and {w.shape}")
    k = w.shape[2]
    pad = ((0, 0),) + ((padding, padding),) * 3
    xp = np.pad(x.value, pad)
    if any(n < k for n in xp.shape[1:]):
        raise ShapeError(f"conv3_stride2: input {x.shape} smaller than kernel {k} after padding {padding}")
    windows = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))[:, ::2, ::2, ::2]
    wv = w.value
    out = np.einsum("cdhwxyz,ocxyz->odhw", windows, wv, optimize=True)
    out_spatial = out.shape[1:]

    def backward(g):
        gw = np.einsum("cdhwxyz,odhw->ocxyz", windows, g, optimize=True)
        gwin = np.einsum("ocxyz,odhw->cdhwxyz", wv, g, optimize=True)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        do, ho, wo = out_spatial
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    gxp[:, i:i + 2 * do:2, j:j + 2 * ho:2, l:l + 2 * wo:2] += gwin[..., i, j, l]
        gx = gxp[:, padding:xp.shape[1] - padding, padding:xp.shape[2] - padding, padding:xp.shape[3] - padding]
        return gx, gw

    return tape.record("conv3_stride2", (x, w), out, backward)


def total(tape: Tape, a: TapeNode) -> TapeNode:
    """Sum of all entries (scalar)."""
    return tape.record("sum", (a,), np.sum(a.value), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mse(tape: Tape, a: TapeNode, target) -> TapeNode:
    target = np.asarray(target, dtype=tape.dtype)
    if target.shape != a.shape:
        raise ShapeError(f"mse: prediction {a.shape} vs target {target.shape}")
    diff = a.value - target
    return tape.record("mse", (a,), np.mean(diff ** 2), lambda g: (g * 2.0 * diff / diff.size,))


def attach_loss(tape: Tape, a: TapeNode, value: float, grad: np.ndarray) -> TapeNode:
    """Scalar loss computed outside the tape whose gradient w.r.t. `a` is `grad`."""
    grad = np.asarray(grad)
    if grad.shape != a.shape:
        raise ShapeError(f"attach_loss: gradient {grad.shape} vs node {a.shape}")
    return tape.record("external_loss", (a,), value, lambda g: (g * grad,))


# ---------------------------------------------------------------------------
# Backward pass and gradient checking
# ---------------------------------------------------------------------------

def backward(tape: Tape, loss: TapeNode) -> Dict[str, np.ndarray]:
    """
    Reverse sweep from a scalar loss.

    Returns:
        Parameter name → gradient (zeros for parameters the loss does not reach)
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes[:loss.id + 1]):
        if node.grad is None or node.backward_fn is None:
            continue
        parent_grads = node.backward_fn(node.grad)
        for pid, g in zip(node.parents, parent_grads):
            if g is None:
                continue
            parent = tape.nodes[pid]
            g = np.asarray(g, dtype=tape.dtype).reshape(parent.shape)
            parent.grad = g if parent.grad is None else parent.grad + g
    return {
        name: (node.grad if node.grad is not None else np.zeros(node.shape, dtype=tape.dtype))
        for name, node in tape._params.items()
    }


@dataclass
class GradcheckReport:
    passed: bool
    tolerance: float
    max_rel_error: Dict[str, float]
    worst: Optional[str] = None

    @property
    def worst_error(self) -> float:
        return max(self.max_rel_error.values()) if self.max_rel_error else 0.0


def gradcheck(builder: Callable[[Tape], TapeNode], params: Sequence[Parameter], tolerance: float = 1e-6,
              eps: float = 1e-5, max_entries: Optional[int] = None, seed: int = 0) -> GradcheckReport:
    """
    Compare backward() against central differences in 64-bit arithmetic.

    The error per entry is (|analytic − numeric| − r) / max(|analytic|, |numeric|, f·scale),
    clipped at 0, where r is the rounding floor of the difference quotient and
    scale is the largest gradient magnitude seen for the parameter.

    Args:
        builder: Builds the scalar loss on a fresh tape from `params`
        params: Parameters to perturb
        tolerance: Pass threshold on the max error of every parameter
        eps: Perturbation step
        max_entries: Check at most this many entries per parameter (random subset)
        seed: Seed for the entry subset

    Returns:
        GradcheckReport naming the worst parameter
    """
    originals = {p.name: p.value for p in params}
    for p in params:
        p.value = np.asarray(p.value, dtype=np.float64)
    try:
        tape = Tape(np.float64)
        analytic = backward(tape, builder(tape))

        def evaluate() -> float:
            return float(builder(Tape(np.float64)).value)

        rng = np.random.default_rng(seed)
        errors: Dict[str, float] = {}
        for p in params:
            flat = p.value.reshape(-1)
            indices = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                indices = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            grad = analytic.get(p.name, np.zeros(p.shape)).reshape(-1)
            checked = []
            for i in indices:
                saved = flat[i]
                flat[i] = saved + eps
                up = evaluate()
                flat[i] = saved - eps
                down = evaluate()
                flat[i] = saved
                numeric = (up - down) / (2.0 * eps)
                rounding = FD_ROUNDOFF * max(abs(up), abs(down)) / (2.0 * eps)
                checked.append((float(grad[i]), numeric, rounding))
            scale = max((max(abs(a), abs(n)) for a, n, _ in checked), default=0.0)
            floor = max(SCALE_FLOOR * scale, np.finfo(np.float64).tiny)
            errors[p.name] = max(
                (max(abs(a - n) - r, 0.0) / max(abs(a), abs(n), floor) for a, n, r in checked),
                default=0.0,
            )
    finally:
        for p in params:
            p.value = originals[p.name]

    worst_name = max(errors, key=errors.get) if errors else None
    passed = all(e <= tolerance for e in errors.values())
    return GradcheckReport(passed, tolerance, errors, worst_name)
