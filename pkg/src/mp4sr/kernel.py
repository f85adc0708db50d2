"""Dense-tensor numeric kernel with reverse-mode differentiation.

Tensors wrap row-major numpy arrays in float32. Setting the environment
variable MP4SR_VERIFY=1 (or calling set_verify_mode) switches newly
created tensors to float64, which is required for reliable
finite-difference gradient checks.

Operations executed inside a `with Tape() as tape:` block append records
to the tape in execution order; `backward(tape, loss)` replays them in
reverse and accumulates gradients additively across fan-out. Operations
executed with no active tape are pure evaluation.

Randomness (dropout masks, parameter init, shuffling) always flows
through explicit numpy Generators backed by the Philox counter-based bit
generator, so masks replay bit-exactly for a fixed seed on any platform.
Sub-streams are derived with numpy's SeedSequence.spawn.
"""

from __future__ import annotations

import math
import os
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeError

_VERIFY = os.environ.get("MP4SR_VERIFY", "") == "1"

# Additive mask value: large enough that exp(x - max) underflows to exactly
# 0.0 in float32, small enough to stay finite through every op.
NEG_INF = -1.0e9


def set_verify_mode(on: bool) -> None:
    """Switch the kernel between float32 (training) and float64 (verification)."""
    global _VERIFY
    _VERIFY = bool(on)


def verify_mode_active() -> bool:
    return _VERIFY


@contextmanager
def verify_mode(on: bool = True):
    """Temporarily switch precision; tensors must be created inside the block."""
    prev = _VERIFY
    set_verify_mode(on)
    try:
        yield
    finally:
        set_verify_mode(prev)


def float_dtype():
    return np.float64 if _VERIFY else np.float32


def make_rng(seed) -> np.random.Generator:
    """Philox-backed generator; `seed` may be an int or a SeedSequence."""
    return np.random.Generator(np.random.Philox(seed))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Derive `n` independent deterministic sub-streams from one seed."""
    return [np.random.Generator(np.random.Philox(ss)) for ss in np.random.SeedSequence(seed).spawn(n)]


def rng_state(gen: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a Philox generator's state."""
    state = gen.bit_generator.state
    return {
        "counter": [int(x) for x in state["state"]["counter"]],
        "key": [int(x) for x in state["state"]["key"]],
        "buffer": [int(x) for x in state["buffer"]],
        "buffer_pos": int(state["buffer_pos"]),
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }


def restore_rng(snapshot: dict) -> np.random.Generator:
    gen = np.random.Generator(np.random.Philox())
    gen.bit_generator.state = {
        "bit_generator": "Philox",
        "state": {
            "counter": np.array(snapshot["counter"], dtype=np.uint64),
            "key": np.array(snapshot["key"], dtype=np.uint64),
        },
        "buffer": np.array(snapshot["buffer"], dtype=np.uint64),
        "buffer_pos": snapshot["buffer_pos"],
        "has_uint32": snapshot["has_uint32"],
        "uinteger": snapshot["uinteger"],
    }
    return gen


class Tensor:
    """Dense row-major tensor. `grad` is populated by backward()."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=float_dtype())
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def parameter(data, rng: np.random.Generator | None = None, std: float = 0.02) -> Tensor:
    """Learnable tensor. If `data` is a shape tuple, init truncated normal(0, std)."""
    if isinstance(data, tuple):
        if rng is None:
            raise ContractError("shape init requires an rng")
        return Tensor(truncated_normal(rng, data, std), requires_grad=True)
    return Tensor(data, requires_grad=True)


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) with draws beyond 2 std resampled."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(float_dtype())


# ---------------------------------------------------------------------------
# Computation record
# ---------------------------------------------------------------------------

_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of primitive applications, replayable in reverse.

    Execution order guarantees topological order: every operand is
    produced before its consumer is recorded.
    """

    def __init__(self):
        self.ops: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self.watched: list[Tensor] = []

    def watch(self, *tensors: Tensor) -> None:
        """Guarantee the tensors appear as leaves in backward() output."""
        self.watched.extend(tensors)

    def __enter__(self):
        global _TAPE
        if _TAPE is not None:
            raise ContractError("nested tapes are not supported")
        _TAPE = self
        return self

    def __exit__(self, *exc):
        global _TAPE
        _TAPE = None
        return False


def _finite_or_raise(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")
    return arr


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    """Create the output tensor and record the op on the active tape."""
    _finite_or_raise(data, op)
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    if _TAPE is not None and out.requires_grad:
        _TAPE.ops.append((out, inputs, bwd))
    return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate gradients of a scalar loss for every requires_grad leaf.

    Gradients add across fan-out; watched leaves the loss does not depend
    on receive zeros. Also populates `t.grad` on each leaf.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced: set[int] = {id(out) for out, _, _ in tape.ops}
    leaves: dict[int, Tensor] = {id(t): t for t in tape.watched}
    for out, inputs, bwd in reversed(tape.ops):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, bwd(g)):
            if gi is None or not t.requires_grad:
                continue
            acc = grads.get(id(t))
            grads[id(t)] = gi if acc is None else acc + gi
        for t in inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
    result: dict[Tensor, np.ndarray] = {}
    for tid, t in leaves.items():
        g = grads.get(tid)
        if g is None:
            g = np.zeros_like(t.data)
        elif g.shape != t.data.shape:  # scalar loss leaves
            g = g.reshape(t.data.shape)
        t.grad = g
        result[t] = g
    return result


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def matmul(a, b) -> Tensor:
    """Matrix product; 2-D, or equal-rank stacked (batched) operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"matmul needs equal-rank >=2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), bwd)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g * bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", ad * bd, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g / bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * ad / (bd * bd), b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("div", ad / bd, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / n,)

    return _emit("mean", a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return _emit("relu", a.data * mask, (a,), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bwd(g):
        return (g * out_data,)

    return _emit("exp", out_data, (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        return (g / a.data,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)
    return _emit("log", out_data, (a,), bwd)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def bwd(g):
        return (g * 0.5 / out_data,)

    return _emit("sqrt", out_data, (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along `axis`; rows sum to 1."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return ((g - dot) * out_data,)

    return _emit("softmax", out_data, (a,), bwd)


def logsumexp(a, axis: int = -1) -> Tensor:
    """Stabilized log(sum(exp(a))) along `axis` (axis is collapsed)."""
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out_data = np.squeeze(m + np.log(s), axis=axis)
    soft = e / s

    def bwd(g):
        return (np.expand_dims(g, axis) * soft,)

    return _emit("logsumexp", out_data, (a,), bwd)


def layer_norm(x, gamma, beta, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean and unit population variance,
    then apply the affine transform gamma * x + beta."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.shape[-1]
    if n < 1:
        raise ShapeError("layer_norm needs a non-empty last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data

    def bwd(g):
        ggamma = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gbeta = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        if x.requires_grad:
            gx_hat = g * gamma.data
            gx = inv * (
                gx_hat
                - gx_hat.mean(axis=-1, keepdims=True)
                - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
            )
        else:
            gx = None
        return gx, ggamma, gbeta

    return _emit("layer_norm", out_data, (x, gamma, beta), bwd)


def dropout(x, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: zero entries with probability `rate` and scale
    survivors by 1/(1-rate). Identity in eval mode."""
    from .errors import ConfigError

    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return _emit("dropout", x.data.copy(), (x,), lambda g: (g,))
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)

    def bwd(g):
        return (g * keep,)

    return _emit("dropout", x.data * keep, (x,), bwd)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)

    def bwd(g):
        return (g.transpose(inverse),)

    return _emit("transpose", a.data.transpose(axes), (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _emit("reshape", a.data.reshape(shape), (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def gather_rows(table, idx) -> Tensor:
    """out[...] = table[idx[...], :]; backward scatter-adds into the table."""
    table = as_tensor(table)
    idx = np.asarray(idx)

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _emit("gather_rows", table.data[idx], (table,), bwd)


def take_per_row(a, idx) -> Tensor:
    """out[i] = a[i, idx[i]] for a 2-D tensor."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    rows = np.arange(a.shape[0])

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[rows, idx] = g
        return (ga,)

    return _emit("take_per_row", a.data[rows, idx], (a,), bwd)


def take_position(a, pos: int) -> Tensor:
    """Select one position along axis 1 of a 3-D tensor: out = a[:, pos, :]."""
    a = as_tensor(a)

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[:, pos, :] = g
        return (ga,)

    return _emit("take_position", a.data[:, pos, :].copy(), (a,), bwd)


def select(cond, a, b) -> Tensor:
    """Elementwise cond ? a : b with a constant boolean mask."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"select branches must match: {a.shape} vs {b.shape}")
    mask = np.broadcast_to(np.expand_dims(cond, -1) if cond.ndim == a.ndim - 1 else cond, a.shape)

    def bwd(g):
        ga = np.where(mask, g, 0.0) if a.requires_grad else None
        gb = np.where(mask, 0.0, g) if b.requires_grad else None
        return ga, gb

    return _emit("select", np.where(mask, a.data, b.data), (a, b), bwd)


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def gradient_check(f, params: list[Tensor], eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of scalar f(params) against central
    differences, coordinate by coordinate.

    Returns max over coordinates of |analytic - numeric| / max(1, |analytic|).
    Run inside verify_mode(); float32 differences are unreliable.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    with Tape() as tape:
        tape.watch(*params)
        loss = f()
    grads = backward(tape, loss)
    worst = 0.0
    for p in params:
        analytic = grads[p]
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a))
            if err > worst:
                worst = err
    return worst


def finite_diff_gradients(f, params: list[Tensor], eps: float = 1e-5) -> dict[Tensor, np.ndarray]:
    """Central-difference gradient estimate of scalar f for each parameter."""
    out: dict[Tensor, np.ndarray] = {}
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * eps)
        out[p] = g
    return out


def check_all_finite(t: Tensor) -> Tensor:
    """Explicit finite-state assertion for trainer checkpoints."""
    _finite_or_raise(t.data, "check")
    return t
