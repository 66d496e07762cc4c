"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape`. With no
tape active they run as plain numpy code, which is what evaluation uses.

Shapes are explicit. The only broadcasting allowed is a bias (shape equal to
the trailing dimensions of the other operand) and python scalars.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_TAPES: list["Tape"] = []
_DEBUG_FINITE = False


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def set_debug_finite(enabled: bool) -> None:
    """Check every op output for NaN/Inf and raise on the first offender."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "row_mask")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        # Trainable-row mask for embedding-style tensors; None means all rows.
        self.row_mask: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray, tuple[bool, ...]], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    """Ordered record of differentiable ops; supports exactly one backward."""

    nodes: list[_Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def backward(self, loss: Tensor) -> None:
        backward_pass(self, loss)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _record(out: np.ndarray, inputs: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if _DEBUG_FINITE and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite output from {op}")
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(inputs, result, backward, op))
    return result


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward_pass(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss) through the tape, accumulating into leaf ``grad``."""
    if tape.consumed:
        raise TapeError("backward already ran on this tape; run a new forward first")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(n.output) for n in tape.nodes}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        needs = tuple(t.requires_grad for t in node.inputs)
        in_grads = node.backward(g, needs)
        for t, gi, need in zip(node.inputs, in_grads, needs):
            if not need or gi is None:
                continue
            key = id(t)
            if key in produced:
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
            else:
                t.grad = gi.copy() if t.grad is None else t.grad + gi


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def _is_bias(big: tuple[int, ...], small: tuple[int, ...]) -> bool:
    return len(small) < len(big) and big[len(big) - len(small):] == small


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape((-1,) + shape).sum(axis=0)


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may be a python scalar or a trailing-dims bias."""
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _record(a.data + c, (a,), lambda g, n: (g,), "add_scalar")
    if a.shape != b.shape:
        if _is_bias(b.shape, a.shape):
            a, b = b, a
        elif not _is_bias(a.shape, b.shape):
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} are not compatible")
    sa, sb = a.shape, b.shape

    def backward(g, needs):
        return (_reduce_to(g, sa) if needs[0] else None,
                _reduce_to(g, sb) if needs[1] else None)

    return _record(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _record(a.data - b.data, (a, b),
                   lambda g, n: (g if n[0] else None, -g if n[1] else None), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = float(b)
        return _record(a.data * c, (a,), lambda g, n: (g * c,), "mul_scalar")
    a = as_tensor(a)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data

    def backward(g, needs):
        return (g * bd if needs[0] else None, g * ad if needs[1] else None)

    return _record(ad * bd, (a, b), backward, "mul")


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each row ``x[..., :]`` by the scalar ``s[...]``."""
    if x.shape[:-1] != s.shape:
        raise ShapeError(f"scale_rows: {x.shape} rows vs scales {s.shape}")
    xd, sd = x.data, s.data

    def backward(g, needs):
        return (g * sd[..., None] if needs[0] else None,
                np.einsum("...i,...i->...", g, xd) if needs[1] else None)

    return _record(xd * sd[..., None], (x, s), backward, "scale_rows")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2] or ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: cannot multiply {ad.shape} by {bd.shape}")

    def backward(g, needs):
        return (g @ np.swapaxes(bd, -1, -2) if needs[0] else None,
                np.swapaxes(ad, -1, -2) @ g if needs[1] else None)

    return _record(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T (+ bias)`` for ``weight`` of shape (out, in)."""
    xd, wd = x.data, weight.data
    if wd.ndim != 2 or xd.shape[-1] != wd.shape[1]:
        raise ShapeError(f"linear: input {xd.shape} vs weight {wd.shape}")
    out = xd @ wd.T
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} vs weight {wd.shape}")
        out = out + bias.data
        inputs = (x, weight, bias)
    else:
        inputs = (x, weight)

    def backward(g, needs):
        gx = g @ wd if needs[0] else None
        gw = None
        if needs[1]:
            g2 = g.reshape(-1, g.shape[-1])
            gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        if len(needs) == 3:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if needs[2] else None
            return gx, gw, gb
        return gx, gw

    return _record(out, inputs, backward, "linear")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(np.asarray(x.data.sum()), (x,),
                   lambda g, n: (np.full(shape, float(g)),), "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, size = x.shape, x.data.size
    return _record(np.asarray(x.data.mean()), (x,),
                   lambda g, n: (np.full(shape, float(g) / size),), "mean")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g, n: (g.reshape(old),), "reshape")


# ---------------------------------------------------------------------------
# nonlinearities and normalisation


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = _sigmoid(xd)

    def backward(g, needs):
        return (g * sig * (1.0 + xd * (1.0 - sig)),)

    return _record(xd * sig, (x,), backward, "silu")


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.logaddexp(0.0, xd)
    return _record(out, (x,), lambda g, n: (g * _sigmoid(xd),), "softplus")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    xd = x.data
    if xd.shape[-1] < 1:
        raise ShapeError("softmax_rows: last dimension must be >= 1")
    z = np.exp(xd - xd.max(axis=-1, keepdims=True))
    p = z / z.sum(axis=-1, keepdims=True)

    def backward(g, needs):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record(p, (x,), backward, "softmax_rows")


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    xd, gd = x.data, gain.data
    d = xd.shape[-1]
    if gd.shape != (d,):
        raise ShapeError(f"rms_norm: gain {gd.shape} vs input {xd.shape}")
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * inv

    def backward(g, needs):
        gx = None
        if needs[0]:
            gy = g * gd
            gx = inv * (gy - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, d).sum(axis=0) if needs[1] else None
        return gx, gg

    return _record(xhat * gd, (x, gain), backward, "rms_norm")


# ---------------------------------------------------------------------------
# indexing


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    rows, d = weight.shape

    def backward(g, needs):
        gw = np.zeros((rows, d))
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, d))
        return (gw,)

    return _record(weight.data[ids], (weight,), backward, "embedding")


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Rows ``x[idx]`` of a 2-D tensor; ``idx`` must not repeat."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def backward(g, needs):
        gx = np.zeros(shape)
        gx[idx] = g
        return (gx,)

    return _record(x.data[idx], (x,), backward, "gather_rows")


def scatter_add_rows(base: Tensor, idx: np.ndarray, values: Tensor) -> Tensor:
    """Copy of ``base`` with ``values`` added into rows ``idx`` (no repeats).

    Rows outside ``idx`` are copied untouched, so they stay bit-identical
    to ``base``.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if values.shape != (len(idx),) + base.shape[1:]:
        raise ShapeError(f"scatter_add_rows: values {values.shape} for {len(idx)} rows of {base.shape}")
    out = base.data.copy()
    out[idx] += values.data

    def backward(g, needs):
        return (g if needs[0] else None, g[idx] if needs[1] else None)

    return _record(out, (base, values), backward, "scatter_add_rows")


# ---------------------------------------------------------------------------
# attention


def rope_tables(seq_len: int, head_dim: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    freqs = base ** (-np.arange(half) * 2.0 / head_dim)
    ang = np.arange(seq_len)[:, None] * freqs[None, :]
    return np.cos(ang), np.sin(ang)


def rope(x: Tensor, n_heads: int, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary embedding on (B, L, d) viewed as heads of size d / n_heads.

    Pairs are (i, i + half) inside each head.
    """
    b, L, d = x.shape
    hd = d // n_heads
    half = hd // 2
    c = cos[:L][None, :, None, :]
    s = sin[:L][None, :, None, :]
    xd = x.data.reshape(b, L, n_heads, hd)

    def rotate(v, sign):
        v1, v2 = v[..., :half], v[..., half:]
        return np.concatenate([v1 * c - sign * v2 * s, sign * v1 * s + v2 * c], axis=-1)

    out = rotate(xd, 1.0).reshape(b, L, d)

    def backward(g, needs):
        return (rotate(g.reshape(b, L, n_heads, hd), -1.0).reshape(b, L, d),)

    return _record(out, (x,), backward, "rope")


def causal_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention; position t sees positions <= t."""
    b, L, d = q.shape
    if k.shape != q.shape or v.shape != q.shape:
        raise ShapeError(f"causal_attention: q {q.shape}, k {k.shape}, v {v.shape}")
    hd = d // n_heads
    scale = 1.0 / np.sqrt(hd)

    def split(t):
        return t.reshape(b, L, n_heads, hd).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    future = np.triu(np.ones((L, L), dtype=bool), k=1)
    scores[..., future] = -np.inf
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    out = (p @ vh).transpose(0, 2, 1, 3).reshape(b, L, d)

    def backward(g, needs):
        gh = split(g)
        gq = gk = gv = None
        if needs[2]:
            gv = (p.transpose(0, 1, 3, 2) @ gh).transpose(0, 2, 1, 3).reshape(b, L, d)
        if needs[0] or needs[1]:
            gp = gh @ vh.transpose(0, 1, 3, 2)
            gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
            if needs[0]:
                gq = (gs @ kh).transpose(0, 2, 1, 3).reshape(b, L, d)
            if needs[1]:
                gk = (gs.transpose(0, 1, 3, 2) @ qh).transpose(0, 2, 1, 3).reshape(b, L, d)
        return gq, gk, gv

    return _record(out, (q, k, v), backward, "causal_attention")


# ---------------------------------------------------------------------------
# loss


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_next_token(logits: Tensor, targets: np.ndarray,
                             ignore_mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over unmasked positions.

    ``logits`` has shape (..., V); ``targets`` and ``ignore_mask`` share the
    leading shape. ``ignore_mask`` True marks positions left out of the mean.
    """
    V = logits.shape[-1]
    lg = logits.data.reshape(-1, V)
    tg = np.asarray(targets, dtype=np.int64).reshape(-1)
    if tg.shape[0] != lg.shape[0]:
        raise ShapeError(f"cross_entropy: {lg.shape[0]} positions vs {tg.shape[0]} targets")
    keep = np.ones(tg.shape, bool) if ignore_mask is None else ~np.asarray(ignore_mask, bool).reshape(-1)
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy: every position is masked")
    kept_t = tg[keep]
    if kept_t.min() < 0 or kept_t.max() >= V:
        raise ValueError(f"cross_entropy: target id out of range [0, {V})")
    rows = np.nonzero(keep)[0]
    logp = log_softmax_np(lg[rows])
    loss = -logp[np.arange(count), kept_t].sum() / count
    shape = logits.shape

    def backward(g, needs):
        grad = np.zeros_like(lg)
        pr = np.exp(logp)
        pr[np.arange(count), kept_t] -= 1.0
        grad[rows] = pr * (float(g) / count)
        return (grad.reshape(shape),)

    return _record(np.asarray(loss), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class GradCheckReport:
    """Per-tensor maximum relative error of analytic vs numeric gradients."""

    max_rel_error: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(v <= self.tolerance for v in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def finite_difference_check(f: Callable[[], float], params: dict[str, Tensor],
                            step: float = 1e-5, tolerance: float = 1e-4,
                            n_coords: int = 20, seed: int = 0,
                            grad_fn: Callable[[], None] | None = None,
                            abs_floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``f`` evaluates the scalar objective from the current parameter values.
    ``grad_fn``, if given, populates ``.grad`` on the tensors in ``params``
    (one backward pass); otherwise the grads already present are used. For
    each tensor ``n_coords`` coordinates are sampled and the error
    ``|a - n| / max(|a|, |n|, abs_floor)`` is reduced by max.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if grad_fn is not None:
        for t in params.values():
            t.grad = None
        grad_fn()
    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    for name, t in params.items():
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        worst = 0.0
        for i in picks:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f())
            flat[i] = orig - step
            fm = float(f())
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"objective is not finite while probing {name}[{i}]")
            numeric = (fp - fm) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), abs_floor))
        report[name] = worst
    return GradCheckReport(report, tolerance)
