"""Minimal reverse-mode automatic differentiation over 2-D float64 arrays.

Only the handful of operations the frame encoder, the temporal network and
the losses need are provided. Every operation appends a node to an implicit
define-by-run graph; nodes carry a global insertion index so that
:func:`backward` can replay them in exact reverse order.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, LabelError, NumericError

_node_counter = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    __slots__ = ("index", "op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.index = next(_node_counter)
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tensor:
    """Dense array with an optional gradient plane.

    Leaf tensors with ``requires_grad`` set are parameters; they accumulate
    into ``grad`` on every :func:`backward` call. Non-leaf tensors keep a
    reference to the :class:`Node` that produced them.
    """

    __slots__ = ("values", "grad", "requires_grad", "node", "tag")

    def __init__(self, values, requires_grad: bool = False, node: Optional[Node] = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node = node
        self.grad = np.zeros_like(self.values) if (requires_grad and node is None) else None
        self.tag: Optional[str] = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on tensor of shape {self.values.shape}")
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        op = self.node.op if self.node is not None else "leaf"
        return f"Tensor(shape={self.values.shape}, op={op}, requires_grad={self.requires_grad})"


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def parameter(values) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64, copy=True), requires_grad=True)


def _make(values: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite values produced by {op}")
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        return Tensor(values, requires_grad=True, node=Node(op, inputs, backward_fn))
    return Tensor(values)


def _check_2d(x: Tensor, name: str) -> None:
    if x.values.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {x.values.shape}")


# ---------------------------------------------------------------------------
# operations


def conv1d_causal(x: Tensor, kernel: Tensor, bias: Tensor, dilation: int = 1) -> Tensor:
    """Dilated causal 1-D convolution over rows of ``x`` (T x Cin).

    ``kernel`` has shape (Cout, Cin, K); tap ``K-1`` multiplies the current
    frame and tap ``k`` reads frame ``t - (K-1-k) * dilation``. Frames before
    the start are zero.
    """
    _check_2d(x, "input")
    if kernel.values.ndim != 3:
        raise DimensionError(f"kernel must be (Cout, Cin, K), got {kernel.values.shape}")
    cout, cin, ksize = kernel.values.shape
    if ksize < 1 or dilation < 1:
        raise DimensionError("kernel size and dilation must be >= 1")
    T = x.values.shape[0]
    if T < 1:
        raise DimensionError("input must have at least one frame")
    if x.values.shape[1] != cin:
        raise DimensionError(f"kernel expects {cin} input channels, input has {x.values.shape[1]}")
    if bias.values.shape != (cout,):
        raise DimensionError(f"bias must have shape ({cout},), got {bias.values.shape}")

    pad = (ksize - 1) * dilation
    xp = np.concatenate([np.zeros((pad, cin)), x.values], axis=0)
    W = kernel.values
    # all taps in one matmul: columns are (tap, channel) pairs
    cols = np.concatenate([xp[k * dilation : k * dilation + T] for k in range(ksize)], axis=1)
    Wf = W.transpose(2, 1, 0).reshape(ksize * cin, cout)
    out = cols @ Wf + bias.values

    def backward(g):
        gx = gk = gb = None
        if x.requires_grad:
            gcols = g @ Wf.T
            gxp = np.zeros_like(xp)
            for k in range(ksize):
                gxp[k * dilation : k * dilation + T] += gcols[:, k * cin : (k + 1) * cin]
            gx = gxp[pad:]
        if kernel.requires_grad:
            gk = (cols.T @ g).reshape(ksize, cin, cout).transpose(2, 1, 0)
        if bias.requires_grad:
            gb = g.sum(axis=0)
        return gx, gk, gb

    return _make(out, "conv1d_causal", (x, kernel, bias), backward)


def pointwise_linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Per-row affine map ``out[t] = W @ x[t] + b``."""
    _check_2d(x, "input")
    if W.values.ndim != 2 or W.values.shape[1] != x.values.shape[1]:
        raise DimensionError(f"weight shape {W.values.shape} incompatible with input {x.values.shape}")
    if b.values.shape != (W.values.shape[0],):
        raise DimensionError(f"bias shape {b.values.shape} incompatible with weight {W.values.shape}")
    out = x.values @ W.values.T + b.values

    def backward(g):
        return (
            g @ W.values if x.requires_grad else None,
            g.T @ x.values if W.requires_grad else None,
            g.sum(axis=0) if b.requires_grad else None,
        )

    return _make(out, "pointwise_linear", (x, W, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    out = np.where(mask, x.values, 0.0)
    return _make(out, "relu", (x,), lambda g: (g * mask,))


def residual_add(a: Tensor, b: Tensor) -> Tensor:
    if a.values.shape != b.values.shape:
        raise DimensionError(f"shape mismatch {a.values.shape} vs {b.values.shape}")
    return _make(a.values + b.values, "residual_add", (a, b), lambda g: (g, g))


def softmax_rows(x: Tensor) -> Tensor:
    _check_2d(x, "input")
    if x.values.shape[1] < 1:
        raise DimensionError("softmax needs at least one column")
    z = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, "softmax_rows", (x,), backward)


def _check_labels(targets, C: int, T: int) -> np.ndarray:
    targets = np.asarray(targets)
    if targets.shape != (T,):
        raise DimensionError(f"expected {T} labels, got shape {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= C):
        raise LabelError(f"labels must lie in [0, {C}), got range [{targets.min()}, {targets.max()}]")
    return targets.astype(np.int64)


def weighted_nll_rows(probs: Tensor, targets, class_weights, eps: float = 1e-7) -> Tensor:
    """Mean over rows of ``-w[y_t] * log(max(probs[t, y_t], eps))``."""
    _check_2d(probs, "probs")
    if eps <= 0:
        raise ContractError("eps must be positive")
    T, C = probs.values.shape
    y = _check_labels(targets, C, T)
    w = np.asarray(class_weights, dtype=np.float64)
    if w.shape != (C,):
        raise DimensionError(f"class_weights must have shape ({C},), got {w.shape}")
    rows = np.arange(T)
    picked = probs.values[rows, y]
    clamped = np.maximum(picked, eps)
    wy = w[y]
    loss = np.array(-(wy * np.log(clamped)).sum() / T)

    def backward(g):
        gp = np.zeros_like(probs.values)
        # no gradient through the clamp when it is active
        active = picked > eps
        gp[rows, y] = np.where(active, -g * wy / (T * np.where(active, picked, 1.0)), 0.0)
        return (gp,)

    return _make(loss, "weighted_nll_rows", (probs,), backward)


def matmul_const(x: Tensor, M: np.ndarray) -> Tensor:
    """``x @ M`` for a constant matrix ``M``."""
    _check_2d(x, "input")
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != x.values.shape[1]:
        raise DimensionError(f"cannot multiply {x.values.shape} by {M.shape}")
    return _make(x.values @ M, "matmul_const", (x,), lambda g: (g @ M.T,))


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    _check_2d(a, "a")
    _check_2d(b, "b")
    if a.values.shape[1] != b.values.shape[1]:
        raise DimensionError(f"column mismatch {a.values.shape} vs {b.values.shape}")
    n = a.values.shape[0]
    out = np.concatenate([a.values, b.values], axis=0)
    return _make(out, "concat_rows", (a, b), lambda g: (g[:n], g[n:]))


def slice_rows(x: Tensor, start: int, stop: Optional[int] = None) -> Tensor:
    _check_2d(x, "input")
    T = x.values.shape[0]
    sl = slice(start, stop)
    out = x.values[sl].copy()

    def backward(g):
        gx = np.zeros((T,) + x.values.shape[1:])
        gx[sl] = g
        return (gx,)

    return _make(out, "slice_rows", (x,), backward)


def total(x: Tensor) -> Tensor:
    """Sum of all entries as a scalar tensor."""
    shape = x.values.shape
    return _make(np.array(x.values.sum()), "sum", (x,), lambda g: (np.full(shape, float(g)),))


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.values * c, "scale", (x,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# reverse pass


def _collect(root: Tensor) -> List[Tensor]:
    seen = set()
    out: List[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if t.node is None or id(t) in seen:
            continue
        seen.add(id(t))
        out.append(t)
        stack.extend(t.node.inputs)
    out.sort(key=lambda t: t.node.index, reverse=True)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf.

    Intermediate gradients live only for the duration of the call, so the
    same graph may be traversed again; leaf gradients add up until the caller
    zeroes them.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.values.shape}")
    if not loss.requires_grad:
        return
    if loss.node is None:
        loss.grad += 1.0
        return
    upstream: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for t in _collect(loss):
        g = upstream.pop(id(t), None)
        if g is None:
            continue
        grads = t.node.backward_fn(g)
        for inp, gi in zip(t.node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad += gi
            elif id(inp) in upstream:
                upstream[id(inp)] = upstream[id(inp)] + gi
            else:
                upstream[id(inp)] = gi


# ---------------------------------------------------------------------------
# verification


def grad_check(build_loss: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-4) -> float:
    """Worst symmetric relative error between analytic and central-difference gradients.

    ``build_loss`` must rebuild the graph from the current parameter values on
    every call. Relative error is ``|a - n| / max(1, |a|, |n|)``.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = build_loss()
    if not np.isfinite(loss.values).all():
        raise NumericError("loss is not finite")
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.values.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            with no_grad():
                up = build_loss().item()
            flat[i] = orig - step
            with no_grad():
                down = build_loss().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError("loss is not finite under perturbation")
            numeric = (up - down) / (2 * step)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst


def adam_step(params: Dict[str, Tensor], m: Dict[str, np.ndarray], v: Dict[str, np.ndarray],
              step: int, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
              weight_decay: float = 0.0) -> int:
    """One adaptive-moment update with decoupled weight decay, in place.

    ``m`` and ``v`` hold the first and second moments keyed like ``params``.
    Returns the incremented step counter.
    """
    if lr < 0:
        raise ContractError("learning rate must be non-negative")
    b1, b2 = betas
    step += 1
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name, p in params.items():
        mk, vk = m[name], v[name]
        if mk.shape != p.values.shape or vk.shape != p.values.shape:
            raise DimensionError(f"moment shape mismatch for {name}")
        g = p.grad
        mk *= b1
        mk += (1.0 - b1) * g
        vk *= b2
        vk += (1.0 - b2) * (g * g)
        if lr == 0.0:
            continue
        update = (mk / c1) / (np.sqrt(vk / c2) + eps)
        if weight_decay:
            update += weight_decay * p.values
        p.values -= lr * update
    return step
