"""Small dense-tensor engine with reverse-mode autodiff and masked SGD.

Everything runs in float64 on numpy arrays. Each differentiable op returns a
``Tensor`` that remembers its parents and a closure mapping the output
gradient to parent gradients; ``backward`` walks that graph once in reverse
topological order and returns a :class:`GradTape`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NumericalError

DTYPE = np.float64

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite value produced by {op}")
    return arr


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _check_finite(np.asarray(data, dtype=DTYPE), op)
    out.name = None
    out.requires_grad = any(p.requires_grad or p._grad_fn is not None for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    else:
        out._parents = ()
        out._grad_fn = None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementary ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), grad_fn, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError("transpose expects a 2-d tensor")
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting; gradients are un-broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def mul(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return _make(ad * bd, (a, b), grad_fn, "mul")


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# layers


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` stored one output neuron per row."""
    out = matmul(x, transpose(w))
    return add(out, b) if b is not None else out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-d cross-correlation (no kernel flip) with zero padding.

    ``x`` is N×I×H×W and ``w`` is O×I×K×K.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError("conv2d expects 4-d input and weight")
    n, c, h, wd = x.shape
    o, i, k, k2 = w.shape
    if i != c or k != k2:
        raise DimensionError(f"conv2d: weight {w.shape} incompatible with input {x.shape}")
    if stride < 1:
        raise DimensionError("conv2d: stride must be >= 1")
    if k > h + 2 * padding or k > wd + 2 * padding:
        raise DimensionError(f"conv2d: kernel {k} larger than padded input {h}x{wd}+{padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    wdata = w.data
    out = np.tensordot(win, wdata, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def grad_fn(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gwin = np.tensordot(g, wdata, axes=([1], [0]))  # N,Ho,Wo,I,K,K
        gxp = np.zeros_like(xp)
        for a in range(k):
            for bb in range(k):
                gxp[:, :, a:a + stride * ho:stride, bb:bb + stride * wo:stride] += \
                    gwin[:, :, :, :, a, bb].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return gx, gw

    y = _make(out, (x, w), grad_fn, "conv2d")
    if b is not None:
        y = add(y, reshape(b, (1, o, 1, 1)))
    return y


def avg_pool2d(x: Tensor, size: int) -> Tensor:
    n, c, h, w = x.shape
    if h % size or w % size:
        raise DimensionError(f"avg_pool2d: {h}x{w} not divisible by {size}")
    out = x.data.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))
    scale = 1.0 / (size * size)

    def grad_fn(g):
        return (np.repeat(np.repeat(g, size, axis=2), size, axis=3) * scale,)

    return _make(out, (x,), grad_fn, "avg_pool2d")


@dataclass
class RunningStats:
    """Per-channel running mean/variance used by batch-norm in eval mode."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels, dtype=DTYPE), np.ones(channels, dtype=DTYPE))


def batchnorm(x: Tensor, scale: Tensor, shift: Tensor, stats: RunningStats,
              mode: str = "train", frozen: np.ndarray | None = None,
              momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Batch normalization over the channel axis (axis 1) of a 2-d or 4-d input.

    ``mode`` is ``"train"`` (batch statistics, running stats updated),
    ``"eval"`` (running statistics) or ``"stats_frozen"`` (batch statistics,
    running stats of channels flagged in ``frozen`` left untouched).
    """
    if x.data.ndim not in (2, 4):
        raise DimensionError("batchnorm expects a 2-d or 4-d input")
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise DimensionError(f"batchnorm: affine params must have length {c}")
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.data.ndim == 2 else (1, c, 1, 1)
    xd = x.data
    gamma = scale.data.reshape(bshape)

    if mode == "eval":
        inv = 1.0 / np.sqrt(stats.var + eps)
        xhat = (xd - stats.mean.reshape(bshape)) * inv.reshape(bshape)

        def grad_fn(g):
            return (g * gamma * inv.reshape(bshape),
                    np.sum(g * xhat, axis=axes), np.sum(g, axis=axes))
    elif mode in ("train", "stats_frozen"):
        m = xd.size // c
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mean.reshape(bshape)) * inv.reshape(bshape)
        unbiased = var * m / max(m - 1, 1)
        upd = np.ones(c, dtype=bool)
        if mode == "stats_frozen" and frozen is not None:
            upd = ~np.asarray(frozen, dtype=bool)
        stats.mean[upd] = (1 - momentum) * stats.mean[upd] + momentum * mean[upd]
        stats.var[upd] = (1 - momentum) * stats.var[upd] + momentum * unbiased[upd]
        inv_b = inv.reshape(bshape)

        def grad_fn(g):
            gx_hat = g * gamma
            s1 = gx_hat.sum(axis=axes).reshape(bshape)
            s2 = (gx_hat * xhat).sum(axis=axes).reshape(bshape)
            gx = inv_b / m * (m * gx_hat - s1 - xhat * s2)
            return gx, np.sum(g * xhat, axis=axes), np.sum(g, axis=axes)
    else:
        raise ContractError(f"unknown batchnorm mode {mode!r}")

    out = xhat * gamma + shift.data.reshape(bshape)
    return _make(out, (x, scale, shift), grad_fn, "batchnorm")


def softmax_xent(logits: Tensor, labels, active_classes: Iterable[int]) -> Tensor:
    """Mean cross-entropy with the softmax restricted to ``active_classes``.

    Logits outside the active set are excluded from the normalizer and
    receive exactly zero gradient.
    """
    if logits.data.ndim != 2:
        raise DimensionError("softmax_xent expects N x C logits")
    n, c = logits.shape
    active = np.array(sorted(set(int(a) for a in active_classes)), dtype=np.int64)
    if active.size == 0 or active[0] < 0 or active[-1] >= c:
        raise ContractError(f"active classes must be a non-empty subset of [0, {c})")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    pos = np.searchsorted(active, labels)
    if np.any(pos >= active.size) or np.any(active[np.minimum(pos, active.size - 1)] != labels):
        raise ContractError("label outside the active class set")

    z = logits.data[:, active]
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    denom = ez.sum(axis=1, keepdims=True)
    lse = np.log(denom) + zmax
    rows = np.arange(n)
    loss = float(np.mean(lse[:, 0] - z[rows, pos]))
    probs = ez / denom

    def grad_fn(g):
        gz = probs.copy()
        gz[rows, pos] -= 1.0
        gz *= g / n
        full = np.zeros((n, c), dtype=DTYPE)
        full[:, active] = gz
        return (full,)

    return _make(np.array(loss), (logits,), grad_fn, "softmax_xent")


# ---------------------------------------------------------------------------
# backward


@dataclass
class GradTape:
    """Gradients of one backward pass, keyed by parameter identity."""

    order: list[Tensor] = field(default_factory=list)
    grads: dict[int, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, param: Tensor) -> np.ndarray:
        g = self.grads.get(id(param))
        return np.zeros_like(param.data) if g is None else g

    def __contains__(self, param: Tensor) -> bool:
        return id(param) in self.grads


def backward(loss: Tensor) -> GradTape:
    """Reverse-mode sweep from a scalar ``loss``.

    Leaves with ``requires_grad`` get an entry in the returned tape; any
    parameter not reachable from ``loss`` reads back as zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tape = GradTape()
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None:
            continue
        if node._grad_fn is None:
            if node.requires_grad:
                tape.order.append(node)
                tape.grads[id(node)] = _check_finite(g, "backward")
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not (parent.requires_grad or parent._grad_fn is not None):
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def reset(self):
        self.buffers.clear()


def sgd_step(params: Mapping[str, Tensor], tape: GradTape, state: OptimizerState,
             lr: float, freeze_mask: Mapping[str, np.ndarray] | None = None):
    """One SGD-with-momentum step, skipping frozen entries.

    For free entries ``v = momentum*v + (g + wd*w)`` then ``w -= lr*v``.
    Frozen entries keep their exact bits and their momentum is held at zero.
    """
    for name, p in params.items():
        frozen = None
        if freeze_mask is not None and name in freeze_mask:
            frozen = np.asarray(freeze_mask[name], dtype=bool)
            if frozen.shape != p.shape:
                raise ContractError(f"freeze mask for {name} has shape {frozen.shape}, "
                                    f"parameter has {p.shape}")
            if frozen.all():
                buf = state.buffers.get(name)
                if buf is not None:
                    buf[...] = 0.0
                continue
        v = state.buffers.get(name)
        if v is None:
            v = state.buffers[name] = np.zeros_like(p.data)
        g = tape[p]
        v *= state.momentum
        v += g + state.weight_decay * p.data
        if frozen is None:
            p.data -= lr * v
        else:
            v[frozen] = 0.0
            np.subtract(p.data, lr * v, out=p.data, where=~frozen)
    return params


def lr_at(epoch: int, total_epochs: int, base_lr: float) -> float:
    """Step schedule: divide by 10 at 40% and again at 80% of training."""
    if epoch < 0.4 * total_epochs:
        return base_lr
    if epoch < 0.8 * total_epochs:
        return base_lr / 10
    return base_lr / 100
