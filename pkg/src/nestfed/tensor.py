"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Only the handful of primitives a small residual network needs are provided.
A tensor is *tracked* when it was created by :meth:`Tape.watch` or produced by
an op with at least one tracked input; untracked tensors are constants and
never show up in the gradient map.

    tape = Tape()
    w = tape.watch(np.ones((3, 2)), "w")
    loss, _ = softmax_xent(affine(Tensor(x), w, Tensor(np.zeros(2))), labels)
    grads = backward(tape, loss)   # {"w": array of shape (3, 2)}
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, DegenerateBatchError, DimensionError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Tensor:
    __slots__ = ("data", "tape", "index", "name")

    def __init__(self, data, tape: Tape | None = None, index: int = -1, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.index = index
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{flag}, tracked={self.tracked})"

    def __add__(self, other):
        return add(self, other)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of the ops applied to tracked tensors."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[str, Tensor] = {}
        self._count = 0

    def _new_index(self) -> int:
        self._count += 1
        return self._count - 1

    def watch(self, array, name: str) -> Tensor:
        """Register ``array`` (not copied) as a differentiable leaf."""
        if name in self.leaves:
            raise ContractError(f"leaf {name!r} watched twice")
        t = Tensor(array, self, self._new_index(), name)
        if t.data is not array and isinstance(array, np.ndarray):
            raise ContractError(f"leaf {name!r} must be a float64 ndarray to be updated in place")
        self.leaves[name] = t
        return t

    def record(self, out_data, parents, backward) -> Tensor:
        out = Tensor(out_data, self, self._new_index())
        self.nodes.append(_Node(out, parents, backward))
        return out


def _tape_of(*tensors) -> Tape | None:
    tape = None
    for t in tensors:
        if t is not None and t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError("tensors from different tapes mixed in one op")
            tape = t.tape
    return tape


def _emit(out_data, parents, backward) -> Tensor:
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(out_data)
    return tape.record(out_data, parents, backward)


def _check_finite(data, what):
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {what}")


# ---------------------------------------------------------------- primitives


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape (B, I), ``w`` (I, O) and ``b`` (O,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"affine: cannot multiply {x.shape} by {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"affine: bias shape {b.shape} does not match {w.shape[1]} outputs")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def back(g):
        gb = g.sum(axis=0) if b is not None else None
        return g @ w.data.T, x.data.T @ g, gb

    parents = (x, w, b) if b is not None else (x, w)
    return _emit(out, parents, back if b is not None else (lambda g: back(g)[:2]))


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int | None = None) -> Tensor:
    """Cross-correlation of (B, C, H, W) input with (F, C, kh, kw) filters.

    Output spatial size is ``floor((H + 2*pad - kh) / stride) + 1``, which is
    ``ceil(H / stride)`` for 3x3/pad 1 and 1x1/pad 0.
    """
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {k.shape}")
    B, C, H, W = x.shape
    F, Ck, kh, kw = k.shape
    if C != Ck:
        raise DimensionError(f"conv2d: input has {C} channels, kernel expects {Ck}")
    if stride not in (1, 2):
        raise DimensionError(f"conv2d: stride must be 1 or 2, got {stride}")
    if pad is None:
        pad = (kh - 1) // 2
    if H + 2 * pad < kh or W + 2 * pad < kw:
        raise DimensionError(f"conv2d: input {H}x{W} too small for {kh}x{kw} kernel")
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    out = np.zeros((B, F, Ho, Wo))
    hs = slice(None)
    for di in range(kh):
        for dj in range(kw):
            hs = slice(di, di + stride * (Ho - 1) + 1, stride)
            ws = slice(dj, dj + stride * (Wo - 1) + 1, stride)
            patch = xp[:, :, hs, ws]
            out += np.einsum("bchw,fc->bfhw", patch, k.data[:, :, di, dj], optimize=True)

    def back(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(k.data)
        for di in range(kh):
            for dj in range(kw):
                hs = slice(di, di + stride * (Ho - 1) + 1, stride)
                ws = slice(dj, dj + stride * (Wo - 1) + 1, stride)
                gk[:, :, di, dj] = np.einsum("bfhw,bchw->fc", g, xp[:, :, hs, ws], optimize=True)
                gxp[:, :, hs, ws] += np.einsum("bfhw,fc->bchw", g, k.data[:, :, di, dj], optimize=True)
        gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        return gx, gk

    return _emit(out, (x, k), back)


def batchnorm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running: tuple[np.ndarray, np.ndarray] | None,
    train: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalization over every axis except axis 1.

    In train mode the batch statistics are used and ``running`` (mean, var)
    arrays are updated in place with an exponential moving average (unbiased
    variance). In eval mode ``running`` is used as-is.
    """
    if x.data.ndim not in (2, 4):
        raise DimensionError(f"batchnorm: expected 2-d or 4-d input, got {x.shape}")
    C = x.shape[1]
    if scale.shape != (C,) or shift.shape != (C,):
        raise DimensionError(f"batchnorm: {C} channels but scale {scale.shape} / shift {shift.shape}")
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    bshape = (1, C) if x.data.ndim == 2 else (1, C, 1, 1)
    n = x.size // C

    if train:
        if x.shape[0] < 2:
            raise DegenerateBatchError("batchnorm: train mode needs at least 2 samples per batch")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running is not None:
            rmean, rvar = running
            rmean *= 1.0 - momentum
            rmean += momentum * mu
            rvar *= 1.0 - momentum
            rvar += momentum * var * (n / (n - 1))
    else:
        if running is None:
            raise ContractError("batchnorm: eval mode requires running statistics")
        mu, var = running
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)
    inv_b = inv.reshape(bshape)

    def back(g):
        gscale = (g * xhat).sum(axis=axes)
        gshift = g.sum(axis=axes)
        gxhat = g * scale.data.reshape(bshape)
        if train:
            gx = inv_b / n * (
                n * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxhat * inv_b
        return gx, gscale, gshift

    return _emit(out, (x, scale, shift), back)


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _emit(np.where(keep, x.data, 0.0), (x,), lambda g: (g * keep,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every entry of ``x`` by the scalar tensor ``s``."""
    if s.size != 1:
        raise DimensionError(f"scale_by: factor must be a scalar, got shape {s.shape}")
    sv = s.data.reshape(())
    return _emit(x.data * sv, (x, s), lambda g: (g * sv, np.asarray((g * x.data).sum()).reshape(s.shape)))


def take(v: Tensor, i: int) -> Tensor:
    """Scalar entry ``i`` of a 1-d tensor."""
    if v.data.ndim != 1:
        raise DimensionError(f"take: expected a vector, got {v.shape}")

    def back(g):
        gv = np.zeros_like(v.data)
        gv[i] = g.reshape(())
        return (gv,)

    return _emit(v.data[i:i + 1].copy(), (v,), back)


def mean_pool(x: Tensor) -> Tensor:
    """Global average over the spatial axes of a (B, C, H, W) tensor."""
    if x.data.ndim != 4:
        raise DimensionError(f"mean_pool: expected 4-d input, got {x.shape}")
    B, C, H, W = x.shape
    return _emit(x.data.mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / (H * W), x.shape).copy(),))


def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a shape-(1,) tensor."""
    return _emit(np.asarray([x.data.sum()]), (x,), lambda g: (np.full(x.shape, g.reshape(())),))


def softmax_xent(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_xent: logits must be (B, K), got {logits.shape}")
    B, K = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (B,):
        raise DimensionError(f"softmax_xent: {B} rows but {labels.shape} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise IndexError(f"softmax_xent: label outside [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    probs = np.exp(logp)
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def back(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (d * (g.reshape(()) / B),)

    return _emit(np.asarray([loss]), (logits,), back), probs


# ------------------------------------------------------------------ training


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse-mode sweep from scalar ``loss``; returns gradients by leaf name.

    Leaves that the loss does not depend on are absent from the result.
    """
    if loss.tape is not tape:
        raise ContractError("backward: loss was not produced on this tape")
    if loss.size != 1:
        raise ContractError(f"backward: root must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.index: np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.out.index, None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if parent is None or parent.tape is None or pg is None:
                continue
            if parent.index in grads:
                grads[parent.index] = grads[parent.index] + pg
            else:
                grads[parent.index] = pg
    out = {}
    for name, leaf in tape.leaves.items():
        g = grads.get(leaf.index)
        if g is not None:
            _check_finite(g, f"gradient of {name}")
            out[name] = g
    return out


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
    """Plain SGD, in place: ``p -= lr * g``. Parameters without a gradient are left alone."""
    if not lr >= 0 or math.isinf(lr):
        raise ValueError(f"learning rate must be a finite non-negative number, got {lr}")
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise DimensionError(f"sgd_step: {name} has shape {p.shape} but gradient {g.shape}")
        if lr:
            p -= lr * g
    return params
