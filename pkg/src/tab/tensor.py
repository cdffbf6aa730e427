"""Minimal dense-tensor library with reverse-mode autodiff.

Design: define-by-run. Ops executed inside a ``with Tape()`` block append
nodes in execution order; ``backward`` replays the tape in exact reverse
order. Data is float32 by default (float64 is accepted for high-precision
verification); reductions that feed losses accumulate in float64.

No broadcasting beyond bias-add. Every op validates shapes up front and
every produced tensor is checked for NaN/Inf.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from tab.errors import ContractError, DimensionError

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """Dense n-d float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise ContractError("tensor contains NaN or Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("inputs", "out", "bwd")

    def __init__(self, inputs, out, bwd):
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


class Tape:
    """Ordered record of executed differentiable ops (a valid topological order)."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(inputs: Sequence[Tensor], out: Tensor, bwd: Callable) -> Tensor:
    # outside a Tape nothing is recorded, so the output is plain data
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(tuple(inputs), out, bwd))
        out._tape = tape
    return out


def _check_same_dtype(*tensors: Tensor):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ContractError(f"mixed tensor dtypes: {sorted(map(str, dtypes))}")


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """C = A @ B for 2-d tensors; gradient flows to both inputs."""
    _check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-d tensors, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _record((a, b), out, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; shapes must match exactly (no broadcasting)."""
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def bwd(g):
        return g, g

    return _record((a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)

    def bwd(g):
        return g * b.data, g * a.data

    return _record((a, b), out, bwd)


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * a.dtype.type(s))

    def bwd(g):
        return (g * a.dtype.type(s),)

    return _record((a,), out, bwd)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """The one sanctioned broadcast: add a per-channel bias.

    Accepts x of shape (N, K) with b (K,), or (B, C, H, W) with b (C,).
    """
    _check_same_dtype(x, b)
    if b.data.ndim != 1:
        raise DimensionError(f"bias must be 1-d, got {b.shape}")
    if x.data.ndim == 2:
        if x.shape[1] != b.shape[0]:
            raise DimensionError(f"bias length {b.shape[0]} != feature dim {x.shape[1]}")
        out = Tensor(x.data + b.data)

        def bwd(g):
            return g, g.sum(axis=0)

    elif x.data.ndim == 4:
        if x.shape[1] != b.shape[0]:
            raise DimensionError(f"bias length {b.shape[0]} != channel dim {x.shape[1]}")
        out = Tensor(x.data + b.data[None, :, None, None])

        def bwd(g):
            return g, g.sum(axis=(0, 2, 3))

    else:
        raise DimensionError(f"bias_add expects 2-d or 4-d input, got {x.shape}")
    return _record((x, b), out, bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))

    def bwd(g):
        return (g * (x.data > 0),)

    return _record((x,), out, bwd)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    # xp: padded (B, C, Hp, Wp) -> (B*Ho*Wo, C*kh*kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b * ho * wo, c * kh * kw
    )
    return cols, ho, wo


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of (B, C_in, H, W) with (C_out, C_in, k, k)."""
    _check_same_dtype(x, w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape}, {w.shape}")
    bsz, cin, h, wdt = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d channel mismatch: input {cin}, kernel {cin_w}")
    if stride < 1:
        raise DimensionError(f"conv2d stride must be >= 1, got {stride}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wdt + 2 * padding - kw) // stride + 1
    if kh > h + 2 * padding or kw > wdt + 2 * padding or ho < 1 or wo < 1:
        raise DimensionError(
            f"conv2d output would be empty: input {h}x{wdt}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols, ho2, wo2 = _im2col(xp, kh, kw, stride)
    assert (ho2, wo2) == (ho, wo)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out_mat = cols @ wmat.T
    out = Tensor(
        np.ascontiguousarray(out_mat.reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2))
    )

    def bwd(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(bsz * ho * wo, cout)
        # recompute cols instead of keeping them alive on the tape (memory)
        if padding:
            xpb = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        else:
            xpb = x.data
        cols_b, _, _ = _im2col(xpb, kh, kw, stride)
        dw = (gmat.T @ cols_b).reshape(w.shape)
        dcols = gmat @ wmat
        dwin = dcols.reshape(bsz, ho, wo, cin, kh, kw)
        dxp = np.zeros_like(xpb)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + (ho - 1) * stride + 1 : stride,
                    j : j + (wo - 1) * stride + 1 : stride] += dwin[:, :, :, :, i, j].transpose(
                    0, 3, 1, 2
                )
        if padding:
            dx = dxp[:, :, padding:-padding, padding:-padding]
        else:
            dx = dxp
        return dx, dw

    return _record((x, w), out, bwd)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-instance, per-channel normalization over spatial dims, with affine."""
    _check_same_dtype(x, gamma, beta)
    if x.data.ndim != 4:
        raise DimensionError(f"instance_norm expects 4-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"affine params must be ({c},), got {gamma.shape}, {beta.shape}")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mu) * inv_std
    out = Tensor(gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None])

    def bwd(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dy = g * gamma.data[None, :, None, None]
        m1 = dy.mean(axis=(2, 3), keepdims=True)
        m2 = (dy * xhat).mean(axis=(2, 3), keepdims=True)
        dx = inv_std * (dy - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return _record((x, gamma, beta), out, bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C) spatial mean."""
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool expects 4-d input, got {x.shape}")
    _, _, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / x.dtype.type(h * w), x.shape).copy(),)

    return _record((x,), out, bwd)


def l2_normalize_rows(x: Tensor, eps: float = 0.0) -> Tensor:
    """Scale each row of (N, D) to unit Euclidean norm."""
    if x.data.ndim != 2:
        raise DimensionError(f"l2_normalize_rows expects 2-d input, got {x.shape}")
    norms = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=1, keepdims=True))
    if np.any(norms <= eps):
        raise ContractError("cannot normalize a zero row")
    norms = norms.astype(x.dtype)
    y = x.data / norms
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * dot) / norms,)

    return _record((x,), out, bwd)


def sum_all(x: Tensor) -> Tensor:
    """Reduce to a scalar by summing every element (float64 accumulation)."""
    out = Tensor(np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype))

    def bwd(g):
        return (np.full(x.shape, float(g), dtype=x.dtype),)

    return _record((x,), out, bwd)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of -log softmax(logits)[target]; float64 accumulation."""
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects 2-d logits, got {logits.shape}")
    t = np.asarray(targets)
    if t.ndim != 1 or t.shape[0] != logits.shape[0]:
        raise DimensionError(
            f"targets must be 1-d of length {logits.shape[0]}, got shape {t.shape}"
        )
    if not np.issubdtype(t.dtype, np.integer):
        raise DimensionError(f"targets must be integer class indices, got {t.dtype}")
    bsz, k = logits.shape
    if t.min() < 0 or t.max() >= k:
        raise IndexError(f"target index out of range [0, {k})")
    z = logits.data.astype(np.float64)
    zmax = z.max(axis=1, keepdims=True)
    zs = z - zmax
    lse = np.log(np.exp(zs).sum(axis=1, keepdims=True))
    logp = zs - lse
    loss = -logp[np.arange(bsz), t].mean()
    out = Tensor(np.asarray(loss, dtype=logits.dtype))

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(bsz), t] -= 1.0
        return ((float(g) / bsz) * p.astype(logits.dtype),)

    return _record((logits,), out, bwd)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def backward(loss: Tensor, params: Optional[Sequence[Tensor]] = None):
    """Populate ``.grad`` on every reachable leaf tensor with requires_grad.

    ``params``, if given, are guaranteed a grad buffer afterwards (zeros when
    the loss does not depend on them). Grads accumulate across calls.
    """
    if loss.data.ndim != 0:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        if loss.requires_grad:
            raise ContractError("loss is not on a tape; run the forward pass inside Tape()")
        tape_nodes = []
    else:
        tape_nodes = tape.nodes
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    produced = {id(n.out) for n in tape_nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape_nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.bwd(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t
    for key, t in leaves.items():
        g = grads[key]
        t.grad = g.copy() if t.grad is None else t.grad + g
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class SGD:
    """Plain gradient descent: p <- p - lr * g."""

    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise ContractError("non-finite gradient; aborting optimizer step")
            p.data -= p.dtype.type(self.lr) * p.grad

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class Adam:
    """Adam with bias correction."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise ContractError("non-finite gradient; aborting optimizer step")
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            p.data -= (p.dtype.type(self.lr) * mhat / (np.sqrt(vhat) + self.eps)).astype(
                p.dtype
            )

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def make_optimizer(name: str, params: Sequence[Tensor], lr: float):
    if name == "sgd":
        return SGD(params, lr)
    if name == "adam":
        return Adam(params, lr)
    raise ContractError(f"unknown optimizer {name!r}")
