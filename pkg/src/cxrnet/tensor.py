"""Shaped real-valued arrays with reverse-mode automatic differentiation.

Every operation returns a new Tensor and records its inputs, so the graph
built during a forward pass doubles as the tape: tensors carry a monotonically
increasing creation sequence number, and creation order is by construction a
valid topological order (inputs exist before their consumers). `backward`
walks that order in reverse.

Arrays are float32 by default; gradient-check tests build float64 graphs
because finite differences are unreliable at single precision.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .errors import NumericalError

DEFAULT_DTYPE = np.float32

_SEQ = itertools.count()
_GRAD_ENABLED = True


class TensorError(ValueError):
    """Shape or precondition violation in a tensor operation."""


@contextmanager
def no_grad():
    """Disable graph recording; intermediates are freed as references drop."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "_backward", "_seq", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward: Callable[[np.ndarray], None] | None = None,
        name: str | None = None,
        dtype=None,
    ):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite values in tensor{f' {name!r}' if name else ''}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents if _GRAD_ENABLED else ()
        self._backward = backward if _GRAD_ENABLED else None
        self._seq = next(_SEQ)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, dtype={self.data.dtype})"


def parameter(data, name: str, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    return Tensor(data, parents=parents, backward=backward)


def tape_nodes(root: Tensor) -> list[Tensor]:
    """All nodes reachable from `root`, in creation (topological) order."""
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t.parents)
    nodes.sort(key=lambda t: t._seq)
    return nodes


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate gradients of a scalar loss into every reachable node.

    Parameters listed in `params` but absent from the graph get zero
    gradients, per the contract that unused parameters do not influence
    the loss.
    """
    if loss.data.size != 1:
        raise TensorError(f"backward requires a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape_nodes(loss)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def _out_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _windows(padded: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, Ho, Wo, kh, kw) view of all stride-spaced windows; no copy.
    win = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation over NCHW input with an OC×IC×kH×kW kernel."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise TensorError("conv2d expects NCHW input and OIHW kernel")
    if stride < 1 or padding < 0:
        raise TensorError("conv2d requires stride >= 1 and padding >= 0")
    n, c, h, w = x.shape
    oc, ic, kh, kw = kernel.shape
    if c != ic:
        raise TensorError(f"conv2d channel mismatch: input has {c} channels, kernel expects {ic}")
    ho, wo = _out_extent(h, kh, stride, padding), _out_extent(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise TensorError(f"conv2d output extent {ho}x{wo} is not positive")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _windows(xp, kh, kw, stride)
    out = np.tensordot(win, kernel.data, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, OC)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        if bias.shape != (oc,):
            raise TensorError(f"conv2d bias shape {bias.shape} != ({oc},)")
        out = out + bias.data.reshape(1, oc, 1, 1)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g: np.ndarray) -> None:
        kernel._accumulate(np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))
        if bias is not None:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        # Scatter back through the windows: output (i,j) consumed
        # padded[(i*stride + u, j*stride + v)] for each kernel offset (u, v).
        cols = np.tensordot(g, kernel.data, axes=([1], [0]))  # (N, Ho, Wo, C, kh, kw)
        dxp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                dxp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += (
                    cols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
                )
        if padding:
            dxp = dxp[:, :, padding : padding + h, padding : padding + w]
        x._accumulate(dxp)

    return _result(out, parents, bw)


class BatchNormResult(NamedTuple):
    out: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.9,
) -> BatchNormResult:
    """Per-channel normalization over (N, H, W).

    Train mode normalizes by batch statistics (population variance) and
    returns running stats advanced by `new = momentum*old + (1-momentum)*batch`;
    eval mode normalizes by the running stats unchanged. The running stats are
    returned, never mutated in place.
    """
    if eps <= 0:
        raise TensorError("batch_norm requires eps > 0")
    if x.data.ndim != 4:
        raise TensorError("batch_norm expects NCHW input")
    c = x.shape[1]
    for arr, label in ((gamma.data, "gamma"), (beta.data, "beta"), (running_mean, "running mean"), (running_var, "running var")):
        if arr.shape != (c,):
            raise TensorError(f"batch_norm {label} shape {arr.shape} != ({c},)")

    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        new_mean = momentum * running_mean + (1.0 - momentum) * mu
        new_var = momentum * running_var + (1.0 - momentum) * var
    else:
        mu, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def bw(g: np.ndarray) -> None:
        gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        beta._accumulate(g.sum(axis=(0, 2, 3)))
        gi = g * (gamma.data * inv).reshape(1, c, 1, 1)
        if training:
            # Batch statistics depend on x, so center the incoming gradient.
            m_g = gi.mean(axis=(0, 2, 3), keepdims=True)
            m_gx = (gi * xhat).mean(axis=(0, 2, 3), keepdims=True)
            x._accumulate(gi - m_g - xhat * m_gx)
        else:
            x._accumulate(gi)

    return BatchNormResult(_result(out, (x, gamma, beta), bw), new_mean, new_var)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at 0 is 0."""
    mask = x.data > 0

    def bw(g: np.ndarray) -> None:
        x._accumulate(g * mask)

    return _result(np.where(mask, x.data, 0), (x,), bw)


def pool(
    x: Tensor,
    kind: str,
    window: int | tuple[int, int],
    stride: int,
    padding: int = 0,
) -> Tensor:
    """Per-window max or mean over NCHW input, same shape rule as conv2d."""
    if kind not in ("max", "avg"):
        raise TensorError(f"unknown pool kind {kind!r}")
    if x.data.ndim != 4:
        raise TensorError("pool expects NCHW input")
    kh, kw = (window, window) if isinstance(window, int) else window
    n, c, h, w = x.shape
    ho, wo = _out_extent(h, kh, stride, padding), _out_extent(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise TensorError(f"pool output extent {ho}x{wo} is not positive")

    fill = -np.inf if kind == "max" else 0.0
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=fill)
    win = _windows(xp, kh, kw, stride)

    if kind == "max":
        flat = win.reshape(n, c, ho, wo, kh * kw)
        arg = flat.argmax(axis=-1)  # first max wins: deterministic on ties
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

        def bw(g: np.ndarray) -> None:
            dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
            for idx in range(kh * kw):
                u, v = divmod(idx, kw)
                dxp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += g * (arg == idx)
            x._accumulate(dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp)

    else:
        out = win.mean(axis=(-2, -1))
        scale = 1.0 / (kh * kw)

        def bw(g: np.ndarray) -> None:
            dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
            gs = g * scale
            for u in range(kh):
                for v in range(kw):
                    dxp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += gs
            x._accumulate(dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp)

    return _result(np.ascontiguousarray(out), (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Collapse each channel to its spatial mean: NCHW -> N×C."""
    if x.data.ndim != 4:
        raise TensorError("global_avg_pool expects NCHW input")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bw(g: np.ndarray) -> None:
        x._accumulate(np.broadcast_to(g[:, :, None, None], (n, c, h, w)) / (h * w))

    return _result(out, (x,), bw)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along channels, preserving argument order."""
    if not inputs:
        raise TensorError("concat_channels requires at least one input")
    first = inputs[0].shape
    for t in inputs[1:]:
        if t.data.ndim != 4 or t.shape[0] != first[0] or t.shape[2:] != first[2:]:
            raise TensorError(f"concat_channels batch/spatial mismatch: {first} vs {t.shape}")
    out = np.concatenate([t.data for t in inputs], axis=1)
    offsets = np.cumsum([0] + [t.shape[1] for t in inputs])

    def bw(g: np.ndarray) -> None:
        for t, lo, hi in zip(inputs, offsets[:-1], offsets[1:]):
            t._accumulate(g[:, lo:hi])

    return _result(out, tuple(inputs), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map per row: N×F @ F×K (+ bias K)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise TensorError("linear expects N×F input and F×K weight")
    if x.shape[1] != weight.shape[0]:
        raise TensorError(f"linear feature mismatch: input {x.shape[1]} vs weight {weight.shape[0]}")
    out = x.data @ weight.data
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise TensorError(f"linear bias shape {bias.shape} != ({weight.shape[1]},)")
        out = out + bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g: np.ndarray) -> None:
        x._accumulate(g @ weight.data.T)
        weight._accumulate(x.data.T @ g)
        if bias is not None:
            bias._accumulate(g.sum(axis=0))

    return _result(out, parents, bw)


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction; rows sum to 1."""
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise TensorError("softmax expects an N×C input with C >= 2")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g: np.ndarray) -> None:
        logits._accumulate(p * (g - (g * p).sum(axis=1, keepdims=True)))

    return _result(p, (logits,), bw)
