"""Dense channels-first tensors with tape-based reverse-mode gradients.

Only the operators the fusion network needs are provided. Feature maps are
C x H x W, optionally with a leading batch axis (N x C x H x W); every
spatial operator accepts either rank and returns the rank it was given.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit


class NonFiniteError(FloatingPointError):
    """Raised when an operator produces NaN or Inf."""


class ShapeError(ValueError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def sum(self):
        return sum_all(self)

    def backward(self):
        """Populate ``.grad`` on every leaf reachable from this scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar root, got shape {self.shape}")
        seed = np.ones_like(self.data)
        order = _topological_order(self)
        pending = {id(self): seed}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _check_finite(arr: np.ndarray, op: str):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as4d(t: Tensor):
    if t.data.ndim == 4:
        return t.data, False
    if t.data.ndim == 3:
        return t.data[None], True
    raise ShapeError(f"expected C x H x W or N x C x H x W, got {t.shape}")


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    dilation: tuple = (1, 1)
    has_bias: bool = True

    def __post_init__(self):
        for field in ("kernel", "stride", "padding", "dilation"):
            v = getattr(self, field)
            if isinstance(v, int):
                object.__setattr__(self, field, (v, v))
            else:
                object.__setattr__(self, field, tuple(int(a) for a in v))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be positive")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.dilation) < 1 or min(self.padding) < 0:
            raise ShapeError(f"invalid convolution geometry: {self}")

    def output_size(self, h: int, w: int) -> tuple:
        (kh, kw), (sh, sw), (ph, pw), (dh, dw) = self.kernel, self.stride, self.padding, self.dilation
        ho = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
        wo = (w + 2 * pw - dw * (kw - 1) - 1) // sw + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"non-positive output size {ho}x{wo} for input {h}x{w} and {self}")
        return ho, wo

    def transposed_output_size(self, h: int, w: int) -> tuple:
        (kh, kw), (sh, sw), (ph, pw), (dh, dw) = self.kernel, self.stride, self.padding, self.dilation
        ho = (h - 1) * sh - 2 * ph + dh * (kh - 1) + 1
        wo = (w - 1) * sw - 2 * pw + dw * (kw - 1) + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"non-positive output size {ho}x{wo} for input {h}x{w} and {self}")
        return ho, wo


def _taps(spec: ConvSpec, ho: int, wo: int):
    """Yield (a, b, row-slice, col-slice) into the padded input for each kernel tap."""
    (kh, kw), (sh, sw), (dh, dw) = spec.kernel, spec.stride, spec.dilation
    for a in range(kh):
        r0 = a * dh
        rs = slice(r0, r0 + sh * (ho - 1) + 1, sh)
        for b in range(kw):
            c0 = b * dw
            yield a, b, rs, slice(c0, c0 + sw * (wo - 1) + 1, sw)


def _bias_data(bias):
    return None if bias is None else as_tensor(bias).data


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    xd, squeeze = _as4d(x)
    n, c, h, w = xd.shape
    kh, kw = spec.kernel
    if weight.shape != (spec.out_channels, spec.in_channels, kh, kw):
        raise ShapeError(f"weight shape {weight.shape} does not match {spec}")
    if c != spec.in_channels:
        raise ShapeError(f"input has {c} channels, spec expects {spec.in_channels}")
    if (bias is not None) != spec.has_bias:
        raise ShapeError("bias presence does not match spec.has_bias")
    ho, wo = spec.output_size(h, w)
    ph, pw = spec.padding
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    wd = weight.data
    acc = np.zeros((spec.out_channels, n, ho, wo), dtype=np.result_type(xd, wd))
    for a, b, rs, cs in _taps(spec, ho, wo):
        acc += np.tensordot(wd[:, :, a, b], xp[:, :, rs, cs], axes=([1], [1]))
    out = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))
    bd = _bias_data(bias)
    if bd is not None:
        out += bd.reshape(1, -1, 1, 1)

    def backward(g):
        g4 = g[None] if squeeze else g
        gflat = g4.transpose(1, 0, 2, 3).reshape(spec.out_channels, -1)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(wd) if weight.requires_grad else None
        for a, b, rs, cs in _taps(spec, ho, wo):
            if gw is not None:
                patch = xp[:, :, rs, cs].transpose(1, 0, 2, 3).reshape(c, -1)
                gw[:, :, a, b] = gflat @ patch.T
            if gxp is not None:
                gp = (wd[:, :, a, b].T @ gflat).reshape(c, n, ho, wo)
                gxp[:, :, rs, cs] += gp.transpose(1, 0, 2, 3)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, ph:ph + h, pw:pw + w]
            gx = np.ascontiguousarray(gx[0] if squeeze else gx)
        gb = g4.sum(axis=(0, 2, 3)) if bias is not None and as_tensor(bias).requires_grad else None
        return gx, gw, gb

    parents = (x, weight) + ((as_tensor(bias),) if bias is not None else ())
    return _result(out[0] if squeeze else out, parents, backward, "conv2d")


def conv_transpose2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Adjoint of :func:`conv2d`. ``weight`` is in_channels x out_channels x kh x kw."""
    x, weight = as_tensor(x), as_tensor(weight)
    xd, squeeze = _as4d(x)
    n, c, h, w = xd.shape
    kh, kw = spec.kernel
    if weight.shape != (spec.in_channels, spec.out_channels, kh, kw):
        raise ShapeError(f"weight shape {weight.shape} does not match transposed {spec}")
    if c != spec.in_channels:
        raise ShapeError(f"input has {c} channels, spec expects {spec.in_channels}")
    if (bias is not None) != spec.has_bias:
        raise ShapeError("bias presence does not match spec.has_bias")
    ho, wo = spec.transposed_output_size(h, w)
    ph, pw = spec.padding
    (sh, sw), (dh, dw) = spec.stride, spec.dilation
    hp, wp = (h - 1) * sh + dh * (kh - 1) + 1, (w - 1) * sw + dw * (kw - 1) + 1
    wd = weight.data
    cout = spec.out_channels
    xflat = xd.transpose(1, 0, 2, 3).reshape(c, -1)
    outp = np.zeros((n, cout, hp, wp), dtype=np.result_type(xd, wd))
    for a, b, rs, cs in _taps(spec, h, w):
        contrib = (wd[:, :, a, b].T @ xflat).reshape(cout, n, h, w)
        outp[:, :, rs, cs] += contrib.transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(outp[:, :, ph:ph + ho, pw:pw + wo])
    bd = _bias_data(bias)
    if bd is not None:
        out += bd.reshape(1, -1, 1, 1)

    def backward(g):
        g4 = g[None] if squeeze else g
        gp = np.pad(g4, ((0, 0), (0, 0), (ph, hp - ph - ho), (pw, wp - pw - wo)))
        gx = np.zeros((c, n, h, w), dtype=outp.dtype) if x.requires_grad else None
        gw = np.zeros_like(wd) if weight.requires_grad else None
        for a, b, rs, cs in _taps(spec, h, w):
            view = gp[:, :, rs, cs]
            if gx is not None:
                gx += np.tensordot(wd[:, :, a, b], view, axes=([1], [1]))
            if gw is not None:
                gw[:, :, a, b] = xflat @ view.transpose(1, 0, 2, 3).reshape(cout, -1).T
        if gx is not None:
            gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
            gx = gx[0] if squeeze else gx
        gb = g4.sum(axis=(0, 2, 3)) if bias is not None and as_tensor(bias).requires_grad else None
        return gx, gw, gb

    parents = (x, weight) + ((as_tensor(bias),) if bias is not None else ())
    return _result(out[0] if squeeze else out, parents, backward, "conv_transpose2d")


# ---------------------------------------------------------------------------
# normalisation and activations


def _channel_view(v, nd):
    return np.asarray(v).reshape((1, -1, 1, 1) if nd == 4 else (-1, 1, 1))


def batchnorm2d(x: Tensor, mean, var, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Inference-form batch normalisation with fixed per-channel statistics."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    nd = x.data.ndim
    c = x.shape[-3]
    mean, var = np.asarray(mean), np.asarray(var)
    for name, v in (("mean", mean), ("var", var), ("gamma", gamma.data), ("beta", beta.data)):
        if v.shape != (c,):
            raise ShapeError(f"{name} has shape {v.shape}, expected ({c},)")
    if (var < 0).any():
        raise ValueError("variance must be non-negative")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - _channel_view(mean, nd)) * _channel_view(inv, nd)
    out = xhat * _channel_view(gamma.data, nd) + _channel_view(beta.data, nd)
    out = out.astype(x.dtype, copy=False)
    axes = (0, 2, 3) if nd == 4 else (1, 2)

    def backward(g):
        gx = g * _channel_view(gamma.data * inv, nd) if x.requires_grad else None
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        return gx, gg, gb

    return _result(out, (x, gamma, beta), backward, "batchnorm2d")


def batchnorm2d_train(x: Tensor, gamma, beta, eps: float = 1e-5):
    """Batch-statistics normalisation; returns (output, batch mean, biased batch var)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd, squeeze = _as4d(x)
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("gamma/beta length must equal channel count")
    axes = (0, 2, 3)
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    mu = xd.mean(axis=axes)
    centered = xd - mu.reshape(1, -1, 1, 1)
    var = (centered * centered).mean(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv.reshape(1, -1, 1, 1)
    out = xhat * gamma.data.reshape(1, -1, 1, 1) + beta.data.reshape(1, -1, 1, 1)
    out = out.astype(xd.dtype, copy=False)

    def backward(g):
        g4 = g[None] if squeeze else g
        gg = (g4 * xhat).sum(axis=axes)
        gb = g4.sum(axis=axes)
        gx = None
        if x.requires_grad:
            dxhat = g4 * gamma.data.reshape(1, -1, 1, 1)
            gx = (inv.reshape(1, -1, 1, 1) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(1, -1, 1, 1)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(1, -1, 1, 1)
            )
            gx = gx[0] if squeeze else gx
        return gx, gg if gamma.requires_grad else None, gb if beta.requires_grad else None

    res = _result(out[0] if squeeze else out, (x, gamma, beta), backward, "batchnorm2d")
    return res, mu, var


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data).astype(x.dtype)
    # keep the open interval in finite precision
    info = np.finfo(x.dtype)
    s = np.clip(s, info.tiny, 1.0 - info.epsneg)
    return _result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# layout


def permute_axes(x: Tensor, order: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    order = tuple(int(o) for o in order)
    if sorted(order) != list(range(x.data.ndim)):
        raise ShapeError(f"{order} is not a permutation of {x.data.ndim} axes")
    inverse = tuple(np.argsort(order))
    out = np.ascontiguousarray(np.transpose(x.data, order))
    return _result(out, (x,), lambda g: (np.ascontiguousarray(np.transpose(g, inverse)),), "permute_axes")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != b.data.ndim or a.shape[:-3] != b.shape[:-3] or a.shape[-2:] != b.shape[-2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[-3]
    out = np.concatenate([a.data, b.data], axis=-3)

    def backward(g):
        return g[..., :ca, :, :], g[..., ca:, :, :]

    return _result(out, (a, b), backward, "concat_channels")


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        k = float(b)
        return _result(a.data * a.dtype.type(k), (a,), lambda g: (g * k,), "mul")
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return _result(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def loss_node(value: float, pairs: Iterable[tuple]) -> Tensor:
    """Scalar node whose gradient w.r.t. each tensor was computed analytically elsewhere."""
    pairs = list(pairs)
    tensors = tuple(t for t, _ in pairs)
    grads = [np.asarray(gr) for _, gr in pairs]
    for t, gr in zip(tensors, grads):
        if gr.shape != t.shape:
            raise ShapeError(f"gradient shape {gr.shape} does not match tensor {t.shape}")
    dtype = tensors[0].dtype if tensors else np.float64
    data = np.asarray(value, dtype=dtype)

    def backward(g):
        return tuple((g * gr).astype(t.dtype, copy=False) for t, gr in zip(tensors, grads))

    return _result(data, tensors, backward, "loss")
