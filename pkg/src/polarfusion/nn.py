"""Layer objects on top of :mod:`polarfusion.tensor`."""
from __future__ import annotations

import math

import numpy as np

from .tensor import (
    ConvSpec,
    Tensor,
    add,
    batchnorm2d,
    batchnorm2d_train,
    conv2d,
    conv_transpose2d,
    no_grad,
    relu,
)


class Module:
    training = True

    def named_children(self):
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + key, value
        for key, child in self.named_children():
            yield from child.named_parameters(prefix + key + ".")

    def named_buffers(self, prefix: str = ""):
        for key, value in vars(self).items():
            if isinstance(value, np.ndarray):
                yield prefix + key, value
        for key, child in self.named_children():
            yield from child.named_buffers(prefix + key + ".")

    def parameters(self, trainable_only: bool = True):
        return [p for _, p in self.named_parameters() if p.requires_grad or not trainable_only]

    def modules(self):
        yield self
        for _, child in self.named_children():
            yield from child.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def freeze(self):
        for p in self.parameters(trainable_only=False):
            p.requires_grad = False
        return self

    def zero_grad(self):
        for p in self.parameters(trainable_only=False):
            p.zero_grad()

    def state_dict(self) -> dict:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict):
        params = dict(self.named_parameters())
        buffers = {name: (mod, name.rsplit(".", 1)[-1]) for mod, name in self._buffer_owners()}
        missing = (set(params) | set(buffers)) - set(state)
        unexpected = set(state) - set(params) - set(buffers)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
        for name, (mod, attr) in buffers.items():
            old = getattr(mod, attr)
            setattr(mod, attr, np.asarray(state[name]).astype(old.dtype, copy=True))

    def _buffer_owners(self, prefix: str = ""):
        for key, value in vars(self).items():
            if isinstance(value, np.ndarray):
                yield self, prefix + key
        for key, child in self.named_children():
            yield from child._buffer_owners(prefix + key + ".")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def count_parameters(model: Module) -> int:
    return int(sum(p.data.size for p in model.parameters()))


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        kh, kw = spec.kernel
        shape = (spec.out_channels, spec.in_channels, kh, kw)
        self.weight = kaiming_uniform(rng, shape, spec.in_channels * kh * kw, dtype)
        self.bias = Tensor(np.zeros(spec.out_channels, dtype), requires_grad=True) if spec.has_bias else None

    def forward(self, x):
        return conv2d(x, self.spec, self.weight, self.bias)


class ConvTranspose2d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        kh, kw = spec.kernel
        shape = (spec.in_channels, spec.out_channels, kh, kw)
        self.weight = kaiming_uniform(rng, shape, spec.in_channels * kh * kw, dtype)
        self.bias = Tensor(np.zeros(spec.out_channels, dtype), requires_grad=True) if spec.has_bias else None

    def forward(self, x):
        return conv_transpose2d(x, self.spec, self.weight, self.bias)


class BatchNorm2d(Module):
    """Batch statistics while training (momentum update of running stats), fixed stats in eval."""

    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels, dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)
        self.momentum = momentum
        self.eps = eps
        self._collect = None

    def forward(self, x):
        if not self.training:
            return batchnorm2d(x, self.running_mean, self.running_var, self.gamma, self.beta, self.eps)
        out, mu, var = batchnorm2d_train(x, self.gamma, self.beta, self.eps)
        d = x.data
        count = d.size // d.shape[-3]
        if self._collect is not None:
            self._collect.append((count, mu, var))
            return out
        unbiased = var * (count / max(count - 1, 1))
        m = self.momentum
        self.running_mean = ((1 - m) * self.running_mean + m * mu).astype(self.running_mean.dtype)
        self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(self.running_var.dtype)
        return out


def recalibrate_batchnorm(model: Module, forward, batches):
    """Replace running statistics by exact population statistics over ``batches``.

    ``forward(batch)`` runs the model; each batch is normalised with its own
    statistics (train mode) while per-layer mean/variance are pooled. With one
    batch covering the whole set, eval-mode output then equals train-mode output.
    """
    layers = [m for m in model.modules() if isinstance(m, BatchNorm2d)]
    was_training = model.training
    model.train()
    for bn in layers:
        bn._collect = []
    try:
        with no_grad():
            for batch in batches:
                forward(batch)
        for bn in layers:
            if not bn._collect:
                continue
            counts = np.array([c for c, _, _ in bn._collect], dtype=np.float64)
            mus = np.stack([m for _, m, _ in bn._collect]).astype(np.float64)
            vars_ = np.stack([v for _, _, v in bn._collect]).astype(np.float64)
            w = counts[:, None] / counts.sum()
            mean = (w * mus).sum(axis=0)
            var = (w * (vars_ + (mus - mean) ** 2)).sum(axis=0)
            bn.running_mean = mean.astype(bn.running_mean.dtype)
            bn.running_var = var.astype(bn.running_var.dtype)
    finally:
        for bn in layers:
            bn._collect = None
        model.train(was_training)
    return model


def conv_bn(cin, cout, rng, dtype, kernel=3, stride=1):
    pad = kernel // 2
    spec = ConvSpec(cin, cout, (kernel, kernel), (stride, stride), (pad, pad), has_bias=False)
    return Conv2d(spec, rng, dtype), BatchNorm2d(cout, dtype)


class BasicBlock(Module):
    """Two 3x3 conv-bn layers with relu and an identity or 1x1 projection shortcut."""

    def __init__(self, cin: int, cout: int, rng, dtype=np.float32, stride: int = 1):
        self.conv1, self.bn1 = conv_bn(cin, cout, rng, dtype, 3, stride)
        self.conv2, self.bn2 = conv_bn(cout, cout, rng, dtype, 3, 1)
        if stride != 1 or cin != cout:
            self.proj, self.proj_bn = conv_bn(cin, cout, rng, dtype, 1, stride)
        else:
            self.proj = self.proj_bn = None

    def forward(self, x):
        y = relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        shortcut = x if self.proj is None else self.proj_bn(self.proj(x))
        return relu(add(y, shortcut))


class ConvBnRelu(Module):
    def __init__(self, cin, cout, rng, dtype=np.float32, kernel=3, stride=1):
        self.conv, self.bn = conv_bn(cin, cout, rng, dtype, kernel, stride)

    def forward(self, x):
        return relu(self.bn(self.conv(x)))
