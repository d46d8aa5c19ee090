"""Parameter containers and small building-block layers."""

from __future__ import annotations

import numpy as np

from . import functional as F
from .tensor import ConfigError, Tensor


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


def trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) with samples beyond two deviations redrawn."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual conv kernel default."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Base container. Parameters are discovered by walking attributes
    (tensors with requires_grad, sub-modules, and lists of either) in
    definition order, which makes checkpoint names deterministic."""

    def __init__(self):
        self.training = False

    def named_parameters(self, prefix: str = ""):
        out = []
        for name, value in self.__dict__.items():
            if name == "training":
                continue
            full = f"{prefix}{name}"
            out.extend(_collect(full, value))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def modules(self):
        out = [self]
        for value in self.__dict__.values():
            if isinstance(value, Module):
                out.extend(value.modules())
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        out.extend(item.modules())
        return out

    def train(self):
        for m in self.modules():
            m.training = True
        return self

    def eval(self):
        for m in self.modules():
            m.training = False
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _collect(name: str, value):
    if isinstance(value, Tensor):
        return [(name, value)] if value.requires_grad else []
    if isinstance(value, Module):
        return value.named_parameters(prefix=name + ".")
    if isinstance(value, (list, tuple)):
        out = []
        for i, item in enumerate(value):
            out.extend(_collect(f"{name}.{i}", item))
        return out
    return []


class Linear(Module):
    """Dense layer. Default init is fan-in uniform; pass ``std`` to use a
    truncated normal instead (small std keeps early logits near zero, which
    suits classifier heads under momentum SGD)."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 bias: bool = True, std: float | None = None, dtype=np.float64):
        super().__init__()
        if std is None:
            self.weight = parameter(uniform_fan_in(rng, (c_in, c_out), c_in, dtype))
        else:
            self.weight = parameter(trunc_normal(rng, (c_in, c_out), std, dtype))
        self.bias = parameter(np.zeros(c_out, dtype=dtype)) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, channels: int, dtype=np.float64, eps: float = 1e-5):
        super().__init__()
        self.gamma = parameter(np.ones(channels, dtype=dtype))
        self.beta = parameter(np.zeros(channels, dtype=dtype))
        self.eps = eps

    def forward(self, x):
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class Mlp(Module):
    """Two linears around a GeLU, applied per token."""

    def __init__(self, channels: int, hidden: int, rng, dtype=np.float64):
        super().__init__()
        self.fc1 = Linear(channels, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, channels, rng, dtype=dtype)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


def drop_path(x: Tensor, keep_prob: float, training: bool,
              rng: np.random.Generator | None) -> Tensor:
    """Per-sample residual branch dropout, rescaled to keep expectation."""
    if not 0.0 < keep_prob <= 1.0:
        raise ConfigError(f"drop_path: keep_prob must be in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return x
    if rng is None:
        raise ConfigError("drop_path: training with keep_prob < 1 needs an rng")
    b = x.shape[0]
    mask = (rng.random(b) < keep_prob).astype(x.dtype) / keep_prob
    mask = mask.reshape((b,) + (1,) * (x.ndim - 1))
    return F.mul(x, Tensor(mask))
