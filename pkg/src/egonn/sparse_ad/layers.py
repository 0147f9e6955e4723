"""Parameterized layers built from the sparse primitives."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import sparse_ops as S
from .tape import Parameter, Var
from .tensor import SparseTensor


class Module:
    """Minimal container: discovers parameters, buffers and submodules by attribute."""

    training: bool = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, v in vars(self).items():
            if isinstance(v, Module):
                yield name, v
            elif isinstance(v, (list, tuple)):
                for i, item in enumerate(v):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, v in vars(self).items():
            if isinstance(v, Parameter):
                yield prefix + name, v
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, object, str]]:
        """Yield ``(name, owner, attribute)`` for non-trainable state arrays."""
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        for _, owner, attr in self.named_buffers():
            setattr(owner, attr, getattr(owner, attr).astype(dtype))
        return self


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv(Module):
    def __init__(self, cin: int, cout: int, kernel_size=3, stride=1, theta_wrap: bool = True,
                 rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kernel_size = S._as_axes(kernel_size)
        self.stride = S._as_axes(stride)
        k = int(np.prod(self.kernel_size))
        self.kernel = Parameter(he_normal(rng, (k, cin, cout), k * cin, dtype), "kernel")
        self.theta_wrap = theta_wrap

    def __call__(self, x: SparseTensor) -> SparseTensor:
        return S.sparse_conv(x, self.kernel, self.kernel_size, self.stride, self.theta_wrap)


class TConv(Module):
    def __init__(self, cin: int, cout: int, stride=2, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = S._as_axes(stride)
        k = int(np.prod(self.stride))
        self.kernel = Parameter(he_normal(rng, (k, cin, cout), cin, dtype), "kernel")

    def __call__(self, x: SparseTensor, target: SparseTensor) -> SparseTensor:
        return S.sparse_tconv(x, self.kernel, target, self.stride)


class BatchNorm(Module):
    def __init__(self, channels: int, dtype=np.float32):
        self.gamma = Parameter(np.ones(channels, dtype=dtype), "gamma")
        self.beta = Parameter(np.zeros(channels, dtype=dtype), "beta")
        self.state = S.BatchNormState(channels, dtype)

    def named_buffers(self, prefix: str = ""):
        yield prefix + "running_mean", self.state, "running_mean"
        yield prefix + "running_var", self.state, "running_var"

    def __call__(self, x: SparseTensor) -> SparseTensor:
        return S.batch_norm(x, self.gamma, self.beta, self.state, self.training)


class ECA(Module):
    def __init__(self, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kernel = Parameter((rng.uniform(-1, 1, 3) / np.sqrt(3)).astype(dtype), "kernel")

    def __call__(self, x: SparseTensor) -> SparseTensor:
        return S.eca(x, self.kernel)


class MLP(Module):
    """Pointwise MLP ``dims[0] -> dims[1] -> ... `` with ReLU between layers."""

    def __init__(self, dims, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights = []
        self.biases = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            w = Parameter(he_normal(rng, (a, b), a, dtype), f"w{i}")
            bias = Parameter(np.zeros(b, dtype=dtype), f"b{i}")
            setattr(self, f"w{i}", w)
            setattr(self, f"b{i}", bias)
            self.weights.append(w)
            self.biases.append(bias)

    def named_parameters(self, prefix: str = ""):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}w{i}", w
            yield f"{prefix}b{i}", b

    def __call__(self, x: SparseTensor) -> SparseTensor:
        return S.pointwise_mlp(x, list(zip(self.weights, self.biases)))


class GeM(Module):
    def __init__(self, p: float = 3.0, dtype=np.float32):
        self.p = Parameter(np.array([p], dtype=dtype), "p")

    def __call__(self, x: SparseTensor) -> Var:
        return S.gem_pool(x, self.p)
