"""Minimal parameter-container base class plus the shared Linear layer."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, matmul, reshape


class Module:
    """Walks its attributes to find parameters; tracks a training flag."""

    def __init__(self):
        self.training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if name == "training":
                continue
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{path}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{path}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, flag=True):
        self.training = flag
        for _, value in vars(self).items():
            if isinstance(value, Module):
                value.train(flag)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item.train(flag)
        return self

    def eval(self):
        return self.train(False)

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


def xavier_uniform(rng: np.random.Generator, fan_in, fan_out, shape, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def he_normal(rng: np.random.Generator, fan_in, shape, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Linear(Module):
    """y = x @ W + b with W stored (in, out). init: 'xavier' | 'zeros'."""

    def __init__(self, in_dim, out_dim, rng: np.random.Generator, bias=True, init="xavier", dtype=None):
        super().__init__()
        from .tensor import default_dtype

        dtype = dtype or default_dtype()
        if init == "zeros":
            w = np.zeros((in_dim, out_dim), dtype=dtype)
        elif init == "xavier":
            w = xavier_uniform(rng, in_dim, out_dim, (in_dim, out_dim), dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x):
        flat = x.ndim > 2
        if flat:
            lead = x.shape[:-1]
            x = reshape(x, (int(np.prod(lead)), x.shape[-1]))
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        if flat:
            y = reshape(y, lead + (y.shape[-1],))
        return y
