"""Small module system: named parameter tables over :class:`Tensor` leaves."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, get_default_dtype, layer_norm, matmul


def parameter(data):
    return Tensor(data, requires_grad=True)


def xavier_uniform(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Module:
    """Base class; parameters are discovered by walking instance attributes.

    Attribute names form dotted parameter names (``blocks.0.attn.qkv.weight``),
    which is also the key format of checkpoints. Every ``Tensor`` attribute is a
    parameter; fixed buffers are kept as plain numpy arrays.
    """

    def named_parameters(self, prefix=""):
        out = []
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                out.append((name, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, table, strict=True):
        from ..errors import DimensionError

        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(table))
            if missing:
                raise DimensionError(f"checkpoint lacks tensors: {', '.join(missing[:5])}")
        for name, p in params.items():
            if name not in table:
                continue
            arr = np.asarray(table[name])
            if arr.shape != p.shape:
                raise DimensionError(
                    f"tensor '{name}' has shape {arr.shape} in checkpoint, model expects {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        self._frozen = True
        return self

    def to_dtype(self, dtype):
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self


class Linear(Module):
    def __init__(self, fan_in, fan_out, rng, bias=True):
        self.weight = parameter(xavier_uniform(rng, fan_in, fan_out))
        self.bias = parameter(np.zeros(fan_out)) if bias else None

    def __call__(self, x):
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-6):
        self.gain = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    """A bank of learned vectors addressed by integer index."""

    def __init__(self, count, dim, rng, std=0.02):
        self.weight = parameter(rng.normal(0.0, std, size=(count, dim)))

    def __call__(self, idx):
        return self.weight[np.asarray(idx)]


def constant(data):
    return Tensor(np.asarray(data), dtype=get_default_dtype())
