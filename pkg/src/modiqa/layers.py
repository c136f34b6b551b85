"""Parameter containers and the two reusable layers (affine, layer norm)."""

from __future__ import annotations

import numpy as np

from modiqa.autodiff import Parameter, ParameterStore, affine, layer_norm


def trunc_normal(rng, shape, std=0.02, dtype=np.float64):
    """Normal(0, std) truncated to two standard deviations."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return (z * std).astype(dtype)


def fan_in_uniform(rng, shape, dtype=np.float64):
    bound = 1.0 / np.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Base class that discovers parameters and submodules from attributes."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameter_store(self):
        return ParameterStore(self.named_parameters())

    def num_parameters(self):
        return sum(p.size for _, p in self.named_parameters())


class Linear(Module):
    """Affine map ``x @ weight + bias``; weight is stored as (in, out)."""

    def __init__(self, n_in, n_out, rng, init="trunc_normal", bias=True, dtype=np.float64):
        if init == "trunc_normal":
            w = trunc_normal(rng, (n_in, n_out), dtype=dtype)
        elif init == "fan_in":
            w = fan_in_uniform(rng, (n_in, n_out), dtype=dtype)
        elif init == "zeros":
            w = np.zeros((n_in, n_out), dtype=dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(n_out, dtype=dtype)) if bias else None

    def __call__(self, x):
        return affine(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, n, dtype=np.float64):
        self.gamma = Parameter(np.ones(n, dtype=dtype))
        self.beta = Parameter(np.zeros(n, dtype=dtype))

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta)
