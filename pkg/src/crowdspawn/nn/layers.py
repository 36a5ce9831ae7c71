"""GRU cell and MLP built on :mod:`.autodiff`.

Both layer types keep no state of their own: a spec names the parameters,
``init`` registers them in a :class:`ParamStore`, and ``forward`` reads them
from whatever mapping it is given (Tensors while training, ndarrays when
sampling).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ..errors import DimensionMismatch
from .autodiff import sigmoid, softplus, tanh, value
from .params import ParamStore

ACTIVATIONS = ("tanh", "softplus", "identity")


def uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    a = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-a, a, size=shape)


@dataclass(frozen=True)
class GRUCellSpec:
    """Gated recurrent cell.

    Update rule (fixed convention)::

        z  = sigmoid(x Wz + h Uz + bz)
        r  = sigmoid(x Wr + h Ur + br)
        n  = tanh(x Wn + (r * h) Un + bn)
        h' = (1 - z) * h + z * n
    """

    input_dim: int
    hidden_dim: int = 32
    prefix: str = "gru"

    def init(self, store: ParamStore, rng: np.random.Generator) -> None:
        i, h = self.input_dim, self.hidden_dim
        store.add(f"{self.prefix}.W", uniform_init(rng, i, (i, 3 * h)))
        store.add(f"{self.prefix}.Uzr", uniform_init(rng, h, (h, 2 * h)))
        store.add(f"{self.prefix}.Un", uniform_init(rng, h, (h, h)))
        store.add(f"{self.prefix}.b", uniform_init(rng, h, (3 * h,)))

    def step(self, p: Mapping, x, h):
        """One recurrent update for a batch: ``x`` is (B, input_dim), ``h`` is (B, hidden_dim)."""
        xs, hs = value(x).shape, value(h).shape
        if len(xs) != 2 or len(hs) != 2 or xs[1] != self.input_dim or hs[1] != self.hidden_dim or xs[0] != hs[0]:
            raise DimensionMismatch(
                f"gru_step expects x (B,{self.input_dim}) and h (B,{self.hidden_dim}); got {xs} and {hs}"
            )
        H = self.hidden_dim
        pre = x @ p[f"{self.prefix}.W"] + p[f"{self.prefix}.b"]
        hu = h @ p[f"{self.prefix}.Uzr"]
        z = sigmoid(pre[:, :H] + hu[:, :H])
        r = sigmoid(pre[:, H : 2 * H] + hu[:, H:])
        n = tanh(pre[:, 2 * H :] + (r * h) @ p[f"{self.prefix}.Un"])
        return (1.0 - z) * h + z * n


def gru_step(cell: GRUCellSpec, params: Mapping, x, h):
    """Functional alias for :meth:`GRUCellSpec.step` accepting 1-D vectors too."""
    squeeze = np.ndim(value(x)) == 1
    if squeeze:
        x = value(x)[None, :]
        h = value(h)[None, :]
    out = cell.step(params, x, h)
    return value(out)[0] if squeeze else out


@dataclass(frozen=True)
class MLPSpec:
    sizes: tuple[int, ...]
    activations: tuple[str, ...]
    prefix: str = "mlp"

    def __post_init__(self) -> None:
        if len(self.sizes) < 2 or len(self.activations) != len(self.sizes) - 1:
            raise DimensionMismatch(f"{len(self.sizes)} sizes need {len(self.sizes) - 1} activations")
        bad = [a for a in self.activations if a not in ACTIVATIONS]
        if bad:
            raise ValueError(f"unknown activation(s) {bad}")

    def init(self, store: ParamStore, rng: np.random.Generator) -> None:
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            store.add(f"{self.prefix}.{i}.W", uniform_init(rng, n_in, (n_in, n_out)))
            store.add(f"{self.prefix}.{i}.b", uniform_init(rng, n_in, (n_out,)))

    def forward(self, p: Mapping, x):
        if value(x).shape[-1] != self.sizes[0]:
            raise DimensionMismatch(f"MLP expects input width {self.sizes[0]}, got {value(x).shape}")
        for i, act in enumerate(self.activations):
            x = x @ p[f"{self.prefix}.{i}.W"] + p[f"{self.prefix}.{i}.b"]
            if act == "tanh":
                x = tanh(x)
            elif act == "softplus":
                x = softplus(x)
        return x
