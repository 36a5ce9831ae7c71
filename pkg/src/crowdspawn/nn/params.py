"""Named parameter storage, Adam, and the JSON checkpoint format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ModelLoadFailure, NonFiniteLoss
from .autodiff import Tensor

CHECKPOINT_FORMAT = "crowdspawn-params/1"


@dataclass
class ParamStore:
    """Ordered mapping of parameter name to a trainable :class:`Tensor`.

    Adam moment estimates live next to the values; ``step`` counts updates.
    """

    params: dict[str, Tensor] = field(default_factory=dict)
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def tensors(self) -> dict[str, Tensor]:
        return dict(self.params)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {
            k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in self.params.items()
        }

    def n_values(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            if self.params[k].data.shape != np.shape(v):
                raise ValueError(f"shape mismatch for {k}: {np.shape(v)} vs {self.params[k].data.shape}")
            self.params[k].data = np.array(v, dtype=np.float64)


def adam_update(
    store: ParamStore,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> ParamStore:
    """One bias-corrected Adam step over every parameter, then clear gradients."""
    b1, b2 = betas
    store.step += 1
    t = store.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in store.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m, v = store.moments.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        store.moments[name] = (m, v)
        new = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if not np.all(np.isfinite(new)):
            raise NonFiniteLoss(f"parameter {name} became non-finite")
        p.data = new
        p.grad = None
    return store


def save_checkpoint(path: str | Path, store: ParamStore, meta: dict | None = None) -> None:
    """Write values as row-major lists; ``repr``-exact floats make reload bit-identical."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "meta": meta or {},
        "arrays": {
            name: {"shape": list(t.data.shape), "values": t.data.ravel().tolist()}
            for name, t in store.params.items()
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=False) + "\n")


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelLoadFailure(f"cannot read checkpoint {path}: {exc}") from exc
    return store_from_document(doc, source=str(path))


def store_from_document(doc: dict, source: str = "<document>") -> tuple[ParamStore, dict]:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ModelLoadFailure(f"{source}: unknown checkpoint format {doc.get('format')!r}")
    store = ParamStore()
    try:
        for name, entry in doc["arrays"].items():
            shape = tuple(entry["shape"])
            values = np.array(entry["values"], dtype=np.float64)
            store.add(name, values.reshape(shape))
    except (KeyError, ValueError, TypeError) as exc:
        raise ModelLoadFailure(f"{source}: bad array entry: {exc}") from exc
    return store, doc.get("meta", {})
