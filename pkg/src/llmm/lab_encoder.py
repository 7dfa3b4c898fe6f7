"""Numeric lab panel -> z-scored vector with a missingness mask -> DNN embedding."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cohort import CATALOG_ORDER, LabPanel
from .errors import NumericError, ShapeError


@dataclass
class NormStats:
    """Per-item mean and standard deviation, fitted on the training split only."""

    items: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    counts: np.ndarray = field(default=None)
    provenance: str = "train"

    @classmethod
    def fit(cls, panels: Iterable[LabPanel], items: Sequence[str] = CATALOG_ORDER,
            provenance: str = "train") -> "NormStats":
        items = tuple(items)
        col = {n: i for i, n in enumerate(items)}
        observed: list[list[float]] = [[] for _ in items]
        for panel in panels:
            for name, v in panel.items():
                if name in col and np.isfinite(v.value):
                    observed[col[name]].append(v.value)
        mean = np.zeros(len(items))
        std = np.ones(len(items))
        counts = np.array([len(o) for o in observed])
        for i, obs in enumerate(observed):
            if obs:
                mean[i] = float(np.mean(obs))
            if len(obs) >= 2:
                s = float(np.std(obs, ddof=1))
                # constant columns keep unit scale instead of dividing by zero
                std[i] = s if s > 0 else 1.0
        return cls(items, mean, std, counts, provenance)

    def to_json(self) -> dict:
        return {"items": list(self.items), "mean": self.mean.tolist(), "std": self.std.tolist(),
                "counts": [int(c) for c in self.counts], "provenance": self.provenance}

    @classmethod
    def from_json(cls, obj) -> "NormStats":
        return cls(tuple(obj["items"]), np.asarray(obj["mean"], float), np.asarray(obj["std"], float),
                   np.asarray(obj["counts"], int), obj.get("provenance", "train"))


@dataclass
class LabVector:
    values: np.ndarray
    mask: np.ndarray


def vectorize_panel(panel: LabPanel, stats: NormStats) -> LabVector:
    values, mask = vectorize_panels([panel], stats)
    return LabVector(values[0], mask[0])


def vectorize_panels(panels: Sequence[LabPanel], stats: NormStats) -> tuple[np.ndarray, np.ndarray]:
    """(batch, n_items) z-scores and masks. Missing or non-numeric items are 0 with mask 0;
    items outside ``stats.items`` are ignored."""
    col = {n: i for i, n in enumerate(stats.items)}
    values = np.zeros((len(panels), len(stats.items)))
    mask = np.zeros((len(panels), len(stats.items)))
    for r, panel in enumerate(panels):
        for name, v in panel.items():
            i = col.get(name)
            if i is None or not np.isfinite(v.value):
                continue
            values[r, i] = (v.value - stats.mean[i]) / stats.std[i]
            mask[r, i] = 1.0
    return values, mask


def lab_encoder_shapes(n_items: int, hidden: Sequence[int], d_model: int,
                       prefix: str = "lab") -> dict[str, tuple[int, ...]]:
    sizes = [2 * n_items, *hidden, d_model]
    shapes = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        shapes[f"{prefix}.w{i}"] = (a, b)
        shapes[f"{prefix}.b{i}"] = (b,)
    return shapes


def init_lab_encoder(n_items: int, hidden: Sequence[int], d_model: int,
                     rng: np.random.Generator, prefix: str = "lab") -> dict[str, Tensor]:
    params = {}
    for name, shape in lab_encoder_shapes(n_items, hidden, d_model, prefix).items():
        if len(shape) == 2:
            arr = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params


def encode_labs(values, mask, params: dict[str, Tensor], prefix: str = "lab",
                activation: str = "relu") -> Tensor:
    """[values || mask] through ReLU hidden layers to a linear d_model output."""
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    single = values.ndim == 1
    if single:
        values, mask = values[None], mask[None]
    if values.shape != mask.shape:
        raise ShapeError(f"lab values {values.shape} and mask {mask.shape} differ")
    x = np.concatenate([values, mask], axis=1)
    if not np.all(np.isfinite(x)):
        raise NumericError("encode_labs: non-finite lab input")
    n_layers = sum(1 for k in params if k.startswith(f"{prefix}.w"))
    if params[f"{prefix}.w0"].shape[0] != x.shape[1]:
        raise ShapeError(
            f"lab input width {x.shape[1]} does not match encoder {params[f'{prefix}.w0'].shape[0]}")
    act = ad.relu if activation == "relu" else ad.gelu
    h = ad.as_tensor(x)
    for i in range(n_layers):
        h = h @ params[f"{prefix}.w{i}"] + params[f"{prefix}.b{i}"]
        if i < n_layers - 1:
            h = act(h)
    return ad.reshape(h, (h.shape[1],)) if single else h
