"""Single-shot pruning by connection sensitivity.

Weights are scored once, before training, by ``|dL/dw * w|``.  The top
``round(N / ratio)`` scores across *all* layers survive; the rest are zeroed
and stay zero for the rest of training.  Skip projections added with
:func:`add_skip_connections` are ordinary weights in this pool.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, ContractViolation, NumericError
from .models import ModelParams, param_shapes

LossFn = Callable[[nx.Graph, dict[str, nx.Tensor], object], nx.Tensor]


@dataclass(frozen=True)
class SparsityMask:
    entries: dict[str, np.ndarray]  # layer name -> uint8 {0, 1}
    compression_ratio: float = 1.0

    def __post_init__(self):
        clean = {}
        for name, m in self.entries.items():
            arr = np.asarray(m)
            if not np.all((arr == 0) | (arr == 1)):
                raise ContractViolation(f"mask {name}: values must be 0 or 1")
            arr = arr.astype(np.uint8)
            arr.flags.writeable = False
            clean[name] = arr
        object.__setattr__(self, "entries", clean)

    @property
    def kept(self) -> int:
        return int(sum(int(m.sum()) for m in self.entries.values()))

    @property
    def total(self) -> int:
        return int(sum(m.size for m in self.entries.values()))


@dataclass(frozen=True)
class SaliencyMap:
    entries: dict[str, np.ndarray]

    @property
    def total(self) -> float:
        return float(sum(v.sum() for v in self.entries.values()))


def add_skip_connections(params: ModelParams, spec: Sequence[tuple[int, int]]) -> ModelParams:
    """Add zero-initialised 1x1x1 projections from stage ``s``'s output to
    stage ``d``'s input for every ``(s, d)`` in ``spec``."""
    spec = [(int(s), int(d)) for s, d in spec]
    if not spec:
        return params
    clash = set(spec) & set(params.config.skips)
    if clash:
        raise ConfigurationError(f"skip connections already present: {sorted(clash)}")
    config = replace(params.config, skips=tuple(params.config.skips) + tuple(spec))
    entries = dict(params.entries)
    for name, shape in param_shapes(config).items():
        if name not in entries:
            entries[name] = np.zeros(shape)
    return ModelParams(config, entries)


def weight_pool(models) -> dict[str, np.ndarray]:
    """Prunable weights by name.  A plain mapping counts every entry as a weight."""
    if isinstance(models, Mapping):
        return {n: np.asarray(a, dtype=np.float64) for n, a in models.items()}
    if isinstance(models, ModelParams):
        models = [models]
    pool = {}
    for m in models:
        for n in m.weight_names():
            pool[n] = m.entries[n]
    return pool


def _all_entries(models) -> dict[str, np.ndarray]:
    if isinstance(models, Mapping):
        return dict(models)
    if isinstance(models, ModelParams):
        models = [models]
    return {n: a for m in models for n, a in m.entries.items()}


def connection_sensitivity(models, batch, loss_fn: LossFn) -> SaliencyMap:
    """Normalised ``|g * w|`` for every weight, with ``g`` taken from one
    backward pass of ``loss_fn(graph, tensors, batch)``.

    ``models`` is a ModelParams, a sequence of them, or a name -> array mapping.
    """
    if batch is None or (hasattr(batch, "__len__") and len(batch) == 0):
        raise ContractViolation("connection_sensitivity needs a non-empty batch")
    g = nx.Graph()
    tensors = {name: g.param(name, arr) for name, arr in _all_entries(models).items()}
    loss = loss_fn(g, tensors, batch)
    if loss.size != 1 or not np.all(np.isfinite(loss.data)):
        raise NumericError("connection_sensitivity: loss must be a finite scalar")
    grads = nx.backward(g, loss)
    raw = {}
    for name, w in weight_pool(models).items():
        gw = grads[name]
        if not np.all(np.isfinite(gw)):
            raise NumericError(f"connection_sensitivity: non-finite gradient in {name}")
        raw[name] = np.abs(gw * w)
    total = math.fsum(float(v.sum()) for v in raw.values())
    if not total > 0:
        raise NumericError("connection_sensitivity: every score is zero")
    return SaliencyMap({n: v / total for n, v in raw.items()})


def kept_count(n: int, ratio: float) -> int:
    """round(n / ratio), halves rounded up."""
    return int(math.floor(n / ratio + 0.5))


def prune(saliency: SaliencyMap | Mapping[str, np.ndarray], ratio: float) -> SparsityMask:
    """Keep the ``round(N / ratio)`` globally largest scores.

    Ties go to the lexicographically smaller layer name, then the smaller
    flat index.
    """
    entries = saliency.entries if isinstance(saliency, SaliencyMap) else dict(saliency)
    if not ratio >= 1:
        raise ConfigurationError(f"compression ratio must be >= 1, got {ratio}")
    names = sorted(entries)
    flat = np.concatenate([np.asarray(entries[n], dtype=np.float64).reshape(-1) for n in names])
    k = kept_count(flat.size, ratio)
    if k == 0:
        raise ConfigurationError(f"ratio {ratio} keeps no weight out of {flat.size}")
    order = np.argsort(-flat, kind="stable")
    keep = np.zeros(flat.size, dtype=np.uint8)
    keep[order[:k]] = 1
    out, pos = {}, 0
    for n in names:
        shape = np.shape(entries[n])
        size = int(np.prod(shape))
        out[n] = keep[pos:pos + size].reshape(shape)
        pos += size
    return SparsityMask(out, float(ratio))


def apply_mask(params: ModelParams, mask: SparsityMask) -> ModelParams:
    """Zero the masked weights of ``params``; mask entries for other models are ignored."""
    updates = {}
    for name, m in mask.entries.items():
        if not name.startswith(params.kind + "."):
            continue
        if name not in params.entries:
            raise ContractViolation(f"mask layer {name} not in model")
        w = params.entries[name]
        if m.shape != w.shape:
            raise ContractViolation(f"mask {name}: shape {m.shape} != weight shape {w.shape}")
        updates[name] = np.where(m.astype(bool), w, 0.0)
    return params.with_entries(updates)


def all_ones_mask(models: Sequence[ModelParams]) -> SparsityMask:
    return SparsityMask({n: np.ones(w.shape, dtype=np.uint8) for n, w in weight_pool(models).items()}, 1.0)
