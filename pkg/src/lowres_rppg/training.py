"""Joint training of the enhancer and recovery networks.

The objective is ``w_recon * recon_rmse + w_loop * loop`` where

* ``recon_rmse`` is the RMSE between the enhanced low-res batch and the
  high-res target batch, over every pixel of the batch jointly;
* ``loop`` is the RMSE between the recovery network's trace on the enhanced
  batch and its trace on the high-res batch.

Optimisation is Adam; after every update the sparsity mask is multiplied in,
so pruned weights stay exactly zero.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, ContractViolation, FormatError, NumericError
from .models import (EnhancerConfig, ModelParams, RecoveryConfig, bind, clips_to_batch,
                     config_from_dict, enhance, init_params, recover, save_checkpoint)
from .pruning import (SparsityMask, add_skip_connections, all_ones_mask, apply_mask,
                      connection_sensitivity, prune)
from .signal import RppgSignal
from .video import VideoClip, crop_roi, full_frame, read_clip, read_roi

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    steps: int = 500
    batch_size: int = 2
    seed: int = 0
    w_recon: float = 1.0
    w_loop: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    crop_frames: int = 64  # temporal window per training sample
    prune_ratio: Optional[float] = None
    saliency_batch: int = 8
    enhancer: EnhancerConfig = field(default_factory=EnhancerConfig)
    recovery: RecoveryConfig = field(default_factory=RecoveryConfig)
    enhancer_skips: tuple[tuple[int, int], ...] = ((0, 2), (1, 3))
    recovery_skips: tuple[tuple[int, int], ...] = ((0, 2),)

    def validate(self) -> None:
        if self.learning_rate < 0 or self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError("learning_rate/steps must be >= 0 and batch_size >= 1")
        if self.w_recon < 0 or self.w_loop < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.adam_eps <= 0:
            raise ConfigurationError("invalid Adam moment coefficients")
        if self.crop_frames < 1 or self.saliency_batch < 1:
            raise ConfigurationError("crop_frames and saliency_batch must be positive")
        if self.prune_ratio is not None and self.prune_ratio < 1:
            raise ConfigurationError("prune_ratio must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training config keys: {sorted(unknown)}")
        for key, kind in (("enhancer", "enhancer"), ("recovery", "recovery")):
            if key in d and isinstance(d[key], dict):
                d[key] = config_from_dict({"kind": kind, **d[key]})
        for key in ("enhancer_skips", "recovery_skips"):
            if key in d:
                d[key] = tuple(tuple(s) for s in d[key])
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    recon_rmse: float
    loop: float
    w_recon: float = 1.0
    w_loop: float = 1.0


def rmse(a: nx.Tensor, b: nx.Tensor) -> nx.Tensor:
    return nx.sqrt(nx.mean_all(nx.square(nx.sub(a, b))))


def joint_loss_graph(enhanced, target, rppg_pred, rppg_ref, weights=(1.0, 1.0)):
    """Differentiable joint loss; returns ``(total, recon, loop)`` tensors."""
    if enhanced.shape != target.shape:
        raise ContractViolation(f"enhanced {enhanced.shape} vs target {target.shape}")
    if rppg_pred.shape != rppg_ref.shape:
        raise ContractViolation(f"rppg_pred {rppg_pred.shape} vs rppg_ref {rppg_ref.shape}")
    recon = rmse(enhanced, target)
    loop = rmse(rppg_pred, rppg_ref)
    total = nx.add(nx.scale(recon, weights[0]), nx.scale(loop, weights[1]))
    return total, recon, loop


def _as_array(x) -> np.ndarray:
    if isinstance(x, VideoClip):
        return x.frames
    if isinstance(x, RppgSignal):
        return x.samples
    return np.asarray(x, dtype=np.float64)


def joint_loss(enhanced, target, rppg_pred, rppg_ref, weights=(1.0, 1.0)) -> LossBreakdown:
    """Loss breakdown for concrete clips/signals (or arrays of matching shape)."""
    parts = [nx.Tensor(_as_array(v)) for v in (enhanced, target, rppg_pred, rppg_ref)]
    total, recon, loop = joint_loss_graph(*parts, weights=weights)
    return LossBreakdown(float(total.data), float(recon.data), float(loop.data),
                         float(weights[0]), float(weights[1]))


def joint_objective(graph, tensors, batch, config: TrainConfig, models: Sequence[ModelParams]):
    """Build the joint loss over ``batch = (low, high)`` arrays [N, 3, T, H, W]."""
    low, high = batch
    enh_cfg, rec_cfg = models[0].config, models[1].config
    x_low, x_high = nx.Tensor(low), nx.Tensor(high)
    enhanced = enhance(enh_cfg, tensors, x_low)
    pred = recover(rec_cfg, tensors, enhanced)
    ref = recover(rec_cfg, tensors, x_high)
    return joint_loss_graph(enhanced, x_high, pred, ref, (config.w_recon, config.w_loop))


# -- optimiser ----------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
                config: TrainConfig, mask: Optional[SparsityMask] = None):
    """One Adam step followed by mask multiplication; returns (params, state)."""
    t = state.t + 1
    b1, b2 = config.beta1, config.beta2
    new_m, new_v, out = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        q = p - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        if mask is not None and name in mask.entries:
            q = q * mask.entries[name]
        new_m[name], new_v[name], out[name] = m, v, q
    return out, AdamState(new_m, new_v, t)


def train_step(models: Sequence[ModelParams], batch, mask: Optional[SparsityMask],
               state: AdamState, config: TrainConfig):
    """Forward + backward over ``batch`` and one masked Adam update of both
    networks.  The reported loss is the pre-update value."""
    g = nx.Graph()
    tensors = {}
    for m in models:
        tensors.update(bind(m, g))
    total, recon, loop = joint_objective(g, tensors, batch, config, models)
    if not np.isfinite(total.data):
        raise NumericError(f"non-finite training loss at step {state.t + 1}")
    grads = nx.backward(g, total)
    flat = {n: a for m in models for n, a in m.entries.items()}
    updated, state = adam_update(flat, grads, state, config, mask)
    new_models = [m.with_entries({n: updated[n] for n in m.entries}) for m in models]
    loss = LossBreakdown(float(total.data), float(recon.data), float(loop.data),
                         config.w_recon, config.w_loop)
    return new_models, state, loss


# -- data ---------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    low: Path
    high: Path
    roi: Optional[Path] = None
    truth_bpm: Optional[float] = None


def read_manifest(path) -> list[ManifestEntry]:
    """Parse ``low<TAB>high[<TAB>roi[<TAB>truth_bpm]]`` lines; '#' starts a comment."""
    path = Path(path)
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) < 2 or not cols[0] or not cols[1]:
            raise FormatError(f"{path}:{lineno}: need low_path<TAB>high_path")
        roi = base / cols[2] if len(cols) > 2 and cols[2] else None
        truth = None
        if len(cols) > 3 and cols[3]:
            try:
                truth = float(cols[3])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: bad truth_bpm {cols[3]!r}") from exc
        entries.append(ManifestEntry(base / cols[0], base / cols[1], roi, truth))
    if not entries:
        raise FormatError(f"{path}: manifest lists no clip pairs")
    return entries


def load_clip(path, roi_path=None) -> VideoClip:
    clip = read_clip(path)
    if roi_path is not None:
        clip = crop_roi(clip, read_roi(roi_path))
    return clip


def load_pairs(entries: Sequence[ManifestEntry]) -> list[tuple[np.ndarray, np.ndarray]]:
    for e in entries:
        for p in (e.low, e.high) + ((e.roi,) if e.roi else ()):
            if not Path(p).is_file():
                raise FileNotFoundError(f"missing dataset file {p}")
    pairs = []
    for e in entries:
        low, high = load_clip(e.low, e.roi), load_clip(e.high, e.roi)
        if low.shape != high.shape:
            raise ContractViolation(f"{e.low} and {e.high} differ in shape")
        pairs.append((clips_to_batch([low])[0], clips_to_batch([high])[0]))
    if len({p[0].shape[2:] for p in pairs}) != 1:
        raise ContractViolation("all clips must share one frame size")
    return pairs


class BatchSampler:
    """Seeded epoch-shuffled batches of random temporal crops."""

    def __init__(self, pairs, batch_size: int, crop_frames: int, seed: int):
        self.pairs = pairs
        self.batch_size = batch_size
        self.crop = min(crop_frames, min(p[0].shape[1] for p in pairs))
        self.rng = np.random.default_rng(seed)
        self._queue: list[int] = []

    def _next_index(self) -> int:
        if not self._queue:
            self._queue = list(self.rng.permutation(len(self.pairs)))
        return int(self._queue.pop(0))

    def sample(self, n: int | None = None):
        lows, highs = [], []
        for _ in range(n or self.batch_size):
            low, high = self.pairs[self._next_index()]
            start = int(self.rng.integers(0, low.shape[1] - self.crop + 1))
            lows.append(low[:, start:start + self.crop])
            highs.append(high[:, start:start + self.crop])
        return np.ascontiguousarray(np.stack(lows)), np.ascontiguousarray(np.stack(highs))


# -- driver -------------------------------------------------------------------

@dataclass
class FitResult:
    checkpoint: Path
    loss_curve: Path
    models: list[ModelParams]
    mask: Optional[SparsityMask]
    history: list[LossBreakdown]


def initial_models(config: TrainConfig) -> list[ModelParams]:
    return [init_params(config.enhancer, config.seed),
            init_params(config.recovery, config.seed + 1)]


def prune_models(models: Sequence[ModelParams], batch, config: TrainConfig):
    """Skip augmentation, connection sensitivity on ``batch``, global prune, mask."""
    enh = add_skip_connections(models[0], config.enhancer_skips)
    rec = add_skip_connections(models[1], config.recovery_skips)
    augmented = [enh, rec]

    def loss_fn(graph, tensors, b):
        return joint_objective(graph, tensors, b, config, augmented)[0]

    saliency = connection_sensitivity(augmented, batch, loss_fn)
    mask = prune(saliency, config.prune_ratio)
    return [apply_mask(m, mask) for m in augmented], mask


def write_loss_curve(history: Sequence[LossBreakdown], path) -> Path:
    path = Path(path)
    lines = ["step,total,recon_rmse,loop"]
    lines += [f"{i},{h.total!r},{h.recon_rmse!r},{h.loop!r}" for i, h in enumerate(history, 1)]
    path.write_text("\n".join(lines) + "\n")
    return path


def fit(config: TrainConfig, manifest, mask: Optional[SparsityMask] = None, out_dir=".",
        models: Optional[Sequence[ModelParams]] = None) -> FitResult:
    """Train both networks on the manifest's pairs and write a checkpoint
    (``checkpoint.rpck``) plus the per-step loss curve (``loss_curve.csv``)."""
    config.validate()
    pairs = load_pairs(read_manifest(manifest))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    models = list(models) if models is not None else initial_models(config)

    if config.prune_ratio is not None and mask is None:
        sal_sampler = BatchSampler(pairs, config.saliency_batch, config.crop_frames,
                                   seed=config.seed + 7919)
        models, mask = prune_models(models, sal_sampler.sample(config.saliency_batch), config)
        log.info("pruned to %d of %d weights (ratio %.3g)", mask.kept, mask.total,
                 mask.compression_ratio)
    elif mask is not None:
        models = [apply_mask(m, mask) for m in models]

    sampler = BatchSampler(pairs, config.batch_size, config.crop_frames, seed=config.seed)
    state = AdamState()
    history = []
    for step in range(config.steps):
        models, state, loss = train_step(models, sampler.sample(), mask, state, config)
        history.append(loss)
        if step % 50 == 0:
            log.info("step %d total %.5f recon %.5f loop %.5f", step + 1, loss.total,
                     loss.recon_rmse, loss.loop)
    ckpt = save_checkpoint(models, mask, out / "checkpoint.rpck")
    curve = write_loss_curve(history, out / "loss_curve.csv")
    return FitResult(ckpt, curve, models, mask, history)


def load_train_config(path) -> TrainConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    return TrainConfig.from_dict(data.get("train", data))
