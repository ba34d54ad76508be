"""The enhancement and recovery networks, their parameters and checkpoints.

Both networks are stacks of stride-1 "same"-padded 3-D convolutions over
batches shaped [N, C, T, H, W].  Optional 1x1x1 skip projections add the
output of an earlier stage to the input of a later one (see
:func:`lowres_rppg.pruning.add_skip_connections`).

Parameter names are qualified by the model kind, e.g. ``enhancer.conv0.weight``
or ``recovery.head.bias``; only entries ending in ``.weight`` take part in
pruning.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from . import numerics as nx
from .errors import ChecksumError, ConfigurationError, ContractViolation, FormatError
from .video import VideoClip

Kernel = tuple[int, int, int]


def _kernels(kernels, depth) -> tuple[Kernel, ...]:
    if kernels is None:
        return ((3, 3, 3),) * depth
    return tuple(tuple(int(v) for v in k) for k in kernels)


def _check_common(name, widths, kernels, skips, stage_out):
    if not widths or any(int(w) < 1 for w in widths):
        raise ConfigurationError(f"{name}: widths must be positive, got {widths}")
    if len(kernels) != len(widths):
        raise ConfigurationError(f"{name}: need one kernel per stage")
    for k in kernels:
        if len(k) != 3 or any(v < 1 or v % 2 == 0 for v in k):
            raise ConfigurationError(f"{name}: kernel extents must be odd and positive, got {k}")
    seen = set()
    for s, d in skips:
        if not (0 <= s < len(widths) and 0 <= d < len(widths)):
            raise ConfigurationError(f"{name}: skip ({s}, {d}) out of range")
        if s >= d:
            raise ConfigurationError(f"{name}: skip ({s}, {d}) must run forward")
        if (s, d) in seen:
            raise ConfigurationError(f"{name}: duplicate skip ({s}, {d})")
        seen.add((s, d))
        stage_out(s, d)


@dataclass(frozen=True)
class EnhancerConfig:
    """Shape-preserving video-to-video network; the last width must be 3."""

    widths: tuple[int, ...] = (8, 16, 16, 3)
    kernels: tuple[Kernel, ...] = None
    skips: tuple[tuple[int, int], ...] = ()

    kind = "enhancer"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "kernels", _kernels(self.kernels, len(widths)))
        object.__setattr__(self, "skips", tuple((int(s), int(d)) for s, d in self.skips))
        self.validate()

    @property
    def depth(self) -> int:
        return len(self.widths)

    def validate(self) -> None:
        _check_common("enhancer", self.widths, self.kernels, self.skips, lambda s, d: None)
        if self.widths[-1] != 3:
            raise ConfigurationError("enhancer: final stage must output 3 channels")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "widths": list(self.widths),
                "kernels": [list(k) for k in self.kernels],
                "skips": [list(s) for s in self.skips]}


@dataclass(frozen=True)
class RecoveryConfig:
    """Video-to-trace network: conv stages, optional per-stage spatial average
    pooling, global spatial mean, then a 1x1x1 projection to one channel."""

    widths: tuple[int, ...] = (8, 16, 16)
    kernels: tuple[Kernel, ...] = None
    pools: tuple[int, ...] = None
    skips: tuple[tuple[int, int], ...] = ()

    kind = "recovery"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "kernels", _kernels(self.kernels, len(widths)))
        pools = (1,) * len(widths) if self.pools is None else tuple(int(p) for p in self.pools)
        object.__setattr__(self, "pools", pools)
        object.__setattr__(self, "skips", tuple((int(s), int(d)) for s, d in self.skips))
        self.validate()

    @property
    def depth(self) -> int:
        return len(self.widths)

    def validate(self) -> None:
        if len(self.pools) != len(self.widths) or any(p < 1 for p in self.pools):
            raise ConfigurationError("recovery: need one positive pooling factor per stage")

        def same_grid(s, d):
            if int(np.prod(self.pools[s + 1:d])) != 1:
                raise ConfigurationError(
                    f"recovery: skip ({s}, {d}) crosses a pooling stage")

        _check_common("recovery", self.widths, self.kernels, self.skips, same_grid)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "widths": list(self.widths),
                "kernels": [list(k) for k in self.kernels],
                "pools": list(self.pools), "skips": [list(s) for s in self.skips]}


ModelConfig = Union[EnhancerConfig, RecoveryConfig]


def config_from_dict(d: Mapping) -> ModelConfig:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind == "enhancer":
        return EnhancerConfig(**d)
    if kind == "recovery":
        return RecoveryConfig(**d)
    raise ConfigurationError(f"unknown model kind {kind!r}")


def _stage_in(config: ModelConfig, i: int) -> int:
    return 3 if i == 0 else config.widths[i - 1]


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    p = config.kind
    shapes = {}
    for i, (w, k) in enumerate(zip(config.widths, config.kernels)):
        shapes[f"{p}.conv{i}.weight"] = (w, _stage_in(config, i)) + k
        shapes[f"{p}.conv{i}.bias"] = (w,)
    for s, d in config.skips:
        shapes[f"{p}.skip{s}_{d}.weight"] = (_stage_in(config, d), config.widths[s], 1, 1, 1)
    if config.kind == "recovery":
        shapes[f"{p}.head.weight"] = (1, config.widths[-1], 1, 1, 1)
        shapes[f"{p}.head.bias"] = (1,)
    return shapes


@dataclass(frozen=True)
class ModelParams:
    config: ModelConfig
    entries: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if set(shapes) != set(self.entries):
            missing = set(shapes) ^ set(self.entries)
            raise ContractViolation(f"parameter names disagree with architecture: {sorted(missing)}")
        frozen = {}
        for name in shapes:
            arr = np.array(self.entries[name], dtype=np.float64)
            if arr.shape != shapes[name]:
                raise ContractViolation(f"{name}: shape {arr.shape} != {shapes[name]}")
            arr.flags.writeable = False
            frozen[name] = arr
        object.__setattr__(self, "entries", frozen)

    @property
    def kind(self) -> str:
        return self.config.kind

    def weight_names(self) -> list[str]:
        return [n for n in self.entries if n.endswith(".weight")]

    def num_weights(self) -> int:
        return sum(self.entries[n].size for n in self.weight_names())

    def with_entries(self, updates: Mapping[str, np.ndarray]) -> "ModelParams":
        merged = dict(self.entries)
        merged.update(updates)
        return ModelParams(self.config, merged)


def temporal_radius(config: ModelConfig) -> int:
    """Frames at each end of the output that see temporal zero padding."""
    return sum(k[0] // 2 for k in config.kernels)


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """He-uniform weights (variance 2 / fan_in), zero biases, zero skip projections."""
    config.validate()
    rng = np.random.default_rng(seed)
    entries = {}
    for name, shape in param_shapes(config).items():
        if ".skip" in name or name.endswith(".bias"):
            entries[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            entries[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(config, entries)


# -- forward graphs ---------------------------------------------------------

def bind(params: ModelParams, graph: nx.Graph | None = None) -> dict[str, nx.Tensor]:
    """Wrap parameters as graph leaves (trainable) or constants (graph=None)."""
    if graph is None:
        return {n: nx.Tensor(a) for n, a in params.entries.items()}
    return {n: graph.param(n, a) for n, a in params.entries.items()}


def _conv(x, w, b, kernel):
    pad = tuple(k // 2 for k in kernel)
    return nx.conv3d(x, w, b, stride=(1, 1, 1), padding=pad)


def _skip_input(config, tensors, outputs, d, h):
    for s, dd in config.skips:
        if dd == d:
            proj = nx.conv3d(outputs[s], tensors[f"{config.kind}.skip{s}_{d}.weight"])
            h = nx.add(h, proj)
    return h


def _check_batch(x: nx.Tensor, who: str) -> None:
    if x.ndim != 5 or x.shape[1] != 3:
        raise ContractViolation(f"{who}: expected batch [N, 3, T, H, W], got {x.shape}")


def enhance(config: EnhancerConfig, tensors: Mapping[str, nx.Tensor], x: nx.Tensor) -> nx.Tensor:
    """Enhancer forward on a batch; output is squashed into (0, 1)."""
    _check_batch(x, "enhancer")
    p = config.kind
    outputs = []
    h = x
    for i, kernel in enumerate(config.kernels):
        h = _skip_input(config, tensors, outputs, i, h)
        z = _conv(h, tensors[f"{p}.conv{i}.weight"], tensors[f"{p}.conv{i}.bias"], kernel)
        h = nx.sigmoid(z) if i == config.depth - 1 else nx.relu(z)
        outputs.append(h)
    return h


def _avg_pool_hw(h: nx.Tensor, f: int) -> nx.Tensor:
    N, C, T, H, W = h.shape
    if H % f or W % f:
        raise ContractViolation(f"recovery: extents {H}x{W} not divisible by pool {f}")
    h = nx.reshape(h, (N, C, T, H // f, f, W // f, f))
    h = nx.mean_axes(h, (4, 6))
    return nx.reshape(h, (N, C, T, H // f, W // f))


def recover(config: RecoveryConfig, tensors: Mapping[str, nx.Tensor], x: nx.Tensor) -> nx.Tensor:
    """Recovery forward on a batch; returns traces shaped [N, T]."""
    _check_batch(x, "recovery")
    p = config.kind
    outputs = []
    h = x
    for i, kernel in enumerate(config.kernels):
        h = _skip_input(config, tensors, outputs, i, h)
        h = nx.relu(_conv(h, tensors[f"{p}.conv{i}.weight"], tensors[f"{p}.conv{i}.bias"], kernel))
        if config.pools[i] > 1:
            h = _avg_pool_hw(h, config.pools[i])
        outputs.append(h)
    h = nx.mean_axes(h, (3, 4))
    h = nx.conv3d(h, tensors[f"{p}.head.weight"], tensors[f"{p}.head.bias"])
    N, _, T, _, _ = h.shape
    return nx.reshape(h, (N, T))


def clips_to_batch(clips: Sequence[VideoClip]) -> np.ndarray:
    """Stack clips [T, H, W, 3] into a batch [N, 3, T, H, W]."""
    shapes = {c.shape for c in clips}
    if len(shapes) != 1:
        raise ContractViolation(f"clips in a batch must share one shape, got {sorted(shapes)}")
    return np.ascontiguousarray(np.stack([c.frames for c in clips]).transpose(0, 4, 1, 2, 3))


def batch_to_frames(batch: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(batch.transpose(0, 2, 3, 4, 1))


def enhancer_forward(params: ModelParams, clip: VideoClip) -> VideoClip:
    if params.kind != "enhancer":
        raise ContractViolation("enhancer_forward needs enhancer parameters")
    out = enhance(params.config, bind(params), nx.Tensor(clips_to_batch([clip])))
    frames = batch_to_frames(out.data)[0]
    return VideoClip(frames, clip.fps)


def recovery_forward(params: ModelParams, clip: VideoClip):
    from .signal import RppgSignal

    if params.kind != "recovery":
        raise ContractViolation("recovery_forward needs recovery parameters")
    out = recover(params.config, bind(params), nx.Tensor(clips_to_batch([clip])))
    return RppgSignal(out.data[0].copy(), clip.fps)


# -- checkpoints ------------------------------------------------------------
#
# "RPCK" | version u8 | count u32 | records | [mask count u32 | mask records] | crc32 u32
# record: name_len u16 | name | ndim u8 | extents u32[ndim] | data (f64, or u8 in the mask)
# Architecture configs travel as f64 records named "<kind>.__config__" holding
# JSON bytes; a mask's compression ratio travels as "__mask_ratio__".

CKPT_MAGIC = b"RPCK"
CKPT_VERSION = 1
_CONFIG_SUFFIX = ".__config__"
_RATIO_NAME = "__mask_ratio__"


def _pack_record(name: str, arr: np.ndarray, dtype: str) -> bytes:
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dtype).tobytes()


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: checkpoint truncated at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def record(self, dtype: str) -> tuple[str, np.ndarray]:
        (n,) = self.unpack("<H")
        name = self.take(n).decode("utf-8")
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}I") if ndim else ()
        dt = np.dtype(dtype)
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(self.take(count * dt.itemsize), dtype=dt).reshape(shape)
        return name, arr


def save_checkpoint(params: Union[ModelParams, Iterable[ModelParams]], mask=None, path=None) -> Path:
    models = [params] if isinstance(params, ModelParams) else list(params)
    kinds = [m.kind for m in models]
    if len(set(kinds)) != len(kinds):
        raise ContractViolation("checkpoint holds at most one model of each kind")
    records = []
    for m in models:
        blob = np.frombuffer(json.dumps(m.config.to_dict(), sort_keys=True).encode(), dtype=np.uint8)
        records.append(_pack_record(m.kind + _CONFIG_SUFFIX, blob.astype(np.float64), "<f8"))
        for name, arr in m.entries.items():
            records.append(_pack_record(name, arr, "<f8"))
    if mask is not None:
        records.append(_pack_record(_RATIO_NAME, np.array([mask.compression_ratio]), "<f8"))
    body = CKPT_MAGIC + struct.pack("<BI", CKPT_VERSION, len(records)) + b"".join(records)
    if mask is not None:
        body += struct.pack("<I", len(mask.entries))
        for name in sorted(mask.entries):
            body += _pack_record(name, mask.entries[name], "<u1")
    body += struct.pack("<I", zlib.crc32(body))
    path = Path(path)
    path.write_bytes(body)
    return path


def load_checkpoint(path):
    """Return ``(models, mask)``; ``models`` is a list ordered as saved."""
    from .pruning import SparsityMask

    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < 9 or buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    if buf[4] != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {buf[4]}")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise ChecksumError(f"{path}: checkpoint CRC32 mismatch")
    rd = _Reader(buf[:-4], path)
    rd.take(5)
    (count,) = rd.unpack("<I")
    configs, tensors, ratio = {}, {}, None
    order = []
    for _ in range(count):
        name, arr = rd.record("<f8")
        if name.endswith(_CONFIG_SUFFIX):
            kind = name[:-len(_CONFIG_SUFFIX)]
            configs[kind] = config_from_dict(json.loads(arr.astype(np.uint8).tobytes()))
            order.append(kind)
        elif name == _RATIO_NAME:
            ratio = float(arr[0])
        else:
            tensors[name] = arr.copy()
    mask = None
    if rd.pos < len(rd.buf):
        (mcount,) = rd.unpack("<I")
        entries = dict(rd.record("<u1") for _ in range(mcount))
        mask = SparsityMask({n: a.copy() for n, a in entries.items()},
                            ratio if ratio is not None else 1.0)
    if rd.pos != len(rd.buf):
        raise FormatError(f"{path}: trailing bytes after checkpoint body")
    models = []
    for kind in order:
        mine = {n: a for n, a in tensors.items() if n.startswith(kind + ".")}
        models.append(ModelParams(configs[kind], mine))
    return models, mask
