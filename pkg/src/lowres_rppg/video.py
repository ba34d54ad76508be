"""Video clips: binary I/O, low-resolution degradation and ROI cropping.

Clip file layout (little-endian)::

    magic "RPGC" | version u8 = 1 | dtype u8 (0 = u8, 1 = f32) | reserved u16 = 0
    fps f32 | T u32 | H u32 | W u32 | T*H*W*3 samples, frame-major, channel-last

u8 samples map to [0, 1] by division by 255.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractViolation, FormatError, TruncatedFileError

MAGIC = b"RPGC"
VERSION = 1
_HEADER = struct.Struct("<4sBBHfIII")
_DTYPES = {0: np.dtype("<u1"), 1: np.dtype("<f4")}


@dataclass(frozen=True)
class VideoClip:
    frames: np.ndarray  # [T, H, W, 3] float64 in [0, 1]
    fps: float

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 4 or frames.shape[3] != 3 or frames.shape[0] < 1:
            raise ContractViolation(f"clip frames must be [T>=1, H, W, 3], got {frames.shape}")
        if not np.isfinite(self.fps) or self.fps <= 0:
            raise ContractViolation(f"clip fps must be finite and positive, got {self.fps}")
        if frames.size and (np.min(frames) < 0.0 or np.max(frames) > 1.0 or
                            not np.all(np.isfinite(frames))):
            raise ContractViolation("clip values must lie in [0, 1]")
        if frames.flags.writeable:
            frames = frames.copy()
            frames.flags.writeable = False
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "fps", float(self.fps))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.frames.shape

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class RoiBox:
    top: int
    left: int
    height: int
    width: int

    def check(self, frame_h: int, frame_w: int) -> None:
        if min(self.top, self.left) < 0 or min(self.height, self.width) < 1:
            raise ContractViolation(f"invalid ROI {self}")
        if self.top + self.height > frame_h or self.left + self.width > frame_w:
            raise ContractViolation(f"ROI {self} exceeds frame {frame_h}x{frame_w}")


def write_clip(clip: VideoClip, path, dtype: str = "f32") -> Path:
    path = Path(path)
    T, H, W, _ = clip.shape
    if dtype == "f32":
        code, payload = 1, clip.frames.astype("<f4")
    elif dtype == "u8":
        code, payload = 0, np.rint(clip.frames * 255.0).astype("<u1")
    else:
        raise ConfigurationError(f"unknown clip dtype {dtype!r}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, code, 0, clip.fps, T, H, W))
        fh.write(np.ascontiguousarray(payload).tobytes())
    return path


def read_clip(path) -> VideoClip:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        if raw[:4] != MAGIC[:len(raw[:4])]:
            raise FormatError(f"{path}: bad magic {raw[:4]!r}")
        raise TruncatedFileError(path, len(raw), _HEADER.size)
    magic, version, code, _reserved, fps, T, H, W = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported clip version {version}")
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    dt = _DTYPES[code]
    count = T * H * W * 3
    expected = count * dt.itemsize
    body = raw[_HEADER.size:]
    if len(body) < expected:
        raise TruncatedFileError(path, len(raw), expected)
    data = np.frombuffer(body, dtype=dt, count=count).astype(np.float64)
    if code == 0:
        data /= 255.0
    return VideoClip(data.reshape(T, H, W, 3), float(fps))


def read_roi(path) -> RoiBox:
    fields = Path(path).read_text().split()
    if len(fields) != 4:
        raise FormatError(f"{path}: ROI sidecar needs 'top left height width'")
    try:
        return RoiBox(*(int(f) for f in fields))
    except ValueError as exc:
        raise FormatError(f"{path}: ROI values must be decimal integers") from exc


def write_roi(box: RoiBox, path) -> Path:
    path = Path(path)
    path.write_text(f"{box.top} {box.left} {box.height} {box.width}\n")
    return path


def full_frame(clip: VideoClip) -> RoiBox:
    return RoiBox(0, 0, clip.shape[1], clip.shape[2])


def crop_roi(clip: VideoClip, box: RoiBox) -> VideoClip:
    box.check(clip.shape[1], clip.shape[2])
    sub = clip.frames[:, box.top:box.top + box.height, box.left:box.left + box.width, :]
    return VideoClip(sub, clip.fps)


def degrade(clip: VideoClip, factor: int, noise_sigma: float = 0.0, seed: int = 0) -> VideoClip:
    """Block-mean downsample by ``factor``, nearest-neighbour upsample back,
    add seeded Gaussian noise and clamp to [0, 1]."""
    T, H, W, _ = clip.shape
    if factor < 1 or H % factor or W % factor:
        raise ConfigurationError(f"frame {H}x{W} is not divisible by factor {factor}")
    if noise_sigma < 0:
        raise ConfigurationError("noise_sigma must be non-negative")
    if factor == 1:
        out = clip.frames.copy()
    else:
        blocks = clip.frames.reshape(T, H // factor, factor, W // factor, factor, 3)
        small = blocks.mean(axis=(2, 4))
        out = np.repeat(np.repeat(small, factor, axis=1), factor, axis=2)
    if noise_sigma > 0:
        out = out + np.random.default_rng(seed).normal(0.0, noise_sigma, size=out.shape)
        out = np.clip(out, 0.0, 1.0)
    return VideoClip(out, clip.fps)
