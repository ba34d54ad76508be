"""Synthetic pulsatile face-video surrogates with known heart rate."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .signal import RppgSignal
from .video import VideoClip, degrade, write_clip

SKIN_TONE = (0.6, 0.45, 0.4)
TEXTURE_AMPLITUDE = 0.05
MOTION_HZ = 0.3
HARMONIC_RATIO = 0.3


@dataclass(frozen=True)
class SynthConfig:
    hr_bpm: float = 72.0
    fps: float = 30.0
    duration: float = 20.0
    height: int = 8
    width: int = 8
    amplitudes: tuple[float, float, float] = (0.012, 0.03, 0.008)
    noise_sigma: float = 0.0
    motion_px: float = 0.0
    seed: int = 0

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.fps))

    def validate(self) -> None:
        if not 42.0 <= self.hr_bpm <= 240.0:
            raise ConfigurationError(f"hr_bpm {self.hr_bpm} outside [42, 240]")
        if self.fps <= 0 or self.hr_bpm / 60.0 >= self.fps / 2.0:
            raise ConfigurationError(
                f"hr {self.hr_bpm} bpm violates Nyquist at {self.fps} fps")
        if self.n_frames < 64:
            raise ConfigurationError("synthetic clips need at least 64 frames")
        if self.height < 1 or self.width < 1:
            raise ConfigurationError("frame extents must be positive")
        if self.noise_sigma < 0 or self.motion_px < 0 or min(self.amplitudes) < 0:
            raise ConfigurationError("noise, motion and amplitudes must be non-negative")


def pulse_wave(hr_bpm: float, n: int, fps: float) -> np.ndarray:
    phase = 2.0 * np.pi * (hr_bpm / 60.0) * np.arange(n) / fps
    return np.sin(phase) + HARMONIC_RATIO * np.sin(2.0 * phase)


def _shift(tex: np.ndarray, dy: float, dx: float) -> np.ndarray:
    """Bilinear, wrap-around translation of an [H, W, 3] texture."""
    out = tex
    for axis, d in ((0, dy), (1, dx)):
        lo = math.floor(d)
        frac = d - lo
        a = np.roll(out, lo, axis=axis)
        out = a if frac == 0 else (1.0 - frac) * a + frac * np.roll(out, lo + 1, axis=axis)
    return out


def generate_pulse_clip(config: SynthConfig) -> tuple[VideoClip, RppgSignal, float]:
    """Render ``base + a_c * p(t) + texture + noise`` per channel.

    Values are rounded to float32 precision so a clip survives the f32 file
    format unchanged.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    T, H, W = config.n_frames, config.height, config.width
    texture = rng.uniform(-TEXTURE_AMPLITUDE, TEXTURE_AMPLITUDE, size=(H, W, 3))
    p = pulse_wave(config.hr_bpm, T, config.fps)
    base = np.asarray(SKIN_TONE) + np.outer(p, config.amplitudes)  # [T, 3]
    if config.motion_px > 0:
        frames = np.empty((T, H, W, 3))
        for t in range(T):
            s = config.motion_px * math.sin(2.0 * math.pi * MOTION_HZ * t / config.fps)
            frames[t] = _shift(texture, s, s)
    else:
        frames = np.broadcast_to(texture, (T, H, W, 3)).copy()
    frames += base[:, None, None, :]
    if config.noise_sigma > 0:
        frames += rng.normal(0.0, config.noise_sigma, size=frames.shape)
    frames = np.clip(frames, 0.0, 1.0).astype(np.float32).astype(np.float64)
    return VideoClip(frames, config.fps), RppgSignal(p, config.fps), float(config.hr_bpm)


def _child_seeds(seed: int, n: int) -> list[int]:
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


def generate_dataset(n: int, hr_range=(50.0, 150.0), template: SynthConfig = SynthConfig(),
                     out_dir=".", factor: int = 2, degrade_noise: float = 0.0) -> Path:
    """Write ``n`` (low-res, high-res) clip pairs and a manifest.

    Manifest lines are ``low<TAB>high<TAB>roi<TAB>truth_bpm`` with paths
    relative to the manifest; the ROI field is left empty (full frame).
    """
    if n < 1:
        raise ConfigurationError("dataset needs at least one clip")
    lo, hi = map(float, hr_range)
    if not 42.0 <= lo <= hi <= 240.0:
        raise ConfigurationError(f"hr range [{lo}, {hi}] outside [42, 240]")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = _child_seeds(template.seed, n + 1)
    hrs = np.random.default_rng(seeds[0]).uniform(lo, hi, size=n)
    lines = ["# low_path\thigh_path\troi_path\ttruth_bpm"]
    for i in range(n):
        cfg = replace(template, hr_bpm=float(hrs[i]), seed=seeds[i + 1])
        clip, _, hr = generate_pulse_clip(cfg)
        low = degrade(clip, factor, degrade_noise, seed=seeds[i + 1] ^ 0x5EED)
        high_name, low_name = f"high_{i:04d}.rpgc", f"low_{i:04d}.rpgc"
        write_clip(clip, out / high_name)
        write_clip(low, out / low_name)
        lines.append(f"{low_name}\t{high_name}\t\t{hr!r}")
    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
