"""Classical rPPG signal path: RGB traces, detrending, band-pass, spectra, HR."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.signal
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .errors import ConfigurationError, ContractViolation, NumericError
from .video import VideoClip

HR_BAND = (0.7, 4.0)
DETREND_LAMBDA_30FPS = 300.0
# Welch segment cap at 30 fps; longer records are averaged over 50%-overlap segments.
SEGMENT_CAP_30FPS = 1024


@dataclass(frozen=True)
class RppgSignal:
    samples: np.ndarray
    fs: float

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64).reshape(-1)
        if x.size < 2:
            raise ContractViolation("an rPPG signal needs at least 2 samples")
        if not np.isfinite(self.fs) or self.fs <= 0:
            raise ContractViolation(f"sample rate must be positive, got {self.fs}")
        if not np.all(np.isfinite(x)):
            raise NumericError("rPPG signal contains non-finite samples")
        x.flags.writeable = False
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "fs", float(self.fs))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.samples.size) / self.fs


@dataclass(frozen=True)
class SpectralEstimate:
    freqs: np.ndarray
    power: np.ndarray

    @property
    def resolution(self) -> float:
        return float(self.freqs[1] - self.freqs[0]) if self.freqs.size > 1 else float("nan")


@dataclass(frozen=True)
class HrEstimate:
    bpm: float
    peak_freq: float
    confidence: float


def spatial_mean_rgb(clip: VideoClip) -> tuple[RppgSignal, RppgSignal, RppgSignal]:
    means = clip.frames.mean(axis=(1, 2))
    return tuple(RppgSignal(means[:, c], clip.fps) for c in range(3))


def default_lambda(fs: float) -> float:
    return DETREND_LAMBDA_30FPS * fs / 30.0


def detrend(signal: RppgSignal, lam: float | None = None) -> RppgSignal:
    """Smoothness-priors detrending: x - (I + lam^2 D2'D2)^-1 x."""
    if lam is None:
        lam = default_lambda(signal.fs)
    if lam <= 0:
        raise ConfigurationError("detrend lambda must be positive")
    n = len(signal)
    if n < 3:
        raise ContractViolation("detrend needs at least 3 samples")
    d2 = sparse.diags([1.0, -2.0, 1.0], [0, 1, 2], shape=(n - 2, n), format="csc")
    system = (sparse.identity(n, format="csc") + lam ** 2 * (d2.T @ d2)).tocsc()
    trend = spsolve(system, signal.samples)
    if not np.all(np.isfinite(trend)):
        raise NumericError("detrend: singular smoothness system")
    return RppgSignal(signal.samples - trend, signal.fs)


def bandpass(signal: RppgSignal, lo: float = HR_BAND[0], hi: float = HR_BAND[1]) -> RppgSignal:
    """Zero-phase FFT mask keeping frequencies in [lo, hi]."""
    if not 0 < lo < hi < signal.fs / 2:
        raise ConfigurationError(f"band [{lo}, {hi}] must satisfy 0 < lo < hi < fs/2 = {signal.fs / 2}")
    n = len(signal)
    spec = np.fft.rfft(signal.samples)
    f = np.fft.rfftfreq(n, d=1.0 / signal.fs)
    spec[(f < lo) | (f > hi)] = 0.0
    return RppgSignal(np.fft.irfft(spec, n=n), signal.fs)


def segment_length(n: int, fs: float) -> int:
    return min(n, SEGMENT_CAP_30FPS * math.ceil(fs / 30.0))


def power_spectrum(signal: RppgSignal) -> SpectralEstimate:
    """Welch PSD (Hann, 50% overlap) of the mean-removed signal, one-sided density."""
    n = len(signal)
    if n < 8:
        raise ContractViolation("power_spectrum needs at least 8 samples")
    x = signal.samples - signal.samples.mean()
    seg = segment_length(n, signal.fs)
    freqs, power = scipy.signal.welch(x, fs=signal.fs, window="hann", nperseg=seg,
                                      noverlap=seg // 2, detrend=False,
                                      return_onesided=True, scaling="density")
    return SpectralEstimate(freqs, np.maximum(power, 0.0))


def estimate_hr(spectrum: SpectralEstimate, band=HR_BAND) -> HrEstimate:
    lo, hi = band
    sel = np.flatnonzero((spectrum.freqs >= lo) & (spectrum.freqs <= hi))
    if sel.size == 0:
        raise ConfigurationError(f"band [{lo}, {hi}] contains no spectral bin")
    p = spectrum.power[sel]
    k = int(np.argmax(p))  # first maximum = lowest frequency
    total = float(p.sum())
    peak = float(spectrum.freqs[sel[k]])
    conf = float(p[k] / total) if total > 0 else 0.0
    return HrEstimate(60.0 * peak, peak, conf)


def trace_hr(signal: RppgSignal, band=HR_BAND) -> tuple[HrEstimate, SpectralEstimate]:
    """Detrend and band-pass, then take the HR at the in-band spectral peak."""
    clean = bandpass(detrend(signal), *band)
    spec = power_spectrum(clean)
    return estimate_hr(spec, band), spec


def green_baseline(clip: VideoClip, band=HR_BAND) -> HrEstimate:
    _, green, _ = spatial_mean_rgb(clip)
    return trace_hr(green, band)[0]


def write_signal_csv(signal: RppgSignal, path) -> Path:
    path = Path(path)
    lines = ["t_s,value"]
    lines += [f"{t:.9g},{v:.9g}" for t, v in zip(signal.times, signal.samples)]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_signal_csv(path, fs: float | None = None) -> RppgSignal:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if fs is None:
        fs = 1.0 / float(np.median(np.diff(rows[:, 0])))
    return RppgSignal(rows[:, 1], fs)


def write_spectrum_csv(spectrum: SpectralEstimate, path) -> Path:
    path = Path(path)
    lines = ["freq_hz,power"]
    lines += [f"{f:.9g},{p:.9g}" for f, p in zip(spectrum.freqs, spectrum.power)]
    path.write_text("\n".join(lines) + "\n")
    return path
