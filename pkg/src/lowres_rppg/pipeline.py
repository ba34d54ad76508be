"""End-to-end inference: low-res clip -> enhanced clip -> rPPG trace -> HR."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .models import ModelParams, enhancer_forward, recovery_forward, temporal_radius
from .signal import (HR_BAND, HrEstimate, RppgSignal, SpectralEstimate, spatial_mean_rgb,
                     trace_hr)
from .video import VideoClip


@dataclass(frozen=True)
class Inference:
    enhanced: VideoClip
    signal: RppgSignal
    hr: HrEstimate
    spectrum: SpectralEstimate
    fallback: bool  # True when the recovery trace was flat and the green trace was used
    margin: int  # samples dropped at each end before spectral analysis


def split_models(models: Sequence[ModelParams]) -> tuple[ModelParams, ModelParams]:
    by_kind = {m.kind: m for m in models}
    return by_kind["enhancer"], by_kind["recovery"]


def infer(models: Sequence[ModelParams], clip: VideoClip, band=HR_BAND) -> Inference:
    enhancer, recovery = split_models(models)
    enhanced = enhancer_forward(enhancer, clip)
    trace = recovery_forward(recovery, enhanced)
    margin = edge_margin(models, len(trace))
    core = trace.samples[margin:len(trace) - margin]
    fallback = bool(np.ptp(core) <= 1e-12 * max(1.0, float(np.abs(core).max())))
    if fallback:
        core = spatial_mean_rgb(enhanced)[1].samples[margin:len(trace) - margin]
    hr, spec = trace_hr(RppgSignal(core, trace.fs), band)
    return Inference(enhanced, trace, hr, spec, fallback, margin)


def edge_margin(models: Sequence[ModelParams], n: int) -> int:
    """Temporal receptive radius of the chained networks, capped so that at
    least 16 samples remain."""
    radius = sum(temporal_radius(m.config) for m in models)
    return max(0, min(radius, (n - 16) // 2))
