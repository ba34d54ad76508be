"""HR benchmark metrics: mean absolute error, RMSE, % within 5 bpm, Pearson r."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ContractViolation

WITHIN_BPM = 5.0
TABLE_HEADERS = ("Framework", "μ_error", "RMSE (%)", "% Absolute Error<5bpm", "r")


@dataclass(frozen=True)
class MetricsReport:
    mean_abs_error_bpm: float
    rmse_bpm: float
    pct_within_5bpm: float
    pearson_r: Optional[float]  # None when either sequence is constant
    n: int

    def to_json(self) -> str:
        return json.dumps({
            "mu_error_bpm": self.mean_abs_error_bpm,
            "rmse_bpm": self.rmse_bpm,
            "pct_within_5bpm": self.pct_within_5bpm,
            "pearson_r": self.pearson_r,
            "n": self.n,
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        return cls(d["mu_error_bpm"], d["rmse_bpm"], d["pct_within_5bpm"], d["pearson_r"], d["n"])


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.size != y.size or x.size < 2:
        raise ContractViolation(f"need two equal-length sequences of >= 2 values, got {x.size}, {y.size}")
    return x, y


def pearson_r(x, y) -> Optional[float]:
    """Sample correlation, or None if either input has zero variance."""
    x, y = _pair(x, y)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(np.dot(dx, dx)), float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        return None
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def compute_metrics(pred_bpm: Sequence[float], truth_bpm: Sequence[float]) -> MetricsReport:
    pred, truth = _pair(pred_bpm, truth_bpm)
    err = pred - truth
    mae = float(np.mean(np.abs(err)))
    peak = float(np.max(np.abs(err)))
    # scale before squaring so tiny errors do not underflow to zero
    rmse = peak * float(np.sqrt(np.mean((err / peak) ** 2))) if peak > 0 else 0.0
    pct = 100.0 * float(np.count_nonzero(np.abs(err) < WITHIN_BPM)) / err.size
    return MetricsReport(mae, rmse, pct, pearson_r(pred, truth), int(err.size))


def format_table(rows: Sequence[tuple[str, MetricsReport]]) -> str:
    """Plain-text results table; one row per framework, columns in benchmark order."""
    body = []
    for name, rep in rows:
        r = "undefined" if rep.pearson_r is None else f"{rep.pearson_r:.2f}"
        body.append((name, f"{rep.mean_abs_error_bpm:.1f}", f"{rep.rmse_bpm:.1f}",
                     f"{rep.pct_within_5bpm:.1f}", r))
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(TABLE_HEADERS)]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w)
                       for i, (h, w) in enumerate(zip(TABLE_HEADERS, widths)))]
    lines.append("  ".join("-" * w for w in widths))
    for b in body:
        lines.append("  ".join(v.ljust(w) if i == 0 else v.rjust(w)
                               for i, (v, w) in enumerate(zip(b, widths))))
    return "\n".join(lines) + "\n"
