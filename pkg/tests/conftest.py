import json
import time
from pathlib import Path

import numpy as np
import pytest

from lowres_rppg.cli import run_cli


def direct_dft(x):
    """O(n^2) DFT straight from the definition (no FFT)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) @ x


def tone(freq_hz, fs=30.0, seconds=20.0, amp=1.0):
    t = np.arange(int(round(fs * seconds))) / fs
    return amp * np.sin(2 * np.pi * freq_hz * t)


class E2ERun:
    """One synth -> train (10x pruning) -> eval pass driven through the CLI."""

    def __init__(self, root: Path, seed: int = 0):
        self.root = root
        t0 = time.perf_counter()
        assert run_cli(["synth", "--n", "20", "--hr-range", "50,150", "--noise", "0.01",
                        "--factor", "2", "--seed", str(seed), "--out", str(root / "data")]) == 0
        self.manifest = root / "data" / "manifest.tsv"
        assert run_cli(["train", "--manifest", str(self.manifest), "--prune-ratio", "10",
                        "--seed", str(seed), "--out", str(root / "run")]) == 0
        self.checkpoint = root / "run" / "checkpoint.rpck"
        self.loss_curve = root / "run" / "loss_curve.csv"
        assert run_cli(["eval", "--manifest", str(self.manifest), "--checkpoint",
                        str(self.checkpoint), "--out", str(root / "eval")]) == 0
        self.elapsed = time.perf_counter() - t0
        self.report_path = root / "eval" / "report.json"
        self.report = json.loads(self.report_path.read_text())
        self.predictions = root / "eval" / "predictions.csv"


@pytest.fixture(scope="session")
def e2e_run(tmp_path_factory):
    return E2ERun(tmp_path_factory.mktemp("e2e_a"))


@pytest.fixture(scope="session")
def e2e_run_repeat(tmp_path_factory):
    return E2ERun(tmp_path_factory.mktemp("e2e_b"))


def joint_loss_fd_error(models, batch, config, n_coords, eps=1e-6, seed=0):
    """Max relative error |a - n| / max(1, |a|) between backprop gradients of
    the joint loss and central differences, over random parameter coordinates."""
    from lowres_rppg import numerics as nx
    from lowres_rppg.models import bind
    from lowres_rppg.training import joint_objective

    def loss_at(entries):
        ms = [m.with_entries({k: entries[k] for k in m.entries}) for m in models]
        tensors = {}
        for m in ms:
            tensors.update(bind(m))
        return float(joint_objective(None, tensors, batch, config, ms)[0].data)

    g = nx.Graph()
    tensors = {}
    for m in models:
        tensors.update(bind(m, g))
    grads = nx.backward(g, joint_objective(g, tensors, batch, config, models)[0])
    base = {n: a for m in models for n, a in m.entries.items()}
    names = sorted(base)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_coords):
        name = names[rng.integers(len(names))]
        idx = np.unravel_index(rng.integers(base[name].size), base[name].shape)
        plus, minus = base[name].copy(), base[name].copy()
        plus[idx] += eps
        minus[idx] -= eps
        num = (loss_at({**base, name: plus}) - loss_at({**base, name: minus})) / (2 * eps)
        ana = grads[name][idx]
        worst = max(worst, abs(ana - num) / max(1.0, abs(ana)))
    return worst


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
