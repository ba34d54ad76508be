"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/format/configuration error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import NumericError, RppgError
from .metrics import compute_metrics, format_table
from .models import load_checkpoint
from .pipeline import infer
from .signal import (HR_BAND, detrend, green_baseline, power_spectrum, spatial_mean_rgb,
                     write_signal_csv, write_spectrum_csv)
from .synth import SynthConfig, generate_dataset
from .training import TrainConfig, fit, load_clip, read_manifest
from .video import write_clip

log = logging.getLogger("lowres_rppg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def _band(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi' in Hz, got {text!r}")
    return lo, hi


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise RppgError(f"{path}: invalid JSON ({exc})") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--band", type=_band, default=HR_BAND, help="HR band 'lo,hi' in Hz")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="lowres-rppg", description="Heart rate from low-resolution face video.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--n", type=int, default=20)
    s.add_argument("--hr-range", type=_band, default=(50.0, 150.0))
    s.add_argument("--noise", type=float, default=0.01)
    s.add_argument("--factor", type=int, default=2)

    t = sub.add_parser("train", parents=[common], help="jointly train both networks")
    t.add_argument("--manifest", required=True)
    t.add_argument("--prune-ratio", type=float)
    t.add_argument("--steps", type=int)

    i = sub.add_parser("infer", parents=[common], help="clip -> enhanced clip, rPPG CSV, HR")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--clip", required=True)
    i.add_argument("--roi")

    b = sub.add_parser("baseline", parents=[common], help="green-channel HR without networks")
    b.add_argument("--clip", required=True)
    b.add_argument("--roi")

    e = sub.add_parser("eval", parents=[common], help="manifest -> metrics report")
    e.add_argument("--manifest", required=True)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--predictions", help="CSV with a pred_bpm column, one row per manifest line")
    src.add_argument("--baseline", action="store_true", help="green channel on the high-res clips")

    sp = sub.add_parser("spectra", parents=[common], help="per-channel power spectra of a clip")
    sp.add_argument("--clip", required=True)
    sp.add_argument("--roi")
    return p


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    cfg = _load_json(args.config).get("synth", {})
    template = SynthConfig(**{**cfg, "noise_sigma": cfg.get("noise_sigma", args.noise)})
    if args.seed is not None:
        template = replace(template, seed=args.seed)
    manifest = generate_dataset(args.n, args.hr_range, template, _out_dir(args), args.factor)
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    data = _load_json(args.config)
    config = TrainConfig.from_dict(data.get("train", data))
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.prune_ratio is not None:
        config = replace(config, prune_ratio=args.prune_ratio)
    if args.steps is not None:
        config = replace(config, steps=args.steps)
    config.validate()
    result = fit(config, args.manifest, out_dir=_out_dir(args))
    print(result.checkpoint)
    print(result.loss_curve)
    return EXIT_OK


def cmd_infer(args) -> int:
    models, _ = load_checkpoint(args.checkpoint)
    clip = load_clip(args.clip, args.roi)
    res = infer(models, clip, args.band)
    out = _out_dir(args)
    write_clip(res.enhanced, out / "enhanced.rpgc")
    write_signal_csv(res.signal, out / "rppg.csv")
    write_spectrum_csv(res.spectrum, out / "spectrum.csv")
    summary = {"bpm": res.hr.bpm, "peak_freq_hz": res.hr.peak_freq,
               "confidence": res.hr.confidence, "fallback": res.fallback}
    (out / "hr.json").write_text(json.dumps(summary, indent=2) + "\n")
    note = " (recovery trace flat; green-channel fallback)" if res.fallback else ""
    print(f"HR: {res.hr.bpm:.2f} bpm{note}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    hr = green_baseline(load_clip(args.clip, args.roi), args.band)
    print(f"HR: {hr.bpm:.2f} bpm (peak {hr.peak_freq:.4f} Hz, confidence {hr.confidence:.3f})")
    return EXIT_OK


def _read_predictions(path, n: int) -> list[float]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or lines[0].strip() != "pred_bpm":
        raise RppgError(f"{path}: expected header 'pred_bpm'")
    try:
        preds = [float(v) for v in lines[1:]]
    except ValueError as exc:
        raise RppgError(f"{path}: non-numeric prediction") from exc
    if len(preds) != n:
        raise RppgError(f"{path}: {len(preds)} predictions for {n} manifest entries")
    return preds


def cmd_eval(args) -> int:
    entries = read_manifest(args.manifest)
    if any(e.truth_bpm is None for e in entries):
        raise RppgError(f"{args.manifest}: every line needs a truth_bpm column")
    truth = [e.truth_bpm for e in entries]
    if args.predictions:
        preds, name = _read_predictions(args.predictions, len(entries)), "Predictions"
    elif args.baseline:
        preds = [green_baseline(load_clip(e.high, e.roi), args.band).bpm for e in entries]
        name = "Green"
    else:
        models, _ = load_checkpoint(args.checkpoint)
        preds = [infer(models, load_clip(e.low, e.roi), args.band).hr.bpm for e in entries]
        name = "Ours"
    report = compute_metrics(preds, truth)
    table = format_table([(name, report)])
    if args.out:
        out = _out_dir(args)
        (out / "report.json").write_text(report.to_json() + "\n")
        (out / "report.txt").write_text(table)
        rows = ["index,truth_bpm,pred_bpm"] + [f"{i},{t!r},{p!r}"
                                             for i, (t, p) in enumerate(zip(truth, preds))]
        (out / "predictions.csv").write_text("\n".join(rows) + "\n")
    print(report.to_json())
    print(table, end="")
    return EXIT_OK


def cmd_spectra(args) -> int:
    clip = load_clip(args.clip, args.roi)
    out = _out_dir(args)
    for label, trace in zip("RGB", spatial_mean_rgb(clip)):
        spec = power_spectrum(detrend(trace))
        write_spectrum_csv(spec, out / f"spectrum_{label}.csv")
        lo, hi = args.band
        sel = (spec.freqs >= lo) & (spec.freqs <= hi)
        k = int(np.argmax(np.where(sel, spec.power, -1.0)))
        print(f"{label}: in-band peak {spec.freqs[k]:.4f} Hz, power {spec.power[k]:.6g}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer,
            "baseline": cmd_baseline, "eval": cmd_eval, "spectra": cmd_spectra}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (RppgError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run_cli())
