"""Command-line pipeline: generate data, train, evaluate, plot, check gradients.

Exit codes: 0 success, 1 validation error (bad flags, missing or malformed
files, invalid configs), 2 runtime failure (diverged training, failed
gradient checks, unexpected errors).  Setting PPG_DETERMINISTIC=1 forces
single-threaded, deterministically ordered work regardless of --threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import gradcheck as gradcheck_mod
from . import metrics, synth
from .bundle import BundleError
from .model import load_checkpoint
from .train import TrainConfig, train


class CliError(ValueError):
    """Input problem that should exit with code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); our contract says 1
        raise CliError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="pixelphrase",
                     description="pixel-phrase grounding on synthetic scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset")
    gen.add_argument("--out", required=True, help="output dataset directory")
    gen.add_argument("--samples", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--height", type=int, default=16)
    gen.add_argument("--width", type=int, default=16)
    gen.add_argument("--phrases", type=int, default=6)
    gen.add_argument("--classes", type=int, default=5)
    gen.add_argument("--noise", type=float, default=0.1)
    gen.add_argument("--visual-channels", type=int, default=64)
    gen.add_argument("--phrase-channels", type=int, default=64)
    gen.add_argument("--threads", type=int, default=1)

    tr = sub.add_parser("train", help="train a model on a dataset")
    tr.add_argument("--data", required=True, help="dataset directory")
    tr.add_argument("--out", required=True, help="run output directory")
    tr.add_argument("--config", help="JSON file mirroring TrainConfig fields")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--report", help="write the split report as JSON")
    ev.add_argument("--curve", help="write the overall recall curve as CSV")
    ev.add_argument("--threads", type=int, default=1)

    cv = sub.add_parser("curve", help="render recall curves from a report")
    cv.add_argument("--report", required=True, help="report JSON with curves")
    cv.add_argument("--svg", required=True, help="output SVG path")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--skip-model", action="store_true",
                    help="check individual ops only")
    return parser


def _threads(requested: int) -> int:
    if os.environ.get("PPG_DETERMINISTIC") == "1":
        return 1
    return max(1, requested)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen(args) -> int:
    if args.samples < 1:
        raise CliError("--samples must be >= 1")
    cfg = synth.SceneConfig(height=args.height, width=args.width,
                            num_phrases=args.phrases, num_classes=args.classes,
                            visual_channels=args.visual_channels,
                            phrase_channels=args.phrase_channels,
                            noise_sigma=args.noise, seed=args.seed)
    synth.generate_dataset(cfg, args.samples, args.out,
                           threads=_threads(args.threads))
    print(f"wrote {args.samples} samples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    data = synth.load_dataset(args.data)
    if args.config:
        cpath = Path(args.config)
        if not cpath.is_file():
            raise CliError(f"config file not found: {cpath}")
        try:
            cfg = TrainConfig.from_json(cpath)
        except (TypeError, ValueError, json.JSONDecodeError) as e:
            raise CliError(f"invalid config {cpath}: {e}") from e
    else:
        cfg = TrainConfig()
    sample = data[0]
    if cfg.model.visual_channels != sample.visual.shape[-1] or \
            cfg.model.phrase_channels != sample.phrases.shape[-1]:
        raise CliError(
            f"model expects visual/phrase channels "
            f"({cfg.model.visual_channels}, {cfg.model.phrase_channels}) but "
            f"dataset provides ({sample.visual.shape[-1]}, "
            f"{sample.phrases.shape[-1]})")
    result = train(cfg, data, args.out)
    print(f"trained {result.steps} steps over {result.epochs_run} epochs; "
          f"final loss {result.final_loss:.4f}")
    if result.best_ar is not None:
        print(f"best AR {result.best_ar:.4f} -> {result.best_path}")
    print(f"final checkpoint -> {result.final_path}")
    print(f"metrics log -> {result.log_path}")
    if result.diverged:
        print("training diverged; final checkpoint holds the last finite "
              "parameters", file=sys.stderr)
        return 2
    return 0


def _cmd_eval(args) -> int:
    params, _ = load_checkpoint(args.checkpoint)
    data = synth.load_dataset(args.data)
    threads = _threads(args.threads)
    if threads == 1:
        per_sample = [metrics.evaluate_sample(params, s.visual, s.phrases,
                                              s.truth) for s in data]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_sample = list(pool.map(
                lambda s: metrics.evaluate_sample(params, s.visual, s.phrases,
                                                  s.truth), data))
    results = [r for chunk in per_sample for r in chunk]
    if not results:
        raise CliError("dataset has no valid phrases to evaluate")
    report = metrics.split_report(results)
    for name in metrics.SPLIT_NAMES:
        stats = getattr(report, name)
        ar = "absent" if stats.ar is None else f"{stats.ar:.4f}"
        print(f"{name:>10s}: AR {ar:>7s}  ({stats.count} phrases)")
    if args.report:
        metrics.write_report_json(report, args.report)
        print(f"report -> {args.report}")
    if args.curve:
        metrics.write_curve_csv(report.overall.curve, args.curve)
        print(f"curve -> {args.curve}")
    return 0


_SPLIT_COLORS = {"overall": "#000000", "things": "#d62728",
                 "stuff": "#1f77b4", "singulars": "#2ca02c",
                 "plurals": "#9467bd"}


def render_curves_svg(report_dict: dict, width: int = 640,
                      height: int = 480) -> str:
    """Standalone SVG line chart of recall vs IoU threshold per split."""
    margin = 60
    plot_w, plot_h = width - 2 * margin, height - 2 * margin

    def x_of(t: float) -> float:
        return margin + t * plot_w

    def y_of(r: float) -> float:
        return margin + (1.0 - r) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    # axes and ticks
    parts.append(f'<line x1="{margin}" y1="{height - margin}" '
                 f'x2="{width - margin}" y2="{height - margin}" '
                 f'stroke="black"/>')
    parts.append(f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
                 f'y2="{height - margin}" stroke="black"/>')
    for i in range(5):
        frac = i / 4
        xt, yt = x_of(frac), y_of(frac)
        parts.append(f'<line x1="{xt:.1f}" y1="{height - margin}" '
                     f'x2="{xt:.1f}" y2="{height - margin + 5}" '
                     f'stroke="black"/>')
        parts.append(f'<text x="{xt:.1f}" y="{height - margin + 20}" '
                     f'font-size="12" text-anchor="middle">{frac:.2f}</text>')
        parts.append(f'<line x1="{margin - 5}" y1="{yt:.1f}" x2="{margin}" '
                     f'y2="{yt:.1f}" stroke="black"/>')
        parts.append(f'<text x="{margin - 10}" y="{yt + 4:.1f}" '
                     f'font-size="12" text-anchor="end">{frac:.2f}</text>')
    parts.append(f'<text x="{width / 2:.1f}" y="{height - 15}" '
                 f'font-size="14" text-anchor="middle">IoU threshold</text>')
    parts.append(f'<text x="18" y="{height / 2:.1f}" font-size="14" '
                 f'text-anchor="middle" transform="rotate(-90 18 '
                 f'{height / 2:.1f})">recall</text>')

    legend_y = margin
    drew_any = False
    for name in metrics.SPLIT_NAMES:
        entry = report_dict.get(name) or {}
        thresholds = entry.get("thresholds")
        recalls = entry.get("recalls")
        if not thresholds or not recalls or len(thresholds) != len(recalls):
            continue
        drew_any = True
        color = _SPLIT_COLORS.get(name, "#333333")
        pts = " ".join(f"{x_of(t):.2f},{y_of(r):.2f}"
                       for t, r in zip(thresholds, recalls))
        parts.append(f'<polyline points="{pts}" fill="none" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<line x1="{width - margin - 130}" y1="{legend_y}" '
                     f'x2="{width - margin - 105}" y2="{legend_y}" '
                     f'stroke="{color}" stroke-width="2"/>')
        ar = entry.get("ar")
        label = name if ar is None else f"{name} (AR {ar:.3f})"
        parts.append(f'<text x="{width - margin - 100}" y="{legend_y + 4}" '
                     f'font-size="12">{label}</text>')
        legend_y += 18
    if not drew_any:
        raise CliError("report contains no curve data; write it with "
                       "`eval --report` first")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _cmd_curve(args) -> int:
    rpath = Path(args.report)
    if not rpath.is_file():
        raise CliError(f"report file not found: {rpath}")
    try:
        report_dict = json.loads(rpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CliError(f"report {rpath} is not valid JSON: {e}") from e
    svg = render_curves_svg(report_dict)
    Path(args.svg).write_text(svg, encoding="utf-8")
    print(f"chart -> {args.svg}")
    return 0


def _cmd_gradcheck(args) -> int:
    reports = gradcheck_mod.run_all(seed=args.seed,
                                    include_model=not args.skip_model)
    for r in reports:
        print(r)
    failed = [r for r in reports if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(reports)} checks failed",
              file=sys.stderr)
        return 2
    print(f"all {len(reports)} checks passed")
    return 0


_COMMANDS = {"gen": _cmd_gen, "train": _cmd_train, "eval": _cmd_eval,
             "curve": _cmd_curve, "gradcheck": _cmd_gradcheck}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (BundleError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit:
        raise
    except Exception as e:  # divergence, placement failure, genuine bugs
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
