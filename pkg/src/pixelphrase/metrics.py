"""Evaluation protocol: IoU, the recall-vs-threshold curve, and Average Recall.

A prediction counts as recalled at threshold t when its IoU strictly
exceeds t, so any positive overlap is recalled at t=0 and the curve is
nonincreasing.  Average Recall is the trapezoidal area under the curve
sampled at 101 evenly spaced thresholds (0.00 to 1.00, step 0.01); both
the grid and the strictness of the comparison are arguments so other
conventions can be compared.

Reports disaggregate by phrase category (thing vs stuff) and plurality
(singular vs plural); a split with no members reports its area as absent
rather than zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .losses import GroundTruth
from .model import ModelParams, forward
from .tensor import Tensor

CATEGORIES = ("thing", "stuff")
PLURALITIES = ("singular", "plural")
SPLIT_NAMES = ("overall", "things", "stuff", "singulars", "plurals")


def default_grid(points: int = 101) -> np.ndarray:
    """Evenly spaced IoU thresholds covering [0, 1]."""
    if points < 2:
        raise ValueError("threshold grid needs at least 2 points")
    return np.arange(points, dtype=np.float64) / (points - 1)


@dataclass
class PhraseResult:
    iou: float
    category: str
    plurality: str

    def __post_init__(self):
        if not 0.0 <= self.iou <= 1.0:
            raise ValueError(f"iou {self.iou} outside [0, 1]")
        if self.category not in CATEGORIES:
            raise ValueError(f"category must be one of {CATEGORIES}")
        if self.plurality not in PLURALITIES:
            raise ValueError(f"plurality must be one of {PLURALITIES}")


@dataclass
class RecallCurve:
    thresholds: np.ndarray
    recalls: np.ndarray


@dataclass
class SplitStats:
    """Average recall and phrase count for one slice of the results."""
    ar: float | None
    count: int
    curve: RecallCurve | None


@dataclass
class EvalReport:
    overall: SplitStats
    things: SplitStats
    stuff: SplitStats
    singulars: SplitStats
    plurals: SplitStats

    def to_dict(self, include_curves: bool = False) -> dict:
        out = {}
        for name in SPLIT_NAMES:
            stats = getattr(self, name)
            entry = {"ar": stats.ar, "count": stats.count}
            if include_curves and stats.curve is not None:
                entry["thresholds"] = [float(t) for t in stats.curve.thresholds]
                entry["recalls"] = [float(r) for r in stats.curve.recalls]
            out[name] = entry
        return out


# ---------------------------------------------------------------------------
# mask-level operations


def binarize(maps, threshold: float = 0.5) -> np.ndarray:
    """Boolean masks: a pixel is on iff its response strictly exceeds the
    threshold, so a response of exactly 0.5 stays off at the default."""
    data = maps.data if isinstance(maps, Tensor) else np.asarray(maps)
    return data > threshold


def average_word_maps(word_maps, span: Sequence[int]) -> np.ndarray:
    """Mean of the maps of the words making up one phrase (pre-binarization)."""
    stack = np.asarray([m.data if isinstance(m, Tensor) else m
                        for m in word_maps])
    span = list(span)
    if not span:
        raise ValueError("phrase word span is empty")
    return stack[span].mean(axis=0)


def aggregate_plural(instance_masks: Sequence[np.ndarray]) -> np.ndarray:
    """Pixelwise union of the instance masks behind one plural phrase."""
    masks = [np.asarray(m, dtype=bool) for m in instance_masks]
    if not masks:
        raise ValueError("aggregate_plural requires at least one mask")
    shape = masks[0].shape
    for m in masks[1:]:
        if m.shape != shape:
            raise ValueError(f"mask shapes differ: {shape} vs {m.shape}")
    out = masks[0].copy()
    for m in masks[1:]:
        out |= m
    return out


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks.

    Both-empty returns 1.0 by convention; the evaluated set never hits
    that case because every evaluated phrase has a nonempty target mask.
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


# ---------------------------------------------------------------------------
# curves and reports


def recall_curve(results: Sequence[PhraseResult],
                 thresholds: np.ndarray | None = None,
                 strict: bool = True) -> RecallCurve:
    """Fraction of results whose IoU beats each threshold."""
    if not results:
        raise ValueError("recall_curve requires at least one result")
    grid = default_grid() if thresholds is None else np.asarray(thresholds,
                                                                dtype=np.float64)
    ious = np.array([r.iou for r in results], dtype=np.float64)
    compare = np.greater if strict else np.greater_equal
    recalls = compare(ious[None, :], grid[:, None]).mean(axis=1)
    return RecallCurve(thresholds=grid, recalls=recalls)


def average_recall(curve: RecallCurve) -> float:
    """Trapezoidal area under the recall curve over the threshold range."""
    t, r = curve.thresholds, curve.recalls
    return float(np.sum((r[:-1] + r[1:]) * np.diff(t)) / 2.0)


def _split_stats(results: list[PhraseResult],
                 thresholds: np.ndarray | None,
                 strict: bool) -> SplitStats:
    if not results:
        return SplitStats(ar=None, count=0, curve=None)
    curve = recall_curve(results, thresholds=thresholds, strict=strict)
    return SplitStats(ar=average_recall(curve), count=len(results), curve=curve)


def split_report(results: Sequence[PhraseResult],
                 thresholds: np.ndarray | None = None,
                 strict: bool = True) -> EvalReport:
    """Average recall overall and per category/plurality split."""
    results = list(results)
    splits = {
        "overall": results,
        "things": [r for r in results if r.category == "thing"],
        "stuff": [r for r in results if r.category == "stuff"],
        "singulars": [r for r in results if r.plurality == "singular"],
        "plurals": [r for r in results if r.plurality == "plural"],
    }
    stats = {name: _split_stats(rs, thresholds, strict)
             for name, rs in splits.items()}
    return EvalReport(**stats)


# ---------------------------------------------------------------------------
# model evaluation pipeline


def evaluate_sample(params: ModelParams, visual: np.ndarray,
                    phrases: np.ndarray, truth: GroundTruth,
                    threshold: float = 0.5) -> list[PhraseResult]:
    """Run the model on one scene and score every valid phrase.

    Predictions come from the final round's response map binarized at
    `threshold`; phrases flagged invalid are skipped.
    """
    dtype = params["visual_proj.weight"].dtype
    maps = forward(params, Tensor(visual.astype(dtype)),
                   Tensor(phrases.astype(dtype)))
    final = binarize(maps[-1], threshold=threshold)
    if truth.categories is None or truth.pluralities is None:
        raise ValueError("evaluation needs category and plurality tags")
    results = []
    for n in range(final.shape[0]):
        if not truth.valid[n]:
            continue
        score = iou(final[n], truth.masks[n] > 0.5)
        results.append(PhraseResult(iou=score, category=truth.categories[n],
                                    plurality=truth.pluralities[n]))
    return results


def evaluate(params: ModelParams, samples: Iterable,
             threshold: float = 0.5,
             thresholds: np.ndarray | None = None,
             strict: bool = True) -> EvalReport:
    """Score an iterable of scenes (objects with visual/phrases/truth) and
    aggregate into a split report."""
    results: list[PhraseResult] = []
    for s in samples:
        results.extend(evaluate_sample(params, s.visual, s.phrases, s.truth,
                                       threshold=threshold))
    if not results:
        raise ValueError("no valid phrases to evaluate")
    return split_report(results, thresholds=thresholds, strict=strict)


# ---------------------------------------------------------------------------
# exports


def write_curve_csv(curve: RecallCurve, path) -> None:
    """CSV with header `iou,recall` and one 6-decimal row per threshold."""
    lines = ["iou,recall"]
    lines += [f"{t:.6f},{r:.6f}" for t, r in zip(curve.thresholds,
                                                 curve.recalls)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_report_json(report: EvalReport, path,
                      include_curves: bool = True) -> None:
    """JSON report: one {ar, count} object per split; absent ARs are null.

    With `include_curves` each split also embeds its thresholds/recalls
    arrays so the curve chart can be rendered from the report alone.
    """
    Path(path).write_text(
        json.dumps(report.to_dict(include_curves=include_curves), indent=2)
        + "\n", encoding="utf-8")
