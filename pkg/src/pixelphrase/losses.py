"""Training objectives for the grounding model.

Binary cross-entropy treats every pixel of every phrase map as an
independent binary decision; Dice compares predicted and true mask areas
per phrase, which keeps small objects from drowning in the background.
The combined objective is a weighted sum of the two, and the deep
supervision total applies it to the response map of every refinement
round so early rounds receive a direct signal.

Phrases flagged invalid (padding, or narrative text with no mask) are
excluded from every mean, numerator and denominator alike.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import Tensor

SUPERVISION_MODES = ("all", "intermediate")


@dataclass
class GroundTruth:
    """Target masks (..., N, H, W) in {0,1} and a validity flag per phrase.

    `categories` / `pluralities` optionally tag each phrase for the
    evaluation splits; losses ignore them.
    """
    masks: np.ndarray
    valid: np.ndarray
    categories: list[str] | None = None
    pluralities: list[str] | None = None

    def __post_init__(self):
        self.masks = np.asarray(self.masks)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.masks.ndim < 3:
            raise ValueError("masks must be (..., N, H, W)")
        if self.valid.shape != self.masks.shape[:-2]:
            raise ValueError(
                f"valid flags {self.valid.shape} do not match masks "
                f"{self.masks.shape}")
        vals = np.unique(self.masks)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError("masks must be binary")
        if np.any(self.masks[~self.valid] != 0):
            raise ValueError("invalid phrases must have all-zero masks")


@dataclass
class LossConfig:
    bce_weight: float = 1.0
    dice_weight: float = 1.0
    dice_eps: float = 1e-6
    supervise: str = "all"  # "all": every round's map; "intermediate": all but last

    def __post_init__(self):
        if self.bce_weight < 0 or self.dice_weight < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.supervise not in SUPERVISION_MODES:
            raise ValueError(f"supervise must be one of {SUPERVISION_MODES}")


def _check_shapes(maps: Tensor, truth: GroundTruth) -> None:
    if maps.shape != truth.masks.shape:
        raise ValueError(f"response maps {maps.shape} do not match ground "
                         f"truth {truth.masks.shape}")


def _phrase_weights(truth: GroundTruth, dtype) -> np.ndarray:
    """Per-phrase weights (..., N) averaging valid phrases within each sample
    and samples across leading axes; all-invalid samples contribute zero."""
    valid = truth.valid.astype(dtype)
    counts = valid.sum(axis=-1, keepdims=True)
    batch = int(np.prod(valid.shape[:-1])) if valid.ndim > 1 else 1
    return valid / (np.maximum(counts, 1.0) * batch)


def _log_clamped(m: Tensor) -> tuple[Tensor, Tensor]:
    """log(m) and log(1-m) with arguments clamped away from 0.

    Response maps are already strictly inside (0,1); the clamp only caps
    the loss contribution of fully saturated wrong pixels so a single
    pixel cannot blow up the objective.
    """
    eps = float(np.finfo(m.dtype).eps)
    return ops.clip(m, eps, 1.0).log(), ops.clip(1.0 - m, eps, 1.0).log()


def bce_loss(maps: Tensor, truth: GroundTruth) -> Tensor:
    """Mean binary cross-entropy over valid phrases and all their pixels."""
    _check_shapes(maps, truth)
    y = Tensor(truth.masks.astype(maps.dtype))
    log_m, log_not_m = _log_clamped(maps)
    pixel = -(y * log_m + (1.0 - y) * log_not_m)          # (..., N, H, W)
    per_phrase = pixel.mean(axis=(-2, -1))                # (..., N)
    w = Tensor(_phrase_weights(truth, maps.dtype))
    return (per_phrase * w).sum()


def multilabel_view_loss(maps: Tensor, truth: GroundTruth) -> Tensor:
    """Same objective read per pixel: mean over pixels of the per-pixel
    multi-label BCE across valid phrases.  Algebraically identical to
    ``bce_loss``; kept as an independent computation route.
    """
    _check_shapes(maps, truth)
    y = Tensor(truth.masks.astype(maps.dtype))
    log_m, log_not_m = _log_clamped(maps)
    pixel = -(y * log_m + (1.0 - y) * log_not_m)
    valid = truth.valid.astype(maps.dtype)
    counts = np.maximum(valid.sum(axis=-1, keepdims=True), 1.0)
    share = (valid / counts)[..., None, None]             # (..., N, 1, 1)
    per_pixel = (pixel * Tensor(share)).sum(axis=-3)      # (..., H, W)
    return per_pixel.mean()


def dice_loss(maps: Tensor, truth: GroundTruth,
              eps: float = 1e-6) -> Tensor:
    """Mean over valid phrases of 1 - 2|m∩y|/(|m|+|y|), smoothed by eps."""
    _check_shapes(maps, truth)
    y = Tensor(truth.masks.astype(maps.dtype))
    inter = (maps * y).sum(axis=(-2, -1))
    denom = maps.sum(axis=(-2, -1)) + y.sum(axis=(-2, -1))
    per_phrase = 1.0 - (inter * 2.0 + eps) / (denom + eps)
    w = Tensor(_phrase_weights(truth, maps.dtype))
    return (per_phrase * w).sum()


def matching_loss(maps: Tensor, truth: GroundTruth,
                  cfg: LossConfig | None = None) -> Tensor:
    """Weighted sum of cross-entropy and Dice for one set of response maps."""
    cfg = cfg or LossConfig()
    return bce_loss(maps, truth) * cfg.bce_weight + \
        dice_loss(maps, truth, eps=cfg.dice_eps) * cfg.dice_weight


@dataclass
class LossBreakdown:
    """Scalar tensors: the optimized total plus logging components."""
    total: Tensor
    bce: Tensor
    dice: Tensor
    per_round: list = field(default_factory=list)  # combined loss per map

    def values(self) -> dict:
        return {"loss_total": self.total.item(),
                "loss_bce": self.bce.item(),
                "loss_dice": self.dice.item(),
                "per_round_losses": [t.item() for t in self.per_round]}


def total_loss(maps: list[Tensor], truth: GroundTruth,
               cfg: LossConfig | None = None) -> LossBreakdown:
    """Deep-supervised objective over a list of per-round response maps.

    Policy "all" sums the combined loss over every map; "intermediate"
    leaves the final map unsupervised (with a single map it supervises
    nothing).  `per_round` always reports every map for logging.
    """
    if not maps:
        raise ValueError("total_loss requires at least one response map")
    cfg = cfg or LossConfig()
    supervised = maps if cfg.supervise == "all" else maps[:-1]
    per_round = []
    bce_parts = []
    dice_parts = []
    for m in maps:
        b = bce_loss(m, truth)
        d = dice_loss(m, truth, eps=cfg.dice_eps)
        per_round.append(b * cfg.bce_weight + d * cfg.dice_weight)
        bce_parts.append(b)
        dice_parts.append(d)
    n_sup = len(supervised)
    zero = Tensor(np.zeros((), dtype=maps[0].dtype))
    bce_sum = sum(bce_parts[:n_sup], zero)
    dice_sum = sum(dice_parts[:n_sup], zero)
    total = bce_sum * cfg.bce_weight + dice_sum * cfg.dice_weight
    return LossBreakdown(total=total, bce=bce_sum, dice=dice_sum,
                         per_round=per_round)
