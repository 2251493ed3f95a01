"""Training loop: Adam, stepped learning-rate decay, deep supervision.

The metrics log is newline-delimited JSON.  Step records carry
{step, epoch, lr, loss_total, loss_bce, loss_dice, per_round_losses};
epoch records carry {epoch, ar} from evaluating the current parameters.
No timestamps are written, so identically seeded runs produce
byte-identical logs and checkpoints.

If a forward pass or a gradient turns non-finite the run aborts, keeping
the parameters of the last completed step and writing them as the final
checkpoint; the optimizer never applies a non-finite update.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .losses import GroundTruth, LossConfig, total_loss
from .metrics import evaluate
from .model import ModelConfig, ModelParams, forward, save_checkpoint
from .tensor import Tensor

BEST_CHECKPOINT = "checkpoint_best"
FINAL_CHECKPOINT = "checkpoint_final"
METRICS_NAME = "metrics.ndjson"


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 14
    batch_size: int = 4
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    # halve the rate every `decay_every` epochs once `decay_start` is reached
    decay_start: int = 10
    decay_every: int = 2
    decay_factor: float = 0.5
    lr_table: list[float] | None = None   # explicit per-epoch rates, overrides decay
    lr_scale: dict[str, float] | None = None  # parameter-name-prefix multipliers
    grad_clip: float | None = None        # global gradient-norm ceiling
    max_steps: int | None = None
    eval_every: int = 1                   # epochs between evaluations
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.decay_every < 1 or self.decay_start < 1:
            raise ValueError("decay_start/decay_every must be >= 1")
        if isinstance(self.betas, list):
            self.betas = tuple(self.betas)
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for a 1-based epoch.

    An explicit table wins (clamped to its last entry); otherwise the base
    rate is halved at `decay_start` and again every `decay_every` epochs.
    """
    if epoch < 1:
        raise ValueError("epochs are 1-based")
    if cfg.lr_table:
        return float(cfg.lr_table[min(epoch, len(cfg.lr_table)) - 1])
    if epoch < cfg.decay_start:
        return cfg.lr
    halvings = (epoch - cfg.decay_start) // cfg.decay_every + 1
    return cfg.lr * cfg.decay_factor ** halvings


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """First/second moment buffers and the shared step counter."""

    def __init__(self, params: ModelParams):
        self.m = {name: np.zeros_like(t.data)
                  for name, t in params.named_parameters()}
        self.v = {name: np.zeros_like(t.data)
                  for name, t in params.named_parameters()}
        self.step = 0


def _scale_for(name: str, lr_scale: dict[str, float] | None) -> float:
    if not lr_scale:
        return 1.0
    best = 1.0
    best_len = -1
    for prefix, scale in lr_scale.items():
        if name.startswith(prefix) and len(prefix) > best_len:
            best, best_len = scale, len(prefix)
    return best


def adam_step(params: ModelParams, grads: dict[str, np.ndarray],
              state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8,
              lr_scale: dict[str, float] | None = None,
              grad_clip: float | None = None) -> None:
    """One bias-corrected Adam update, in place.

    Parameters without a gradient are treated as zero-gradient (moments
    decay, value drifts only through existing moments).  Any non-finite
    gradient aborts before touching the parameters.
    """
    b1, b2 = betas
    for name, _ in params.named_parameters():
        g = grads.get(name)
        if g is not None and not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter "
                                     f"{name!r}")
    if grad_clip is not None:
        sq = sum(float(np.sum(g * g)) for g in grads.values()
                 if g is not None)
        norm = float(np.sqrt(sq))
        if norm > grad_clip:
            factor = grad_clip / norm
            grads = {n: (g * factor if g is not None else None)
                     for n, g in grads.items()}
    state.step += 1
    t = state.step
    for name, p in params.named_parameters():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        step_lr = lr * _scale_for(name, lr_scale)
        p.data -= (step_lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# batching


def _batch_arrays(samples: list) -> tuple[np.ndarray, np.ndarray, GroundTruth]:
    visual = np.stack([s.visual for s in samples])
    phrases = np.stack([s.phrases for s in samples])
    masks = np.stack([s.truth.masks for s in samples])
    valid = np.stack([s.truth.valid for s in samples])
    return visual, phrases, GroundTruth(masks=masks, valid=valid)


@dataclass
class TrainResult:
    steps: int
    epochs_run: int
    final_loss: float
    best_ar: float | None
    diverged: bool
    log_path: str
    best_path: str | None
    final_path: str


class _StopTraining(Exception):
    """Internal signal: max_steps reached."""


def train(cfg: TrainConfig, dataset: list, out_dir,
          eval_dataset: list | None = None) -> TrainResult:
    """Optimize a freshly initialized model on `dataset`.

    Writes the metrics log, a best checkpoint whenever the evaluation AR
    improves, and a final checkpoint (also on divergence abort, holding
    the last finite parameters).
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / METRICS_NAME
    final_path = out / FINAL_CHECKPOINT
    best_path = out / BEST_CHECKPOINT

    params = ModelParams.initialize(cfg.model, seed=cfg.seed)
    state = AdamState(params)
    order_rng = np.random.Generator(np.random.Philox(
        key=[cfg.seed & (2**64 - 1), int.from_bytes(b"batchord", "little")]))
    eval_set = eval_dataset if eval_dataset is not None else dataset

    step = 0
    epoch = 0
    last_loss = float("nan")
    best_ar: float | None = None
    diverged = False
    with open(log_path, "w", encoding="utf-8") as log:
        def log_record(record: dict) -> None:
            log.write(json.dumps(record) + "\n")

        try:
            for epoch in range(1, cfg.epochs + 1):
                lr = lr_at(epoch, cfg)
                order = order_rng.permutation(len(dataset))
                for lo in range(0, len(dataset), cfg.batch_size):
                    batch = [dataset[i] for i in order[lo:lo + cfg.batch_size]]
                    visual, phrases, truth = _batch_arrays(batch)
                    params.zero_grad()
                    maps = forward(params, Tensor(visual), Tensor(phrases))
                    breakdown = total_loss(maps, truth, cfg.loss)
                    breakdown.total.backward()
                    grads = {name: p.grad for name, p in
                             params.named_parameters() if p.grad is not None}
                    adam_step(params, grads, state, lr, betas=cfg.betas,
                              eps=cfg.adam_eps, lr_scale=cfg.lr_scale,
                              grad_clip=cfg.grad_clip)
                    step += 1
                    last_loss = breakdown.total.item()
                    log_record({"step": step, "epoch": epoch, "lr": lr,
                                **breakdown.values()})
                    if cfg.max_steps is not None and step >= cfg.max_steps:
                        raise _StopTraining
                if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
                    report = evaluate(params, eval_set)
                    ar = report.overall.ar
                    log_record({"epoch": epoch, "ar": ar})
                    if ar is not None and (best_ar is None or ar > best_ar):
                        best_ar = ar
                        save_checkpoint(params, best_path,
                                        extra={"epoch": epoch, "step": step,
                                               "ar": ar})
        except _StopTraining:
            pass
        except FloatingPointError as e:
            diverged = True
            log_record({"step": step, "epoch": epoch, "diverged": True,
                        "error": str(e)})

    save_checkpoint(params, final_path,
                    extra={"epoch": epoch, "step": step,
                           "diverged": diverged})
    return TrainResult(steps=step, epochs_run=epoch, final_loss=last_loss,
                       best_ar=best_ar, diverged=diverged,
                       log_path=str(log_path),
                       best_path=str(best_path) if best_path.exists() else None,
                       final_path=str(final_path))
