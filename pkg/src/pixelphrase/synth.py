"""Deterministic synthetic panoptic scenes with narrative-style phrases.

A scene is a small feature grid partitioned into class-labeled segments:
stuff classes cover horizontal background bands, thing classes are
rectangles or ellipses stamped on top (later stamps overwrite earlier
ones, so every pixel belongs to exactly one segment).  Each phrase picks
a class: plural phrases take the union of two instances of a thing class,
singular phrases a single-instance class, and a configurable fraction is
ungrounded with an all-zero mask.  Pixel features are the class codebook
vector plus Gaussian noise; phrase embeddings likewise from a phrase
codebook with a dedicated null row for ungrounded phrases.  Codebook rows
are orthonormal, so classes stay linearly separable at zero noise.

Randomness comes exclusively from Philox counter-based streams keyed by
(seed, purpose-tag), with per-sample keys derived as seed XOR sample
index, so any sample can be regenerated independently and bit-identically.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from .bundle import BundleError, read_tensors, write_tensors
from .losses import GroundTruth
from .model import ModelParams, load_checkpoint, save_checkpoint

INDEX_NAME = "index.json"
DATASET_VERSION = 1
PLACEMENT_ATTEMPTS = 20


class GenerationError(RuntimeError):
    """Scene could not be realized at the configured extents."""


@dataclass
class SceneConfig:
    height: int = 16
    width: int = 16
    num_phrases: int = 6
    num_classes: int = 5
    visual_channels: int = 64
    phrase_channels: int = 64
    things_fraction: float = 0.6
    plural_fraction: float = 0.25
    ungrounded_fraction: float = 0.15
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.height, self.width, self.visual_channels,
               self.phrase_channels) < 1:
            raise ValueError("extents and channel counts must be >= 1")
        if self.num_phrases < 1 or self.num_classes < 1:
            raise ValueError("need at least one phrase and one class")
        for name in ("things_fraction", "plural_fraction",
                     "ungrounded_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.visual_channels < self.num_classes:
            raise ValueError("visual_channels must be >= num_classes for an "
                             "orthonormal class codebook")
        if self.phrase_channels < self.num_classes + 1:
            raise ValueError("phrase_channels must be >= num_classes + 1 "
                             "(one codebook row per class plus the null row)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**d)


@dataclass
class Sample:
    """One scene: features, phrase embeddings, targets, and phrase metadata.

    `segments` is the panoptic instance grid (pixel -> instance id) and
    `instance_classes` maps instance id -> class.  Both are populated by
    the generator but not persisted in bundles, which store only what the
    model consumes.
    """
    visual: np.ndarray              # (H, W, C_v) float32
    phrases: np.ndarray             # (N, C_r) float32
    truth: GroundTruth
    annotations: list[dict] = field(default_factory=list)
    segments: np.ndarray | None = None
    instance_classes: list[int] | None = None


# ---------------------------------------------------------------------------
# random streams


def _stream(seed: int, purpose: str) -> np.random.Generator:
    """Philox generator keyed by (seed, hash of purpose string)."""
    tag = int.from_bytes(hashlib.sha256(purpose.encode()).digest()[:8],
                         "little")
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), tag]))


def _orthonormal_rows(rng: np.random.Generator, rows: int,
                      dim: int) -> np.ndarray:
    """First `rows` rows of a seeded random rotation of R^dim."""
    gauss = rng.normal(size=(dim, dim))
    q, r = np.linalg.qr(gauss)
    q = q * np.sign(np.diag(r))  # fix the QR sign ambiguity deterministically
    return q[:rows].astype(np.float32)


def codebooks(cfg: SceneConfig) -> tuple[np.ndarray, np.ndarray]:
    """(class codebook (K, C_v), phrase codebook (K+1, C_r)).

    Drawn from the base seed only, never the per-sample seed, so every
    sample of a dataset shares one vocabulary.  The extra phrase row is
    the null code carried by ungrounded phrases.
    """
    k = cfg.num_classes
    visual = _orthonormal_rows(_stream(cfg.seed, "class-codebook"), k,
                               cfg.visual_channels)
    phrase = _orthonormal_rows(_stream(cfg.seed, "phrase-codebook"), k + 1,
                               cfg.phrase_channels)
    return visual, phrase


# ---------------------------------------------------------------------------
# segment placement


def _stamp_rect(rng, grid, inst_id):
    h, w = grid.shape
    sh = min(int(rng.integers(max(1, h // 5), max(2, h // 2) + 1)), h)
    sw = min(int(rng.integers(max(1, w // 5), max(2, w // 2) + 1)), w)
    top = int(rng.integers(0, h - sh + 1))
    left = int(rng.integers(0, w - sw + 1))
    grid[top:top + sh, left:left + sw] = inst_id


def _stamp_ellipse(rng, grid, inst_id):
    h, w = grid.shape
    ry = int(rng.integers(1, max(2, h // 4) + 1))
    rx = int(rng.integers(1, max(2, w // 4) + 1))
    cy = int(rng.integers(0, h))
    cx = int(rng.integers(0, w))
    yy, xx = np.ogrid[:h, :w]
    inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    grid[inside] = inst_id


def _place_segments(cfg: SceneConfig, rng: np.random.Generator,
                    instance_class: list[int], n_stuff: int) -> np.ndarray:
    """Panoptic instance grid; instance i covers grid == i.

    Instances 0..n_stuff-1 are stuff bands, the rest things stamped in
    order.  Retries fresh thing placements until every instance keeps at
    least one pixel, since later stamps may bury earlier ones.
    """
    h, w = cfg.height, cfg.width
    if n_stuff > h:
        raise GenerationError(f"{n_stuff} stuff bands cannot tile "
                              f"{h} rows")
    n_inst = len(instance_class)
    for _ in range(PLACEMENT_ATTEMPTS):
        grid = np.zeros((h, w), dtype=np.int64)
        for b in range(n_stuff):
            lo, hi = (b * h) // n_stuff, ((b + 1) * h) // n_stuff
            grid[lo:hi] = b
        for inst in range(n_stuff, n_inst):
            if rng.uniform() < 0.5:
                _stamp_rect(rng, grid, inst)
            else:
                _stamp_ellipse(rng, grid, inst)
        if len(np.unique(grid)) == n_inst:
            return grid
    raise GenerationError(
        f"could not place {n_inst} segments on a {h}x{w} grid with every "
        f"segment visible after {PLACEMENT_ATTEMPTS} attempts")


# ---------------------------------------------------------------------------
# scene generation


def _phrase_counts(cfg: SceneConfig, n_things: int) -> tuple[int, int]:
    n = cfg.num_phrases
    n_plural = int(round(n * cfg.plural_fraction)) if n_things > 0 else 0
    n_plural = min(n_plural, n)
    n_ungrounded = min(int(round(n * cfg.ungrounded_fraction)), n - n_plural)
    return n_plural, n_ungrounded


def generate_scene(cfg: SceneConfig, index: int = 0) -> Sample:
    """Build one deterministic scene; `index` selects the per-sample streams.

    Codebooks depend only on cfg.seed, everything else on seed XOR index.
    """
    class_code, phrase_code = codebooks(cfg)
    sample_seed = cfg.seed ^ index
    assign = _stream(sample_seed, "assignment")
    place = _stream(sample_seed, "placement")
    vnoise = _stream(sample_seed, "visual-noise")
    pnoise = _stream(sample_seed, "phrase-noise")

    k = cfg.num_classes
    n_things = int(np.clip(round(k * cfg.things_fraction), 0, k - 1))
    n_stuff = k - n_things
    stuff_classes = list(range(n_stuff))
    thing_classes = list(range(n_stuff, k))

    n_plural, n_ungrounded = _phrase_counts(cfg, n_things)
    n = cfg.num_phrases
    kinds = (["plural"] * n_plural + ["ungrounded"] * n_ungrounded +
             ["singular"] * (n - n_plural - n_ungrounded))
    kinds = [kinds[i] for i in assign.permutation(n)]

    plural_class_of = {i: int(assign.choice(thing_classes))
                       for i, kind in enumerate(kinds) if kind == "plural"}
    promoted = set(plural_class_of.values())
    singular_pool = stuff_classes + [c for c in thing_classes
                                     if c not in promoted]
    singular_class_of = {i: int(assign.choice(singular_pool))
                         for i, kind in enumerate(kinds) if kind == "singular"}

    # two instances for promoted classes, one for every other class
    instance_class: list[int] = list(range(k))
    for c in sorted(promoted):
        instance_class.append(c)
    grid = _place_segments(cfg, place, instance_class, n_stuff)
    inst_class = np.asarray(instance_class)
    class_grid = inst_class[grid]

    h, w = cfg.height, cfg.width
    visual = class_code[class_grid].astype(np.float32)
    visual += (cfg.noise_sigma *
               vnoise.normal(size=(h, w, cfg.visual_channels))).astype(np.float32)

    masks = np.zeros((n, h, w), dtype=np.uint8)
    phrases = np.zeros((n, cfg.phrase_channels), dtype=np.float32)
    valid = np.zeros(n, dtype=bool)
    categories: list[str | None] = []
    pluralities: list[str | None] = []
    annotations: list[dict] = []
    word_cursor = 0
    for i, kind in enumerate(kinds):
        if kind == "ungrounded":
            cls: int | None = None
            code = phrase_code[k]
            category = None
            plurality = None
        else:
            cls = plural_class_of[i] if kind == "plural" else \
                singular_class_of[i]
            code = phrase_code[cls]
            masks[i] = (class_grid == cls).astype(np.uint8)
            valid[i] = True
            category = "thing" if cls in thing_classes else "stuff"
            plurality = "plural" if kind == "plural" else "singular"
        noise = pnoise.normal(size=cfg.phrase_channels)
        phrases[i] = code + (cfg.noise_sigma * noise).astype(np.float32)
        span_len = 1 + (i % 2)
        span = list(range(word_cursor, word_cursor + span_len))
        word_cursor += span_len
        categories.append(category)
        pluralities.append(plurality)
        annotations.append({"id": i, "class": cls, "grounded": kind != "ungrounded",
                            "plurality": plurality, "category": category,
                            "word_span": span})

    truth = GroundTruth(masks=masks.astype(np.float32), valid=valid,
                        categories=categories, pluralities=pluralities)
    return Sample(visual=visual, phrases=phrases, truth=truth,
                  annotations=annotations, segments=grid,
                  instance_classes=instance_class)


# ---------------------------------------------------------------------------
# bundle IO for samples, checkpoints, datasets


def write_bundle(obj, path) -> None:
    """Persist a Sample or ModelParams as a bundle directory."""
    if isinstance(obj, ModelParams):
        save_checkpoint(obj, path)
        return
    if isinstance(obj, Sample):
        tensors = {
            "visual": obj.visual.astype(np.float32),
            "phrases": obj.phrases.astype(np.float32),
            "masks": obj.truth.masks.astype(np.uint8),
        }
        write_tensors(path, tensors, annotations=obj.annotations)
        return
    raise TypeError(f"cannot bundle object of type {type(obj).__name__}")


def read_bundle(path):
    """Load a bundle directory back as a Sample or ModelParams."""
    tensors, manifest = read_tensors(path)
    if "config" in manifest:
        params, _ = load_checkpoint(path)
        return params
    for name in ("visual", "phrases", "masks"):
        if name not in tensors:
            raise BundleError(f"sample bundle is missing tensor {name!r}")
    annotations = manifest.get("annotations") or []
    masks = tensors["masks"]
    valid = masks.reshape(masks.shape[0], -1).any(axis=1)
    categories = [a.get("category") for a in annotations] or None
    pluralities = [a.get("plurality") for a in annotations] or None
    truth = GroundTruth(masks=masks.astype(np.float32), valid=valid,
                        categories=categories, pluralities=pluralities)
    return Sample(visual=tensors["visual"], phrases=tensors["phrases"],
                  truth=truth, annotations=annotations)


def generate_dataset(cfg: SceneConfig, count: int, out_dir,
                     threads: int = 1) -> list[str]:
    """Write `count` scenes as bundles plus an index; returns relative paths.

    Samples are independent (per-sample seed = seed XOR index), so the
    optional thread pool changes only wall time, never content.
    """
    if count < 1:
        raise ValueError("dataset needs at least one sample")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    names = [f"sample_{i:05d}" for i in range(count)]

    def write_one(i: int) -> None:
        write_bundle(generate_scene(cfg, index=i), root / names[i])

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(write_one, range(count)))
    else:
        for i in range(count):
            write_one(i)
    index = {"version": DATASET_VERSION, "samples": names,
             "scene_config": cfg.to_dict(), "count": count}
    (root / INDEX_NAME).write_text(json.dumps(index, indent=2) + "\n",
                                   encoding="utf-8")
    return names


def load_dataset(path) -> list[Sample]:
    """Read every sample listed by a dataset index."""
    root = Path(path)
    ipath = root / INDEX_NAME
    if not ipath.is_file():
        raise BundleError(f"no {INDEX_NAME} under {root}")
    index = json.loads(ipath.read_text(encoding="utf-8"))
    if index.get("version") != DATASET_VERSION:
        raise BundleError(f"unsupported dataset version "
                          f"{index.get('version')!r}")
    names = index.get("samples")
    if not isinstance(names, list) or not names:
        raise BundleError("dataset index lists no samples")
    return [read_bundle(root / name) for name in names]
