"""Pixel-phrase grounding model.

The forward pass projects a visual feature grid and a set of phrase
embeddings into one joint space, scores every pixel against every phrase
by inner product, and squashes the scores into per-phrase response maps.
A configurable number of refinement rounds then follows: each round picks
the most compatible pixels for every phrase from the current map, lets the
phrase attend to them with multi-head cross-attention, pushes the result
through a small transformer-style block, re-projects both modalities, and
recomputes the matching map.  All rounds' maps are returned so the loss
can supervise each stage.

Every operation accepts optional leading batch axes, so a single sample
(H, W, C_v) and a batch (B, H, W, C_v) share one code path.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, asdict

import numpy as np

from . import ops
from .bundle import BundleError, read_tensors, write_tensors
from .tensor import DEFAULT_DTYPE, Tensor

POOL_MODES = ("binned", "topk")
GATHER_MODES = ("projected", "raw")
ATTN_SCALES = ("joint", "per_head")


@dataclass
class ModelConfig:
    """Hyperparameters; `channels` is the joint embedding width."""
    channels: int = 64           # joint space width, must be divisible by heads
    heads: int = 4
    compatible_pixels: int = 200  # pixels sampled per phrase per round
    rounds: int = 3
    visual_channels: int = 64
    phrase_channels: int = 64
    norm_groups: int = 8
    ffn_factor: int = 4
    pool: str = "binned"         # "binned": per-bin argmax; "topk": global top-S
    gather: str = "projected"    # which features the sampled pixels come from
    attn_scale: str = "joint"    # score divisor: sqrt(channels) or sqrt(head width)
    positional: bool = True      # add 2-D sinusoidal code to the visual grid

    def __post_init__(self):
        if self.channels < 1 or self.heads < 1 or self.rounds < 0:
            raise ValueError("channels/heads must be >= 1 and rounds >= 0")
        if self.channels % self.heads != 0:
            raise ValueError(
                f"heads={self.heads} must divide channels={self.channels}")
        if self.norm_groups < 1 or self.channels % self.norm_groups != 0:
            raise ValueError(
                f"norm_groups={self.norm_groups} must divide channels="
                f"{self.channels}")
        if self.pool not in POOL_MODES:
            raise ValueError(f"pool must be one of {POOL_MODES}")
        if self.gather not in GATHER_MODES:
            raise ValueError(f"gather must be one of {GATHER_MODES}")
        if self.attn_scale not in ATTN_SCALES:
            raise ValueError(f"attn_scale must be one of {ATTN_SCALES}")
        if self.gather == "raw" and self.visual_channels != self.channels:
            raise ValueError(
                "gather='raw' feeds unprojected pixel features to attention, "
                "which requires visual_channels == channels")
        if self.positional and self.visual_channels % 2 != 0:
            raise ValueError("positional encoding requires an even number of "
                             "visual channels")

    @property
    def head_width(self) -> int:
        return self.channels // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# parameters


def _param_stream(seed: int, name: str) -> np.random.Generator:
    """Independent counter-based stream per parameter, keyed by name hash.

    Adding or reordering parameters therefore never shifts the draws of
    the others.
    """
    tag = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), tag]))


def _xavier(rng: np.random.Generator, shape: tuple[int, ...],
            dtype) -> np.ndarray:
    # fan counts use the trailing two axes; leading axes stack independent maps
    fan_in, fan_out = shape[-2], shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ModelParams:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self._tensors = dict(tensors)

    @staticmethod
    def _spec(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
        """(name, shape, init kind) for every parameter, in canonical order."""
        c, hw = config.channels, config.head_width
        ffn = config.ffn_factor * c
        spec: list[tuple[str, tuple[int, ...], str]] = [
            ("visual_proj.weight", (config.visual_channels, c), "xavier"),
            ("phrase_proj.weight", (config.phrase_channels, c), "xavier"),
        ]
        for l in range(config.rounds):
            p = f"round{l}."
            spec += [
                (p + "attn.query.weight", (config.heads, hw, hw), "xavier"),
                (p + "attn.key.weight", (config.heads, hw, hw), "xavier"),
                (p + "attn.value.weight", (config.heads, hw, hw), "xavier"),
                (p + "norm1.gamma", (c,), "ones"),
                (p + "norm1.beta", (c,), "zeros"),
                (p + "ffn.w1", (c, ffn), "xavier"),
                (p + "ffn.b1", (ffn,), "zeros"),
                (p + "ffn.w2", (ffn, c), "xavier"),
                (p + "ffn.b2", (c,), "zeros"),
                (p + "norm2.gamma", (c,), "ones"),
                (p + "norm2.beta", (c,), "zeros"),
                (p + "visual.weight", (config.visual_channels, c), "xavier"),
                (p + "visual_norm.gamma", (c,), "ones"),
                (p + "visual_norm.beta", (c,), "zeros"),
            ]
            for i in range(4):  # 3 relu hidden layers plus a linear output
                spec.append((p + f"phrase_mlp.w{i}", (c, c), "xavier"))
                spec.append((p + f"phrase_mlp.b{i}", (c,), "zeros"))
        return spec

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0,
                   dtype=DEFAULT_DTYPE) -> "ModelParams":
        tensors: dict[str, Tensor] = {}
        for name, shape, kind in cls._spec(config):
            if kind == "xavier":
                data = _xavier(_param_stream(seed, name), shape, dtype)
            elif kind == "ones":
                data = np.ones(shape, dtype=dtype)
            else:
                data = np.zeros(shape, dtype=dtype)
            tensors[name] = Tensor(data, requires_grad=True)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._tensors.items())

    def param_count(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {
            name: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
            for name, t in self._tensors.items()})


# ---------------------------------------------------------------------------
# forward pass


def positional_encoding(height: int, width: int, channels: int,
                        dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Fixed 2-D sinusoidal code of shape (height, width, channels).

    The first half of the channels encodes the column coordinate, the
    second half the row coordinate.  Within a half, channel pairs run a
    geometric frequency ladder with base 10000: channel 2i holds
    sin(pos / 10000^(2i/half)), channel 2i+1 the matching cos.
    """
    if channels % 2 != 0:
        raise ValueError("positional encoding requires an even channel count")
    half = channels // 2
    code = np.zeros((height, width, channels), dtype=np.float64)
    pair_exp = 10000.0 ** (-2.0 * (np.arange(half) // 2) / half)  # (half,)
    cols = np.arange(width, dtype=np.float64)[:, None] * pair_exp   # (W, half)
    rows = np.arange(height, dtype=np.float64)[:, None] * pair_exp  # (H, half)
    even = np.arange(half) % 2 == 0
    code[:, :, :half] = np.where(even, np.sin(cols), np.cos(cols))[None, :, :]
    code[:, :, half:] = np.where(even, np.sin(rows), np.cos(rows))[:, None, :]
    return code.astype(dtype)


def add_positional_encoding(feats: Tensor) -> Tensor:
    """Add the fixed 2-D code to a (..., H, W, C) feature grid."""
    h, w, c = feats.shape[-3:]
    return feats + Tensor(positional_encoding(h, w, c, dtype=feats.dtype))


def project_round0(feats: Tensor, phrases: Tensor,
                   params: ModelParams) -> tuple[Tensor, Tensor]:
    """Map pixels (..., H, W, C_v) and phrases (..., N, C_r) into the joint space.

    Returns (pixels (..., H*W, C), phrases (..., N, C)).
    """
    cfg = params.config
    h, w, cv = feats.shape[-3:]
    if cv != cfg.visual_channels:
        raise ValueError(f"visual features have {cv} channels, config requires "
                         f"{cfg.visual_channels}")
    if phrases.shape[-1] != cfg.phrase_channels:
        raise ValueError(f"phrase embeddings have {phrases.shape[-1]} channels, "
                         f"config requires {cfg.phrase_channels}")
    flat = feats.reshape(feats.shape[:-3] + (h * w, cv))
    return flat.matmul(params["visual_proj.weight"]), \
        phrases.matmul(params["phrase_proj.weight"])


def match(pixels: Tensor, phrases: Tensor) -> Tensor:
    """Inner-product score of every phrase against every pixel.

    pixels (..., P, C) x phrases (..., N, C) -> scores (..., N, P).
    """
    if pixels.shape[-1] != phrases.shape[-1]:
        raise ValueError(f"joint dims differ: pixels {pixels.shape} vs "
                         f"phrases {phrases.shape}")
    return phrases.matmul(pixels.swapaxes(-1, -2))


def respond(scores: Tensor, height: int, width: int) -> Tensor:
    """Squash matching scores (..., N, H*W) into response maps (..., N, H, W)."""
    maps = ops.sigmoid(scores)
    return maps.reshape(maps.shape[:-1] + (height, width))


def _round_visual(feats_flat: Tensor, params: ModelParams, rnd: int) -> Tensor:
    """This round's pixel re-projection: 1x1 linear, group norm, relu."""
    cfg = params.config
    p = f"round{rnd}."
    projected = ops.linear(feats_flat, params[p + "visual.weight"])
    normed = ops.group_norm(projected, cfg.norm_groups,
                            params[p + "visual_norm.gamma"],
                            params[p + "visual_norm.beta"])
    return ops.relu(normed)


def _phrase_mlp(phrases: Tensor, params: ModelParams, rnd: int) -> Tensor:
    """This round's phrase re-projection: 3 relu hidden layers, linear out."""
    p = f"round{rnd}.phrase_mlp."
    out = phrases
    for i in range(3):
        out = ops.relu(ops.linear(out, params[p + f"w{i}"], params[p + f"b{i}"]))
    return ops.linear(out, params[p + "w3"], params[p + "b3"])


def _attend(query: Tensor, context: Tensor, params: ModelParams,
            rnd: int) -> Tensor:
    """Multi-head cross-attention of each phrase over its sampled pixels.

    query (..., N, C), context (..., N, S, C) -> (..., N, C).  Heads act
    on contiguous channel slices of width C/heads; their outputs are
    concatenated back in head order.
    """
    cfg = params.config
    heads, hw = cfg.heads, cfg.head_width
    p = f"round{rnd}.attn."
    lead = query.shape[:-1]                       # (..., N)
    s = context.shape[-2]
    # (..., N, heads, 1, hw) so each head sees its own channel slice
    q = query.reshape(lead + (heads, 1, hw)).matmul(params[p + "query.weight"])
    kv_shape = lead + (s, heads, hw)
    k = context.reshape(kv_shape).swapaxes(-3, -2).matmul(params[p + "key.weight"])
    v = context.reshape(kv_shape).swapaxes(-3, -2).matmul(params[p + "value.weight"])
    denom = float(np.sqrt(cfg.channels if cfg.attn_scale == "joint" else hw))
    scores = q.matmul(k.swapaxes(-1, -2)) * (1.0 / denom)   # (..., N, heads, 1, S)
    weights = ops.softmax(scores, axis=-1)
    mixed = weights.matmul(v)                                # (..., N, heads, 1, hw)
    return mixed.reshape(lead + (cfg.channels,))


def aggregation_round(feats_flat: Tensor, phrases: Tensor, scores: Tensor,
                      params: ModelParams, rnd: int) -> tuple[Tensor, Tensor]:
    """One aggregation round.

    feats_flat (..., P, C_v) raw pixel features, phrases (..., N, C)
    current phrase state, scores (..., N, P) current matching map.
    Returns the refined (phrases, scores).
    """
    cfg = params.config
    total = feats_flat.shape[-2]
    if cfg.compatible_pixels > total:
        raise ValueError(f"compatible_pixels={cfg.compatible_pixels} exceeds "
                         f"pixel count {total}")
    visual = _round_visual(feats_flat, params, rnd)
    if cfg.pool == "binned":
        idx = ops.binned_max_indices(scores, cfg.compatible_pixels)
    else:
        idx = ops.topk_indices(scores, cfg.compatible_pixels)
    source = visual if cfg.gather == "projected" else feats_flat
    context = ops.gather_pixels(source, idx)                # (..., N, S, C)
    attended = _attend(phrases, context, params, rnd)
    merged = attended + phrases
    p = f"round{rnd}."
    inner = ops.layer_norm(merged, params[p + "norm1.gamma"],
                           params[p + "norm1.beta"])
    hidden = ops.relu(ops.linear(inner, params[p + "ffn.w1"],
                                 params[p + "ffn.b1"]))
    ffn_out = ops.linear(hidden, params[p + "ffn.w2"], params[p + "ffn.b2"])
    refined = ops.layer_norm(ffn_out, params[p + "norm2.gamma"],
                             params[p + "norm2.beta"]) + merged
    new_scores = match(visual, _phrase_mlp(refined, params, rnd))
    return refined, new_scores


def forward(params: ModelParams, feats: Tensor, phrases: Tensor) -> list[Tensor]:
    """Full pass: returns rounds+1 response maps, each (..., N, H, W).

    Element 0 is the initial matching; element l is the map after l
    aggregation rounds.
    """
    cfg = params.config
    h, w = feats.shape[-3], feats.shape[-2]
    if cfg.positional:
        feats = add_positional_encoding(feats)
    pixels, phr = project_round0(feats, phrases, params)
    feats_flat = feats.reshape(feats.shape[:-3] + (h * w, cfg.visual_channels))
    scores = match(pixels, phr)
    maps = [respond(scores, h, w)]
    for rnd in range(cfg.rounds):
        phr, scores = aggregation_round(feats_flat, phr, scores, params, rnd)
        maps.append(respond(scores, h, w))
    return maps


# ---------------------------------------------------------------------------
# checkpoint helpers with metadata


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    """Write parameters as a bundle; `extra` merges into the config block."""
    config = params.config.to_dict()
    if extra:
        config = {**config, "training": extra}
    arrays = {name: t.data.astype(np.float32)
              for name, t in params.named_parameters()}
    write_tensors(path, arrays, config=config)


def load_checkpoint(path, dtype=DEFAULT_DTYPE) -> tuple[ModelParams, dict]:
    """Read a checkpoint bundle; returns (params, training metadata dict)."""
    arrays, manifest = read_tensors(path)
    cfg_dict = dict(manifest.get("config") or {})
    if not cfg_dict:
        raise BundleError("checkpoint manifest has no config block")
    extra = cfg_dict.pop("training", {})
    try:
        config = ModelConfig.from_dict(cfg_dict)
    except (TypeError, ValueError) as e:
        raise BundleError(f"checkpoint config is invalid: {e}") from e
    tensors: dict[str, Tensor] = {}
    for name, shape, _ in ModelParams._spec(config):
        if name not in arrays:
            raise BundleError(f"checkpoint is missing parameter {name!r}")
        arr = arrays[name]
        if arr.shape != shape:
            raise BundleError(f"checkpoint parameter {name!r} has shape "
                              f"{arr.shape}, config requires {shape}")
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True)
    extras = set(arrays) - set(tensors)
    if extras:
        raise BundleError(f"checkpoint holds unexpected tensors: {sorted(extras)}")
    return ModelParams(config, tensors), extra
