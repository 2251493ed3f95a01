"""Neural-network operations on top of the autograd tensor engine.

The differentiable ops here either are primitives with hand-written
backward rules (sigmoid, relu, clip, gather_pixels, concat) or are
composed from tensor primitives so their gradients come for free
(softmax, layer_norm, group_norm, linear).  Index selection
(``binned_max_indices`` / ``topk_indices``) is not differentiable and
returns plain integer arrays.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# activations


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise logistic function, output clamped into the open (0, 1).

    The clamp only engages where float arithmetic would saturate to exactly
    0 or 1; the gradient s*(1-s) vanishes there anyway, so the clamp does
    not perturb training.
    """
    x = _as_tensor(x)
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    lo = np.nextafter(d.dtype.type(0), d.dtype.type(1))
    hi = np.nextafter(d.dtype.type(1), d.dtype.type(0))
    np.clip(out_data, lo, hi, out=out_data)
    out = x._make(out_data, (x,), "sigmoid")

    def _bw(g):
        if x.requires_grad:
            x._accumulate(g * out_data * (1.0 - out_data))
    out._backward_fn = _bw
    return out


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = x._make(np.maximum(x.data, 0), (x,), "relu")
    mask = x.data > 0

    def _bw(g):
        if x.requires_grad:
            x._accumulate(g * mask)
    out._backward_fn = _bw
    return out


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown activation kind {kind!r}")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only through unclamped entries."""
    x = _as_tensor(x)
    out = x._make(np.clip(x.data, lo, hi), (x,), "clip")
    mask = (x.data > lo) & (x.data < hi)

    def _bw(g):
        if x.requires_grad:
            x._accumulate(g * mask)
    out._backward_fn = _bw
    return out


# ---------------------------------------------------------------------------
# softmax and normalization (composed; gradients via the graph)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis`; slices sum to 1.

    The per-slice max is subtracted as a constant before exponentiation;
    softmax is shift invariant, so this leaves the value and the gradient
    unchanged.
    """
    x = _as_tensor(x)
    shift = np.max(x.data, axis=axis, keepdims=True)
    e = (x - Tensor(shift)).exp()
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply affine."""
    x = _as_tensor(x)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ValueError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match "
            f"channel count {x.shape[-1]}")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normed = centered * ((var + eps) ** -0.5)
    return normed * gamma + beta


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Group normalization over a flattened spatial axis.

    `x` has shape (..., P, C) where P is the number of spatial positions
    and C the channel count.  Channels are split into `groups` contiguous
    groups; statistics are computed per group over all positions and the
    group's channels.  Leading axes are treated as independent batch
    entries.
    """
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ValueError("group_norm expects input of shape (..., P, C)")
    channels = x.shape[-1]
    if channels % groups != 0:
        raise ValueError(f"groups={groups} does not divide channels={channels}")
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ValueError("group_norm affine shapes must match channel count")
    positions = x.shape[-2]
    lead = x.shape[:-2]
    per = channels // groups
    g = x.reshape(lead + (positions, groups, per))
    mu = g.mean(axis=(-3, -1), keepdims=True)
    centered = g - mu
    var = (centered * centered).mean(axis=(-3, -1), keepdims=True)
    normed = centered * ((var + eps) ** -0.5)
    flat = normed.reshape(lead + (positions, channels))
    return flat * gamma + beta


# ---------------------------------------------------------------------------
# linear / concat


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight (+ bias); weight is (in, out), bias is (out,)."""
    x = _as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(
            f"linear dimension mismatch: input {x.shape} vs weight {weight.shape}")
    out = x.matmul(weight)
    if bias is not None:
        out = out + bias
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along `axis`; gradients split back to the parts."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat requires at least one tensor")
    first = parts[0]
    ref = list(first.shape)
    ax = axis % max(first.ndim, 1)
    for p in parts[1:]:
        if p.ndim != first.ndim:
            raise ValueError("concat parts must have equal rank")
        for i, (a, b) in enumerate(zip(ref, p.shape)):
            if i != ax and a != b:
                raise ValueError(
                    f"concat off-axis shape mismatch: {tuple(ref)} vs {p.shape}")
    data = np.concatenate([p.data for p in parts], axis=ax)
    out = first._make(data, tuple(parts), "concat")
    sizes = [p.shape[ax] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def _bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                index = [slice(None)] * g.ndim
                index[ax] = slice(lo, hi)
                p._accumulate(g[tuple(index)])
    out._backward_fn = _bw
    return out


# ---------------------------------------------------------------------------
# index selection and gathering


def binned_max_indices(scores, bins: int) -> np.ndarray:
    """Per-row argmax over `bins` contiguous, near-equal bins of the last axis.

    Bin b covers positions [floor(b*P/bins), floor((b+1)*P/bins)).  Ties
    resolve to the lowest linear index, so the result is deterministic and
    strictly increasing along the last axis.  Returns int64 indices shaped
    like `scores` with the last axis replaced by `bins`.
    """
    data = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    total = data.shape[-1]
    if not 1 <= bins <= total:
        raise ValueError(f"bins={bins} must lie in [1, {total}]")
    out = np.empty(data.shape[:-1] + (bins,), dtype=np.int64)
    for b in range(bins):
        lo = (b * total) // bins
        hi = ((b + 1) * total) // bins
        out[..., b] = lo + np.argmax(data[..., lo:hi], axis=-1)
    return out


def topk_indices(scores, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, reported in ascending order.

    Ties resolve to the lowest linear index (stable sort on descending
    value).
    """
    data = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    total = data.shape[-1]
    if not 1 <= k <= total:
        raise ValueError(f"k={k} must lie in [1, {total}]")
    order = np.argsort(-data, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1).astype(np.int64)


def gather_pixels(features: Tensor, idx: np.ndarray) -> Tensor:
    """Gather feature rows: out[..., n, s, :] = features[..., idx[..., n, s], :].

    `features` is (..., P, C) and `idx` is (..., N, S) with identical
    leading axes; the result is (..., N, S, C).  The backward pass
    scatter-adds gradients into the feature rows in index order, which is
    deterministic.
    """
    features = _as_tensor(features)
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise TypeError("gather_pixels expects integer indices")
    lead = features.shape[:-2]
    if idx.shape[:len(lead)] != lead:
        raise ValueError(
            f"index leading axes {idx.shape} do not match features {features.shape}")
    total = features.shape[-2]
    if idx.size and (idx.min() < 0 or idx.max() >= total):
        raise IndexError(f"gather index out of range [0, {total})")
    expanded = np.expand_dims(features.data, axis=-3)          # (..., 1, P, C)
    take = np.expand_dims(idx, axis=-1)                        # (..., N, S, 1)
    data = np.take_along_axis(expanded, take, axis=-2)         # (..., N, S, C)
    out = features._make(data, (features,), "gather_pixels")
    f_shape = features.shape

    def _bw(g):
        if not features.requires_grad:
            return
        channels = f_shape[-1]
        acc = np.zeros(f_shape, dtype=g.dtype)
        flat_acc = acc.reshape(-1, total, channels)
        flat_idx = idx.reshape(flat_acc.shape[0], -1)
        flat_g = g.reshape(flat_acc.shape[0], -1, channels)
        for b in range(flat_acc.shape[0]):
            np.add.at(flat_acc[b], flat_idx[b], flat_g[b])
        features._accumulate(acc)
    out._backward_fn = _bw
    return out
