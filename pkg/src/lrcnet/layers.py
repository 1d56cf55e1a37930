"""Composite layers of the network, built from autodiff primitives.

Parameter containers are plain lists of ``(W, b)`` tensor pairs so the model
can name and serialize them in a fixed order.
"""
from typing import List, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .geometry import interp_weights_batch

Dense = Tuple[ad.Tensor, ad.Tensor]


def init_dense(rng, fan_in, fan_out, dtype=np.float64):
    """Fan-in scaled uniform weights, bound sqrt(6 / fan_in); zero bias."""
    bound = np.sqrt(6.0 / fan_in)
    W = rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype)
    return (ad.Tensor(W, requires_grad=True), ad.Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True))


def init_mlp(rng, in_dim, widths, dtype=np.float64):
    layers = []
    for w in widths:
        layers.append(init_dense(rng, in_dim, w, dtype))
        in_dim = w
    return layers


def mlp(x, layers, final_relu=True):
    for i, (W, b) in enumerate(layers):
        if final_relu or i + 1 < len(layers):
            x = ad.linear_relu(x, W, b)
        else:
            x = ad.linear(x, W, b)
    return x


def pointnet_layer(points, layers):
    """Shared per-point MLP followed by channelwise max over the point axis.

    points: [..., K, C] -> [..., out]
    """
    points = ad.as_tensor(points)
    if points.shape[-1] != layers[0][0].shape[0]:
        raise ValueError(f"pointnet_layer: input width {points.shape[-1]} != {layers[0][0].shape[0]}")
    if points.shape[-2] < 1:
        raise ValueError("pointnet_layer needs at least one point")
    return ad.max_reduce(mlp(points, layers), axis=-2)


def filter_counts(width, kinds):
    """Filters per window size h = 1..kinds; the remainder goes to h = 1."""
    base = width // kinds
    counts = [base] * kinds
    counts[0] += width - base * kinds
    return counts


def init_intra_filters(rng, width, kinds, dtype=np.float64):
    """One bank per window size h with weights [h * width, F_h]."""
    return [init_dense(rng, h * width, f, dtype)
            for h, f in zip(range(1, kinds + 1), filter_counts(width, kinds)) if f > 0]


def _window_sizes(filters, width):
    return [W.shape[0] // width for W, _ in filters]


def intra_region_encode(area_feats, filters):
    """Variable-size convolution over the scale axis.

    area_feats: [..., T, D]. For a filter bank of window size h, every window
    of h consecutive scale features is flattened (scale-major) to length h*D,
    passed through the bank and ReLU, then max-pooled over the T - h + 1
    window positions. Bank outputs are concatenated in h order.
    """
    area_feats = ad.as_tensor(area_feats)
    T, D = area_feats.shape[-2:]
    lead = area_feats.shape[:-2]
    outs = []
    for (W, b), h in zip(filters, _window_sizes(filters, D)):
        if h > T:
            raise ValueError(f"filter window {h} exceeds the {T} available scales")
        n_win = T - h + 1
        if h == 1:
            windows = area_feats
        else:
            pos = np.arange(n_win)[:, None] + np.arange(h)[None, :]
            windows = ad.take(area_feats, pos, axis=-2)  # [..., n_win, h, D]
            windows = ad.reshape(windows, lead + (n_win, h * D))
        c = ad.linear_relu(windows, W, b)
        outs.append(ad.max_reduce(c, axis=-2))
    return outs[0] if len(outs) == 1 else ad.concat(outs, axis=-1)


def inter_region_encode(region_feats, V):
    """Similarity-weighted sum of region features, divided by the weight sum.

    region_feats: [..., M, D]; V: [..., M, M] constant. With V the identity
    the input is returned exactly; with V all ones every row becomes the
    column mean.
    """
    region_feats = ad.as_tensor(region_feats)
    V = np.asarray(V, dtype=region_feats.dtype)
    if V.shape[-2:] != (region_feats.shape[-2],) * 2:
        raise ValueError(f"inter_region_encode: V {V.shape} vs features {region_feats.shape}")
    enhanced = ad.weighted_sum(V, region_feats)
    return ad.divide(enhanced, V.sum(axis=-1, keepdims=True))


def aggregate_fallback(area_feats, mode):
    """Ablation baselines for combining scale features: mean, max or concat."""
    area_feats = ad.as_tensor(area_feats)
    if mode == "mean":
        return ad.mean_reduce(area_feats, axis=-2)
    if mode == "max":
        return ad.max_reduce(area_feats, axis=-2)
    if mode == "concat":
        T, D = area_feats.shape[-2:]
        return ad.reshape(area_feats, area_feats.shape[:-2] + (T * D,))
    raise ValueError(f"unknown aggregation mode {mode!r}")


def global_pointnet(enhanced, layers, pool="max"):
    """Per-region MLP then pooling over the region axis -> [..., width]."""
    feats = mlp(enhanced, layers)
    if pool == "max":
        return ad.max_reduce(feats, axis=-2)
    if pool == "mean":
        return ad.mean_reduce(feats, axis=-2)
    if pool == "sum":
        return ad.sum_reduce(feats, axis=-2)
    raise ValueError(f"unknown pooling {pool!r}")


def feature_propagation(target_pts, source_pts, source_feats, skip_feats=None, k=3):
    """Interpolate source features onto target points, then append skip features.

    target_pts [B, A, 3], source_pts [B, S, 3], source_feats [B, S, C],
    skip_feats [B, A, C'] or None.
    """
    target_pts = np.asarray(target_pts, dtype=np.float64)
    source_pts = np.asarray(source_pts, dtype=np.float64)
    if source_pts.shape[1] < 1:
        raise ValueError("feature_propagation needs at least one source point")
    idx, w = interp_weights_batch(target_pts, source_pts, k)
    out = ad.gather_interpolate(source_feats, idx, w)
    if skip_feats is not None:
        out = ad.concat([out, skip_feats], axis=-1)
    return out


def classification_head(g, layers, training=False, rng=None, rate=0.4):
    """FC stack with ReLU and dropout on every hidden layer; linear output."""
    x = ad.as_tensor(g)
    for W, b in layers[:-1]:
        x = ad.linear_relu(x, W, b)
        x = ad.dropout(x, rate, rng, training)
    W, b = layers[-1]
    return ad.linear(x, W, b)
