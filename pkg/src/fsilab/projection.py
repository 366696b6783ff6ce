"""Feature transport between physical points and the latent grid.

Encoding projects per-point features onto grid nodes with attention-style
interpolation weights; decoding transports processed grid features back
with the transposed weights.  Both directions normalize their weights to
sum to 1, so outputs stay inside the componentwise envelope of the source
features.  Cross-scale fusion concatenates pathway features and mixes them
through a feed-forward block.
"""

from __future__ import annotations

import numpy as np

from .tensor import DimensionError, Tensor, concat, ffn, linear, softmax


def encode_domain(x: Tensor, grid_coords: Tensor,
                  q_weight: Tensor, q_bias: Tensor,
                  k_weight: Tensor, k_bias: Tensor) -> tuple[Tensor, Tensor]:
    """Project point features onto the grid.

    Returns (w, p): the raw weight logits w = Q K^T with Q from the grid
    coordinates and K from the point features, and the projection
    p = softmax(w) x with softmax over the point axis, so each grid node
    holds a convex combination of point features.  w is reused by decoding.
    """
    if x.shape[1] != grid_coords.shape[1]:
        raise DimensionError(
            f"feature width {x.shape[1]} != grid width {grid_coords.shape[1]}"
        )
    q = linear(grid_coords, q_weight, q_bias)  # [M, D]
    k = linear(x, k_weight, k_bias)  # [N, D]
    w = q @ k.T  # [M, N]
    p = softmax(w, axis=1) @ x
    return w, p


def decode_domain(p_hat: Tensor, w: Tensor) -> Tensor:
    """Transport grid features back to points using the encode weights.

    Softmax runs over the grid axis of w^T, so each point's interpolation
    weights over grid nodes sum to 1.
    """
    if w.shape[0] != p_hat.shape[0]:
        raise DimensionError(
            f"weight rows {w.shape[0]} != grid feature rows {p_hat.shape[0]}"
        )
    return softmax(w.T, axis=1) @ p_hat


def aggregate_pathways(features: list[Tensor],
                       w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> list[Tensor]:
    """Fuse per-pathway features: concat channels -> FFN -> split back.

    All pathways must share the point count; widths are preserved exactly.
    """
    n = features[0].shape[0]
    for f in features[1:]:
        if f.shape[0] != n:
            raise DimensionError("pathways disagree on point count")
    widths = [f.shape[1] for f in features]
    fused = ffn(concat(features, axis=1), w1, b1, w2, b2)
    out = []
    offset = 0
    for width in widths:
        out.append(fused[:, offset:offset + width])
        offset += width
    return out


def fuse_pathways(features: list[Tensor],
                  w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Like aggregate_pathways but returns the fused block unsplit
    (used at the last level, where the output head consumes all channels)."""
    n = features[0].shape[0]
    for f in features[1:]:
        if f.shape[0] != n:
            raise DimensionError("pathways disagree on point count")
    return ffn(concat(features, axis=1), w1, b1, w2, b2)
