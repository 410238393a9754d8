"""Training objectives: scaled cosine reconstruction error over masked cells
and the graph-neighborhood multi-positive contrastive loss."""

from __future__ import annotations

import warnings

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def sce_loss(x: np.ndarray, x_hat: Tensor, mask_set: np.ndarray, gamma: float = 3.0) -> Tensor:
    """Mean of (1 - cos(x, x_hat))^gamma over the masked cells.

    ``x`` holds the original (n, p) cell rows; ``x_hat`` the reconstruction.
    A zero-norm vector in a masked pair contributes cos = 0 (loss 1) with a
    warning and is excluded from the gradient path.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    mask = np.asarray(mask_set, dtype=np.intp)
    if mask.size == 0:
        raise ValueError("mask set is empty")
    x_m = np.asarray(x, dtype=np.float64)[mask]
    norm_x = np.sqrt((x_m * x_m).sum(axis=1))
    norm_h = np.sqrt((x_hat.values[mask] * x_hat.values[mask]).sum(axis=1))
    degenerate = (norm_x == 0.0) | (norm_h == 0.0)
    if np.any(degenerate):
        warnings.warn(
            f"sce_loss: {int(degenerate.sum())} masked pair(s) with zero norm use cos=0",
            RuntimeWarning,
        )
    keep = np.flatnonzero(~degenerate)
    n_terms = mask.size
    constant_part = float(degenerate.sum())  # each degenerate term is (1-0)^gamma = 1

    if keep.size == 0:
        return Tensor(np.asarray(constant_part / n_terms))
    rows = ad.gather_rows(x_hat, mask[keep])
    target = x_m[keep]
    dot = ad.tensor_sum(rows * target, axis=1, keepdims=True)
    norm_rows = ad.tensor_sum(rows * rows, axis=1, keepdims=True) ** 0.5
    cos = dot / (norm_rows * norm_x[keep, None])
    # clamp float fuzz at cos slightly above 1; true gradient there is 0 anyway
    terms = ad.leaky_relu(1.0 - cos, 0.0) ** gamma
    return (ad.tensor_sum(terms) + constant_part) * (1.0 / n_terms)


def neighbor_arrays(neighbors: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Dense 0/1 adjacency plus the per-cell occurrence count across all
    neighbor sets (reusable across contrastive evaluations)."""
    n = len(neighbors)
    degree = np.zeros(n)
    adjacency = np.zeros((n, n))
    for i, nb in enumerate(neighbors):
        if len(nb) == 0:
            raise ValueError(f"cell {i} has an empty neighbor set")
        adjacency[i, nb] = 1.0
        degree[nb] += 1.0
    return adjacency, degree


def contrastive_loss(z: Tensor, neighbors: list[np.ndarray], tau: float,
                     anchors: np.ndarray | None = None,
                     prebuilt: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
    """Multi-positive InfoNCE over spatial neighborhoods.

    For each anchor the numerator pools similarities to its graph neighbors
    and the denominator pools similarities to every neighbor occurrence in
    the batch, computed in log-space with max-shift stabilization.
    ``anchors`` restricts the averaged anchor set (defaults to every cell).
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    n = z.shape[0]
    if len(neighbors) != n:
        raise ValueError("neighbor list length must match embedding rows")
    norms = np.sqrt((z.values * z.values).sum(axis=1))
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise ValueError("contrastive_loss expects unit-norm embedding rows")
    adjacency, degree = neighbor_arrays(neighbors) if prebuilt is None else prebuilt

    if anchors is None:
        anchor_idx = np.arange(n)
        z_anchor = z
        adj_anchor = adjacency
    else:
        anchor_idx = np.asarray(anchors, dtype=np.intp)
        z_anchor = ad.gather_rows(z, anchor_idx)
        adj_anchor = adjacency[anchor_idx]

    # fold the temperature into the small operand; the (anchors x n)
    # similarity matrix is the expensive part
    sims = ad.matmul(z_anchor * (1.0 / tau), ad.transpose(z))
    shift = sims.values.max(axis=1, keepdims=True)  # detached stabilizer
    expsims = ad.exp(sims - shift)
    denominator = ad.matmul(expsims, degree[:, None])
    # numerator terms exist only at neighbor pairs: gather them instead of
    # multiplying the full similarity matrix by the adjacency mask
    n_anchors = adj_anchor.shape[0]
    rows, cols = np.nonzero(adj_anchor)
    flat = ad.reshape(sims, (n_anchors * n, 1))
    edge_terms = ad.exp(ad.gather_rows(flat, rows * n + cols) - shift[rows])
    numerator = ad.segment_sum(edge_terms, rows, n_anchors)
    per_cell = ad.log(denominator) - ad.log(numerator)
    return ad.tensor_mean(per_cell)
