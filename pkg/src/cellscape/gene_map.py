"""Arrange genes on a q x q grid so co-expressed genes sit close together,
render per-cell 2D expression maps, and apply joint cell masking."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .preprocess import CoexpressionMatrix


@dataclass
class GeneLayout:
    """Bijection from gene index to grid cell on a q x q grid."""

    positions: np.ndarray      # (p, 2) int rows (r, s)
    q: int
    objective_value: float     # final weighted-distance objective
    greedy_objective: float    # objective right after greedy seeding

    @property
    def n_genes(self) -> int:
        return self.positions.shape[0]

    def cell_indices(self) -> np.ndarray:
        """Flat grid index r*q + s per gene."""
        return self.positions[:, 0] * self.q + self.positions[:, 1]

    def grid(self) -> np.ndarray:
        """(q, q) array of gene indices, -1 on padding cells."""
        g = np.full((self.q, self.q), -1, dtype=np.int64)
        g[self.positions[:, 0], self.positions[:, 1]] = np.arange(self.n_genes)
        return g


@dataclass
class CellMapBatch:
    """Per-cell maps plus the jointly masked feature/map pair."""

    maps: np.ndarray             # (n, q, q)
    mask_set: np.ndarray         # sorted masked cell indices
    masked_features: np.ndarray  # (p, n), masked columns zeroed
    masked_maps: np.ndarray      # (n, q, q), masked slices zeroed


def _layout_objective(w: np.ndarray, positions: np.ndarray) -> float:
    diffs = positions[:, None, :] - positions[None, :, :]
    dist = np.sqrt((diffs.astype(np.float64) ** 2).sum(axis=2))
    return 0.5 * float((w * dist).sum())


def layout_genes(coexpr: CoexpressionMatrix, seed: int,
                 swap_budget: int | None = None) -> GeneLayout:
    """Deterministic greedy seeding plus first-improvement pairwise swaps.

    Minimizes sum over gene pairs of clipped-positive correlation times grid
    distance. ``swap_budget`` caps the number of swap evaluations
    (default 20 p^2).
    """
    C = coexpr.C
    if C.shape[0] != C.shape[1] or not np.array_equal(C, C.T):
        raise ValueError("co-expression matrix must be square and exactly symmetric")
    p = C.shape[0]
    if p < 1:
        raise ValueError("need at least one gene")
    q = math.isqrt(p - 1) + 1 if p > 1 else 1
    if q * q < p:  # pragma: no cover - isqrt guard
        q += 1

    w = np.maximum(C, 0.0)
    np.fill_diagonal(w, 0.0)

    grid_rs = np.stack(np.divmod(np.arange(q * q), q), axis=1)  # flat cell -> (r, s)
    grid_dist = np.sqrt(
        ((grid_rs[:, None, :] - grid_rs[None, :, :]) ** 2).sum(axis=2).astype(np.float64)
    )

    # greedy seeding: strongest gene at the grid center, then best-fit placement
    cell_of = np.full(p, -1, dtype=np.int64)
    free = np.ones(q * q, dtype=bool)
    placed: list[int] = []
    first = int(np.argmax(w.sum(axis=1)))
    center = ((q - 1) // 2) * q + (q - 1) // 2
    cell_of[first] = center
    free[center] = False
    placed.append(first)
    unplaced = [g for g in range(p) if g != first]
    while unplaced:
        attachment = w[np.ix_(unplaced, placed)].sum(axis=1)
        g = unplaced[int(np.argmax(attachment))]
        free_cells = np.flatnonzero(free)
        cost = grid_dist[np.ix_(free_cells, cell_of[placed])] @ w[g, placed]
        cell = int(free_cells[int(np.argmin(cost))])
        cell_of[g] = cell
        free[cell] = False
        placed.append(g)
        unplaced.remove(g)

    positions = grid_rs[cell_of].copy()
    greedy_j = _layout_objective(w, positions)

    # first-improvement pairwise swap hill climbing over a fixed budget;
    # candidate pairs are scored in chunks against the current layout and the
    # first improving swap in each chunk is applied (the rest of the chunk
    # still counts as spent evaluations)
    budget = 20 * p * p if swap_budget is None else int(swap_budget)
    j = greedy_j
    if p > 1 and budget > 0 and w.any():
        rng = np.random.default_rng(seed)
        remaining = budget
        chunk = min(512, budget)
        while remaining > 0:
            size = min(chunk, remaining)
            a = rng.integers(0, p, size)
            b = rng.integers(0, p, size)
            valid = a != b
            remaining -= size
            if not valid.any():
                continue
            a, b = a[valid], b[valid]
            pa, pb = cell_of[a], cell_of[b]
            da = grid_dist[pa][:, cell_of]
            db = grid_dist[pb][:, cell_of]
            deltas = ((w[a] - w[b]) * (db - da)).sum(axis=1) + 2.0 * w[a, b] * grid_dist[pa, pb]
            improving = np.flatnonzero(deltas < -1e-12)
            if improving.size:
                first = improving[0]
                cell_of[a[first]], cell_of[b[first]] = pb[first], pa[first]
                j += deltas[first]
        positions = grid_rs[cell_of].copy()
        j = _layout_objective(w, positions)  # recompute to shed float drift

    return GeneLayout(positions=positions, q=q, objective_value=j, greedy_objective=greedy_j)


def render_map(x: np.ndarray, layout: GeneLayout) -> np.ndarray:
    """Place a length-p vector onto the grid; padding cells stay zero."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (layout.n_genes,):
        raise ValueError(f"expected vector of length {layout.n_genes}, got {x.shape}")
    m = np.zeros((layout.q, layout.q), dtype=np.float64)
    m[layout.positions[:, 0], layout.positions[:, 1]] = x
    return m


def render_maps(X: np.ndarray, layout: GeneLayout) -> np.ndarray:
    """Batched rendering of a (p, n) matrix into (n, q, q) maps."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] != layout.n_genes:
        raise ValueError(f"expected {layout.n_genes} gene rows, got {X.shape[0]}")
    n = X.shape[1]
    flat = np.zeros((n, layout.q * layout.q), dtype=np.float64)
    flat[:, layout.cell_indices()] = X.T
    return flat.reshape(n, layout.q, layout.q)


def mask_cells(X: np.ndarray, maps: np.ndarray, ratio: float, seed: int) -> CellMapBatch:
    """Zero both representations of ceil(ratio * n) seeded-random cells."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    X = np.asarray(X, dtype=np.float64)
    maps = np.asarray(maps, dtype=np.float64)
    n = X.shape[1]
    if maps.shape[0] != n:
        raise ValueError(f"{maps.shape[0]} maps for {n} cells")
    size = math.ceil(ratio * n)
    rng = np.random.default_rng(seed)
    mask = np.sort(rng.choice(n, size=size, replace=False))
    masked_features = X.copy()
    masked_features[:, mask] = 0.0
    masked_maps = maps.copy()
    masked_maps[mask] = 0.0
    return CellMapBatch(
        maps=maps, mask_set=mask, masked_features=masked_features, masked_maps=masked_maps
    )


def write_layout(path, layout: GeneLayout, gene_names) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gene_id", "row", "col"])
        for name, (r, s) in zip(gene_names, layout.positions):
            writer.writerow([name, int(r), int(s)])
