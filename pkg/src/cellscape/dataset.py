"""Expression dataset container and file I/O.

Supported inputs: dense CSV (genes as rows, ``gene_id,cell_1,...``), sparse
triplet text (``%shape p n`` header then ``row col value`` lines), coordinate
CSV (``cell_id,x,y``) and label CSV (``cell_id,label``).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


@dataclass
class ExpressionDataset:
    """Genes x cells expression matrix with per-cell coordinates and labels."""

    X: np.ndarray                 # (p, n) float64
    coords: np.ndarray            # (2, n) float64, tissue-plane units
    gene_names: list[str]
    cell_ids: list[str]
    batch_labels: list[str] | None = None
    type_labels: list[str] | None = None
    raw_counts: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.validate()

    @property
    def n_genes(self) -> int:
        return self.X.shape[0]

    @property
    def n_cells(self) -> int:
        return self.X.shape[1]

    def validate(self) -> None:
        p, n = self.X.shape
        if not np.all(np.isfinite(self.X)):
            raise ValueError("expression matrix contains NaN or Inf")
        if self.coords.shape != (2, n):
            raise ValueError(
                f"coordinate matrix has {self.coords.shape[1] if self.coords.ndim == 2 else '?'}"
                f" cells but expression has {n}"
            )
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("coordinates contain NaN or Inf")
        if len(self.gene_names) != p:
            raise ValueError(f"{len(self.gene_names)} gene names for {p} matrix rows")
        if len(self.cell_ids) != n:
            raise ValueError(f"{len(self.cell_ids)} cell ids for {n} matrix columns")
        _require_unique(self.gene_names, "gene")
        _require_unique(self.cell_ids, "cell")
        for labels, what in ((self.batch_labels, "batch"), (self.type_labels, "type")):
            if labels is not None and len(labels) != n:
                raise ValueError(f"{what} labels length {len(labels)} != {n} cells")

    def copy(self) -> "ExpressionDataset":
        return replace(
            self,
            X=self.X.copy(),
            coords=self.coords.copy(),
            gene_names=list(self.gene_names),
            cell_ids=list(self.cell_ids),
            batch_labels=None if self.batch_labels is None else list(self.batch_labels),
            type_labels=None if self.type_labels is None else list(self.type_labels),
            raw_counts=None if self.raw_counts is None else self.raw_counts.copy(),
        )

    def subset_genes(self, indices) -> "ExpressionDataset":
        """Dataset restricted to the given gene rows (raw counts follow)."""
        idx = np.asarray(indices, dtype=np.intp)
        return replace(
            self,
            X=self.X[idx].copy(),
            gene_names=[self.gene_names[i] for i in idx],
            raw_counts=None if self.raw_counts is None else self.raw_counts[idx].copy(),
        )

    def subset_cells(self, indices) -> "ExpressionDataset":
        """Dataset restricted to the given cell columns."""
        idx = np.asarray(indices, dtype=np.intp)
        return replace(
            self,
            X=self.X[:, idx].copy(),
            coords=self.coords[:, idx].copy(),
            cell_ids=[self.cell_ids[i] for i in idx],
            batch_labels=None if self.batch_labels is None
            else [self.batch_labels[i] for i in idx],
            type_labels=None if self.type_labels is None
            else [self.type_labels[i] for i in idx],
            raw_counts=None if self.raw_counts is None else self.raw_counts[:, idx].copy(),
        )


def split_by_batch(ds: ExpressionDataset) -> list[ExpressionDataset]:
    """One dataset per batch label, in sorted batch order."""
    if ds.batch_labels is None:
        raise ValueError("dataset has no batch labels to split on")
    out = []
    labels = np.asarray(ds.batch_labels)
    for batch in sorted(set(ds.batch_labels)):
        sample = ds.subset_cells(np.flatnonzero(labels == batch))
        sample.batch_labels = None
        out.append(sample)
    return out


def _require_unique(names, what: str) -> None:
    seen = set()
    for name in names:
        if name in seen:
            raise ValueError(f"duplicate {what} identifier: {name!r}")
        seen.add(name)


def _parse_float(token: str, row: int, col: int, path) -> float:
    try:
        return float(token)
    except ValueError:
        raise ValueError(
            f"{path}: non-numeric entry {token!r} at row {row}, column {col}"
        ) from None


def load_dense_matrix(path) -> tuple[np.ndarray, list[str], list[str]]:
    """Read a genes-as-rows dense CSV; returns (X, gene_names, cell_ids)."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 2:
            raise ValueError(f"{path}: expected a header row 'gene_id,cell_1,...'")
        cell_ids = [c.strip() for c in header[1:]]
        gene_names: list[str] = []
        rows: list[list[float]] = []
        for r, line in enumerate(reader, start=1):
            if not line:
                continue
            if len(line) != len(header):
                raise ValueError(
                    f"{path}: row {r} has {len(line)} fields, header has {len(header)}"
                )
            gene_names.append(line[0].strip())
            rows.append([_parse_float(tok, r, c + 1, path) for c, tok in enumerate(line[1:])])
    if not rows:
        raise ValueError(f"{path}: no data rows")
    _require_unique(gene_names, "gene")
    _require_unique(cell_ids, "cell")
    return np.array(rows, dtype=np.float64), gene_names, cell_ids


def load_sparse_triplet(path) -> tuple[np.ndarray, list[str], list[str]]:
    """Read ``%shape p n`` triplet text; duplicate entries are summed.

    Gene/cell identifiers are synthesized (``g<i>``/``c<j>``); coordinate files
    supply the real cell ids when present.
    """
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip().split()
        if len(header) != 3 or header[0] != "%shape":
            raise ValueError(f"{path}: first line must be '%shape <p> <n>'")
        p, n = int(header[1]), int(header[2])
        X = np.zeros((p, n), dtype=np.float64)
        for lineno, line in enumerate(fh, start=2):
            toks = line.split()
            if not toks:
                continue
            if len(toks) != 3:
                raise ValueError(f"{path}: line {lineno}: expected 'row col value'")
            r, c = int(toks[0]), int(toks[1])
            if not (0 <= r < p and 0 <= c < n):
                raise ValueError(f"{path}: line {lineno}: index ({r},{c}) outside {p}x{n}")
            X[r, c] += _parse_float(toks[2], lineno, 3, path)
    return X, [f"g{i}" for i in range(p)], [f"c{j}" for j in range(n)]


def load_coords(path) -> tuple[np.ndarray, list[str]]:
    """Read ``cell_id,x,y`` CSV; returns (coords 2 x n, cell_ids)."""
    path = Path(path)
    ids: list[str] = []
    xy: list[tuple[float, float]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty coordinates file")
        for r, line in enumerate(reader, start=1):
            if not line:
                continue
            if len(line) != 3:
                raise ValueError(f"{path}: row {r}: expected 'cell_id,x,y'")
            ids.append(line[0].strip())
            xy.append((_parse_float(line[1], r, 2, path), _parse_float(line[2], r, 3, path)))
    if not ids:
        raise ValueError(f"{path}: no coordinate rows")
    _require_unique(ids, "cell")
    return np.array(xy, dtype=np.float64).T, ids


def load_labels(path) -> dict[str, str]:
    """Read ``cell_id,label`` CSV into a mapping."""
    path = Path(path)
    out: dict[str, str] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for r, line in enumerate(reader, start=1):
            if not line:
                continue
            if len(line) != 2:
                raise ValueError(f"{path}: row {r}: expected 'cell_id,label'")
            cid = line[0].strip()
            if cid in out:
                raise ValueError(f"{path}: duplicate cell identifier: {cid!r}")
            out[cid] = line[1].strip()
    return out


def load_dataset(expr_path, coords_path, format: str = "dense-csv",
                 batch_path=None, types_path=None) -> ExpressionDataset:
    """Load and cross-validate expression, coordinates, and optional labels."""
    if format == "dense-csv":
        X, gene_names, cell_ids = load_dense_matrix(expr_path)
        named = True
    elif format == "sparse-triplet":
        X, gene_names, cell_ids = load_sparse_triplet(expr_path)
        named = False
    else:
        raise ValueError(f"unknown expression format {format!r}")
    if np.any(X < 0):
        bad = np.argwhere(X < 0)[0]
        raise ValueError(f"negative expression value at gene {bad[0]}, cell {bad[1]}")

    coords, coord_ids = load_coords(coords_path)
    if coords.shape[1] != X.shape[1]:
        raise ValueError(
            f"dimension mismatch: expression has {X.shape[1]} cells "
            f"but coordinates file has {coords.shape[1]} rows"
        )
    if named:
        if coord_ids != cell_ids:
            missing = [c for c in cell_ids if c not in set(coord_ids)]
            if missing:
                raise ValueError(f"coordinates missing cell ids, first: {missing[0]!r}")
            # same set, different order: align coordinates to expression order
            pos = {c: i for i, c in enumerate(coord_ids)}
            coords = coords[:, [pos[c] for c in cell_ids]]
    else:
        cell_ids = coord_ids

    def _resolve(path):
        if path is None:
            return None
        mapping = load_labels(path)
        missing = [c for c in cell_ids if c not in mapping]
        if missing:
            raise ValueError(f"label file {path} missing cell id {missing[0]!r}")
        return [mapping[c] for c in cell_ids]

    return ExpressionDataset(
        X=X,
        coords=coords,
        gene_names=gene_names,
        cell_ids=cell_ids,
        batch_labels=_resolve(batch_path),
        type_labels=_resolve(types_path),
        raw_counts=X.copy(),
    )


# ---------------------------------------------------------------------------
# writers (same schemas the loaders consume)
# ---------------------------------------------------------------------------

def write_dense_matrix(path, X: np.ndarray, gene_names, cell_ids) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gene_id", *cell_ids])
        for name, row in zip(gene_names, X):
            writer.writerow([name, *(format(v, ".17g") for v in row)])


def write_coords(path, coords: np.ndarray, cell_ids) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_id", "x", "y"])
        for cid, (x, y) in zip(cell_ids, coords.T):
            writer.writerow([cid, format(x, ".17g"), format(y, ".17g")])


def write_labels(path, cell_ids, labels, header: str = "label") -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_id", header])
        for cid, lab in zip(cell_ids, labels):
            writer.writerow([cid, lab])


def write_gene_list(path, gene_names) -> None:
    with open(path, "w") as fh:
        for name in gene_names:
            fh.write(f"{name}\n")
