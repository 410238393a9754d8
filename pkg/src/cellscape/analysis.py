"""Downstream domain analyses: transition connectivity, rank-sum marker
genes, cell-type composition and condition shifts, and gene-set enrichment
against user-supplied collections."""

from __future__ import annotations

import csv
import itertools
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import hypergeom, rankdata

from .cluster import DomainLabels
from .spatial_graph import SpatialGraph


@dataclass
class TransitionGraph:
    """Coarse domain-connectivity graph (symmetric, zero diagonal, in [0, 1])."""

    domains: list
    connectivity: np.ndarray


@dataclass
class CompositionMatrix:
    """Domain x cell-type proportions with raw counts and tissue-wide totals."""

    domains: list
    types: list
    N: np.ndarray        # (D, T) counts
    P: np.ndarray        # (D, T), rows sum to 1
    P_all: np.ndarray    # (T,), sums to 1


@dataclass
class GeneRecord:
    gene: str
    statistic: float
    p_value: float
    adj_p_value: float
    log2_fold_change: float
    fraction_expressing: float


@dataclass
class EnrichmentRecord:
    set_name: str
    overlap: int
    set_size: int
    p_value: float
    adj_p_value: float


def _label_array(labels) -> np.ndarray:
    if isinstance(labels, DomainLabels):
        return np.asarray(labels.labels)
    return np.asarray(labels)


def benjamini_hochberg(p_values) -> np.ndarray:
    """Step-up FDR adjustment; returns adjusted p-values in input order."""
    p = np.asarray(p_values, dtype=np.float64)
    m = p.size
    order = np.argsort(p, kind="stable")
    adjusted = np.empty(m)
    running = 1.0
    for rank_from_end, idx in enumerate(order[::-1]):
        rank = m - rank_from_end
        running = min(running, p[idx] * m / rank)
        adjusted[idx] = running
    return np.clip(adjusted, 0.0, 1.0)


# ---------------------------------------------------------------------------
# domain transition graph
# ---------------------------------------------------------------------------

def transition_graph(labels, g: SpatialGraph) -> TransitionGraph:
    """Observed/expected inter-domain edge ratio, normalized to [0, 1].

    For domains a, b the expected cross count under random edge placement is
    d_a * d_b / (2|E|) with d the summed node degrees; the ratio matrix is
    scaled by its maximum.
    """
    lab = _label_array(labels)
    if lab.shape[0] != g.n_nodes:
        raise ValueError(f"{lab.shape[0]} labels for {g.n_nodes} graph nodes")
    domains, dense = np.unique(lab, return_inverse=True)
    if isinstance(labels, DomainLabels) and labels.n_domains > domains.size:
        raise ValueError(
            f"{labels.n_domains - domains.size} declared domain(s) have no cells"
        )
    D = domains.size
    conn = np.zeros((D, D))
    if D == 1 or g.n_edges == 0:
        return TransitionGraph(domains=domains.tolist(), connectivity=conn)

    deg = g.degrees().astype(np.float64)
    d_sum = np.zeros(D)
    np.add.at(d_sum, dense, deg)
    m = float(g.n_edges)
    observed = np.zeros((D, D))
    ea, eb = dense[g.edges[:, 0]], dense[g.edges[:, 1]]
    np.add.at(observed, (ea, eb), 1.0)
    observed = observed + observed.T  # symmetric cross counts

    expected = np.outer(d_sum, d_sum) / (2.0 * m)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(expected > 0, observed / expected, 0.0)
    np.fill_diagonal(ratio, 0.0)
    peak = ratio.max()
    if peak > 0:
        conn = np.clip(ratio / peak, 0.0, 1.0)
    return TransitionGraph(domains=domains.tolist(), connectivity=conn)


# ---------------------------------------------------------------------------
# marker genes
# ---------------------------------------------------------------------------

def _exact_rank_sum_two_sided(ranks: np.ndarray, n1: int, u_obs: float) -> float:
    total = lower = upper = 0
    offset = n1 * (n1 + 1) / 2.0
    for combo in itertools.combinations(range(ranks.size), n1):
        u = ranks[list(combo)].sum() - offset
        total += 1
        if u <= u_obs + 1e-12:
            lower += 1
        if u >= u_obs - 1e-12:
            upper += 1
    return min(1.0, 2.0 * min(lower / total, upper / total))


def _normal_two_sided(u: float, n1: int, n2: int, tie_term: float) -> float:
    n = n1 + n2
    mu = n1 * n2 / 2.0
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if var <= 0:
        return 1.0
    diff = u - mu
    if diff != 0.0:
        diff -= 0.5 * math.copysign(1.0, diff)  # continuity correction
    z = diff / math.sqrt(var)
    return min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))


def wilcoxon_dge(X: np.ndarray, labels, domain, gene_names=None,
                 pseudocount: float = 1e-9) -> list[GeneRecord]:
    """Per-gene rank-sum test of the domain against all other cells.

    Midrank ties; exact enumeration when both group sizes are at most 8,
    otherwise the tie-corrected normal approximation with continuity
    correction. Returns records sorted by adjusted p then descending |lfc|.
    """
    X = np.asarray(X, dtype=np.float64)
    lab = _label_array(labels)
    if lab.shape[0] != X.shape[1]:
        raise ValueError(f"{lab.shape[0]} labels for {X.shape[1]} cells")
    in_group = lab == domain
    n1 = int(in_group.sum())
    n2 = int((~in_group).sum())
    if n1 == 0:
        raise ValueError(f"domain {domain!r} has no cells")
    if n2 == 0:
        raise ValueError(f"domain {domain!r} covers every cell; no comparison group")
    names = gene_names if gene_names is not None else [f"g{i}" for i in range(X.shape[0])]
    exact = max(n1, n2) <= 8

    stats = np.empty(X.shape[0])
    pvals = np.empty(X.shape[0])
    lfcs = np.empty(X.shape[0])
    fracs = np.empty(X.shape[0])
    for gi, row in enumerate(X):
        ranks = rankdata(row, method="average")
        u = ranks[in_group].sum() - n1 * (n1 + 1) / 2.0
        if row.min() == row.max():
            p = 1.0
        elif exact:
            p = _exact_rank_sum_two_sided(ranks, n1, u)
        else:
            _, tie_counts = np.unique(row, return_counts=True)
            tie_term = float((tie_counts.astype(np.float64) ** 3 - tie_counts).sum())
            p = _normal_two_sided(u, n1, n2, tie_term)
        stats[gi] = u
        pvals[gi] = p
        mean_in = max(row[in_group].mean(), 0.0)
        mean_out = max(row[~in_group].mean(), 0.0)
        lfcs[gi] = math.log2((mean_in + pseudocount) / (mean_out + pseudocount))
        fracs[gi] = float((row[in_group] > 0).mean())

    adj = benjamini_hochberg(pvals)
    records = [
        GeneRecord(names[gi], stats[gi], pvals[gi], adj[gi], lfcs[gi], fracs[gi])
        for gi in range(X.shape[0])
    ]
    records.sort(key=lambda rec: (rec.adj_p_value, -abs(rec.log2_fold_change)))
    return records


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------

def composition(labels, type_labels) -> CompositionMatrix:
    """Domain-wise cell-type proportions P plus tissue-wide proportions P_all."""
    lab = _label_array(labels)
    types = np.asarray(type_labels)
    if lab.shape[0] != types.shape[0]:
        raise ValueError(f"{lab.shape[0]} domain labels vs {types.shape[0]} type labels")
    domain_ids, di = np.unique(lab, return_inverse=True)
    type_ids, ti = np.unique(types, return_inverse=True)
    N = np.zeros((domain_ids.size, type_ids.size), dtype=np.int64)
    np.add.at(N, (di, ti), 1)
    if isinstance(labels, DomainLabels) and labels.n_domains > domain_ids.size:
        warnings.warn(
            f"{labels.n_domains - domain_ids.size} empty domain(s) dropped from composition",
            RuntimeWarning,
        )
    row_tot = N.sum(axis=1, keepdims=True)
    P = N / row_tot
    P_all = N.sum(axis=0) / N.sum()
    return CompositionMatrix(
        domains=domain_ids.tolist(), types=type_ids.tolist(), N=N, P=P, P_all=P_all
    )


def composition_shift(a: CompositionMatrix, b: CompositionMatrix) -> np.ndarray:
    """Elementwise proportion change between two conditions (a minus b)."""
    if a.domains != b.domains or a.types != b.types:
        missing = sorted(
            set(map(str, a.domains)) ^ set(map(str, b.domains))
        ) + sorted(set(map(str, a.types)) ^ set(map(str, b.types)))
        raise ValueError(f"composition axes differ; unmatched ids: {missing}")
    return a.P - b.P


# ---------------------------------------------------------------------------
# gene-set enrichment
# ---------------------------------------------------------------------------

def geneset_enrichment(markers, universe, gene_sets: dict) -> list[EnrichmentRecord]:
    """One-sided hypergeometric over-representation of markers in each set.

    Sets are intersected with the universe before testing; p-values are
    BH-adjusted across sets.
    """
    universe = set(universe)
    if not universe:
        raise ValueError("empty gene universe")
    markers = set(markers)
    stray = markers - universe
    if stray:
        raise ValueError(f"marker gene(s) outside the universe, first: {sorted(stray)[0]!r}")
    M = len(universe)
    n_draw = len(markers)
    records = []
    pvals = []
    for name, genes in gene_sets.items():
        members = set(genes) & universe
        k = len(members & markers)
        p = float(hypergeom.sf(k - 1, M, len(members), n_draw)) if members else 1.0
        records.append((name, k, len(members)))
        pvals.append(min(1.0, p))
    adj = benjamini_hochberg(pvals) if pvals else np.empty(0)
    out = [
        EnrichmentRecord(name, k, size, p, a)
        for (name, k, size), p, a in zip(records, pvals, adj)
    ]
    out.sort(key=lambda rec: (rec.adj_p_value, rec.p_value, rec.set_name))
    return out


def read_gmt(path) -> dict[str, list[str]]:
    """GMT gene-set file: ``set_name<TAB>description<TAB>gene...`` per line."""
    sets: dict[str, list[str]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) < 3:
                raise ValueError(f"{path}: line {lineno}: expected name, description, genes")
            sets[fields[0]] = [g for g in fields[2:] if g]
    return sets


# ---------------------------------------------------------------------------
# writers
# ---------------------------------------------------------------------------

def write_marker_table(path, records: list[GeneRecord], domain) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["domain", "gene", "statistic", "p_value", "adj_p_value",
             "log2_fold_change", "fraction_expressing"]
        )
        for rec in records:
            writer.writerow(
                [domain, rec.gene, rec.statistic, rec.p_value, rec.adj_p_value,
                 rec.log2_fold_change, rec.fraction_expressing]
            )


def write_enrichment_table(path, records: list[EnrichmentRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["set_name", "overlap", "set_size", "p_value", "adj_p_value"])
        for rec in records:
            writer.writerow([rec.set_name, rec.overlap, rec.set_size,
                             rec.p_value, rec.adj_p_value])


def write_transition_graph(path, tg: TransitionGraph) -> None:
    with open(path, "w") as fh:
        fh.write(f"%n {len(tg.domains)}\n")
        D = len(tg.domains)
        for a in range(D):
            for b in range(a + 1, D):
                fh.write(f"{tg.domains[a]} {tg.domains[b]} "
                         f"{format(tg.connectivity[a, b], '.17g')}\n")


def write_composition(path, comp: CompositionMatrix) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["domain", *map(str, comp.types)])
        for domain, row in zip(comp.domains, comp.P):
            writer.writerow([domain, *(format(v, ".17g") for v in row)])
        writer.writerow(["all", *(format(v, ".17g") for v in comp.P_all)])
