"""Superpoint matching, instance hypothesis generation and dense refinement.

The flow is: similarity scores between fused superpoint features, region
growing of the best matches through fully intra-instance neighbourhoods,
expansion of each sparse match into masked dense patches, and Sinkhorn
optimal transport inside every patch pair.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .geom import PointCloud, SuperpointGraph, farthest_point_sampling, nearest_index

# value of a rejected neighbour in a neighbour mask
SENTINEL = -np.inf


@dataclass
class CorrespondenceSet:
    pairs: np.ndarray
    scores: np.ndarray
    level: str = "dense"

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.pairs) != len(self.scores):
            raise ValueError("pairs and scores must have equal length")
        if self.level not in ("superpoint", "dense"):
            raise ValueError(f"unknown correspondence level {self.level!r}")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def source(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def target(self) -> np.ndarray:
        return self.pairs[:, 1]

    def subset(self, index) -> "CorrespondenceSet":
        return CorrespondenceSet(self.pairs[index], self.scores[index], self.level)

    def check_bounds(self, n_source: int, n_target: int) -> None:
        if len(self) and (self.pairs.min() < 0 or self.source.max() >= n_source
                          or self.target.max() >= n_target):
            raise ValueError("correspondence index out of range")

    @classmethod
    def concatenate(cls, sets, level: str = "dense") -> "CorrespondenceSet":
        sets = list(sets)
        if not sets:
            return cls(np.zeros((0, 2), dtype=np.int64), np.zeros(0), level)
        return cls(np.concatenate([s.pairs for s in sets]), np.concatenate([s.scores for s in sets]), level)


@dataclass
class CandidateInstance:
    """A group of sparse matches whose masked target patches overlap.

    ``patches[i]`` holds the dense (source, target) point indices gathered for
    ``patch_pairs[i]``.
    """

    patch_pairs: list[tuple[int, int]]
    patches: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    dense: Optional[CorrespondenceSet] = None

    def __post_init__(self):
        if not self.patch_pairs:
            raise ValueError("a candidate instance needs at least one patch pair")

    def target_points(self) -> np.ndarray:
        return np.unique(np.concatenate([t for _, t in self.patches]))

    def source_points(self) -> np.ndarray:
        return np.unique(np.concatenate([s for s, _ in self.patches]))


def write_correspondence_csv(path, sets: list[tuple[int, CorrespondenceSet]]) -> None:
    """Rows of ``source_idx,target_idx,score,level,candidate_id``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source_idx", "target_idx", "score", "level", "candidate_id"])
        for cid, cs in sets:
            for (s, t), sc in zip(cs.pairs.tolist(), cs.scores.tolist()):
                w.writerow([s, t, repr(sc), cs.level, cid])


# ---------------------------------------------------------------------------
# Sparse matching


def similarity_scores(v_p: np.ndarray, v_q: np.ndarray) -> np.ndarray:
    """``S[i, j] = exp(-||v_p[i] - v_q[j]||)``."""
    v_p = np.asarray(v_p, dtype=np.float64)
    v_q = np.asarray(v_q, dtype=np.float64)
    if v_p.shape[1] != v_q.shape[1]:
        raise ValueError("feature dimensions differ")
    d2 = (v_p ** 2).sum(1)[:, None] + (v_q ** 2).sum(1)[None, :] - 2.0 * v_p @ v_q.T
    return np.exp(-np.sqrt(np.maximum(d2, 0.0)))


def top_pairs(S: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """The ``n`` highest-scoring (row, col) entries, ties to the lower flat index."""
    flat = S.reshape(-1)
    n = min(n, flat.size)
    if n <= 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    kth = np.partition(flat, flat.size - n)[flat.size - n]
    cand = np.flatnonzero(flat >= kth)
    cand = cand[np.lexsort((cand, -flat[cand]))][:n]
    rows, cols = np.divmod(cand, S.shape[1])
    return rows.astype(np.int64), cols.astype(np.int64)


def instance_hypothesis_generation(S: np.ndarray, mask_values: np.ndarray, graph_q: SuperpointGraph,
                                   n_l: int = 128) -> CorrespondenceSet:
    """Region-grown, uniformly spread superpoint correspondences.

    Seeds are the top ``n_l`` entries of ``S``. From each unvisited seed target,
    growth proceeds through every node whose whole mask row is kept (all ``k``
    neighbours intra-instance), pushing that node's neighbours. Grown targets
    are paired with their best-scoring source. When fewer than ``n_l`` targets
    were grown the seeds are returned unchanged; otherwise the grown set is
    thinned back to ``n_l`` by farthest point sampling over target positions.
    """
    if n_l < 1:
        raise ValueError("n_l must be >= 1")
    S = np.asarray(S, dtype=np.float64)
    mask_values = np.asarray(mask_values)
    if S.shape[1] != len(graph_q) or mask_values.shape != graph_q.neighbor_index.shape:
        raise ValueError("score matrix, mask and target graph disagree in shape")
    seed_p, seed_q = top_pairs(S, n_l)

    fully_kept = np.all(mask_values == 0, axis=1)
    visited = np.zeros(len(graph_q), dtype=bool)
    expanded = np.zeros(len(graph_q), dtype=bool)
    grown: list[int] = []
    for q in seed_q.tolist():
        if visited[q]:
            continue
        visited[q] = True
        stack = [q]
        while stack:
            d = stack.pop()
            if expanded[d] or not fully_kept[d]:
                continue
            expanded[d] = True
            visited[d] = True
            grown.append(d)
            stack.extend(graph_q.neighbor_index[d].tolist())

    l_q = np.unique(np.asarray(grown, dtype=np.int64))
    if len(l_q) < n_l:
        return CorrespondenceSet(np.stack([seed_p, seed_q], 1), S[seed_p, seed_q], "superpoint")
    l_p = np.argmax(S[:, l_q], axis=0)
    pick = farthest_point_sampling(graph_q.superpoints.points[l_q], n_l)
    l_p, l_q = l_p[pick], l_q[pick]
    return CorrespondenceSet(np.stack([l_p, l_q], 1), S[l_p, l_q], "superpoint")


# ---------------------------------------------------------------------------
# Dense expansion


def point_to_node_partition(cloud: PointCloud, graph: SuperpointGraph) -> np.ndarray:
    """Nearest superpoint for every dense point (lower index on ties)."""
    return nearest_index(cloud.points, graph.superpoints.points)


def same_instance(cls_center, cls_neighbor, cls_point) -> bool:
    """Dense-patch admission: all three instance classes must agree."""
    return cls_center == cls_neighbor == cls_point


def _members(assignment: np.ndarray, n_nodes: int) -> list[np.ndarray]:
    order = np.argsort(assignment, kind="stable")
    bounds = np.searchsorted(assignment[order], np.arange(n_nodes + 1))
    return [order[bounds[i]:bounds[i + 1]] for i in range(n_nodes)]


def expand_to_dense(sparse: CorrespondenceSet, mask_values: np.ndarray,
                    graph_p: SuperpointGraph, graph_q: SuperpointGraph,
                    node_labels_q: Optional[np.ndarray] = None,
                    point_labels_q: Optional[np.ndarray] = None,
                    diagnostics: Optional[Counter] = None) -> list[CandidateInstance]:
    """Gather masked neighbour patches per sparse match and group overlapping ones.

    The target patch of match ``(i, j)`` keeps the points of ``j`` and of every
    neighbour of ``j`` whose mask entry is kept. When instance classes are
    supplied, a point additionally needs its own class to equal its owning
    superpoint's. Matches sharing any target point end up in the same candidate.
    """
    if sparse.level != "superpoint":
        raise ValueError("expand_to_dense expects superpoint-level correspondences")
    mem_p = _members(graph_p.assignment, len(graph_p))
    mem_q = _members(graph_q.assignment, len(graph_q))
    kept_pairs, patches = [], []
    for i, j in sparse.pairs.tolist():
        src_nodes = np.concatenate([[i], graph_p.neighbor_index[i]])
        keep = mask_values[j] == 0
        tgt_nodes = np.concatenate([[j], graph_q.neighbor_index[j][keep]])
        src = np.concatenate([mem_p[n] for n in src_nodes])
        tgt = np.concatenate([mem_q[n] for n in tgt_nodes])
        if point_labels_q is not None and node_labels_q is not None:
            owner = graph_q.assignment[tgt]
            ok = (point_labels_q[tgt] == node_labels_q[owner]) & (node_labels_q[owner] == node_labels_q[j])
            tgt = tgt[ok]
        if len(tgt) == 0 or len(src) == 0:
            if diagnostics is not None:
                diagnostics["empty_patches"] += 1
            continue
        kept_pairs.append((i, j))
        patches.append((src, tgt))
    if not kept_pairs:
        return []

    # union-find via connected components of the bipartite (match, target point) graph
    n_m = len(kept_pairs)
    rows = np.concatenate([np.full(len(t), m) for m, (_, t) in enumerate(patches)])
    cols = np.concatenate([t for _, t in patches])
    pts, cols = np.unique(cols, return_inverse=True)
    n_pts = len(pts)
    adj = coo_matrix((np.ones(len(rows)), (rows, n_m + cols.reshape(-1))), shape=(n_m + n_pts,) * 2)
    _, comp = connected_components(adj, directed=False)
    comp = comp[:n_m]

    groups: dict[int, list[int]] = {}
    for m, c in enumerate(comp.tolist()):
        groups.setdefault(c, []).append(m)
    return [
        CandidateInstance([kept_pairs[m] for m in ms], [patches[m] for m in ms])
        for ms in groups.values()
    ]


# ---------------------------------------------------------------------------
# Optimal transport


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return (np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m).squeeze(axis)


def sinkhorn(scores: np.ndarray, iterations: int = 100, slack: bool = True,
             slack_score: float = 0.0, tol: float = 1e-9, history: Optional[list] = None):
    """Sinkhorn normalisation, in the log domain whenever plain exponentials could underflow.

    Without slack every row sums to one and every column to ``n/m``. With slack,
    one extra row and column (filled with ``slack_score``) absorb unmatched mass:
    real rows and columns sum to one, the slack row to ``m`` and the slack
    column to ``n``. Returns ``(assignment, converged)``. ``history`` collects
    the total-variation gap of the row marginals after each iteration.
    """
    Z = np.asarray(scores, dtype=np.float64)
    n, m = Z.shape
    if slack:
        Z = np.pad(Z, ((0, 1), (0, 1)), constant_values=slack_score)
        log_mu = np.log(np.concatenate([np.ones(n), [m]]))
        log_nu = np.log(np.concatenate([np.ones(m), [n]]))
    else:
        log_mu = np.zeros(n)
        log_nu = np.full(m, np.log(n / m))
    mu, nu = np.exp(log_mu), np.exp(log_nu)
    top = np.max(Z)
    # exp domain is exact when no row or column sits far below the global max
    if np.isfinite(top) and min(Z.max(axis=1).min(), Z.max(axis=0).min()) >= top - 50.0:
        K = np.exp(Z - top)
        b = np.ones(len(nu))
        Kb = K @ b
        converged = False
        for _ in range(iterations):
            a = mu / Kb
            b = nu / (a @ K)
            Kb = K @ b
            gap = 0.5 * np.abs(a * Kb - mu).sum()
            if history is not None:
                history.append(gap)
            if gap <= tol:
                converged = True
                break
        return a[:, None] * K * b[None, :], converged

    v = np.zeros(len(log_nu))
    r = _lse(Z, axis=1)
    converged = False
    for _ in range(iterations):
        u = log_mu - r
        v = log_nu - _lse(Z + u[:, None], axis=0)
        r = _lse(Z + v[None, :], axis=1)
        gap = 0.5 * np.abs(np.exp(u + r) - mu).sum()
        if history is not None:
            history.append(gap)
        if gap <= tol:
            converged = True
            break
    return np.exp(Z + u[:, None] + v[None, :]), converged


def mutual_matches(P: np.ndarray, threshold: float = 0.1):
    """(row, col, prob) triples that are both row and column maxima above ``threshold``."""
    if P.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0)
    r_best = np.argmax(P, axis=1)
    c_best = np.argmax(P, axis=0)
    rows = np.arange(P.shape[0])
    ok = (c_best[r_best] == rows) & (P[rows, r_best] >= threshold)
    return rows[ok], r_best[ok], P[rows[ok], r_best[ok]]


def optimal_transport_match(candidate: CandidateInstance, feats_p: np.ndarray, feats_q: np.ndarray,
                            iterations: int = 100, slack: bool = True, temperature: float = 1.0,
                            slack_score: float = -1.0, threshold: float = 0.1,
                            diagnostics: Optional[Counter] = None) -> CorrespondenceSet:
    """Dense matches for every patch pair of a candidate instance.

    Log-scores are ``-||f_p - f_q|| / temperature``. Duplicate pairs produced by
    overlapping patches keep their highest probability.
    """
    found = []
    for src, tgt in candidate.patches:
        fp, fq = feats_p[src], feats_q[tgt]
        d2 = (fp ** 2).sum(1)[:, None] + (fq ** 2).sum(1)[None, :] - 2.0 * fp @ fq.T
        logits = -np.sqrt(np.maximum(d2, 0.0)) / temperature
        P, ok = sinkhorn(logits, iterations, slack, slack_score)
        if not ok and diagnostics is not None:
            diagnostics["sinkhorn_not_converged"] += 1
        core = P[: len(src), : len(tgt)]
        r, c, prob = mutual_matches(core, threshold)
        found.append(CorrespondenceSet(np.stack([src[r], tgt[c]], 1), prob))
    out = CorrespondenceSet.concatenate(found)
    if len(out) == 0:
        return out
    order = np.lexsort((-out.scores, out.pairs[:, 1], out.pairs[:, 0]))
    pairs, scores = out.pairs[order], out.scores[order]
    first = np.ones(len(pairs), dtype=bool)
    first[1:] = np.any(pairs[1:] != pairs[:-1], axis=1)
    return CorrespondenceSet(pairs[first], scores[first])
