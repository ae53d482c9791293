"""Rigid solving, instance filtering and the sequential RANSAC baseline."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .geom import PointCloud, RigidTransform
from .matching import CorrespondenceSet

STRATEGIES = ("point-to-point", "point-to-plane")


class DegenerateCorrespondences(ValueError):
    pass


def _pts(x) -> np.ndarray:
    return x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)


@dataclass
class InstanceEstimate:
    transform: RigidTransform
    inliers: CorrespondenceSet
    overlap: float

    def __post_init__(self):
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError("overlap must lie in [0, 1]")


@dataclass
class RegistrationResult:
    instances: list[InstanceEstimate] = field(default_factory=list)
    diagnostics: Counter = field(default_factory=Counter)

    @property
    def transforms(self) -> list[RigidTransform]:
        return [inst.transform for inst in self.instances]

    def to_json(self) -> dict:
        return {
            "instances": [
                {
                    "rotation": inst.transform.rotation.reshape(-1).tolist(),
                    "translation": inst.transform.translation.tolist(),
                    "overlap": float(inst.overlap),
                    "inlier_count": len(inst.inliers),
                }
                for inst in self.instances
            ],
            "diagnostics": dict(sorted(self.diagnostics.items())),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RegistrationResult":
        try:
            instances = [
                InstanceEstimate(
                    RigidTransform(np.reshape(d["rotation"], (3, 3)), d["translation"]),
                    CorrespondenceSet(np.zeros((int(d.get("inlier_count", 0)), 2)),
                                      np.zeros(int(d.get("inlier_count", 0)))),
                    float(d["overlap"]),
                )
                for d in doc["instances"]
            ]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed results file: {exc}") from exc
        return cls(instances, Counter(doc.get("diagnostics", {})))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n"


# ---------------------------------------------------------------------------
# Solvers and scores


def solve_weighted_svd(pairs: CorrespondenceSet, source, target, weights=None) -> RigidTransform:
    """Minimiser of ``sum_i w_i ||q_i - R p_i - t||^2`` over SE(3)."""
    src = _pts(source)[pairs.source]
    tgt = _pts(target)[pairs.target]
    return _kabsch(src, tgt, weights)


def _kabsch(src: np.ndarray, tgt: np.ndarray, weights=None) -> RigidTransform:
    if len(src) < 3:
        raise DegenerateCorrespondences("degenerate correspondence set")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if np.any(w < 0) or not w.sum() > 0:
        raise DegenerateCorrespondences("degenerate correspondence set")
    w = w / w.sum()
    cs = w @ src
    ct = w @ tgt
    H = (src - cs).T @ ((tgt - ct) * w[:, None])
    U, s, Vt = np.linalg.svd(H)
    scale = max(np.abs(src - cs).max(), np.abs(tgt - ct).max(), 1e-300)
    if s[1] <= 1e-12 * max(s[0], scale * scale):
        raise DegenerateCorrespondences("degenerate correspondence set")
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidTransform(R, ct - R @ cs)


def weighted_objective(T: RigidTransform, src: np.ndarray, tgt: np.ndarray, weights=None) -> float:
    r = ((tgt - T.apply(src)) ** 2).sum(1)
    if weights is None:
        return float(r.mean())
    w = np.asarray(weights, dtype=np.float64)
    return float((w * r).sum() / w.sum())


def add_similarity(T_i: RigidTransform, T_j: RigidTransform, model, r_norm: float) -> float:
    """``max(0, 1 - ADD(T_i, T_j) / r_norm)`` with ADD the mean model-point displacement."""
    pts = _pts(model)
    if len(pts) == 0 or not r_norm > 0:
        raise ValueError("need a non-empty model and r_norm > 0")
    add = np.linalg.norm(T_i.apply(pts) - T_j.apply(pts), axis=1).mean()
    return max(0.0, 1.0 - float(add) / r_norm)


def overlap_ratio(T: RigidTransform, source, instance_target, d_op: float,
                  strategy: str = "point-to-point", tree: Optional[cKDTree] = None) -> float:
    """Fraction of transformed source points within ``d_op`` of the instance points.

    ``point-to-point`` uses the nearest-point distance; ``point-to-plane``
    projects the nearest-point residual onto that target point's normal.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    src = _pts(source)
    tgt = _pts(instance_target)
    if len(src) == 0 or len(tgt) == 0:
        raise ValueError("overlap needs non-empty clouds")
    normals = instance_target.normals if isinstance(instance_target, PointCloud) else None
    if strategy == "point-to-plane" and normals is None:
        raise ValueError("point-to-plane overlap requires target normals")
    moved = T.apply(src)
    tree = tree or cKDTree(tgt)
    if strategy == "point-to-plane":
        _, nn = tree.query(moved)
        dist = np.abs(((moved - tgt[nn]) * normals[nn]).sum(1))
    else:
        # bounded search prunes early; misses come back as inf
        dist, _ = tree.query(moved, distance_upper_bound=np.nextafter(d_op, np.inf))
    return float(np.count_nonzero(dist <= d_op)) / len(src)


# ---------------------------------------------------------------------------
# Instance filtering and optimisation


@dataclass
class FilterConfig:
    theta: float = 0.8
    r_norm: float = 1.0
    d_op: float = 0.05
    strategy: str = "point-to-plane"
    max_iter: int = 20
    overlap_floor: float = 0.3
    max_rounds: int = 5

    def __post_init__(self):
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("theta must lie in (0, 1]")
        if not (self.r_norm > 0 and self.d_op > 0):
            raise ValueError("r_norm and d_op must be positive")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")


@dataclass
class _Hyp:
    transform: RigidTransform
    corrs: CorrespondenceSet
    overlap: float = 0.0
    order: int = 0


def _residuals(T: RigidTransform, corrs: CorrespondenceSet, src: np.ndarray, tgt: np.ndarray) -> np.ndarray:
    return np.linalg.norm(tgt[corrs.target] - T.apply(src[corrs.source]), axis=1)


def refine_inliers(T: RigidTransform, corrs: CorrespondenceSet, source, target, d_op: float,
                   max_iter: int = 20, history: Optional[list] = None):
    """Alternate inlier reselection (residual <= d_op) and weighted re-solving.

    A re-solve is only accepted when it does not shrink the inlier set, so the
    inlier count never decreases. Returns ``(transform, inlier_set)``.
    """
    src, tgt = _pts(source), _pts(target)
    weights = np.clip(corrs.scores, 1e-6, None)
    inl = _residuals(T, corrs, src, tgt) <= d_op
    if history is not None:
        history.append(int(inl.sum()))
    for _ in range(max_iter):
        if inl.sum() < 3:
            break
        try:
            T_new = _kabsch(src[corrs.source[inl]], tgt[corrs.target[inl]], weights[inl])
        except DegenerateCorrespondences:
            break
        new = _residuals(T_new, corrs, src, tgt) <= d_op
        if new.sum() < inl.sum():
            break
        T = T_new
        if np.array_equal(new, inl):
            break
        inl = new
        if history is not None:
            history.append(int(inl.sum()))
    return T, corrs.subset(np.flatnonzero(inl))


def _merge(hyps: list[_Hyp], add_points: np.ndarray, cfg: FilterConfig) -> tuple[list[_Hyp], bool]:
    """Greedy duplicate suppression: best overlap first, later similar ones fold in."""
    ranked = sorted(hyps, key=lambda h: (-h.overlap, h.order))
    kept: list[_Hyp] = []
    merged = False
    for h in ranked:
        for k in kept:
            if add_similarity(k.transform, h.transform, add_points, cfg.r_norm) >= cfg.theta:
                k.corrs = CorrespondenceSet.concatenate([k.corrs, h.corrs])
                merged = True
                break
        else:
            kept.append(h)
    for k in kept:
        k.corrs = _unique(k.corrs)
    return kept, merged


def _unique(c: CorrespondenceSet) -> CorrespondenceSet:
    if len(c) == 0:
        return c
    order = np.lexsort((-c.scores, c.pairs[:, 1], c.pairs[:, 0]))
    pairs, scores = c.pairs[order], c.scores[order]
    first = np.ones(len(pairs), dtype=bool)
    first[1:] = np.any(pairs[1:] != pairs[:-1], axis=1)
    return CorrespondenceSet(pairs[first], scores[first], c.level)


def filter_and_optimize(candidates, source, target, cfg: FilterConfig,
                        add_points=None, overlap_target=None,
                        history: Optional[dict] = None) -> RegistrationResult:
    """Merge duplicate hypotheses, rank by overlap, refine and prune.

    ``candidates`` is a sequence of ``(transform, correspondences)``. Overlap is
    measured between the transformed ``source`` and ``overlap_target``
    (defaults to ``target``). ADD similarity is evaluated on ``add_points``
    (defaults to the source points). Merging and refinement repeat until a
    round produces no further merges.
    """
    src, tgt = _pts(source), _pts(target)
    add_points = src if add_points is None else _pts(add_points)
    overlap_target = target if overlap_target is None else overlap_target
    tree = cKDTree(_pts(overlap_target))
    result = RegistrationResult()
    if not len(candidates):
        return result

    def _overlap(T):
        return overlap_ratio(T, src, overlap_target, cfg.d_op, cfg.strategy, tree=tree)

    hyps = [_Hyp(T, c, _overlap(T), i) for i, (T, c) in enumerate(candidates)]
    result.diagnostics["hypotheses"] = len(hyps)
    for round_ in range(cfg.max_rounds):
        hyps, merged = _merge(hyps, add_points, cfg)
        if round_ > 0 and not merged:
            break
        refined = []
        for h in hyps:
            hist = [] if history is not None else None
            T, inl = refine_inliers(h.transform, h.corrs, src, tgt, cfg.d_op, cfg.max_iter, hist)
            if history is not None:
                history.setdefault(h.order, []).append(hist)
            if len(inl) < 3:
                result.diagnostics["dropped_few_inliers"] += 1
                continue
            h.transform, h.overlap = T, _overlap(T)
            if h.overlap < cfg.overlap_floor:
                result.diagnostics["dropped_low_overlap"] += 1
                continue
            h.inliers = inl
            refined.append(h)
        hyps = refined
        if not hyps:
            break
    hyps.sort(key=lambda h: (-h.overlap, h.order))
    result.instances = [InstanceEstimate(h.transform, h.inliers, h.overlap) for h in hyps]
    return result


# ---------------------------------------------------------------------------
# Baseline


@dataclass
class RansacConfig:
    d_op: float = 0.05
    trials: int = 1000
    min_inliers: int = 30
    max_instances: int = 20
    seed: int = 0
    strategy: str = "point-to-point"
    batch: int = 100


def _batched_kabsch(src: np.ndarray, tgt: np.ndarray):
    """Unweighted Kabsch over a batch of ``(B, m, 3)`` samples; ``ok`` flags non-degenerate ones."""
    cs = src.mean(1, keepdims=True)
    ct = tgt.mean(1, keepdims=True)
    H = np.einsum("bni,bnj->bij", src - cs, tgt - ct)
    U, s, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, 1, 2)
    d = np.sign(np.linalg.det(V @ np.swapaxes(U, 1, 2)))
    d[d == 0] = 1.0
    D = np.zeros_like(H)
    D[:, 0, 0] = D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = V @ D @ np.swapaxes(U, 1, 2)
    t = ct[:, 0] - np.einsum("bij,bj->bi", R, cs[:, 0])
    spread = np.abs(src - cs).max(axis=(1, 2))
    ok = s[:, 1] > 1e-9 * np.maximum(spread ** 2, 1e-300)
    return R, t, ok


def sequential_ransac(corrs: CorrespondenceSet, source, target, cfg: RansacConfig,
                      overlap_target=None) -> RegistrationResult:
    """Repeated single-model RANSAC, removing each accepted instance's inliers."""
    src, tgt = _pts(source), _pts(target)
    overlap_target = target if overlap_target is None else overlap_target
    tree = cKDTree(_pts(overlap_target))
    rng = np.random.default_rng(cfg.seed)
    result = RegistrationResult()
    remaining = np.arange(len(corrs))
    ps, qs = src[corrs.source], tgt[corrs.target]
    while len(remaining) >= 3 and len(result.instances) < cfg.max_instances:
        samples = np.stack([rng.choice(len(remaining), 3, replace=False) for _ in range(cfg.trials)])
        best_count, best = -1, None
        for b in range(0, cfg.trials, cfg.batch):
            idx = remaining[samples[b:b + cfg.batch]]
            R, t, ok = _batched_kabsch(ps[idx], qs[idx])
            moved = np.einsum("bij,nj->bni", R, ps[remaining]) + t[:, None, :]
            counts = (((moved - qs[remaining][None]) ** 2).sum(2) <= cfg.d_op ** 2).sum(1)
            counts[~ok] = -1
            i = int(np.argmax(counts))
            if counts[i] > best_count:
                best_count, best = int(counts[i]), RigidTransform(R[i], t[i])
        if best is None or best_count < cfg.min_inliers:
            break
        sub = corrs.subset(remaining)
        inl = np.linalg.norm(qs[remaining] - best.apply(ps[remaining]), axis=1) <= cfg.d_op
        ov = overlap_ratio(best, src, overlap_target, cfg.d_op, cfg.strategy, tree=tree)
        result.instances.append(InstanceEstimate(best, sub.subset(np.flatnonzero(inl)), ov))
        remaining = remaining[~inl]
    result.diagnostics["hypotheses"] = len(result.instances)
    return result
