"""End-to-end multi-instance registration and its configuration.

Feature providers turn a (model, scene) pair into superpoint features, a target
neighbour mask and dense per-point features. Everything downstream of them is
shared between modes.
"""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import yaml
from scipy.spatial import cKDTree

from . import geom
from .geom import PointCloud, SuperpointGraph
from .ift import MaskGeometry, TransformerParams, instance_focused_transformer
from .matching import (
    CandidateInstance,
    CorrespondenceSet,
    expand_to_dense,
    instance_hypothesis_generation,
    optimal_transport_match,
    similarity_scores,
)
from .metrics import PROFILES
from .pose import (
    STRATEGIES,
    DegenerateCorrespondences,
    FilterConfig,
    RansacConfig,
    RegistrationResult,
    filter_and_optimize,
    sequential_ransac,
    solve_weighted_svd,
)
from .scenegen import SceneAnnotation, ground_truth_masks, oracle_correspondences, superpoint_labels

MODES = ("oracle", "seeded-weights", "weights-file")

# dotted config key -> attribute name
_KEYS = {
    "graph.voxel": "voxel",
    "graph.k_neighbors": "k_neighbors",
    "graph.k_geodesic": "k_geodesic",
    "mask.tau": "tau",
    "hypotheses.n_l": "n_l",
    "transformer.blocks": "blocks",
    "transformer.dim": "dim",
    "transformer.geo_dim": "geo_dim",
    "features.mode": "mode",
    "features.weights": "weights",
    "features.inlier_ratio": "inlier_ratio",
    "features.oracle_scale": "oracle_scale",
    "matching.sinkhorn_iterations": "sinkhorn_iterations",
    "matching.temperature": "temperature",
    "matching.slack_score": "slack_score",
    "matching.threshold": "match_threshold",
    "filter.theta": "theta",
    "filter.d_op_factor": "d_op_factor",
    "filter.strategy": "strategy",
    "filter.max_iter": "max_iter",
    "filter.overlap_floor": "overlap_floor",
    "ransac.trials": "ransac_trials",
    "ransac.min_inliers": "ransac_min_inliers",
    "run.seed": "seed",
    "run.profile": "profile",
}


@dataclass
class PipelineConfig:
    voxel: float = 0.05
    k_neighbors: int = 32
    k_geodesic: int = 6
    tau: float = 0.5
    n_l: int = 128
    blocks: int = 3
    dim: int = 32
    geo_dim: int = 16
    mode: str = "oracle"
    weights: Optional[str] = None
    inlier_ratio: float = 1.0
    oracle_scale: float = 0.025
    sinkhorn_iterations: int = 100
    temperature: float = 1.0
    slack_score: float = -10.0
    match_threshold: float = 0.1
    theta: float = 0.8
    d_op_factor: float = 1.5
    strategy: str = "point-to-point"
    max_iter: int = 20
    overlap_floor: float = 0.3
    ransac_trials: int = 1000
    ransac_min_inliers: int = 30
    seed: int = 0
    profile: str = "welding"

    def __post_init__(self):
        checks = [
            (self.voxel > 0, "graph.voxel must be positive"),
            (self.k_neighbors >= 1, "graph.k_neighbors must be >= 1"),
            (self.k_geodesic >= 1, "graph.k_geodesic must be >= 1"),
            (0.0 < self.tau < 1.0, "mask.tau must lie in (0, 1)"),
            (self.n_l >= 1, "hypotheses.n_l must be >= 1"),
            (self.blocks >= 1, "transformer.blocks must be >= 1"),
            (self.dim >= 1 and self.geo_dim >= 2 and self.geo_dim % 2 == 0,
             "transformer.dim must be >= 1 and transformer.geo_dim even"),
            (self.mode in MODES, f"features.mode must be one of {MODES}"),
            (0.0 < self.inlier_ratio <= 1.0, "features.inlier_ratio must lie in (0, 1]"),
            (self.oracle_scale > 0, "features.oracle_scale must be positive"),
            (self.sinkhorn_iterations >= 1, "matching.sinkhorn_iterations must be >= 1"),
            (self.temperature > 0, "matching.temperature must be positive"),
            (0.0 <= self.match_threshold <= 1.0, "matching.threshold must lie in [0, 1]"),
            (0.0 < self.theta <= 1.0, "filter.theta must lie in (0, 1]"),
            (self.d_op_factor > 0, "filter.d_op_factor must be positive"),
            (self.strategy in STRATEGIES, f"filter.strategy must be one of {STRATEGIES}"),
            (self.max_iter >= 0, "filter.max_iter must be >= 0"),
            (0.0 <= self.overlap_floor <= 1.0, "filter.overlap_floor must lie in [0, 1]"),
            (self.ransac_trials >= 1 and self.ransac_min_inliers >= 3, "ransac settings out of range"),
            (self.profile in PROFILES, f"run.profile must be one of {sorted(PROFILES)}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    def to_dict(self) -> dict:
        return {key: getattr(self, attr) for key, attr in _KEYS.items()}

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        unknown = sorted(set(doc) - set(_KEYS))
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        kwargs = {_KEYS[k]: v for k, v in doc.items()}
        types = {f.name: f.type for f in fields(cls)}
        for name, v in kwargs.items():
            if types[name] == "int" and isinstance(v, float) and v.is_integer():
                kwargs[name] = int(v)
            elif types[name] == "float" and isinstance(v, int) and not isinstance(v, bool):
                kwargs[name] = float(v)
        return cls(**kwargs)

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "PipelineConfig":
        doc = yaml.safe_load(text) or {}
        if not isinstance(doc, dict):
            raise ValueError("config must be a mapping of dotted keys")
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.loads(Path(path).read_text())

    def with_overrides(self, **changes) -> "PipelineConfig":
        doc = asdict(self)
        doc.update({k: v for k, v in changes.items() if v is not None})
        return PipelineConfig(**doc)


# ---------------------------------------------------------------------------
# Feature providers


@dataclass
class Features:
    v_p: np.ndarray  # superpoint features, already scaled for similarity_scores
    v_q: np.ndarray
    mask: np.ndarray  # (n_q, k) of 0 / sentinel
    dense_p: np.ndarray  # dense features, already scaled for the OT temperature
    dense_q: np.ndarray
    node_labels_q: Optional[np.ndarray] = None
    point_labels_q: Optional[np.ndarray] = None


def oracle_features(model: PointCloud, scene: PointCloud, ann: SceneAnnotation,
                    graph_p: SuperpointGraph, graph_q: SuperpointGraph, cfg: PipelineConfig) -> Features:
    """Features read off the ground truth.

    A model point's feature is its own coordinate. A scene point's feature is
    the model coordinate of its best-scoring putative correspondence, so
    outlier correspondences corrupt features exactly as they would corrupt a
    learned descriptor. Scene points without any correspondence get a far-away
    feature that matches nothing.
    """
    corrs = oracle_correspondences(model, scene, ann, cfg.inlier_ratio, seed=cfg.seed)
    far = model.points.mean(axis=0) + np.array([1e3 * geom.bbox_diagonal(model), 0.0, 0.0])
    dense_q = np.tile(far, (len(scene), 1))
    has = np.zeros(len(scene), dtype=bool)
    if len(corrs):
        order = np.lexsort((-corrs.scores, corrs.target))
        tgt = corrs.target[order]
        first = np.r_[True, tgt[1:] != tgt[:-1]]
        dense_q[tgt[first]] = model.points[corrs.source[order][first]]
        has[tgt[first]] = True

    v_q = np.tile(far, (len(graph_q), 1))
    owner = graph_q.assignment[has]
    vals = dense_q[has]
    order = np.argsort(owner, kind="stable")
    owner, vals = owner[order], vals[order]
    bounds = np.searchsorted(owner, np.arange(len(graph_q) + 1))
    for j in np.flatnonzero(np.diff(bounds)):
        v_q[j] = np.median(vals[bounds[j]:bounds[j + 1]], axis=0)

    dense_scale = cfg.oracle_scale * geom.cloud_resolution(model)
    return Features(
        v_p=graph_p.superpoints.points / cfg.voxel,
        v_q=v_q / cfg.voxel,
        mask=ground_truth_masks(graph_q, ann),
        dense_p=model.points / dense_scale,
        dense_q=dense_q / dense_scale,
        node_labels_q=superpoint_labels(graph_q, ann),
        point_labels_q=ann.per_point_label,
    )


def local_descriptors(points: np.ndarray, reference: np.ndarray, k: int, scale: float) -> np.ndarray:
    """Rigid-invariant shape statistics of the ``k`` reference points nearest each query.

    Columns: normalised covariance eigenvalues (3), linearity, planarity and
    log mean neighbour distance relative to ``scale``.
    """
    k = min(k, len(reference))
    _, idx = cKDTree(reference).query(points, k)
    idx = np.asarray(idx).reshape(len(points), k)
    nb = reference[idx]
    centred = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centred, centred) / k
    lam = np.clip(np.linalg.eigvalsh(cov), 0.0, None)
    total = lam.sum(1, keepdims=True)
    total[total == 0] = 1.0
    e = lam / total
    top = np.maximum(lam[:, 2], 1e-300)
    spread = np.linalg.norm(nb - points[:, None, :], axis=2).mean(1)
    return np.column_stack([
        e,
        (lam[:, 2] - lam[:, 1]) / top,
        (lam[:, 1] - lam[:, 0]) / top,
        np.log((spread + 1e-12) / scale),
    ])


def _mask_geometry(graph: SuperpointGraph, cfg: PipelineConfig) -> MaskGeometry:
    sp = graph.superpoints
    k_pca = min(16, len(sp))
    with_normals = geom.estimate_normals_curvature(sp, k_pca)
    k_geo = min(cfg.k_geodesic, len(sp) - 1)
    geo_graph = SuperpointGraph(sp, geom.knn_graph(sp.points, k_geo), graph.assignment, graph.resolution)
    diameter = geom.bbox_diagonal(sp)
    geodesic = geom.neighbor_geodesics(geo_graph, graph.neighbor_index, limit=10.0 * diameter)
    return MaskGeometry(with_normals.normals, with_normals.curvature, geodesic, diameter, cfg.voxel)


def learned_features(model: PointCloud, scene: PointCloud, graph_p: SuperpointGraph, graph_q: SuperpointGraph,
                     cfg: PipelineConfig, params: TransformerParams,
                     diagnostics: Optional[Counter] = None) -> Features:
    """Descriptor features passed through the transformer with ``params``."""
    rng = np.random.default_rng(cfg.seed)
    w_in = rng.normal(scale=1.0 / np.sqrt(6), size=(6, cfg.dim))
    k_desc = 16

    def project(points, reference):
        return local_descriptors(points, reference, k_desc, cfg.voxel) @ w_in

    f_p = project(graph_p.superpoints.points, model.points)
    f_q = project(graph_q.superpoints.points, scene.points)
    out = instance_focused_transformer(f_p, f_q, graph_p, graph_q, _mask_geometry(graph_q, cfg), params, cfg.tau)
    if diagnostics is not None:
        diagnostics.update(out.diagnostics)
    return Features(
        v_p=out.v_p,
        v_q=out.v_q,
        mask=out.mask.values,
        dense_p=project(model.points, model.points),
        dense_q=project(scene.points, scene.points),
    )


def load_params(cfg: PipelineConfig) -> TransformerParams:
    if cfg.mode == "weights-file":
        if not cfg.weights or not Path(cfg.weights).is_file():
            raise FileNotFoundError(f"weights file not found: {cfg.weights}")
        return TransformerParams.load(cfg.weights, cfg.dim, cfg.geo_dim, cfg.blocks)
    return TransformerParams.seeded(cfg.dim, cfg.geo_dim, cfg.blocks, cfg.seed)


# ---------------------------------------------------------------------------
# Registration


@dataclass
class RegistrationOutput:
    result: RegistrationResult
    sparse: CorrespondenceSet
    candidates: list  # (candidate id, dense CorrespondenceSet)
    runtime_seconds: float = 0.0
    diagnostics: Counter = field(default_factory=Counter)


def check_inputs(scene: PointCloud, cfg: PipelineConfig, annotation: Optional[SceneAnnotation]) -> None:
    """Raise ``ValueError`` for configurations the inputs cannot support."""
    if cfg.strategy == "point-to-plane" and scene.normals is None:
        raise ValueError("point-to-plane overlap needs scene normals; regenerate the bundle with normals "
                         "or use --strategy point-to-point")
    if cfg.mode == "oracle" and annotation is None:
        raise ValueError("oracle mode needs the scene annotation")


def register(model: PointCloud, scene: PointCloud, cfg: PipelineConfig,
             annotation: Optional[SceneAnnotation] = None,
             params: Optional[TransformerParams] = None) -> RegistrationOutput:
    """Recover every instance of ``model`` inside ``scene``."""
    check_inputs(scene, cfg, annotation)
    if cfg.mode != "oracle" and params is None:
        params = load_params(cfg)
    t0 = time.perf_counter()
    diag: Counter = Counter()

    graph_p = geom.build_superpoint_graph(model, cfg.voxel, cfg.k_neighbors)
    graph_q = geom.build_superpoint_graph(scene, cfg.voxel, cfg.k_neighbors)
    d_op = cfg.d_op_factor * graph_q.resolution
    if cfg.mode == "oracle":
        feats = oracle_features(model, scene, annotation, graph_p, graph_q, cfg)
    else:
        feats = learned_features(model, scene, graph_p, graph_q, cfg, params, diag)

    S = similarity_scores(feats.v_p, feats.v_q)
    sparse = instance_hypothesis_generation(S, feats.mask, graph_q, cfg.n_l)
    groups = expand_to_dense(sparse, feats.mask, graph_p, graph_q,
                             feats.node_labels_q, feats.point_labels_q, diag)

    hypotheses, dumped = [], []
    for cid, cand in enumerate(groups):
        per_patch = []
        for pair, patch in zip(cand.patch_pairs, cand.patches):
            m = optimal_transport_match(
                CandidateInstance([pair], [patch]), feats.dense_p, feats.dense_q,
                cfg.sinkhorn_iterations, True, cfg.temperature, cfg.slack_score, cfg.match_threshold, diag)
            per_patch.append(m)
        pooled = _dedupe(CorrespondenceSet.concatenate(per_patch))
        dumped.append((cid, pooled))
        for m in per_patch:
            if len(m) < 3:
                diag["patches_too_few_matches"] += 1
                continue
            try:
                T = solve_weighted_svd(m, model.points, scene.points, m.scores)
            except DegenerateCorrespondences:
                diag["patches_degenerate"] += 1
                continue
            hypotheses.append((T, pooled))

    fcfg = FilterConfig(theta=cfg.theta, r_norm=geom.bbox_diagonal(model), d_op=d_op,
                        strategy=cfg.strategy, max_iter=cfg.max_iter, overlap_floor=cfg.overlap_floor)
    result = filter_and_optimize(hypotheses, model.points, scene.points, fcfg,
                                 add_points=graph_p.superpoints.points, overlap_target=scene)
    result.diagnostics.update(diag)
    result.diagnostics["candidates"] = len(groups)
    runtime = time.perf_counter() - t0
    return RegistrationOutput(result, sparse, dumped, runtime, result.diagnostics)


def _dedupe(c: CorrespondenceSet) -> CorrespondenceSet:
    if len(c) == 0:
        return c
    order = np.lexsort((-c.scores, c.pairs[:, 1], c.pairs[:, 0]))
    pairs, scores = c.pairs[order], c.scores[order]
    first = np.r_[True, np.any(pairs[1:] != pairs[:-1], axis=1)]
    return CorrespondenceSet(pairs[first], scores[first], c.level)


def run_baseline(model: PointCloud, scene: PointCloud, ann: SceneAnnotation, cfg: PipelineConfig) -> RegistrationOutput:
    """Sequential RANSAC on the same putative correspondences the oracle features are built from."""
    check_inputs(scene, cfg, ann)
    corrs = oracle_correspondences(model, scene, ann, cfg.inlier_ratio, seed=cfg.seed)
    t0 = time.perf_counter()
    d_op = cfg.d_op_factor * geom.cloud_resolution(scene)
    rcfg = RansacConfig(d_op=d_op, trials=cfg.ransac_trials, min_inliers=cfg.ransac_min_inliers,
                        seed=cfg.seed, strategy=cfg.strategy)
    result = sequential_ransac(corrs, model.points, scene.points, rcfg, overlap_target=scene)
    empty = CorrespondenceSet(np.zeros((0, 2), dtype=np.int64), np.zeros(0), "superpoint")
    return RegistrationOutput(result, empty, [(0, corrs)], time.perf_counter() - t0, result.diagnostics)
