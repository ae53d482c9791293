"""Synthetic multi-instance scenes with exact ground truth.

A scene is ``instances`` rigidly placed copies of a model cloud, optionally
corrupted with Gaussian noise, half-space occlusion and uniform background
outliers. Everything is a pure function of ``(model, config, seed)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geom import (
    PointCloud,
    RigidTransform,
    SuperpointGraph,
    estimate_normals_curvature,
    majority_labels,
    random_rotation,
    rotation_about_axis,
)
from .matching import SENTINEL, CorrespondenceSet
from .plyio import read_ply, write_ply


@dataclass
class SceneConfig:
    instances: int = 4
    noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    occlusion_fraction: float = 0.0
    margin: float = 0.1
    workspace_scale: float = 2.5
    model_id: str = "robot"


@dataclass
class SceneAnnotation:
    instance_transforms: list[RigidTransform]
    per_point_label: np.ndarray
    model_id: str
    noise_sigma: float
    outlier_fraction: float
    seed: int
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.per_point_label = np.asarray(self.per_point_label, dtype=np.int64)
        if len(self.instance_transforms) < 1:
            raise ValueError("a scene needs at least one instance")
        if np.any(self.per_point_label >= len(self.instance_transforms)):
            raise ValueError("label refers to a missing instance")

    def to_json(self) -> dict:
        return {
            "model_id": self.model_id,
            "seed": int(self.seed),
            "noise_sigma": float(self.noise_sigma),
            "outlier_fraction": float(self.outlier_fraction),
            "instance_transforms": [
                {"rotation": T.rotation.reshape(-1).tolist(), "translation": T.translation.tolist()}
                for T in self.instance_transforms
            ],
            "per_point_label": self.per_point_label.tolist(),
            "config": self.config,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SceneAnnotation":
        try:
            transforms = [
                RigidTransform(np.reshape(t["rotation"], (3, 3)), t["translation"])
                for t in doc["instance_transforms"]
            ]
            return cls(
                transforms,
                np.asarray(doc["per_point_label"], dtype=np.int64),
                str(doc["model_id"]),
                float(doc["noise_sigma"]),
                float(doc["outlier_fraction"]),
                int(doc["seed"]),
                dict(doc.get("config", {})),
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed annotation: {exc}") from exc


# ---------------------------------------------------------------------------
# Model


def _grid(n_u: int, n_v: int):
    u = (np.arange(n_u) + 0.5) / n_u
    v = (np.arange(n_v) + 0.5) / n_v
    return np.meshgrid(u, v, indexing="ij")


def _box(center, size, R, spacing):
    """Surface samples of an oriented box on a regular per-face grid."""
    size = np.asarray(size, dtype=float)
    pts, nrm = [], []
    for axis in range(3):
        a, b = [i for i in range(3) if i != axis]
        n_a = max(2, int(round(size[a] / spacing)))
        n_b = max(2, int(round(size[b] / spacing)))
        ga, gb = _grid(n_a, n_b)
        for sign in (-1.0, 1.0):
            p = np.zeros((ga.size, 3))
            p[:, a] = (ga.reshape(-1) - 0.5) * size[a]
            p[:, b] = (gb.reshape(-1) - 0.5) * size[b]
            p[:, axis] = sign * size[axis] / 2
            n = np.zeros_like(p)
            n[:, axis] = sign
            pts.append(p)
            nrm.append(n)
    pts, nrm = np.concatenate(pts), np.concatenate(nrm)
    return pts @ R.T + center, nrm @ R.T


def _cylinder(center, radius, height, spacing):
    n_t = max(8, int(round(2 * np.pi * radius / spacing)))
    n_h = max(2, int(round(height / spacing)))
    gt, gh = _grid(n_t, n_h)
    theta = 2 * np.pi * gt.reshape(-1)
    side = np.stack([radius * np.cos(theta), radius * np.sin(theta), (gh.reshape(-1) - 0.5) * height], 1)
    side_n = np.stack([np.cos(theta), np.sin(theta), np.zeros_like(theta)], 1)
    rings = []
    for r in np.arange(spacing / 2, radius, spacing):
        m = max(6, int(round(2 * np.pi * r / spacing)))
        ang = 2 * np.pi * (np.arange(m) + 0.5) / m
        rings.append(np.stack([r * np.cos(ang), r * np.sin(ang), np.full(m, height / 2)], 1))
    top = np.concatenate(rings)
    top_n = np.tile([0.0, 0.0, 1.0], (len(top), 1))
    return np.concatenate([side, top]) + center, np.concatenate([side_n, top_n])


def make_robot_model(spacing: float = 0.03) -> PointCloud:
    """A deterministic, asymmetric articulated-arm shape (about 1.3 m across).

    Surfaces are sampled on regular grids, so nearest-neighbour spacing is
    close to ``spacing`` everywhere except where primitives meet.
    """
    parts = [
        _cylinder(np.array([0.0, 0.0, 0.15]), 0.2, 0.3, spacing),
        _box(np.array([0.0, 0.0, 0.38]), (0.22, 0.26, 0.16), np.eye(3), spacing),
        _box(np.array([0.12, 0.0, 0.68]), (0.14, 0.14, 0.6), rotation_about_axis([0, 1, 0], 0.4), spacing),
        _box(np.array([0.45, 0.05, 0.95]), (0.5, 0.1, 0.1), rotation_about_axis([0, 0, 1], 0.25), spacing),
        _box(np.array([0.72, 0.16, 0.88]), (0.08, 0.08, 0.2), np.eye(3), spacing),
        _box(np.array([0.72, 0.22, 0.76]), (0.05, 0.16, 0.04), np.eye(3), spacing),
    ]
    pts = np.concatenate([p for p, _ in parts])
    nrm = np.concatenate([n for _, n in parts])
    return PointCloud(pts, nrm / np.linalg.norm(nrm, axis=1, keepdims=True))


def model_radius(model: PointCloud) -> float:
    return float(np.linalg.norm(model.points - model.points.mean(axis=0), axis=1).max())


# ---------------------------------------------------------------------------
# Scenes


def generate_scene(model: PointCloud, config: SceneConfig, seed: int,
                   with_normals: bool = False, normal_k: int = 16):
    """Place ``config.instances`` copies of ``model`` and corrupt them.

    Returns ``(target, annotation)``. Instance points come first, in instance
    order, followed by background outliers (label ``-1``).
    """
    if len(model) == 0:
        raise ValueError("model must not be empty")
    if config.instances < 1:
        raise ValueError("instances must be >= 1")
    if not 0.0 <= config.outlier_fraction < 1.0:
        raise ValueError("outlier_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    centroid = model.points.mean(axis=0)
    radius = model_radius(model)
    side = config.workspace_scale * np.cbrt(config.instances) * 2 * radius
    min_sep = 2 * radius * (1 + config.margin)

    transforms, centers = [], []
    for _ in range(config.instances):
        for _attempt in range(1000):
            R = random_rotation(rng)
            c = rng.uniform(radius, max(side - radius, radius), size=3)
            if all(np.linalg.norm(c - o) >= min_sep for o in centers):
                break
        else:
            raise RuntimeError("workspace too small")
        centers.append(c)
        transforms.append(RigidTransform(R, c - R @ centroid))

    pts, nrm, labels = [], [], []
    for j, T in enumerate(transforms):
        p = T.apply(model.points)
        n = None if model.normals is None else model.normals @ T.rotation.T
        if config.occlusion_fraction > 0:
            u = rng.normal(size=3)
            proj = (p - centers[j]) @ (u / np.linalg.norm(u))
            n_drop = int(math.floor(config.occlusion_fraction * len(p)))
            keep = np.sort(np.argsort(-proj, kind="stable")[n_drop:])
            p = p[keep]
            n = None if n is None else n[keep]
        if config.noise_sigma > 0:
            p = p + rng.normal(scale=config.noise_sigma, size=p.shape)
        pts.append(p)
        nrm.append(n)
        labels.append(np.full(len(p), j, dtype=np.int64))

    n_inst = sum(len(p) for p in pts)
    f = config.outlier_fraction
    n_out = int(math.ceil(f * n_inst / (1 - f) - 1e-9)) if f > 0 else 0
    if n_out:
        inst = np.concatenate(pts)
        lo = np.minimum(inst.min(axis=0), 0.0)
        hi = np.maximum(inst.max(axis=0), side)
        pts.append(rng.uniform(lo, hi, size=(n_out, 3)))
        labels.append(np.full(n_out, -1, dtype=np.int64))

    points = np.concatenate(pts)
    labels = np.concatenate(labels)
    target = PointCloud(points, labels=labels)
    if with_normals:
        target = estimate_normals_curvature(target, normal_k)
    ann = SceneAnnotation(
        transforms, labels, config.model_id, config.noise_sigma, config.outlier_fraction,
        int(seed), asdict(config),
    )
    return target, ann


def robot_row_fixture(model: PointCloud, gaps=(0.62, 0.80, 1.5, 0.70), ghost_angles=(25, 45, 70, 100, 130),
                      ghost_fraction: float = 0.5, seed: int = 0):
    """A row of identically oriented instances plus rotated partial "ghost" copies.

    Neighbours in the row are ``gaps`` apart along y, so close pairs have a
    small ADD. Every instance also gets one ghost per angle in
    ``ghost_angles`` (degrees, about the vertical axis through the model
    origin), made of ``ghost_fraction`` of the model points and labelled -1.
    Returns ``(scene, annotation, candidates)`` where each candidate is the
    exact transform with the correspondences that support it, shuffled.
    """
    rng = np.random.default_rng(seed)
    ys = np.concatenate([[0.0], np.cumsum(gaps)])
    gts = [RigidTransform(np.eye(3), [0.0, y, 0.0]) for y in ys]
    n = len(model)
    pts, labels, cands = [], [], []
    offset = 0
    for j, T in enumerate(gts):
        pts.append(T.apply(model.points))
        labels.append(np.full(n, j))
        cands.append((T, CorrespondenceSet(np.stack([np.arange(n), offset + np.arange(n)], 1), np.ones(n))))
        offset += n
    for T in gts:
        for a in ghost_angles:
            G = T.compose(RigidTransform(rotation_about_axis([0, 0, 1], np.radians(a)), np.zeros(3)))
            keep = np.sort(rng.choice(n, int(ghost_fraction * n), replace=False))
            pts.append(G.apply(model.points[keep]))
            labels.append(np.full(len(keep), -1))
            pairs = np.stack([keep, offset + np.arange(len(keep))], 1)
            cands.append((G, CorrespondenceSet(pairs, np.full(len(keep), 0.9))))
            offset += len(keep)
    labels = np.concatenate(labels)
    scene = PointCloud(np.concatenate(pts), labels=labels)
    ann = SceneAnnotation(gts, labels, "robot-row", 0.0, float(np.mean(labels < 0)), seed,
                          {"gaps": list(gaps), "ghost_angles": list(ghost_angles), "ghost_fraction": ghost_fraction})
    cands = [cands[i] for i in rng.permutation(len(cands))]
    return scene, ann, cands


def superpoint_labels(graph: SuperpointGraph, ann: SceneAnnotation) -> np.ndarray:
    """Majority instance label of each superpoint's assigned points (ties -> lower id)."""
    return majority_labels(graph.assignment, ann.per_point_label, len(graph))


def ground_truth_masks(graph: SuperpointGraph, ann: SceneAnnotation) -> np.ndarray:
    """``0`` where a superpoint and its neighbour share an instance, ``-inf`` otherwise.

    Background superpoints (label ``-1``) never share an instance.
    """
    lab = superpoint_labels(graph, ann)
    same = (lab[:, None] == lab[graph.neighbor_index]) & (lab[:, None] >= 0)
    return np.where(same, 0.0, SENTINEL)


def true_pairs(model: PointCloud, target: PointCloud, ann: SceneAnnotation,
               tolerance: float | None = None) -> np.ndarray:
    """(model idx, target idx, instance) triples for every model point whose image
    has a target point of the same instance within ``tolerance``."""
    if tolerance is None:
        tolerance = 5.0 * ann.noise_sigma * np.sqrt(3) + 1e-6
    out = []
    for j, T in enumerate(ann.instance_transforms):
        idx = np.flatnonzero(ann.per_point_label == j)
        if len(idx) == 0:
            continue
        d, nn = cKDTree(target.points[idx]).query(T.apply(model.points))
        ok = np.flatnonzero(d <= tolerance)
        out.append(np.stack([ok, idx[nn[ok]], np.full(len(ok), j)], axis=1))
    if not out:
        return np.zeros((0, 3), dtype=np.int64)
    return np.concatenate(out).astype(np.int64)


def oracle_correspondences(model: PointCloud, target: PointCloud, ann: SceneAnnotation,
                           inlier_ratio: float, n: int | None = None, seed: int = 0) -> CorrespondenceSet:
    """Putative dense correspondences with a controlled inlier ratio.

    ``ceil(n * inlier_ratio)`` pairs are drawn from the true model/target pairs;
    the rest are uniform random pairs. Inlier scores are ``1 + N(0, 0.05)``,
    outlier scores ``U[0, 1)``. ``n`` defaults to the number of true pairs.
    """
    if not 0.0 < inlier_ratio <= 1.0:
        raise ValueError("inlier_ratio must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    pool = true_pairs(model, target, ann)
    if n is None:
        n = len(pool)
    n_in = min(int(math.ceil(n * inlier_ratio - 1e-9)), len(pool))
    n_out = n - n_in
    pick = np.sort(rng.choice(len(pool), size=n_in, replace=False))
    inl = pool[pick, :2]
    outl = np.stack([rng.integers(0, len(model), n_out), rng.integers(0, len(target), n_out)], axis=1)
    pairs = np.concatenate([inl, outl.astype(np.int64)])
    scores = np.concatenate([1.0 + rng.normal(scale=0.05, size=n_in), rng.random(n_out)])
    order = rng.permutation(len(pairs))
    return CorrespondenceSet(pairs[order], scores[order], "dense")


# ---------------------------------------------------------------------------
# Bundles


def save_bundle(out_dir, model: PointCloud, target: PointCloud, ann: SceneAnnotation) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_ply(out / "scene.ply", target)
    write_ply(out / "model.ply", model)
    (out / "annotation.json").write_text(json.dumps(ann.to_json(), sort_keys=True, indent=1) + "\n")
    return out


def load_bundle(path):
    path = Path(path)
    model = read_ply(path / "model.ply")
    target = read_ply(path / "scene.ply")
    ann = SceneAnnotation.from_json(json.loads((path / "annotation.json").read_text()))
    if len(ann.per_point_label) != len(target):
        raise ValueError("annotation labels do not match scene size")
    return model, target, ann
