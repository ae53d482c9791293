"""Point clouds, rigid transforms and the spatial queries the pipeline is built on.

Arrays are float64 ``(N, 3)`` throughout. Operations are pure: they never
mutate their inputs and return fresh objects.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from numpy.typing import NDArray
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree

# brute-force kNN below this many query*reference pairs
_BRUTE_FORCE_PAIRS = 4_000_000


def _as_points(x) -> NDArray[np.float64]:
    pts = np.asarray(x, dtype=np.float64)
    if pts.ndim == 1 and pts.size == 0:
        pts = pts.reshape(0, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {pts.shape}")
    return pts


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Positions with optional per-point normals, curvature and instance labels.

    Labels use ``-1`` for background / outlier points.
    """

    points: NDArray[np.float64]
    normals: Optional[NDArray[np.float64]] = None
    curvature: Optional[NDArray[np.float64]] = None
    labels: Optional[NDArray[np.int64]] = None

    def __post_init__(self):
        pts = _as_points(self.points)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        n = len(pts)
        if self.normals is not None:
            nrm = _as_points(self.normals)
            if len(nrm) != n:
                raise ValueError("normals must match points in length")
            if n and np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0)) > 1e-6:
                raise ValueError("normals must have unit length")
            object.__setattr__(self, "normals", nrm)
        if self.curvature is not None:
            curv = np.asarray(self.curvature, dtype=np.float64).reshape(-1)
            if len(curv) != n:
                raise ValueError("curvature must match points in length")
            if np.any(curv < 0):
                raise ValueError("curvature must be non-negative")
            object.__setattr__(self, "curvature", curv)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(lab) != n:
                raise ValueError("labels must match points in length")
            object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, index) -> "PointCloud":
        index = np.asarray(index)
        return PointCloud(
            self.points[index],
            None if self.normals is None else self.normals[index],
            None if self.curvature is None else self.curvature[index],
            None if self.labels is None else self.labels[index],
        )


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: NDArray[np.float64] = field(default_factory=lambda: np.eye(3))
    translation: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("transform entries must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with det 1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "RigidTransform":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def as_matrix(self) -> NDArray[np.float64]:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points) -> NDArray[np.float64]:
        return _as_points(points) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


@dataclass(frozen=True, eq=False)
class SuperpointGraph:
    """Downsampled superpoints, their kNN table and the dense point-to-node map."""

    superpoints: PointCloud
    neighbor_index: NDArray[np.int64]
    assignment: NDArray[np.int64]
    resolution: float

    def __post_init__(self):
        nbr = np.asarray(self.neighbor_index, dtype=np.int64)
        n = len(self.superpoints)
        if nbr.ndim != 2 or len(nbr) != n:
            raise ValueError("neighbor_index must have one row per superpoint")
        if nbr.size and (nbr.min() < 0 or nbr.max() >= n):
            raise ValueError("neighbor index out of range")
        if np.any(nbr == np.arange(n)[:, None]):
            raise ValueError("a superpoint cannot be its own neighbor")
        asg = np.asarray(self.assignment, dtype=np.int64).reshape(-1)
        if asg.size and (asg.min() < 0 or asg.max() >= n):
            raise ValueError("assignment refers to a missing superpoint")
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        object.__setattr__(self, "neighbor_index", nbr)
        object.__setattr__(self, "assignment", asg)

    @property
    def k(self) -> int:
        return self.neighbor_index.shape[1]

    def __len__(self) -> int:
        return len(self.superpoints)

    def members(self) -> list[NDArray[np.int64]]:
        """Dense point indices owned by each superpoint."""
        order = np.argsort(self.assignment, kind="stable")
        bounds = np.searchsorted(self.assignment[order], np.arange(len(self) + 1))
        return [order[bounds[i]:bounds[i + 1]] for i in range(len(self))]


# ---------------------------------------------------------------------------
# Rotations


def rotation_about_axis(axis, angle: float) -> NDArray[np.float64]:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def quaternion_to_rotation(q) -> NDArray[np.float64]:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    # re-orthonormalise so the 1e-9 invariants hold regardless of rounding
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


def random_rotation(rng: np.random.Generator) -> NDArray[np.float64]:
    """Uniform sample on SO(3) via a uniformly random unit quaternion (Shoemake)."""
    u1, u2, u3 = rng.random(3)
    q = np.array([
        np.sqrt(u1) * np.cos(2 * np.pi * u3),
        np.sqrt(1 - u1) * np.sin(2 * np.pi * u2),
        np.sqrt(1 - u1) * np.cos(2 * np.pi * u2),
        np.sqrt(u1) * np.sin(2 * np.pi * u3),
    ])
    return quaternion_to_rotation(q)


# ---------------------------------------------------------------------------
# Spatial queries


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """One centroid per occupied voxel, ordered by integer voxel key."""
    if not voxel > 0:
        raise ValueError("voxel size must be positive")
    if len(cloud) == 0:
        return PointCloud(np.zeros((0, 3)))
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    m = len(counts)

    def _mean(values):
        out = np.zeros((m,) + values.shape[1:])
        np.add.at(out, inverse, values)
        return out / counts.reshape((-1,) + (1,) * (values.ndim - 1))

    points = _mean(cloud.points)
    normals = curvature = labels = None
    if cloud.normals is not None:
        normals = _mean(cloud.normals)
        norm = np.linalg.norm(normals, axis=1)
        bad = norm < 1e-12
        normals[bad] = (0.0, 0.0, 1.0)
        norm[bad] = 1.0
        normals /= norm[:, None]
    if cloud.curvature is not None:
        curvature = _mean(cloud.curvature)
    if cloud.labels is not None:
        labels = majority_labels(inverse, cloud.labels, m)
    return PointCloud(points, normals, curvature, labels)


def majority_labels(owner: NDArray[np.int64], labels: NDArray[np.int64], n_groups: int) -> NDArray[np.int64]:
    """Per-group majority label; ties resolve to the lowest label value."""
    out = np.full(n_groups, -1, dtype=np.int64)
    if len(labels) == 0:
        return out
    uniq, lab_idx = np.unique(labels, return_inverse=True)
    table = np.zeros((n_groups, len(uniq)), dtype=np.int64)
    np.add.at(table, (owner, lab_idx.reshape(-1)), 1)
    has = table.sum(axis=1) > 0
    # argmax picks the first maximal column, i.e. the lowest label
    out[has] = uniq[np.argmax(table[has], axis=1)]
    return out


def _sorted_rows(d2: NDArray, cand: NDArray, k: int) -> NDArray[np.int64]:
    # order by (distance, index): sort on index first, then stable sort on distance
    by_index = np.argsort(cand, axis=1, kind="stable")
    cand = np.take_along_axis(cand, by_index, axis=1)
    d2 = np.take_along_axis(d2, by_index, axis=1)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return np.take_along_axis(cand, order, axis=1)


def _brute_knn(q: NDArray, r: NDArray, k: int) -> NDArray[np.int64]:
    out = np.empty((len(q), k), dtype=np.int64)
    step = max(1, _BRUTE_FORCE_PAIRS // max(len(r), 1))
    for s in range(0, len(q), step):
        block = q[s:s + step]
        d2 = ((block[:, None, :] - r[None, :, :]) ** 2).sum(-1)
        out[s:s + step] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


def knn(query, reference, k: int) -> NDArray[np.int64]:
    """Indices of the ``k`` nearest reference points per query row.

    Rows are ordered by ascending Euclidean distance with ties going to the
    lower reference index. Exact: tree candidates are re-ranked and any row
    whose candidate list may be truncated inside a tie falls back to a full scan.
    """
    q = _as_points(query.points if isinstance(query, PointCloud) else query)
    r = _as_points(reference.points if isinstance(reference, PointCloud) else reference)
    if k > len(r):
        raise ValueError("insufficient points")
    if k <= 0:
        return np.zeros((len(q), 0), dtype=np.int64)
    if len(q) * len(r) <= _BRUTE_FORCE_PAIRS:
        return _brute_knn(q, r, k)
    m = min(k + 4, len(r))
    _, cand = cKDTree(r).query(q, m)
    cand = np.asarray(cand, dtype=np.int64).reshape(len(q), m)
    d2 = ((q[:, None, :] - r[cand]) ** 2).sum(-1)
    out = _sorted_rows(d2, cand, k)
    if m < len(r):
        kth = np.take_along_axis(d2, np.argsort(d2, axis=1, kind="stable"), axis=1)[:, k - 1]
        risky = np.flatnonzero(d2.max(axis=1) <= kth)
        if len(risky):
            out[risky] = _brute_knn(q[risky], r, k)
    return out


def nearest_index(query, reference) -> NDArray[np.int64]:
    """Nearest reference point per query, lower index on ties."""
    return knn(query, reference, 1)[:, 0]


def knn_graph(points, k: int) -> NDArray[np.int64]:
    """kNN table over a single cloud, excluding each point itself."""
    pts = _as_points(points.points if isinstance(points, PointCloud) else points)
    n = len(pts)
    if k > n - 1:
        raise ValueError("insufficient points")
    raw = knn(pts, pts, min(k + 1, n))
    own = raw == np.arange(n)[:, None]
    # drop the self entry, or the last entry when a coincident twin displaced it
    drop = np.where(own.any(axis=1), own.argmax(axis=1), raw.shape[1] - 1)
    keep = np.ones_like(raw, dtype=bool)
    keep[np.arange(n), drop] = False
    return raw[keep].reshape(n, -1)[:, :k]


def farthest_point_sampling(cloud, n: int, start: Optional[int] = None) -> NDArray[np.int64]:
    """Greedy max-min subsampling; ties go to the lower index.

    ``start`` defaults to the point farthest from the centroid.
    """
    pts = _as_points(cloud.points if isinstance(cloud, PointCloud) else cloud)
    if n > len(pts):
        raise ValueError("cannot sample more points than the cloud holds")
    if n <= 0:
        return np.zeros(0, dtype=np.int64)
    if start is None:
        start = int(np.argmax(((pts - pts.mean(axis=0)) ** 2).sum(1)))
    selected = np.empty(n, dtype=np.int64)
    selected[0] = start
    min_d2 = ((pts - pts[start]) ** 2).sum(1)
    min_d2[start] = -1.0
    for i in range(1, n):
        nxt = int(np.argmax(min_d2))
        selected[i] = nxt
        min_d2 = np.minimum(min_d2, ((pts - pts[nxt]) ** 2).sum(1))
        min_d2[selected[: i + 1]] = -1.0
    return selected


def estimate_normals_curvature(cloud: PointCloud, k: int, diagnostics: Optional[Counter] = None) -> PointCloud:
    """PCA normals and surface variation from each point's k-neighbourhood.

    The neighbourhood includes the point itself. Normals are oriented so their
    largest-magnitude component is positive; curvature is
    ``λ0 / (λ0 + λ1 + λ2)`` with ``λ0`` the smallest eigenvalue.
    """
    n = len(cloud)
    if not (n > k >= 3):
        raise ValueError("need |cloud| > k >= 3")
    nbr = knn(cloud.points, cloud.points, k)
    local = cloud.points[nbr]
    local = local - local.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local) / k
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals, 0.0, None)
    normals = evecs[:, :, 0].copy()
    dominant = np.argmax(np.abs(normals), axis=1)
    sign = np.sign(normals[np.arange(n), dominant])
    normals *= np.where(sign == 0, 1.0, sign)[:, None]
    total = evals.sum(axis=1)
    degenerate = total <= 1e-300
    curvature = np.zeros(n)
    curvature[~degenerate] = evals[~degenerate, 0] / total[~degenerate]
    normals[degenerate] = (0.0, 0.0, 1.0)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    if diagnostics is not None and degenerate.any():
        diagnostics["degenerate_normals"] += int(degenerate.sum())
    return replace(cloud, normals=normals, curvature=curvature)


def _graph_matrix(graph: SuperpointGraph) -> csr_matrix:
    pts = graph.superpoints.points
    n, k = graph.neighbor_index.shape
    rows = np.repeat(np.arange(n), k)
    cols = graph.neighbor_index.reshape(-1)
    w = np.linalg.norm(pts[rows] - pts[cols], axis=1)
    # explicit zeros would be read as missing edges
    w = np.maximum(w, np.finfo(float).tiny)
    mat = csr_matrix((w, (rows, cols)), shape=(n, n))
    return mat.maximum(mat.T)


def geodesic_distances(graph: SuperpointGraph, source: int) -> NDArray[np.float64]:
    """Dijkstra distances over the symmetrised kNN graph; unreachable nodes are ``inf``."""
    d = dijkstra(_graph_matrix(graph), directed=False, indices=int(source))
    d[int(source)] = 0.0
    return d


def neighbor_geodesics(
    geo_graph: SuperpointGraph,
    neighbor_index: NDArray[np.int64],
    limit: float = np.inf,
    chunk: int = 256,
) -> NDArray[np.float64]:
    """Geodesic distance from every node to each entry of its neighbour row.

    Paths longer than ``limit`` are reported as ``inf``.
    """
    mat = _graph_matrix(geo_graph)
    n = len(neighbor_index)
    out = np.empty(neighbor_index.shape)
    for s in range(0, n, chunk):
        idx = np.arange(s, min(s + chunk, n))
        d = dijkstra(mat, directed=False, indices=idx, limit=limit)
        out[idx] = np.take_along_axis(d, neighbor_index[idx], axis=1)
    return out


def apply_transform(cloud: PointCloud, T: RigidTransform) -> PointCloud:
    normals = None if cloud.normals is None else cloud.normals @ T.rotation.T
    return replace(cloud, points=T.apply(cloud.points), normals=normals)


def cloud_resolution(cloud) -> float:
    """Median nearest-neighbour spacing."""
    pts = _as_points(cloud.points if isinstance(cloud, PointCloud) else cloud)
    if len(pts) < 2:
        raise ValueError("resolution needs at least 2 points")
    d, _ = cKDTree(pts).query(pts, 2)
    return float(np.median(d[:, 1]))


def bbox_diagonal(cloud) -> float:
    pts = _as_points(cloud.points if isinstance(cloud, PointCloud) else cloud)
    if len(pts) == 0:
        return 0.0
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


def build_superpoint_graph(cloud: PointCloud, voxel: float, k: int) -> SuperpointGraph:
    """Voxel superpoints, their kNN table and the point-to-node assignment.

    ``k`` is clamped to ``|superpoints| - 1`` for very small clouds.
    """
    sp = voxel_downsample(cloud, voxel)
    k = min(k, len(sp) - 1)
    nbr = knn_graph(sp.points, k)
    assignment = nearest_index(cloud.points, sp.points)
    if cloud.labels is not None:
        sp = replace(sp, labels=majority_labels(assignment, cloud.labels, len(sp)))
    pr = cloud_resolution(cloud) if len(cloud) >= 2 else float(voxel)
    return SuperpointGraph(sp, nbr, assignment, pr if pr > 0 else float(voxel))
