"""Instance-focused transformer: forward pass only, in plain numpy.

Three pieces interleave per block: masked regional self-attention over each
superpoint's kNN neighbourhood, full cross-attention between the two clouds,
and a neighbour-mask head that predicts which neighbours share an instance.
A single attention head is used throughout.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geom import SuperpointGraph
from .matching import SENTINEL

Layer = tuple[np.ndarray, np.ndarray]


# ---------------------------------------------------------------------------
# Parameters


@dataclass
class AttentionParams:
    """Projections and MLP heads for one attention block.

    ``w_geo`` maps the concatenated distance/angle sinusoids (``2 * geo_dim``)
    to the model width ``d``. MLPs are lists of ``(weight, bias)`` layers with
    ReLU between layers.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_r: np.ndarray
    w_geo: np.ndarray
    mlp1: list[Layer]
    mlp2: list[Layer]
    mlp3: list[Layer]
    geo_dim: int

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    def __post_init__(self):
        d = self.d
        for name in ("w_q", "w_k", "w_v", "w_r"):
            if getattr(self, name).shape != (d, d):
                raise ValueError(f"{name} must be {d}x{d}")
        if self.w_geo.shape != (2 * self.geo_dim, d):
            raise ValueError("w_geo shape does not match geo_dim and d")
        _check_mlp(self.mlp1, 2 * d, d, "mlp1")
        _check_mlp(self.mlp2, 3 * self.geo_dim, d, "mlp2")
        _check_mlp(self.mlp3, 2 * d, 1, "mlp3")
        for _, arr in self.named_tensors():
            if not np.all(np.isfinite(arr)):
                raise ValueError("attention parameters must be finite")

    def named_tensors(self):
        for name in ("w_q", "w_k", "w_v", "w_r", "w_geo"):
            yield name, getattr(self, name)
        for mlp in ("mlp1", "mlp2", "mlp3"):
            for i, (W, b) in enumerate(getattr(self, mlp)):
                yield f"{mlp}.{i}.weight", W
                yield f"{mlp}.{i}.bias", b


def _check_mlp(layers, d_in, d_out, name):
    if not layers:
        raise ValueError(f"{name} needs at least one layer")
    width = d_in
    for W, b in layers:
        if W.shape[0] != width or b.shape != (W.shape[1],):
            raise ValueError(f"{name} layer shapes are inconsistent")
        width = W.shape[1]
    if width != d_out:
        raise ValueError(f"{name} must end with width {d_out}")


def init_params(d: int, geo_dim: int, rng: np.random.Generator) -> AttentionParams:
    """Deterministic uniform init in ``±1/sqrt(fan_in)`` (``±1/sqrt(d)`` for the projections)."""

    def u(shape):
        return rng.uniform(-1.0, 1.0, size=shape) / np.sqrt(shape[0])

    def mlp(widths):
        return [(u((a, b)), np.zeros(b)) for a, b in zip(widths[:-1], widths[1:])]

    return AttentionParams(
        w_q=u((d, d)), w_k=u((d, d)), w_v=u((d, d)), w_r=u((d, d)),
        w_geo=u((2 * geo_dim, d)),
        mlp1=mlp([2 * d, d, d]),
        mlp2=mlp([3 * geo_dim, d]),
        mlp3=mlp([2 * d, d, 1]),
        geo_dim=geo_dim,
    )


@dataclass
class TransformerParams:
    blocks: list[tuple[AttentionParams, AttentionParams]]  # (self, cross) per block

    @classmethod
    def seeded(cls, d: int, geo_dim: int, n_blocks: int, seed: int) -> "TransformerParams":
        rng = np.random.default_rng(seed)
        return cls([(init_params(d, geo_dim, rng), init_params(d, geo_dim, rng)) for _ in range(n_blocks)])

    def manifest(self) -> list[dict]:
        out = []
        for b, (sp, cp) in enumerate(self.blocks):
            for prefix, p in (("self", sp), ("cross", cp)):
                for name, arr in p.named_tensors():
                    out.append({
                        "name": f"block{b}.{prefix}.{name}",
                        "shape": list(arr.shape),
                        "values": arr.astype(np.float32).reshape(-1).tolist(),
                    })
        return out

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"tensors": self.manifest()}))

    @classmethod
    def load(cls, path, d: int, geo_dim: int, n_blocks: int) -> "TransformerParams":
        """Read a weights manifest; every tensor shape is checked against ``d``/``geo_dim``."""
        doc = json.loads(Path(path).read_text())
        tensors = {t["name"]: t for t in doc["tensors"]}
        template = cls.seeded(d, geo_dim, n_blocks, 0)
        blocks = []
        for b, pair in enumerate(template.blocks):
            loaded = []
            for prefix, p in zip(("self", "cross"), pair):
                values = {}
                for name, arr in p.named_tensors():
                    key = f"block{b}.{prefix}.{name}"
                    if key not in tensors:
                        raise ValueError(f"weights file lacks tensor {key}")
                    t = tensors[key]
                    if tuple(t["shape"]) != arr.shape:
                        raise ValueError(f"{key}: shape {t['shape']} != expected {list(arr.shape)}")
                    values[name] = np.asarray(t["values"], dtype=np.float32).astype(np.float64).reshape(arr.shape)
                mlps = {m: [(values[f"{m}.{i}.weight"], values[f"{m}.{i}.bias"]) for i in range(len(getattr(p, m)))]
                        for m in ("mlp1", "mlp2", "mlp3")}
                loaded.append(AttentionParams(values["w_q"], values["w_k"], values["w_v"], values["w_r"],
                                              values["w_geo"], mlps["mlp1"], mlps["mlp2"], mlps["mlp3"], geo_dim))
            blocks.append(tuple(loaded))
        return cls(blocks)


@dataclass
class NeighborMask:
    values: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        ok = (self.values == 0) | (self.values == SENTINEL)
        if not np.all(ok):
            raise ValueError("mask values must be 0 or the sentinel")

    @classmethod
    def from_confidence(cls, confidence: np.ndarray, tau: float) -> "NeighborMask":
        confidence = np.asarray(confidence, dtype=np.float64)
        # rejection is strict: a confidence equal to tau is kept
        return cls(np.where(confidence < tau, SENTINEL, 0.0), confidence)


# ---------------------------------------------------------------------------
# Building blocks


def sinusoidal(x: np.ndarray, dim: int) -> np.ndarray:
    """Transformer-style sin/cos embedding of a scalar array, trailing axis ``dim``."""
    x = np.asarray(x, dtype=np.float64)
    half = dim // 2
    freq = 1.0 / (10000.0 ** (np.arange(half) * 2.0 / dim))
    arg = x[..., None] * freq
    emb = np.empty(x.shape + (dim,))
    emb[..., 0:2 * half:2] = np.sin(arg)
    emb[..., 1:2 * half:2] = np.cos(arg)
    if dim % 2:
        emb[..., -1] = 0.0
    return emb


def mlp_forward(layers: list[Layer], x: np.ndarray) -> np.ndarray:
    for i, (W, b) in enumerate(layers):
        x = x @ W + b
        if i < len(layers) - 1:
            x = np.maximum(x, 0.0)
    return x


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable softmax; a slice that is entirely ``-inf`` comes back as zeros."""
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    total = e.sum(axis=axis, keepdims=True)
    return e / np.where(total > 0, total, 1.0)


def pair_geometry(points: np.ndarray, neighbor_index: np.ndarray, rows: Optional[np.ndarray] = None):
    """Distance and angle (degrees) of each superpoint/neighbour pair.

    The angle sits at the superpoint, between the direction to the neighbour
    and the direction to the neighbourhood centroid; both are invariant under
    rigid motion of the whole cloud. ``rows`` restricts the evaluation.
    """
    rows = np.arange(len(points)) if rows is None else np.asarray(rows)
    nb = points[neighbor_index[rows]]
    center = points[rows]
    rel = nb - center[:, None, :]
    dist = np.linalg.norm(rel, axis=2)
    to_centroid = nb.mean(axis=1) - center
    cross = np.linalg.norm(np.cross(rel, to_centroid[:, None, :]), axis=2)
    dot = (rel * to_centroid[:, None, :]).sum(2)
    return dist, np.degrees(np.arctan2(cross, dot))


def _embed_pairs(dist, angle, params: AttentionParams, sigma_d: float, sigma_a: float) -> np.ndarray:
    emb = np.concatenate([sinusoidal(dist / sigma_d, params.geo_dim),
                          sinusoidal(angle / sigma_a, params.geo_dim)], axis=-1)
    return emb @ params.w_geo


def geometric_embeddings(points: np.ndarray, neighbor_index: np.ndarray, params: AttentionParams,
                         sigma_d: float, sigma_a: float = 15.0) -> np.ndarray:
    """``(n, k, d)`` embeddings of pair distance and triplet angle."""
    dist, angle = pair_geometry(points, neighbor_index)
    return _embed_pairs(dist, angle, params, sigma_d, sigma_a)


def geometric_embedding(graph: SuperpointGraph, i: int, j: int, params: AttentionParams,
                        sigma_d: Optional[float] = None, sigma_a: float = 15.0) -> np.ndarray:
    """Embedding of superpoint ``i`` and the neighbour in slot ``j`` of its row."""
    sigma_d = graph.resolution if sigma_d is None else sigma_d
    dist, angle = pair_geometry(graph.superpoints.points, graph.neighbor_index, [i])
    return _embed_pairs(dist[0, j], angle[0, j], params, sigma_d, sigma_a)


# ---------------------------------------------------------------------------
# Attention modules


def regional_association(features: np.ndarray, neighbor_index: np.ndarray, geo: np.ndarray,
                         mask: Optional[np.ndarray], params: AttentionParams,
                         diagnostics: Optional[Counter] = None, return_weights: bool = False):
    """Masked neighbourhood attention followed by channel-softmax pooling.

    ``geo`` holds the ``(n, k, d)`` pair embeddings. ``mask`` is ``None`` for the
    source cloud. Rows whose mask rejects every neighbour fall back to uniform
    attention. Output rows have width ``d``.
    """
    F = np.asarray(features, dtype=np.float64)
    d = params.d
    nbr_f = F[neighbor_index]
    q = F @ params.w_q
    keys = nbr_f @ params.w_k + geo @ params.w_r
    e = np.einsum("nd,nkd->nk", q, keys) / np.sqrt(d)
    dead = np.zeros(len(F), dtype=bool)
    if mask is not None:
        e = e + mask
        dead = np.all(mask == SENTINEL, axis=1)
    weights = softmax(e, axis=1)
    if dead.any():
        weights[dead] = 1.0 / neighbor_index.shape[1]
        if diagnostics is not None:
            diagnostics["fully_masked_rows"] += int(dead.sum())
    f1 = np.einsum("nk,nkd->nd", weights, nbr_f @ params.w_v)
    f3 = nbr_f if mask is None else np.where((mask == 0)[:, :, None], nbr_f, 0.0)
    f2 = np.concatenate([np.broadcast_to(f1[:, None, :], f3.shape), f3], axis=2)
    pooled = (f2 * softmax(f2, axis=1)).sum(axis=1)
    h = mlp_forward(params.mlp1, pooled)
    return (h, weights) if return_weights else h


def _canonical_order(h: np.ndarray) -> np.ndarray:
    # Reductions over a cloud run in this order, so reordering the cloud's rows
    # permutes the output bit for bit instead of shifting the last ulp.
    return np.lexsort(h.T[::-1])


def _attend(h_x, h_y, params, scale):
    order = _canonical_order(h_y)
    a = softmax((h_x @ params.w_q) @ (h_y[order] @ params.w_k).T / scale, axis=1)
    v = a @ (h_y[order] @ params.w_v)
    weights = np.empty_like(a)
    weights[:, order] = a
    return v, weights


def cross_attention(h_p: np.ndarray, h_q: np.ndarray, params: AttentionParams, return_weights: bool = False):
    """Each row of one cloud attends over every row of the other."""
    if h_p.shape[1] != h_q.shape[1]:
        raise ValueError("feature widths differ")
    scale = np.sqrt(params.d)
    v_p, a_p = _attend(h_p, h_q, params, scale)
    v_q, a_q = _attend(h_q, h_p, params, scale)
    return (v_p, v_q, a_p, a_q) if return_weights else (v_p, v_q)


@dataclass
class MaskGeometry:
    """Per-superpoint inputs of the mask head for one cloud."""

    normals: np.ndarray
    curvature: np.ndarray
    geodesic: np.ndarray  # (n, k) geodesic distance to each neighbour, inf if unreachable
    diameter: float
    sigma_d: float
    sigma_a: float = 15.0
    sigma_c: float = 0.02

    def channels(self, neighbor_index: np.ndarray, geo_dim: int) -> np.ndarray:
        """Sinusoids of relative normal angle, curvature gap and capped geodesic distance."""
        cos = np.abs((self.normals[:, None, :] * self.normals[neighbor_index]).sum(2))
        angle = np.degrees(np.arccos(np.clip(cos, 0.0, 1.0)))
        dcurv = np.abs(self.curvature[:, None] - self.curvature[neighbor_index])
        geod = np.minimum(self.geodesic, 10.0 * self.diameter)
        return np.concatenate([
            sinusoidal(angle / self.sigma_a, geo_dim),
            sinusoidal(dcurv / self.sigma_c, geo_dim),
            sinusoidal(geod / self.sigma_d, geo_dim),
        ], axis=2)


def predict_neighbor_mask(features: np.ndarray, neighbor_index: np.ndarray, geometry: MaskGeometry,
                          params: AttentionParams, tau: float = 0.5) -> NeighborMask:
    """Same-instance confidence for every superpoint/neighbour pair, thresholded at ``tau``."""
    F = np.asarray(features, dtype=np.float64)
    o = mlp_forward(params.mlp2, geometry.channels(neighbor_index, params.geo_dim))
    rel = F[neighbor_index] - F[:, None, :]
    logit = mlp_forward(params.mlp3, np.concatenate([rel, o], axis=2))[..., 0]
    conf = 1.0 / (1.0 + np.exp(-np.clip(logit, -500, 500)))
    return NeighborMask.from_confidence(conf, tau)


@dataclass
class TransformerOutput:
    v_p: np.ndarray
    v_q: np.ndarray
    mask: NeighborMask
    masks: list[NeighborMask] = field(default_factory=list)
    diagnostics: Counter = field(default_factory=Counter)


def instance_focused_transformer(feats_p: np.ndarray, feats_q: np.ndarray,
                                 graph_p: SuperpointGraph, graph_q: SuperpointGraph,
                                 geometry_q: MaskGeometry, params: TransformerParams,
                                 tau: float = 0.5) -> TransformerOutput:
    """Interleave mask prediction, regional association and cross-attention.

    The target mask is re-predicted at the start of every block from the
    current target features, and once more from the final features.
    """
    diag: Counter = Counter()
    F_p, F_q = np.asarray(feats_p, float), np.asarray(feats_q, float)
    masks = []
    for self_p, cross_p in params.blocks:
        mask = predict_neighbor_mask(F_q, graph_q.neighbor_index, geometry_q, self_p, tau)
        masks.append(mask)
        geo_p = geometric_embeddings(graph_p.superpoints.points, graph_p.neighbor_index, self_p, graph_p.resolution)
        geo_q = geometric_embeddings(graph_q.superpoints.points, graph_q.neighbor_index, self_p, graph_q.resolution)
        H_p = regional_association(F_p, graph_p.neighbor_index, geo_p, None, self_p, diag)
        H_q = regional_association(F_q, graph_q.neighbor_index, geo_q, mask.values, self_p, diag)
        F_p, F_q = cross_attention(H_p, H_q, cross_p)
    final = predict_neighbor_mask(F_q, graph_q.neighbor_index, geometry_q, params.blocks[-1][0], tau)
    masks.append(final)
    return TransformerOutput(F_p, F_q, final, masks, diag)
