from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mireg.geom import PointCloud, RigidTransform, SuperpointGraph, knn_graph, random_rotation
from mireg.ift import (
    AttentionParams, MaskGeometry, NeighborMask, TransformerParams, cross_attention,
    geometric_embedding, geometric_embeddings, init_params, instance_focused_transformer,
    predict_neighbor_mask, regional_association, softmax,
)
from mireg.losses import mask_loss
from mireg.matching import SENTINEL

from oracles import masked_attention_row

D, G = 8, 4


@pytest.fixture
def params():
    return init_params(D, G, np.random.default_rng(42))


def _cloud(n, k, seed=0):
    pts = np.random.default_rng(seed).random((n, 3))
    nbr = knn_graph(pts, k)
    return pts, nbr, SuperpointGraph(PointCloud(pts), nbr, np.arange(n), 0.1)


class TestGeometricEmbedding:
    def test_coincident_pair_is_finite(self, params):
        pts = np.array([[0.0, 0, 0], [0.0, 0, 0], [1.0, 0, 0]])
        g = SuperpointGraph(PointCloud(pts), np.array([[1, 2], [0, 2], [0, 1]]), np.arange(3), 0.1)
        assert np.all(np.isfinite(geometric_embedding(g, 0, 0, params)))

    def test_rigid_invariance(self, params):
        pts, nbr, g = _cloud(30, 5)
        T = RigidTransform(random_rotation(np.random.default_rng(1)), [3.0, -1.0, 2.0])
        moved = SuperpointGraph(PointCloud(T.apply(pts)), nbr, np.arange(30), 0.1)
        for i, j in [(0, 0), (7, 3), (29, 4)]:
            np.testing.assert_allclose(geometric_embedding(moved, i, j, params),
                                       geometric_embedding(g, i, j, params), atol=1e-9)

    def test_depends_on_distance(self, params):
        pts = np.array([[0.0, 0, 0], [0.1, 0, 0], [0.0, 0.1, 0]])
        nbr = np.array([[1, 2], [0, 2], [0, 1]])
        a = geometric_embedding(SuperpointGraph(PointCloud(pts), nbr, np.arange(3), 0.1), 0, 0, params)
        b = geometric_embedding(SuperpointGraph(PointCloud(pts * 2), nbr, np.arange(3), 0.1), 0, 0, params)
        assert np.abs(a - b).max() > 1e-3

    def test_table_matches_single_pair(self, params):
        pts, nbr, g = _cloud(20, 4)
        table = geometric_embeddings(pts, nbr, params, 0.1)
        np.testing.assert_allclose(table[5, 2], geometric_embedding(g, 5, 2, params))


class TestRegionalAssociation:
    def test_single_open_neighbour_gets_all_weight(self, params):
        pts, nbr, _ = _cloud(12, 4)
        geo = geometric_embeddings(pts, nbr, params, 0.1)
        mask = np.full(nbr.shape, SENTINEL)
        mask[:, 2] = 0.0
        F = np.random.default_rng(0).normal(size=(12, D))
        _, w = regional_association(F, nbr, geo, mask, params, return_weights=True)
        np.testing.assert_allclose(w[:, 2], 1.0, atol=1e-12)

    def test_weights_match_score_loops(self, params):
        pts, nbr, _ = _cloud(15, 5, seed=3)
        geo = geometric_embeddings(pts, nbr, params, 0.1)
        rng = np.random.default_rng(3)
        F = rng.normal(size=(15, D))
        mask = np.where(rng.random(nbr.shape) < 0.3, SENTINEL, 0.0)
        _, w = regional_association(F, nbr, geo, mask, params, return_weights=True)
        for i in range(15):
            ref = masked_attention_row(F[i], F[nbr[i]], geo[i], mask[i], params.w_q, params.w_k, params.w_r)
            np.testing.assert_allclose(w[i], ref, atol=1e-12)

    def test_fully_masked_row_falls_back_to_uniform(self, params):
        pts, nbr, _ = _cloud(10, 4)
        geo = geometric_embeddings(pts, nbr, params, 0.1)
        mask = np.zeros(nbr.shape)
        mask[3] = SENTINEL
        diag = Counter()
        h, w = regional_association(np.ones((10, D)), nbr, geo, mask, params, diag, return_weights=True)
        np.testing.assert_allclose(w[3], 0.25)
        assert diag["fully_masked_rows"] == 1
        assert np.all(np.isfinite(h))

    def test_output_width(self, params):
        pts, nbr, _ = _cloud(10, 4)
        h = regional_association(np.ones((10, D)), nbr, geometric_embeddings(pts, nbr, params, 0.1), None, params)
        assert h.shape == (10, D)

    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_permutation_equivariant(self, seed):
        rng = np.random.default_rng(seed)
        params = init_params(D, G, rng)
        pts, nbr, _ = _cloud(10, 4, seed)
        geo = geometric_embeddings(pts, nbr, params, 0.1)
        F = rng.normal(size=(10, D))
        mask = np.where(rng.random(nbr.shape) < 0.3, SENTINEL, 0.0)
        perm = rng.permutation(10)
        inv = np.argsort(perm)
        h = regional_association(F, nbr, geo, mask, params)
        h2 = regional_association(F[perm], inv[nbr[perm]], geo[perm], mask[perm], params)
        np.testing.assert_allclose(h2, h[perm], rtol=1e-12, atol=1e-12)


class TestCrossAttention:
    def test_singleton_target(self, params):
        rng = np.random.default_rng(1)
        h_p, h_q = rng.normal(size=(6, D)), rng.normal(size=(1, D))
        v_p, _ = cross_attention(h_p, h_q, params)
        np.testing.assert_allclose(v_p, np.tile(h_q @ params.w_v, (6, 1)), atol=1e-12)

    def test_rows_are_distributions(self, params):
        rng = np.random.default_rng(2)
        *_, a_p, a_q = cross_attention(rng.normal(size=(9, D)), rng.normal(size=(13, D)), params, True)
        np.testing.assert_allclose(a_p.sum(1), 1.0, atol=1e-9)
        np.testing.assert_allclose(a_q.sum(1), 1.0, atol=1e-9)
        assert a_p.min() >= 0

    def test_change_of_basis(self, params):
        rng = np.random.default_rng(3)
        U, _ = np.linalg.qr(rng.normal(size=(D, D)))
        h_p, h_q = rng.normal(size=(8, D)), rng.normal(size=(8, D))
        *_, a_p, a_q = cross_attention(h_p, h_q, params, True)
        p2 = AttentionParams(U.T @ params.w_q, U.T @ params.w_k, U.T @ params.w_v, params.w_r, params.w_geo,
                             params.mlp1, params.mlp2, params.mlp3, G)
        *_, b_p, b_q = cross_attention(h_p @ U, h_q @ U, p2, True)
        np.testing.assert_allclose(b_p, a_p, atol=1e-12)
        np.testing.assert_allclose(b_q, a_q, atol=1e-12)

    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_permutation_equivariant(self, seed):
        rng = np.random.default_rng(seed)
        params = init_params(D, G, rng)
        h_p, h_q = rng.normal(size=(16, D)), rng.normal(size=(11, D))
        pp, pq = rng.permutation(16), rng.permutation(11)
        v_p, v_q = cross_attention(h_p, h_q, params)
        w_p, w_q = cross_attention(h_p[pp], h_q[pq], params)
        np.testing.assert_allclose(w_p, v_p[pp], atol=1e-12)
        np.testing.assert_allclose(w_q, v_q[pq], atol=1e-12)


def _geometry(pts, nbr, normals=None):
    n = len(pts)
    if normals is None:
        normals = np.tile([0.0, 0.0, 1.0], (n, 1))
    geod = np.linalg.norm(pts[:, None] - pts[nbr], axis=2)
    return MaskGeometry(normals, np.zeros(n), geod, 1.0, 0.1)


class TestNeighborMask:
    def test_threshold(self):
        m = NeighborMask.from_confidence(np.array([[0.7, 0.5, 0.49]]), 0.5)
        assert m.values[0, 0] == 0 and m.values[0, 1] == 0 and m.values[0, 2] == SENTINEL

    def test_extreme_taus(self, params):
        pts, nbr, _ = _cloud(12, 4)
        F = np.random.default_rng(0).normal(size=(12, D))
        geom = _geometry(pts, nbr)
        assert (predict_neighbor_mask(F, nbr, geom, params, tau=0.0).values == 0).all()
        assert (predict_neighbor_mask(F, nbr, geom, params, tau=1.0 + 1e-9).values == SENTINEL).all()

    def test_rejects_other_values(self):
        with pytest.raises(ValueError):
            NeighborMask(np.array([[0.5]]), np.array([[0.5]]))

    def test_infinite_geodesic_is_capped(self, params):
        pts, nbr, _ = _cloud(12, 4)
        geom = _geometry(pts, nbr)
        geom.geodesic[0, :] = np.inf
        m = predict_neighbor_mask(np.zeros((12, D)), nbr, geom, params)
        assert np.all(np.isfinite(m.confidence))
        capped = _geometry(pts, nbr)
        capped.geodesic[0, :] = 10.0 * capped.diameter
        np.testing.assert_array_equal(m.confidence, predict_neighbor_mask(np.zeros((12, D)), nbr, capped, params).confidence)

    def test_channels_rigid_invariant(self):
        rng = np.random.default_rng(5)
        pts, nbr, _ = _cloud(20, 5)
        nrm = rng.normal(size=(20, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        R = random_rotation(rng)
        a = _geometry(pts, nbr, nrm).channels(nbr, G)
        b = _geometry(pts @ R.T + 1.0, nbr, nrm @ R.T).channels(nbr, G)
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_toy_fit_prefers_same_instance(self):
        # two 10-superpoint clusters; features carry the cluster id in channel 0
        rng = np.random.default_rng(0)
        pts = np.r_[rng.random((10, 3)) * 0.1, rng.random((10, 3)) * 0.1 + [0.05, 0.0, 0.0]]
        nbr = knn_graph(pts, 6)
        cluster = np.r_[np.zeros(10), np.ones(10)]
        F = np.zeros((20, D))
        F[:, 0] = cluster
        gt = (cluster[:, None] == cluster[nbr]).astype(float)
        assert 0 < gt.mean() < 1
        geom = _geometry(pts, nbr)
        base = init_params(D, G, rng)

        def with_head(s, b):
            W1 = np.zeros((2 * D, D))
            W1[0, 0], W1[0, 1] = s, -s
            W2 = np.zeros((D, 1))
            W2[:2, 0] = -1.0
            mlp3 = [(W1, np.zeros(D)), (W2, np.array([b]))]
            return AttentionParams(base.w_q, base.w_k, base.w_v, base.w_r, base.w_geo, base.mlp1,
                                   [(np.zeros_like(base.mlp2[0][0]), np.zeros(D))], mlp3, G)

        best = min(((mask_loss(predict_neighbor_mask(F, nbr, geom, with_head(s, b)).confidence, gt), s, b)
                    for s in (0.5, 1, 2, 4, 8) for b in (-2, 0, 2, 4)))
        conf = predict_neighbor_mask(F, nbr, geom, with_head(best[1], best[2])).confidence
        same, cross = conf[gt == 1], conf[gt == 0]
        assert same.min() > cross.max()


class TestSoftmax:
    @given(st.integers(0, 10_000))
    @settings(max_examples=10, deadline=None)
    def test_rows_sum_to_one(self, seed):
        x = np.random.default_rng(seed).normal(scale=50, size=(100, 9))
        np.testing.assert_allclose(softmax(x, 1).sum(1), 1.0, atol=1e-9)

    def test_all_masked_row_is_zero(self):
        assert softmax(np.full((1, 3), -np.inf), 1).tolist() == [[0.0, 0.0, 0.0]]


class TestWeightsFile:
    def test_round_trip(self, tmp_path):
        p = TransformerParams.seeded(D, G, 2, seed=3)
        p.save(tmp_path / "w.json")
        back = TransformerParams.load(tmp_path / "w.json", D, G, 2)
        np.testing.assert_allclose(back.blocks[1][0].w_q, p.blocks[1][0].w_q, rtol=1e-6)

    def test_shape_mismatch(self, tmp_path):
        TransformerParams.seeded(D, G, 1, seed=3).save(tmp_path / "w.json")
        with pytest.raises(ValueError, match="shape"):
            TransformerParams.load(tmp_path / "w.json", D * 2, G, 1)

    def test_missing_tensor(self, tmp_path):
        TransformerParams.seeded(D, G, 1, seed=3).save(tmp_path / "w.json")
        with pytest.raises(ValueError, match="lacks"):
            TransformerParams.load(tmp_path / "w.json", D, G, 2)


def test_transformer_forward_is_deterministic():
    pts_p, nbr_p, g_p = _cloud(25, 6, seed=1)
    pts_q, nbr_q, g_q = _cloud(40, 6, seed=2)
    rng = np.random.default_rng(0)
    F_p, F_q = rng.normal(size=(25, D)), rng.normal(size=(40, D))
    params = TransformerParams.seeded(D, G, 3, seed=9)
    a = instance_focused_transformer(F_p, F_q, g_p, g_q, _geometry(pts_q, nbr_q), params)
    b = instance_focused_transformer(F_p, F_q, g_p, g_q, _geometry(pts_q, nbr_q), params)
    assert a.v_p.shape == (25, D) and a.v_q.shape == (40, D)
    assert len(a.masks) == 4
    np.testing.assert_array_equal(a.v_q, b.v_q)
