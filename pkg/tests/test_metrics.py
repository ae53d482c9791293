import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mireg.geom import RigidTransform, random_rotation, rotation_about_axis
from mireg.metrics import (
    EvalReport, PairCounts, SuccessProfile, aggregate, get_profile, match_instances,
    rotation_error, translation_error,
)

from oracles import exhaustive_successes

WELD = get_profile("welding")
rotations = st.integers(0, 2**32 - 1).map(lambda s: random_rotation(np.random.default_rng(s)))


class TestErrors:
    def test_rotation_cases(self):
        I = np.eye(3)
        assert rotation_error(I, I) == pytest.approx(0.0, abs=1e-9)
        assert rotation_error(I, rotation_about_axis([0, 0, 1], np.pi / 2)) == pytest.approx(90.0, abs=1e-9)
        assert rotation_error(I, np.diag([1.0, -1.0, -1.0])) == pytest.approx(180.0, abs=1e-9)

    def test_translation_cases(self):
        assert translation_error([1.0, 2, 3], [1.0, 2, 3]) == 0.0
        assert translation_error([0, 0, 0], [1.0, 0, 0]) == 1.0
        assert translation_error([0, 0, 0], [3.0, 4.0, 0]) == pytest.approx(5.0, abs=1e-9)

    @given(rotations, rotations, rotations)
    @settings(max_examples=50, deadline=None)
    def test_rotation_error_invariances(self, A, B, S):
        assert rotation_error(A, B) == pytest.approx(rotation_error(B, A), abs=1e-9)
        assert rotation_error(S @ A, S @ B) == pytest.approx(rotation_error(A, B), abs=1e-9)
        assert 0.0 <= rotation_error(A, B) <= 180.0


class TestProfiles:
    def test_known(self):
        assert (WELD.re_max, WELD.te_max) == (15.0, 0.2)
        assert get_profile("scan2cad").te_max == 0.1

    def test_unknown(self):
        with pytest.raises(ValueError):
            get_profile("lab")

    def test_thresholds_positive(self):
        with pytest.raises(ValueError):
            SuccessProfile("x", 0.0, 1.0)


def _T(seed, t):
    return RigidTransform(random_rotation(np.random.default_rng(seed)), np.asarray(t, float))


class TestMatching:
    def test_exact(self):
        gt = [_T(i, [i, 0, 0]) for i in range(4)]
        assert match_instances(gt, gt, WELD).m_suc == 4

    def test_duplicates_count_once(self):
        gt = [_T(1, [0, 0, 0])]
        dup = [gt[0], RigidTransform(gt[0].rotation, [0.05, 0, 0])]
        c = match_instances(dup, gt, WELD)
        assert (c.m_suc, c.m_gt, c.m_pred) == (1, 1, 2)

    def test_greedy_prefers_smaller_error(self):
        gt = [RigidTransform(np.eye(3), [0, 0, 0]), RigidTransform(np.eye(3), [0.3, 0, 0])]
        pred = [RigidTransform(np.eye(3), [0.15, 0, 0]), RigidTransform(np.eye(3), [0.01, 0, 0])]
        assert match_instances(pred, gt, WELD).m_suc == 2

    def test_against_exhaustive_assignment(self):
        rng = np.random.default_rng(42)
        disagreements = 0
        for _ in range(200):
            gt = [RigidTransform(np.eye(3), rng.uniform(0, 0.6, 3)) for _ in range(5)]
            pred = [RigidTransform(rotation_about_axis(rng.normal(size=3), np.radians(rng.uniform(0, 20))),
                                   g.translation + rng.normal(scale=0.12, size=3)) for g in gt]
            greedy = match_instances(pred, gt, WELD).m_suc
            best = exhaustive_successes([(p.rotation, p.translation) for p in pred],
                                        [(g.rotation, g.translation) for g in gt], WELD.re_max, WELD.te_max)
            assert greedy <= best
            disagreements += greedy != best
        # greedy by error is a heuristic; at this scale it rarely loses a success
        assert disagreements <= 20

    @given(st.integers(0, 10_000), st.integers(0, 6), st.integers(0, 6))
    @settings(max_examples=40, deadline=None)
    def test_never_exceeds_counts(self, seed, n_pred, n_gt):
        rng = np.random.default_rng(seed)
        pred = [RigidTransform(np.eye(3), rng.uniform(0, 0.3, 3)) for _ in range(n_pred)]
        gt = [RigidTransform(np.eye(3), rng.uniform(0, 0.3, 3)) for _ in range(n_gt)]
        c = match_instances(pred, gt, WELD)
        assert c.m_suc <= min(n_pred, n_gt)


class TestAggregate:
    def test_3_4_5(self):
        r = aggregate([PairCounts(3, 4, 5)])
        assert r.mr == pytest.approx(0.75, abs=1e-9)
        assert r.mp == pytest.approx(0.6, abs=1e-9)
        assert r.mf == pytest.approx(2 * 0.75 * 0.6 / 1.35, abs=1e-9)

    def test_all_success(self):
        r = aggregate([PairCounts(2, 2, 2), PairCounts(5, 5, 5)])
        assert (r.mr, r.mp, r.mf) == (1.0, 1.0, 1.0)

    def test_zero(self):
        r = aggregate([PairCounts(0, 3, 0)])
        assert (r.mr, r.mp, r.mf) == (0.0, 0.0, 0.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate([])

    def test_invalid_counts(self):
        with pytest.raises(ValueError):
            PairCounts(4, 3, 5)

    def test_gt_against_itself(self):
        gt = [_T(i, [i, 0, 0]) for i in range(3)]
        r = aggregate([match_instances(gt, gt, WELD)])
        assert (r.mr, r.mp, r.mf) == (1.0, 1.0, 1.0)

    @given(st.lists(st.tuples(st.integers(0, 8), st.integers(0, 8), st.integers(0, 8)), min_size=1, max_size=10))
    def test_harmonic_bounds(self, triples):
        counts = [PairCounts(min(s, g, p), g, p) for s, g, p in triples]
        r = aggregate(counts)
        for v in (r.mr, r.mp, r.mf):
            assert 0.0 <= v <= 1.0
        assert r.mf <= 2 * min(r.mr, r.mp) + 1e-12
        assert r.mf <= max(r.mr, r.mp) + 1e-12

    def test_report_formats(self):
        c = PairCounts(1, 2, 1, [3.0], [0.5], "s0", 0.25)
        r = aggregate([c])
        doc = r.to_json()
        assert doc["per_pair"][0]["mean_RE"] == 3.0
        lines = r.to_csv().splitlines()
        assert lines[0] == ",".join(EvalReport.CSV_HEADER)
        assert lines[1] == "s0,1,2,1,3.0,0.5,0.25"
