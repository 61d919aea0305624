"""Two-stream region scoring: softmax-product structure, aggregation rules,
tie-breaking, permutation equivariance, training gradients."""

import numpy as np
import pytest

from camtrap import wsddn
from camtrap.features import Region, RegionFeatures


def make_rf(matrix):
    matrix = np.asarray(matrix, dtype=float)
    regions = tuple(Region(0, i, 1, i + 1) for i in range(matrix.shape[0]))
    return RegionFeatures(regions=regions, matrix=matrix)


def rand_head(rng, d, c, names=None):
    names = names or tuple(f"c{i}" for i in range(c))
    return wsddn.TwoStreamHead(
        w_rec=rng.normal(size=(d, c)), w_det=rng.normal(size=(d, c)), class_names=names
    )


def oracle_score(matrix, w_rec, w_det):
    """Straight-line reimplementation of the two softmaxes and product."""
    u = matrix @ w_rec
    v = matrix @ w_det
    rec = np.zeros_like(u)
    for r in range(u.shape[0]):
        e = np.exp(u[r] - u[r].max())
        rec[r] = e / e.sum()
    det = np.zeros_like(v)
    for c in range(v.shape[1]):
        e = np.exp(v[:, c] - v[:, c].max())
        det[:, c] = e / e.sum()
    return rec * det, rec, det


class TestScoreRegions:
    def test_single_region_collapse(self):
        rng = np.random.default_rng(0)
        head = rand_head(rng, 4, 3)
        rf = make_rf(rng.normal(size=(1, 4)))
        s = wsddn.score_regions(rf, head)
        assert np.allclose(s.detection, 1.0)
        assert np.allclose(s.scores, s.recognition)
        assert abs(s.recognition.sum() - 1.0) < 1e-12

    def test_zero_weights_uniform(self):
        head = wsddn.TwoStreamHead(np.zeros((4, 3)), np.zeros((4, 3)), ("a", "b", "c"))
        rf = make_rf(np.random.default_rng(0).normal(size=(5, 4)))
        s = wsddn.score_regions(rf, head)
        assert np.allclose(s.recognition, 1 / 3)
        assert np.allclose(s.detection, 1 / 5)
        assert np.allclose(s.scores, 1 / 15)

    def test_matches_straight_line_oracle(self):
        rng = np.random.default_rng(1)
        head = rand_head(rng, 6, 3)
        rf = make_rf(rng.normal(size=(5, 6)))
        s = wsddn.score_regions(rf, head)
        scores, rec, det = oracle_score(rf.matrix, head.w_rec, head.w_det)
        assert np.allclose(s.scores, scores, atol=1e-12)
        assert np.allclose(s.recognition, rec, atol=1e-12)
        assert np.allclose(s.detection, det, atol=1e-12)

    def test_softmax_product_structure(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            r, c, d = rng.integers(1, 10), rng.integers(2, 6), rng.integers(2, 8)
            head = rand_head(rng, d, c)
            s = wsddn.score_regions(make_rf(rng.normal(size=(r, d))), head)
            assert np.allclose(s.recognition.sum(axis=1), 1.0, atol=1e-9)
            assert np.allclose(s.detection.sum(axis=0), 1.0, atol=1e-9)
            assert np.all(s.scores > 0.0) and np.all(s.scores <= 1.0)

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            wsddn.score_regions(make_rf(rng.normal(size=(2, 3))), rand_head(rng, 4, 2))


class TestAggregation:
    def test_sum_single_row(self):
        rng = np.random.default_rng(0)
        s = wsddn.score_regions(make_rf(rng.normal(size=(1, 4))), rand_head(rng, 4, 3))
        cs = wsddn.aggregate_sum(s, ("a", "b", "c"))
        assert np.allclose(cs.values, np.clip(s.scores[0], wsddn.EPS, 1 - wsddn.EPS))

    def test_sum_bounded_by_one(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            s = wsddn.score_regions(make_rf(rng.normal(size=(6, 4))), rand_head(rng, 4, 3))
            cs = wsddn.aggregate_sum(s, ("a", "b", "c"))
            assert np.all(cs.values <= 1.0)

    def test_sum_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        s = wsddn.score_regions(make_rf(rng.normal(size=(4, 5))), rand_head(rng, 5, 2))
        expected = np.array(
            [sum(s.scores[r, c] for r in range(4)) for c in range(2)]
        )
        cs = wsddn.aggregate_sum(s, ("a", "b"))
        assert np.allclose(cs.values, np.clip(expected, wsddn.EPS, 1 - wsddn.EPS))

    def test_topk_saturates_to_column_means(self):
        rng = np.random.default_rng(3)
        s = wsddn.score_regions(make_rf(rng.normal(size=(4, 5))), rand_head(rng, 5, 3))
        cs = wsddn.aggregate_topk(s, ("a", "b", "c"), wsddn.AggregationConfig(k=10))
        assert np.allclose(cs.values, s.scores.mean(axis=0))

    def test_topk_matches_brute_force(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            r = int(rng.integers(1, 13))
            k = int(rng.integers(1, 13))
            s = wsddn.score_regions(make_rf(rng.normal(size=(r, 5))), rand_head(rng, 5, 3))
            cs = wsddn.aggregate_topk(s, ("a", "b", "c"), wsddn.AggregationConfig(k=k))
            row_max = s.scores.max(axis=1)
            order = sorted(range(r), key=lambda i: (-row_max[i], i))
            expected = s.scores[order[: min(k, r)]].mean(axis=0)
            assert np.allclose(cs.values, expected, atol=1e-12)

    def test_topk_row_permutation_invariant(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            s = wsddn.score_regions(make_rf(rng.normal(size=(7, 4))), rand_head(rng, 4, 3))
            if len(np.unique(s.scores.max(axis=1))) < 7:
                continue  # tie rule only defined for distinct maxima
            perm = rng.permutation(7)
            permuted = wsddn.RegionScoreMatrix(
                scores=s.scores[perm], recognition=s.recognition[perm], detection=s.detection[perm]
            )
            cfg = wsddn.AggregationConfig(k=3)
            a = wsddn.aggregate_topk(s, ("a", "b", "c"), cfg)
            b = wsddn.aggregate_topk(permuted, ("a", "b", "c"), cfg)
            assert np.allclose(a.values, b.values, atol=1e-12)


class TestPredictTopk:
    def test_argmax(self):
        cs = wsddn.ClassScores(np.array([0.2, 0.8]), ("a", "b"))
        assert wsddn.predict_topk(cs, 1) == ["b"]

    def test_tie_goes_to_lower_index(self):
        cs = wsddn.ClassScores(np.array([0.5, 0.5, 0.1]), ("a", "b", "c"))
        assert wsddn.predict_topk(cs, 2) == ["a", "b"]

    def test_full_ranking_is_permutation(self):
        cs = wsddn.ClassScores(np.array([0.1, 0.9, 0.5]), ("a", "b", "c"))
        assert sorted(wsddn.predict_topk(cs, 3)) == ["a", "b", "c"]

    def test_k_out_of_range(self):
        cs = wsddn.ClassScores(np.array([0.1, 0.9]), ("a", "b"))
        for k in (0, 3):
            with pytest.raises(ValueError):
                wsddn.predict_topk(cs, k)

    def test_class_permutation_equivariance(self):
        rng = np.random.default_rng(6)
        d, c = 5, 4
        names = ("a", "b", "c", "d")
        head = rand_head(rng, d, c, names)
        rf = make_rf(rng.normal(size=(6, d)))
        perm = np.array([2, 0, 3, 1])
        permuted_head = wsddn.TwoStreamHead(
            w_rec=head.w_rec[:, perm],
            w_det=head.w_det[:, perm],
            class_names=tuple(names[i] for i in perm),
        )
        a = wsddn.aggregate_topk(wsddn.score_regions(rf, head), names)
        b = wsddn.aggregate_topk(
            wsddn.score_regions(rf, permuted_head), permuted_head.class_names
        )
        assert wsddn.predict_topk(a, c) == wsddn.predict_topk(b, c)


class TestDetectRegion:
    def test_single_region(self):
        rng = np.random.default_rng(0)
        s = wsddn.score_regions(make_rf(rng.normal(size=(1, 4))), rand_head(rng, 4, 2))
        assert wsddn.detect_region(s, 0) == 0

    def test_dominant_row(self):
        scores = np.array([[0.1, 0.1], [0.5, 0.6], [0.2, 0.2]])
        s = wsddn.RegionScoreMatrix(scores=scores, recognition=scores, detection=scores)
        assert wsddn.detect_region(s, 0) == 1
        assert wsddn.detect_region(s, 1) == 1

    def test_class_out_of_range(self):
        s = wsddn.RegionScoreMatrix(np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2)))
        with pytest.raises(ValueError):
            wsddn.detect_region(s, 2)


class TestTraining:
    def make_dataset(self, rng, n=2, r=3, c=2, d=4):
        ds = []
        for i in range(n):
            target = np.zeros(c)
            target[i % c] = 1.0
            ds.append((make_rf(rng.normal(size=(r, d))), target))
        return ds

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        for trial in range(20):
            ds = self.make_dataset(rng)
            x = np.stack([rf.matrix for rf, _ in ds])
            targets = np.stack([t for _, t in ds])
            a = rng.normal(size=(4, 2))
            b = rng.normal(size=(4, 2))
            _, ga, gb = wsddn._bce_loss_and_grad(x, targets, a, b, l2=1e-4)
            eps = 1e-6
            for mat, grad in ((a, ga), (b, gb)):
                for _ in range(3):
                    i, j = rng.integers(4), rng.integers(2)
                    bump = np.zeros_like(mat)
                    bump[i, j] = eps
                    lp, _, _ = wsddn._bce_loss_and_grad(
                        x, targets, a + (bump if mat is a else 0), b + (bump if mat is b else 0), 1e-4
                    )
                    lm, _, _ = wsddn._bce_loss_and_grad(
                        x, targets, a - (bump if mat is a else 0), b - (bump if mat is b else 0), 1e-4
                    )
                    num = (lp - lm) / (2 * eps)
                    denom = max(abs(num), abs(grad[i, j]), 1e-8)
                    assert abs(num - grad[i, j]) / denom < 1e-4

    def test_loss_decreases(self):
        rng = np.random.default_rng(1)
        ds = []
        for i in range(8):
            base = np.zeros(4)
            base[i % 2] = 1.0
            m = np.tile(base, (3, 1)) + 0.05 * rng.normal(size=(3, 4))
            t = np.zeros(2)
            t[i % 2] = 1.0
            ds.append((make_rf(m), t))
        head = wsddn.train_head(ds, ("a", "b"), wsddn.HeadTrainConfig(epochs=200, learning_rate=1.0, seed=0))
        assert head.loss_by_epoch[-1] < head.loss_by_epoch[0]
        assert len(head.loss_by_epoch) == 201

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        ds = self.make_dataset(rng, n=4)
        cfg = wsddn.HeadTrainConfig(epochs=20, learning_rate=0.5, seed=3)
        a = wsddn.train_head(ds, ("a", "b"), cfg)
        b = wsddn.train_head(ds, ("a", "b"), cfg)
        assert np.array_equal(a.w_rec, b.w_rec) and np.array_equal(a.w_det, b.w_det)

    def test_single_class_rejected(self):
        rng = np.random.default_rng(3)
        ds = [(make_rf(rng.normal(size=(2, 3))), np.array([1.0, 0.0])) for _ in range(3)]
        with pytest.raises(ValueError):
            wsddn.train_head(ds, ("a", "b"))

    def test_inconsistent_region_counts_rejected(self):
        rng = np.random.default_rng(4)
        ds = [
            (make_rf(rng.normal(size=(2, 3))), np.array([1.0, 0.0])),
            (make_rf(rng.normal(size=(3, 3))), np.array([0.0, 1.0])),
        ]
        with pytest.raises(ValueError):
            wsddn.train_head(ds, ("a", "b"))


class TestHelpers:
    def test_one_hot(self):
        assert np.array_equal(wsddn.one_hot("b", ("a", "b", "c")), np.array([0.0, 1.0, 0.0]))

    def test_head_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        head = rand_head(rng, 3, 2, ("x", "y"))
        path = tmp_path / "h.txt"
        wsddn.save_head(head, path)
        loaded = wsddn.load_head(path)
        assert np.array_equal(loaded.w_rec, head.w_rec)
        assert np.array_equal(loaded.w_det, head.w_det)
        assert loaded.class_names == head.class_names

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "h.txt"
        path.write_text("nope\n")
        with pytest.raises(ValueError):
            wsddn.load_head(path)
