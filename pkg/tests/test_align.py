import numpy as np
import pytest

import oracles
from afa import align
from afa.align import (Metric, alignment_verdict, clustering_factor, knn_accuracy, knn_predict,
                       pairwise_distances, separation_factor)
from afa.attacks import AttackConfig
from afa.data import Dataset, SyntheticSpec, gen_synthetic
from afa.nn import Model, ModelSpec, synthetic_spec
from afa.tensor import Tensor


def identity_model(dim, num_classes, seed=0):
    spec = ModelSpec((dim,), ({"kind": "identity"},), num_classes, projection_dim=4, projection_hidden=dim)
    rng = np.random.default_rng(seed)
    params = {"h.w": rng.normal(size=(dim, num_classes)), "h.b": np.zeros(num_classes),
              "phi.1.w": np.eye(dim), "phi.1.b": np.zeros(dim),
              "phi.2.w": rng.normal(size=(dim, 4)), "phi.2.b": np.zeros(4)}
    return Model(spec, seed, params)


class TestMetric:
    def test_aliases(self):
        assert Metric("inf").kind == "linf"
        with pytest.raises(ValueError):
            Metric("l3")
        with pytest.raises(ValueError):
            Metric("l0", -1)


class TestPairwise:
    def test_linf_hand_value(self):
        assert pairwise_distances([[0, 0]], [[0.3, 0.1]], "linf")[0, 0] == pytest.approx(0.3)

    def test_l0_equal_vectors(self):
        assert pairwise_distances([[1.0, 2.0]], [[1.0, 2.0]], "l0")[0, 0] == 0

    def test_l0_tolerance(self):
        d = pairwise_distances([[0.0, 0.0, 0.0]], [[0.05, 0.2, 0.0]], Metric("l0", 0.1))
        assert d[0, 0] == 1

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            pairwise_distances(np.zeros((2, 3)), np.zeros((2, 4)))

    @pytest.mark.parametrize("kind", ["l0", "l1", "l2", "linf"])
    def test_bitwise_against_double_loop(self, kind, rng):
        a = rng.random((40, 7))
        b = rng.random((30, 7))
        b[3] = a[5]
        fast = pairwise_distances(a, b, kind, block_elems=64)
        slow = np.array([[oracles.distance(p, q, kind) for q in b] for p in a])
        assert np.array_equal(fast, slow)

    def test_norm_ordering(self, rng):
        for _ in range(20):
            d = int(rng.integers(1, 30))
            a, b = rng.normal(size=(15, d)) * rng.uniform(0.1, 10), rng.normal(size=(12, d))
            l1, l2, li = (pairwise_distances(a, b, k) for k in ("l1", "l2", "linf"))
            assert np.all(l2 <= l1 * (1 + 1e-12)) and np.all(li <= l2 * (1 + 1e-12))


class TestReports:
    def test_two_singleton_classes(self):
        sep = separation_factor([[0.0], [1.0]], [0, 1], metric="l2")
        assert sep.min == sep.avg == sep.max == 1.0

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            separation_factor([[0.0], [1.0]], [0, 0])

    def test_identical_class_points(self):
        clu = clustering_factor([[1.0, 1.0]] * 3 + [[5.0, 5.0]] * 2, [0, 0, 0, 1, 1])
        assert clu.max == 0

    def test_singleton_class_warns(self):
        with pytest.warns(UserWarning):
            clu = clustering_factor([[0.0], [1.0], [1.5]], [0, 1, 1], metric="l1")
        assert clu.singleton_classes == [0]
        assert clu.per_sample[0] == 0

    def test_missing_reference_class(self):
        with pytest.raises(ValueError):
            clustering_factor([[0.0], [1.0]], [0, 1], [[0.0]], [0])

    def test_clustering_against_naive_scan(self, rng):
        x = rng.random((25, 4))
        y = rng.integers(0, 3, 25)
        clu = clustering_factor(x, y, metric="l1")
        for i in range(25):
            same = [oracles.distance(x[i], x[j], "l1") for j in range(25) if j != i and y[j] == y[i]]
            assert clu.per_sample[i] == (max(same) if same else 0.0)

    def test_separation_against_naive_scan(self, rng):
        x, y = rng.random((20, 3)), rng.integers(0, 3, 20)
        rx, ry = rng.random((15, 3)), rng.integers(0, 3, 15)
        sep = separation_factor(x, y, rx, ry, metric="l2")
        for (i, j), v in sep.pairs.items():
            cands = [oracles.distance(x[a], rx[b], "l2") for a in range(20) for b in range(15)
                     if {y[a], ry[b]} == {i, j} and y[a] != ry[b]]
            assert v == min(cands)

    def test_verdict(self):
        sep = align.SeparationReport({(0, 1): 2.0}, "linf", "train-test")
        clu = align.ClusteringReport(np.array([0.5, 1.0]), np.array([0, 1]), "linf", "train-test")
        v = alignment_verdict(sep, clu)
        assert v.aligned and v.r == 1.0 and v.R == 0.5

    def test_equality_is_not_aligned(self):
        sep = align.SeparationReport({(0, 1): 1.0}, "linf", "train-test")
        clu = align.ClusteringReport(np.array([0.2, 1.0]), np.array([0, 1]), "linf", "train-test")
        v = alignment_verdict(sep, clu)
        assert not v.aligned and v.witness == 1

    def test_mode_mismatch(self):
        sep = align.SeparationReport({(0, 1): 1.0}, "linf", "train-test")
        clu = align.ClusteringReport(np.array([0.2]), np.array([0]), "linf", "train-adv")
        with pytest.raises(ValueError):
            alignment_verdict(sep, clu)

    def test_certificate_reproduced(self):
        train, test, cert = gen_synthetic(SyntheticSpec(num_classes=3, dim=4, metric="linf", seed=5))
        x = np.concatenate([train.x, test.x])
        y = np.concatenate([train.y, test.y])
        assert separation_factor(x, y, metric="linf").min == cert.min_separation
        assert clustering_factor(x, y, metric="linf").max == cert.max_clustering

    def test_csv_rows(self):
        sep = separation_factor([[0.0], [1.0], [3.0]], [0, 1, 2], metric="l1")
        assert sep.to_csv().splitlines()[0] == "class_i,class_j,min_distance"
        assert len(sep.to_csv().splitlines()) == 4


class TestKNN:
    def test_exact_match(self):
        pred, order = knn_predict([[2.0, 2.0]], [[0.0, 0.0], [2.0, 2.0]], [0, 1])
        assert pred[0] == 1 and order[0, 0] == 1

    def test_one_nn_tie_prefers_lower_class(self):
        pred, _ = knn_predict([[0.0]], [[1.0], [-1.0]], [1, 0], metric="l1")
        assert pred[0] == 0

    def test_vote_tie_broken_by_distance_sum(self):
        pred, _ = knn_predict([[0.0]], [[1.0], [-2.0]], [0, 1], k=2, metric="l1")
        assert pred[0] == 0
        pred, _ = knn_predict([[0.0]], [[-3.0], [2.0]], [0, 1], k=2, metric="l1")
        assert pred[0] == 1

    def test_vote_full_tie_prefers_lower_class(self):
        pred, _ = knn_predict([[0.0]], [[1.0], [-1.0]], [2, 1], k=2, metric="l1")
        assert pred[0] == 1

    def test_majority_beats_distance(self):
        pred, _ = knn_predict([[0.0]], [[0.1], [1.0], [-1.0]], [0, 1, 1], k=3, metric="l1")
        assert pred[0] == 1

    def test_empty_train(self):
        with pytest.raises(ValueError):
            knn_predict([[0.0]], np.zeros((0, 1)), [])

    def test_exclude_self(self):
        x = [[0.0], [0.1], [5.0]]
        pred, _ = knn_predict(x, x, [0, 1, 1], exclude_self=True, metric="l1")
        np.testing.assert_array_equal(pred, [1, 0, 1])

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_positive_scaling_invariance(self, k, rng):
        tx, ty = rng.random((40, 3)), rng.integers(0, 4, 40)
        q = rng.random((25, 3))
        d = pairwise_distances(q, tx, "l2")
        base, _ = knn_predict(None, None, ty, k=k, distances=d)
        for c in rng.uniform(1e-3, 1e3, size=5):
            scaled, _ = knn_predict(None, None, ty, k=k, distances=d * c)
            np.testing.assert_array_equal(scaled, base)


class TestModelProbes:
    def test_identity_extractor_curve(self, rng):
        model = identity_model(3, 3)
        train = Dataset(rng.random((30, 3)), rng.integers(0, 3, 30), num_classes=3)
        test = Dataset(rng.random((20, 3)), rng.integers(0, 3, 20), "test", num_classes=3)
        curve = align.layer_accuracy_curve(model, train, test, "l2")
        expected = knn_accuracy(test.x, test.y, train.x, train.y, 1, "l2")
        assert [k for k, _ in curve] == [1, "penultimate", "network"]
        assert curve[0][1] == curve[1][1] == expected

    def test_accordance_of_a_lookup_table(self, rng):
        model = identity_model(2, 3, seed=1)
        x = rng.random((30, 2))
        train = Dataset(x, model.predict(x), num_classes=3)
        assert align.accordance_rate(model, train, x, k=1) == 1.0

    def test_accordance_in_unit_interval(self, rng):
        model = Model(synthetic_spec(dim=2, num_classes=2), seed=0)
        train = Dataset(rng.normal(size=(30, 2)), rng.integers(0, 2, 30))
        rate = align.accordance_rate(model, train, rng.normal(size=(20, 2)), k=5)
        assert 0.0 <= rate <= 1.0

    def test_adversarial_curve_runs(self, rng):
        model = Model(synthetic_spec(dim=2, num_classes=2, widths=(4,)), seed=0)
        train = Dataset(rng.random((20, 2)), rng.integers(0, 2, 20))
        test = Dataset(rng.random((10, 2)), rng.integers(0, 2, 10), "test")
        curve = align.layer_accuracy_curve(model, train, test, attack=AttackConfig(0.05, 0.02, 3),
                                           rng=np.random.default_rng(0))
        assert curve[-1][0] == "network" and len(curve) == model.spec.depth + 2


class TestLipschitz:
    def test_constant_model(self, rng):
        est = align.lipschitz_estimate(None, rng.uniform(0.2, 0.8, (4, 3)), cfg=AttackConfig(0.1, 0.02, 5),
                                       rng=rng, output_fn=lambda xt: xt * 0)
        assert est.K == 0.0 and len(est.ratios) == 10

    def test_identity_map_induced_norm(self, rng):
        est = align.lipschitz_estimate(None, rng.uniform(0.2, 0.8, (5, 2)), cfg=AttackConfig(0.1, 0.02, 20),
                                       rng=rng, output_fn=lambda xt: xt)
        assert 1.9 <= est.K <= 2.0 + 1e-6

    def test_k_is_max_ratio(self, rng):
        model = Model(synthetic_spec(dim=2, num_classes=3), seed=2)
        x = rng.uniform(0.2, 0.8, (6, 2))
        y = model.predict(x)
        est = align.lipschitz_estimate(model, x, y, AttackConfig(0.05, 0.01, 5), rng)
        assert all(r >= 0 for r in est.ratios)
        assert est.K == max(est.ratios)
        assert 0.0 <= est.worst_accuracy <= 1.0

    def test_needs_positive_budget(self, rng):
        with pytest.raises(ValueError):
            align.lipschitz_estimate(None, np.zeros((1, 2)), cfg=AttackConfig(0.0, 0.1, 1), rng=rng,
                                     output_fn=lambda xt: xt)

    def test_l2_output_norm_rejected(self, rng):
        with pytest.raises(ValueError):
            align.lipschitz_estimate(None, np.full((1, 2), 0.5), cfg=AttackConfig(0.1, 0.1, 1), rng=rng,
                                     output_fn=lambda xt: xt, output_norm="l2")


class TestNormalize:
    def test_joint_range(self):
        a, b = align.minmax_normalize(np.array([1.0, 3.0]), np.array([5.0]))
        np.testing.assert_allclose(a, [0.0, 0.5])
        np.testing.assert_allclose(b, [1.0])


def test_tensor_inputs_accepted():
    d = pairwise_distances(Tensor([[0.0, 1.0]]), Tensor([[1.0, 1.0]]), "l1")
    assert d[0, 0] == 1.0
