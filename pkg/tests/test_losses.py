import json
import math
from pathlib import Path

import numpy as np
import pytest

import oracles
from afa import losses as L
from afa.losses import ContrastiveBatch, LossConfig
from afa.nn import Model, synthetic_spec
from afa.tensor import Tensor, grad_check

GOLDEN = json.loads((Path(__file__).parent / "golden" / "losses.json").read_text())


def unit_rows(rng, n, d):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def random_batch(rng, n_src=None, k=2, n_cls=None):
    """Multiview bookkeeping where every label is carried by at least two rows."""
    n_src = n_src or int(rng.integers(2, 7))
    n_cls = n_cls or int(rng.integers(1, n_src + 1))
    src_labels = rng.integers(0, n_cls, size=n_src)
    return ContrastiveBatch(np.repeat(src_labels, k), np.repeat(np.arange(n_src), k))


class TestCrossEntropy:
    def test_uniform_logits(self, f64):
        assert L.cross_entropy(Tensor(np.zeros((3, 5))), [0, 1, 4]).item() == pytest.approx(math.log(5))

    def test_confident_logits(self, f64):
        assert L.cross_entropy(Tensor([[20.0, 0.0]]), [0]).item() == pytest.approx(math.log1p(math.exp(-20)), rel=1e-6)

    def test_two_class_zero_logits(self, f64):
        assert L.cross_entropy(Tensor([[0.0, 0.0]]), [1]).item() == pytest.approx(0.6931471805599453)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            L.cross_entropy(Tensor([[0.0, 0.0]]), [2])


class TestKL:
    def test_identical_is_zero(self, rng, f64):
        p = Tensor(rng.normal(size=(4, 3)))
        assert L.kl_divergence(p, p).item() == pytest.approx(0.0, abs=1e-12)

    def test_hand_value(self, f64):
        value = L.kl_divergence(Tensor([[0.0, 0.0]]), Tensor([[0.0, 20.0]])).item()
        assert value == pytest.approx(oracles.kl([[0.0, 0.0]], [[0.0, 20.0]]), abs=1e-9)
        assert value == pytest.approx(9.307, abs=5e-4)

    def test_asymmetric(self, f64):
        a, b = Tensor([[0.0, 0.0]]), Tensor([[0.0, 20.0]])
        assert abs(L.kl_divergence(a, b).item() - L.kl_divergence(b, a).item()) > 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            L.kl_divergence(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


class TestContrastive:
    def test_identical_embeddings_closed_form(self, f64):
        z = Tensor(np.tile([[1.0, 0.0]], (4, 1)))
        batch = ContrastiveBatch([0, 0, 1, 1], [0, 0, 1, 1])
        assert L.contrastive_self(z, batch).item() == pytest.approx(4 * math.log(3))
        assert L.contrastive_sup(z, batch).item() == pytest.approx(4 * math.log(3))

    def test_single_source_two_views_is_zero(self, rng, f64):
        z = Tensor(unit_rows(rng, 2, 3))
        assert L.contrastive_self(z, ContrastiveBatch([0, 0], [0, 0])).item() == pytest.approx(0.0, abs=1e-12)

    def test_sup_equals_self_with_one_source_per_class(self, rng, f64):
        z = Tensor(unit_rows(rng, 6, 4))
        batch = ContrastiveBatch([0, 0, 1, 1, 2, 2], [0, 0, 1, 1, 2, 2])
        assert L.contrastive_sup(z, batch).item() == pytest.approx(L.contrastive_self(z, batch).item(), abs=1e-6)

    def test_empty_positive_set_names_anchor(self, rng):
        z = Tensor(unit_rows(rng, 3, 2))
        with pytest.raises(L.EmptyPositiveSetError) as err:
            L.contrastive_sup(z, ContrastiveBatch([0, 0, 1], [0, 1, 2]))
        assert err.value.anchor == 2

    def test_anchor_mask_restricts_sum(self, rng, f64):
        z = Tensor(unit_rows(rng, 4, 3))
        full = ContrastiveBatch([0, 0, 1, 1], [0, 0, 1, 1])
        half = ContrastiveBatch([0, 0, 1, 1], [0, 0, 1, 1], anchor_mask=[1, 0, 1, 0])
        a = L.contrastive_sup(z, half).item()
        assert 0 < a < L.contrastive_sup(z, full).item()


class TestAFALoss:
    def test_orthogonal_anchor_hand_value(self, f64):
        # positives orthogonal to the anchor, one negative collinear, one orthogonal negative
        clean = Tensor([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
        batch = ContrastiveBatch([0, 0, 1, 1], [0, 1, 2, 3])
        adv = Tensor([[1.0, 0.0, 0.0]])
        value = L.afa_loss(adv, clean, batch, counterpart=[0], tau=0.5).item()
        assert value == pytest.approx(math.log(3 + math.e ** 2), abs=1e-12)
        assert value == pytest.approx(2.339, abs=2e-3)

    def test_delta_zero_golden(self, f64):
        g = GOLDEN["afa_delta0"]
        z = Tensor(np.array(g["z"]))
        batch = ContrastiveBatch(g["labels"], [0, 0, 1, 1])
        assert L.afa_loss(z, z, batch, tau=g["tau"]).item() == pytest.approx(g["value"], abs=1e-9)

    def test_self_counterpart_is_in_view_and_positive(self, rng, f64):
        z = unit_rows(rng, 4, 3)
        labels = [0, 0, 1, 1]
        batch = ContrastiveBatch(labels, [0, 0, 1, 1])
        with_self = L.afa_loss(Tensor(z), Tensor(z), batch).item()
        without = L.afa_loss(Tensor(z), Tensor(z), batch, exclude_self=True).item()
        assert with_self == pytest.approx(oracles.afa_loss(z, z, labels, range(4), 0.5), abs=1e-9)
        assert without == pytest.approx(oracles.afa_loss(z, z, labels, range(4), 0.5, exclude_self=True), abs=1e-9)
        assert with_self != pytest.approx(without)

    def test_adversarial_rows_never_enter_the_bank(self, rng, f64):
        clean = Tensor(unit_rows(rng, 4, 3))
        batch = ContrastiveBatch([0, 0, 1, 1], [0, 0, 1, 1])
        adv_a = unit_rows(rng, 2, 3)
        adv_b = adv_a.copy()
        adv_b[1] = unit_rows(rng, 1, 3)[0]
        # anchor 0's term does not depend on the other adversarial row
        a = L.afa_loss(Tensor(adv_a[:1]), clean, batch, counterpart=[0]).item()
        b = L.afa_loss(Tensor(adv_b[:1]), clean, batch, counterpart=[0]).item()
        assert a == b


class TestComposites:
    def test_trades_reduces_to_ce(self, rng, f64):
        model = Model(synthetic_spec(dim=2, num_classes=3, widths=(4,))).astype(np.float64)
        x, y = rng.normal(size=(5, 2)), [0, 1, 2, 0, 1]
        ce = L.cross_entropy(model.logits(x), y).item()
        assert L.trades_objective(model, x, x, y, beta=6.0).item() == pytest.approx(ce, abs=1e-12)
        assert L.trades_objective(model, x, x + 0.1, y, beta=0.0).item() == pytest.approx(ce, abs=1e-12)

    def test_trades_golden(self, f64):
        g = GOLDEN["trades_beta6"]
        model = Model(synthetic_spec(dim=2, num_classes=3, widths=(4,)), seed=g["model_seed"]).astype(np.float64)
        value = L.trades_objective(model, np.array(g["x"]), np.array(g["x_adv"]), g["y"], beta=6.0).item()
        assert value == pytest.approx(g["value"], abs=1e-9)

    def test_afa_objective_lambda_edges(self, rng, f64):
        z = Tensor(unit_rows(rng, 6, 4))
        adv = Tensor(unit_rows(rng, 4, 4))
        batch = ContrastiveBatch([0, 0, 0, 1, 1, 1], [0, 0, 0, 1, 1, 1])
        cp = [0, 1, 3, 4]
        sup = L.contrastive_sup(z, batch).item()
        afa = L.afa_loss(adv, z, batch, cp).item()
        assert L.afa_objective(z, batch, adv, cp, LossConfig(lambda1=1, lambda2=0)).item() == pytest.approx(sup)
        assert L.afa_objective(z, batch, adv, cp, LossConfig(lambda1=0, lambda2=2)).item() == pytest.approx(2 * afa)

    def test_afa_objective_golden_sum(self, f64):
        g = GOLDEN["afa_delta0"]
        z = Tensor(np.array(g["z"]))
        batch = ContrastiveBatch(g["labels"], [0, 0, 1, 1])
        value = L.afa_objective(z, batch, z, None, LossConfig(lambda1=1, lambda2=2)).item()
        assert value == pytest.approx(g["sup_value"] + 2 * g["value"], abs=1e-9)

    def test_joint_loss(self):
        assert L.joint_loss(1.0, 2.0, 0.1) == pytest.approx(1.2)
        assert L.joint_loss(1.5, 9.0, 0.0) == 1.5
        assert LossConfig().joint_afa_weight == 0.1

    def test_joint_loss_rejects_non_finite(self):
        with pytest.raises(ValueError):
            L.joint_loss(float("nan"), 1.0)

    def test_config_invariants(self):
        for bad in (dict(tau=0), dict(lambda1=-1), dict(lambda1=0, lambda2=0), dict(beta=-1)):
            with pytest.raises(ValueError):
                LossConfig(**bad)
        cfg = LossConfig()
        assert (cfg.tau, cfg.lambda1, cfg.lambda2) == (0.5, 1.0, 2.0)


class TestOracleEquivalence:
    """Vectorised contrastive losses against the naive loops in ``oracles``."""

    @pytest.mark.parametrize("seed", range(50))
    def test_random_batches(self, seed, f64):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 4))
        batch = random_batch(rng, n_src=int(rng.integers(2, 12 // k + 1)), k=k)
        n = len(batch)
        assert n <= 12
        z = unit_rows(rng, n, 5)
        tau = float(rng.uniform(0.1, 1.0))
        zt = Tensor(z)
        assert L.contrastive_self(zt, batch, tau).item() == pytest.approx(
            oracles.self_loss(z, batch.source_index, tau), abs=1e-6)
        assert L.contrastive_sup(zt, batch, tau).item() == pytest.approx(
            oracles.sup_loss(z, batch.labels, tau), abs=1e-6)
        cp = rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False)
        adv = unit_rows(rng, len(cp), 5)
        assert L.afa_loss(Tensor(adv), zt, batch, cp, tau).item() == pytest.approx(
            oracles.afa_loss(adv, z, batch.labels, cp, tau), abs=1e-6)


class TestInvariance:
    @pytest.mark.parametrize("seed", range(5))
    def test_permutation(self, seed, f64):
        rng = np.random.default_rng(seed)
        batch = random_batch(rng, n_src=5, k=2)
        z = unit_rows(rng, len(batch), 4)
        perm = rng.permutation(len(batch))
        pb = ContrastiveBatch(batch.labels[perm], batch.source_index[perm])
        for fn in (L.contrastive_self, L.contrastive_sup):
            assert fn(Tensor(z[perm]), pb).item() == pytest.approx(fn(Tensor(z), batch).item(), abs=1e-9)
        assert L.afa_loss(Tensor(z[perm]), Tensor(z[perm]), pb).item() == pytest.approx(
            L.afa_loss(Tensor(z), Tensor(z), batch).item(), abs=1e-9)

    def test_large_tau_limit(self, rng, f64):
        batch = ContrastiveBatch([0, 0, 1, 1, 1, 1], [0, 0, 1, 1, 2, 2])
        z = Tensor(unit_rows(rng, 6, 3))
        n = len(batch)
        assert L.contrastive_self(z, batch, 1e6).item() == pytest.approx(n * math.log(n - 1), abs=1e-3)
        assert L.contrastive_sup(z, batch, 1e6).item() == pytest.approx(n * math.log(n - 1), abs=1e-3)
        assert L.afa_loss(z, z, batch, tau=1e6).item() == pytest.approx(n * math.log(n), abs=1e-3)


def loss_cases(seed):
    """``name -> (fn, point)`` for every loss, built under the active precision."""
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(4, 3))
    other = Tensor(rng.normal(size=(4, 3)))
    y = rng.integers(0, 3, size=4)
    batch = ContrastiveBatch([0, 0, 1, 1], [0, 0, 1, 1])
    emb = rng.normal(size=(4, 5))
    bank = Tensor(unit_rows(rng, 4, 5))
    model = Model(synthetic_spec(dim=2, num_classes=3, widths=(4,)), seed=seed).astype(np.float64)
    x = rng.normal(size=(4, 2))
    return {
        "ce": (lambda t: L.cross_entropy(t, y), logits),
        "kl_p": (lambda t: L.kl_divergence(t, other), logits),
        "kl_q": (lambda t: L.kl_divergence(other, t), logits),
        "self": (lambda t: L.contrastive_self(t.l2_normalize(), batch), emb),
        "sup": (lambda t: L.contrastive_sup(t.l2_normalize(), batch), emb),
        "afa_anchor": (lambda t: L.afa_loss(t.l2_normalize(), bank, batch), emb),
        "afa_bank": (lambda t: L.afa_loss(bank, t.l2_normalize(), batch), emb),
        "trades_x_adv": (lambda t: L.trades_objective(model, x, t, y, beta=6.0), x + 0.05),
    }


class TestGradients:
    """grad_check on every loss in float64, ten seeds."""

    @pytest.mark.parametrize("seed", range(10))
    def test_losses(self, seed, f64):
        for name, (fn, at) in loss_cases(seed).items():
            err = grad_check(fn, at)
            assert err < 1e-5, f"{name}: {err}"
