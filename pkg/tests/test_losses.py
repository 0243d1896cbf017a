"""Closed-form oracles and gradient checks for all loss functions."""

import numpy as np
import pytest

from tabmodal import losses as LS
from tabmodal import tensor as T
from tabmodal.tensor import Tensor


@pytest.fixture(autouse=True)
def float64_mode():
    with T.precision("float64"):
        yield


def unit_rows(rng, n, p):
    z = rng.normal(size=(n, p))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


class TestInfoNce:
    def test_uniform_similarities_is_log_n(self):
        for n in (2, 3, 5, 8):
            z_i = Tensor(np.tile(np.eye(1, 4, 0), (n, 1)))   # every row e_0
            z_t = Tensor(np.tile(np.eye(1, 4, 1), (n, 1)))   # every row e_1
            batch = LS.ContrastiveBatch(z_i, z_t, temperature=0.2)
            assert abs(LS.info_nce(batch).item() - np.log(n)) < 1e-10

    def test_closed_form_two_by_two(self):
        # similarity matrix [[1, 0], [0, 1]] at temperature 1
        z = Tensor(np.eye(2))
        batch = LS.ContrastiveBatch(z, z, temperature=1.0)
        expected = -np.log(np.e / (np.e + 1.0))
        assert LS.info_nce(batch).item() == pytest.approx(expected, abs=1e-12)
        assert LS.info_nce(batch).item() == pytest.approx(0.31326, abs=1e-5)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        z_i, z_t = unit_rows(rng, 6, 4), unit_rows(rng, 6, 4)
        perm = rng.permutation(6)
        a = LS.info_nce(LS.ContrastiveBatch(Tensor(z_i), Tensor(z_t), 0.1)).item()
        b = LS.info_nce(LS.ContrastiveBatch(Tensor(z_i[perm]), Tensor(z_t[perm]), 0.1)).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_nonnegative_random_batches(self):
        for seed in range(25):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(2, 9))
            batch = LS.ContrastiveBatch(Tensor(unit_rows(rng, n, 5)),
                                        Tensor(unit_rows(rng, n, 5)), 0.3)
            assert LS.info_nce(batch).item() >= 0.0

    def test_positive_similarity_increase_decreases_loss(self):
        rng = np.random.default_rng(1)
        sim = rng.normal(size=(5, 5))
        base = LS._symmetric_nce_from_similarity(Tensor(sim)).item()
        for k in range(5):
            bumped = sim.copy()
            bumped[k, k] += 0.1
            assert LS._symmetric_nce_from_similarity(Tensor(bumped)).item() < base

    def test_small_batch_rejected(self):
        z = Tensor(np.ones((1, 3)))
        with pytest.raises(ValueError, match="N >= 2"):
            LS.ContrastiveBatch(z, z, 0.1)
        with pytest.raises(ValueError, match="temperature"):
            LS.ContrastiveBatch(Tensor(np.eye(2)), Tensor(np.eye(2)), 0.0)

    @pytest.mark.parametrize("n", [2, 4, 8])
    def test_grad_check(self, n):
        rng = np.random.default_rng(7)
        z_t = Tensor(unit_rows(rng, n, 4))
        raw = Tensor(rng.normal(size=(n, 4)))

        def f(p):
            z_i = T.l2_normalize(p, axis=1)
            return LS.info_nce(LS.ContrastiveBatch(z_i, z_t, 0.2))

        assert T.grad_check(f, raw) < 1e-5


class TestClip:
    def test_matched_temperature_equals_info_nce(self):
        rng = np.random.default_rng(2)
        z_i, z_t = Tensor(unit_rows(rng, 5, 4)), Tensor(unit_rows(rng, 5, 4))
        tau = 0.17
        nce = LS.info_nce(LS.ContrastiveBatch(z_i, z_t, tau)).item()
        clip = LS.clip_loss(z_i, z_t, T.scalar(np.log(1.0 / tau))).item()
        assert abs(nce - clip) < 1e-10

    def test_grad_flows_to_temperature(self):
        rng = np.random.default_rng(3)
        z_i, z_t = Tensor(unit_rows(rng, 4, 3)), Tensor(unit_rows(rng, 4, 3))

        def f(t):
            return LS.clip_loss(z_i, z_t, T.reshape(t, ()))

        assert T.grad_check(f, Tensor(np.array(1.2))) < 1e-5


class TestSimSiam:
    def test_identical_towers_perfect_alignment(self):
        rng = np.random.default_rng(4)
        z = Tensor(unit_rows(rng, 4, 5))
        assert LS.simsiam_loss(z, z, z, z).item() == pytest.approx(-1.0, abs=1e-12)

    def test_stop_gradient_on_targets(self):
        rng = np.random.default_rng(5)
        p = Tensor(rng.normal(size=(3, 4)))
        z = Tensor(rng.normal(size=(3, 4)))
        with T.Tape() as tape:
            pt = tape.param("p", p)
            zt = tape.param("z", z)
            loss = LS.simsiam_loss(pt, pt, pt, zt)
        grads = T.backward(tape, loss)
        np.testing.assert_array_equal(grads["z"].numpy(), np.zeros((3, 4)))
        assert np.abs(grads["p"].numpy()).max() > 0

    def test_grad_check_through_predictions(self):
        rng = np.random.default_rng(6)
        z_i, z_t = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 3)))

        def f(p):
            return LS.simsiam_loss(p, z_i, p, z_t)

        assert T.grad_check(f, Tensor(rng.normal(size=(4, 3)))) < 1e-5


class TestBarlowTwins:
    def test_identity_correlation_is_zero(self):
        z = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
        assert LS.barlow_twins_loss(Tensor(z), Tensor(z)).item() == pytest.approx(0.0, abs=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(7)
        a, b = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        lam = 5e-3
        got = LS.barlow_twins_loss(Tensor(a), Tensor(b), lambda_off=lam).item()
        na = (a - a.mean(0)) / a.std(0)
        nb = (b - b.mean(0)) / b.std(0)
        corr = na.T @ nb / 6
        ref = ((np.diag(corr) - 1) ** 2).sum() + lam * (corr**2)[~np.eye(3, dtype=bool)].sum()
        assert got == pytest.approx(ref, abs=1e-10)

    def test_zero_variance_dimension_rejected(self):
        z = np.ones((4, 2))
        z[:, 0] = [1, 2, 3, 4]
        with pytest.raises(ValueError, match="zero-variance"):
            LS.barlow_twins_loss(Tensor(z), Tensor(z))

    def test_grad_check(self):
        rng = np.random.default_rng(8)
        b = Tensor(rng.normal(size=(5, 3)))

        def f(a):
            return LS.barlow_twins_loss(a, b)

        assert T.grad_check(f, Tensor(rng.normal(size=(5, 3)))) < 1e-5


class TestDownstreamLosses:
    def test_mse_and_l1(self):
        rng = np.random.default_rng(9)
        t = Tensor(rng.normal(size=(4, 3)))
        assert LS.mse_loss(t, t).item() == 0.0
        shifted = Tensor(t.numpy() + 2.0)
        assert LS.l1_loss(shifted, t).item() == pytest.approx(2.0, abs=1e-12)

    def test_huber_quadratic_zone(self):
        pred = Tensor(np.array([[0.5]]))
        target = Tensor(np.array([[0.0]]))
        assert LS.huber_loss(pred, target, delta=1.0).item() == pytest.approx(0.125, abs=1e-15)

    def test_huber_linear_zone_hand_value(self):
        # |d| = 3, delta = 1: 1 * (3 - 0.5) = 2.5
        pred, target = Tensor(np.array([[3.0]])), Tensor(np.array([[0.0]]))
        assert LS.huber_loss(pred, target, delta=1.0).item() == pytest.approx(2.5, abs=1e-12)

    def test_ce_uniform_logits(self):
        for k in (2, 5, 9):
            logits = Tensor(np.zeros((4, k)))
            labels = np.arange(4) % k
            assert LS.cross_entropy(logits, labels).item() == pytest.approx(np.log(k), abs=1e-12)

    def test_ce_hand_computed(self):
        logits = Tensor(np.array([[2.0, 0.0, -1.0]]))
        ref = np.log(np.exp([2.0, 0.0, -1.0]).sum()) - 0.0
        assert LS.cross_entropy(logits, np.array([1])).item() == pytest.approx(ref, abs=1e-12)

    def test_balanced_ce_weighting(self):
        logits = Tensor(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]))
        labels = np.array([0, 1, 0])
        weights = LS.inverse_frequency_weights(labels, 2)
        np.testing.assert_allclose(weights, [2 / 3, 4 / 3])  # 1/2,1/1 scaled to mean 1
        per = np.array([np.log(1 + np.e**-1)] * 3)
        ref = (per * weights[labels]).mean()
        got = LS.balanced_cross_entropy(logits, labels, weights).item()
        assert got == pytest.approx(ref, abs=1e-12)

    def test_focal_hand_computed(self):
        logits = Tensor(np.zeros((2, 4)))
        labels = np.array([0, 3])
        # uniform probs: p=1/4, loss = (1 - 1/4)^2 * ln 4
        ref = (0.75**2) * np.log(4.0)
        assert LS.focal_loss(logits, labels, gamma=2.0).item() == pytest.approx(ref, abs=1e-12)

    def test_unknown_class_id(self):
        with pytest.raises(ValueError, match="class id"):
            LS.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_dim_mismatch(self):
        with pytest.raises(T.ShapeError):
            LS.mse_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))

    @pytest.mark.parametrize("kind", LS.REGRESSION_LOSSES)
    def test_regression_grad_checks(self, kind):
        rng = np.random.default_rng(10)
        target = Tensor(rng.normal(size=(3, 4)))

        def f(p):
            return LS.downstream_loss(kind, p, target)

        assert T.grad_check(f, Tensor(rng.normal(size=(3, 4)))) < 1e-5

    @pytest.mark.parametrize("kind", LS.CLASSIFICATION_LOSSES)
    def test_classification_grad_checks(self, kind):
        rng = np.random.default_rng(11)
        labels = np.array([0, 2, 1])
        kwargs = {}
        if kind == "balanced_ce":
            kwargs["class_weights"] = LS.inverse_frequency_weights(labels, 3)

        def f(p):
            return LS.downstream_loss(kind, p, labels, **kwargs)

        assert T.grad_check(f, Tensor(rng.normal(size=(3, 3)))) < 1e-5


class TestMultiTask:
    def test_fixed_combination(self):
        w = LS.MultiTaskWeights(mode="fixed", lambda_c=0.5, lambda_m=0.5)
        out = LS.combine_multitask(T.scalar(2.0), T.scalar(4.0), w)
        assert out.item() == pytest.approx(3.0, abs=1e-15)

    def test_uncertainty_at_zero_is_sum(self):
        params = {"multitask.s_c": T.zeros(()), "multitask.s_m": T.zeros(())}
        out = LS.combine_multitask(T.scalar(1.5), T.scalar(2.5),
                                   LS.MultiTaskWeights(mode="uncertainty"), params)
        assert out.item() == pytest.approx(4.0, abs=1e-15)

    def test_uncertainty_gradient_matches_analytic(self):
        # dL/ds = -exp(-s) * L_task + 1
        for s_val, l_val in [(0.0, 1.0), (0.7, 2.0), (-0.4, 0.3)]:
            with T.Tape() as tape:
                s_c = tape.param("s_c", Tensor(np.asarray(s_val)))
                s_m = tape.param("s_m", Tensor(np.asarray(0.2)))
                params = {"multitask.s_c": s_c, "multitask.s_m": s_m}
                out = LS.combine_multitask(T.scalar(l_val), T.scalar(1.0),
                                           LS.MultiTaskWeights(mode="uncertainty"), params)
            grads = T.backward(tape, out)
            expected = -np.exp(-s_val) * l_val + 1.0
            assert grads["s_c"].item() == pytest.approx(expected, abs=1e-8)
        # stationary point at s=0 when L=1
        assert abs(-np.exp(0.0) * 1.0 + 1.0) == 0.0

    def test_uncertainty_minimum_at_log_loss(self):
        l_val = 3.0
        values = {s: np.exp(-s) * l_val + s for s in np.linspace(-2, 4, 601)}
        s_star = min(values, key=values.get)
        assert s_star == pytest.approx(np.log(l_val), abs=0.02)

    def test_nan_loss_rejected(self):
        w = LS.MultiTaskWeights(mode="fixed")
        bad = T.Tensor._wrap(np.asarray(np.nan))
        with pytest.raises(T.NumericError):
            LS.combine_multitask(bad, T.scalar(1.0), w)

    def test_bad_weights_rejected(self):
        with pytest.raises(ValueError):
            LS.MultiTaskWeights(mode="fixed", lambda_c=-1.0)
        with pytest.raises(ValueError):
            LS.MultiTaskWeights(mode="soft")
