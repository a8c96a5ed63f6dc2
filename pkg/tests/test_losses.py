import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from priormatch.losses import (LossWeights, NonFiniteLossError, adv_loss_disc,
                               adv_loss_gen, cycle_loss, kl_loss,
                               make_class_weights, recon_loss, seg_loss,
                               soft_dice, task_consistency_loss, total_loss)

from oracles import kl_monte_carlo


@pytest.fixture(autouse=True)
def _float64_default():
    """Loss values are checked to tight tolerances; run this module in 64-bit."""
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


def _fd_grad(fn, x: torch.Tensor, step: float = 1e-5) -> torch.Tensor:
    """Central finite differences of a scalar fn wrt every element of x."""
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        up = fn(x).item()
        flat[i] = orig - step
        down = fn(x).item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return g


def _assert_grad_matches(fn, x: torch.Tensor, rel_tol: float = 1e-5):
    xg = x.clone().requires_grad_(True)
    fn(xg).backward()
    fd = _fd_grad(fn, x.clone())
    denom = torch.maximum(torch.maximum(fd.abs(), xg.grad.abs()),
                          torch.tensor(1e-8))
    assert ((fd - xg.grad).abs() / denom).max() < rel_tol


class TestReconLoss:
    def test_identical_zero(self):
        x = torch.rand(2, 1, 8, 8)
        assert recon_loss(x, x).item() == 0.0

    def test_constant_offset(self):
        x = torch.rand(2, 1, 8, 8)
        assert recon_loss(x + 0.1, x).item() == pytest.approx(0.1, abs=1e-12)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(0)
        a = rng.random((2, 1, 4, 4))
        b = rng.random((2, 1, 4, 4))
        want = np.mean([abs(x - y) for x, y in zip(a.ravel(), b.ravel())])
        got = recon_loss(torch.from_numpy(a), torch.from_numpy(b)).item()
        assert got == pytest.approx(want, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            recon_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 5, 5))

    def test_gradient(self):
        x = torch.rand(1, 1, 3, 3)
        target = torch.rand(1, 1, 3, 3)
        _assert_grad_matches(lambda t: recon_loss(t, target), x)


class TestKlLoss:
    def test_standard_normal_is_zero(self):
        mu = torch.zeros(2, 3, 4, 4)
        assert kl_loss(mu, torch.zeros_like(mu)).item() == 0.0

    def test_single_element_mu_one(self):
        val = kl_loss(torch.ones(1, 1, 1, 1), torch.zeros(1, 1, 1, 1)).item()
        assert val == pytest.approx(0.5, abs=1e-12)
        mc = kl_monte_carlo(np.ones(1), np.zeros(1), 10**6,
                            np.random.default_rng(0))
        assert val == pytest.approx(mc, abs=1e-2)

    def test_single_element_log_var_ln4(self):
        val = kl_loss(torch.zeros(1, 1, 1, 1),
                      torch.full((1, 1, 1, 1), math.log(4.0))).item()
        assert val == pytest.approx(0.5 * (4 - math.log(4) - 1), abs=1e-12)
        mc = kl_monte_carlo(np.zeros(1), np.full(1, math.log(4.0)), 10**6,
                            np.random.default_rng(1))
        assert val == pytest.approx(mc, abs=1e-2)

    def test_nonnegative_and_zero_iff_standard(self):
        for m in np.linspace(-2, 2, 7):
            for lv in np.linspace(-2, 2, 7):
                val = kl_loss(torch.full((1, 1, 1, 1), m),
                              torch.full((1, 1, 1, 1), lv)).item()
                assert val >= 0
                if m == 0 and lv == 0:
                    assert val == 0
                else:
                    assert val > 0

    def test_monte_carlo_agreement(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            mu = rng.uniform(-3, 3, size=4)
            lv = rng.uniform(-2, 2, size=4)
            val = kl_loss(torch.from_numpy(mu).reshape(1, 1, 2, 2),
                          torch.from_numpy(lv).reshape(1, 1, 2, 2)).item()
            mc = kl_monte_carlo(mu, lv, 10**5, rng)
            assert abs(val - mc) / abs(mc) < 0.05

    @settings(max_examples=100, deadline=None)
    @given(m=st.floats(-5, 5), lv=st.floats(-5, 5))
    def test_property_nonnegative(self, m, lv):
        val = kl_loss(torch.full((1, 1, 1, 1), m, dtype=torch.float64),
                      torch.full((1, 1, 1, 1), lv, dtype=torch.float64)).item()
        assert val >= -1e-12  # analytically >= 0; allow float round-off

    def test_reduction_modes(self):
        mu = torch.ones(2, 2, 2, 2)
        lv = torch.zeros_like(mu)
        assert kl_loss(mu, lv, "sum").item() == pytest.approx(4.0)
        # "mean": elementwise KL 0.5 averaged over every element
        assert kl_loss(mu, lv, "mean").item() == pytest.approx(0.5)

    def test_gradient(self):
        mu = torch.randn(1, 2, 2, 2)
        lv = torch.randn(1, 2, 2, 2) * 0.5
        _assert_grad_matches(lambda m: kl_loss(m, lv), mu)
        _assert_grad_matches(lambda v: kl_loss(mu, v), lv)


class TestSegLoss:
    def test_perfect_one_hot(self):
        y = torch.randint(0, 3, (1, 4, 4))
        probs = torch.nn.functional.one_hot(y, 3).permute(0, 3, 1, 2).double()
        probs = probs.clamp(1e-7, 1 - 1e-7)
        probs = probs / probs.sum(dim=1, keepdim=True)
        w = make_class_weights(3, 1.0, torch.float64)  # uniform
        assert seg_loss(probs, y, w).item() < 1e-4

    def test_soft_dice_half(self):
        # single fg class, p=0.5 on all 4 pixels, g on 2 of them
        probs = torch.full((1, 2, 2, 2), 0.5)
        y = torch.tensor([[[1, 1], [0, 0]]])
        assert soft_dice(probs, y).item() == pytest.approx(0.5, abs=1e-4)

    def test_uniform_probs_ce_is_log_k(self):
        k = 5
        probs = torch.full((1, k, 4, 4), 1.0 / k)
        y = torch.randint(0, k, (1, 4, 4))
        w = make_class_weights(k, 1.0, torch.float64)
        val = seg_loss(probs, y, w).item()
        dice_term = 1.0 - soft_dice(probs, y).item()
        assert val - dice_term == pytest.approx(math.log(k), abs=1e-9)

    def test_label_out_of_range(self):
        probs = torch.full((1, 3, 2, 2), 1 / 3)
        y = torch.full((1, 2, 2), 3)
        with pytest.raises(ValueError):
            seg_loss(probs, y, make_class_weights(3))

    def test_dice_permutation_equivariance(self):
        rng = np.random.default_rng(4)
        logits = torch.from_numpy(rng.standard_normal((1, 3, 4, 4)))
        probs = torch.softmax(logits, dim=1)
        y = torch.from_numpy(rng.integers(0, 3, (1, 4, 4)))
        perm = rng.permutation(16)
        probs_s = probs.reshape(1, 3, -1)[:, :, perm].reshape(1, 3, 4, 4)
        y_s = y.reshape(1, -1)[:, perm].reshape(1, 4, 4)
        assert soft_dice(probs_s, y_s).item() == pytest.approx(
            soft_dice(probs, y).item(), rel=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(5)
        logits = torch.from_numpy(rng.standard_normal((1, 3, 3, 3)))
        y = torch.from_numpy(rng.integers(0, 3, (1, 3, 3)))
        w = make_class_weights(3, 0.2, torch.float64)

        def fn(t):
            return seg_loss(torch.softmax(t, dim=1), y, w)

        _assert_grad_matches(fn, logits)

    def test_task_consistency_same_contract(self):
        probs = torch.full((1, 2, 2, 2), 0.5)
        y = torch.tensor([[[1, 1], [0, 0]]])
        w = make_class_weights(2, 1.0, torch.float64)
        assert task_consistency_loss(probs, y, w).item() == pytest.approx(
            seg_loss(probs, y, w).item())


class TestAdvLosses:
    def test_balanced_disc(self):
        half = torch.full((4,), 0.5)
        assert adv_loss_disc(half, half).item() == pytest.approx(
            2 * math.log(2), abs=1e-12)

    def test_gen_at_half(self):
        assert adv_loss_gen(torch.full((4,), 0.5)).item() == pytest.approx(
            math.log(2), abs=1e-12)

    def test_minimax_mode(self):
        f = torch.full((2,), 0.5)
        assert adv_loss_gen(f, "minimax").item() == pytest.approx(
            math.log(0.5), abs=1e-12)

    def test_random_scores_match_scalar_loop(self):
        rng = np.random.default_rng(9)
        r = rng.uniform(0.05, 0.95, 5)
        f = rng.uniform(0.05, 0.95, 5)
        want = -(np.mean(np.log(r)) + np.mean(np.log(1 - f)))
        got = adv_loss_disc(torch.from_numpy(r), torch.from_numpy(f)).item()
        assert got == pytest.approx(want, rel=1e-12)
        assert adv_loss_gen(torch.from_numpy(f)).item() == pytest.approx(
            -np.mean(np.log(f)), rel=1e-12)

    def test_out_of_range_rejected(self):
        good = torch.full((2,), 0.5)
        for bad in (torch.tensor([0.0, 0.5]), torch.tensor([1.0, 0.5])):
            with pytest.raises(ValueError):
                adv_loss_disc(bad, good)
            with pytest.raises(ValueError):
                adv_loss_gen(bad)

    def test_gradients(self):
        scores = torch.from_numpy(np.random.default_rng(2).uniform(0.1, 0.9, 4))
        real = torch.from_numpy(np.random.default_rng(3).uniform(0.1, 0.9, 4))
        _assert_grad_matches(lambda s: adv_loss_disc(real, s), scores)
        _assert_grad_matches(lambda s: adv_loss_gen(s), scores)


class TestCycleLoss:
    def test_cases(self):
        x = torch.rand(2, 1, 4, 4)
        assert cycle_loss(x, x).item() == 0.0
        assert cycle_loss(x + 0.2, x).item() == pytest.approx(0.2, abs=1e-12)

    def test_gradient(self):
        x = torch.rand(1, 1, 3, 3)
        ref = torch.rand(1, 1, 3, 3)
        _assert_grad_matches(lambda t: cycle_loss(t, ref), x)


class TestTotalLoss:
    def test_all_zero(self):
        assert total_loss({}, LossWeights()) == 0.0

    def test_unit_terms_default_weights(self):
        terms = {k: 1.0 for k in ("rec_s", "rec_t", "kl_s", "kl_t", "seg",
                                  "task_cyc", "adv_s", "adv_t", "cyc_t")}
        # rec_s + rec_t + 0.1*(kl_s + kl_t) + seg + task_cyc
        #   + adv_s + adv_t + 10*cyc_t
        assert total_loss(terms, LossWeights()) == pytest.approx(16.2)

    def test_linear_in_cycle_weight(self):
        terms = {"cyc_t": 0.37, "seg": 1.2}
        base = total_loss(terms, LossWeights(lambda_cyc=10.0))
        doubled = total_loss(terms, LossWeights(lambda_cyc=20.0))
        assert doubled - base == pytest.approx(10.0 * 0.37)

    def test_non_finite_named(self):
        terms = {"seg": 1.0, "cyc_t": float("nan")}
        with pytest.raises(NonFiniteLossError, match="cyc_t"):
            total_loss(terms, LossWeights())

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_kl=-0.1)


class TestClassWeights:
    def test_normalized_to_mean_one(self):
        w = make_class_weights(5, 0.2)
        assert w.mean().item() == pytest.approx(1.0)
        assert w[0] < w[1]
        assert w.shape == (5,)
