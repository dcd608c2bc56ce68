import math

import numpy as np
import pytest
import torch

from aslseg.errors import ConfigError, ValidationError
from aslseg.losses import (
    EPS,
    LossWeights,
    adaptation_loss,
    cross_entropy,
    dice_loss,
    poly_lr,
    ramp_weight,
    rdrop_supervised_loss,
    symmetric_kl,
    total_ssl_loss,
)
from oracles import ce_oracle, central_diff_grad, dice_oracle, rel_error, sym_kl_oracle


def t64(a):
    return torch.tensor(np.asarray(a), dtype=torch.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand_instance(rng, shape=(8, 8)):
    p = rng.uniform(0.02, 0.98, shape)
    q = rng.uniform(0.02, 0.98, shape)
    y = (rng.random(shape) < 0.4).astype(np.float64)
    return p, q, y


class TestCrossEntropy:
    def test_perfect_prediction(self):
        y = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert cross_entropy(t64(y), y).item() == pytest.approx(-math.log(1 - EPS), rel=1e-6)

    def test_uniform(self):
        assert cross_entropy(t64(np.full((3, 3), 0.5)), np.eye(3)).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_matches_loop_oracle(self, rng):
        p, _, y = rand_instance(rng)
        assert cross_entropy(t64(p), y).item() == pytest.approx(ce_oracle(p, y), abs=1e-10)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            cross_entropy(t64(np.zeros((2, 2))), np.zeros((2, 3)))


class TestDice:
    def test_perfect_overlap_bound(self):
        y = np.zeros((6, 6))
        y[1:4, 1:4] = 1
        val = dice_loss(t64(y), y).item()
        assert 0 <= val <= 1.0 / (2 * y.sum() + 1.0)

    def test_all_ones_vs_empty(self):
        n = 49
        val = dice_loss(t64(np.ones((7, 7))), np.zeros((7, 7))).item()
        assert val == pytest.approx(1 - 1.0 / (n + 1.0), abs=1e-14)

    def test_matches_summation_oracle(self, rng):
        p, _, y = rand_instance(rng)
        assert dice_loss(t64(p), y).item() == pytest.approx(dice_oracle(p, y), abs=1e-10)


class TestSymmetricKL:
    def test_identical_is_zero(self, rng):
        p, _, _ = rand_instance(rng)
        assert symmetric_kl(t64(p), t64(p)).item() == 0.0

    def test_bit_exact_symmetry(self, rng):
        for _ in range(20):
            p, q, _ = rand_instance(rng)
            assert symmetric_kl(t64(p), t64(q)).item() == symmetric_kl(t64(q), t64(p)).item()

    def test_closed_form(self):
        val = symmetric_kl(t64([0.9]), t64([0.1])).item()
        assert val == pytest.approx(0.8 * math.log(9), abs=1e-12)
        assert val == pytest.approx(1.7578, abs=1e-4)

    def test_matches_oracle_and_nonnegative(self, rng):
        for _ in range(20):
            p, q, _ = rand_instance(rng)
            val = symmetric_kl(t64(p), t64(q)).item()
            assert val >= 0
            assert val == pytest.approx(sym_kl_oracle(p, q), abs=1e-10)


class TestComposites:
    def test_rdrop_identical_passes(self, rng):
        p, _, y = rand_instance(rng)
        w = LossWeights(alpha=3.0)
        assert rdrop_supervised_loss(t64(p), t64(p), y, w).item() == 2 * cross_entropy(t64(p), y).item()

    def test_rdrop_alpha_zero(self, rng):
        p, q, y = rand_instance(rng)
        got = rdrop_supervised_loss(t64(p), t64(q), y, LossWeights(alpha=0.0)).item()
        assert got == (cross_entropy(t64(p), y) + cross_entropy(t64(q), y)).item()

    def test_rdrop_recompose(self, rng):
        p, q, y = rand_instance(rng)
        got = rdrop_supervised_loss(t64(p), t64(q), y, LossWeights(alpha=1.0)).item()
        assert got == pytest.approx(ce_oracle(p, y) + ce_oracle(q, y) + sym_kl_oracle(p, q), abs=1e-10)

    def test_total_ssl(self):
        assert total_ssl_loss(0.5, 0.2, LossWeights(lambda_u=1.0)) == pytest.approx(0.7)
        assert total_ssl_loss(0.5, 0.2, LossWeights(lambda_u=0.0)) == 0.5

    def test_adaptation(self, rng):
        p, _, y = rand_instance(rng)
        assert adaptation_loss(t64(p), y, LossWeights(gamma=0.0)).item() == dice_loss(t64(p), y).item()
        got = adaptation_loss(t64(p), y, LossWeights(gamma=1.0)).item()
        assert got == pytest.approx(dice_oracle(p, y) + ce_oracle(p, y), abs=1e-10)
        yy = np.zeros((8, 8))
        yy[2:6, 2:6] = 1
        assert adaptation_loss(t64(yy), yy, LossWeights()).item() < 1e-5 + 1.0 / (2 * yy.sum() + 1)

    def test_weights_validated(self):
        with pytest.raises(ConfigError):
            LossWeights(alpha=-1)
        with pytest.raises(ConfigError):
            LossWeights(gamma=float("nan"))


def _grad(fn, *arrays):
    ts = [t64(a).requires_grad_(True) for a in arrays]
    fn(*ts).backward()
    return [t.grad.numpy() for t in ts]


# (loss of (p, q, y), number of leading differentiable arguments)
GRAD_CASES = {
    "cross_entropy": (lambda p, q, y: cross_entropy(p, y), 1),
    "dice_loss": (lambda p, q, y: dice_loss(p, y), 1),
    "symmetric_kl": (lambda p, q, y: symmetric_kl(p, q), 2),
    "rdrop_supervised_loss": (lambda p, q, y: rdrop_supervised_loss(p, q, y, LossWeights(alpha=0.7)), 2),
    "adaptation_loss": (lambda p, q, y: adaptation_loss(p, y, LossWeights(gamma=0.5)), 1),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradients_match_finite_differences(name):
    fn, n_args = GRAD_CASES[name]
    rng = np.random.default_rng(sorted(GRAD_CASES).index(name))
    for _ in range(20):
        p, q, y = rand_instance(rng, (6, 6))
        arrays = [p, q]
        tensors = [t64(a).requires_grad_(i < n_args) for i, a in enumerate(arrays)]
        fn(*tensors, y).backward()
        for i in range(n_args):
            def f(x, i=i):
                xs = [t64(a) for a in arrays]
                xs[i] = t64(x)
                return fn(*xs, y).item()

            assert rel_error(tensors[i].grad.numpy(), central_diff_grad(f, arrays[i])) < 1e-4


def test_gradient_with_respect_to_model_outputs_of_total_loss():
    rng = np.random.default_rng(5)
    p, q, y = rand_instance(rng, (6, 6))
    u1, u2 = rng.uniform(0.05, 0.95, (2, 6, 6))
    w = LossWeights(lambda_u=0.3, alpha=0.7)

    def loss(a, b, c, d):
        return total_ssl_loss(rdrop_supervised_loss(a, b, y, w), symmetric_kl(c, d), w)

    analytic = _grad(loss, p, q, u1, u2)
    arrays = [p, q, u1, u2]
    for i in range(4):
        def f(x, i=i):
            xs = [t64(a) for a in arrays]
            xs[i] = t64(x)
            return loss(*xs).item()

        assert rel_error(analytic[i], central_diff_grad(f, arrays[i])) < 1e-4


def test_monotone_steps_toward_target():
    rng = np.random.default_rng(9)
    for _ in range(30):
        p, _, y = rand_instance(rng)
        ce0, d0 = cross_entropy(t64(p), y).item(), dice_loss(t64(p), y).item()
        for step in (0.1, 0.5, 1.0):
            moved = p + step * (y - p)
            assert cross_entropy(t64(moved), y).item() <= ce0 + 1e-12
            assert dice_loss(t64(moved), y).item() <= d0 + 1e-12


def test_schedules():
    assert poly_lr(0.01, 500, 1000, 0.9) == pytest.approx(0.01 * 0.5 ** 0.9)
    assert poly_lr(0.01, 500, 1000, 0.9) == pytest.approx(0.005359, abs=1e-6)
    assert poly_lr(0.01, 0, 1000) == 0.01
    assert ramp_weight(0, 100, 0.1) == 0.0
    assert ramp_weight(5, 100, 0.1) == 0.5
    assert ramp_weight(50, 100, 0.1) == 1.0
    assert ramp_weight(0, 100, 0.0) == 1.0
