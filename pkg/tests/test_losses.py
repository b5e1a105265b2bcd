"""Loss oracles: closed-form values, symmetries, and gradients."""

import math

import numpy as np
import pytest
from conftest import max_rel_err, numeric_grad

from claad.losses import (
    LossConfig,
    claad_loss,
    claad_loss_grad,
    classification_loss,
    classification_loss_grad,
    positive_pair_loss,
    positive_pair_loss_grad,
)


def brute_force_pair_loss(p, z, labels, tau=1.0, normalize=True):
    """Scalar-loop reimplementation used as an independent oracle."""
    p = np.array(p, dtype=float)
    z = np.array(z, dtype=float)
    if normalize:
        p = np.array([row / np.linalg.norm(row) for row in p])
        z = np.array([row / np.linalg.norm(row) for row in z])
    total = 0.0
    b = len(labels)
    for i in range(b):
        num = 0.0
        den = 0.0
        for j in range(b):
            s = math.exp(float(p[i] @ z[j]) / tau)
            den += s
            if labels[i] == labels[j]:
                num += s
        total += -math.log(num / den)
    return total / b


class TestClassificationLoss:
    def test_uniform_predictions_give_b_ln2(self):
        probs = np.full((4, 2), 0.5)
        loss = classification_loss(probs, [0, 1, 0, 1])
        assert abs(loss - 4.0 * math.log(2.0)) < 1e-9

    def test_hand_case(self):
        loss = classification_loss(np.array([[0.9, 0.1], [0.2, 0.8]]), [0, 1])
        assert abs(loss - (-(math.log(0.9) + math.log(0.8)))) < 1e-9

    def test_perfect_predictions_near_zero(self):
        # With the epsilon inside the log the value is -B*log(1+eps), a hair
        # below zero.
        probs = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert abs(classification_loss(probs, [0, 1])) <= 2.0 * abs(math.log(1.0 + 1e-12)) + 1e-15

    def test_sum_form_doubles_with_duplicated_batch(self):
        rng = np.random.default_rng(0)
        raw = rng.uniform(0.1, 0.9, (3, 1))
        probs = np.hstack([raw, 1.0 - raw])
        labels = [0, 1, 1]
        single = classification_loss(probs, labels)
        double = classification_loss(np.vstack([probs, probs]), labels * 2)
        assert abs(double - 2.0 * single) < 1e-12

    def test_invalid_rows_rejected(self):
        with pytest.raises(ValueError):
            classification_loss(np.array([[0.7, 0.7]]), [0])
        with pytest.raises(ValueError):
            classification_loss(np.array([[1.2, -0.2]]), [0])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        raw = rng.uniform(0.2, 0.8, (4, 1))
        probs = np.hstack([raw, 1.0 - raw])
        labels = np.array([0, 1, 0, 1])
        _, dprobs = classification_loss_grad(probs, labels)
        # Closed form: -1/(p_iy + eps) on the picked entry, 0 elsewhere.
        for i in range(4):
            picked = probs[i, labels[i]]
            assert abs(dprobs[i, labels[i]] - (-1.0 / (picked + 1e-12))) < 1e-9
            assert dprobs[i, 1 - labels[i]] == 0.0


class TestPositivePairLoss:
    def test_orthonormal_two_batch_oracle(self):
        p = np.array([[1.0, 0.0], [0.0, 1.0]])
        z = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss = positive_pair_loss(p, z, [0, 1])
        # r_i = e / (e + 1), loss = -log r = log(1 + e^-1)
        assert abs(loss - 0.31326) < 1e-5
        assert abs(loss - math.log(1.0 + math.exp(-1.0))) < 1e-12

    def test_all_same_label_is_zero(self):
        rng = np.random.default_rng(2)
        p = rng.standard_normal((5, 4))
        z = rng.standard_normal((5, 4))
        assert abs(positive_pair_loss(p, z, [1] * 5)) < 1e-12

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        p = rng.standard_normal((6, 8))
        z = rng.standard_normal((6, 8))
        labels = [0, 1, 1, 0, 1, 0]
        cfg = LossConfig(temperature=0.7)
        got = positive_pair_loss(p, z, labels, cfg)
        want = brute_force_pair_loss(p, z, labels, tau=0.7)
        assert abs(got - want) < 1e-9

    def test_batch_permutation_invariance(self):
        rng = np.random.default_rng(4)
        p = rng.standard_normal((6, 4))
        z = rng.standard_normal((6, 4))
        labels = np.array([0, 1, 1, 0, 1, 0])
        perm = rng.permutation(6)
        a = positive_pair_loss(p, z, labels)
        b = positive_pair_loss(p[perm], z[perm], labels[perm])
        assert abs(a - b) < 1e-12

    def test_row_rescaling_invariance_under_normalization(self):
        rng = np.random.default_rng(5)
        p = rng.standard_normal((4, 3))
        z = rng.standard_normal((4, 3))
        labels = [0, 0, 1, 1]
        scaled = p.copy()
        scaled[2] *= 37.5
        a = positive_pair_loss(p, z, labels)
        b = positive_pair_loss(scaled, z, labels)
        assert abs(a - b) < 1e-9

    def test_nonnegative(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            p = rng.standard_normal((4, 3))
            z = rng.standard_normal((4, 3))
            labels = rng.integers(0, 2, 4)
            assert positive_pair_loss(p, z, labels) >= 0.0

    def test_single_example_batch_is_zero(self):
        p = np.array([[1.0, 2.0]])
        loss, dp = positive_pair_loss_grad(p, p, [0])
        assert loss == 0.0
        np.testing.assert_array_equal(dp, np.zeros_like(p))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        p = rng.standard_normal((5, 4))
        z = rng.standard_normal((5, 4))
        labels = np.array([0, 1, 0, 1, 1])
        for cfg in (LossConfig(), LossConfig(normalize_embeddings=False, temperature=2.0)):
            _, dp = positive_pair_loss_grad(p, z, labels, cfg)
            num = numeric_grad(lambda a: positive_pair_loss(a, z, labels, cfg), p.copy())
            assert max_rel_err(dp, num) < 1e-6

    def test_z_receives_no_gradient(self):
        # Stop-gradient contract: perturbing z changes the loss value, but
        # the exposed gradient is with respect to p only and claad_loss_grad
        # returns nothing for z.
        rng = np.random.default_rng(8)
        p = rng.standard_normal((4, 3))
        z = rng.standard_normal((4, 3))
        labels = [0, 1, 0, 1]
        loss, dp1, dp2 = claad_loss_grad(p, z, p, z, labels)
        assert dp1.shape == p.shape and dp2.shape == p.shape


class TestClaadLoss:
    def test_identical_paths_reduce_to_single_term(self):
        rng = np.random.default_rng(9)
        p = rng.standard_normal((4, 3))
        z = rng.standard_normal((4, 3))
        labels = [0, 1, 1, 0]
        assert abs(claad_loss(p, z, p, z, labels) -
                   positive_pair_loss(p, z, labels)) < 1e-12

    def test_path_swap_symmetry_exact(self):
        rng = np.random.default_rng(10)
        p1, p2 = rng.standard_normal((2, 4, 3))
        z1, z2 = rng.standard_normal((2, 4, 3))
        labels = [0, 1, 0, 1]
        assert claad_loss(p1, z2, p2, z1, labels) == claad_loss(p2, z1, p1, z2, labels)

    def test_batch_of_four_matches_brute_force(self):
        rng = np.random.default_rng(11)
        p1, p2 = rng.standard_normal((2, 4, 6))
        z1, z2 = rng.standard_normal((2, 4, 6))
        labels = [1, 0, 0, 1]
        want = 0.5 * (brute_force_pair_loss(p1, z2, labels) +
                      brute_force_pair_loss(p2, z1, labels))
        assert abs(claad_loss(p1, z2, p2, z1, labels) - want) < 1e-9

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(12)
        p1, p2 = rng.standard_normal((2, 4, 3))
        z1, z2 = rng.standard_normal((2, 4, 3))
        labels = np.array([0, 1, 1, 0])
        _, dp1, dp2 = claad_loss_grad(p1, z2, p2, z1, labels)
        num1 = numeric_grad(lambda a: claad_loss(a, z2, p2, z1, labels), p1.copy())
        num2 = numeric_grad(lambda a: claad_loss(p1, z2, a, z1, labels), p2.copy())
        assert max_rel_err(dp1, num1) < 1e-6
        assert max_rel_err(dp2, num2) < 1e-6
