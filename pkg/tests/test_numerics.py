import math

import numpy as np
import pytest

from refgame.errors import ConfigurationError, InputError, NumericalDomainError
from refgame.numerics import (
    CellParams,
    ascent_step,
    cell_backward,
    cell_step,
    finite_difference,
    kl_categorical,
    max_relative_error,
    sigmoid,
    softmax,
    softmax_xent,
)


def reference_cell(cell: CellParams, x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Independent scalar re-implementation of the cell equations."""
    hd = cell.hidden_dim
    z_vec = np.zeros(hd)
    r_vec = np.zeros(hd)
    for j in range(hd):
        a_z = float(x @ cell.w_z[:, j] + h @ cell.u_z[:, j] + cell.b_z[j])
        a_r = float(x @ cell.w_r[:, j] + h @ cell.u_r[:, j] + cell.b_r[j])
        z_vec[j] = 1.0 / (1.0 + math.exp(-a_z))
        r_vec[j] = 1.0 / (1.0 + math.exp(-a_r))
    out = np.zeros(hd)
    for j in range(hd):
        a_c = float(x @ cell.w_c[:, j] + (r_vec * h) @ cell.u_c[:, j] + cell.b_c[j])
        c = math.tanh(a_c)
        out[j] = (1.0 - z_vec[j]) * h[j] + z_vec[j] * c
    return out


class TestCellStep:
    def test_zero_params_zero_state_force_zero(self, rng):
        cell = CellParams.zeros(5, 7)
        h_next, _ = cell_step(cell, rng.standard_normal(5), np.zeros(7))
        assert np.array_equal(h_next, np.zeros(7))

    def test_matches_reference_reimplementation(self, rng):
        cell = CellParams.random(4, 6, rng, 0.5)
        x = rng.standard_normal(4)
        h = rng.standard_normal(6)
        h_next, _ = cell_step(cell, x, h)
        np.testing.assert_allclose(h_next, reference_cell(cell, x, h), rtol=1e-12)

    def test_dimension_mismatch_is_configuration_error(self, rng):
        cell = CellParams.random(4, 6, rng)
        with pytest.raises(ConfigurationError):
            cell_step(cell, np.zeros(5), np.zeros(6))
        with pytest.raises(ConfigurationError):
            cell_step(cell, np.zeros(4), np.zeros(7))

    def test_jacobian_matches_finite_differences_over_seeds(self):
        worst = 0.0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            cell = CellParams.random(5, 8, rng, 0.4)
            x = rng.standard_normal(5)
            h = rng.standard_normal(8)
            probe = rng.standard_normal(8)

            def value():
                h_next, _ = cell_step(cell, x, h)
                return float(h_next @ probe)

            _, cache = cell_step(cell, x, h)
            grads, dx, dh = cell_backward(cell, cache, probe)
            for name, grad in grads.items():
                worst = max(
                    worst, max_relative_error(grad, finite_difference(value, getattr(cell, name)))
                )
            worst = max(worst, max_relative_error(dx, finite_difference(value, x)))
            worst = max(worst, max_relative_error(dh, finite_difference(value, h)))
        assert worst <= 1e-4

    def test_deterministic(self, rng):
        cell = CellParams.random(4, 6, rng)
        x = rng.standard_normal(4)
        h = rng.standard_normal(6)
        a, _ = cell_step(cell, x, h)
        b, _ = cell_step(cell, x, h)
        assert np.array_equal(a, b)

    def test_batched_rows_match_single_rows(self, rng):
        cell = CellParams.random(4, 6, rng)
        xs = rng.standard_normal((5, 4))
        hs = rng.standard_normal((5, 6))
        batched, _ = cell_step(cell, xs, hs)
        for i in range(5):
            single, _ = cell_step(cell, xs[i], hs[i])
            np.testing.assert_allclose(batched[i], single, rtol=1e-12)


class TestSoftmaxXent:
    def test_uniform_logits_give_log_vocab(self):
        loss, _ = softmax_xent(np.zeros(7), 3)
        assert loss == pytest.approx(math.log(7), abs=1e-12)

    def test_dominant_target_logit_drives_loss_to_zero(self):
        logits = np.zeros(5)
        logits[2] = 200.0
        loss, _ = softmax_xent(logits, 2)
        assert loss < 1e-12

    def test_matches_direct_enumeration(self, rng):
        logits = rng.standard_normal(9)
        target = 4
        loss, grad = softmax_xent(logits, target)
        exps = np.exp(logits)
        probs = exps / exps.sum()
        assert loss == pytest.approx(-math.log(probs[target]), rel=1e-12)
        expected = probs.copy()
        expected[target] -= 1.0
        np.testing.assert_allclose(grad, expected, rtol=1e-10)

    def test_out_of_range_target(self):
        with pytest.raises(InputError):
            softmax_xent(np.zeros(4), 4)


class TestKLCategorical:
    def test_identical_distributions_are_zero(self):
        p = np.array([0.2, 0.3, 0.5])
        assert kl_categorical(p, p) == 0.0

    def test_hand_computed_value(self):
        p = np.array([0.9, 0.1])
        q = np.array([0.5, 0.5])
        expected = 0.9 * math.log(0.9 / 0.5) + 0.1 * math.log(0.1 / 0.5)
        assert kl_categorical(p, q) == pytest.approx(expected, rel=1e-12)
        assert kl_categorical(p, q) == pytest.approx(0.368, abs=5e-4)

    def test_nonnegative_over_random_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            p = rng.dirichlet(np.ones(6))
            q = rng.dirichlet(np.ones(6))
            assert kl_categorical(p, q) >= 0.0

    def test_zero_mass_in_q_where_p_positive(self):
        with pytest.raises(NumericalDomainError):
            kl_categorical(np.array([0.5, 0.5]), np.array([1.0, 0.0]))

    def test_support_and_sum_validation(self):
        with pytest.raises(InputError):
            kl_categorical(np.array([0.5, 0.5]), np.array([0.3, 0.3, 0.4]))
        with pytest.raises(InputError):
            kl_categorical(np.array([0.6, 0.6]), np.array([0.5, 0.5]))


class TestAscentStep:
    def test_zero_gradient_leaves_params_bit_identical(self, rng):
        tensors = {"w": rng.standard_normal((3, 3))}
        before = tensors["w"].copy()
        ascent_step(tensors, {"w": np.zeros((3, 3))}, rate=0.5)
        assert np.array_equal(tensors["w"], before)

    def test_zero_rate_leaves_params_bit_identical(self, rng):
        tensors = {"w": rng.standard_normal(4)}
        before = tensors["w"].copy()
        ascent_step(tensors, {"w": rng.standard_normal(4)}, rate=0.0)
        assert np.array_equal(tensors["w"], before)

    def test_frozen_tensors_untouched(self, rng):
        tensors = {"w": rng.standard_normal(4), "frozen": rng.standard_normal(4)}
        before = tensors["frozen"].copy()
        grads = {"w": np.ones(4), "frozen": np.ones(4)}
        ascent_step(tensors, grads, rate=0.1, frozen={"frozen"})
        assert np.array_equal(tensors["frozen"], before)
        np.testing.assert_allclose(tensors["w"] - 0.1, tensors["w"] - 0.1)

    def test_quadratic_objective_approaches_maximizer_monotonically(self):
        # maximize f(x) = -(x - 3)^2; gradient is -2 (x - 3)
        tensors = {"x": np.array([0.0])}
        distances = []
        for _ in range(200):
            grad = {"x": -2.0 * (tensors["x"] - 3.0)}
            ascent_step(tensors, grad, rate=0.05)
            distances.append(abs(float(tensors["x"][0]) - 3.0))
        assert all(b <= a for a, b in zip(distances, distances[1:]))
        assert distances[-1] < 1e-6

    def test_shape_mismatch_is_configuration_error(self):
        with pytest.raises(ConfigurationError):
            ascent_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, rate=0.1)


def test_softmax_rows_sum_to_one(rng):
    logits = rng.standard_normal((6, 11)) * 10
    sums = softmax(logits, axis=-1).sum(axis=-1)
    np.testing.assert_allclose(sums, np.ones(6), atol=1e-12)
