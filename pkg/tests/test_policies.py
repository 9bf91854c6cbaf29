"""Tests for state encoding, selection strategies, and the actor/critic."""

import math

import numpy as np
import pytest

from metacat import nnops, policies
from metacat.data import PaddedResponses, derived_rng
from metacat.errors import (NoAvailableQuestionError, ValidationError)
from metacat.policies import CriticNet, PolicyNet


class TestEncodeState:
    def test_example(self):
        x = policies.encode_state([(1, 1), (4, 0)], 6)
        np.testing.assert_array_equal(x, [0, 1, 0, 0, -1, 0])

    def test_empty(self):
        np.testing.assert_array_equal(policies.encode_state([], 4), np.zeros(4))

    def test_order_invariant(self):
        a = policies.encode_state([(0, 1), (2, 0), (5, 1)], 6)
        b = policies.encode_state([(5, 1), (0, 1), (2, 0)], 6)
        np.testing.assert_array_equal(a, b)

    def test_duplicate_rejected(self):
        with pytest.raises(ValidationError):
            policies.encode_state([(3, 1), (3, 0)], 6)

    def test_batched_matches_scalar(self):
        admin = PaddedResponses.from_lists([[1, 4], [0]], [[1.0, 0.0], [0.0]])
        batch = policies.encode_states(admin, 6)
        np.testing.assert_array_equal(batch[0],
                                      policies.encode_state([(1, 1), (4, 0)], 6))
        np.testing.assert_array_equal(batch[1],
                                      policies.encode_state([(0, 0)], 6))


class TestSelectRandom:
    def test_single_available(self):
        avail = np.array([False, False, True, False])
        assert policies.select_random(avail, np.random.default_rng(0)) == 2

    def test_uniform_frequencies(self):
        avail = np.tile(np.array([True, False, True, True, False, True]),
                        (100_000, 1))
        actions = policies.select_random(avail, np.random.default_rng(3))
        stderr = math.sqrt(0.25 * 0.75 / 100_000)
        for j in (0, 2, 3, 5):
            freq = (actions == j).mean()
            assert abs(freq - 0.25) < 3 * stderr + 1e-12
        assert not np.isin(actions, [1, 4]).any()

    def test_reproducible(self):
        avail = np.ones(7, dtype=bool)
        a = [policies.select_random(avail, np.random.default_rng(9))
             for _ in range(5)]
        b = [policies.select_random(avail, np.random.default_rng(9))
             for _ in range(5)]
        assert a == b

    def test_empty_mask(self):
        with pytest.raises(NoAvailableQuestionError):
            policies.select_random(np.zeros(3, dtype=bool),
                                   np.random.default_rng(0))


class TestSelectActive:
    def test_basic(self):
        b = np.array([-1.0, 0.1, 2.0])
        assert policies.select_active(0.0, b, np.ones(3, dtype=bool)) == 1

    def test_tie_lowest_index(self):
        b = np.array([0.5, -0.5])
        assert policies.select_active(0.0, b, np.ones(2, dtype=bool)) == 0

    def test_best_masked_falls_back(self):
        b = np.array([-1.0, 0.1, 2.0])
        avail = np.array([True, False, True])
        assert policies.select_active(0.0, b, avail) == 0

    def test_shift_invariance(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            b = rng.normal(size=9)
            theta = float(rng.normal())
            avail = rng.random(9) < 0.7
            avail[rng.integers(9)] = True
            c = float(rng.normal()) * 3
            assert policies.select_active(theta, b, avail) == \
                policies.select_active(theta + c, b + c, avail)

    def test_matches_uncertainty_rule_under_1pl(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            b = rng.normal(size=8)
            theta = float(rng.normal())
            avail = rng.random(8) < 0.8
            avail[0] = True
            p = nnops.sigmoid(theta - b)
            assert policies.select_active(theta, b, avail) == \
                policies.select_uncertain(p, avail)


class TestPolicyNet:
    def test_fresh_net_uniform_over_available(self):
        net = PolicyNet(6, hidden_dim=16, seed=0)
        state = np.zeros((1, 6))
        avail = np.array([[True, True, False, True, False, True]])
        p = net.probs(state, avail)
        np.testing.assert_allclose(p[0][avail[0]], 0.25, atol=1e-12)
        assert (p[0][~avail[0]] == 0.0).all()

    def test_single_available(self):
        net = PolicyNet(4, hidden_dim=8, seed=1)
        p = net.probs(np.zeros((1, 4)),
                      np.array([[False, False, True, False]]))
        np.testing.assert_allclose(p[0], [0, 0, 1, 0], atol=0)

    def test_distribution_sums(self):
        rng = np.random.default_rng(5)
        net = PolicyNet(9, hidden_dim=16, seed=2)
        net.params["w3"] = rng.normal(size=net.params["w3"].shape)
        states = rng.choice([-1.0, 0.0, 1.0], size=(6, 9))
        avail = rng.random((6, 9)) < 0.6
        avail[:, 4] = True
        p = net.probs(states, avail)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
        assert (p[~avail] == 0.0).all()

    def test_sampling_matches_distribution(self):
        rng = np.random.default_rng(13)
        net = PolicyNet(5, hidden_dim=8, seed=3)
        net.params["w3"] = rng.normal(size=net.params["w3"].shape) * 0.7
        state = rng.choice([-1.0, 0.0, 1.0], size=5)
        avail = np.array([True, True, False, True, True])
        p = net.probs(state[None, :], avail[None, :])[0]
        draws = 100_000
        actions = net.sample(np.tile(p, (draws, 1)),
                             np.random.default_rng(17))
        for j in range(5):
            freq = (actions == j).mean()
            stderr = math.sqrt(max(p[j] * (1 - p[j]), 1e-12) / draws)
            assert abs(freq - p[j]) <= 3 * stderr + 1e-9

    def test_greedy_tie_lowest(self):
        p = np.array([[0.25, 0.25, 0.25, 0.25]])
        assert PolicyNet.greedy(p)[0] == 0

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(19)
        net = PolicyNet(5, hidden_dim=6, seed=4)
        for name in net.params:
            net.params[name] = rng.normal(size=net.params[name].shape) * 0.4
        state = rng.choice([-1.0, 0.0, 1.0], size=(2, 5))
        avail = np.array([[True, True, True, False, True],
                          [False, True, True, True, True]])
        coeff = rng.normal(size=(2, 5))

        p, cache = net.probs(state, avail, with_cache=True)
        dlogits = nnops.masked_softmax_backward(coeff, p)
        grads = net.backward(dlogits, cache)

        for name in sorted(net.params):
            def f(v, name=name):
                saved = net.params[name].copy()
                net.params[name] = v.reshape(saved.shape)
                out = float((net.probs(state, avail) * coeff).sum())
                net.params[name] = saved
                return out

            ok, worst, _ = nnops.finite_diff_check(
                f, net.params[name].ravel(), grads[name].ravel())
            assert ok, f"{name} worst {worst}"


class TestCriticNet:
    def test_fresh_net_outputs_zero(self):
        net = CriticNet(6, hidden_dim=8, seed=0)
        v = net.values(np.random.default_rng(0).normal(size=(3, 6)))
        np.testing.assert_array_equal(v, np.zeros(3))

    def test_deterministic(self):
        net = CriticNet(6, hidden_dim=8, seed=1)
        net.params["w3"] = np.random.default_rng(2).normal(size=(1, 8))
        x = np.random.default_rng(3).normal(size=(2, 6))
        np.testing.assert_array_equal(net.values(x), net.values(x))

    def test_squared_error_gradient_matches_fd(self):
        rng = np.random.default_rng(23)
        net = CriticNet(4, hidden_dim=6, seed=5)
        for name in net.params:
            net.params[name] = rng.normal(size=net.params[name].shape) * 0.4
        x = rng.choice([-1.0, 0.0, 1.0], size=(3, 4))
        target = rng.normal(size=3)

        v, cache = net.values(x, with_cache=True)
        dv = (2.0 * (v - target))[:, None]
        grads = net.backward(dv, cache)

        for name in sorted(net.params):
            def f(p, name=name):
                saved = net.params[name].copy()
                net.params[name] = p.reshape(saved.shape)
                out = float(((net.values(x) - target) ** 2).sum())
                net.params[name] = saved
                return out

            ok, worst, _ = nnops.finite_diff_check(
                f, net.params[name].ravel(), grads[name].ravel())
            assert ok, f"{name} worst {worst}"


def test_log_prob_floor():
    probs = np.array([[1.0, 0.0], [0.5, 0.5]])
    lp = policies.log_prob_of(probs, np.array([1, 0]))
    assert lp[0] == math.log(nnops.PROB_FLOOR)
    np.testing.assert_allclose(lp[1], math.log(0.5), rtol=1e-14)
