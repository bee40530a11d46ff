import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from lambdappo.errors import ContractError, DomainError
from lambdappo.nn import AdamState, MlpParams, adam_step, grad_check, \
    init_mlp, init_policy, logprob_grad, mlp_backward, mlp_forward, \
    policy_dist, policy_entropy, policy_logprob, policy_mean_action, \
    policy_sample, squash, squashed_logprob, unsquash, U_LIMIT


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


@pytest.fixture
def policy(rng):
    return init_policy(14, rng, hidden=(16, 16))


def mlp_loss(params, x, c):
    def loss(theta):
        out, cache = mlp_forward(params.from_flat(theta), x)
        grads, _ = mlp_backward(cache, c)
        return float(np.sum(c * out)), \
            np.concatenate([g.ravel() for g in grads])

    return loss


def test_init_mlp_layout(rng):
    params = init_mlp([5, 8, 2], rng)

    assert [w.shape for w in params.weights] == [(8, 5), (2, 8)]
    assert all(np.all(b == 0) for b in params.biases)
    assert params.sizes == [5, 8, 2]

    with pytest.raises(ContractError):
        init_mlp([5], rng)


def test_mlp_params_contracts():
    with pytest.raises(ContractError):
        MlpParams((np.zeros((2, 3)),), (np.zeros(3),))

    with pytest.raises(ContractError):
        MlpParams((np.zeros((2, 3)), np.zeros((1, 4))),
                  (np.zeros(2), np.zeros(1)))


def test_flat_round_trip(rng):
    params = init_mlp([3, 4, 2], rng)
    flat = params.flat()

    assert flat.size == 3 * 4 + 4 + 4 * 2 + 2
    assert np.array_equal(params.from_flat(flat).flat(), flat)

    with pytest.raises(ContractError):
        params.from_flat(flat[:-1])


def test_forward_single_matches_batch(rng):
    params = init_mlp([3, 6, 2], rng)
    x = rng.normal(size=(4, 3))

    batch, _ = mlp_forward(params, x)
    single, _ = mlp_forward(params, x[2])

    assert single.shape == (2,)
    assert np.allclose(batch[2], single)

    with pytest.raises(ContractError):
        mlp_forward(params, np.zeros(4))


def test_mlp_gradient(rng):
    params = init_mlp([6, 10, 10, 3], rng)
    x = rng.normal(size=(7, 6))
    c = rng.normal(size=(7, 3))

    report = grad_check(mlp_loss(params, x, c), params.flat(), samples=100,
                        rng=rng)

    assert report.max_rel_error < 1e-6
    assert report.samples == 100


def test_mlp_input_gradient(rng):
    params = init_mlp([4, 5, 1], rng)
    x = rng.normal(size=4)
    _, cache = mlp_forward(params, x)
    _, grad_x = mlp_backward(cache, np.ones(1))

    h = 1e-6
    for i in range(4):
        up, down = x.copy(), x.copy()
        up[i] += h
        down[i] -= h
        fd = (mlp_forward(params, up)[0][0]
              - mlp_forward(params, down)[0][0]) / (2 * h)
        assert grad_x[i] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_backward_contracts(rng):
    params = init_mlp([3, 2], rng)
    other = init_mlp([3, 2], rng)
    _, cache = mlp_forward(params, np.zeros((2, 3)))

    with pytest.raises(ContractError):
        mlp_backward(cache, np.zeros((2, 2)), params=other)

    with pytest.raises(ContractError):
        mlp_backward(cache, np.zeros((3, 2)))


def test_grad_check_detects_wrong_gradient():
    def loss(theta):
        return float(np.sum(theta ** 2)), theta

    report = grad_check(loss, np.array([1.0, -2.0, 3.0]), samples=3)

    assert report.max_rel_error == pytest.approx(1.0 / 3.0)


def test_logprob_gradient(policy, rng):
    obs = rng.normal(size=(9, 14))
    u = rng.normal(size=9)
    weights = rng.normal(size=9)

    def loss(theta):
        candidate = policy.with_net(policy.net.from_flat(theta))
        logp, grads = logprob_grad(candidate, obs, u, weights)
        return float(np.sum(weights * logp)), \
            np.concatenate([g.ravel() for g in grads])

    report = grad_check(loss, policy.net.flat(), samples=150, rng=rng)

    assert report.max_rel_error < 1e-6


def test_initial_policy_output(policy):
    mean, log_std, _ = policy_dist(policy, np.zeros(14))

    assert mean[0] == 0.0
    assert log_std[0] == -0.5
    assert policy_mean_action(policy, np.zeros(14)) == \
        pytest.approx(0.5 * (0.4 + 1.05))


def test_log_std_is_clamped(policy):
    biases = list(policy.net.biases)
    biases[-1] = np.array([0.0, 3.0])
    loud = policy.with_net(MlpParams(policy.net.weights, tuple(biases)))

    _, log_std, _ = policy_dist(loud, np.zeros(14))

    assert log_std[0] == policy.ls_max


def test_entropy_of_base_gaussian(policy):
    expected = 0.5 * (math.log(2 * math.pi) + 1.0) - 0.5

    assert policy_entropy(policy, np.zeros(14)) == pytest.approx(expected)
    assert policy_entropy(policy, np.zeros((3, 14))).shape == (3,)


@given(st.floats(min_value=-6.0, max_value=6.0))
def test_squash_round_trip(u):
    policy = init_policy(2, np.random.default_rng(0), hidden=(4,))

    action = squash(policy, u)

    assert policy.a_min < action < policy.a_max
    assert unsquash(policy, action) == pytest.approx(u, abs=1e-6)


@pytest.mark.parametrize('action', [0.4, 1.05, 0.3, 1.2])
def test_unsquash_rejects_bounds(policy, action):
    with pytest.raises(DomainError):
        unsquash(policy, action)


def test_squashed_density_integrates_to_one(policy):
    def density(u):
        logp = squashed_logprob(policy, np.array([u]), 0.3, -0.5)
        return float(np.exp(logp[0])) * policy.half_width \
            * (1.0 - math.tanh(u) ** 2)

    total, _ = integrate.quad(density, -10.0, 10.0)

    assert total == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize('u', [-40.0, 40.0, 400.0])
def test_squashed_logprob_is_finite_in_tails(policy, u):
    assert np.isfinite(squashed_logprob(policy, u, 0.0, 0.0))


def test_sample_and_logprob_agree(policy, rng):
    obs = rng.normal(size=14)

    action, logp, u = policy_sample(policy, obs, rng)

    assert policy.a_min < action < policy.a_max
    assert action == pytest.approx(float(squash(policy, u)))
    assert policy_logprob(policy, obs, action) == pytest.approx(logp,
                                                                abs=1e-6)


@given(st.floats(min_value=-60.0, max_value=60.0),
       st.integers(min_value=0, max_value=2 ** 32 - 1))
def test_sample_stays_inside_bounds_for_extreme_means(mean, seed):
    policy = init_policy(3, np.random.default_rng(0), hidden=(4,))
    biases = list(policy.net.biases)
    biases[-1] = np.array([mean, -0.5])
    policy = policy.with_net(MlpParams(policy.net.weights, tuple(biases)))
    obs = np.zeros(3)

    action, logp, u = policy_sample(policy, obs,
                                    np.random.default_rng(seed))

    assert policy.a_min < action < policy.a_max
    assert abs(u) <= U_LIMIT
    assert np.isfinite(logp)
    assert policy_logprob(policy, obs, action) == pytest.approx(logp,
                                                                abs=1e-4)


def test_squash_clips_large_inputs(policy):
    actions = squash(policy, np.array([-1e3, -40.0, 40.0, 1e3]))

    assert np.all(actions > policy.a_min)
    assert np.all(actions < policy.a_max)
    assert actions[0] == actions[1]


def test_adam_first_step(rng):
    params = [np.array([1.0, -1.0]), np.array([0.5])]
    grads = [np.array([0.2, -3.0]), np.array([1e-3])]
    opt = AdamState.zeros_like(params)

    new, opt = adam_step(opt, params, grads, lr=0.01)

    assert opt.step == 1
    assert not opt.last_skipped
    assert new[0] == pytest.approx([0.99, -0.99], abs=1e-8)
    assert new[1] == pytest.approx([0.49], abs=1e-6)


def test_adam_skips_non_finite(rng):
    params = init_mlp([2, 2], rng)
    opt = AdamState.zeros_like(params)
    grads = [np.full((2, 2), np.nan), np.zeros(2)]

    new, skipped = adam_step(opt, params, grads, lr=0.1)

    assert new is params
    assert skipped.last_skipped
    assert skipped.step == 0


def test_adam_contracts(rng):
    params = init_mlp([2, 2], rng)
    opt = AdamState.zeros_like(params)

    with pytest.raises(ContractError):
        adam_step(opt, params, [np.zeros((2, 2)), np.zeros(2)], lr=0.0)

    with pytest.raises(ContractError):
        adam_step(opt, params, [np.zeros((2, 3)), np.zeros(2)], lr=0.1)

    with pytest.raises(ContractError):
        adam_step(opt, params, [np.zeros((2, 2))], lr=0.1)


def test_adam_descends_quadratic():
    x = [np.array([3.0, -2.0])]
    opt = AdamState.zeros_like(x)

    for _ in range(2000):
        x, opt = adam_step(opt, x, [2.0 * x[0]], lr=0.05)

    assert np.allclose(x[0], 0.0, atol=0.05)
