"""
Small fully connected networks with hand-written reverse-mode gradients,
the tanh-squashed Gaussian policy built on them, the Adam optimizer and a
finite-difference gradient checker.

All arithmetic is double precision. Weight matrices are stored as
``(fan_out, fan_in)``; hidden layers use ``tanh``, the output layer is
linear.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple, \
    Union

import numpy as np

from .errors import ContractError, DomainError

__all__ = ('MlpParams', 'MlpCache', 'init_mlp', 'mlp_forward',
           'mlp_backward', 'PolicyParams', 'init_policy', 'policy_dist',
           'policy_sample', 'policy_logprob', 'policy_mean_action',
           'policy_entropy', 'squash', 'unsquash', 'squashed_logprob',
           'U_LIMIT', 'logprob_grad', 'logprob_backward', 'AdamState',
           'adam_step', 'GradCheckReport', 'grad_check')

logger = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)

#: Pre-squash values are clipped to this magnitude; tanh stays below 1 in
#: float64 so squashed actions lie strictly inside the bounds
U_LIMIT = 9.0


@dataclass(frozen=True, eq=False)
class MlpParams:
    """
    Weights and biases of a multi-layer perceptron.
    """

    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ContractError('Need one bias per weight matrix')
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise ContractError('Layer {}: bias shape {} does not match '
                                    'weights {}'.format(i, b.shape, w.shape))
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ContractError('Layer {} expects {} inputs, previous '
                                    'layer gives {}'.format(
                                        i, w.shape[1],
                                        self.weights[i - 1].shape[0]))

    @property
    def sizes(self) -> List[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def arrays(self) -> List[np.ndarray]:
        """
        Parameters in ``[W1, b1, W2, b2, ...]`` order.
        """
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> 'MlpParams':
        arrays = [np.asarray(a, dtype=float) for a in arrays]
        return cls(tuple(arrays[0::2]), tuple(arrays[1::2]))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_flat(self, vector: np.ndarray) -> 'MlpParams':
        """
        A copy of these parameters with values taken from ``vector``.
        """
        arrays, offset = [], 0
        for a in self.arrays():
            arrays.append(np.asarray(vector[offset:offset + a.size],
                                     dtype=float).reshape(a.shape))
            offset += a.size
        if offset != len(vector):
            raise ContractError('Flat vector has {} entries, expected '
                                '{}'.format(len(vector), offset))
        return MlpParams.from_arrays(arrays)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


class MlpCache(NamedTuple):
    """
    Layer inputs and pre-activations retained by a forward pass.
    """
    params: MlpParams
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    squeeze: bool


def init_mlp(sizes: Sequence[int], rng: np.random.Generator,
             out_scale: float = 1.0) -> MlpParams:
    """
    Random weights scaled by ``1 / sqrt(fan_in)``, zero biases. The output
    layer is further scaled by ``out_scale``.
    """
    if len(sizes) < 2:
        raise ContractError('An MLP needs at least two layer sizes')

    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = rng.standard_normal((fan_out, fan_in)) / math.sqrt(fan_in)
        if i == len(sizes) - 2:
            w = w * out_scale
        weights.append(w)
        biases.append(np.zeros(fan_out))

    return MlpParams(tuple(weights), tuple(biases))


def mlp_forward(params: MlpParams, x) -> Tuple[np.ndarray, MlpCache]:
    """
    Evaluate the network on one input vector or a batch of row vectors.
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    h = np.atleast_2d(x)

    if h.ndim != 2 or h.shape[1] != params.weights[0].shape[1]:
        raise ContractError('Input dimension {} does not match the first '
                            'layer ({})'.format(x.shape,
                                                params.weights[0].shape[1]))

    inputs, pre = [], []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w.T + b
        pre.append(z)
        h = np.tanh(z) if i < last else z

    cache = MlpCache(params, inputs, pre, squeeze)

    return (h[0] if squeeze else h), cache


def mlp_backward(cache: MlpCache, grad_out,
                 params: Optional[MlpParams] = None) \
        -> Tuple[List[np.ndarray], np.ndarray]:
    """
    Reverse-mode gradients of a forward pass.

    :param cache: the cache returned by :func:`mlp_forward`
    :param grad_out: gradient of the loss with respect to the output
    :param params: if given, must be the parameters the cache was built with
    :returns: parameter gradients in ``[dW1, db1, ...]`` order and the
              gradient with respect to the input
    """
    if params is not None and params is not cache.params:
        raise ContractError('Cache was produced with different parameters')

    g = np.asarray(grad_out, dtype=float)
    if cache.squeeze:
        g = np.atleast_2d(g)
    if g.shape != cache.pre_activations[-1].shape:
        raise ContractError('Upstream gradient shape {} does not match the '
                            'cached output {}'.format(
                                g.shape, cache.pre_activations[-1].shape))

    weights = cache.params.weights
    grads: List[np.ndarray] = [None] * (2 * len(weights))  # type: ignore
    for i in range(len(weights) - 1, -1, -1):
        grads[2 * i] = g.T @ cache.inputs[i]
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ weights[i]
        if i > 0:
            # Input of layer i is tanh of the previous pre-activation
            g = g * (1.0 - cache.inputs[i] ** 2)

    return grads, (g[0] if cache.squeeze else g)


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """
    Squashed Gaussian policy.

    The network's two outputs are the mean head (row 0 of the last layer)
    and the log standard deviation head (row 1); the log standard
    deviation is clamped to ``[ls_min, ls_max]``.
    """

    net: MlpParams
    a_min: float = 0.4
    a_max: float = 1.05
    ls_min: float = -5.0
    ls_max: float = 1.0

    @property
    def half_width(self) -> float:
        return 0.5 * (self.a_max - self.a_min)

    def with_net(self, net: MlpParams) -> 'PolicyParams':
        return replace(self, net=net)


def init_policy(obs_dim: int, rng: np.random.Generator,
                hidden: Sequence[int] = (64, 64), a_min: float = 0.4,
                a_max: float = 1.05, log_std_init: float = -0.5,
                ls_min: float = -5.0, ls_max: float = 1.0) -> PolicyParams:
    net = init_mlp([obs_dim] + list(hidden) + [2], rng, out_scale=0.01)
    biases = list(net.biases)
    biases[-1] = np.array([0.0, log_std_init])

    return PolicyParams(MlpParams(net.weights, tuple(biases)), a_min, a_max,
                        ls_min, ls_max)


def policy_dist(policy: PolicyParams, obs) \
        -> Tuple[np.ndarray, np.ndarray, MlpCache]:
    """
    Mean and clamped log standard deviation of the pre-squash Gaussian.
    """
    out, cache = mlp_forward(policy.net, obs)
    out = np.atleast_2d(out)
    log_std = np.clip(out[:, 1], policy.ls_min, policy.ls_max)

    return out[:, 0], log_std, cache


def squash(policy: PolicyParams, u):
    u = np.clip(u, -U_LIMIT, U_LIMIT)
    return policy.a_min + policy.half_width * (np.tanh(u) + 1.0)


def unsquash(policy: PolicyParams, action):
    """
    Inverse of :func:`squash`.

    :raises DomainError: for actions on or outside the bounds
    """
    action = np.asarray(action, dtype=float)
    y = (action - policy.a_min) / policy.half_width - 1.0
    if not np.all(np.abs(y) < 1.0):
        raise DomainError('Action must lie strictly inside ({}, {})'.format(
            policy.a_min, policy.a_max))

    return np.arctanh(y)


def squashed_logprob(policy: PolicyParams, u, mean, log_std) -> np.ndarray:
    """
    Log density of the squashed action for pre-squash values ``u``.

    ``log(1 - tanh(u)^2)`` is evaluated as
    ``2 * (log 2 - u - softplus(-2 u))``, which stays finite for large
    ``|u|``.
    """
    u = np.asarray(u, dtype=float)
    z = (u - mean) * np.exp(-log_std)
    gaussian = -0.5 * z ** 2 - log_std - 0.5 * _LOG_2PI
    log_det = 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))

    return gaussian - log_det - math.log(policy.half_width)


def policy_sample(policy: PolicyParams, obs, rng: np.random.Generator) \
        -> Tuple[float, float, float]:
    """
    Draw one action for one observation.

    :returns: the squashed action, its log probability and the pre-squash
              value ``u``, clipped to ``[-U_LIMIT, U_LIMIT]``
    """
    mean, log_std, _ = policy_dist(policy, obs)
    u = mean[0] + math.exp(log_std[0]) * rng.standard_normal()
    u = min(max(u, -U_LIMIT), U_LIMIT)
    logp = squashed_logprob(policy, u, mean[0], log_std[0])

    return float(squash(policy, u)), float(logp), float(u)


def policy_logprob(policy: PolicyParams, obs, action) -> np.ndarray:
    """
    Log probability of given actions.

    :raises DomainError: for actions on or outside the bounds
    """
    u = unsquash(policy, action)
    mean, log_std, _ = policy_dist(policy, obs)
    logp = squashed_logprob(policy, u, mean, log_std)

    return logp if np.ndim(action) else logp[0]


def policy_mean_action(policy: PolicyParams, obs) -> float:
    """
    The deterministic action: the squashed mean.
    """
    mean, _, _ = policy_dist(policy, obs)
    return float(squash(policy, mean[0]))


def policy_entropy(policy: PolicyParams, obs) -> np.ndarray:
    """
    Entropy of the pre-squash Gaussian, ``0.5 * log(2 pi e sigma^2)``.
    """
    _, log_std, _ = policy_dist(policy, obs)
    entropy = 0.5 * (_LOG_2PI + 1.0) + log_std

    return entropy if np.ndim(obs) > 1 else entropy[0]


def logprob_grad(policy: PolicyParams, obs, u, weights) \
        -> Tuple[np.ndarray, List[np.ndarray]]:
    """
    Log probabilities of stored pre-squash values and the gradient of
    ``sum(weights * logprob)`` with respect to the policy network.
    """
    mean, log_std, cache = policy_dist(policy, obs)
    logp = squashed_logprob(policy, u, mean, log_std)

    return logp, logprob_backward(policy, cache, u, mean, log_std, weights)


def logprob_backward(policy: PolicyParams, cache: MlpCache, u, mean,
                     log_std, weights) -> List[np.ndarray]:
    """
    Gradient of ``sum(weights * logprob)`` from a cached forward pass.
    """
    raw = cache.pre_activations[-1][:, 1]
    inside = (raw > policy.ls_min) & (raw < policy.ls_max)

    z2 = ((u - mean) * np.exp(-log_std)) ** 2
    grad_out = np.empty((len(mean), 2))
    grad_out[:, 0] = weights * (u - mean) * np.exp(-2.0 * log_std)
    grad_out[:, 1] = weights * (z2 - 1.0) * inside

    grads, _ = mlp_backward(cache, grad_out)

    return grads


@dataclass(frozen=True, eq=False)
class AdamState:
    """
    Moment estimates of the Adam optimizer, one per parameter array.
    """

    m: Tuple[np.ndarray, ...]
    v: Tuple[np.ndarray, ...]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    last_skipped: bool = False

    @classmethod
    def zeros_like(cls, params: Union[MlpParams, Sequence[np.ndarray]],
                   **kwargs) -> 'AdamState':
        arrays = params.arrays() if isinstance(params, MlpParams) \
            else list(params)
        return cls(tuple(np.zeros_like(a) for a in arrays),
                   tuple(np.zeros_like(a) for a in arrays), **kwargs)


def adam_step(opt: AdamState, params, grads: Sequence[np.ndarray],
              lr: float):
    """
    One bias-corrected Adam descent step.

    Callers maximizing an objective pass the negated gradient. Non-finite
    gradients skip the update and set ``last_skipped``.

    :returns: the updated parameters (same type as ``params``) and state
    """
    if not lr > 0:
        raise ContractError('Learning rate must be > 0')

    as_mlp = isinstance(params, MlpParams)
    arrays = params.arrays() if as_mlp else list(params)
    if len(arrays) != len(grads) or len(arrays) != len(opt.m):
        raise ContractError('Parameter, gradient and moment counts differ')
    for p, g, m in zip(arrays, grads, opt.m):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise ContractError('Shape mismatch: parameter {} gradient {} '
                                'moment {}'.format(p.shape, np.shape(g),
                                                   m.shape))

    if not all(np.all(np.isfinite(g)) for g in grads):
        logger.warning('Skipping optimizer step on non-finite gradient')
        return params, replace(opt, last_skipped=True)

    step = opt.step + 1
    c1 = 1.0 - opt.beta1 ** step
    c2 = 1.0 - opt.beta2 ** step

    new_arrays, new_m, new_v = [], [], []
    for p, g, m, v in zip(arrays, grads, opt.m, opt.v):
        m = opt.beta1 * m + (1.0 - opt.beta1) * g
        v = opt.beta2 * v + (1.0 - opt.beta2) * g * g
        new_arrays.append(p - lr * (m / c1) / (np.sqrt(v / c2) + opt.eps))
        new_m.append(m)
        new_v.append(v)

    new_opt = replace(opt, m=tuple(new_m), v=tuple(new_v), step=step,
                      last_skipped=False)
    if as_mlp:
        return MlpParams.from_arrays(new_arrays), new_opt

    return new_arrays, new_opt


class GradCheckReport(NamedTuple):
    max_rel_error: float
    worst_index: int
    samples: int


def grad_check(loss: Callable[[np.ndarray], Tuple[float, np.ndarray]],
               theta: np.ndarray, samples: int = 100, h: float = 1e-5,
               rng: Optional[np.random.Generator] = None) -> GradCheckReport:
    """
    Compare an analytic gradient with central differences.

    :param loss: maps a flat parameter vector to ``(value, gradient)``
    :param theta: the point to check at
    :param samples: number of randomly chosen coordinates
    :param h: finite-difference step
    """
    if samples < 1:
        raise ContractError('Need at least one sample')
    if not h > 0:
        raise ContractError('Finite-difference step must be > 0')
    if rng is None:
        rng = np.random.default_rng(0)

    theta = np.array(theta, dtype=float)
    _, analytic = loss(theta)
    analytic = np.asarray(analytic, dtype=float).ravel()

    n = theta.size
    coords = rng.choice(n, size=samples, replace=samples > n)

    worst, worst_index = 0.0, int(coords[0])
    for i in coords:
        shifted = theta.copy()
        shifted[i] = theta[i] + h
        up, _ = loss(shifted)
        shifted[i] = theta[i] - h
        down, _ = loss(shifted)

        fd = (up - down) / (2.0 * h)
        rel = abs(analytic[i] - fd) / max(1e-12, abs(analytic[i]) + abs(fd))
        if rel > worst:
            worst, worst_index = rel, int(i)

    return GradCheckReport(float(worst), worst_index, int(samples))
