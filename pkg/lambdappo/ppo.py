"""
Chance-constrained PPO with learned Lagrange multipliers.

Each epoch collects full episodes with the current policy, penalizes the
load-following reward with the multipliers, estimates advantages per
sub-episode segment, then takes many clipped-surrogate policy steps and
value steps (fast timescale) followed by a single multiplier step (slow
timescale). Multipliers start at zero and never decrease.
"""

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, NamedTuple, Optional, \
    Sequence, Tuple

import numpy as np

from .environment import EnvFactory, EpisodeLog, LoadFollowingEnv, \
    Scenario, ScenarioSet, run_episode
from .errors import ConfigError, ContractError, DivergenceError
from .metrics import evaluate_policy, reward_cost_score
from .nn import AdamState, MlpParams, PolicyParams, adam_step, init_mlp, \
    init_policy, logprob_backward, mlp_backward, mlp_forward, \
    policy_dist, policy_entropy, policy_mean_action, policy_sample, \
    squashed_logprob

__all__ = ('TrainConfig', 'BudgetCheck', 'gamma_budget_check',
           'LagrangeState', 'penalized_reward', 'RolloutBatch',
           'EpisodeRollout', 'collect_rollouts', 'gae', 'compute_gae',
           'discounted_costs', 'ppo_objective', 'ppo_update', 'PolicyStats',
           'value_loss', 'value_update', 'ValueStats', 'lambda_update',
           'EpochStats', 'TrainerState', 'Trainer', 'train',
           'transfer_rollout', 'select_eta', 'EPOCH_COLUMNS')

logger = logging.getLogger(__name__)

EPOCH_COLUMNS = ('epoch', 'mean_return', 'J1', 'J2', 'lambda1', 'lambda2',
                 'entropy', 'kl_stop', 'policy_iters', 'value_iters',
                 'wall_s')

# Epochs fail when more than this share of their episodes diverge
MAX_DROP_FRACTION = 0.25


@dataclass(frozen=True)
class TrainConfig:
    """
    Hyper-parameters of constrained training.

    The episode horizon is a scenario parameter; the discount budget
    condition is checked against it by :meth:`validate`.
    """

    gamma: float = 0.99
    xi: float = 0.95
    clip_eps: float = 0.2
    kl_threshold: float = 0.015
    delta: float = 0.05
    lambda_lr: float = 5e-3
    policy_lr: float = 3e-4
    value_lr: float = 3e-4
    epochs: int = 150
    workers: int = 8
    processes: int = 1
    sub_episodes: int = 1
    policy_iters: int = 80
    value_iters: int = 80
    fixed_lambda: Optional[Tuple[float, float]] = None
    seed: int = 0
    hidden_size: int = 64
    log_std_init: float = -0.5
    normalize_advantages: bool = True
    checkpoint_every: int = 10
    validate_every: int = 10
    record_wall_time: bool = False
    eta: float = 5e-4

    def validate(self, T: Optional[int] = None) -> 'TrainConfig':
        if not 0 < self.gamma < 1:
            raise ConfigError('gamma must lie in (0, 1)')
        if not 0 <= self.xi <= 1:
            raise ConfigError('xi must lie in [0, 1]')
        if not 0 < self.clip_eps < 1:
            raise ConfigError('clip_eps must lie in (0, 1)')
        if not self.delta > 0:
            raise ConfigError('delta must be > 0')
        if not self.kl_threshold > 0:
            raise ConfigError('kl_threshold must be > 0')
        for name in ('lambda_lr', 'policy_lr', 'value_lr'):
            if not getattr(self, name) > 0:
                raise ConfigError('{} must be > 0'.format(name))
        for name in ('epochs', 'workers', 'processes', 'sub_episodes',
                     'policy_iters', 'value_iters', 'hidden_size',
                     'checkpoint_every'):
            if getattr(self, name) < 1:
                raise ConfigError('{} must be >= 1'.format(name))
        if self.validate_every < 0:
            raise ConfigError('validate_every must be >= 0')
        if self.fixed_lambda is not None and min(self.fixed_lambda) < 0:
            raise ConfigError('fixed_lambda entries must be >= 0')
        if not self.eta > 0:
            raise ConfigError('eta must be > 0')

        if T is not None:
            if T % self.sub_episodes:
                raise ConfigError('T = {} is not divisible into {} '
                                  'sub-episodes'.format(T, self.sub_episodes))
            check = gamma_budget_check(self.gamma, T)
            if not check.passed:
                raise ConfigError(
                    'gamma = {} violates the discount budget for T = {}; '
                    'minimal feasible gamma is {:.4f}'.format(
                        self.gamma, T, check.minimal_gamma))

        return self


class BudgetCheck(NamedTuple):
    passed: bool
    minimal_gamma: float


def gamma_budget_check(gamma: float, T: int) -> BudgetCheck:
    """
    Check ``gamma ** (T - 1) >= 1 - gamma`` and find the smallest discount
    satisfying it by bisection.
    """
    if T < 2:
        raise ContractError('Horizon must be >= 2, got {!r}'.format(T))

    def feasible(g):
        return g ** (T - 1) >= 1.0 - g

    lo, hi = 0.0, 1.0
    while hi - lo > 1e-9:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid

    return BudgetCheck(bool(feasible(gamma)), hi)


@dataclass(frozen=True)
class LagrangeState:
    """
    Non-negative, non-decreasing Lagrange multipliers, one per constraint.
    """

    lambdas: Tuple[float, float] = (0.0, 0.0)


def penalized_reward(r, lam: LagrangeState):
    """
    ``r0 - lambda1 * c1 - lambda2 * c2`` for one reward vector or rows of
    them.
    """
    r = np.asarray(r, dtype=float)
    l1, l2 = lam.lambdas
    if l1 < 0 or l2 < 0:
        raise ContractError('Multipliers must be >= 0')

    return r[..., 0] - l1 * r[..., 1] - l2 * r[..., 2]


class EpisodeRollout(NamedTuple):
    """
    One sampled episode.
    """
    seed: int
    worker: int
    obs: np.ndarray
    next_obs: np.ndarray
    actions: np.ndarray
    u: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray


@dataclass
class RolloutBatch:
    """
    Steps of all episodes of one epoch, concatenated in worker order.

    ``boundary`` marks the last step of every sub-episode segment that is
    not the end of its episode; ``terminal`` marks episode ends.
    """

    obs: np.ndarray
    next_obs: np.ndarray
    actions: np.ndarray
    u: np.ndarray
    logp_old: np.ndarray
    rewards: np.ndarray
    steps: np.ndarray
    episode: np.ndarray
    boundary: np.ndarray
    terminal: np.ndarray
    seeds: List[int] = field(default_factory=list)
    workers: List[int] = field(default_factory=list)
    dropped: int = 0

    @property
    def size(self) -> int:
        return self.actions.shape[0]

    @property
    def n_episodes(self) -> int:
        return len(self.seeds)

    @classmethod
    def from_episodes(cls, episodes: Sequence[EpisodeRollout],
                      sub_episodes: int = 1, dropped: int = 0) \
            -> 'RolloutBatch':
        if not episodes:
            raise ContractError('A batch needs at least one episode')

        steps, episode_ids, boundary, terminal = [], [], [], []
        for index, rollout in enumerate(episodes):
            T = rollout.actions.shape[0]
            length = T // sub_episodes if T % sub_episodes == 0 else T
            t = np.arange(T)
            steps.append(t)
            episode_ids.append(np.full(T, index))
            end = t == T - 1
            terminal.append(end)
            boundary.append(((t + 1) % length == 0) & ~end)

        return cls(
            obs=np.vstack([e.obs for e in episodes]),
            next_obs=np.vstack([e.next_obs for e in episodes]),
            actions=np.concatenate([e.actions for e in episodes]),
            u=np.concatenate([e.u for e in episodes]),
            logp_old=np.concatenate([e.logp for e in episodes]),
            rewards=np.vstack([e.rewards for e in episodes]),
            steps=np.concatenate(steps),
            episode=np.concatenate(episode_ids),
            boundary=np.concatenate(boundary),
            terminal=np.concatenate(terminal),
            seeds=[e.seed for e in episodes],
            workers=[e.worker for e in episodes],
            dropped=dropped,
        )


def _sample_episode(args) -> Optional[EpisodeRollout]:
    policy, env_factory, scenario, worker, rng_key = args
    rng = np.random.default_rng(list(rng_key))
    env: LoadFollowingEnv = env_factory()

    obs = env.reset(scenario)
    rows = []
    try:
        for _ in range(scenario.T):
            action, logp, u = policy_sample(policy, obs, rng)
            result = env.step(action)
            rows.append((obs, result.observation, action, u, logp,
                         result.reward))
            obs = result.observation
    except DivergenceError as error:
        logger.warning('Dropping episode of worker %d: %s', worker, error)
        return None

    return EpisodeRollout(
        seed=scenario.seed,
        worker=worker,
        obs=np.array([r[0] for r in rows]),
        next_obs=np.array([r[1] for r in rows]),
        actions=np.array([r[2] for r in rows]),
        u=np.array([r[3] for r in rows]),
        logp=np.array([r[4] for r in rows]),
        rewards=np.array([r[5] for r in rows]),
    )


def collect_rollouts(
        policy: PolicyParams,
        env_factory: EnvFactory,
        scenarios: Sequence[Scenario],
        seed: int,
        epoch: int = 0,
        sub_episodes: int = 1,
        processes: int = 1
) -> RolloutBatch:
    """
    Run one episode per scenario, worker ``w`` on ``scenarios[w]``.

    Worker ``w`` samples from its own generator keyed by
    ``(seed, epoch, w)``, so the batch does not depend on ``processes``.

    :raises DivergenceError: if more than a quarter of the episodes diverge
    """
    if not scenarios:
        raise ContractError('Need at least one scenario')

    jobs = [(policy, env_factory, scenario, worker, (seed, epoch, worker))
            for worker, scenario in enumerate(scenarios)]

    if processes > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=processes) as executor:
            results = list(executor.map(_sample_episode, jobs))
    else:
        results = [_sample_episode(job) for job in jobs]

    episodes = [r for r in results if r is not None]
    dropped = len(results) - len(episodes)
    if dropped > MAX_DROP_FRACTION * len(results) or not episodes:
        raise DivergenceError('{} of {} episodes diverged in epoch '
                              '{}'.format(dropped, len(results), epoch))

    return RolloutBatch.from_episodes(episodes, sub_episodes, dropped)


def gae(rewards, values, next_values, boundary, terminal, gamma: float,
        xi: float) -> np.ndarray:
    """
    Generalized advantage estimates, restarted at every segment end.

    Segment ends bootstrap from ``next_values``; episode ends use zero.
    """
    rewards = np.asarray(rewards, dtype=float)
    advantages = np.zeros_like(rewards)

    carry = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        if terminal[i]:
            next_value, carry = 0.0, 0.0
        else:
            next_value = next_values[i]
            if boundary[i]:
                carry = 0.0
        td = rewards[i] + gamma * next_value - values[i]
        carry = td + gamma * xi * carry
        advantages[i] = carry

    return advantages


def _values(value_params: MlpParams, obs: np.ndarray) -> np.ndarray:
    out, _ = mlp_forward(value_params, obs)
    return np.asarray(out)[:, 0]


def compute_gae(batch: RolloutBatch, value_params: MlpParams, gamma: float,
                xi: float, lam: LagrangeState, normalize: bool = True) \
        -> Tuple[np.ndarray, np.ndarray]:
    """
    Advantages and value targets of a batch under the penalized reward.

    :returns: advantages (normalized to zero mean and unit variance when
              ``normalize`` is set) and returns ``advantage + V(s)``
              computed before normalization
    """
    rewards = penalized_reward(batch.rewards, lam)
    values = _values(value_params, batch.obs)
    next_values = _values(value_params, batch.next_obs)

    advantages = gae(rewards, values, next_values, batch.boundary,
                     batch.terminal, gamma, xi)
    returns = advantages + values

    if normalize and advantages.size > 1:
        advantages = (advantages - advantages.mean()) \
            / (advantages.std() + 1e-8)

    return advantages, returns


def discounted_costs(batch: RolloutBatch, gamma: float) -> np.ndarray:
    """
    Per-constraint mean over episodes of the discounted cost sums.
    """
    weights = gamma ** batch.steps.astype(float)
    totals = np.zeros((batch.n_episodes, 2))
    np.add.at(totals, batch.episode, batch.rewards[:, 1:] * weights[:, None])

    return totals.mean(axis=0)


def ppo_objective(policy: PolicyParams, batch: RolloutBatch,
                  advantages: np.ndarray, clip_eps: float) \
        -> Tuple[float, List[np.ndarray]]:
    """
    Clipped surrogate objective and its gradient.
    """
    objective, grads, _, _ = _surrogate(policy, batch, advantages, clip_eps)
    return objective, grads


def _surrogate(policy, batch, advantages, clip_eps, evaluated=None):
    if evaluated is None:
        evaluated = _evaluate(policy, batch)
    logp, mean, log_std, cache = evaluated

    ratio = np.exp(logp - batch.logp_old)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantages
    objective = float(np.mean(np.minimum(unclipped, clipped)))

    weights = np.where(unclipped <= clipped, unclipped, 0.0) / batch.size
    grads = logprob_backward(policy, cache, batch.u, mean, log_std, weights)

    return objective, grads, logp, evaluated


def _evaluate(policy: PolicyParams, batch: RolloutBatch):
    mean, log_std, cache = policy_dist(policy, batch.obs)
    logp = squashed_logprob(policy, batch.u, mean, log_std)
    return logp, mean, log_std, cache


class PolicyStats(NamedTuple):
    iterations: int
    kl: float
    stopped_early: bool
    aborted: bool


def ppo_update(policy: PolicyParams, batch: RolloutBatch,
               advantages: np.ndarray, clip_eps: float, kl_threshold: float,
               max_iters: int, lr: float, opt: Optional[AdamState] = None) \
        -> Tuple[PolicyParams, AdamState, PolicyStats]:
    """
    Gradient ascent on the clipped surrogate with KL early stopping.

    A step whose sample KL estimate ``mean(logp_old - logp_new)`` would
    exceed ``kl_threshold`` is not taken and ends the update, so the
    returned policy always satisfies the threshold.
    """
    if advantages.shape != (batch.size,):
        raise ContractError('Advantages are not aligned with the batch')
    if opt is None:
        opt = AdamState.zeros_like(policy.net)

    start, start_opt = policy, opt
    evaluated = _evaluate(policy, batch)
    kl, iterations, stopped = 0.0, 0, False

    for _ in range(max_iters):
        objective, grads, _, _ = _surrogate(policy, batch, advantages,
                                            clip_eps, evaluated)
        if not math.isfinite(objective):
            logger.warning('Non-finite surrogate; keeping the previous '
                           'policy')
            return start, start_opt, PolicyStats(0, 0.0, True, True)

        net, new_opt = adam_step(opt, policy.net, [-g for g in grads], lr)
        if new_opt.last_skipped:
            return start, start_opt, PolicyStats(0, 0.0, True, True)

        candidate = policy.with_net(net)
        candidate_eval = _evaluate(candidate, batch)
        candidate_kl = float(np.mean(batch.logp_old - candidate_eval[0]))
        if not math.isfinite(candidate_kl):
            return start, start_opt, PolicyStats(0, 0.0, True, True)
        if candidate_kl > kl_threshold:
            stopped = True
            break

        policy, opt, evaluated = candidate, new_opt, candidate_eval
        kl = candidate_kl
        iterations += 1

    return policy, opt, PolicyStats(iterations, kl, stopped, False)


def value_loss(value_params: MlpParams, obs: np.ndarray,
               returns: np.ndarray) -> Tuple[float, List[np.ndarray]]:
    """
    Mean squared error of the value net and its gradient.
    """
    out, cache = mlp_forward(value_params, obs)
    error = np.asarray(out)[:, 0] - returns
    loss = float(np.mean(error ** 2))
    grads, _ = mlp_backward(cache, (2.0 * error / error.size)[:, None])

    return loss, grads


class ValueStats(NamedTuple):
    iterations: int
    loss_before: float
    loss_after: float
    aborted: bool


def value_update(value_params: MlpParams, batch: RolloutBatch,
                 returns: np.ndarray, iters: int, lr: float,
                 opt: Optional[AdamState] = None) \
        -> Tuple[MlpParams, AdamState, ValueStats]:
    """
    Gradient descent on the value regression loss.
    """
    if returns.shape != (batch.size,):
        raise ContractError('Returns are not aligned with the batch')
    if opt is None:
        opt = AdamState.zeros_like(value_params)

    start, start_opt = value_params, opt
    before = None
    loss = math.nan
    for _ in range(iters):
        loss, grads = value_loss(value_params, batch.obs, returns)
        if not math.isfinite(loss):
            logger.warning('Non-finite value loss; keeping the previous '
                           'value net')
            return start, start_opt, ValueStats(0, math.nan, math.nan, True)
        if before is None:
            before = loss
        value_params, opt = adam_step(opt, value_params, grads, lr)

    after, _ = value_loss(value_params, batch.obs, returns)
    if not math.isfinite(after):
        return start, start_opt, ValueStats(0, math.nan, math.nan, True)

    return value_params, opt, ValueStats(iters, before, after, False)


def lambda_update(lam: LagrangeState, batch: RolloutBatch, delta: float,
                  gamma: float, lr: float) -> LagrangeState:
    """
    One projected step on the multipliers.

    A multiplier grows by ``lr * (J_k - delta * (1 - gamma))`` when its
    discounted cost estimate exceeds the budget and stays bit-identical
    otherwise.
    """
    if min(lam.lambdas) < 0:
        raise ContractError('Multipliers must be >= 0')

    budget = delta * (1.0 - gamma)
    costs = discounted_costs(batch, gamma)

    lambdas = []
    for value, cost in zip(lam.lambdas, costs):
        # Clipped gradient is zero while the constraint holds
        gradient = min(budget - float(cost), 0.0)
        lambdas.append(value - lr * gradient if gradient < 0 else value)

    if lambdas != list(lam.lambdas):
        logger.debug('lambda update: %s -> %s (budget %.4g, costs %s)',
                     lam.lambdas, lambdas, budget, costs)

    return LagrangeState(tuple(lambdas))  # type: ignore


@dataclass
class EpochStats:
    epoch: int
    mean_return: float
    costs: Tuple[float, float]
    lambdas: Tuple[float, float]
    entropy: float
    kl_stop: float
    policy_iters: int
    value_iters: int
    wall_s: float = 0.0
    dropped: int = 0

    def row(self, record_wall_time: bool = False) -> dict:
        return {
            'epoch': self.epoch,
            'mean_return': self.mean_return,
            'J1': float(self.costs[0]),
            'J2': float(self.costs[1]),
            'lambda1': float(self.lambdas[0]),
            'lambda2': float(self.lambdas[1]),
            'entropy': self.entropy,
            'kl_stop': self.kl_stop,
            'policy_iters': self.policy_iters,
            'value_iters': self.value_iters,
            'wall_s': self.wall_s if record_wall_time else 0.0,
        }


@dataclass(frozen=True, eq=False)
class TrainerState:
    """
    Everything needed to continue training after ``epoch`` completed
    epochs.
    """

    epoch: int
    policy: PolicyParams
    value: MlpParams
    policy_opt: AdamState
    value_opt: AdamState
    lagrange: LagrangeState
    seed: int

    @classmethod
    def initial(cls, config: TrainConfig, obs_dim: int, a_min: float = 0.4,
                a_max: float = 1.05) -> 'TrainerState':
        rng = np.random.default_rng(config.seed)
        hidden = (config.hidden_size, config.hidden_size)
        policy = init_policy(obs_dim, rng, hidden, a_min, a_max,
                             config.log_std_init)
        value = init_mlp([obs_dim] + list(hidden) + [1], rng)
        lagrange = LagrangeState(tuple(config.fixed_lambda)) \
            if config.fixed_lambda is not None else LagrangeState()

        return cls(0, policy, value, AdamState.zeros_like(policy.net),
                   AdamState.zeros_like(value), lagrange, config.seed)


class Trainer:
    """
    Runs training epochs and reports progress through callbacks.

    :param config: training hyper-parameters
    :param env_factory: builds the training environments
    :param scenarios: scenario set; episodes use the training split
    :param state: state to resume from (fresh when omitted)
    :param on_epoch: called with the statistics and state after each epoch
    :param on_checkpoint: called with the state every ``checkpoint_every``
                          epochs and after the final epoch
    """

    def __init__(self, config: TrainConfig, env_factory: EnvFactory,
                 scenarios: ScenarioSet,
                 state: Optional[TrainerState] = None,
                 on_epoch: Optional[Callable[[EpochStats, TrainerState],
                                             None]] = None,
                 on_checkpoint: Optional[Callable[[TrainerState],
                                                  None]] = None):
        if scenarios.count('train') < 1:
            raise ContractError('Training split is empty')

        self.config = config
        self.env_factory = env_factory
        self.scenarios = scenarios

        if state is None:
            obs_dim = env_factory().obs_dim
            state = TrainerState.initial(config, obs_dim,
                                         env_factory.action_min,
                                         env_factory.action_max)
        self.state = state
        self.on_epoch = on_epoch
        self.on_checkpoint = on_checkpoint

    def epoch_scenarios(self, epoch: int) -> List[Scenario]:
        n_train = self.scenarios.count('train')
        workers = self.config.workers
        return [self.scenarios.get('train', (epoch * workers + w) % n_train)
                for w in range(workers)]

    def run_epoch(self) -> EpochStats:
        config = self.config
        state = self.state
        epoch = state.epoch
        started = time.perf_counter()

        batch = collect_rollouts(state.policy, self.env_factory,
                                 self.epoch_scenarios(epoch), state.seed,
                                 epoch, config.sub_episodes,
                                 config.processes)
        if batch.dropped:
            logger.warning('epoch %d: dropped %d diverged episodes', epoch,
                           batch.dropped)

        advantages, returns = compute_gae(batch, state.value, config.gamma,
                                          config.xi, state.lagrange,
                                          config.normalize_advantages)
        entropy = float(np.mean(policy_entropy(state.policy, batch.obs)))

        policy, policy_opt, policy_stats = ppo_update(
            state.policy, batch, advantages, config.clip_eps,
            config.kl_threshold, config.policy_iters, config.policy_lr,
            state.policy_opt)
        value, value_opt, value_stats = value_update(
            state.value, batch, returns, config.value_iters,
            config.value_lr, state.value_opt)

        if config.fixed_lambda is None:
            lagrange = lambda_update(state.lagrange, batch, config.delta,
                                     config.gamma, config.lambda_lr)
        else:
            lagrange = state.lagrange

        costs = discounted_costs(batch, config.gamma)
        totals = np.zeros(batch.n_episodes)
        np.add.at(totals, batch.episode, batch.rewards[:, 0])

        self.state = TrainerState(epoch + 1, policy, value, policy_opt,
                                  value_opt, lagrange, state.seed)

        stats = EpochStats(
            epoch=epoch,
            mean_return=float(totals.mean()),
            costs=(float(costs[0]), float(costs[1])),
            lambdas=lagrange.lambdas,
            entropy=entropy,
            kl_stop=policy_stats.kl,
            policy_iters=policy_stats.iterations,
            value_iters=value_stats.iterations,
            wall_s=time.perf_counter() - started,
            dropped=batch.dropped,
        )
        logger.info('epoch %d: return %.5g J %.4g/%.4g lambda %.4g/%.4g '
                    'entropy %.4f kl %.4g iters %d/%d (%.1fs)', epoch,
                    stats.mean_return, costs[0], costs[1],
                    lagrange.lambdas[0], lagrange.lambdas[1], entropy,
                    policy_stats.kl, policy_stats.iterations,
                    value_stats.iterations, stats.wall_s)

        return stats

    def validate(self) -> None:
        if self.scenarios.count('val') < 1:
            return
        report, _ = evaluate_policy(self.state.policy,
                                    self.scenarios.split('val'),
                                    self.env_factory)
        logger.info('validation after epoch %d: r_bar %.6g d %.4g '
                    'omega %.4g', self.state.epoch, report.r_bar, report.d,
                    report.omega)

    def run(self, epochs: Optional[int] = None) -> List[EpochStats]:
        """
        Train until ``epochs`` epochs (default: the configured count) are
        complete.
        """
        epochs = self.config.epochs if epochs is None else epochs
        history = []

        while self.state.epoch < epochs:
            stats = self.run_epoch()
            history.append(stats)
            if self.on_epoch is not None:
                self.on_epoch(stats, self.state)

            done = self.state.epoch
            every = self.config.checkpoint_every
            if self.on_checkpoint is not None and \
                    (done % every == 0 or done == epochs):
                self.on_checkpoint(self.state)
            if self.config.validate_every and \
                    done % self.config.validate_every == 0:
                self.validate()

        return history


def train(config: TrainConfig, env_factory: EnvFactory,
          scenarios: ScenarioSet, state: Optional[TrainerState] = None,
          **callbacks) -> Tuple[TrainerState, List[EpochStats]]:
    """
    Validate the configuration against the scenario horizon and train.
    """
    if scenarios.count('train') < 1:
        raise ContractError('Training split is empty')
    config.validate(scenarios.get('train', 0).T)

    trainer = Trainer(config, env_factory, scenarios, state, **callbacks)
    history = trainer.run()

    return trainer.state, history


def transfer_rollout(policy: PolicyParams, env: LoadFollowingEnv,
                     scenario: Scenario, eta: float) -> EpisodeLog:
    """
    Deploy the deterministic policy with per-step action clipping.

    The applied action moves from the previous applied action (initially
    the first demand) towards the requested one by at most ``eta``;
    ``eta = inf`` disables clipping.
    """
    if not eta > 0:
        raise ContractError('eta must be > 0')

    previous = [float(scenario.demand[0])]

    def act(obs, t):
        requested = policy_mean_action(policy, obs)
        if math.isinf(eta):
            applied = requested
        else:
            applied = previous[0] + min(max(requested - previous[0], -eta),
                                        eta)
        previous[0] = applied
        return applied

    episode = run_episode(env, scenario, act)
    if episode.diverged:
        logger.warning('Transfer on scenario %s truncated after %d steps',
                       scenario.seed, episode.tau)

    return episode


def select_eta(policy: PolicyParams, env_factory: EnvFactory,
               scenarios: Iterable[Scenario], grid: Sequence[float]) \
        -> Tuple[float, List[Tuple[float, float]]]:
    """
    Pick the clipping bound with the best reward-cost score.

    Ties go to the smallest bound.

    :returns: the chosen bound and ``(eta, score)`` for every candidate
    """
    scenarios = list(scenarios)
    if not grid:
        raise ContractError('Empty eta grid')
    if not scenarios:
        raise ContractError('Need at least one scenario')

    env = env_factory()
    scores = []
    for eta in sorted(grid):
        episodes = [transfer_rollout(policy, env, s, eta) for s in scenarios]
        episodes = [e for e in episodes if e.tau]
        score = reward_cost_score(episodes) if episodes else -math.inf
        scores.append((float(eta), score))
        logger.info('eta %g: reward-cost score %.6g', eta, score)

    best = max(scores, key=lambda item: (item[1], -item[0]))

    return best[0], scores
