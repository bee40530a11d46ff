"""
Evaluation metrics over sets of episodes and batch policy evaluation.

Every metric is a mean over episodes and therefore does not depend on the
order of the episodes.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, \
    Union

import numpy as np

from .environment import EnvFactory, EpisodeLog, Scenario, run_episode
from .errors import ContractError
from .nn import PolicyParams, policy_mean_action, policy_sample

__all__ = ('MetricsReport', 'DemandFollowingPolicy', 'reward_cost_score',
           'violation_distance', 'violation_rate', 'joint_safety_estimate',
           'summarize', 'make_actor', 'evaluate_policy', 'report_rows',
           'report_meta', 'REPORT_COLUMNS')

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ('scenario_seed', 'sum_r0', 'sum_c1', 'sum_c2', 'D_in',
                  'D_out', 'viol_steps', 'tau', 'safe_episode')


def _check(episodes: Sequence[EpisodeLog]) -> None:
    if not episodes:
        raise ContractError('Metrics need at least one episode')
    for episode in episodes:
        if episode.tau == 0:
            raise ContractError('Episode of scenario {} has no steps'.format(
                episode.seed))


def _distances(episode: EpisodeLog) -> Tuple[float, float]:
    below = episode.c_in_min - episode.t_in
    above = episode.t_out - episode.c_out_max
    d_in = np.sum(np.where(below > 0, np.abs(below), 0.0)) / episode.tau
    d_out = np.sum(np.where(above > 0, np.abs(above), 0.0)) / episode.tau

    return float(d_in), float(d_out)


def _violating_steps(episode: EpisodeLog) -> int:
    return int(np.count_nonzero((episode.c1 > 0) | (episode.c2 > 0)))


def reward_cost_score(episodes: Sequence[EpisodeLog]) -> float:
    """
    Mean over episodes of the undiscounted sum of ``r0 - (c1 + c2)``.
    """
    _check(episodes)
    return float(np.mean([np.sum(e.r0) - np.sum(e.c1) - np.sum(e.c2)
                          for e in episodes]))


def violation_distance(episodes: Sequence[EpisodeLog]) -> float:
    """
    Mean distance of violation.

    Per episode, the time-averaged amount by which the inlet temperature
    falls below its minimum and the outlet temperature exceeds its
    maximum; the two are summed over episodes and divided by ``2 N``.
    """
    _check(episodes)
    total = sum(sum(_distances(e)) for e in episodes)

    return float(total / (2 * len(episodes)))


def violation_rate(episodes: Sequence[EpisodeLog]) -> float:
    """
    Mean fraction of steps with any constraint violated.
    """
    _check(episodes)
    return float(np.mean([_violating_steps(e) / e.tau for e in episodes]))


def joint_safety_estimate(episodes: Sequence[EpisodeLog]) -> float:
    """
    Fraction of episodes without a single violating step.
    """
    _check(episodes)
    return float(np.mean([_violating_steps(e) == 0 for e in episodes]))


@dataclass
class MetricsReport:
    r_bar: float
    d: float
    omega: float
    p_hat: float
    n: int
    per_scenario: List[dict] = field(default_factory=list)


def summarize(episodes: Sequence[EpisodeLog]) -> MetricsReport:
    """
    All metrics plus a per-episode breakdown.
    """
    _check(episodes)

    per_scenario = []
    for episode in episodes:
        d_in, d_out = _distances(episode)
        steps = _violating_steps(episode)
        per_scenario.append({
            'scenario_seed': episode.seed,
            'sum_r0': float(np.sum(episode.r0)),
            'sum_c1': int(np.sum(episode.c1)),
            'sum_c2': int(np.sum(episode.c2)),
            'D_in': d_in,
            'D_out': d_out,
            'viol_steps': steps,
            'tau': episode.tau,
            'safe_episode': int(steps == 0),
        })

    return MetricsReport(
        r_bar=reward_cost_score(episodes),
        d=violation_distance(episodes),
        omega=violation_rate(episodes),
        p_hat=joint_safety_estimate(episodes),
        n=len(episodes),
        per_scenario=per_scenario,
    )


class DemandFollowingPolicy:
    """
    Baseline that requests exactly the current demand.
    """

    def __init__(self, a_min: float = 0.4, a_max: float = 1.05):
        self.a_min = a_min
        self.a_max = a_max

    def __call__(self, observation: np.ndarray, t: int) -> float:
        return float(min(max(observation[-1], self.a_min), self.a_max))


Actor = Callable[[np.ndarray, int], float]


def make_actor(policy: Union[PolicyParams, Actor], deterministic: bool = True,
               rng: Optional[np.random.Generator] = None) -> Actor:
    """
    Turn policy parameters into an ``act(observation, t)`` callable; other
    callables are returned unchanged.
    """
    if not isinstance(policy, PolicyParams):
        return policy

    if deterministic:
        return lambda obs, t: policy_mean_action(policy, obs)

    if rng is None:
        raise ContractError('Stochastic evaluation needs a random generator')

    return lambda obs, t: policy_sample(policy, obs, rng)[0]


def evaluate_policy(
        policy: Union[PolicyParams, Actor],
        scenarios: Iterable[Scenario],
        env_factory: EnvFactory,
        deterministic: bool = True,
        seed: int = 0
) -> Tuple[MetricsReport, List[EpisodeLog]]:
    """
    Roll a policy out on every scenario and compute all metrics.

    Stochastic evaluation draws from a generator seeded by ``seed`` and the
    scenario's position, so repeated evaluations agree.
    """
    scenarios = list(scenarios)
    if not scenarios:
        raise ContractError('Evaluation needs at least one scenario')

    env = env_factory()
    episodes = []
    for index, scenario in enumerate(scenarios):
        rng = None if deterministic else np.random.default_rng([seed, index])
        episode = run_episode(env, scenario,
                              make_actor(policy, deterministic, rng))
        if episode.tau == 0:
            logger.warning('Scenario %s diverged on the first step',
                           scenario.seed)
            continue
        episodes.append(episode)

    report = summarize(episodes)
    logger.info('evaluation: r_bar %.6g d %.6g omega %.6g p_hat %.6g (N=%d)',
                report.r_bar, report.d, report.omega, report.p_hat, report.n)

    return report, episodes


def report_rows(report: MetricsReport) -> List[dict]:
    """
    Per-scenario rows followed by a summary footer row of column means.
    """
    rows = [dict(row) for row in report.per_scenario]

    footer = {'scenario_seed': 'summary'}
    for column in REPORT_COLUMNS[1:]:
        footer[column] = float(np.mean([row[column] for row in rows]))
    rows.append(footer)

    return rows


def report_meta(report: MetricsReport) -> dict:
    return {'r_bar': repr(report.r_bar), 'd': repr(report.d),
            'omega': repr(report.omega), 'p_hat': repr(report.p_hat),
            'n': str(report.n)}
