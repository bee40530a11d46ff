"""
The constrained load-following task: scenarios (demand curves and
time-varying temperature bounds), observation assembly, vector rewards and
constraint indicators, on top of either an identified model or the
reference plant.

Usage example:

>>> scenarios = make_scenario_set(7, 100, 10, 30)
>>> len(scenarios)
140
>>> scenario = scenarios.get('train', 0)
>>> float(scenario.demand[0])
1.0
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Mapping, NamedTuple, \
    Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ContractError, DivergenceError, \
    DomainError, NumericError
from .plant import PlantConfig, ROM_FIELDS, initial_pids, \
    supervisory_step, trim
from .sysid import RomModel, rom_step
from .utils import LRUCache

__all__ = ('ScenarioParams', 'Scenario', 'ScenarioSet', 'gen_demand',
           'gen_constraint_schedule', 'make_scenario', 'make_scenario_set',
           'constraint_indicator', 'primary_reward', 'RomBackend',
           'PlantBackend', 'LoadFollowingEnv', 'StepResult', 'EnvFactory',
           'EpisodeLog', 'run_episode', 'SPLITS', 'SCENARIO_COLUMNS',
           'EPISODE_COLUMNS')

logger = logging.getLogger(__name__)

SPLITS = ('train', 'val', 'test')

SCENARIO_COLUMNS = ('t', 'demand', 'c_in_min', 'c_out_max')

EPISODE_COLUMNS = ('t', 'action', 'demand', 'c_in_min', 'c_out_max',
                   't_hx_s_in', 't_hx_s_out', 'r0', 'c1', 'c2')

# Independent random streams per scenario seed
_DEMAND_STREAM = 0
_BOUNDS_STREAM = 1


@dataclass(frozen=True)
class ScenarioParams:
    """
    Distribution of demand curves and constraint schedules.

    Ramp rates and hold times are per environment step. Bounds are drawn
    as margins below the nominal secondary inlet temperature
    (``t_in_ref``) and above the nominal outlet temperature
    (``t_out_ref``), both taken at full power.
    """

    T: int = 300
    min_ramps: int = 1
    max_ramps: int = 3
    level_min: float = 0.5
    level_max: float = 1.0
    min_ramp_rate: float = 0.005
    max_ramp_rate: float = 0.02
    hold_min: int = 10
    hold_max: int = 60

    t_in_ref: float = 0.05
    t_out_ref: float = 0.35
    in_margin_min: float = 0.02
    in_margin_max: float = 0.15
    out_margin_min: float = 0.005
    out_margin_max: float = 0.05
    max_bound_changes: int = 2

    master_seed: int = 7
    n_train: int = 100
    n_val: int = 10
    n_test: int = 30

    action_min: float = 0.4
    action_max: float = 1.05

    def validate(self) -> 'ScenarioParams':
        if self.T < 2:
            raise ConfigError('T must be >= 2')
        if not 0 <= self.min_ramps <= self.max_ramps:
            raise ConfigError('Ramp counts must satisfy '
                              '0 <= min_ramps <= max_ramps')
        if not 0.5 <= self.level_min <= self.level_max <= 1.0:
            raise ConfigError('Demand levels must lie in [0.5, 1.0]')
        if not 0 < self.min_ramp_rate <= self.max_ramp_rate:
            raise ConfigError('Ramp rates must satisfy '
                              '0 < min_ramp_rate <= max_ramp_rate')
        if not 1 <= self.hold_min <= self.hold_max:
            raise ConfigError('Holds must satisfy 1 <= hold_min <= hold_max')
        if not 0 < self.in_margin_min <= self.in_margin_max:
            raise ConfigError('Inlet margins must be positive and ordered')
        if not 0 < self.out_margin_min <= self.out_margin_max:
            raise ConfigError('Outlet margins must be positive and ordered')
        if self.max_bound_changes < 0:
            raise ConfigError('max_bound_changes must be >= 0')
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError('Every split needs at least one scenario')
        if self.master_seed < 0:
            raise ConfigError('master_seed must be >= 0')
        if not 0 < self.action_min < self.action_max:
            raise ConfigError('Action bounds must satisfy '
                              '0 < action_min < action_max')

        return self


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream])


def gen_demand(seed: int, T: int, params: ScenarioParams) -> np.ndarray:
    """
    Piecewise-linear demand curve: a hold at full power, then a random
    number of rate-limited ramps to random levels separated by holds.
    """
    if T < 2:
        raise ContractError('Horizon must be >= 2, got {!r}'.format(T))

    rng = _rng(seed, _DEMAND_STREAM)

    def hold():
        return int(rng.integers(params.hold_min, params.hold_max + 1))

    level = 1.0
    values = [level] * hold()

    n_ramps = int(rng.integers(params.min_ramps, params.max_ramps + 1))
    for _ in range(n_ramps):
        target = float(rng.uniform(params.level_min, params.level_max))
        rate = float(rng.uniform(params.min_ramp_rate, params.max_ramp_rate))
        n_steps = max(1, int(math.ceil(abs(target - level) / rate)))
        values.extend(level + (target - level) * k / n_steps
                      for k in range(1, n_steps + 1))
        level = target
        values.extend([level] * hold())

    if len(values) < T:
        values.extend([level] * (T - len(values)))

    return np.array(values[:T])


def gen_constraint_schedule(seed: int, T: int, params: ScenarioParams) \
        -> np.ndarray:
    """
    Step-wise constant ``(c_in_min, c_out_max)`` bounds with up to
    ``max_bound_changes`` random changes.

    Every segment strictly contains the full-power secondary temperatures.
    """
    if T < 2:
        raise ContractError('Horizon must be >= 2, got {!r}'.format(T))

    rng = _rng(seed, _BOUNDS_STREAM)

    n_changes = int(rng.integers(0, params.max_bound_changes + 1))
    n_changes = min(n_changes, T - 1)
    changes = np.sort(rng.choice(np.arange(1, T), size=n_changes,
                                 replace=False))

    bounds = np.empty((T, 2))
    starts = [0] + [int(c) for c in changes]
    ends = starts[1:] + [T]
    for start, end in zip(starts, ends):
        in_margin = rng.uniform(params.in_margin_min, params.in_margin_max)
        out_margin = rng.uniform(params.out_margin_min,
                                 params.out_margin_max)
        bounds[start:end, 0] = params.t_in_ref - in_margin
        bounds[start:end, 1] = params.t_out_ref + out_margin

    return bounds


@dataclass(frozen=True, eq=False)
class Scenario:
    """
    One episode's demand curve and constraint schedule.
    """

    seed: int
    demand: np.ndarray
    bounds: np.ndarray
    split_tag: str = 'train'

    @property
    def T(self) -> int:
        return self.demand.shape[0]

    def rows(self) -> List[dict]:
        return [{'t': t, 'demand': float(self.demand[t]),
                 'c_in_min': float(self.bounds[t, 0]),
                 'c_out_max': float(self.bounds[t, 1])}
                for t in range(self.T)]

    @property
    def meta(self) -> Dict[str, str]:
        return {'seed': str(self.seed), 'split': self.split_tag}

    @classmethod
    def from_rows(cls, rows: Sequence[Mapping], meta: Mapping[str, str]) \
            -> 'Scenario':
        rows = list(rows)
        if not rows:
            raise ContractError('Scenario file has no rows')

        return cls(
            seed=int(meta['seed']),
            demand=np.array([row['demand'] for row in rows], dtype=float),
            bounds=np.array([[row['c_in_min'], row['c_out_max']]
                             for row in rows], dtype=float),
            split_tag=meta.get('split', 'train'),
        )


def make_scenario(seed: int, params: ScenarioParams,
                  split_tag: str = 'train', T: Optional[int] = None) \
        -> Scenario:
    T = params.T if T is None else T

    return Scenario(seed, gen_demand(seed, T, params),
                    gen_constraint_schedule(seed, T, params), split_tag)


class ScenarioSet:
    """
    Scenarios of the train, validation and test splits.

    Only seeds are held; scenarios are produced on access by ``factory`` and
    kept in a small :class:`~lambdappo.utils.LRUCache`, so very large
    training splits cost no memory.
    """

    #: The default capacity of the scenario cache
    default_cache_capacity = 64

    def __init__(self, seeds: Mapping[str, Sequence[int]],
                 factory: Callable[[int, str], Scenario],
                 cache_size: int = default_cache_capacity):
        self._seeds = {tag: tuple(int(s) for s in seeds.get(tag, ()))
                       for tag in SPLITS}
        self._factory = factory
        self._cache: LRUCache = LRUCache(capacity=cache_size)

    @classmethod
    def generate(cls, master_seed: int, n_train: int, n_val: int,
                 n_test: int, params: ScenarioParams,
                 T: Optional[int] = None) -> 'ScenarioSet':
        """
        Derive scenario seeds from ``master_seed`` by a counter running over
        the train, validation and test splits in that order.
        """
        for name, count in (('n_train', n_train), ('n_val', n_val),
                            ('n_test', n_test)):
            if count < 1:
                raise ContractError('{} must be >= 1, got {!r}'.format(
                    name, count))
        if master_seed < 0:
            raise ContractError('master_seed must be >= 0')

        base = int(master_seed) << 32
        counts = (n_train, n_val, n_test)
        seeds = {}
        offset = 0
        for tag, count in zip(SPLITS, counts):
            seeds[tag] = range(base + offset, base + offset + count)
            offset += count

        return cls(seeds, lambda seed, tag: make_scenario(seed, params, tag,
                                                          T))

    @classmethod
    def from_scenarios(cls, scenarios: Sequence[Scenario]) -> 'ScenarioSet':
        by_seed = {s.seed: s for s in scenarios}
        seeds: Dict[str, List[int]] = {tag: [] for tag in SPLITS}
        for scenario in scenarios:
            if scenario.split_tag not in seeds:
                raise ContractError('Unknown split tag {!r}'.format(
                    scenario.split_tag))
            seeds[scenario.split_tag].append(scenario.seed)

        return cls(seeds, lambda seed, tag: by_seed[seed],
                   cache_size=len(by_seed) or 1)

    def seeds(self, tag: str) -> Tuple[int, ...]:
        try:
            return self._seeds[tag]
        except KeyError:
            raise ContractError('Unknown split tag {!r}'.format(tag))

    def count(self, tag: str) -> int:
        return len(self.seeds(tag))

    def get(self, tag: str, index: int) -> Scenario:
        seed = self.seeds(tag)[index]

        scenario = self._cache.get(seed)
        if scenario is None:
            scenario = self._factory(seed, tag)
            self._cache[seed] = scenario

        return scenario

    def split(self, tag: str) -> Iterator[Scenario]:
        for index in range(self.count(tag)):
            yield self.get(tag, index)

    def __len__(self):
        return sum(len(seeds) for seeds in self._seeds.values())

    def __repr__(self):
        return '<{} {}>'.format(type(self).__name__, ', '.join(
            '{}={}'.format(tag, len(self._seeds[tag])) for tag in SPLITS))


def make_scenario_set(master_seed: int, n_train: int, n_val: int,
                      n_test: int, T: Optional[int] = None,
                      params: Optional[ScenarioParams] = None) \
        -> ScenarioSet:
    return ScenarioSet.generate(master_seed, n_train, n_val, n_test,
                                params or ScenarioParams(), T)


def constraint_indicator(x_secondary: Sequence[float],
                         bounds: Sequence[float]) -> Tuple[int, int]:
    """
    ``(C1, C2)``: inlet below its minimum, outlet above its maximum.

    A temperature exactly on its bound is safe.
    """
    t_in, t_out = x_secondary
    c_in_min, c_out_max = bounds

    return int(c_in_min - t_in > 0), int(t_out - c_out_max > 0)


def primary_reward(p: float, a: float) -> float:
    return -(p - a) ** 2


class RomBackend:
    """
    Drive an identified model, one model step per environment step.
    """

    def __init__(self, rom: RomModel, plant_config: PlantConfig):
        self.rom = rom
        self.plant_config = plant_config
        self.state_names = rom.state_names
        self._x: Optional[np.ndarray] = None

    def reset(self, power: float) -> np.ndarray:
        state = trim(power, self.plant_config)
        self._x = np.array([getattr(state, name)
                            for name in self.state_names])
        return self._x.copy()

    def step(self, action: float) -> np.ndarray:
        self._x = rom_step(self.rom, self._x, action)
        return self._x.copy()


class PlantBackend:
    """
    Drive the reference plant: every environment step holds the power
    setpoint for ``dt_rom`` seconds of supervisory control.
    """

    def __init__(self, plant_config: PlantConfig, dt_rom: float,
                 state_names: Sequence[str] = ROM_FIELDS):
        n_steps = dt_rom / plant_config.dt_plant
        if dt_rom <= 0 or abs(n_steps - round(n_steps)) > 1e-9:
            raise ContractError('dt_rom must be a positive multiple of '
                                'dt_plant, got {!r}'.format(dt_rom))
        self.plant_config = plant_config
        self.dt_rom = dt_rom
        self.state_names = tuple(state_names)
        self._n_steps = int(round(n_steps))
        self._state = None
        self._pids = None

    def reset(self, power: float) -> np.ndarray:
        self._state = trim(power, self.plant_config)
        self._pids = initial_pids(self._state, self.plant_config)
        return self._vector()

    def step(self, action: float) -> np.ndarray:
        for _ in range(self._n_steps):
            self._state, self._pids = supervisory_step(
                self._state, action, self._pids, self.plant_config)
        return self._vector()

    def _vector(self) -> np.ndarray:
        return np.array([getattr(self._state, name)
                         for name in self.state_names])


class StepResult(NamedTuple):
    observation: np.ndarray
    reward: np.ndarray
    done: bool
    t_hx_s_in: float
    t_hx_s_out: float
    c_in_min: float
    c_out_max: float


class LoadFollowingEnv:
    """
    Episodic load-following task over one scenario.

    Observations are ``[x, c_in_min, c_out_max, demand]`` at the current
    step; the reward vector is ``(r0, C1, C2)`` with the costs evaluated on
    the state reached against the bounds of the next step.
    """

    def __init__(self, backend, action_min: float = 0.4,
                 action_max: float = 1.05):
        self.backend = backend
        self.action_min = action_min
        self.action_max = action_max

        names = list(backend.state_names)
        try:
            self._in_index = names.index('t_hx_s_in')
            self._out_index = names.index('t_hx_s_out')
        except ValueError:
            raise ContractError('Model state lacks the secondary-side '
                                'temperatures')

        self.scenario: Optional[Scenario] = None
        self.t = 0
        self.done = True
        self.last_action: Optional[float] = None
        self._x: Optional[np.ndarray] = None

    @property
    def obs_dim(self) -> int:
        return len(self.backend.state_names) + 3

    def reset(self, scenario: Scenario) -> np.ndarray:
        self.scenario = scenario
        self.t = 0
        self.done = False
        self.last_action = None
        self._x = self.backend.reset(float(scenario.demand[0]))

        return self._observation()

    def step(self, action: float) -> StepResult:
        if self.scenario is None or self.done:
            raise ContractError('Episode is done; call reset() first')

        action = float(action)
        if not math.isfinite(action):
            raise DomainError('Non-finite action')
        if not self.action_min <= action <= self.action_max:
            raise ContractError('Action {!r} outside [{}, {}]'.format(
                action, self.action_min, self.action_max))

        scenario = self.scenario
        r0 = primary_reward(float(scenario.demand[self.t]), action)

        try:
            self._x = self.backend.step(action)
        except NumericError as error:
            self.done = True
            raise DivergenceError('Model diverged at step {} of scenario '
                                  '{}: {}'.format(self.t, scenario.seed,
                                                  error))

        bounds = scenario.bounds[min(self.t + 1, scenario.T - 1)]
        t_in = float(self._x[self._in_index])
        t_out = float(self._x[self._out_index])
        c1, c2 = constraint_indicator((t_in, t_out), bounds)

        self.t += 1
        self.last_action = action
        self.done = self.t == scenario.T

        return StepResult(self._observation(), np.array([r0, c1, c2]),
                          self.done, t_in, t_out, float(bounds[0]),
                          float(bounds[1]))

    def _observation(self) -> np.ndarray:
        index = min(self.t, self.scenario.T - 1)
        return np.concatenate([self._x, self.scenario.bounds[index],
                               [self.scenario.demand[index]]])


@dataclass(frozen=True, eq=False)
class EnvFactory:
    """
    Picklable recipe for environments, one per worker.
    """

    plant_config: PlantConfig
    rom: Optional[RomModel] = None
    use_plant: bool = False
    dt_rom: float = 25.0
    action_min: float = 0.4
    action_max: float = 1.05

    def __call__(self) -> LoadFollowingEnv:
        if self.use_plant:
            dt_rom = self.rom.dt_rom if self.rom is not None else self.dt_rom
            backend = PlantBackend(self.plant_config, dt_rom)
        else:
            if self.rom is None:
                raise ContractError('A model is required for the model '
                                    'environment')
            backend = RomBackend(self.rom, self.plant_config)

        return LoadFollowingEnv(backend, self.action_min, self.action_max)

    def on_plant(self) -> 'EnvFactory':
        return EnvFactory(self.plant_config, self.rom, True, self.dt_rom,
                          self.action_min, self.action_max)


@dataclass
class EpisodeLog:
    """
    Per-step record of one episode, aligned with ``EPISODE_COLUMNS``.
    """

    seed: int
    actions: np.ndarray
    demand: np.ndarray
    c_in_min: np.ndarray
    c_out_max: np.ndarray
    t_in: np.ndarray
    t_out: np.ndarray
    r0: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    diverged: bool = False

    @property
    def tau(self) -> int:
        return self.actions.shape[0]

    def rows(self) -> List[dict]:
        return [{'t': t, 'action': float(self.actions[t]),
                 'demand': float(self.demand[t]),
                 'c_in_min': float(self.c_in_min[t]),
                 'c_out_max': float(self.c_out_max[t]),
                 't_hx_s_in': float(self.t_in[t]),
                 't_hx_s_out': float(self.t_out[t]),
                 'r0': float(self.r0[t]),
                 'c1': int(self.c1[t]), 'c2': int(self.c2[t])}
                for t in range(self.tau)]

    @classmethod
    def from_rows(cls, rows: Sequence[Mapping], seed: int = 0) \
            -> 'EpisodeLog':
        def col(name, dtype=float):
            return np.array([row[name] for row in rows], dtype=dtype)

        return cls(seed, col('action'), col('demand'), col('c_in_min'),
                   col('c_out_max'), col('t_hx_s_in'), col('t_hx_s_out'),
                   col('r0'), col('c1', int), col('c2', int))


def run_episode(env: LoadFollowingEnv, scenario: Scenario,
                act: Callable[[np.ndarray, int], float]) -> EpisodeLog:
    """
    Roll out ``act(observation, t)`` for a whole scenario.

    A diverging model truncates the log and sets ``diverged``.
    """
    observation = env.reset(scenario)
    columns: Dict[str, list] = {name: [] for name in EPISODE_COLUMNS}
    diverged = False

    for t in range(scenario.T):
        action = act(observation, t)
        try:
            result = env.step(action)
        except DivergenceError as error:
            logger.warning('%s', error)
            diverged = True
            break

        columns['action'].append(action)
        columns['demand'].append(float(scenario.demand[t]))
        columns['c_in_min'].append(result.c_in_min)
        columns['c_out_max'].append(result.c_out_max)
        columns['t_hx_s_in'].append(result.t_hx_s_in)
        columns['t_hx_s_out'].append(result.t_hx_s_out)
        columns['r0'].append(result.reward[0])
        columns['c1'].append(int(result.reward[1]))
        columns['c2'].append(int(result.reward[2]))
        observation = result.observation

    def arr(name, dtype=float):
        return np.array(columns[name], dtype=dtype)

    return EpisodeLog(scenario.seed, arr('action'), arr('demand'),
                      arr('c_in_min'), arr('c_out_max'), arr('t_hx_s_in'),
                      arr('t_hx_s_out'), arr('r0'), arr('c1', int),
                      arr('c2', int), diverged)
