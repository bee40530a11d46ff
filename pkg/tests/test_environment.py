import numpy as np
import pytest
from hypothesis import given, strategies as st

from lambdappo.environment import EPISODE_COLUMNS, EnvFactory, EpisodeLog, \
    LoadFollowingEnv, PlantBackend, Scenario, ScenarioParams, ScenarioSet, \
    constraint_indicator, gen_constraint_schedule, gen_demand, \
    make_scenario, make_scenario_set, primary_reward, run_episode
from lambdappo.errors import ConfigError, ContractError, DomainError
from lambdappo.plant import ROM_FIELDS, trim
from lambdappo.sysid import FeatureLibrary, RomModel

PARAMS = ScenarioParams()


def flat_scenario(T, bounds, demand=1.0, seed=0):
    return Scenario(seed, np.full(T, demand), np.array(bounds, dtype=float))


@given(st.integers(min_value=0, max_value=2 ** 40))
def test_demand_shape(seed):
    demand = gen_demand(seed, 300, PARAMS)

    assert demand.shape == (300,)
    assert demand[:PARAMS.hold_min].tolist() == [1.0] * PARAMS.hold_min
    assert np.all(demand >= PARAMS.level_min - 1e-12)
    assert np.all(demand <= 1.0 + 1e-12)
    assert np.max(np.abs(np.diff(demand))) <= PARAMS.max_ramp_rate + 1e-12


@given(st.integers(min_value=0, max_value=2 ** 40))
def test_bounds_contain_full_power_temperatures(seed):
    bounds = gen_constraint_schedule(seed, 300, PARAMS)

    assert bounds.shape == (300, 2)
    assert np.all(bounds[:, 0] < PARAMS.t_in_ref)
    assert np.all(bounds[:, 1] > PARAMS.t_out_ref)

    changes = np.any(np.diff(bounds, axis=0) != 0, axis=1).sum()
    assert changes <= PARAMS.max_bound_changes


def test_full_power_trim_is_safe(plant_config):
    state = trim(1.0, plant_config)

    assert state.t_hx_s_in == pytest.approx(PARAMS.t_in_ref)
    assert state.t_hx_s_out == pytest.approx(PARAMS.t_out_ref)


def test_scenarios_are_deterministic():
    first = make_scenario(123, PARAMS)
    second = make_scenario(123, PARAMS)

    assert np.array_equal(first.demand, second.demand)
    assert np.array_equal(first.bounds, second.bounds)

    other = make_scenario(124, PARAMS)
    assert not np.array_equal(first.demand, other.demand) or \
        not np.array_equal(first.bounds, other.bounds)


def test_short_horizon_errors():
    with pytest.raises(ContractError):
        gen_demand(1, 1, PARAMS)

    with pytest.raises(ContractError):
        gen_constraint_schedule(1, 1, PARAMS)


def test_scenario_set_splits():
    scenarios = make_scenario_set(7, 4, 2, 3, T=20)

    assert len(scenarios) == 9
    assert scenarios.count('val') == 2

    seeds = [s for tag in ('train', 'val', 'test')
             for s in scenarios.seeds(tag)]
    assert len(set(seeds)) == 9

    scenario = scenarios.get('test', 1)
    assert scenario.split_tag == 'test'
    assert scenario.T == 20
    assert scenarios.get('test', 1) is scenario

    assert [s.seed for s in scenarios.split('val')] == \
        list(scenarios.seeds('val'))


def test_scenario_set_is_reproducible():
    first = make_scenario_set(7, 3, 1, 1, T=30)
    second = make_scenario_set(7, 3, 1, 1, T=30)

    for index in range(3):
        assert np.array_equal(first.get('train', index).demand,
                              second.get('train', index).demand)


def test_scenario_set_errors():
    scenarios = make_scenario_set(7, 1, 1, 1, T=10)

    with pytest.raises(ContractError):
        scenarios.seeds('holdout')

    with pytest.raises(ContractError):
        make_scenario_set(7, 0, 1, 1)

    with pytest.raises(ContractError):
        make_scenario_set(-1, 1, 1, 1)


def test_scenario_set_from_scenarios():
    made = [make_scenario(seed, PARAMS, tag, T=10)
            for seed, tag in ((5, 'train'), (6, 'train'), (7, 'test'))]

    scenarios = ScenarioSet.from_scenarios(made)

    assert scenarios.seeds('train') == (5, 6)
    assert scenarios.count('val') == 0
    assert scenarios.get('test', 0) is made[2]

    with pytest.raises(ContractError):
        ScenarioSet.from_scenarios([make_scenario(1, PARAMS, 'other', T=10)])


def test_scenario_rows_round_trip():
    scenario = make_scenario(42, PARAMS, 'val', T=25)

    loaded = Scenario.from_rows(scenario.rows(), scenario.meta)

    assert loaded.seed == 42
    assert loaded.split_tag == 'val'
    assert np.array_equal(loaded.demand, scenario.demand)
    assert np.array_equal(loaded.bounds, scenario.bounds)

    with pytest.raises(ContractError):
        Scenario.from_rows([], scenario.meta)


@pytest.mark.parametrize('temperatures, expected', [
    ((0.03, 0.36), (0, 0)),
    ((0.01, 0.36), (1, 0)),
    ((0.03, 0.40), (0, 1)),
    ((0.00, 0.40), (1, 1)),
    ((0.02, 0.38), (0, 0)),
])
def test_constraint_indicator(temperatures, expected):
    assert constraint_indicator(temperatures, (0.02, 0.38)) == expected


def test_constraint_indicator_matches_vectorized_comparison():
    rng = np.random.default_rng(21)
    n = 100000
    temperatures = rng.uniform(-0.1, 0.5, size=(n, 2))
    bounds = np.column_stack([rng.uniform(-0.1, 0.2, n),
                              rng.uniform(0.2, 0.5, n)])
    temperatures[::10] = bounds[::10]

    flags = np.array([constraint_indicator(x, b)
                      for x, b in zip(temperatures, bounds)])
    expected = np.column_stack([temperatures[:, 0] < bounds[:, 0],
                                temperatures[:, 1] > bounds[:, 1]])

    assert flags.shape == (n, 2)
    assert np.array_equal(flags, expected.astype(int))
    assert not np.any(flags[::10])


def test_primary_reward():
    assert primary_reward(0.8, 0.9) == pytest.approx(-0.01)
    assert primary_reward(0.7, 0.7) == 0.0


def test_reset_observation(env_factory, plant_config, scenarios):
    env = env_factory()
    scenario = scenarios.get('train', 0)

    observation = env.reset(scenario)

    assert env.obs_dim == 14
    assert observation.shape == (14,)
    assert np.allclose(observation[:11],
                       trim(scenario.demand[0], plant_config).rom_vector())
    assert observation[11:13].tolist() == scenario.bounds[0].tolist()
    assert observation[13] == scenario.demand[0]


def test_step_holds_trim(env_factory, plant_config):
    env = env_factory()
    scenario = flat_scenario(3, [[0.0, 0.4]] * 3)
    env.reset(scenario)

    result = env.step(1.0)

    assert result.reward.tolist() == pytest.approx([0.0, 0.0, 0.0])
    assert result.t_hx_s_in == pytest.approx(0.05)
    assert not result.done
    assert env.t == 1
    assert env.last_action == 1.0


def test_costs_use_next_bounds(env_factory):
    env = env_factory()
    # Full-power outlet temperature is 0.35
    scenario = flat_scenario(3, [[0.0, 0.4], [0.0, 0.3], [0.0, 0.4]])
    env.reset(scenario)

    first = env.step(1.0)
    assert first.reward[2] == 1
    assert first.c_out_max == 0.3
    assert first.observation[12] == 0.3

    second = env.step(1.0)
    assert second.reward[2] == 0
    assert second.c_out_max == 0.4

    # The last step reuses the final bounds
    last = env.step(1.0)
    assert last.done
    assert last.c_out_max == 0.4


def test_step_contracts(env_factory):
    env = env_factory()
    scenario = flat_scenario(2, [[0.0, 0.4]] * 2)

    with pytest.raises(ContractError):
        env.step(1.0)

    env.reset(scenario)
    with pytest.raises(ContractError):
        env.step(1.2)
    with pytest.raises(ContractError):
        env.step(0.3)
    with pytest.raises(DomainError):
        env.step(float('nan'))

    env.step(1.0)
    env.step(1.0)
    with pytest.raises(ContractError):
        env.step(1.0)


def test_env_needs_secondary_temperatures():
    class Backend:
        state_names = ('power',)

    with pytest.raises(ContractError):
        LoadFollowingEnv(Backend())


def test_run_episode_log(env_factory, scenarios):
    scenario = scenarios.get('train', 1)
    env = env_factory()

    log = run_episode(env, scenario, lambda obs, t: float(obs[13]))

    assert log.tau == scenario.T
    assert not log.diverged
    assert np.array_equal(log.actions, scenario.demand)
    assert np.all(log.r0 == 0.0)

    rows = log.rows()
    assert list(rows[0]) == list(EPISODE_COLUMNS)

    loaded = EpisodeLog.from_rows(rows, seed=scenario.seed)
    assert np.array_equal(loaded.t_out, log.t_out)
    assert np.array_equal(loaded.c1, log.c1)


def test_run_episode_divergence(plant_config, scenarios):
    library = FeatureLibrary()
    rom = RomModel.from_coeffs(
        np.full((library.n_features, library.n_states), 1e308), library,
        25.0)
    env = EnvFactory(plant_config, rom)()

    log = run_episode(env, scenarios.get('train', 0), lambda obs, t: 1.0)

    assert log.diverged
    assert log.tau == 0


def test_plant_backend(plant_config, env_factory):
    env = env_factory.on_plant()()
    scenario = flat_scenario(2, [[0.0, 0.4]] * 2)
    observation = env.reset(scenario)

    result = env.step(1.0)

    assert np.allclose(result.observation[:11], observation[:11], atol=1e-5)
    assert result.reward[1:].tolist() == [0.0, 0.0]


def test_plant_backend_contracts(plant_config):
    with pytest.raises(ContractError):
        PlantBackend(plant_config, 0.3)

    with pytest.raises(ContractError):
        EnvFactory(plant_config)()

    backend = PlantBackend(plant_config, 25.0)
    assert backend.state_names == ROM_FIELDS


@pytest.mark.parametrize('field, value', [
    ('T', 1),
    ('min_ramps', 4),
    ('level_min', 0.3),
    ('hold_min', 0),
    ('in_margin_min', 0.0),
    ('n_val', 0),
    ('action_min', 1.1),
])
def test_scenario_params_validate(field, value):
    with pytest.raises(ConfigError):
        ScenarioParams(**{field: value}).validate()
