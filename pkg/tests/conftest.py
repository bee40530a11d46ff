from pathlib import Path

import numpy as np
import pytest  # type: ignore
from hypothesis import settings

from lambdappo.environment import EnvFactory, ScenarioParams, \
    make_scenario_set
from lambdappo.middlewares import CachingMiddleware
from lambdappo.plant import PlantConfig, ROM_FIELDS, simulate_demand, trim
from lambdappo.storages import MemoryStorage, TextStorage
from lambdappo.sysid import FeatureLibrary, RomModel, Trajectory, \
    identify_rom

settings.register_profile('lambdappo', max_examples=50, derandomize=True,
                          deadline=None)
settings.load_profile('lambdappo')


@pytest.fixture(params=['memory', 'text'])
def text_storage(request, tmp_path: Path):
    if request.param == 'text':
        storage_ = TextStorage(str(tmp_path / 'doc.txt'))
    else:
        storage_ = MemoryStorage()

    yield storage_

    storage_.close()


@pytest.fixture
def storage():
    return CachingMiddleware(MemoryStorage)()


@pytest.fixture(scope='session')
def plant_config():
    return PlantConfig()


def make_toy_rom(config: PlantConfig, dt_rom: float = 25.0) -> RomModel:
    """
    Linear model relaxing towards the interpolated trim point of the action.
    """
    full = trim(1.0, config).rom_vector()
    half = trim(0.5, config).rom_vector()
    slope = (full - half) / 0.5

    library = FeatureLibrary()
    n = library.n_states
    coeffs = np.zeros((library.n_features, n))
    coeffs[0] = 0.2 * (full - slope)
    coeffs[1:1 + n] = 0.8 * np.eye(n)
    coeffs[1 + n] = 0.2 * slope

    return RomModel.from_coeffs(coeffs, library, dt_rom)


@pytest.fixture(scope='session')
def toy_rom(plant_config):
    return make_toy_rom(plant_config)


@pytest.fixture(scope='session')
def env_factory(plant_config, toy_rom):
    return EnvFactory(plant_config, toy_rom, dt_rom=toy_rom.dt_rom)


@pytest.fixture(scope='session')
def scenario_params():
    return ScenarioParams(T=40, hold_min=3, hold_max=8, n_train=6, n_val=2,
                          n_test=3)


@pytest.fixture(scope='session')
def scenarios(scenario_params):
    return make_scenario_set(7, 6, 2, 3, params=scenario_params)


@pytest.fixture(scope='session')
def identified(plant_config, scenarios):
    """
    A model identified from short simulated plant runs.
    """
    trajectories = []
    for index in range(5):
        demand = scenarios.get('train', index).demand[:30]
        rng = np.random.default_rng([11, index])
        run = simulate_demand(demand, plant_config, hold=25.0, dither=0.03,
                              rng=rng)
        trajectories.append(Trajectory.from_run(run, ROM_FIELDS))

    return identify_rom(trajectories, threshold=0.02, holdout_fraction=0.2,
                        factor=5)
