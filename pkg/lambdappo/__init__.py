"""
lambdappo trains load-following controllers for a power plant with
chance-constrained proximal policy optimization.

A synthetic reference plant is identified as a sparse reduced-order model,
a policy is trained on that model under two temperature constraints whose
Lagrange multipliers are learned alongside, and the trained policy is
deployed on the reference plant with per-step action clipping.

Usage example:

>>> from lambdappo import make_scenario_set, gamma_budget_check
>>> scenarios = make_scenario_set(master_seed=7, n_train=4, n_val=1,
...                               n_test=1, T=50)
>>> len(scenarios), scenarios.get('train', 0).T
(6, 50)
>>> gamma_budget_check(0.99, 300).passed
True
"""

from .environment import EnvFactory, LoadFollowingEnv, Scenario, \
    ScenarioParams, ScenarioSet, make_scenario_set
from .errors import CheckpointError, ConfigError, ContractError, \
    DivergenceError, DomainError, IntegrationError, NumericError, TrimError
from .metrics import MetricsReport, evaluate_policy, summarize
from .plant import PlantConfig, PlantState, supervisory_step, trim
from .ppo import TrainConfig, Trainer, gamma_budget_check, train, \
    transfer_rollout
from .storages import CsvStorage, MemoryStorage, Storage, TextStorage
from .sysid import RomModel, identify_rom
from .version import __version__

__all__ = ('PlantConfig', 'PlantState', 'trim', 'supervisory_step',
           'RomModel', 'identify_rom', 'Scenario', 'ScenarioParams',
           'ScenarioSet', 'make_scenario_set', 'LoadFollowingEnv',
           'EnvFactory', 'TrainConfig', 'Trainer', 'train',
           'gamma_budget_check', 'transfer_rollout', 'MetricsReport',
           'evaluate_policy', 'summarize', 'Storage', 'TextStorage',
           'CsvStorage', 'MemoryStorage', 'ContractError', 'DomainError',
           'ConfigError', 'CheckpointError', 'NumericError',
           'IntegrationError', 'TrimError', 'DivergenceError')
