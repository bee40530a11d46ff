"""
Run configuration files.

A configuration file is a flat list of ``key = value`` assignments, one per
line, with ``#`` starting a comment. Keys are the field names of the four
section dataclasses (:class:`~lambdappo.plant.PlantConfig`,
:class:`~lambdappo.sysid.SysIdConfig`,
:class:`~lambdappo.environment.ScenarioParams` and
:class:`~lambdappo.ppo.TrainConfig`) plus the run-level keys of
:class:`RunConfig`. Keys not given keep their defaults.

>>> config = parse_config_text('gamma = 0.995\\nT = 200  # shorter episodes')
>>> config.train.gamma, config.scenarios.T
(0.995, 200)
"""

import logging
import os
import typing
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, Mapping, Optional, Tuple

from .environment import ScenarioParams
from .errors import ConfigError
from .plant import PlantConfig
from .ppo import TrainConfig
from .sysid import SysIdConfig
from .utils import stable_hash

__all__ = ('RunConfig', 'parse_config', 'parse_config_text', 'SECTIONS',
           'LOG_LEVELS')

logger = logging.getLogger(__name__)

# Attribute of RunConfig holding each section
SECTIONS = (
    ('plant', PlantConfig),
    ('sysid', SysIdConfig),
    ('scenarios', ScenarioParams),
    ('train', TrainConfig),
)

LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR')

_RUN_KEYS = ('work_dir', 'rom_path', 'checkpoint_dir', 'log_level')


@dataclass(frozen=True)
class RunConfig:
    """
    Everything one pipeline run is configured by.
    """

    plant: PlantConfig = field(default_factory=PlantConfig)
    sysid: SysIdConfig = field(default_factory=SysIdConfig)
    scenarios: ScenarioParams = field(default_factory=ScenarioParams)
    train: TrainConfig = field(default_factory=TrainConfig)

    work_dir: str = '.'
    rom_path: str = 'rom.txt'
    checkpoint_dir: str = 'checkpoints'
    log_level: str = 'WARNING'

    def validate(self) -> 'RunConfig':
        """
        Check every section. The discount budget is checked separately when
        training starts.
        """
        self.plant.validate()
        self.sysid.validate()
        self.scenarios.validate()
        self.train.validate()
        if self.log_level not in LOG_LEVELS:
            raise ConfigError('log_level must be one of {}, got {!r}'.format(
                ', '.join(LOG_LEVELS), self.log_level))

        return self

    def resolve(self, path: str) -> str:
        """
        Resolve a path relative to ``work_dir``.
        """
        return os.path.join(self.work_dir, path)

    def to_items(self) -> List[Tuple[str, str]]:
        """
        All keys and their values in canonical order, values rendered the
        way the configuration file format reads them back.
        """
        items = []
        for attr, _ in SECTIONS:
            section = getattr(self, attr)
            for f in fields(section):
                items.append((f.name, _render(getattr(section, f.name))))
        for key in _RUN_KEYS:
            items.append((key, _render(getattr(self, key))))

        return items

    def config_hash(self) -> str:
        return stable_hash(self.to_items())

    @classmethod
    def from_items(cls, items: Mapping[str, str]) -> 'RunConfig':
        """
        Build a configuration from textual values, as read from a file or a
        checkpoint.

        :raises ConfigError: on unknown keys or unparsable values
        """
        known = _known_keys()
        unknown = sorted(set(items) - set(known))
        if unknown:
            raise ConfigError('Unknown configuration keys: {}'.format(
                ', '.join(unknown)))

        updates: Dict[str, Dict[str, Any]] = {}
        for key, raw in items.items():
            attr, kind = known[key]
            updates.setdefault(attr, {})[key] = _parse_value(key, raw, kind)

        config = cls()
        sections = {attr: replace(getattr(config, attr),
                                  **updates.get(attr, {}))
                    for attr, _ in SECTIONS}

        return replace(config, **sections, **updates.get('', {}))


def _known_keys() -> Dict[str, Tuple[str, Any]]:
    known: Dict[str, Tuple[str, Any]] = {}
    for attr, section in SECTIONS:
        hints = typing.get_type_hints(section)
        for f in fields(section):
            if f.name in known:
                raise ConfigError('Configuration key {!r} is ambiguous'.format(
                    f.name))
            known[f.name] = (attr, hints[f.name])
    for key in _RUN_KEYS:
        known[key] = ('', str)

    return known


def _render(value) -> str:
    if value is None:
        return 'none'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ','.join(_render(v) for v in value)

    return str(value)


def _parse_value(key: str, raw: str, kind):
    def mismatch():
        return ConfigError('Invalid value for {}: {!r}'.format(key, raw))

    if kind is bool:
        lowered = raw.lower()
        if lowered in ('true', 'yes', 'on', '1'):
            return True
        if lowered in ('false', 'no', 'off', '0'):
            return False
        raise mismatch()

    if kind is int:
        try:
            return int(raw)
        except ValueError:
            raise mismatch()

    if kind is float:
        try:
            return float(raw)
        except ValueError:
            raise mismatch()

    if kind is str:
        return raw

    # Optional pair of floats, e.g. fixed_lambda
    if raw.lower() in ('none', ''):
        return None
    try:
        pair = tuple(float(part) for part in raw.split(','))
    except ValueError:
        raise mismatch()
    if len(pair) != 2:
        raise mismatch()

    return pair


def parse_config_text(text: str) -> RunConfig:
    """
    Parse the contents of a configuration file.

    :raises ConfigError: on malformed lines, duplicate or unknown keys,
                         type mismatches and violated section invariants
    """
    items: Dict[str, str] = {}

    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue

        key, sep, value = line.partition('=')
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError('Line {}: expected "key = value", got '
                              '{!r}'.format(number, line))
        if key in items:
            raise ConfigError('Line {}: duplicate key {!r}'.format(number,
                                                                   key))
        items[key] = value

    config = RunConfig.from_items(items).validate()
    logger.debug('Parsed %d configuration keys', len(items))

    return config


def parse_config(path: Optional[str]) -> RunConfig:
    """
    Read a configuration file; ``None`` gives the defaults.

    :raises ConfigError: if the file does not exist or is invalid
    """
    if path is None:
        return RunConfig().validate()

    try:
        with open(path, encoding='utf-8') as handle:
            text = handle.read()
    except FileNotFoundError:
        raise ConfigError('Configuration file not found: {}'.format(path))

    return parse_config_text(text)
