"""
Training checkpoints.

A checkpoint holds everything needed to continue training or to deploy the
policy without other inputs: network and optimizer tensors, multipliers,
the run configuration and the identified model. Checkpoints are stored
through a :class:`~lambdappo.storages.Storage`, usually a
:class:`~lambdappo.storages.TextStorage`.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .config import RunConfig
from .errors import CheckpointError
from .nn import AdamState, MlpParams, PolicyParams
from .ppo import LagrangeState, TrainerState
from .storages import Storage
from .sysid import ROM_FORMAT_VERSION, RomModel, rom_document, \
    rom_from_document
from .utils import stable_hash

__all__ = ('Checkpoint', 'CHECKPOINT_FORMAT_VERSION', 'save_checkpoint',
           'load_checkpoint', 'checkpoint_document',
           'checkpoint_from_document')

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """
    A trainer state together with the configuration and model it was
    trained with.
    """

    state: TrainerState
    config_items: Tuple[Tuple[str, str], ...]
    rom: Optional[RomModel] = None

    @property
    def epoch(self) -> int:
        return self.state.epoch

    @property
    def config_hash(self) -> str:
        return stable_hash(self.config_items)

    @property
    def config(self) -> RunConfig:
        return RunConfig.from_items(dict(self.config_items))

    @classmethod
    def create(cls, state: TrainerState, config: RunConfig,
               rom: Optional[RomModel] = None) -> 'Checkpoint':
        return cls(state, tuple(config.to_items()), rom)


def _net_tensors(prefix: str, net: MlpParams) -> Dict[str, np.ndarray]:
    tensors = {}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        tensors['{}.w{}'.format(prefix, i)] = w
        tensors['{}.b{}'.format(prefix, i)] = b

    return tensors


def _net_from_tensors(prefix: str, tensors: Dict[str, np.ndarray]) \
        -> MlpParams:
    weights, biases = [], []
    i = 0
    while '{}.w{}'.format(prefix, i) in tensors:
        weights.append(tensors['{}.w{}'.format(prefix, i)])
        bias = '{}.b{}'.format(prefix, i)
        if bias not in tensors:
            raise CheckpointError('Missing tensor {!r}'.format(bias))
        biases.append(tensors[bias])
        i += 1

    if not weights:
        raise CheckpointError('Missing tensors of {!r}'.format(prefix))

    for i, (w, b) in enumerate(zip(weights, biases)):
        if w.ndim != 2 or b.shape != (w.shape[0],) or \
                (i and w.shape[1] != weights[i - 1].shape[0]):
            raise CheckpointError('Shape mismatch in tensor '
                                  '{!r}'.format('{}.w{}'.format(prefix, i)))

    return MlpParams(tuple(weights), tuple(biases))


def _opt_tensors(prefix: str, opt: AdamState) -> Dict[str, np.ndarray]:
    tensors = {}
    for i, (m, v) in enumerate(zip(opt.m, opt.v)):
        tensors['{}.m{}'.format(prefix, i)] = m
        tensors['{}.v{}'.format(prefix, i)] = v

    return tensors


def _opt_from_tensors(prefix: str, tensors: Dict[str, np.ndarray],
                      params: MlpParams, step: int) -> AdamState:
    m, v = [], []
    for i, array in enumerate(params.arrays()):
        for kind, out in (('m', m), ('v', v)):
            name = '{}.{}{}'.format(prefix, kind, i)
            if name not in tensors:
                raise CheckpointError('Missing tensor {!r}'.format(name))
            value = tensors[name]
            if value.shape != array.shape:
                raise CheckpointError('Shape mismatch in tensor {!r}: '
                                      'expected {}'.format(name, array.shape))
            out.append(value)

    return AdamState(tuple(m), tuple(v), step)


def checkpoint_document(checkpoint: Checkpoint) -> dict:
    state = checkpoint.state
    policy = state.policy

    scalars = {
        'epoch': state.epoch,
        'seed': state.seed,
        'lambda1': float(state.lagrange.lambdas[0]),
        'lambda2': float(state.lagrange.lambdas[1]),
        'a_min': float(policy.a_min),
        'a_max': float(policy.a_max),
        'ls_min': float(policy.ls_min),
        'ls_max': float(policy.ls_max),
        'policy_opt.step': state.policy_opt.step,
        'value_opt.step': state.value_opt.step,
        'config_hash': checkpoint.config_hash,
    }
    for key, value in checkpoint.config_items:
        scalars['config.' + key] = value

    tensors: Dict[str, np.ndarray] = {}
    tensors.update(_net_tensors('policy', policy.net))
    tensors.update(_net_tensors('value', state.value))
    tensors.update(_opt_tensors('policy_opt', state.policy_opt))
    tensors.update(_opt_tensors('value_opt', state.value_opt))

    if checkpoint.rom is not None:
        rom = rom_document(checkpoint.rom)
        for key, value in rom['scalars'].items():
            scalars['rom.' + key] = value
        for key, value in rom['tensors'].items():
            tensors['rom.' + key] = value

    return {'kind': 'checkpoint', 'version': CHECKPOINT_FORMAT_VERSION,
            'scalars': scalars, 'tensors': tensors}


def _prefixed(mapping: dict, prefix: str) -> dict:
    return {key[len(prefix):]: value for key, value in mapping.items()
            if key.startswith(prefix)}


def checkpoint_from_document(document: dict) -> Checkpoint:
    if document.get('kind') != 'checkpoint':
        raise CheckpointError('Not a checkpoint (kind {!r})'.format(
            document.get('kind')))
    if document.get('version') != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError('Unsupported checkpoint version {!r}'.format(
            document.get('version')))

    scalars = document['scalars']
    tensors = document['tensors']

    try:
        policy_net = _net_from_tensors('policy', tensors)
        value_net = _net_from_tensors('value', tensors)
        policy = PolicyParams(policy_net, scalars['a_min'], scalars['a_max'],
                              scalars['ls_min'], scalars['ls_max'])
        state = TrainerState(
            epoch=int(scalars['epoch']),
            policy=policy,
            value=value_net,
            policy_opt=_opt_from_tensors('policy_opt', tensors, policy_net,
                                         int(scalars['policy_opt.step'])),
            value_opt=_opt_from_tensors('value_opt', tensors, value_net,
                                        int(scalars['value_opt.step'])),
            lagrange=LagrangeState((float(scalars['lambda1']),
                                    float(scalars['lambda2']))),
            seed=int(scalars['seed']),
        )
    except KeyError as error:
        raise CheckpointError('Missing checkpoint entry {}'.format(error))

    config_items = tuple((key, str(value)) for key, value
                         in _prefixed(scalars, 'config.').items())

    rom = None
    rom_scalars = _prefixed(scalars, 'rom.')
    if rom_scalars:
        rom = rom_from_document({'kind': 'rom',
                                 'version': ROM_FORMAT_VERSION,
                                 'scalars': rom_scalars,
                                 'tensors': _prefixed(tensors, 'rom.')})

    checkpoint = Checkpoint(state, config_items, rom)

    stored = scalars.get('config_hash')
    if stored is not None and stored != checkpoint.config_hash:
        raise CheckpointError('Checkpoint is corrupt: stored config hash '
                              'does not match its configuration')

    return checkpoint


def save_checkpoint(storage: Storage, checkpoint: Checkpoint) -> None:
    storage.write(checkpoint_document(checkpoint))
    logger.info('Saved checkpoint of epoch %d', checkpoint.epoch)


def load_checkpoint(storage: Storage, expected_hash: Optional[str] = None,
                    allow_hash_mismatch: bool = False) -> Checkpoint:
    """
    Load a checkpoint.

    :param expected_hash: config hash of the run that wants to use the
                          checkpoint
    :param allow_hash_mismatch: accept a checkpoint trained under a
                                different configuration
    :raises CheckpointError: if the storage is empty, the file is invalid
                             or the configuration differs without override
    """
    document = storage.read()
    if document is None:
        raise CheckpointError('Checkpoint file is empty')

    checkpoint = checkpoint_from_document(document)

    if expected_hash is not None and expected_hash != checkpoint.config_hash:
        if not allow_hash_mismatch:
            raise CheckpointError(
                'Checkpoint was trained with a different configuration '
                '(hash {}, expected {})'.format(checkpoint.config_hash[:12],
                                                expected_hash[:12]))
        logger.warning('Loading checkpoint despite configuration hash '
                       'mismatch')

    return checkpoint
