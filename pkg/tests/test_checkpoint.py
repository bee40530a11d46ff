import numpy as np
import pytest

from lambdappo.checkpoint import Checkpoint, load_checkpoint, \
    save_checkpoint
from lambdappo.config import parse_config_text
from lambdappo.errors import CheckpointError
from lambdappo.ppo import Trainer
from lambdappo.storages import MemoryStorage, TextStorage
from lambdappo.sysid import save_rom

CONFIG_TEXT = """
T = 40
hold_min = 3
hold_max = 8
epochs = 2
workers = 2
hidden_size = 8
policy_iters = 3
value_iters = 3
validate_every = 0
"""


@pytest.fixture(scope='module')
def config():
    return parse_config_text(CONFIG_TEXT)


@pytest.fixture
def trainer(config, env_factory, scenarios):
    trainer = Trainer(config.train, env_factory, scenarios)
    trainer.run(epochs=1)
    return trainer


def write(path, checkpoint):
    storage = TextStorage(str(path))
    save_checkpoint(storage, checkpoint)
    storage.close()


def read(path, **kwargs):
    storage = TextStorage(str(path), access_mode='r')
    try:
        return load_checkpoint(storage, **kwargs)
    finally:
        storage.close()


def test_round_trip_is_byte_identical(tmp_path, trainer, config, toy_rom):
    checkpoint = Checkpoint.create(trainer.state, config, toy_rom)
    write(tmp_path / 'a.txt', checkpoint)

    loaded = read(tmp_path / 'a.txt')
    write(tmp_path / 'b.txt', loaded)

    assert (tmp_path / 'a.txt').read_bytes() == \
        (tmp_path / 'b.txt').read_bytes()


def test_round_trip_contents(tmp_path, trainer, config, toy_rom):
    state = trainer.state
    write(tmp_path / 'ckpt.txt', Checkpoint.create(state, config, toy_rom))

    loaded = read(tmp_path / 'ckpt.txt')

    assert loaded.epoch == 1
    assert loaded.config == config
    assert loaded.config_hash == config.config_hash()
    assert loaded.state.seed == state.seed
    assert loaded.state.lagrange == state.lagrange
    assert np.array_equal(loaded.state.policy.net.flat(),
                          state.policy.net.flat())
    assert np.array_equal(loaded.state.value.flat(), state.value.flat())
    assert loaded.state.policy_opt.step == state.policy_opt.step
    for ours, theirs in zip(loaded.state.value_opt.v, state.value_opt.v):
        assert np.array_equal(ours, theirs)
    assert loaded.state.policy.a_max == state.policy.a_max

    assert np.array_equal(loaded.rom.coeffs, toy_rom.coeffs)
    assert loaded.rom.library == toy_rom.library


def test_checkpoint_without_model(trainer, config):
    storage = MemoryStorage()
    save_checkpoint(storage, Checkpoint.create(trainer.state, config))

    assert load_checkpoint(storage).rom is None


def test_resume_from_file_matches_uninterrupted(tmp_path, trainer, config,
                                                env_factory, scenarios):
    write(tmp_path / 'ckpt.txt', Checkpoint.create(trainer.state, config))
    resumed = Trainer(config.train, env_factory, scenarios,
                      state=read(tmp_path / 'ckpt.txt').state)
    resumed_stats = resumed.run(epochs=2)

    trainer_stats = trainer.run(epochs=2)

    assert [s.row() for s in resumed_stats] == \
        [s.row() for s in trainer_stats]
    assert np.array_equal(resumed.state.policy.net.flat(),
                          trainer.state.policy.net.flat())


def test_corrupt_tensor_is_named(tmp_path, trainer, config):
    path = tmp_path / 'ckpt.txt'
    write(path, Checkpoint.create(trainer.state, config))

    lines = path.read_text(encoding='utf-8').split('\n')
    header = next(i for i, line in enumerate(lines)
                  if line.startswith('tensor value.b0 '))
    lines[header + 1] = 'x' + lines[header + 1][1:]
    path.write_text('\n'.join(lines), encoding='utf-8')

    with pytest.raises(CheckpointError, match='value.b0'):
        read(path)


def test_truncated_file(tmp_path, trainer, config):
    path = tmp_path / 'ckpt.txt'
    write(path, Checkpoint.create(trainer.state, config))

    text = path.read_text(encoding='utf-8')
    path.write_text(text[:len(text) // 2], encoding='utf-8')

    with pytest.raises(CheckpointError):
        read(path)


def test_tampered_configuration(tmp_path, trainer, config):
    path = tmp_path / 'ckpt.txt'
    write(path, Checkpoint.create(trainer.state, config))

    text = path.read_text(encoding='utf-8')
    assert 'scalar config.workers str 2\n' in text
    path.write_text(text.replace('scalar config.workers str 2\n',
                                 'scalar config.workers str 3\n'),
                    encoding='utf-8')

    with pytest.raises(CheckpointError, match='corrupt'):
        read(path)


def test_hash_mismatch(trainer, config):
    storage = MemoryStorage()
    save_checkpoint(storage, Checkpoint.create(trainer.state, config))
    other = parse_config_text(CONFIG_TEXT + 'gamma = 0.995\n')

    with pytest.raises(CheckpointError, match='different configuration'):
        load_checkpoint(storage, expected_hash=other.config_hash())

    loaded = load_checkpoint(storage, expected_hash=other.config_hash(),
                             allow_hash_mismatch=True)
    assert loaded.config == config

    assert load_checkpoint(storage, expected_hash=config.config_hash())


def test_not_a_checkpoint(toy_rom):
    storage = MemoryStorage()

    with pytest.raises(CheckpointError, match='empty'):
        load_checkpoint(storage)

    save_rom(storage, toy_rom)
    with pytest.raises(CheckpointError, match='Not a checkpoint'):
        load_checkpoint(storage)


def test_missing_tensor(trainer, config):
    storage = MemoryStorage()
    save_checkpoint(storage, Checkpoint.create(trainer.state, config))
    del storage.memory['tensors']['policy_opt.v1']

    with pytest.raises(CheckpointError, match='policy_opt.v1'):
        load_checkpoint(storage)
