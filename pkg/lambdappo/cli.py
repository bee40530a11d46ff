"""
Command line front end of the load-following pipeline::

    lambdappo gen-scenarios  --config C --out DIR
    lambdappo simulate-plant --config C --scenarios DIR --out DIR
    lambdappo identify       --config C --data DIR --out rom.txt
    lambdappo train          --config C --rom rom.txt --scenarios DIR --out DIR
    lambdappo evaluate       --ckpt F --scenarios DIR --out report.csv
    lambdappo transfer       --ckpt F --scenario FILE --eta 5e-4 --out ep.csv
    lambdappo tune-eta       --ckpt F --scenarios DIR --grid 1e-4,5e-4
    lambdappo plot           --in CSV --out SVG

Exit status is 0 on success, 1 when a command is used incorrectly or its
inputs are invalid and 2 when a numerical procedure fails. Diagnostics go
to standard error.
"""

import argparse
import glob
import logging
import os
import sys
from dataclasses import replace
from typing import Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config
from .environment import EPISODE_COLUMNS, SCENARIO_COLUMNS, SPLITS, \
    EnvFactory, Scenario, ScenarioSet
from .errors import ContractError, NumericError
from .metrics import REPORT_COLUMNS, DemandFollowingPolicy, \
    evaluate_policy, report_meta, report_rows
from .middlewares import CachingMiddleware, LoggingMiddleware
from .plant import TRAJECTORY_COLUMNS, simulate_demand, trajectory_rows
from .plotting import plot_table
from .ppo import EPOCH_COLUMNS, EpochStats, Trainer, TrainerState, \
    select_eta, transfer_rollout
from .records import RecordTable
from .storages import CsvStorage, TextStorage
from .sysid import FeatureLibrary, Trajectory, identify_rom, load_rom, \
    save_rom
from .version import __version__

__all__ = ('main', 'build_parser', 'EXIT_OK', 'EXIT_CONTRACT',
           'EXIT_NUMERIC')

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_NUMERIC = 2

MANIFEST = 'manifest.csv'
MANIFEST_COLUMNS = ('seed', 'split', 'file')
EPOCHS_FILE = 'epochs.csv'


class _ArgumentParser(argparse.ArgumentParser):
    """
    Reports usage errors as contract errors instead of exiting with 2.
    """

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ContractError(message)


# Tables

def _open_csv(path: str, mode: str = 'r+'):
    if mode == 'r' and not os.path.isfile(path):
        raise ContractError('No such file: {}'.format(path))
    return LoggingMiddleware(CsvStorage)(path, create_dirs=True,
                                         access_mode=mode)


def read_table(path: str) -> RecordTable:
    return RecordTable(_open_csv(path, 'r'))


def write_table(path: str, columns: Sequence[str], rows: Iterable[Mapping],
                meta: Optional[Mapping] = None) -> None:
    """
    Replace ``path`` by a table holding ``rows``.
    """
    storage = _open_csv(path)
    storage.write({'meta': {}, 'columns': list(columns), 'rows': []})
    table = RecordTable(storage, columns, meta)
    table.insert_multiple(rows)
    storage.close()


def _require_dir(path: str) -> str:
    if not os.path.isdir(path):
        raise ContractError('No such directory: {}'.format(path))
    return path


def _text_storage(path: str, mode: str = 'r+') -> TextStorage:
    if mode == 'r' and not os.path.isfile(path):
        raise ContractError('No such file: {}'.format(path))
    if mode != 'r' and os.path.exists(path):
        os.remove(path)
    return TextStorage(path, create_dirs=True, access_mode=mode)


# Scenarios

def save_scenarios(directory: str, scenarios: ScenarioSet,
                   master_seed: int) -> List[str]:
    """
    Write one CSV per scenario and a manifest listing seeds and splits.
    """
    manifest = []
    for tag in SPLITS:
        for index, scenario in enumerate(scenarios.split(tag)):
            name = '{}_{:03d}.csv'.format(tag, index)
            write_table(os.path.join(directory, name), SCENARIO_COLUMNS,
                        scenario.rows(), scenario.meta)
            manifest.append({'seed': scenario.seed, 'split': tag,
                             'file': name})

    write_table(os.path.join(directory, MANIFEST), MANIFEST_COLUMNS, manifest,
                {'master_seed': master_seed})

    return [row['file'] for row in manifest]


def read_scenario(path: str) -> Scenario:
    table = read_table(path)
    if 'seed' not in table.meta:
        raise ContractError('Scenario file {} has no seed header'.format(path))
    return Scenario.from_rows(table.all(), table.meta)


def load_scenarios(directory: str) -> ScenarioSet:
    manifest = read_table(os.path.join(_require_dir(directory), MANIFEST))
    scenarios = []
    for row in manifest:
        scenario = read_scenario(os.path.join(directory, str(row['file'])))
        if scenario.seed != int(row['seed']) or \
                scenario.split_tag != row['split']:
            raise ContractError('Scenario file {} does not match the '
                                'manifest'.format(row['file']))
        scenarios.append(scenario)

    return ScenarioSet.from_scenarios(scenarios)


# Commands

def cmd_gen_scenarios(args, config: RunConfig) -> int:
    params = config.scenarios
    scenarios = ScenarioSet.generate(params.master_seed, params.n_train,
                                     params.n_val, params.n_test, params)
    files = save_scenarios(args.out, scenarios, params.master_seed)
    print('wrote {} scenarios to {}'.format(len(files), args.out))

    return EXIT_OK


def cmd_simulate_plant(args, config: RunConfig) -> int:
    scenarios = load_scenarios(args.scenarios)
    hold = config.sysid.subsample_factor * config.plant.dt_record
    count = min(config.sysid.n_trajectories, scenarios.count('train'))

    for index in range(count):
        scenario = scenarios.get('train', index)
        rng = np.random.default_rng([config.sysid.sysid_seed, index])
        run = simulate_demand(scenario.demand, config.plant, hold,
                              config.sysid.sysid_dither, rng)
        write_table(os.path.join(args.out, 'traj_{:03d}.csv'.format(index)),
                    TRAJECTORY_COLUMNS, trajectory_rows(run),
                    {'seed': scenario.seed})
        logger.info('Simulated scenario %s (%d records)', scenario.seed,
                    len(run.states))

    print('wrote {} trajectories to {}'.format(count, args.out))

    return EXIT_OK


def cmd_identify(args, config: RunConfig) -> int:
    paths = sorted(glob.glob(os.path.join(_require_dir(args.data),
                                          'traj_*.csv')))
    if not paths:
        raise ContractError('No trajectories found in {}'.format(args.data))

    trajectories = [Trajectory.from_rows(read_table(path).all())
                    for path in paths]
    settings = config.sysid
    rom, report = identify_rom(trajectories,
                               FeatureLibrary(degree=settings.degree),
                               settings.threshold, settings.holdout_fraction,
                               settings.subsample_factor,
                               settings.stlsq_iters)

    storage = _text_storage(args.out or config.resolve(config.rom_path))
    save_rom(storage, rom)
    storage.close()

    for line in report.lines():
        print(line)

    return EXIT_OK


def _env_factory(config: RunConfig, rom) -> EnvFactory:
    return EnvFactory(config.plant, rom, dt_rom=rom.dt_rom,
                      action_min=config.scenarios.action_min,
                      action_max=config.scenarios.action_max)


def _parse_pair(text: str) -> Tuple[float, float]:
    try:
        pair = tuple(float(part) for part in text.split(','))
    except ValueError:
        raise ContractError('Expected two comma separated numbers, got '
                            '{!r}'.format(text))
    if len(pair) != 2:
        raise ContractError('Expected two comma separated numbers, got '
                            '{!r}'.format(text))
    return pair  # type: ignore


def _checkpoint_path(directory: str, epoch: int) -> str:
    return os.path.join(directory, 'ckpt_{:04d}.txt'.format(epoch))


def cmd_train(args, config: RunConfig) -> int:
    if args.fixed_lambda is not None:
        train_config = replace(config.train,
                               fixed_lambda=_parse_pair(args.fixed_lambda))
        config = replace(config, train=train_config)

    out = args.out or config.resolve(config.checkpoint_dir)
    scenarios = load_scenarios(args.scenarios)
    if scenarios.count('train') < 1:
        raise ContractError('Scenario set has no training scenarios')
    config.train.validate(scenarios.get('train', 0).T)

    storage = _text_storage(args.rom or config.resolve(config.rom_path), 'r')
    rom = load_rom(storage)
    storage.close()

    factory = _env_factory(config, rom)

    state: Optional[TrainerState] = None
    if args.resume:
        storage = _text_storage(args.resume, 'r')
        checkpoint = load_checkpoint(storage, config.config_hash(),
                                     args.force)
        storage.close()
        state = checkpoint.state
        logger.info('Resuming after epoch %d', state.epoch)

    os.makedirs(out, exist_ok=True)
    epochs_storage = CachingMiddleware(CsvStorage)(
        os.path.join(out, EPOCHS_FILE), create_dirs=True)
    epochs_table = RecordTable(epochs_storage, EPOCH_COLUMNS)
    kept = [row for row in epochs_table
            if state is not None and int(row['epoch']) < state.epoch]
    epochs_table.truncate()
    epochs_table.insert_multiple(kept)

    def on_epoch(stats: EpochStats, _):
        epochs_table.insert(stats.row(config.train.record_wall_time))

    def on_checkpoint(trainer_state: TrainerState):
        path = _checkpoint_path(out, trainer_state.epoch)
        target = _text_storage(path)
        save_checkpoint(target, Checkpoint.create(trainer_state, config, rom))
        target.close()
        epochs_storage.flush()

    trainer = Trainer(config.train, factory, scenarios, state, on_epoch,
                      on_checkpoint)
    try:
        trainer.run()
    finally:
        epochs_storage.close()

    print('trained {} epochs; lambda = ({:.6g}, {:.6g})'.format(
        trainer.state.epoch, *trainer.state.lagrange.lambdas))

    return EXIT_OK


def _load_checkpoint(args) -> Checkpoint:
    storage = _text_storage(args.ckpt, 'r')
    checkpoint = load_checkpoint(storage)
    storage.close()
    if checkpoint.rom is None:
        raise ContractError('Checkpoint {} carries no model'.format(
            args.ckpt))
    return checkpoint


def cmd_evaluate(args, config: RunConfig) -> int:
    checkpoint = _load_checkpoint(args)
    run_config = checkpoint.config
    factory = _env_factory(run_config, checkpoint.rom)
    if args.plant:
        factory = factory.on_plant()

    scenarios = load_scenarios(args.scenarios)
    policy = checkpoint.state.policy
    if args.baseline == 'demand':
        policy = DemandFollowingPolicy(run_config.scenarios.action_min,
                                       run_config.scenarios.action_max)

    report, _ = evaluate_policy(policy, scenarios.split(args.split), factory,
                                deterministic=not args.stochastic,
                                seed=args.seed)
    write_table(args.out, REPORT_COLUMNS, report_rows(report),
                report_meta(report))

    print('r_bar {:.6g}  d {:.6g}  omega {:.6g}  p_hat {:.6g}  N {}'.format(
        report.r_bar, report.d, report.omega, report.p_hat, report.n))

    return EXIT_OK


def cmd_transfer(args, config: RunConfig) -> int:
    if not args.eta > 0:
        raise ContractError('eta must be > 0')

    checkpoint = _load_checkpoint(args)
    factory = _env_factory(checkpoint.config, checkpoint.rom).on_plant()
    scenario = read_scenario(args.scenario)

    episode = transfer_rollout(checkpoint.state.policy, factory(), scenario,
                               args.eta)
    write_table(args.out, EPISODE_COLUMNS, episode.rows(),
                {'seed': scenario.seed, 'eta': repr(args.eta)})

    steps = np.abs(np.diff(np.concatenate([[scenario.demand[0]],
                                           episode.actions])))
    print('transferred {} of {} steps; max action change {:.3e}'.format(
        episode.tau, scenario.T, float(steps.max()) if steps.size else 0.0))

    return EXIT_NUMERIC if episode.diverged else EXIT_OK


def cmd_tune_eta(args, config: RunConfig) -> int:
    checkpoint = _load_checkpoint(args)
    factory = _env_factory(checkpoint.config, checkpoint.rom)
    scenarios = load_scenarios(args.scenarios)

    try:
        grid = [float(v) for v in args.grid.split(',')]
    except ValueError:
        raise ContractError('Invalid eta grid {!r}'.format(args.grid))
    if not all(eta > 0 for eta in grid):
        raise ContractError('Every eta must be > 0')

    best, scores = select_eta(checkpoint.state.policy, factory,
                              scenarios.split(args.split), grid)
    if args.out:
        write_table(args.out, ('eta', 'score'),
                    [{'eta': eta, 'score': score} for eta, score in scores],
                    {'selected': repr(best)})

    print('selected eta {!r}'.format(best))

    return EXIT_OK


def cmd_plot(args, config: RunConfig) -> int:
    kind = plot_table(read_table(args.input), args.out, args.title)
    print('wrote {} chart to {}'.format(kind, args.out))

    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog='lambdappo',
                             description='Chance-constrained PPO for '
                                         'load-following control.')
    parser.add_argument('--version', action='version',
                        version='%(prog)s ' + __version__)
    parser.add_argument('-v', '--verbose', action='count', default=0,
                        help='more output (repeat for debug messages)')
    commands = parser.add_subparsers(dest='command', metavar='COMMAND',
                                     parser_class=_ArgumentParser)

    def command(name, func, help_text, config=True):
        sub = commands.add_parser(name, help=help_text)
        sub.set_defaults(func=func)
        if config:
            sub.add_argument('--config', help='configuration file')
        return sub

    sub = command('gen-scenarios', cmd_gen_scenarios,
                  'generate demand and constraint scenarios')
    sub.add_argument('--out', required=True)

    sub = command('simulate-plant', cmd_simulate_plant,
                  'simulate the plant on training demands')
    sub.add_argument('--scenarios', required=True)
    sub.add_argument('--out', required=True)

    sub = command('identify', cmd_identify,
                  'identify a reduced-order model from trajectories')
    sub.add_argument('--data', required=True)
    sub.add_argument('--out', help='model file (default: rom_path)')

    sub = command('train', cmd_train, 'train a policy on the model')
    sub.add_argument('--rom', help='model file (default: rom_path)')
    sub.add_argument('--scenarios', required=True)
    sub.add_argument('--out',
                     help='checkpoint directory (default: checkpoint_dir)')
    sub.add_argument('--fixed-lambda', metavar='L1,L2',
                     help='train with fixed multipliers')
    sub.add_argument('--resume', metavar='CKPT',
                     help='continue from a checkpoint')
    sub.add_argument('--force', action='store_true',
                     help='resume despite a configuration mismatch')

    sub = command('evaluate', cmd_evaluate, 'evaluate a policy',
                  config=False)
    sub.add_argument('--ckpt', required=True)
    sub.add_argument('--scenarios', required=True)
    sub.add_argument('--out', required=True)
    sub.add_argument('--split', choices=SPLITS, default='test')
    sub.add_argument('--baseline', choices=('demand',),
                     help='evaluate a baseline instead of the policy')
    sub.add_argument('--stochastic', action='store_true',
                     help='sample actions instead of using the mean')
    sub.add_argument('--seed', type=int, default=0)
    sub.add_argument('--plant', action='store_true',
                     help='evaluate on the reference plant')

    sub = command('transfer', cmd_transfer,
                  'deploy a policy on the reference plant', config=False)
    sub.add_argument('--ckpt', required=True)
    sub.add_argument('--scenario', required=True)
    sub.add_argument('--eta', type=float, default=5e-4)
    sub.add_argument('--out', required=True)

    sub = command('tune-eta', cmd_tune_eta,
                  'choose the action clipping bound', config=False)
    sub.add_argument('--ckpt', required=True)
    sub.add_argument('--scenarios', required=True)
    sub.add_argument('--grid', default='1e-4,2.5e-4,5e-4,1e-3,2.5e-3,inf')
    sub.add_argument('--split', choices=SPLITS, default='val')
    sub.add_argument('--out')

    sub = command('plot', cmd_plot, 'plot a CSV artifact as SVG',
                  config=False)
    sub.add_argument('--in', dest='input', required=True)
    sub.add_argument('--out', required=True)
    sub.add_argument('--title', default='')

    return parser


def _configure_logging(verbose: int, config: RunConfig) -> None:
    if verbose >= 2:
        level = logging.DEBUG
    elif verbose == 1:
        level = logging.INFO
    else:
        level = getattr(logging, config.log_level)

    logging.basicConfig(stream=sys.stderr, level=level,
                        format='%(levelname)s %(name)s: %(message)s')


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise ContractError('No command given (see --help)')

        config = parse_config(getattr(args, 'config', None))
        _configure_logging(args.verbose, config)

        return args.func(args, config)

    except (ContractError, OSError) as error:
        print('error: {}'.format(error), file=sys.stderr)
        return EXIT_CONTRACT
    except NumericError as error:
        print('numerical failure: {}'.format(error), file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == '__main__':
    sys.exit(main())
