"""
Sparse identification of a discrete-time reduced-order model from plant
trajectories.

A model maps a library of features of the current state and control,
``[1, x, x_i * x_j (degree 2), a]``, linearly to the next state. The sparse
coefficient matrix is found by sequentially thresholded least squares on
RMS-scaled features.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union, \
    Mapping, Iterable

import numpy as np

from .errors import CheckpointError, ContractError, DivergenceError, \
    DomainError, ConfigError
from .plant import ROM_FIELDS, PlantRun
from .storages import Storage

__all__ = ('SysIdConfig', 'FeatureLibrary', 'Trajectory', 'SysIdDataset',
           'SparseFit', 'RomModel', 'FitReport', 'subsample',
           'build_dataset', 'build_library', 'stlsq', 'identify_rom',
           'rom_step', 'save_rom', 'load_rom')

logger = logging.getLogger(__name__)

ROM_FORMAT_VERSION = 1


@dataclass(frozen=True)
class SysIdConfig:
    """
    Settings of the identification pipeline and its training data.
    """

    subsample_factor: int = 5
    degree: int = 1
    threshold: float = 0.02
    stlsq_iters: int = 10
    holdout_fraction: float = 0.1
    n_trajectories: int = 20
    sysid_dither: float = 0.03
    sysid_seed: int = 11

    def validate(self) -> 'SysIdConfig':
        if self.subsample_factor < 1:
            raise ConfigError('subsample_factor must be >= 1')
        if self.degree not in (1, 2):
            raise ConfigError('degree must be 1 or 2, got '
                              '{!r}'.format(self.degree))
        if self.threshold < 0:
            raise ConfigError('threshold must be >= 0')
        if self.stlsq_iters < 1:
            raise ConfigError('stlsq_iters must be >= 1')
        if not 0 <= self.holdout_fraction < 1:
            raise ConfigError('holdout_fraction must lie in [0, 1)')
        if self.n_trajectories < 2:
            raise ConfigError('n_trajectories must be >= 2')
        if self.sysid_dither < 0:
            raise ConfigError('sysid_dither must be >= 0')

        return self


@dataclass(frozen=True)
class FeatureLibrary:
    """
    Polynomial feature library over states and controls.

    Column 0 is the constant feature, followed by the states, the upper
    triangle of pairwise state products when ``degree == 2`` and finally the
    controls when ``include_control`` is set.
    """

    state_names: Tuple[str, ...] = ROM_FIELDS
    control_names: Tuple[str, ...] = ('a',)
    degree: int = 1
    include_control: bool = True

    def __post_init__(self):
        if self.degree not in (1, 2):
            raise ContractError('Library degree must be 1 or 2, got '
                                '{!r}'.format(self.degree))

    @property
    def n_states(self) -> int:
        return len(self.state_names)

    @property
    def n_controls(self) -> int:
        return len(self.control_names) if self.include_control else 0

    @property
    def column_names(self) -> List[str]:
        names = ['1'] + list(self.state_names)
        if self.degree == 2:
            names += ['{}*{}'.format(self.state_names[i], self.state_names[j])
                      for i, j in zip(*np.triu_indices(self.n_states))]
        if self.include_control:
            names += list(self.control_names)

        return names

    @property
    def n_features(self) -> int:
        return len(self.column_names)

    def features(self, x: np.ndarray, a: np.ndarray) -> np.ndarray:
        """
        Feature rows for stacked states ``x`` (n, d_x) and controls ``a``
        (n, d_u).
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        a = np.asarray(a, dtype=float).reshape(x.shape[0], -1)

        blocks = [np.ones((x.shape[0], 1)), x]
        if self.degree == 2:
            i, j = np.triu_indices(self.n_states)
            blocks.append(x[:, i] * x[:, j])
        if self.include_control:
            blocks.append(a)

        return np.hstack(blocks)


class Trajectory(NamedTuple):
    """
    A recorded plant run: times, ROM state rows and control rows.
    """
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.times.shape[0]

    @classmethod
    def from_run(cls, run: PlantRun,
                 state_names: Sequence[str] = ROM_FIELDS) -> 'Trajectory':
        return cls(
            np.array([s.time for s in run.states]),
            np.array([[getattr(s, n) for n in state_names]
                      for s in run.states]),
            np.array(run.setpoints, dtype=float).reshape(-1, 1),
        )

    @classmethod
    def from_rows(cls, rows: Iterable[Mapping],
                  state_names: Sequence[str] = ROM_FIELDS) -> 'Trajectory':
        rows = list(rows)
        return cls(
            np.array([row['time'] for row in rows], dtype=float),
            np.array([[row[n] for n in state_names] for row in rows],
                     dtype=float).reshape(len(rows), len(state_names)),
            np.array([row['setpoint'] for row in rows],
                     dtype=float).reshape(-1, 1),
        )


class SysIdDataset(NamedTuple):
    """
    Aligned one-step pairs; no pair straddles two trajectories.

    ``boundaries`` holds the first row index of every trajectory.
    """
    snapshots: np.ndarray
    targets: np.ndarray
    controls: np.ndarray
    boundaries: Tuple[int, ...] = (0,)


def subsample(trajectory: Union[Trajectory, np.ndarray], factor: int):
    """
    Keep rows ``0, factor, 2 * factor, ...`` of a trajectory.
    """
    if factor < 1:
        raise ContractError('Sub-sampling factor must be >= 1, got '
                            '{!r}'.format(factor))
    rows = trajectory.n_rows if isinstance(trajectory, Trajectory) \
        else len(trajectory)
    if rows == 0:
        raise ContractError('Cannot sub-sample an empty trajectory')

    if isinstance(trajectory, Trajectory):
        return Trajectory(*(part[::factor] for part in trajectory))

    return np.asarray(trajectory)[::factor]


def build_dataset(trajectories: Sequence[Trajectory]) -> SysIdDataset:
    """
    Stack consecutive state pairs of every trajectory.
    """
    snapshots, targets, controls, boundaries = [], [], [], []
    start = 0
    for trajectory in trajectories:
        if trajectory.n_rows < 2:
            continue
        boundaries.append(start)
        snapshots.append(trajectory.states[:-1])
        targets.append(trajectory.states[1:])
        controls.append(trajectory.controls[:-1])
        start += trajectory.n_rows - 1

    if not snapshots:
        raise ContractError('No trajectory has two or more rows')

    return SysIdDataset(np.vstack(snapshots), np.vstack(targets),
                        np.vstack(controls), tuple(boundaries))


def build_library(dataset: SysIdDataset, library: FeatureLibrary) \
        -> np.ndarray:
    """
    Evaluate the feature library on every snapshot of a dataset.

    :raises ContractError: for an empty dataset
    :raises DomainError: for non-finite features, naming row and column
    """
    snapshots = np.atleast_2d(np.asarray(dataset.snapshots, dtype=float))
    if snapshots.size == 0 or snapshots.shape[0] == 0:
        raise ContractError('Cannot build a library for an empty dataset')
    if snapshots.shape[1] != library.n_states:
        raise ContractError('Dataset has {} states, library expects '
                            '{}'.format(snapshots.shape[1], library.n_states))

    theta = library.features(snapshots, dataset.controls)

    finite = np.isfinite(theta)
    if not finite.all():
        row, col = np.argwhere(~finite)[0]
        raise DomainError('Non-finite feature at row {} column {!r}'.format(
            row, library.column_names[col]))

    return theta


class SparseFit(NamedTuple):
    coeffs: np.ndarray
    iterations: int
    rank_deficient: bool


def stlsq(theta: np.ndarray, targets: np.ndarray, threshold: float,
          max_iters: int = 10) -> SparseFit:
    """
    Sequentially thresholded least squares.

    Coefficients below ``threshold`` in magnitude are zeroed and the
    remaining support is re-fitted until it stops changing. The support
    never grows. Rank-deficient supports are solved in the minimum-norm
    sense and flagged.
    """
    theta = np.asarray(theta, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if targets.ndim == 1:
        targets = targets[:, None]

    if theta.shape[0] < theta.shape[1]:
        raise ContractError('Need at least as many rows as features, got {} '
                            'x {}'.format(*theta.shape))
    if threshold < 0:
        raise ContractError('Threshold must be >= 0')
    if max_iters < 1:
        raise ContractError('max_iters must be >= 1')

    coeffs, _, rank, _ = np.linalg.lstsq(theta, targets, rcond=None)
    rank_deficient = rank < theta.shape[1]

    support = np.abs(coeffs) >= threshold
    coeffs[~support] = 0.0

    iterations = 0
    for iterations in range(1, max_iters + 1):
        for j in range(targets.shape[1]):
            cols = support[:, j]
            coeffs[:, j] = 0.0
            if not cols.any():
                continue
            solution, _, rank, _ = np.linalg.lstsq(theta[:, cols],
                                                   targets[:, j], rcond=None)
            coeffs[cols, j] = solution
            if rank < cols.sum():
                rank_deficient = True

        shrunk = support & (np.abs(coeffs) >= threshold)
        coeffs[~shrunk] = 0.0

        if np.array_equal(shrunk, support):
            break
        support = shrunk

    if rank_deficient:
        logger.warning('STLSQ support is rank deficient; using the '
                       'minimum-norm solution')

    return SparseFit(coeffs, iterations, bool(rank_deficient))


@dataclass(frozen=True, eq=False)
class RomModel:
    """
    Identified model ``x[t+1] = features(x[t], a[t]) @ coeffs``.

    The regression works on features divided by ``scales`` (their RMS over
    the training data); ``scaled_coeffs`` are the coefficients in that
    space and satisfy the sparsity threshold.
    """

    scaled_coeffs: np.ndarray
    library: FeatureLibrary
    dt_rom: float
    scales: np.ndarray
    threshold: float = 0.0

    @classmethod
    def from_coeffs(cls, coeffs, library: FeatureLibrary, dt_rom: float,
                    threshold: float = 0.0) -> 'RomModel':
        """
        Wrap an unscaled coefficient matrix.
        """
        coeffs = np.asarray(coeffs, dtype=float).reshape(
            library.n_features, library.n_states)
        return cls(coeffs, library, float(dt_rom),
                   np.ones(library.n_features), threshold)

    @cached_property
    def coeffs(self) -> np.ndarray:
        return self.scaled_coeffs / self.scales[:, None]

    @property
    def state_names(self) -> Tuple[str, ...]:
        return self.library.state_names

    @property
    def n_states(self) -> int:
        return self.library.n_states


def rom_step(rom: RomModel, x, a) -> np.ndarray:
    """
    Advance a state one model step under control ``a``.

    :raises ContractError: for a state of the wrong dimension
    :raises DivergenceError: if the result is not finite
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (rom.n_states,):
        raise ContractError('ROM state must have shape ({},), got '
                            '{}'.format(rom.n_states, x.shape))

    with np.errstate(over='ignore', invalid='ignore'):
        x_next = rom.library.features(x, np.atleast_1d(a))[0] @ rom.coeffs

    if not np.all(np.isfinite(x_next)):
        raise DivergenceError('ROM produced a non-finite state')

    return x_next


@dataclass
class FitReport:
    """
    Quality of an identified model on held-out trajectories.
    """

    state_names: Tuple[str, ...]
    r2: np.ndarray
    rollout_rmse: np.ndarray
    iterations: int
    rank_deficient: bool
    n_train: int
    n_holdout: int
    flags: List[str] = field(default_factory=list)

    def lines(self) -> List[str]:
        """
        Human readable summary, one line per state.
        """
        out = ['trajectories: {} train, {} holdout; STLSQ iterations: '
               '{}'.format(self.n_train, self.n_holdout, self.iterations)]
        for name, r2, rmse in zip(self.state_names, self.r2,
                                  self.rollout_rmse):
            out.append('{:<12} R2 {:.6f}  rollout RMSE {:.3e}'.format(
                name, r2, rmse))
        out.extend('warning: {}'.format(flag) for flag in self.flags)

        return out


def identify_rom(
        trajectories: Sequence[Trajectory],
        library: Optional[FeatureLibrary] = None,
        threshold: float = 0.02,
        holdout_fraction: float = 0.1,
        factor: int = 5,
        max_iters: int = 10
) -> Tuple[RomModel, FitReport]:
    """
    Identify a reduced-order model from plant trajectories.

    Trajectories are sub-sampled by ``factor``; the last
    ``holdout_fraction`` of them (at least one when the fraction is
    positive) are held out for the fit report.
    """
    if len(trajectories) < 2:
        raise ContractError('Identification needs at least 2 trajectories, '
                            'got {}'.format(len(trajectories)))
    if library is None:
        library = FeatureLibrary()

    trajectories = [subsample(t, factor) for t in trajectories]

    n_holdout = 0
    if holdout_fraction > 0:
        n_holdout = min(len(trajectories) - 1,
                        max(1, int(math.ceil(holdout_fraction
                                             * len(trajectories) - 1e-9))))
    train = trajectories[:len(trajectories) - n_holdout]
    holdout = trajectories[len(trajectories) - n_holdout:]

    dataset = build_dataset(train)
    theta = build_library(dataset, library)

    scales = np.sqrt(np.mean(theta ** 2, axis=0))
    scales[scales == 0] = 1.0

    fit = stlsq(theta / scales, dataset.targets, threshold, max_iters)

    times = trajectories[0].times
    dt_rom = float(times[1] - times[0]) if len(times) > 1 else 0.0
    rom = RomModel(fit.coeffs, library, dt_rom, scales, threshold)

    report = _fit_report(rom, holdout if holdout else train, fit,
                         len(train), len(holdout))
    if not holdout:
        report.flags.append('no holdout trajectories; report uses training '
                            'data')

    for flag in report.flags:
        logger.warning(flag)

    return rom, report


def _fit_report(rom: RomModel, trajectories: Sequence[Trajectory],
                fit: SparseFit, n_train: int, n_holdout: int) -> FitReport:
    dataset = build_dataset(trajectories)
    predicted = build_library(dataset, rom.library) @ rom.coeffs

    residual = np.sum((dataset.targets - predicted) ** 2, axis=0)
    spread = np.sum((dataset.targets - dataset.targets.mean(axis=0)) ** 2,
                    axis=0)
    with np.errstate(divide='ignore', invalid='ignore'):
        r2 = np.where(spread > 0, 1.0 - residual / spread,
                      np.where(residual <= 1e-24, 1.0, 0.0))

    errors = []
    diverged = False
    for trajectory in trajectories:
        x = trajectory.states[0]
        for t in range(1, trajectory.n_rows):
            try:
                x = rom_step(rom, x, trajectory.controls[t - 1])
            except DivergenceError:
                diverged = True
                break
            errors.append((x - trajectory.states[t]) ** 2)

    if diverged:
        rmse = np.full(rom.n_states, np.inf)
    else:
        rmse = np.sqrt(np.mean(errors, axis=0))

    report = FitReport(rom.state_names, r2, rmse, fit.iterations,
                       fit.rank_deficient, n_train, n_holdout)

    negative = [name for name, value in zip(rom.state_names, r2) if value < 0]
    if negative:
        report.flags.append('negative holdout R2 for {}'.format(
            ', '.join(negative)))
    if fit.rank_deficient:
        report.flags.append('rank-deficient support')
    if diverged:
        report.flags.append('multi-step rollout diverged')

    return report


def rom_document(rom: RomModel) -> dict:
    """
    The structured text document describing a model.
    """
    return {
        'kind': 'rom',
        'version': ROM_FORMAT_VERSION,
        'scalars': {
            'degree': rom.library.degree,
            'include_control': int(rom.library.include_control),
            'dt_rom': float(rom.dt_rom),
            'threshold': float(rom.threshold),
            'state_names': ','.join(rom.library.state_names),
            'control_names': ','.join(rom.library.control_names),
        },
        'tensors': {
            'scales': rom.scales,
            'coeffs': rom.scaled_coeffs,
        },
    }


def rom_from_document(document: dict) -> RomModel:
    """
    Rebuild a model from its structured text document.
    """
    if document.get('kind') != 'rom':
        raise CheckpointError('Not a model file (kind {!r})'.format(
            document.get('kind')))
    if document.get('version') != ROM_FORMAT_VERSION:
        raise CheckpointError('Unsupported model format version {!r}'.format(
            document.get('version')))

    try:
        scalars = document['scalars']
        library = FeatureLibrary(
            state_names=tuple(scalars['state_names'].split(',')),
            control_names=tuple(scalars['control_names'].split(',')),
            degree=int(scalars['degree']),
            include_control=bool(scalars['include_control']),
        )
        scales = np.asarray(document['tensors']['scales'], dtype=float)
        coeffs = np.asarray(document['tensors']['coeffs'], dtype=float)
    except KeyError as error:
        raise CheckpointError('Model file lacks entry {}'.format(error))

    if scales.shape != (library.n_features,):
        raise CheckpointError('Shape mismatch in tensor \'scales\'')
    if coeffs.shape != (library.n_features, library.n_states):
        raise CheckpointError('Shape mismatch in tensor \'coeffs\'')

    return RomModel(coeffs, library, float(scalars['dt_rom']), scales,
                    float(scalars['threshold']))


def save_rom(storage: Storage, rom: RomModel) -> None:
    storage.write(rom_document(rom))


def load_rom(storage: Storage) -> RomModel:
    document = storage.read()
    if document is None:
        raise CheckpointError('Model file is empty')

    return rom_from_document(document)
