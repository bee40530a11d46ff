"""
Synthetic reference plant: one-group point kinetics coupled to six lumped
thermal nodes, driven by three supervisory PI(D) loops.

Units are normalized throughout: power, flows and heat rates as fractions of
nominal, temperatures as ``(T - T_ref) / dT_ref``. Reactivity is absolute
(``dk/k``); ``rho / beta`` is in dollars. The precursor concentration is
scaled so that it equals the power at equilibrium.

Usage example:

>>> config = PlantConfig()
>>> state = trim(0.8, config)
>>> pids = initial_pids(state, config)
>>> state, pids = supervisory_step(state, 0.8, pids, config)
>>> round(state.power, 6)
0.8
"""

import logging
import math
from dataclasses import dataclass, fields, replace
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize

from .errors import ConfigError, ContractError, DomainError, \
    IntegrationError, TrimError
from .utils import LRUCache

__all__ = ('PlantConfig', 'PlantState', 'PidState', 'plant_derivs',
           'plant_step', 'trim', 'pid_step', 'initial_pids',
           'supervisory_step', 'simulate_setpoints', 'simulate_demand',
           'trajectory_rows', 'PlantRun',
           'STATE_FIELDS', 'ROM_FIELDS', 'TRAJECTORY_COLUMNS',
           'POWER_MIN', 'POWER_MAX')

logger = logging.getLogger(__name__)

#: Range of power fractions accepted as setpoints and trim targets
POWER_MIN = 0.4
POWER_MAX = 1.05

#: Integrated state variables, in vector order
STATE_FIELDS = ('power', 'precursor', 't_core_in', 't_core_out', 't_hx_s_in',
                't_hx_s_out', 'mdot_p', 'mdot_s', 'p_core_out', 'q_hx',
                'q_sg', 'rho_ext')

#: The state variables a reduced-order model describes
ROM_FIELDS = STATE_FIELDS[:-1]

#: Header of exported plant trajectories
TRAJECTORY_COLUMNS = ('time',) + STATE_FIELDS + ('setpoint',)

_TRIM_TOLERANCE = 1e-8


@dataclass(frozen=True)
class PlantConfig:
    """
    Physical constants, time constants and controller gains of the plant.

    The defaults describe a plant whose core temperatures are held at their
    nominal values by the flow loops while the secondary-side temperatures
    rise with power.
    """

    beta: float = 0.0065
    lambda_gen: float = 5e-4
    lambda_d: float = 0.08
    alpha_f: float = -0.003
    alpha_c: float = -0.003

    t_core_in_nom: float = 0.2
    t_core_out_nom: float = 0.6
    dt_secondary: float = 0.3
    t_steam: float = 0.0
    ua_hx: float = 5.0
    ua_sg: float = 5.0
    press_temp_coeff: float = 0.5
    press_flow_coeff: float = 0.1

    tau_core: float = 20.0
    tau_cold: float = 40.0
    tau_hx: float = 20.0
    tau_sec: float = 30.0
    tau_sg: float = 60.0
    tau_qsg: float = 20.0
    tau_press: float = 20.0

    dt_plant: float = 0.5
    max_substep: float = 0.1
    dt_record: float = 5.0

    pid1_kp: float = 0.00325
    pid1_ki: float = 6.5e-5
    pid1_kd: float = 0.0
    rho_max: float = 0.003
    pid2_kp: float = -2.0
    pid2_ki: float = -0.1
    pid2_kd: float = 0.0
    pid3_kp: float = -1.0
    pid3_ki: float = -0.02
    pid3_kd: float = 0.0
    mdot_min: float = 0.05
    mdot_max: float = 1.5

    @property
    def dt_core(self) -> float:
        """
        Nominal core temperature rise.
        """
        return self.t_core_out_nom - self.t_core_in_nom

    def validate(self) -> 'PlantConfig':
        positive = ['beta', 'lambda_gen', 'lambda_d', 'dt_plant',
                    'max_substep', 'dt_record', 'ua_hx', 'ua_sg',
                    'dt_secondary', 'rho_max']
        positive += [f.name for f in fields(self) if f.name.startswith('tau_')]

        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError('{} must be > 0, got {!r}'.format(
                    name, getattr(self, name)))

        if not self.dt_core > 0:
            raise ConfigError('t_core_out_nom must exceed t_core_in_nom')
        if not 0 < self.mdot_min < self.mdot_max <= 1.5:
            raise ConfigError('Flow bounds must satisfy '
                              '0 < mdot_min < mdot_max <= 1.5')
        if abs(self.dt_record / self.dt_plant
               - round(self.dt_record / self.dt_plant)) > 1e-9:
            raise ConfigError('dt_record must be a multiple of dt_plant')

        return self


@dataclass(frozen=True)
class PlantState:
    """
    Full state of the reference plant at one instant.
    """

    power: float
    precursor: float
    t_core_in: float
    t_core_out: float
    t_hx_s_in: float
    t_hx_s_out: float
    mdot_p: float
    mdot_s: float
    p_core_out: float
    q_hx: float
    q_sg: float
    rho_ext: float = 0.0
    time: float = 0.0

    def as_array(self) -> np.ndarray:
        """
        The integrated variables as a vector ordered like ``STATE_FIELDS``.
        """
        return np.array([getattr(self, name) for name in STATE_FIELDS])

    def rom_vector(self) -> np.ndarray:
        """
        The variables described by a reduced-order model.
        """
        return np.array([getattr(self, name) for name in ROM_FIELDS])

    @classmethod
    def from_array(cls, values: Sequence[float], time: float = 0.0) \
            -> 'PlantState':
        return cls(*(float(v) for v in values), time=float(time))

    def check(self) -> 'PlantState':
        """
        Raise :class:`DomainError` unless the state is finite and physical.
        """
        for name in STATE_FIELDS:
            if not math.isfinite(getattr(self, name)):
                raise DomainError('Non-finite plant state field '
                                  '{!r}'.format(name))
        if not self.power > 0:
            raise DomainError('Plant power must be > 0, got '
                              '{!r}'.format(self.power))

        return self


@dataclass(frozen=True)
class PidState:
    """
    Gains, saturation bounds and memory of one PID loop.
    """

    kp: float
    ki: float
    kd: float = 0.0
    integral: float = 0.0
    prev_error: float = 0.0
    out_min: float = -math.inf
    out_max: float = math.inf


def _rates(y: np.ndarray, config: PlantConfig) -> np.ndarray:
    (power, precursor, t_in, t_out, s_in, s_out,
     mdot_p, mdot_s, press, q_hx, q_sg, rho_ext) = y

    rho = (rho_ext
           + config.alpha_f * (t_out - config.t_core_out_nom)
           + config.alpha_c * (t_in - config.t_core_in_nom))
    gen = config.beta / config.lambda_gen

    primary_mean = 0.5 * (t_out + t_in)
    secondary_mean = 0.5 * (s_in + s_out)
    core_flow = mdot_p * (t_out - t_in)
    secondary_flow = mdot_s * (s_out - s_in)

    return np.array([
        (rho - config.beta) / config.lambda_gen * power + gen * precursor,
        config.lambda_d * (power - precursor),
        (core_flow - config.dt_core * q_hx) / config.tau_cold,
        (power * config.dt_core - core_flow) / config.tau_core,
        (secondary_flow - q_sg * config.dt_secondary) / config.tau_sg,
        (q_hx * config.dt_secondary - secondary_flow) / config.tau_sec,
        0.0,
        0.0,
        (1.0 + config.press_temp_coeff * (t_out - config.t_core_out_nom)
         + config.press_flow_coeff * (mdot_p ** 2 - 1.0) - press)
        / config.tau_press,
        (config.ua_hx * mdot_s * (primary_mean - secondary_mean) - q_hx)
        / config.tau_hx,
        (config.ua_sg * (secondary_mean - config.t_steam) - q_sg)
        / config.tau_qsg,
        0.0,
    ])


def plant_derivs(state: PlantState, config: PlantConfig) -> PlantState:
    """
    Time derivatives of every plant variable.

    Actuator variables (flows and external reactivity) are set by the
    supervisory loops and have zero derivative; the ``time`` field of the
    result is 1.

    :raises DomainError: if the state is not finite
    """
    y = state.as_array()
    if not np.all(np.isfinite(y)):
        bad = STATE_FIELDS[int(np.argmin(np.isfinite(y)))]
        raise DomainError('Non-finite plant state field {!r}'.format(bad))

    return PlantState.from_array(_rates(y, config), time=1.0)


def plant_step(state: PlantState, config: PlantConfig, dt: float) \
        -> PlantState:
    """
    Advance the plant by ``dt`` seconds with classical Runge-Kutta.

    The interval is split into equal sub-steps no longer than
    ``config.max_substep`` as the prompt-neutron mode is stiff.

    :raises ContractError: unless ``0 < dt <= 8 * dt_plant``
    :raises IntegrationError: if the step produces non-finite values
    """
    if not 0 < dt <= 8 * config.dt_plant:
        raise ContractError('Plant step must satisfy 0 < dt <= {}, got '
                            '{!r}'.format(8 * config.dt_plant, dt))

    y = state.as_array()
    if not np.all(np.isfinite(y)):
        bad = STATE_FIELDS[int(np.argmin(np.isfinite(y)))]
        raise DomainError('Non-finite plant state field {!r}'.format(bad))

    n_sub = max(1, int(math.ceil(dt / config.max_substep - 1e-9)))
    h = dt / n_sub

    with np.errstate(over='ignore', invalid='ignore'):
        for _ in range(n_sub):
            k1 = _rates(y, config)
            k2 = _rates(y + 0.5 * h * k1, config)
            k3 = _rates(y + 0.5 * h * k2, config)
            k4 = _rates(y + h * k3, config)
            y = y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    finite = np.isfinite(y)
    if not np.all(finite):
        bad = STATE_FIELDS[int(np.argmin(finite))]
        raise IntegrationError('Plant step produced a non-finite '
                               '{!r}'.format(bad), field=bad)

    return PlantState.from_array(y, time=state.time + dt)


_trim_cache: LRUCache = LRUCache(capacity=256)


def trim(power_fraction: float, config: PlantConfig) -> PlantState:
    """
    Steady state of the plant at the requested power.

    The analytic equilibrium is polished with a Newton-type solver on the
    unknowns that are not fixed by the operating point. Results are cached,
    so calling ``trim`` again with the same arguments is free.

    :raises ContractError: if the power is outside ``[0.4, 1.05]``
    :raises TrimError: if no equilibrium with residual below 1e-8 is found
    """
    p = float(power_fraction)
    if not POWER_MIN <= p <= POWER_MAX:
        raise ContractError('Trim power must lie in [{}, {}], got '
                            '{!r}'.format(POWER_MIN, POWER_MAX, p))

    key = (p, config)
    cached = _trim_cache.get(key)
    if cached is not None:
        return cached

    state = _solve_trim(p, config)
    _trim_cache[key] = state

    return state


def _solve_trim(p: float, config: PlantConfig) -> PlantState:
    primary_mean = 0.5 * (config.t_core_in_nom + config.t_core_out_nom)
    secondary_mean = config.t_steam + p / config.ua_sg
    drive = primary_mean - secondary_mean
    if not drive > 0:
        raise TrimError('No heat-exchanger temperature drive at power '
                        '{!r}'.format(p))

    mdot_s = p / (config.ua_hx * drive)
    rise = p * config.dt_secondary / mdot_s
    press = 1.0 + config.press_flow_coeff * (p ** 2 - 1.0)

    guess = np.array([p, p, config.t_core_in_nom, config.t_core_out_nom,
                      secondary_mean - 0.5 * rise,
                      secondary_mean + 0.5 * rise,
                      p, mdot_s, press, p, p, 0.0])

    # Power and primary flow fix the operating point; the rest is solved for
    free = [1, 2, 3, 4, 5, 7, 8, 9, 10]
    balance = [0, 1, 2, 3, 4, 5, 8, 9, 10]

    def residual(x):
        y = guess.copy()
        y[free] = x
        return _rates(y, config)[balance]

    solution = optimize.root(residual, guess[free], method='hybr',
                             options={'xtol': 1e-14})
    y = guess.copy()
    y[free] = solution.x

    norm = float(np.max(np.abs(_rates(y, config))))
    if not norm < _TRIM_TOLERANCE:
        raise TrimError('Trim at power {!r} did not converge'.format(p),
                        residual=norm)

    logger.debug('trim(%r): residual %.3g', p, norm)

    return PlantState.from_array(y)


def pid_step(pid: PidState, setpoint: float, measurement: float, dt: float) \
        -> Tuple[float, PidState]:
    """
    One update of a PID loop with conditional-integration anti-windup.

    The integral does not accumulate while the unclamped output is saturated
    and the error would push it further out; ``ki * integral`` is always kept
    within the output bounds.
    """
    if not dt > 0:
        raise ContractError('PID step requires dt > 0, got {!r}'.format(dt))

    error = setpoint - measurement
    derivative = pid.kd * (error - pid.prev_error) / dt

    integral = pid.integral + error * dt
    raw = pid.kp * error + pid.ki * integral + derivative

    if (raw > pid.out_max and pid.ki * error >= 0) or \
            (raw < pid.out_min and pid.ki * error <= 0):
        integral = pid.integral

    if pid.ki != 0:
        integral = min(max(pid.ki * integral, pid.out_min),
                       pid.out_max) / pid.ki

    output = pid.kp * error + pid.ki * integral + derivative
    output = min(max(output, pid.out_min), pid.out_max)

    return output, replace(pid, integral=integral, prev_error=error)


def initial_pids(state: PlantState, config: PlantConfig) \
        -> Tuple[PidState, PidState, PidState]:
    """
    Bumpless initial controllers for a plant sitting at ``state``.

    Each integral is preloaded so the controller output equals the current
    actuator value.
    """

    def make(kp, ki, kd, current, lo, hi):
        integral = current / ki if ki else 0.0
        return PidState(kp=kp, ki=ki, kd=kd, integral=integral,
                        out_min=lo, out_max=hi)

    return (
        make(config.pid1_kp, config.pid1_ki, config.pid1_kd, state.rho_ext,
             -config.rho_max, config.rho_max),
        make(config.pid2_kp, config.pid2_ki, config.pid2_kd, state.mdot_p,
             config.mdot_min, config.mdot_max),
        make(config.pid3_kp, config.pid3_ki, config.pid3_kd, state.mdot_s,
             config.mdot_min, config.mdot_max),
    )


def supervisory_step(
        state: PlantState,
        power_setpoint: float,
        pids: Sequence[PidState],
        config: PlantConfig,
        dt: Optional[float] = None
) -> Tuple[PlantState, Tuple[PidState, PidState, PidState]]:
    """
    Run the three control loops once and advance the plant.

    Loop 1 drives external reactivity from the power error, loops 2 and 3
    hold the core outlet and inlet temperatures at their nominal values with
    the primary and secondary flows.
    """
    if not POWER_MIN <= power_setpoint <= POWER_MAX:
        raise ContractError('Power setpoint must lie in [{}, {}], got '
                            '{!r}'.format(POWER_MIN, POWER_MAX,
                                          power_setpoint))
    if dt is None:
        dt = config.dt_plant

    pid1, pid2, pid3 = pids
    rho_ext, pid1 = pid_step(pid1, power_setpoint, state.power, dt)
    mdot_p, pid2 = pid_step(pid2, config.t_core_out_nom, state.t_core_out,
                            dt)
    mdot_s, pid3 = pid_step(pid3, config.t_core_in_nom, state.t_core_in, dt)

    actuated = replace(state, rho_ext=rho_ext, mdot_p=mdot_p, mdot_s=mdot_s)

    return plant_step(actuated, config, dt), (pid1, pid2, pid3)


class PlantRun(NamedTuple):
    """
    Recorded plant states and the setpoint in force at each record.
    """
    states: List[PlantState]
    setpoints: List[float]


def simulate_setpoints(
        setpoints: Iterable[float],
        config: PlantConfig,
        hold: float,
        initial: Optional[PlantState] = None
) -> PlantRun:
    """
    Track a sequence of power setpoints, each held for ``hold`` seconds.

    The plant starts at ``trim(first setpoint)`` unless ``initial`` is given
    and is recorded every ``config.dt_record`` seconds, including the initial
    state. The setpoint recorded with a state is the one applied from that
    instant on; the final record repeats the last setpoint.
    """
    setpoints = [float(s) for s in setpoints]
    if not setpoints:
        raise ContractError('At least one setpoint is required')

    steps_per_record = int(round(config.dt_record / config.dt_plant))
    records_per_hold = int(round(hold / config.dt_record))
    if records_per_hold < 1 or \
            abs(records_per_hold * config.dt_record - hold) > 1e-9:
        raise ContractError('Hold time {!r} must be a positive multiple of '
                            'dt_record'.format(hold))

    state = initial if initial is not None else trim(setpoints[0], config)
    pids = initial_pids(state, config)

    states = [state]
    recorded = []
    for setpoint in setpoints:
        for _ in range(records_per_hold):
            recorded.append(setpoint)
            for _ in range(steps_per_record):
                state, pids = supervisory_step(state, setpoint, pids, config)
            # Avoid drift of the clock from repeated float additions
            state = replace(state, time=round(state.time, 9))
            states.append(state)
    recorded.append(setpoints[-1])

    return PlantRun(states, recorded)


def trajectory_rows(run: PlantRun) -> List[dict]:
    """
    Convert a recorded run into rows of the trajectory export table.
    """
    rows = []
    for state, setpoint in zip(run.states, run.setpoints):
        row = {'time': state.time}
        row.update({name: getattr(state, name) for name in STATE_FIELDS})
        row['setpoint'] = setpoint
        rows.append(row)

    return rows


def simulate_demand(
        demand: Sequence[float],
        config: PlantConfig,
        hold: float,
        dither: float = 0.0,
        rng: Optional[np.random.Generator] = None
) -> PlantRun:
    """
    Track a demand curve given per control interval of ``hold`` seconds.

    With ``dither > 0`` each setpoint is perturbed by a uniform offset in
    ``[-dither, dither]`` so that the recorded setpoints differ from the
    demand; setpoints are clipped to the admissible power range.
    """
    setpoints = np.asarray(demand, dtype=float)
    if dither > 0:
        if rng is None:
            raise ContractError('A random generator is required for dither')
        setpoints = setpoints + rng.uniform(-dither, dither,
                                            size=setpoints.shape)
    setpoints = np.clip(setpoints, POWER_MIN, POWER_MAX)

    return simulate_setpoints(setpoints.tolist(), config, hold)
