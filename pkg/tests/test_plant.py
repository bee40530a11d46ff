import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lambdappo.errors import ConfigError, ContractError, DomainError, \
    IntegrationError
from lambdappo.plant import PidState, PlantConfig, PlantState, \
    ROM_FIELDS, STATE_FIELDS, TRAJECTORY_COLUMNS, initial_pids, \
    pid_step, plant_derivs, plant_step, simulate_demand, \
    simulate_setpoints, supervisory_step, trajectory_rows, trim


def residual(state, config):
    rates = plant_derivs(state, config).as_array()
    return float(np.max(np.abs(rates)))


@pytest.mark.parametrize('power', [0.5, 0.75, 1.0])
def test_trim_residual(plant_config, power):
    state = trim(power, plant_config)

    assert residual(state, plant_config) < 1e-8
    assert state.power == power


@given(st.floats(min_value=0.4, max_value=1.05))
def test_trim_residual_over_power_range(power):
    config = PlantConfig()

    assert residual(trim(power, config), config) < 1e-8


@pytest.mark.parametrize('power', [0.5, 0.8, 1.0])
def test_trim_operating_point(plant_config, power):
    state = trim(power, plant_config)

    assert state.precursor == pytest.approx(power, abs=1e-10)
    assert state.t_core_in == pytest.approx(0.2, abs=1e-10)
    assert state.t_core_out == pytest.approx(0.6, abs=1e-10)
    assert state.mdot_p == pytest.approx(power, abs=1e-12)
    assert state.mdot_s == pytest.approx(power / (2 - power), abs=1e-10)
    assert state.t_hx_s_in == pytest.approx(0.35 * power - 0.3, abs=1e-10)
    assert state.t_hx_s_out == pytest.approx(0.3 + 0.05 * power, abs=1e-10)
    assert state.p_core_out == pytest.approx(1 + 0.1 * (power ** 2 - 1),
                                             abs=1e-10)
    assert state.q_hx == pytest.approx(power, abs=1e-10)
    assert state.q_sg == pytest.approx(power, abs=1e-10)
    assert state.rho_ext == 0.0


def test_secondary_temperatures_rise_with_power(plant_config):
    powers = 0.5 + 0.5 * np.arange(0.0, 1.0001, 0.05)
    states = [trim(float(p), plant_config) for p in powers]
    outlet = np.array([s.t_hx_s_out for s in states])
    inlet = np.array([s.t_hx_s_in for s in states])

    assert powers[-1] == pytest.approx(1.0)
    assert np.all(np.diff(outlet) > 0)
    assert np.all(np.diff(inlet) > 0)
    assert trim(0.5, plant_config).t_hx_s_out < \
        trim(1.0, plant_config).t_hx_s_out


def test_trim_is_cached(plant_config):
    assert trim(0.65, plant_config) is trim(0.65, plant_config)


@pytest.mark.parametrize('power', [0.3, 1.1, float('nan')])
def test_trim_out_of_range(plant_config, power):
    with pytest.raises(ContractError):
        trim(power, plant_config)


def test_trim_depends_on_config():
    hot = PlantConfig(t_core_out_nom=0.7)

    assert trim(1.0, hot).t_core_out == pytest.approx(0.7, abs=1e-10)


def test_plant_step_holds_trim(plant_config):
    state = trim(0.9, plant_config)

    for _ in range(20):
        state = plant_step(state, plant_config, plant_config.dt_plant)

    np.testing.assert_allclose(state.as_array(),
                               trim(0.9, plant_config).as_array(),
                               atol=1e-8)
    assert state.time == pytest.approx(10.0)


@pytest.mark.parametrize('dt', [0.0, -0.5, 4.5])
def test_plant_step_invalid_dt(plant_config, dt):
    with pytest.raises(ContractError):
        plant_step(trim(1.0, plant_config), plant_config, dt)


def test_plant_step_non_finite_input(plant_config):
    state = PlantState.from_array([math.nan] + [0.0] * 11)

    with pytest.raises(DomainError, match='power'):
        plant_step(state, plant_config, 0.5)

    with pytest.raises(DomainError):
        plant_derivs(state, plant_config)


def test_plant_step_blow_up(plant_config):
    state = PlantState.from_array(
        [1.0, 1.0, 0.2, 0.6, 0.05, 0.35, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0])

    with pytest.raises(IntegrationError) as info:
        plant_step(state, plant_config, 4.0)

    assert info.value.field == 'power'


def test_positive_reactivity_raises_power(plant_config):
    state = PlantState.from_array(
        trim(0.8, plant_config).as_array()[:-1].tolist() + [0.0005])

    after = plant_step(state, plant_config, 2.0)

    assert after.power > 0.8


def test_rk4_error_shrinks_with_substep():
    start = replace(trim(0.8, PlantConfig()), rho_ext=0.0005)

    def power_after(substep):
        config = PlantConfig(max_substep=substep)
        return plant_step(start, config, 0.5).power

    reference = power_after(0.00625)
    coarse = abs(power_after(0.05) - reference)
    fine = abs(power_after(0.025) - reference)

    assert abs(power_after(0.1) - reference) < 5e-4
    assert fine > 0
    assert 12.0 < coarse / fine < 30.0


@pytest.mark.parametrize('factor', [0.99, 1.01])
def test_power_perturbation_decays_under_feedback(plant_config, factor):
    nominal = trim(1.0, plant_config)
    start = replace(nominal, power=factor * nominal.power)

    run = simulate_setpoints([1.0], plant_config, hold=2000.0,
                             initial=start)
    deviations = [abs(s.power - 1.0) for s in run.states]

    assert deviations[0] == pytest.approx(0.01)
    assert max(deviations[-100:]) < 1e-3
    assert deviations[-1] < 1e-4
    assert abs(run.states[-1].t_core_out
               - plant_config.t_core_out_nom) < 1e-3


def test_reduced_primary_flow_heats_core_outlet(plant_config):
    nominal = trim(1.0, plant_config)

    slow = plant_derivs(replace(nominal, mdot_p=0.9), plant_config)
    fast = plant_derivs(replace(nominal, mdot_p=1.1), plant_config)

    assert slow.t_core_out > 0
    assert slow.t_core_out == pytest.approx(0.1 * 0.4 / 20.0)
    assert fast.t_core_out < 0


def test_plant_state_vectors(plant_config):
    state = trim(1.0, plant_config)

    assert state.as_array().shape == (len(STATE_FIELDS),)
    assert state.rom_vector().shape == (len(ROM_FIELDS),)
    assert PlantState.from_array(state.as_array()) == state
    assert state.check() is state


def test_plant_state_check():
    with pytest.raises(DomainError):
        PlantState.from_array([0.0] * 12).check()


def test_pid_proportional():
    pid = PidState(kp=2.0, ki=0.0)

    output, pid = pid_step(pid, 1.0, 0.75, 0.5)

    assert output == 0.5
    assert pid.prev_error == 0.25


def test_pid_integral():
    pid = PidState(kp=0.0, ki=0.5)

    output, pid = pid_step(pid, 1.0, 0.0, 2.0)
    assert output == 1.0

    output, pid = pid_step(pid, 1.0, 0.0, 2.0)
    assert output == 2.0
    assert pid.integral == 4.0


def test_pid_anti_windup():
    pid = PidState(kp=1.0, ki=1.0, out_min=0.0, out_max=1.0)

    for _ in range(5):
        output, pid = pid_step(pid, 10.0, 0.0, 1.0)
        assert output == 1.0
        assert pid.integral == 0.0

    # Recovers immediately once the error changes sign
    output, pid = pid_step(pid, 0.0, 0.5, 1.0)
    assert output == 0.0


def test_pid_invalid_dt():
    with pytest.raises(ContractError):
        pid_step(PidState(kp=1.0, ki=1.0), 1.0, 0.0, 0.0)


@given(st.floats(min_value=-5, max_value=5),
       st.floats(min_value=0.01, max_value=1),
       st.booleans(),
       st.lists(st.floats(min_value=-10, max_value=10), min_size=1,
                max_size=20))
def test_pid_output_and_integral_bounded(kp, ki, negative, measurements):
    ki = -ki if negative else ki
    pid = PidState(kp=kp, ki=ki, out_min=-0.5, out_max=1.5)

    for measurement in measurements:
        output, pid = pid_step(pid, 0.0, measurement, 0.5)

        assert -0.5 <= output <= 1.5
        assert -0.5 - 1e-9 <= pid.ki * pid.integral <= 1.5 + 1e-9


def test_initial_pids_are_bumpless(plant_config):
    state = trim(0.7, plant_config)
    pid1, pid2, pid3 = initial_pids(state, plant_config)

    rho, _ = pid_step(pid1, 0.7, state.power, 0.5)
    mdot_p, _ = pid_step(pid2, 0.6, state.t_core_out, 0.5)
    mdot_s, _ = pid_step(pid3, 0.2, state.t_core_in, 0.5)

    assert rho == pytest.approx(state.rho_ext, abs=1e-12)
    assert mdot_p == pytest.approx(state.mdot_p, abs=1e-10)
    assert mdot_s == pytest.approx(state.mdot_s, abs=1e-10)


def test_supervisory_step_at_trim(plant_config):
    state = trim(0.8, plant_config)
    pids = initial_pids(state, plant_config)

    for _ in range(10):
        state, pids = supervisory_step(state, 0.8, pids, plant_config)

    assert state.power == pytest.approx(0.8, abs=1e-6)
    assert state.time == pytest.approx(5.0)


def test_supervisory_step_invalid_setpoint(plant_config):
    state = trim(0.8, plant_config)
    pids = initial_pids(state, plant_config)

    with pytest.raises(ContractError):
        supervisory_step(state, 1.2, pids, plant_config)


def test_ramp_down_closed_loop(plant_config):
    setpoints = np.linspace(1.0, 0.5, 200)
    run = simulate_setpoints(setpoints, plant_config, hold=5.0)
    final = run.states[-1]

    assert final.time == pytest.approx(1000.0)
    assert final.power == pytest.approx(0.5, abs=0.02)
    assert abs(final.t_core_out - plant_config.t_core_out_nom) < 0.05


def test_simulate_setpoints_records(plant_config):
    run = simulate_setpoints([1.0, 0.9, 0.8], plant_config, hold=10.0)

    assert len(run.states) == 7
    assert run.setpoints == [1.0, 1.0, 0.9, 0.9, 0.8, 0.8, 0.8]
    assert [s.time for s in run.states] == [0.0, 5.0, 10.0, 15.0, 20.0,
                                            25.0, 30.0]


def test_simulate_setpoints_invalid_hold(plant_config):
    with pytest.raises(ContractError):
        simulate_setpoints([1.0], plant_config, hold=7.0)

    with pytest.raises(ContractError):
        simulate_setpoints([], plant_config, hold=5.0)


def test_simulate_demand_dither(plant_config):
    demand = [1.0, 1.0, 0.95]

    with pytest.raises(ContractError):
        simulate_demand(demand, plant_config, 5.0, dither=0.03)

    rng = np.random.default_rng(0)
    run = simulate_demand(demand, plant_config, 5.0, dither=0.03, rng=rng)

    offsets = np.array(run.setpoints[:3]) - np.array(demand)
    assert np.all(np.abs(offsets) <= 0.03)
    assert max(run.setpoints) <= 1.05


def test_trajectory_rows(plant_config):
    run = simulate_setpoints([1.0], plant_config, hold=5.0)
    rows = trajectory_rows(run)

    assert len(rows) == 2
    assert tuple(rows[0]) == TRAJECTORY_COLUMNS
    assert rows[0]['setpoint'] == 1.0


def test_config_validation():
    assert PlantConfig().validate() == PlantConfig()

    with pytest.raises(ConfigError, match='tau_core'):
        PlantConfig(tau_core=0.0).validate()

    with pytest.raises(ConfigError, match='dt_record'):
        PlantConfig(dt_record=1.2).validate()

    with pytest.raises(ConfigError):
        PlantConfig(t_core_out_nom=0.1).validate()
