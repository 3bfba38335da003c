import math

import numpy as np
import pytest
from pydantic import ValidationError

from lbsc.errors import SimulationFault
from lbsc.platoon_plant import (
    N_CARS,
    DisturbanceSchedule,
    DriverParams,
    FleetState,
    LeadProfile,
    PlatoonPlant,
    driver_force,
    driver_force_partials,
    human_driver_control,
    integrate_car,
    lead_velocity_profile,
    range_policy,
)
from lbsc.vehicle_dynamics import CarParams


def _human_controls(plant: PlatoonPlant, state: FleetState, driver: DriverParams) -> list:
    u = [0.0]
    for i in range(2, N_CARS + 1):
        u.append(human_driver_control(i, state, driver, plant.cars[i - 1]))
    return u


@pytest.mark.parametrize(
    "headway, expected",
    [(10.0, 0.0), (25.0, 0.0), (62.5, 20.0), (100.0, 40.0), (150.0, 40.0)],
)
def test_range_policy(headway, expected):
    assert range_policy(headway, DriverParams()) == pytest.approx(expected)


def test_driver_force_examples(table_one_car):
    driver = DriverParams()
    # too close and stopped behind a stopped car
    assert driver_force(20.0, 0.0, 0.0, 0.0, driver, table_one_car) == 0.0
    # on the policy line, closing on a faster front car
    assert driver_force(62.5, 21.0, 0.0, 20.0, driver, table_one_car) == pytest.approx(2000.0)
    # inside B_st at matched speed
    assert driver_force(20.0, 18.0, 0.0, 18.0, driver, table_one_car) == pytest.approx(-540.0)
    # saturates
    assert driver_force(500.0, 40.0, 0.0, 0.0, driver, table_one_car) == table_one_car.u_max


def test_driver_force_partials(table_one_car):
    driver = DriverParams()
    dp, dv = driver_force_partials(62.5, 20.0, 0.0, 20.0, driver, table_one_car)
    assert dp == pytest.approx(-30.0 * 40.0 / 75.0)
    assert dv == pytest.approx(-2030.0)
    assert driver_force_partials(500.0, 40.0, 0.0, 0.0, driver, table_one_car) == (0.0, 0.0)


def test_human_driver_control_needs_front_car(cruise_state, table_one_car):
    with pytest.raises(ValueError):
        human_driver_control(1, cruise_state, DriverParams(), table_one_car)


@pytest.mark.parametrize(
    "t, expected",
    [
        (0.0, 18.0),
        (2.5, 19.0),
        (5.0, 20.0),
        (19.0, 20.0),
        (22.5, 25.0),
        (30.0, 30.0),
        (42.0, 25.0),
        (44.0, 20.0),
        (60.0, 20.0),
        (70.0 + math.pi, 21.5),
        (-5.0, 18.0),
    ],
)
def test_lead_profile_values(t, expected):
    assert lead_velocity_profile(t) == pytest.approx(expected)


def test_lead_profile_clamps_and_is_continuous():
    profile = LeadProfile()
    assert profile.velocity(250.0) == profile.velocity(100.0)
    dt = 1e-3
    ts = np.arange(0.0, 100.0, dt)
    vs = np.array([profile.velocity(t) for t in ts])
    assert np.max(np.abs(np.diff(vs))) <= profile.max_rate() * dt + 1e-9


def test_lead_profile_validation():
    with pytest.raises(ValidationError):
        LeadProfile(brake_rate_mps2=1.0)
    with pytest.raises(ValidationError):
        LeadProfile(high_velocity_mps=15.0)
    with pytest.raises(ValidationError):
        LeadProfile(second_ramp_start_s=2.0)


def test_disturbance_schedule():
    schedule = DisturbanceSchedule()
    assert schedule.rolling_coefficient(-1.0) == 0.015
    assert schedule.rolling_coefficient(9.99) == 0.015
    assert schedule.rolling_coefficient(10.0) == 0.03
    assert schedule.rolling_coefficient(69.9) == 0.03
    assert schedule.rolling_coefficient(70.0) == 0.015
    assert schedule.grade_accel(69.0) == 0.0
    assert schedule.grade_accel(75.0) == pytest.approx(2.5 * math.sin(37.5))
    calm = DisturbanceSchedule.calm()
    assert calm.rolling_coefficient(20.0) is None
    assert calm.grade_accel(80.0) == 0.0
    with pytest.raises(ValidationError):
        DisturbanceSchedule(rolling_times_s=[0.0], rolling_values=[0.1, 0.2])
    with pytest.raises(ValidationError):
        DisturbanceSchedule(rolling_times_s=[5.0, 1.0], rolling_values=[0.1, 0.2])


def test_driver_params_validation():
    with pytest.raises(ValidationError):
        DriverParams(b_st=100.0, b_go=25.0)
    with pytest.raises(ValidationError):
        DriverParams(k_i=-1.0)
    assert DriverParams(k_i=0.5).slope == 0.5


def test_zero_force_frictionless_car_coasts():
    car = CarParams(f0=0.0, f1=0.0, f2=0.0, rolling_coefficient=0.0)
    p, v = integrate_car(10.0, 15.0, 0.0, car, DisturbanceSchedule.calm(), 0.0, 0.02)
    assert v == 15.0
    assert p == pytest.approx(10.3, abs=1e-12)


def test_rk4_matches_fine_reference(table_one_car):
    calm = DisturbanceSchedule.calm()
    p, v = 0.0, 18.0
    for k in range(50):
        p, v = integrate_car(p, v, 1000.0, table_one_car, calm, k * 0.02, 0.02)
    p_ref, v_ref = 0.0, 18.0
    for k in range(10_000):
        p_ref, v_ref = integrate_car(p_ref, v_ref, 1000.0, table_one_car, calm, k * 1e-4, 1e-4, substeps=1)
    assert v == pytest.approx(v_ref, abs=1e-6)
    assert p == pytest.approx(p_ref, abs=1e-6)


def test_rk4_is_fourth_order():
    # dv/dt = -0.04 v^2, v(t) = v0 / (1 + 0.04 v0 t)
    car = CarParams(mass=50.0, f0=0.0, f1=0.0, f2=2.0, rolling_coefficient=0.0)
    calm = DisturbanceSchedule.calm()
    exact = 10.0 / (1.0 + 0.4 * 1.0)

    def error(h: float) -> float:
        v = 10.0
        for k in range(int(round(1.0 / h))):
            _, v = integrate_car(0.0, v, 0.0, car, calm, k * h, h, substeps=1)
        return abs(v - exact)

    assert error(0.1) / error(0.05) >= 8.0


def test_step_is_deterministic(table_one_car):
    plant = PlatoonPlant([table_one_car] * N_CARS)
    driver = DriverParams()
    a = b = FleetState.initial()
    for _ in range(100):
        a = plant.step(a, _human_controls(plant, a, driver), 0.02)
        b = plant.step(b, _human_controls(plant, b, driver), 0.02)
    assert np.array_equal(a.p, b.p) and np.array_equal(a.v, b.v)
    assert a.t == pytest.approx(2.0)


def test_step_reports_acceleration(table_one_car):
    plant = PlatoonPlant([table_one_car] * N_CARS)
    state = FleetState.initial()
    nxt = plant.step(state, [0.0, 500.0, 500.0, 500.0, 500.0], 0.02)
    assert np.allclose(nxt.a, (nxt.v - state.v) / 0.02)


def test_all_human_rollout_stays_ordered(table_one_car):
    plant = PlatoonPlant([table_one_car] * N_CARS)
    driver = DriverParams()
    state = FleetState.initial()
    for _ in range(5000):
        state = plant.step(state, _human_controls(plant, state, driver), 0.02)
        assert np.all(state.v >= 0.0)
        assert np.all(np.diff(state.p) < 0.0)
    assert state.t == pytest.approx(100.0)
    assert state.is_finite()


def test_applied_controls_clamp_and_override(table_one_car):
    plant = PlatoonPlant([table_one_car] * N_CARS)
    u = plant.applied_controls(FleetState.initial(), [1e9, 1e9, -1e9, 0.0, 10.0])
    assert u[0] == plant.lead_control(FleetState.initial())
    assert u[1] == table_one_car.u_max
    assert u[2] == table_one_car.u_min
    assert u[3:].tolist() == [0.0, 10.0]


def test_step_schedule_override_reaches_lead_car(table_one_car):
    driver = DriverParams()
    state = FleetState(p=FleetState.initial().p, v=np.full(N_CARS, 30.0), a=np.zeros(N_CARS), t=30.0)
    default = PlatoonPlant([table_one_car] * N_CARS)
    calm = PlatoonPlant([table_one_car] * N_CARS, schedule=DisturbanceSchedule.calm())
    controls = _human_controls(calm, state, driver)
    assert default.lead_control(state) != calm.lead_control(state)
    assert default.lead_control(state, DisturbanceSchedule.calm()) == calm.lead_control(state)
    overridden = default.step(state, controls, 0.02, schedule=DisturbanceSchedule.calm())
    reference = calm.step(state, controls, 0.02)
    assert np.array_equal(overridden.p, reference.p)
    assert np.array_equal(overridden.v, reference.v)


def test_lead_tracks_profile(table_one_car):
    plant = PlatoonPlant([table_one_car] * N_CARS, schedule=DisturbanceSchedule.calm())
    driver = DriverParams()
    state = FleetState.initial()
    for _ in range(750):
        state = plant.step(state, _human_controls(plant, state, driver), 0.02)
    assert state.v[0] == pytest.approx(20.0, abs=0.05)


def test_non_finite_control_faults(table_one_car):
    plant = PlatoonPlant([table_one_car] * N_CARS)
    with pytest.raises(SimulationFault) as info:
        plant.step(FleetState.initial(), [0.0, 0.0, 0.0, float("nan"), 0.0], 0.02)
    assert "u" in info.value.state_dump


def test_step_rejects_bad_dt_and_sizes(table_one_car):
    plant = PlatoonPlant([table_one_car] * N_CARS)
    with pytest.raises(ValueError):
        plant.step(FleetState.initial(), [0.0] * N_CARS, 0.0)
    with pytest.raises(ValueError):
        plant.step(FleetState.initial(), [0.0] * 3, 0.02)
    with pytest.raises(ValueError):
        PlatoonPlant([table_one_car] * 3)
    with pytest.raises(ValueError):
        FleetState(p=np.zeros(4), v=np.zeros(5), a=np.zeros(5))


def test_fleet_state_headway():
    state = FleetState.initial()
    assert state.headway(2) == pytest.approx(60.0)
    assert state.headway(5) == pytest.approx(60.0)
    assert state.as_dump()["v"] == [18.0] * N_CARS
