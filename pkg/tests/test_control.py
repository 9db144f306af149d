"""PI law, anti-windup, and the supervisor on the live loop."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calciflow import control, dae, plant
from calciflow.control import PIController, SetpointCommand, pi_step
from calciflow.errors import ValidationError


def test_zero_error_outputs_bias():
    ctl = PIController(kp=4.0, ki=0.2, bias=1.5)
    out, ctl2 = pi_step(10.0, 10.0, ctl, dt=1.0)
    assert out == 1.5
    assert ctl2.integral_state == 0.0


def test_proportional_only():
    ctl = PIController(kp=2.0, ki=0.0)
    out, _ = pi_step(3.0, 1.5, ctl, dt=1.0)
    assert out == pytest.approx(3.0)


def test_rectangle_rule_integral():
    ctl = PIController(kp=0.0, ki=1.0)
    out = None
    for _ in range(2):
        out, ctl = pi_step(2.0, 1.0, ctl, dt=0.5)
    assert ctl.integral_state == pytest.approx(1.0)
    assert out == pytest.approx(1.0)


def test_clamping_freezes_integral():
    ctl = PIController(kp=1.0, ki=1.0, output_max=1.0)
    out, ctl2 = pi_step(10.0, 0.0, ctl, dt=1.0)
    assert out == 1.0
    assert ctl2.integral_state == 0.0
    # repeated saturation never accumulates
    for _ in range(50):
        out, ctl2 = pi_step(10.0, 0.0, ctl2, dt=1.0)
    assert ctl2.integral_state == 0.0
    # error reverses: the loop comes straight off the clamp
    out, ctl3 = pi_step(0.0, 1.0, ctl2, dt=1.0)
    assert out < 1.0


def test_windup_without_protection():
    ctl = PIController(kp=1.0, ki=1.0, output_max=1.0, anti_windup=False)
    for _ in range(50):
        _, ctl = pi_step(10.0, 0.0, ctl, dt=1.0)
    assert ctl.integral_state == pytest.approx(500.0)


def test_lower_clamp():
    ctl = PIController(kp=1.0, ki=0.5, output_min=-0.5)
    out, ctl2 = pi_step(0.0, 10.0, ctl, dt=1.0)
    assert out == -0.5
    assert ctl2.integral_state == 0.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40),
       st.floats(0.01, 10.0), st.floats(0.0, 5.0), st.floats(0.0, 5.0))
def test_output_always_within_limits(errors, dt, kp, ki):
    ctl = PIController(kp=kp, ki=ki, output_min=-2.0, output_max=3.0)
    for e in errors:
        out, ctl = pi_step(e, 0.0, ctl, dt=dt)
        assert -2.0 <= out <= 3.0


def test_bad_dt_rejected():
    with pytest.raises(ValidationError):
        pi_step(1.0, 0.0, PIController(kp=1.0, ki=0.0), dt=0.0)


def test_bad_limits_rejected():
    with pytest.raises(ValidationError):
        PIController(kp=1.0, ki=0.0, output_min=2.0, output_max=1.0)


def test_setpoint_command_validation():
    cmd = SetpointCommand(5.0e5, 0.0, 3600.0)
    assert cmd.active_at(0.0) and cmd.active_at(3599.9)
    assert not cmd.active_at(3600.0)
    with pytest.raises(ValidationError):
        SetpointCommand(5.0e5, 10.0, 10.0)
    with pytest.raises(ValidationError):
        SetpointCommand(-1.0, 0.0, 1.0)


def default_controllers():
    return {
        "feed": PIController(kp=-3e-4, ki=-5e-6, output_min=0.05,
                             output_max=1.2, bias=0.45),
        "fan": PIController(kp=1000.0, ki=50.0, output_min=0.0,
                            output_max=8000.0, bias=3000.0),
    }


def test_supervisor_zero_error_keeps_feed():
    settings_ = control.SupervisorSettings()
    cmd = SetpointCommand(1.0e6, 0.0, 3600.0)
    meas = {"T_calciner_out": settings_.t_target,
            "recirc_flow": settings_.circulation_target}
    res = control.plant_supervisor(cmd, meas, default_controllers(),
                                   settings_, dt=2.0)
    assert res.u[plant.U_CLAY_FEED] == pytest.approx(0.45)
    assert res.u[plant.U_P_EHGG] == pytest.approx(1.0e6)
    assert res.u[plant.U_DP_FAN] == pytest.approx(3000.0)
    assert not res.tripped


def test_supervisor_trips_outside_safety_band():
    settings_ = control.SupervisorSettings()
    cmd = SetpointCommand(1.0e6, 0.0, 3600.0)
    meas = {"T_calciner_out": 1400.0, "recirc_flow": 0.85}
    res = control.plant_supervisor(cmd, meas, default_controllers(),
                                   settings_, dt=2.0)
    assert res.tripped
    assert res.u[plant.U_CLAY_FEED] == 0.05
    # cold side trips too
    meas = {"T_calciner_out": 800.0, "recirc_flow": 0.85}
    assert control.plant_supervisor(cmd, meas, default_controllers(),
                                    settings_, dt=2.0).tripped


def test_supervisor_clips_power_order():
    settings_ = control.SupervisorSettings(ehgg_max=1.5e6)
    cmd = SetpointCommand(9.9e6, 0.0, 3600.0)
    meas = {"T_calciner_out": settings_.t_target, "recirc_flow": 0.85}
    res = control.plant_supervisor(cmd, meas, default_controllers(),
                                   settings_, dt=2.0)
    assert res.u[plant.U_P_EHGG] == 1.5e6


def test_supervisor_rejects_nan_measurement():
    settings_ = control.SupervisorSettings()
    cmd = SetpointCommand(1.0e6, 0.0, 3600.0)
    with pytest.raises(ValidationError):
        control.plant_supervisor(cmd, {"T_calciner_out": math.nan},
                                 default_controllers(), settings_, dt=2.0)


def test_controllers_from_config():
    cfg = {
        "temperature": {"kp": -3e-4, "ki": -5e-6, "min": 0.05, "max": 1.2,
                        "bias": 0.45},
        "circulation": {"kp": 1000.0, "ki": 50.0, "min": 0.0, "max": 8000.0,
                        "bias": 3000.0, "target": 0.85},
        "band_celsius": [750.0, 850.0],
        "t_target_celsius": 800.0,
        "ehgg_max": 1.6e6,
    }
    controllers, settings_ = control.controllers_from_config(cfg)
    assert controllers["feed"].kp == -3e-4
    assert controllers["fan"].output_max == 8000.0
    assert settings_.t_target == pytest.approx(1073.15)
    assert settings_.band == (1023.15, 1123.15)
    assert settings_.ehgg_max == 1.6e6


def run_closed_loop(pl, st, controllers, settings_, cmd, n_steps, dt=2.0):
    cfg = dae.SolverConfig(dt=dt, newton_tol=1e-9)
    stepper = pl.make_stepper(st, cfg)
    tripped = False
    for _ in range(n_steps):
        out = pl.outputs(st)
        res = control.plant_supervisor(
            cmd, {"T_calciner_out": out["T_g_out"],
                  "recirc_flow": out["recirc_flow"]},
            controllers, settings_, dt)
        controllers = res.controllers
        tripped = tripped or res.tripped
        st.u[:] = res.u
        st = pl.step(st, cfg, stepper)
    return st, controllers, tripped


def test_closed_loop_tracks_power_step(desk_plant, hot_state):
    """Raising the power order pulls in more clay at the same temperature."""
    pl = desk_plant
    settings_ = control.SupervisorSettings()
    controllers = default_controllers()

    st = hot_state.copy()
    cmd = control.SetpointCommand(1.0e6, 0.0, 1e9)
    st, controllers, trip1 = run_closed_loop(pl, st, controllers, settings_,
                                             cmd, 400)
    out1 = pl.outputs(st)
    assert abs(out1["T_g_out"] - settings_.t_target) < 1.0
    assert not trip1

    cmd = control.SetpointCommand(1.25e6, 0.0, 1e9)
    st, controllers, trip2 = run_closed_loop(pl, st, controllers, settings_,
                                             cmd, 700)
    out2 = pl.outputs(st)
    assert abs(out2["T_g_out"] - settings_.t_target) < 1.0
    assert not trip2
    assert out2["clay_feed"] > out1["clay_feed"] + 0.05
    assert out2["product_rate"] > out1["product_rate"] + 0.03
