"""Local regulation layer: PI loops and the plant supervisor.

The scheduler owns the heater power; everything the loop does locally is
react to it.  A temperature PI trims the clay feed so the calciner outlet
gas stays at its target, a second PI holds circulation by trimming the fan
rise, and a hard safety band drives the feed to minimum when the outlet
temperature leaves the allowed range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import plant
from .errors import ValidationError

CELSIUS = 273.15


@dataclass(frozen=True)
class PIController:
    """Discrete PI with clamping anti-windup; immutable, step returns a copy."""

    kp: float
    ki: float
    integral_state: float = 0.0
    output_min: float = -math.inf
    output_max: float = math.inf
    bias: float = 0.0
    anti_windup: bool = True

    def __post_init__(self):
        if not self.output_min <= self.output_max:
            raise ValidationError("output_min must not exceed output_max")


def pi_step(setpoint: float, measurement: float, ctl: PIController, dt: float):
    """One rectangle-rule PI update; returns (output, updated controller).

    The integral is advanced first and kept only if the resulting output is
    inside the actuator limits; a saturated output leaves the stored
    integral untouched, so it cannot wind up against the clamp.
    """
    if dt <= 0.0:
        raise ValidationError("dt must be positive")
    e = setpoint - measurement
    integral = ctl.integral_state + ctl.ki * e * dt
    u = ctl.bias + ctl.kp * e + integral
    if u > ctl.output_max:
        out = ctl.output_max
        if ctl.anti_windup:
            integral = ctl.integral_state
    elif u < ctl.output_min:
        out = ctl.output_min
        if ctl.anti_windup:
            integral = ctl.integral_state
    else:
        out = u
    return out, replace(ctl, integral_state=integral)


@dataclass(frozen=True)
class SetpointCommand:
    """Hourly heater power order handed down by the scheduler."""

    p_ehgg_setpoint: float  # W
    valid_from: float  # s
    valid_to: float  # s

    def __post_init__(self):
        if not self.valid_from < self.valid_to:
            raise ValidationError("valid_from must precede valid_to")
        if self.p_ehgg_setpoint < 0.0:
            raise ValidationError("heater setpoint must be >= 0")

    def active_at(self, t: float) -> bool:
        return self.valid_from <= t < self.valid_to


@dataclass(frozen=True)
class SupervisorSettings:
    """Targets and hard limits for the local loops."""

    t_target: float = 800.0 + CELSIUS
    band: tuple = (750.0 + CELSIUS, 850.0 + CELSIUS)
    safety: tuple = (600.0 + CELSIUS, 1000.0 + CELSIUS)
    circulation_target: float = 0.85  # kg/s
    ehgg_max: float = 2.0e6  # W

    def __post_init__(self):
        if not self.band[0] < self.t_target < self.band[1]:
            raise ValidationError("target must sit inside the band")
        if not (self.safety[0] <= self.band[0]
                and self.band[1] <= self.safety[1]):
            raise ValidationError("safety limits must contain the band")


@dataclass
class SupervisorResult:
    u: np.ndarray
    controllers: dict
    tripped: bool
    t_measured: float


def plant_supervisor(cmd: SetpointCommand, measurements: dict,
                     controllers: dict, settings: SupervisorSettings,
                     dt: float) -> SupervisorResult:
    """Compute the plant input vector for one local control interval.

    controllers maps "feed" and "fan" to PIController instances; the
    returned result carries their successors.  A temperature excursion
    beyond the safety limits trips the feed to its minimum and freezes
    both loops for the interval.
    """
    t_meas = float(measurements["T_calciner_out"])
    flow_meas = float(measurements.get("recirc_flow", 0.0))
    if not (np.isfinite(t_meas) and np.isfinite(flow_meas)):
        raise ValidationError("measurements must be finite")

    feed_ctl = controllers["feed"]
    fan_ctl = controllers["fan"]

    p_el = min(max(cmd.p_ehgg_setpoint, 0.0), settings.ehgg_max)

    tripped = not settings.safety[0] <= t_meas <= settings.safety[1]
    if tripped:
        feed = feed_ctl.output_min
        dp_fan = fan_ctl.bias
    else:
        feed, feed_ctl = pi_step(settings.t_target, t_meas, feed_ctl, dt)
        dp_fan, fan_ctl = pi_step(settings.circulation_target, flow_meas,
                                  fan_ctl, dt)

    u = np.zeros(plant.N_INPUTS)
    u[plant.U_CLAY_FEED] = feed
    u[plant.U_P_EHGG] = p_el
    u[plant.U_DP_FAN] = dp_fan
    return SupervisorResult(u=u, controllers={"feed": feed_ctl, "fan": fan_ctl},
                            tripped=tripped, t_measured=t_meas)


def controllers_from_config(cfg: dict) -> tuple:
    """Build (controllers, settings) from a scenario controller block."""
    def build(block, fallback_bias=0.0):
        return PIController(
            kp=float(block["kp"]), ki=float(block["ki"]),
            output_min=float(block.get("min", -math.inf)),
            output_max=float(block.get("max", math.inf)),
            bias=float(block.get("bias", fallback_bias)),
            anti_windup=bool(block.get("anti_windup", True)),
        )

    controllers = {
        "feed": build(cfg["temperature"]),
        "fan": build(cfg["circulation"]),
    }
    band = cfg.get("band_celsius", [750.0, 850.0])
    safety = cfg.get("safety_celsius", [600.0, 1000.0])
    settings = SupervisorSettings(
        t_target=float(cfg.get("t_target_celsius", 800.0)) + CELSIUS,
        band=(float(band[0]) + CELSIUS, float(band[1]) + CELSIUS),
        safety=(float(safety[0]) + CELSIUS, float(safety[1]) + CELSIUS),
        circulation_target=float(cfg["circulation"].get("target", 0.85)),
        ehgg_max=float(cfg.get("ehgg_max", 2.0e6)),
    )
    return controllers, settings
