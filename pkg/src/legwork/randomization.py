"""Declarative domain-randomization ranges and seeded per-episode sampling.

Low-level training randomizes joint damping, joint dry friction, total mass,
surface friction, actuator gain, and the terrain height field, and applies
sticky actions plus periodic torso wrenches. High-level training perturbs
high-level actions with uniform noise; the two-agent task also rescales the
block dimensions.

Every sampler takes an explicit numpy Generator. Distinct concerns use
distinct sub-streams derived from the episode seed with fixed spawn keys
(see substream), so no consumer can disturb another's draws.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigurationError
from .world import DynamicsParams, ExternalWrench, HeightField

HFIELD_N = 32
HFIELD_WIDTH = 10.0


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for (seed, key); fixed keys give fixed streams."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


@dataclass
class RandomizationConfig:
    """Ranges and per-item switches for all randomized quantities."""

    damping_range: tuple = (0.9, 1.1)
    joint_friction_range: tuple = (0.001, 0.005)
    mass_range: tuple = (1.6, 2.0)
    surface_friction_range: tuple = (0.8, 1.2)
    gain_range: tuple = (4.0, 6.0)
    hfield_amplitude_range: tuple = (0.0, 0.050)
    sticky_prob: float = 0.2
    wrench_period: int = 10
    # Shove forces are calibrated against the ~0.6 m/s top walking speed: a
    # 3 N force deflects the nominal agent by ~0.17 m/s (a quarter of top
    # speed). Much larger ranges overpower locomotion entirely and no gait
    # signal survives training.
    wrench_force_range: tuple = (-3.0, 3.0)
    wrench_torque_range: tuple = (-0.3, 0.3)
    highlevel_noise_range: tuple = (-1.0, 1.0)
    object_dim_scale_range: tuple = (0.8, 1.2)

    damping_on: bool = True
    joint_friction_on: bool = True
    mass_on: bool = True
    surface_friction_on: bool = True
    gain_on: bool = True
    height_field_on: bool = True
    sticky_on: bool = True
    wrench_on: bool = True
    highlevel_noise_on: bool = True
    object_dims_on: bool = True

    def __post_init__(self):
        for f in fields(self):
            if f.name.endswith("_range"):
                lo, hi = getattr(self, f.name)
                if not lo <= hi:
                    raise ConfigurationError(f"{f.name}: low {lo} > high {hi}")
        if not 0.0 <= self.sticky_prob <= 1.0:
            raise ConfigurationError("sticky_prob must be in [0, 1]")
        if self.wrench_period < 1:
            raise ConfigurationError("wrench_period must be >= 1")

    @classmethod
    def all_on(cls) -> "RandomizationConfig":
        return cls()

    @classmethod
    def all_off(cls) -> "RandomizationConfig":
        flags = {f.name: False for f in fields(cls) if f.name.endswith("_on")}
        return cls(**flags)

    @classmethod
    def no_height_field(cls) -> "RandomizationConfig":
        return cls(height_field_on=False)


def _draw(rng, lo, hi, on):
    return float(rng.uniform(lo, hi)) if on else (lo + hi) / 2.0


def sample_dynamics(config: RandomizationConfig, rng: np.random.Generator) -> DynamicsParams:
    """One dynamics realization; disabled items take range midpoints.

    Draw order is fixed (damping, joint friction, mass, surface friction,
    gain) and part of the reproducibility contract.
    """
    damping = _draw(rng, *config.damping_range, config.damping_on)
    friction = _draw(rng, *config.joint_friction_range, config.joint_friction_on)
    mass = _draw(rng, *config.mass_range, config.mass_on)
    surface = _draw(rng, *config.surface_friction_range, config.surface_friction_on)
    gain = _draw(rng, *config.gain_range, config.gain_on)
    return DynamicsParams(joint_damping=damping, joint_friction=friction,
                          actuator_gain=gain, actuator_bias=-gain,
                          total_mass=mass, surface_friction=surface)


def sample_height_field(config: RandomizationConfig, rng: np.random.Generator) -> HeightField:
    """Random terrain: amplitude drawn from its range, node heights iid
    uniform(0, amplitude). Disabled: flat."""
    if not config.height_field_on:
        return HeightField.flat(HFIELD_N, HFIELD_WIDTH)
    lo, hi = config.hfield_amplitude_range
    amplitude = float(rng.uniform(lo, hi))
    grid = rng.uniform(0.0, amplitude, (HFIELD_N, HFIELD_N))
    return HeightField(grid, width=HFIELD_WIDTH, amplitude=amplitude)


def sample_episode_params(config: RandomizationConfig, rng: np.random.Generator):
    """(DynamicsParams, HeightField) for one episode from a single stream."""
    return sample_dynamics(config, rng), sample_height_field(config, rng)


def apply_sticky(action, prev_action, rng: np.random.Generator, sticky_prob: float):
    """Repeat the previous action with probability sticky_prob.

    The first step of an episode (prev_action None) never sticks and draws
    nothing; every later call consumes exactly one uniform draw.
    """
    if prev_action is None:
        return action
    if action.shape != prev_action.shape:
        raise ConfigurationError("action shapes must match")
    if rng.uniform() < sticky_prob:
        return prev_action
    return action


def sample_wrench(step: int, rng: np.random.Generator, config: RandomizationConfig,
                  current: ExternalWrench | None = None) -> ExternalWrench:
    """Torso wrench schedule: a fresh draw every wrench_period steps, held
    constant in between. Disabled: always the zero wrench, no draws."""
    if not config.wrench_on:
        return ExternalWrench.zero()
    if current is not None and step % config.wrench_period != 0:
        return current
    flo, fhi = config.wrench_force_range
    tlo, thi = config.wrench_torque_range
    return ExternalWrench(float(rng.uniform(flo, fhi)), float(rng.uniform(flo, fhi)),
                          float(rng.uniform(tlo, thi)))


def perturb_high_level_action(a_hi, rng: np.random.Generator,
                              config: RandomizationConfig):
    """Add iid uniform noise to a high-level action, clamped back to [-1, 1]."""
    a = np.clip(np.asarray(a_hi, dtype=float), -1.0, 1.0)
    if not config.highlevel_noise_on:
        return a
    lo, hi = config.highlevel_noise_range
    return np.clip(a + rng.uniform(lo, hi, a.shape), -1.0, 1.0)


def sample_object_dims(nominal, rng: np.random.Generator,
                       config: RandomizationConfig):
    """Scale each block half extent by an independent uniform draw."""
    hx, hy = nominal
    if hx <= 0 or hy <= 0:
        raise ConfigurationError("nominal half extents must be positive")
    if not config.object_dims_on:
        return (hx, hy)
    lo, hi = config.object_dim_scale_range
    return (hx * float(rng.uniform(lo, hi)), hy * float(rng.uniform(lo, hi)))
