"""Analytic steady-state data: potential flow around a cylinder.

Generates (conditions -> equilibrium solution) pairs for the steady-state
task.  The fluid field is the classical cylinder potential
w(z) = U (z + R^2 / z); the solid (an inner ring) responds with a rigid
displacement proportional to the free-stream dynamic pressure.  The 3D
variant extrudes along the third axis with fields constant in it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Trajectory
from .geometry import DomainObservation, SystemState


@dataclass
class PotentialFlowParams:
    inflow_speed: float = 1.0  # U (m/s)
    radius: float = 1.0  # cylinder radius R (m)
    response_gain: float = 0.1  # rigid displacement per unit dynamic pressure
    rho: float = 1.0  # fluid density (kg/m^3)
    dim: int = 2  # 2 or 3 (extruded)
    n_fluid: int = 64
    n_solid: int = 16
    n_interface: int = 24

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        if self.radius <= 0 or self.rho <= 0:
            raise ValueError("radius and rho must be positive")
        if self.inflow_speed < 0 or self.response_gain < 0:
            raise ValueError("inflow_speed and response_gain must be nonnegative")

    def to_conditions(self) -> dict:
        return {"inflow_speed": self.inflow_speed, "radius": self.radius,
                "response_gain": self.response_gain, "rho": self.rho}


def cylinder_velocity(points_xy: np.ndarray, speed: float, radius: float) -> np.ndarray:
    """Velocity (u_x, u_y) of the flow w(z) = U (z + R^2/z); u = conj(dw/dz)."""
    z = points_xy[:, 0] + 1j * points_xy[:, 1]
    r = np.abs(z)
    if np.any(r < radius * (1 - 1e-12)):
        raise ValueError("fluid point requested inside the cylinder")
    dwdz = speed * (1.0 - radius ** 2 / (z * z))
    return np.stack([dwdz.real, -dwdz.imag], axis=1)


def cylinder_pressure(points_xy: np.ndarray, speed: float, radius: float,
                      rho: float) -> np.ndarray:
    """Bernoulli pressure deviation p - p_inf = rho/2 (U^2 - |u|^2)."""
    u = cylinder_velocity(points_xy, speed, radius)
    return 0.5 * rho * (speed ** 2 - (u * u).sum(axis=1))


def _ring(rng, n, radius):
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    return np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)


def gen_potential_flow(params: PotentialFlowParams, seed: int = 0
                       ) -> tuple[SystemState, SystemState]:
    """Sample one (input, target) pair.

    Input: geometry with all quantities zero, conditions carrying the task
    parameters.  Target: fluid/interface carrying (pressure deviation,
    velocity components) plus the solid load channel; solid positions
    rigidly displaced along +x by response_gain * dynamic pressure.
    """
    rng = np.random.default_rng(seed)
    r_out = 4.0 * params.radius

    r_fluid = np.sqrt(rng.uniform(params.radius ** 2 * 1.0201, r_out ** 2,
                                  size=params.n_fluid))
    theta = rng.uniform(0.0, 2 * np.pi, size=params.n_fluid)
    fluid_xy = np.stack([r_fluid * np.cos(theta), r_fluid * np.sin(theta)], axis=1)
    solid_xy = _ring(rng, params.n_solid, 0.5 * params.radius)
    iface_xy = _ring(rng, params.n_interface, params.radius)

    dyn_pressure = 0.5 * params.rho * params.inflow_speed ** 2
    shift = params.response_gain * dyn_pressure

    def positions(xy, extrude):
        if params.dim == 2:
            return xy.copy()
        z = extrude[:, None]
        return np.concatenate([xy, z], axis=1)

    z_f = rng.uniform(0.0, params.radius, size=params.n_fluid)
    z_s = rng.uniform(0.0, params.radius, size=params.n_solid)
    z_b = rng.uniform(0.0, params.radius, size=params.n_interface)

    vel_width = params.dim
    c_fluid = 1 + vel_width  # pressure + velocity components

    def fluid_quantities(xy):
        u = cylinder_velocity(xy, params.inflow_speed, params.radius)
        p = cylinder_pressure(xy, params.inflow_speed, params.radius, params.rho)
        cols = [p[:, None], u]
        if params.dim == 3:
            cols.append(np.zeros((xy.shape[0], 1)))  # extruded: u_z = 0
        return np.concatenate(cols, axis=1)

    def zeros(n, c):
        return np.zeros((n, c))

    inp = SystemState(
        DomainObservation(positions(fluid_xy, z_f), zeros(params.n_fluid, c_fluid)),
        DomainObservation(positions(solid_xy, z_s), zeros(params.n_solid, 1)),
        DomainObservation(positions(iface_xy, z_b), zeros(params.n_interface, c_fluid + 1)),
        params.to_conditions(), time=0.0,
    )

    solid_target_pos = positions(solid_xy, z_s)
    solid_target_pos[:, 0] += shift
    target = SystemState(
        DomainObservation(positions(fluid_xy, z_f), fluid_quantities(fluid_xy)),
        DomainObservation(solid_target_pos, np.full((params.n_solid, 1), dyn_pressure)),
        DomainObservation(
            positions(iface_xy, z_b),
            np.concatenate([fluid_quantities(iface_xy),
                            np.full((params.n_interface, 1), dyn_pressure)], axis=1),
        ),
        params.to_conditions(), time=1.0,
    )
    return inp, target


def potential_flow_trajectory(params: PotentialFlowParams, seed: int = 0) -> Trajectory:
    """Package the (input, target) pair as a two-frame trajectory."""
    inp, target = gen_potential_flow(params, seed)
    return Trajectory(f"potential-{seed}", [inp, target], params.to_conditions())


def potential_channels(dim: int) -> dict:
    vel = ["velocity_x", "velocity_y"] + (["velocity_z"] if dim == 3 else [])
    fluid = ["pressure"] + vel
    return {
        "fluid": {"names": fluid, "units": ["Pa"] + ["m/s"] * len(vel)},
        "solid": {"names": ["load"], "units": ["Pa"]},
        "interface": {"names": fluid + ["load"],
                      "units": ["Pa"] + ["m/s"] * len(vel) + ["Pa"]},
    }
