"""Classical ground truth: a 1D gas-piston two-way FSI problem.

A closed tube of gas (linear acoustics) drives and is driven by a
spring-mounted piston at the far end.  Each time step runs the classical
partitioned loop: advance the solid under the current interface pressure,
move the mesh to the new tube length, advance the fluid on the moving
mesh with the piston velocity as boundary condition, and fixed-point
iterate with under-relaxation until the interface displacement settles.

The fluid is integrated in mapped coordinates xi = x / L(t) on a fixed
uniform grid (the 1D harmonic mesh map), so the mesh velocity enters as
an advective term: second-order central differences in space, two-stage
explicit (Heun) integration in time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Trajectory
from .geometry import DomainObservation, SystemState

SOLID_POINT_COUNT = 4  # collocated material points representing the piston


class ConvergenceError(RuntimeError):
    """Interface subiteration failed to reach tolerance."""


class MeshInversionError(RuntimeError):
    """Tube length collapsed; the fluid mesh would invert."""


@dataclass
class PistonParams:
    tube_length: float = 1.0  # rest length L0 (m)
    piston_mass: float = 0.5  # kg
    stiffness: float = 50.0  # spring constant (N/m)
    damping: float = 0.05  # dashpot (N s/m)
    # unit cross-section: the 1D per-area gas energy then balances the
    # piston work term A p' s-dot exactly
    area: float = 1.0  # piston face area (m^2)
    rho0: float = 0.05  # gas reference density (kg/m^3)
    sound_speed: float = 10.0  # m/s
    p0: float = 100.0  # reference pressure (Pa)
    s0: float = 0.03  # initial piston displacement (m)
    n_fluid: int = 24  # interior fluid nodes
    dt: float = 1e-3  # time step (s)
    steps: int = 400
    tol: float = 1e-8  # subiteration tolerance on displacement
    omega: float = 0.5  # under-relaxation factor
    max_subiters: int = 50
    init_pressure_amp: float = 0.0  # seeded initial acoustic field amplitude

    def __post_init__(self):
        if abs(self.s0) >= self.tube_length:
            raise ValueError("s0 must be smaller in magnitude than the tube length")
        for name in ("tube_length", "piston_mass", "stiffness", "rho0",
                     "sound_speed", "p0", "dt"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("damping", "area", "init_pressure_amp"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0 < self.omega <= 1:
            raise ValueError("omega must lie in (0, 1]")
        if self.n_fluid < 3:
            raise ValueError("need at least 3 interior fluid nodes")
        dx = self.tube_length / (self.n_fluid + 1)
        if self.dt > 0.5 * dx / self.sound_speed:
            raise ValueError(
                f"dt={self.dt} violates the CFL bound {0.5 * dx / self.sound_speed:.3e}"
            )

    def to_conditions(self) -> dict:
        return {
            "tube_length": self.tube_length, "piston_mass": self.piston_mass,
            "stiffness": self.stiffness, "damping": self.damping,
            "area": self.area, "rho0": self.rho0, "sound_speed": self.sound_speed,
            "p0": self.p0, "s0": self.s0, "dt": self.dt,
            "init_pressure_amp": self.init_pressure_amp,
        }


def mesh_motion_1d(length: float, n_interior: int, dldt: float = 0.0):
    """Harmonic (uniform-coefficient Laplace) mesh map for the tube.

    Nodes sit at fixed reference fractions xi_j = j / (n_interior + 1),
    j = 0 .. n_interior + 1; positions are xi * length and mesh velocities
    xi * dL/dt, so boundary constraints hold exactly and any linear
    velocity profile has zero discrete Laplacian at interior nodes.
    """
    if length <= 0:
        raise MeshInversionError(f"tube length {length} is not positive")
    xi = np.linspace(0.0, 1.0, n_interior + 2)
    return xi, xi * length, xi * dldt


@dataclass
class PistonState:
    time: float
    pressure: np.ndarray  # deviation p - p0 on the xi grid (n+2 nodes)
    velocity: np.ndarray  # gas velocity on the xi grid
    displacement: float  # piston displacement s
    piston_velocity: float  # s-dot
    residual_trace: list = field(default_factory=list)  # last accepted step

    def copy(self) -> "PistonState":
        return PistonState(self.time, self.pressure.copy(), self.velocity.copy(),
                           self.displacement, self.piston_velocity,
                           list(self.residual_trace))


def _fluid_rhs(p: np.ndarray, v: np.ndarray, length: float, dldt: float,
               params: PistonParams):
    """Mapped-coordinate acoustics: time derivatives of (p', v) on the xi
    grid.  Central differences inside, one-sided second-order stencils at
    the ends; velocity endpoints are Dirichlet (handled by the caller)."""
    n2 = p.shape[0]
    dxi = 1.0 / (n2 - 1)
    xi = np.linspace(0.0, 1.0, n2)
    rc2 = params.rho0 * params.sound_speed ** 2

    dp_dxi = np.empty_like(p)
    dv_dxi = np.empty_like(v)
    dp_dxi[1:-1] = (p[2:] - p[:-2]) / (2 * dxi)
    dv_dxi[1:-1] = (v[2:] - v[:-2]) / (2 * dxi)
    dp_dxi[0] = (-3 * p[0] + 4 * p[1] - p[2]) / (2 * dxi)
    dv_dxi[0] = (-3 * v[0] + 4 * v[1] - v[2]) / (2 * dxi)
    dp_dxi[-1] = (3 * p[-1] - 4 * p[-2] + p[-3]) / (2 * dxi)
    dv_dxi[-1] = (3 * v[-1] - 4 * v[-2] + v[-3]) / (2 * dxi)

    adv = xi * dldt
    dp = (adv * dp_dxi - rc2 * dv_dxi) / length
    dv = (adv * dv_dxi - dp_dxi / params.rho0) / length
    dv[0] = 0.0
    dv[-1] = 0.0  # boundary velocities are assigned, not integrated
    return dp, dv


def _advance_fluid(p: np.ndarray, v: np.ndarray, params: PistonParams,
                   length_old: float, length_new: float,
                   v_piston_old: float, v_piston_new: float):
    """One Heun step of the gas on the moving mesh."""
    dt = params.dt
    dldt = (length_new - length_old) / dt
    v = v.copy()
    v[0] = 0.0
    v[-1] = v_piston_old
    k1p, k1v = _fluid_rhs(p, v, length_old, dldt, params)
    p1 = p + dt * k1p
    v1 = v + dt * k1v
    v1[0] = 0.0
    v1[-1] = v_piston_new
    k2p, k2v = _fluid_rhs(p1, v1, length_new, dldt, params)
    p_new = p + 0.5 * dt * (k1p + k2p)
    v_new = v + 0.5 * dt * (k1v + k2v)
    v_new[0] = 0.0
    v_new[-1] = v_piston_new
    return p_new, v_new


def _advance_solid(s: float, sdot: float, params: PistonParams,
                   p_interface_old: float, p_interface_new: float):
    """Trapezoidal step of m s'' = -kappa s - c_d s' + A p'.

    The rule is implicit in (s', v') but the ODE is linear, so the update
    solves in closed form; the interface pressure enters as its start- and
    end-of-step values, which makes the displacement genuinely depend on
    the fluid iterate and gives the partitioned loop a real fixed point."""
    a = 0.5 * params.dt
    m, kap, c = params.piston_mass, params.stiffness, params.damping
    f_old = -kap * s - c * sdot + params.area * p_interface_old
    numer = (m * sdot + a * f_old - a * kap * s - a * a * kap * sdot
             + a * params.area * p_interface_new)
    v_new = numer / (m + a * c + a * a * kap)
    s_new = s + a * (sdot + v_new)
    return s_new, v_new


def partitioned_step(state: PistonState, params: PistonParams) -> PistonState:
    """Advance one dt with the partitioned fixed-point loop.

    Residual is the change in the solid solve's displacement between
    successive subiterations; the exchanged displacement is under-relaxed
    by omega before the mesh and fluid stages consume it.
    """
    length_old = params.tube_length + state.displacement
    p_l_old = state.pressure[-1]
    p_l_guess = p_l_old

    s_exchange = state.displacement  # under-relaxed value fed to mesh + fluid
    sdot_exchange = state.piston_velocity
    s_prev_candidate = state.displacement
    trace = []

    for it in range(params.max_subiters):
        s_cand, sdot_cand = _advance_solid(state.displacement, state.piston_velocity,
                                           params, p_l_old, p_l_guess)
        residual = abs(s_cand - s_prev_candidate)
        trace.append(residual)
        s_prev_candidate = s_cand

        if residual < params.tol:
            # converged: advance the fluid once more with the accepted
            # candidates so the emitted state is self-consistent
            length_new = params.tube_length + s_cand
            if length_new <= 0:
                raise MeshInversionError(
                    f"tube length {length_new:.3e} at t={state.time:.4f}")
            p_new, v_new = _advance_fluid(state.pressure, state.velocity, params,
                                          length_old, length_new,
                                          state.piston_velocity, sdot_cand)
            return PistonState(state.time + params.dt, p_new, v_new,
                               s_cand, sdot_cand, trace)

        if it == 0:
            s_exchange, sdot_exchange = s_cand, sdot_cand
        else:
            s_exchange += params.omega * (s_cand - s_exchange)
            sdot_exchange += params.omega * (sdot_cand - sdot_exchange)

        length_new = params.tube_length + s_exchange
        if length_new <= 0:
            raise MeshInversionError(f"tube length {length_new:.3e} at t={state.time:.4f}")
        p_new, v_new = _advance_fluid(state.pressure, state.velocity, params,
                                      length_old, length_new,
                                      state.piston_velocity, sdot_exchange)
        p_l_guess = p_new[-1]

    raise ConvergenceError(
        f"no convergence in {params.max_subiters} subiterations at t={state.time:.4f}"
        f" (last residual {trace[-1]:.3e})"
    )


def initial_state(params: PistonParams, seed=None) -> PistonState:
    """Rest gas plus an optional seeded smooth acoustic field (cosine modes,
    compatible with the rigid-wall ends)."""
    n2 = params.n_fluid + 2
    xi = np.linspace(0.0, 1.0, n2)
    pressure = np.zeros(n2)
    if params.init_pressure_amp > 0 and seed is not None:
        rng = np.random.default_rng(seed)
        for mode in (1, 2):
            pressure += (params.init_pressure_amp * rng.uniform(-1.0, 1.0)
                         * np.cos(np.pi * mode * xi))
    velocity = np.zeros(n2)
    return PistonState(0.0, pressure, velocity, params.s0, 0.0)


def total_energy(state: PistonState, params: PistonParams) -> float:
    """Piston kinetic + spring potential + acoustic energy (trapezoid rule)."""
    length = params.tube_length + state.displacement
    n2 = state.pressure.shape[0]
    weights = np.full(n2, length / (n2 - 1))
    weights[0] *= 0.5
    weights[-1] *= 0.5
    acoustic = np.sum(weights * (state.pressure ** 2 / (2 * params.rho0 * params.sound_speed ** 2)
                                 + 0.5 * params.rho0 * state.velocity ** 2))
    solid = (0.5 * params.piston_mass * state.piston_velocity ** 2
             + 0.5 * params.stiffness * state.displacement ** 2)
    return float(acoustic + solid)


def state_to_frame(state: PistonState, params: PistonParams) -> SystemState:
    """Emit one observation frame.

    Fluid: the interior nodes with (p - p0, v).  Solid: collocated piston
    material points at the interface position carrying the spring stress
    (restoring force per unit area).  Interface: the piston face with the
    union of both quantity sets, so c_interface = c_fluid + c_solid."""
    length = params.tube_length + state.displacement
    xi = np.linspace(0.0, 1.0, state.pressure.shape[0])
    interior = slice(1, -1)
    fluid = DomainObservation(
        (xi[interior] * length)[:, None],
        np.stack([state.pressure[interior], state.velocity[interior]], axis=1),
    )
    stress = -params.stiffness * state.displacement / params.area
    solid = DomainObservation(
        np.full((SOLID_POINT_COUNT, 1), length),
        np.full((SOLID_POINT_COUNT, 1), stress),
    )
    interface = DomainObservation(
        np.array([[length]]),
        np.array([[state.pressure[-1], state.velocity[-1], stress]]),
    )
    return SystemState(fluid, solid, interface, params.to_conditions(), state.time)


def simulate_piston(params: PistonParams, seed=None) -> Trajectory:
    """Integrate the coupled system and emit steps+1 frames."""
    state = initial_state(params, seed)
    frames = [state_to_frame(state, params)]
    for _ in range(params.steps):
        if not (np.all(np.isfinite(state.pressure)) and np.all(np.isfinite(state.velocity))):
            raise ConvergenceError(f"non-finite fluid state at t={state.time:.4f}")
        state = partitioned_step(state, params)
        frames.append(state_to_frame(state, params))
    traj_id = f"piston-{seed}" if seed is not None else "piston"
    return Trajectory(traj_id, frames, params.to_conditions())


def run_states(params: PistonParams, seed=None) -> list[PistonState]:
    """Like simulate_piston but returns raw solver states (for verification)."""
    state = initial_state(params, seed)
    states = [state.copy()]
    for _ in range(params.steps):
        state = partitioned_step(state, params)
        states.append(state.copy())
    return states


PISTON_CHANNELS = {
    "fluid": {"names": ["pressure", "velocity"], "units": ["Pa", "m/s"]},
    "solid": {"names": ["stress"], "units": ["Pa"]},
    "interface": {"names": ["pressure", "velocity", "stress"],
                  "units": ["Pa", "m/s", "Pa"]},
}


def sample_piston_params(rng: np.random.Generator, ood: bool = False,
                         **overrides) -> PistonParams:
    """Log-uniform parameter draws for dataset generation.

    The OOD regime samples the spring stiffness outside the training range.
    """
    def log_uniform(lo, hi):
        return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))

    stiffness = log_uniform(120.0, 200.0) if ood else log_uniform(20.0, 80.0)
    base = dict(
        stiffness=stiffness,
        piston_mass=log_uniform(0.3, 1.0),
        damping=log_uniform(0.02, 0.2),
        s0=log_uniform(0.02, 0.08),
        sound_speed=log_uniform(8.0, 15.0),
        init_pressure_amp=2.0,
    )
    base.update(overrides)
    return PistonParams(**base)
