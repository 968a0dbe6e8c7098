"""Differentiable planar particle simulator with kinematic disc robots.

Soft bodies follow an MPM discretization (fixed-corotated elasticity with a
von-Mises yield) on a background grid covering the unit workspace; robots
are rigid discs that push the material through grid-level Coulomb contact
and never feel it back (one-way coupling).  Dynamics are 2D; the public
state carries constant-z 3D positions/velocities so downstream data
interfaces keep d_p = 6 and d_r = 5.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import backend
from .backend import (
    N_PARAMS, P_BOUND, P_CLAMP_HI, P_CLAMP_LO, P_CUTOFF, P_DT, P_FRICTION,
    P_INV_DX, P_LAM, P_MASS, P_MU, P_N_NODES, P_RADIUS, P_SOFTNESS, P_VOL,
    P_YIELD_C,
)

Z_PLANE = 0.0


class SimulationFault(RuntimeError):
    """Non-finite state or action encountered during stepping."""

    def __init__(self, message: str, step_index: int):
        super().__init__(f"{message} (step {step_index})")
        self.step_index = step_index


class ContractViolation(ValueError):
    """Caller broke an operation precondition."""


@dataclass(frozen=True)
class SimConfig:
    """Physics and discretization parameters.

    Train-time defaults follow the hyperparameter summary (friction 1.5,
    yield stress 30, velocity limit 0.015, robot radius 0.02); time step,
    substep count, moduli and particle mass are engineering choices sized
    so a velocity-limited robot crosses a useful fraction of the workspace
    within a 40-step episode while the explicit grid update stays stable.
    """

    friction: float = 1.5
    yield_stress: float = 30.0
    velocity_limit: float = 0.015
    robot_radius: float = 0.02
    dt: float = 0.04
    grid_res: int = 32
    youngs_modulus: float = 5e3
    poisson_ratio: float = 0.2
    substeps_per_control: int = 5
    particle_mass: float = 2.0
    particle_volume: float = 4.6875e-05
    contact_softness: float = 60.0
    contact_cutoff: float = 1e-2
    boundary_cells: int = 2

    def __post_init__(self):
        for name in ("friction", "yield_stress", "velocity_limit",
                     "robot_radius", "dt", "youngs_modulus", "poisson_ratio",
                     "particle_mass", "particle_volume", "contact_softness"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"SimConfig.{name} must be positive")
        if self.grid_res < 8:
            raise ContractViolation("SimConfig.grid_res must be >= 8")
        if self.substeps_per_control < 1:
            raise ContractViolation("SimConfig.substeps_per_control must be >= 1")

    @property
    def dx(self) -> float:
        return 1.0 / self.grid_res

    @property
    def mu_lame(self) -> float:
        return self.youngs_modulus / (2.0 * (1.0 + self.poisson_ratio))

    @property
    def lam_lame(self) -> float:
        e, nu = self.youngs_modulus, self.poisson_ratio
        return e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))

    @property
    def control_dt(self) -> float:
        return self.dt * self.substeps_per_control

    def params_vector(self) -> np.ndarray:
        prm = np.zeros(N_PARAMS)
        prm[P_DT] = self.dt
        prm[P_INV_DX] = float(self.grid_res)
        prm[P_N_NODES] = float(self.grid_res + 1)
        prm[P_MASS] = self.particle_mass
        prm[P_VOL] = self.particle_volume
        prm[P_MU] = self.mu_lame
        prm[P_LAM] = self.lam_lame
        prm[P_YIELD_C] = self.yield_stress / (2.0 * self.mu_lame)
        prm[P_FRICTION] = self.friction
        prm[P_RADIUS] = self.robot_radius
        prm[P_SOFTNESS] = self.contact_softness
        prm[P_CUTOFF] = self.contact_cutoff
        prm[P_BOUND] = float(self.boundary_cells)
        prm[P_CLAMP_LO] = self.dx
        prm[P_CLAMP_HI] = 1.0 - self.dx
        return prm

    def with_particle_count(self, n_particles: int, body_area: float) -> "SimConfig":
        """Re-derive per-particle volume from the body it discretizes."""
        return replace(self, particle_volume=body_area / n_particles)


@dataclass
class ParticleField:
    """Soft-body state: constant-z 3D positions/velocities, 2x2 deformation."""

    positions: np.ndarray       # (N, 3), z == Z_PLANE
    velocities: np.ndarray      # (N, 3), v_z == 0
    deformation: np.ndarray     # (N, 2, 2)
    mass: float

    @classmethod
    def from_xy(cls, xy: np.ndarray, mass: float) -> "ParticleField":
        n = xy.shape[0]
        pos = np.full((n, 3), Z_PLANE)
        pos[:, :2] = xy
        vel = np.zeros((n, 3))
        defo = np.tile(np.eye(2), (n, 1, 1))
        return cls(pos, vel, defo, mass)

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def copy(self) -> "ParticleField":
        return ParticleField(self.positions.copy(), self.velocities.copy(),
                             self.deformation.copy(), self.mass)


@dataclass
class RobotSet:
    """Rigid disc robots: constant-z positions, planar commanded velocities."""

    positions: np.ndarray   # (R, 3), z == Z_PLANE
    velocities: np.ndarray  # (R, 2)
    radius: float

    @classmethod
    def from_xy(cls, xy: np.ndarray, radius: float) -> "RobotSet":
        r = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        pos = np.full((r.shape[0], 3), Z_PLANE)
        pos[:, :2] = r
        return cls(pos, np.zeros((r.shape[0], 2)), radius)

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def copy(self) -> "RobotSet":
        return RobotSet(self.positions.copy(), self.velocities.copy(), self.radius)


@dataclass
class SimState:
    particles: ParticleField
    robots: RobotSet
    step_index: int = 0

    def copy(self) -> "SimState":
        out = SimState(self.particles.copy(), self.robots.copy(), self.step_index)
        aff = getattr(self, "_affine", None)
        if aff is not None:
            out._affine = aff.copy()
        return out


@dataclass
class ActionPlan:
    """T x N_r x 2 velocity commands (m/s), optimized by the planners."""

    commands: np.ndarray

    def __post_init__(self):
        self.commands = np.asarray(self.commands, dtype=np.float64)
        if self.commands.ndim != 3 or self.commands.shape[2] != 2:
            raise ContractViolation("ActionPlan.commands must be T x N_r x 2")

    @property
    def horizon(self) -> int:
        return self.commands.shape[0]

    @property
    def n_robots(self) -> int:
        return self.commands.shape[1]


@dataclass
class _StepRecord:
    sub_inputs: list            # per substep: (x, v, F, C)
    robot_start: np.ndarray     # (R, 2) pose before the step
    command: np.ndarray         # clamped (R, 2)
    raw_action: np.ndarray      # unclamped (R, 2)


@dataclass
class Tape:
    """Per-substep particle-state checkpoints for reverse-mode replay."""

    config: SimConfig
    steps: list = field(default_factory=list)
    final_state: SimState | None = None


def _check_finite(state: SimState, actions: np.ndarray, step_index: int) -> None:
    if not np.all(np.isfinite(actions)):
        raise SimulationFault("non-finite action", step_index)
    if not (np.all(np.isfinite(state.particles.positions))
            and np.all(np.isfinite(state.particles.velocities))
            and np.all(np.isfinite(state.particles.deformation))
            and np.all(np.isfinite(state.robots.positions))):
        raise SimulationFault("non-finite state", step_index)


def step(state: SimState, actions: np.ndarray, cfg: SimConfig,
         tape: Tape | None = None) -> SimState:
    """Advance one control step (substeps_per_control MPM substeps).

    Robots move kinematically by the clamped action; particles never push
    back.  Raises SimulationFault on non-finite inputs.
    """
    actions = np.asarray(actions, dtype=np.float64).reshape(-1, 2)
    if actions.shape[0] != state.robots.count:
        raise ContractViolation("action row count != robot count")
    _check_finite(state, actions, state.step_index)

    prm = cfg.params_vector()
    lim = cfg.velocity_limit
    u = np.clip(actions, -lim, lim)

    x = state.particles.positions[:, :2].copy()
    v = state.particles.velocities[:, :2].copy()
    F = state.particles.deformation.copy()
    C = _carry_affine(state)
    r = state.robots.positions[:, :2].copy()

    sub_inputs = [] if tape is not None else None
    for _ in range(cfg.substeps_per_control):
        if sub_inputs is not None:
            sub_inputs.append((x.copy(), v.copy(), F.copy(), C.copy()))
        r = r + u * cfg.dt
        x, v, F, C = backend.substep_forward(x, v, F, C, r, u, prm)

    out = state.copy()
    out.particles.positions[:, :2] = x
    out.particles.velocities[:, :2] = v
    out.particles.deformation = F
    _store_affine(out, C)
    out.robots.positions[:, :2] = r
    out.robots.velocities = u
    out.step_index = state.step_index + 1

    if tape is not None:
        tape.steps.append(_StepRecord(sub_inputs, state.robots.positions[:, :2].copy(),
                                      u, actions.copy()))
        tape.final_state = out
    return out


# The APIC affine field is part of the substep state but not of the public
# ParticleField contract; it rides along on the state object.
def _carry_affine(state: SimState) -> np.ndarray:
    aff = getattr(state, "_affine", None)
    if aff is None:
        return np.zeros((state.particles.count, 2, 2))
    return aff.copy()


def _store_affine(state: SimState, C: np.ndarray) -> None:
    state._affine = C


def rollout(state0: SimState, plan: ActionPlan, cfg: SimConfig,
            tape: Tape | None = None) -> list[SimState]:
    """Serially compose `step`; trajectory[0] is state0 (length T+1)."""
    if plan.horizon and plan.n_robots != state0.robots.count:
        raise ContractViolation("plan robot count != state robot count")
    traj = [state0]
    cur = state0
    for t in range(plan.horizon):
        cur = step(cur, plan.commands[t], cfg, tape=tape)
        traj.append(cur)
    return traj


def backward(tape: Tape, loss_eval, trajectory: list[SimState]) -> np.ndarray:
    """Accumulate d(sum_t L_t)/d(actions) through every recorded substep.

    loss_eval must expose grads(state) -> (value, dL/dx (N,2), dL/dr (R,2));
    losses are evaluated on the post-step states t = 1..T.
    """
    if not tape.steps or tape.steps[0].sub_inputs is None:
        raise ContractViolation("trajectory was not recorded with a tape")
    cfg = tape.config
    prm = cfg.params_vector()
    T = len(tape.steps)
    n = tape.steps[0].sub_inputs[0][0].shape[0]
    R = tape.steps[0].command.shape[0]

    gA = np.zeros((T, R, 2))
    gx = np.zeros((n, 2))
    gv = np.zeros((n, 2))
    gF = np.zeros((n, 2, 2))
    gC = np.zeros((n, 2, 2))
    gr = np.zeros((R, 2))

    lim = cfg.velocity_limit
    for t in range(T - 1, -1, -1):
        rec = tape.steps[t]
        _, dLdx, dLdr = loss_eval.grads(trajectory[t + 1])
        gx += dLdx
        gr += dLdr
        gu = np.zeros((R, 2))
        S = len(rec.sub_inputs)
        for s in range(S - 1, -1, -1):
            x, v, F, C = rec.sub_inputs[s]
            rpos = rec.robot_start + rec.command * (cfg.dt * (s + 1))
            gx, gv, gF, gC, grp, grv = backend.substep_backward(
                x, v, F, C, rpos, rec.command, prm, gx, gv, gF, gC)
            gr += grp
            gu += grv + cfg.dt * gr
        free = np.abs(rec.raw_action) < lim
        gA[t] = np.where(free, gu, 0.0)
    return gA
