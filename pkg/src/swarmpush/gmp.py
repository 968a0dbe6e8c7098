"""Gradient-based motion planner: Adam on the per-step loss summed over a
differentiable rollout.

Commands are optimized in velocity-limit-normalized units (u in [-1, 1],
command = u * velocity_limit) and projected back into the box after every
update, so the Table-style learning rate 0.1 moves each coordinate by about
a tenth of the admissible range per iteration.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .diffsim import (ActionPlan, ContractViolation, SimConfig, SimState,
                      Tape, backward, rollout)
from .scene import GoalSpec, Lattice, StepLoss


class PlannerDiverged(RuntimeError):
    """Non-finite loss during optimization; carries a diagnostic snapshot."""

    def __init__(self, iteration: int, loss_history):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration
        self.loss_history = list(loss_history)


@dataclass(frozen=True)
class GmpConfig:
    learning_rate: float = 0.1
    iterations: int = 50
    coeffs: tuple[float, float, float] = (500.0, 500.0, 1.0)
    init_scale: float | None = None  # defaults to velocity_limit / 3
    seed: int = 0
    lattice_res: int = 64
    knot_every: int = 5  # command knots, linearly interpolated (1 = per step)

    def __post_init__(self):
        if self.iterations < 0:
            raise ContractViolation("GmpConfig.iterations must be >= 0")
        if self.knot_every < 1:
            raise ContractViolation("GmpConfig.knot_every must be >= 1")


class _Adam:
    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.b1 = beta1
        self.b2 = beta2
        self.eps = eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, g):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return -self.lr * mh / (np.sqrt(vh) + self.eps)


def knot_weights(horizon: int, knot_every: int) -> np.ndarray:
    """(T, K) linear-interpolation weights from command knots to steps.

    Knots sit every `knot_every` steps; a convex combination of bounded
    knots keeps every interpolated command inside the velocity box, and the
    resulting plans vary slowly enough to distill into a policy."""
    if knot_every == 1:
        return np.eye(horizon)
    n_seg = int(np.ceil((horizon - 1) / knot_every)) if horizon > 1 else 1
    K = n_seg + 1
    W = np.zeros((horizon, K))
    for t in range(horizon):
        pos = t / knot_every
        k = min(int(pos), K - 2)
        frac = pos - k
        W[t, k] = 1.0 - frac
        W[t, k + 1] = frac
    return W


def _evaluate(state0, z, W, goal_loss, sim_cfg, with_grad):
    commands = np.einsum("tk,krc->trc", W, z) * sim_cfg.velocity_limit
    plan = ActionPlan(commands)
    tape = Tape(sim_cfg) if with_grad else None
    traj = rollout(state0, plan, sim_cfg, tape=tape)
    total = sum(goal_loss.value(s) for s in traj[1:])
    if not with_grad:
        return total, None
    g_cmd = backward(tape, goal_loss, traj)
    gz = np.einsum("tk,trc->krc", W, g_cmd) * sim_cfg.velocity_limit
    return total, gz


def plan(state0: SimState, goal: GoalSpec, sim_cfg: SimConfig,
         cfg: GmpConfig, horizon: int = 40) -> tuple[ActionPlan, list[float]]:
    """Optimize a T x N_r x 2 plan; returns the best-loss iterate.

    loss_history[0] is the initial plan's loss, one entry per iteration
    after that.  Asserts the first Adam update is a descent direction.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x6E9]))
    lim = sim_cfg.velocity_limit
    scale = cfg.init_scale if cfg.init_scale is not None else lim / 3.0
    W = knot_weights(horizon, cfg.knot_every)
    z = np.clip(rng.normal(0.0, scale / lim,
                           (W.shape[1], state0.robots.count, 2)), -1.0, 1.0)
    goal_loss = StepLoss(goal, sim_cfg, cfg.coeffs, Lattice(cfg.lattice_res))

    loss0, _ = _evaluate(state0, z, W, goal_loss, sim_cfg, with_grad=False)
    history = [float(loss0)]
    if not np.isfinite(loss0):
        raise PlannerDiverged(0, history)
    best_z = z.copy()
    best_loss = loss0

    opt = _Adam(z.shape, cfg.learning_rate)
    for it in range(cfg.iterations):
        _, g = _evaluate(state0, z, W, goal_loss, sim_cfg, with_grad=True)
        if not np.all(np.isfinite(g)):
            raise PlannerDiverged(it, history)
        upd = opt.step(g)
        if it == 0 and float((upd * g).sum()) > 0.0:
            raise AssertionError("first Adam update is not a descent direction")
        z = np.clip(z + upd, -1.0, 1.0)
        loss, _ = _evaluate(state0, z, W, goal_loss, sim_cfg, with_grad=False)
        if not np.isfinite(loss):
            raise PlannerDiverged(it + 1, history)
        history.append(float(loss))
        if loss < best_loss:
            best_loss = loss
            best_z = z.copy()
    commands = np.einsum("tk,krc->trc", W, best_z) * lim
    return ActionPlan(commands), history


def replan_receding(state: SimState, goal: GoalSpec, sim_cfg: SimConfig,
                    cfg: GmpConfig, horizon: int) -> tuple[np.ndarray, float]:
    """Plan over `horizon`, return (first action slice, wall seconds)."""
    t0 = time.perf_counter()
    p, _ = plan(state, goal, sim_cfg, cfg, horizon=horizon)
    return p.commands[0].copy(), time.perf_counter() - t0
