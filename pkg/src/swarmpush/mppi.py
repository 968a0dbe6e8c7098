"""Model Predictive Path Integral baseline on forward-only rollouts.

Gaussian noise is drawn in velocity-limit-normalized action units (raw
std 1 would saturate the command clamp) and the temperature defaults to
the sampled-cost standard deviation of the first stage, which makes the
exponential re-weighting scale-free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffsim import ActionPlan, ContractViolation, SimConfig, SimState, rollout
from .scene import GoalSpec, Lattice, StepLoss


class MppiDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class MppiConfig:
    n_samples: int = 1200
    horizon: int = 100
    n_stages: int = 30
    noise_mean: float = 0.0
    noise_std: float = 1.0
    temperature: float | None = None
    seed: int = 0
    coeffs: tuple[float, float, float] = (500.0, 500.0, 1.0)
    lattice_res: int = 32

    def __post_init__(self):
        if self.n_samples < 1:
            raise ContractViolation("MppiConfig.n_samples must be >= 1")
        if self.temperature is not None and self.temperature <= 0:
            raise ContractViolation("MppiConfig.temperature must be positive")


def _plan_cost(state0, z, goal_loss, sim_cfg):
    plan = ActionPlan(z * sim_cfg.velocity_limit)
    traj = rollout(state0, plan, sim_cfg)
    return sum(goal_loss.value(s) for s in traj[1:])


def mppi_plan(state0: SimState, goal: GoalSpec, sim_cfg: SimConfig,
              cfg: MppiConfig, horizon: int | None = None
              ) -> tuple[ActionPlan, list[dict]]:
    """Iteratively re-weight noise-perturbed plans by exponentiated
    negative cost; returns the final mean plan (clamped) and per-stage
    cost records."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x3BB1]))
    T = cfg.horizon if horizon is None else horizon
    R = state0.robots.count
    goal_loss = StepLoss(goal, sim_cfg, cfg.coeffs, Lattice(cfg.lattice_res))

    z = np.zeros((T, R, 2))
    temperature = cfg.temperature
    history = []
    for stage in range(cfg.n_stages):
        noise = rng.normal(cfg.noise_mean, cfg.noise_std,
                           (cfg.n_samples, T, R, 2))
        samples = np.clip(z[None] + noise, -1.0, 1.0)
        costs = np.array([_plan_cost(state0, samples[i], goal_loss, sim_cfg)
                          for i in range(cfg.n_samples)])
        finite = np.isfinite(costs)
        if not finite.any():
            raise MppiDiverged(f"all {cfg.n_samples} rollouts non-finite "
                               f"at stage {stage}")
        costs = np.where(finite, costs, np.inf)
        if temperature is None:
            spread = float(costs[finite].std())
            temperature = spread if spread > 0 else 1.0
        w = np.exp(-(costs - costs.min()) / temperature)
        w = w / w.sum()
        z = np.clip(np.einsum("s,stra->tra", w, samples), -1.0, 1.0)
        history.append({
            "stage": stage,
            "best_cost": float(costs.min()),
            "mean_cost": float(costs[finite].mean()),
            "weight_sum": float(w.sum()),
            "temperature": float(temperature),
        })
    return ActionPlan(z * sim_cfg.velocity_limit), history
