"""Experiment suites: method comparison, generalization sweeps, robot-count
variation, inference-latency scaling and the kidnapping study.

Every suite reduces its episodes with the same summary routine and emits an
ExperimentReport whose rows are sorted by (method, param, episode), so a
report regenerates identically from its (config, seed) pair regardless of
worker scheduling.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import gmp, mppi, scene
from .diffsim import SimConfig, SimState, step as sim_step
from .policy import (ActionSmoother, AttentionPolicy, MlpPolicy,
                     build_observation, downsample_particles,
                     nearest_neighbors, visibility_mask)
from .records import substream
from .scene import GoalSpec
from .tasks import Task


@dataclass
class ExperimentReport:
    experiment: str
    rows: list = field(default_factory=list)   # dicts, one per episode
    provenance: dict = field(default_factory=dict)

    def add(self, method, param, episode, reward, time_per_step,
            goal_id=-1, note="", **extra):
        row = {"experiment": self.experiment, "method": method,
               "param": param, "episode": episode, "goal_id": goal_id,
               "reward": reward, "time_per_step": time_per_step,
               "note": note}
        row.update(extra)
        self.rows.append(row)

    def finalize(self):
        self.rows.sort(key=lambda r: (r["method"], str(r["param"]),
                                      r["episode"]))
        return self

    def summary(self) -> dict:
        return summarize(self.rows)

    def to_csv(self, path) -> None:
        cols = ["experiment", "method", "param", "episode", "reward",
                "time_per_step"]
        with open(path, "w", encoding="utf-8") as f:
            f.write(",".join(cols) + "\n")
            for r in self.rows:
                f.write(",".join(str(r[c]) for c in cols) + "\n")


def summarize(rows) -> dict:
    """Shared reward/time statistics, keyed by (method, param)."""
    out = {}
    keys = sorted({(r["method"], str(r["param"])) for r in rows})
    for key in keys:
        sel = [r for r in rows
               if (r["method"], str(r["param"])) == key and not r["note"]]
        rewards = np.array([r["reward"] for r in sel], dtype=np.float64)
        times = np.array([r["time_per_step"] for r in sel], dtype=np.float64)
        out[key] = {
            "n": len(sel),
            "reward_mean": float(rewards.mean()) if len(sel) else float("nan"),
            "reward_std": float(rewards.std()) if len(sel) else float("nan"),
            "time_mean": float(times.mean()) if len(sel) else float("nan"),
            "time_std": float(times.std()) if len(sel) else float("nan"),
        }
    return out


@dataclass
class EpisodeOutcome:
    reward: float
    time_per_step: float
    rewards_per_step: list = field(default_factory=list)
    attn_self: list = field(default_factory=list)     # per step, per robot
    attn_neighbor: list = field(default_factory=list)
    nn_trace: list = field(default_factory=list)


def run_policy_episode(task: Task, goal: GoalSpec, policy, n_r: int,
                       horizon: int, smooth_window: int = 5,
                       n_down: int = 102, ds_seed: int = 0,
                       sim_cfg: SimConfig | None = None,
                       kidnap_step: int | None = None,
                       kidnap_victim: int = 0,
                       collect_attention: bool = False) -> EpisodeOutcome:
    """Closed-loop episode: the policy is queried every step and its
    output smoothed over the latest `smooth_window` commands.

    Kidnapping teleports the victim to a workspace corner at kidnap_step,
    zeroes its commands afterwards, and leaves its observation row live.
    """
    cfg = sim_cfg if sim_cfg is not None else task.sim_cfg
    state = task.initial_state(n_r)
    idx = downsample_particles(state.particles.positions, n_down, ds_seed)
    s0 = state.particles.positions.copy()
    smoother = ActionSmoother(smooth_window)
    out = EpisodeOutcome(0.0, 0.0)
    decide = 0.0
    for t in range(horizon):
        if kidnap_step is not None and t == kidnap_step:
            state.robots.positions[kidnap_victim, :2] = (0.08, 0.08)
        t0 = time.perf_counter()
        obs = build_observation(state, goal, idx)
        if hasattr(policy, "act_mlp"):
            actions = policy.act_mlp(obs.reshape(-1))
        else:
            nn_idx = nearest_neighbors(state.robots.positions[:, :2])
            mask = visibility_mask(nn_idx)
            actions, attn = policy.act(obs, mask)
            if collect_attention:
                avg = attn.mean(axis=(0, 1))  # (N, N) over layers and heads
                rng_i = np.arange(n_r)
                out.attn_self.append(avg[rng_i, rng_i].tolist())
                out.attn_neighbor.append(avg[rng_i, nn_idx].tolist())
                out.nn_trace.append(nn_idx.tolist())
        actions = smoother.smooth(actions)
        if kidnap_step is not None and t >= kidnap_step:
            actions = actions.copy()
            actions[kidnap_victim] = 0.0
        decide += time.perf_counter() - t0
        state = sim_step(state, actions, cfg)
        out.rewards_per_step.append(
            scene.reward(state.particles.positions, s0,
                         goal.goal_particles, task.lattice))
    out.reward = out.rewards_per_step[-1]
    out.time_per_step = decide / horizon
    return out


def run_plan_episode(task: Task, goal: GoalSpec, method: str, n_r: int,
                     horizon: int, seed: int,
                     gmp_cfg: gmp.GmpConfig | None = None,
                     mppi_cfg: mppi.MppiConfig | None = None,
                     sim_cfg: SimConfig | None = None) -> EpisodeOutcome:
    """Open-loop episode for gmp / mppi / random; plans once, executes."""
    cfg = sim_cfg if sim_cfg is not None else task.sim_cfg
    state0 = task.initial_state(n_r)
    t0 = time.perf_counter()
    if method == "gmp":
        pc = gmp_cfg if gmp_cfg is not None else gmp.GmpConfig()
        plan, _ = gmp.plan(state0, goal, cfg, replace(pc, seed=seed),
                           horizon=horizon)
        commands = plan.commands
    elif method == "mppi":
        mc = mppi_cfg if mppi_cfg is not None else mppi.MppiConfig()
        plan, _ = mppi.mppi_plan(state0, goal, cfg, replace(mc, seed=seed),
                                 horizon=horizon)
        commands = plan.commands
    elif method == "random":
        rng = substream(seed, "random-plan")
        commands = rng.uniform(-cfg.velocity_limit, cfg.velocity_limit,
                               (horizon, n_r, 2))
    else:
        raise ValueError(f"unknown planning method {method!r}")
    plan_time = time.perf_counter() - t0

    state = state0
    s0 = state0.particles.positions.copy()
    out = EpisodeOutcome(0.0, plan_time / horizon)
    for t in range(horizon):
        state = sim_step(state, commands[t], cfg)
        out.rewards_per_step.append(
            scene.reward(state.particles.positions, s0,
                         goal.goal_particles, task.lattice))
    out.reward = out.rewards_per_step[-1]
    return out


def compare_methods(task: Task, methods: dict, goals: list[GoalSpec],
                    n_r: int, horizon: int, seed: int = 0) -> ExperimentReport:
    """Head-to-head over a shared goal set.

    `methods` maps a name to a runner(goal, goal_id, episode_seed) ->
    EpisodeOutcome; crashes are recorded as failed episodes and excluded
    from the summary with a note.
    """
    report = ExperimentReport("compare_methods")
    for name in sorted(methods):
        runner = methods[name]
        for gi, goal in enumerate(goals):
            ep_seed = int(substream(seed, "compare", name, gi).integers(2**31))
            try:
                outcome = runner(goal, gi, ep_seed)
                report.add(name, "", gi, outcome.reward,
                           outcome.time_per_step, goal_id=gi)
            except Exception as exc:  # noqa: BLE001 - recorded, not hidden
                report.add(name, "", gi, float("nan"), float("nan"),
                           goal_id=gi, note=f"failed: {exc}")
    return report.finalize()


TEST_RANGES = {
    "friction": (1.0, 2.5),
    "yield_stress": (15.0, 45.0),
    "velocity_limit": (0.005, 0.02),
    "robot_radius": (0.02, 0.035),
}


def generalization_sweep(task: Task, policies: dict, goals: list[GoalSpec],
                         n_r: int, horizon: int, seed: int = 0,
                         param_ranges: dict | None = None,
                         smooth_window: int = 5) -> ExperimentReport:
    """One physics parameter varied per sweep, others at train values."""
    ranges = param_ranges if param_ranges is not None else TEST_RANGES
    report = ExperimentReport("generalization")
    for param in sorted(ranges):
        lo, hi = ranges[param]
        for name in sorted(policies):
            for gi, goal in enumerate(goals):
                rng = substream(seed, "sweep", param, name, gi)
                value = float(rng.uniform(lo, hi))
                cfg = replace(task.sim_cfg, **{param: value})
                try:
                    outcome = run_policy_episode(
                        task, goal, policies[name], n_r, horizon,
                        smooth_window=smooth_window, sim_cfg=cfg)
                    report.add(name, param, gi, outcome.reward,
                               outcome.time_per_step, goal_id=gi,
                               value=value)
                except Exception as exc:  # noqa: BLE001
                    report.add(name, param, gi, float("nan"), float("nan"),
                               goal_id=gi, note=f"failed: {exc}")
    return report.finalize()


def robot_count_eval(task: Task, policy: AttentionPolicy, n_r_list,
                     goals: list[GoalSpec], horizon: int,
                     smooth_window: int = 5) -> ExperimentReport:
    """Evaluate one trained attention policy at several robot counts."""
    if not isinstance(policy, AttentionPolicy):
        raise TypeError("robot-count generalization requires the attention "
                        "architecture (the MLP rejects other robot counts)")
    report = ExperimentReport("robot_count")
    for n_r in n_r_list:
        for gi, goal in enumerate(goals):
            outcome = run_policy_episode(task, goal, policy, n_r, horizon,
                                         smooth_window=smooth_window)
            report.add("bc_attention", n_r, gi, outcome.reward,
                       outcome.time_per_step, goal_id=gi)
    return report.finalize()


def kidnap_study(task: Task, policy: AttentionPolicy, goal: GoalSpec,
                 n_r: int, t_kidnap: int, victim: int, horizon: int,
                 seeds=(0, 1, 2, 3, 4), smooth_window: int = 5
                 ) -> tuple[ExperimentReport, list[dict]]:
    """Teleport-and-zero kidnapping with per-step attention traces.

    Returns the report plus one trace dict per seed with the mean
    neighbor-block attention before/after the kidnap instant.
    """
    if not 0 < t_kidnap < horizon:
        raise ValueError("kidnap step must lie strictly inside the episode")
    report = ExperimentReport("kidnap")
    traces = []
    for si, seed in enumerate(seeds):
        outcome = run_policy_episode(
            task, goal, policy, n_r, horizon, smooth_window=smooth_window,
            ds_seed=seed, kidnap_step=t_kidnap, kidnap_victim=victim,
            collect_attention=True)
        nb = np.array(outcome.attn_neighbor)  # (T, N)
        before = float(nb[max(0, t_kidnap - 10):t_kidnap].mean())
        after = float(nb[t_kidnap:t_kidnap + 10].mean())
        report.add("kidnap", seed, si, outcome.reward,
                   outcome.time_per_step, neighbor_before=before,
                   neighbor_after=after)
        traces.append({
            "seed": seed, "t_kidnap": t_kidnap, "victim": victim,
            "neighbor_before": before, "neighbor_after": after,
            "attn_self": outcome.attn_self,
            "attn_neighbor": outcome.attn_neighbor,
            "nn_trace": outcome.nn_trace,
            "rewards": outcome.rewards_per_step,
        })
    return report.finalize(), traces


def timing_scaling(policy, n_r_list, obs_dim: int, n_reps: int = 30,
                   seed: int = 0) -> ExperimentReport:
    """Median per-step inference latency on dummy observations."""
    rng = substream(seed, "timing")
    report = ExperimentReport("timing")
    for n_r in n_r_list:
        obs = rng.uniform(-0.5, 0.5, (n_r, obs_dim))
        nn_idx = nearest_neighbors(rng.uniform(0.0, 1.0, (n_r, 2)))
        mask = visibility_mask(nn_idx)
        policy.act(obs, mask)  # warmup
        times = []
        for _ in range(n_reps):
            t0 = time.perf_counter()
            policy.act(obs, mask)
            times.append(time.perf_counter() - t0)
        report.add("bc_attention", n_r, 0, float("nan"),
                   float(np.median(times)))
    return report.finalize()


def timing_mlp(policy: MlpPolicy, n_reps: int = 30, seed: int = 0) -> float:
    rng = substream(seed, "timing-mlp")
    obs = rng.uniform(-0.5, 0.5, policy.n_robots * policy.obs_dim)
    policy.act_mlp(obs)
    times = []
    for _ in range(n_reps):
        t0 = time.perf_counter()
        policy.act_mlp(obs)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))
