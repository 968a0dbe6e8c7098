"""Demonstration collection, behavior cloning and the PPO baseline.

Demos are replayable: a stored record keeps the generative scene/goal
parameters plus the planner's actions, and observations are rebuilt
deterministically by rolling the actions back through the simulator (the
same replay doubles as the dataset determinism oracle).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from . import gmp, policy as pol, scene
from .diffsim import SimConfig, step as sim_step
from .nnet import Adam, TrainCurve, mse
from .policy import (AttentionPolicy, AttentionPolicyNet, MlpNet, MlpPolicy,
                     build_observation, downsample_particles,
                     nearest_neighbors, observation_dim, visibility_mask)
from .records import derive_seed, substream
from .scene import GoalSpec, Lattice
from .tasks import Task


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint=None, curve=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.curve = curve


@dataclass
class Demo:
    """One teacher episode: goal, initial scene, per-step (obs, action)."""

    goal_curve: tuple
    goal_id: int
    horizon: int
    n_robots: int
    downsample_seed: int
    gmp_seed: int
    actions: np.ndarray            # (T, R, 2)
    observations: np.ndarray       # (T, R, d_in)
    rewards: list                  # r(s_t) per step, evaluation metric
    final_reward: float
    loss_history: list = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "goal_curve": list(self.goal_curve),
            "goal_id": self.goal_id,
            "horizon": self.horizon,
            "n_robots": self.n_robots,
            "downsample_seed": self.downsample_seed,
            "gmp_seed": self.gmp_seed,
            "actions": self.actions.tolist(),
            "final_reward": self.final_reward,
        }


@dataclass
class DatasetManifest:
    n_demos: int
    n_goals: int
    horizons: tuple
    n_robots: int
    seed: int
    sim_config_hash: str
    skipped: int = 0

    def to_dict(self) -> dict:
        return {
            "n_demos": self.n_demos, "n_goals": self.n_goals,
            "horizons": list(self.horizons), "n_robots": self.n_robots,
            "seed": self.seed, "sim_config_hash": self.sim_config_hash,
            "skipped": self.skipped,
        }


def _sim_hash(sim_cfg: SimConfig) -> str:
    import hashlib
    return hashlib.sha256(repr(sim_cfg).encode()).hexdigest()[:16]


def replay_demo(task: Task, goal: GoalSpec, actions: np.ndarray,
                n_down: int, ds_seed: int):
    """Roll recorded actions through the sim; returns (observations,
    per-step rewards, final reward)."""
    state = task.initial_state(actions.shape[1])
    idx = downsample_particles(state.particles.positions, n_down, ds_seed)
    s0 = state.particles.positions.copy()
    obs = []
    rewards = []
    for t in range(actions.shape[0]):
        obs.append(build_observation(state, goal, idx))
        state = sim_step(state, actions[t], task.sim_cfg)
        rewards.append(scene.reward(state.particles.positions, s0,
                                    goal.goal_particles, task.lattice))
    return np.stack(obs), rewards, rewards[-1]


def collect(task: Task, goals: list[GoalSpec], horizons, n_r: int,
            gmp_cfg: gmp.GmpConfig, n_demos: int, root_seed: int,
            n_down: int = pol.N_DOWNSAMPLED, progress=None
            ) -> tuple[list[Demo], DatasetManifest]:
    """Run the teacher planner over (goal, horizon) pairs and record
    replayable demos; planner failures are skipped and counted."""
    if not goals:
        raise ValueError("collect requires a nonempty goal list")
    horizons = tuple(horizons)
    demos = []
    skipped = 0
    for i in range(n_demos):
        goal_id = i % len(goals)
        horizon = horizons[(i // len(goals)) % len(horizons)]
        seed_i = derive_seed(root_seed, "collect", i)
        cfg_i = gmp.GmpConfig(
            learning_rate=gmp_cfg.learning_rate, iterations=gmp_cfg.iterations,
            coeffs=gmp_cfg.coeffs, init_scale=gmp_cfg.init_scale,
            seed=seed_i, lattice_res=gmp_cfg.lattice_res)
        state0 = task.initial_state(n_r)
        try:
            plan, hist = gmp.plan(state0, goals[goal_id], task.sim_cfg,
                                  cfg_i, horizon=horizon)
        except gmp.PlannerDiverged:
            skipped += 1
            continue
        ds_seed = derive_seed(root_seed, "downsample", i)
        obs, rewards, final_r = replay_demo(task, goals[goal_id],
                                            plan.commands, n_down, ds_seed)
        demos.append(Demo(goals[goal_id].cubic_coeffs, goal_id, horizon, n_r,
                          ds_seed, seed_i, plan.commands.copy(), obs,
                          rewards, final_r, hist))
        if progress is not None:
            progress(i, n_demos, final_r)
    manifest = DatasetManifest(len(demos), len(goals), horizons, n_r,
                               root_seed, _sim_hash(task.sim_cfg), skipped)
    return demos, manifest


def save_dataset(path_prefix, demos: list[Demo], manifest: DatasetManifest,
                 cfg_hash: str) -> None:
    from .records import RecordWriter
    with open(f"{path_prefix}_manifest.json", "w", encoding="utf-8") as f:
        json.dump({"config_sha256": cfg_hash, **manifest.to_dict()}, f,
                  indent=2, sort_keys=True)
        f.write("\n")
    with RecordWriter(f"{path_prefix}_demos.jsonl", "demos", cfg_hash) as w:
        for demo in demos:
            w.write(demo.to_record())


def load_dataset(path_prefix, task: Task, n_down: int = pol.N_DOWNSAMPLED
                 ) -> tuple[list[Demo], DatasetManifest]:
    """Rebuild demos (observations included) by deterministic replay."""
    from .records import read_records
    with open(f"{path_prefix}_manifest.json", "r", encoding="utf-8") as f:
        m = json.load(f)
    manifest = DatasetManifest(m["n_demos"], m["n_goals"], tuple(m["horizons"]),
                               m["n_robots"], m["seed"], m["sim_config_hash"],
                               m["skipped"])
    _, recs = read_records(f"{path_prefix}_demos.jsonl", expect_kind="demos")
    demos = []
    for rec in recs:
        goal = task.goal_from_curve(tuple(rec["goal_curve"]))
        actions = np.asarray(rec["actions"])
        obs, rewards, final_r = replay_demo(task, goal, actions, n_down,
                                            rec["downsample_seed"])
        demos.append(Demo(tuple(rec["goal_curve"]), rec["goal_id"],
                          rec["horizon"], rec["n_robots"],
                          rec["downsample_seed"], rec["gmp_seed"],
                          actions, obs, rewards, final_r))
    return demos, manifest


# ---------------------------------------------------------------------------
# Behavior cloning
# ---------------------------------------------------------------------------

def _split_by_goal(demos, val_frac, rng):
    """Stratified 90/10 split on goal configs: when a goal has several
    demos one of them validates, otherwise whole goals are held out."""
    by_goal = {}
    for i, d in enumerate(demos):
        by_goal.setdefault(d.goal_id, []).append(i)
    train_idx, val_idx = [], []
    multi = all(len(v) > 1 for v in by_goal.values())
    if multi:
        for goal_id in sorted(by_goal):
            idx = by_goal[goal_id]
            rng.shuffle(idx)
            n_val = max(1, int(round(val_frac * len(idx))))
            val_idx.extend(idx[:n_val])
            train_idx.extend(idx[n_val:])
    else:
        goal_ids = sorted(by_goal)
        rng.shuffle(goal_ids)
        n_val = max(2, int(round(val_frac * len(goal_ids))))
        n_val = min(n_val, max(1, len(goal_ids) - 1))
        for goal_id in goal_ids[:n_val]:
            val_idx.extend(by_goal[goal_id])
        for goal_id in goal_ids[n_val:]:
            train_idx.extend(by_goal[goal_id])
    return sorted(train_idx), sorted(val_idx)


def bc_fit(demos: list[Demo], arch: str, epochs: int, lr: float, batch: int,
           seed: int = 0, patience: int = 10, val_frac: float = 0.1,
           sim_cfg: SimConfig | None = None, policy_cfg: dict | None = None,
           task: Task | None = None, reward_select_every: int = 0
           ) -> tuple[object, TrainCurve]:
    """Distill demos into a policy by MSE regression; returns the
    best-validation checkpoint and the loss curves.

    With reward_select_every > 0 (and a task), the checkpoint is chosen by
    closed-loop reward on the validation split's goals instead of by
    validation MSE; MSE selection is a poor proxy for control quality on
    small desk datasets."""
    if not demos:
        raise ValueError("bc_fit requires a nonempty dataset")
    if arch not in ("attention", "mlp"):
        raise ValueError(f"unknown arch {arch!r}")
    n_r = demos[0].n_robots
    if any(d.n_robots != n_r for d in demos):
        if arch == "mlp":
            raise ValueError("mlp architecture requires a constant robot count")
    d_in = demos[0].observations.shape[2]
    vlim = (sim_cfg or SimConfig()).velocity_limit
    pcfg = policy_cfg or {}
    rng = substream(seed, "bc", arch)

    train_idx, val_idx = _split_by_goal(demos, val_frac, rng)
    obs_tr = np.concatenate([demos[i].observations for i in train_idx])
    act_tr = np.concatenate([demos[i].actions for i in train_idx]) / vlim
    obs_va = np.concatenate([demos[i].observations for i in val_idx])
    act_va = np.concatenate([demos[i].actions for i in val_idx]) / vlim

    if arch == "attention":
        masks_tr = np.concatenate([_replay_masks(demos[i]) for i in train_idx])
        masks_va = np.concatenate([_replay_masks(demos[i]) for i in val_idx])
        net = AttentionPolicyNet(
            d_in, d_feat=pcfg.get("d_feat", 128),
            n_heads=pcfg.get("n_heads", 4),
            d_k=pcfg.get("d_feat", 128) // pcfg.get("n_heads", 4),
            n_layers=pcfg.get("n_layers", 2), seed=seed,
            scale_by_dk=pcfg.get("scale_by_dk", False),
            capacity=pcfg.get("capacity", 128))

        def fwd(o, m):
            y, _ = net.forward(o, m)
            return y

        def predict(o, m):
            y, _ = net.forward(o, m)
            return y
    else:
        obs_tr = obs_tr.reshape(obs_tr.shape[0], -1)
        obs_va = obs_va.reshape(obs_va.shape[0], -1)
        act_tr = act_tr.reshape(act_tr.shape[0], -1)
        act_va = act_va.reshape(act_va.shape[0], -1)
        masks_tr = masks_va = None
        net = MlpNet(n_r * d_in, (64, 64), n_r * 2, seed=seed, name="bcmlp")

        def fwd(o, m):
            return net.forward(o)

        def predict(o, m):
            return net.forward(o)

    def deploy():
        if arch == "attention":
            return AttentionPolicy(net, vlim, action_scale=vlim)
        return MlpPolicy(net, n_r, d_in, vlim, action_scale=vlim)

    reward_goals = []
    if reward_select_every > 0 and task is not None:
        seen = sorted({demos[i].goal_id for i in val_idx})[:8]
        curve_of = {demos[i].goal_id: demos[i].goal_curve for i in val_idx}
        reward_goals = [task.goal_from_curve(curve_of[g]) for g in seen]

    def reward_score():
        from .evalbench import run_policy_episode
        rs = [run_policy_episode(task, g, deploy(), n_r,
                                 demos[0].horizon).reward
              for g in reward_goals]
        return float(np.mean(rs))

    opt = Adam(net.params(), lr=lr)
    n_tr = obs_tr.shape[0]
    best_val = np.inf
    best_reward = -np.inf
    best_params = copy.deepcopy(net.params())
    best_epoch = -1
    curve = TrainCurve([], [], -1)
    stall = 0
    for epoch in range(epochs):
        order = rng.permutation(n_tr)
        ep_loss = 0.0
        for start in range(0, n_tr, batch):
            sel = order[start:start + batch]
            o = obs_tr[sel]
            m = masks_tr[sel] if masks_tr is not None else None
            y = fwd(o, m)
            loss, gy = mse(y, act_tr[sel])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"bc loss non-finite at epoch {epoch}",
                                       checkpoint=best_params, curve=curve)
            net.zero_grads()
            net.backward(gy)
            opt.step(net.grads())
            ep_loss += loss * len(sel)
        ep_loss /= n_tr
        val_loss, _ = mse(predict(obs_va, masks_va), act_va)
        curve.train_loss.append(ep_loss)
        curve.val_loss.append(val_loss)
        if reward_goals:
            last = epoch == epochs - 1
            if epoch % reward_select_every == reward_select_every - 1 or last:
                score = reward_score()
                if score > best_reward:
                    best_reward = score
                    best_params = copy.deepcopy(net.params())
                    best_epoch = epoch
        elif val_loss < best_val:
            best_val = val_loss
            best_params = copy.deepcopy(net.params())
            best_epoch = epoch
            stall = 0
        elif not reward_goals:
            stall += 1
            # tiny desk validation sets are noisy early on; never stop
            # before a third of the budget
            if stall > patience and epoch >= epochs // 3:
                break
    curve.best_epoch = best_epoch
    for key, val in net.params().items():
        val[...] = best_params[key]
    return deploy(), curve


def _replay_masks(demo: Demo) -> np.ndarray:
    """Visibility masks are a function of robot geometry; rebuilt from the
    recorded observations' part (a) frame offsets."""
    T, R, d = demo.observations.shape
    nd = (d - 3) // 9
    masks = np.zeros((T, R, R), dtype=bool)
    for t in range(T):
        # part (a) = p_j - r_i: recover robot positions up to the common
        # particle cloud by negating the first particle's offset
        r_xy = -demo.observations[t, :, 0:2]
        nn = nearest_neighbors(r_xy)
        masks[t] = visibility_mask(nn)
    return masks


# ---------------------------------------------------------------------------
# PPO baseline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PpoConfig:
    learning_rate: float = 3e-4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    batch_size: int = 32
    epochs: int = 10
    clip_ratio: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    rollout_steps: int = 2048
    total_steps: int = 48000
    seed: int = 0


class PushEnv:
    """Fixed-N_r episodic env: reward is the negative per-step loss."""

    def __init__(self, task: Task, goals: list[GoalSpec], n_r: int,
                 horizon: int, coeffs=(500.0, 500.0, 1.0), seed: int = 0,
                 n_down: int = pol.N_DOWNSAMPLED, loss_lattice: int = 64):
        self.task = task
        self.goals = goals
        self.n_r = n_r
        self.horizon = horizon
        self.rng = substream(seed, "env")
        self.n_down = n_down
        self._losses = [scene.StepLoss(g, task.sim_cfg, tuple(coeffs),
                                       Lattice(loss_lattice)) for g in goals]
        self.obs_dim = n_r * observation_dim(n_down)
        self.act_dim = n_r * 2
        self._state = None
        self._goal_id = 0
        self._t = 0

    def reset(self):
        self._goal_id = int(self.rng.integers(len(self.goals)))
        self._state = self.task.initial_state(self.n_r)
        self._idx = downsample_particles(self._state.particles.positions,
                                         self.n_down, 0)
        self._s0 = self._state.particles.positions.copy()
        self._t = 0
        return self._obs()

    def _obs(self):
        return build_observation(self._state, self.goals[self._goal_id],
                                 self._idx).reshape(-1)

    def step(self, action_flat):
        action = np.clip(np.asarray(action_flat).reshape(self.n_r, 2),
                         -self.task.sim_cfg.velocity_limit,
                         self.task.sim_cfg.velocity_limit)
        self._state = sim_step(self._state, action, self.task.sim_cfg)
        self._t += 1
        reward = -self._losses[self._goal_id].value(self._state)
        done = self._t >= self.horizon
        return self._obs(), reward, done

    def final_task_reward(self) -> float:
        return scene.reward(self._state.particles.positions, self._s0,
                            self.goals[self._goal_id].goal_particles,
                            self.task.lattice)


@dataclass
class PpoPolicy:
    """Deterministic deployment wrapper: mean action, clamped."""

    agent: "GaussianMlpPolicy"
    n_robots: int
    obs_dim: int
    velocity_limit: float

    def act_mlp(self, obs_flat: np.ndarray) -> np.ndarray:
        mean = self.agent.pi.forward(obs_flat)
        cmd = np.clip(mean, -1.0, 1.0) * self.velocity_limit
        return cmd.reshape(self.n_robots, 2)


class GaussianMlpPolicy:
    """Tanh MLP mean with state-independent log-std, plus a value head."""

    def __init__(self, obs_dim, act_dim, seed=0):
        self.pi = MlpNet(obs_dim, (64, 64), act_dim, seed=seed, name="pi")
        self.vf = MlpNet(obs_dim, (64, 64), 1, seed=seed + 1, name="vf")
        self.log_std = np.full(act_dim, -0.7)
        self.act_dim = act_dim

    def params(self):
        out = {"log_std": self.log_std}
        out.update(self.pi.params())
        out.update(self.vf.params())
        return out

    def dist(self, obs):
        mean = self.pi.forward(obs)
        return mean, np.exp(self.log_std)

    def log_prob(self, mean, std, act):
        z = (act - mean) / std
        return (-0.5 * z * z - np.log(std) - 0.5 * np.log(2 * np.pi)).sum(axis=-1)


def _gae(rewards, values, dones, gamma, lam):
    T = len(rewards)
    adv = np.zeros(T)
    last = 0.0
    for t in range(T - 1, -1, -1):
        nonterm = 0.0 if dones[t] else 1.0
        next_v = values[t + 1] if t + 1 < len(values) else 0.0
        delta = rewards[t] + gamma * next_v * nonterm - values[t]
        last = delta + gamma * lam * nonterm * last
        adv[t] = last
    return adv


def ppo_fit(env: PushEnv, cfg: PpoConfig, progress=None
            ) -> tuple[GaussianMlpPolicy, list[float]]:
    """Clipped-surrogate PPO with a Gaussian action head; the returned
    curve is the mean final task reward per rollout buffer."""
    rng = substream(cfg.seed, "ppo")
    agent = GaussianMlpPolicy(env.obs_dim, env.act_dim, seed=cfg.seed)
    opt = Adam(agent.params(), lr=cfg.learning_rate)
    vlim = env.task.sim_cfg.velocity_limit

    reward_curve = []
    steps_done = 0
    obs = env.reset()
    ret_scale = None
    # the agent acts in velocity-limit-normalized units
    while steps_done < cfg.total_steps:
        n_steps = min(cfg.rollout_steps, cfg.total_steps - steps_done)
        O = np.zeros((n_steps, env.obs_dim))
        A = np.zeros((n_steps, env.act_dim))
        LP = np.zeros(n_steps)
        RW = np.zeros(n_steps)
        DN = np.zeros(n_steps, dtype=bool)
        VL = np.zeros(n_steps + 1)
        ep_rewards = []
        for t in range(n_steps):
            mean, std = agent.dist(obs)
            act = mean + std * rng.standard_normal(env.act_dim)
            act = np.clip(act, -3.0, 3.0)
            O[t] = obs
            A[t] = act
            LP[t] = agent.log_prob(mean, std, act)
            VL[t] = agent.vf.forward(obs)[0]
            obs, r, done = env.step(act * vlim)
            RW[t] = r
            DN[t] = done
            if done:
                ep_rewards.append(env.final_task_reward())
                obs = env.reset()
        VL[n_steps] = agent.vf.forward(obs)[0]
        steps_done += n_steps

        if ret_scale is None:
            ret_scale = max(float(np.abs(RW).mean()), 1e-8)
        RWs = RW / ret_scale
        VLu = VL.copy()
        adv = _gae(RWs, VLu, DN, cfg.gamma, cfg.gae_lambda)
        returns = adv + VLu[:-1]
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)

        idx_all = np.arange(n_steps)
        for _ in range(cfg.epochs):
            rng.shuffle(idx_all)
            for start in range(0, n_steps, cfg.batch_size):
                sel = idx_all[start:start + cfg.batch_size]
                o, a = O[sel], A[sel]
                mean = agent.pi.forward(o)
                std = np.exp(agent.log_std)
                z = (a - mean) / std
                logp = (-0.5 * z * z - agent.log_std
                        - 0.5 * np.log(2 * np.pi)).sum(axis=-1)
                ratio = np.exp(logp - LP[sel])
                adv_b = adv[sel]
                unclipped = ratio * adv_b
                clipped = np.clip(ratio, 1 - cfg.clip_ratio,
                                  1 + cfg.clip_ratio) * adv_b
                use_unclipped = unclipped <= clipped
                # d(-surrogate)/d logp: only the unclipped branch carries grad
                gsurr = np.where(use_unclipped, -ratio * adv_b, 0.0) / len(sel)
                # entropy of a diagonal gaussian: sum(log_std) + const
                gmean = gsurr[:, None] * (z / std)
                glogstd_s = (gsurr[:, None] * (z * z - 1.0)).sum(axis=0)
                glogstd_e = -cfg.entropy_coef * np.ones(env.act_dim)
                agent.pi.zero_grads()
                agent.pi.backward(gmean)
                gpi = agent.pi.grads()

                v = agent.vf.forward(o)[:, 0]
                vloss_g = cfg.value_coef * 2.0 * (v - returns[sel]) / len(sel)
                agent.vf.zero_grads()
                agent.vf.backward(vloss_g[:, None])
                gvf = agent.vf.grads()

                if not all(np.all(np.isfinite(g)) for g in gpi.values()):
                    raise TrainingDiverged("ppo policy gradient non-finite",
                                           checkpoint=agent.params())
                grads = {"log_std": glogstd_s + glogstd_e}
                grads.update(gpi)
                grads.update(gvf)
                opt.step(grads)
                agent.log_std[:] = np.clip(agent.log_std, -4.0, 1.0)
        if ep_rewards:
            reward_curve.append(float(np.mean(ep_rewards)))
        if progress is not None:
            progress(steps_done, cfg.total_steps,
                     reward_curve[-1] if reward_curve else 0.0)
    return agent, reward_curve
