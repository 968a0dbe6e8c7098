"""Per-robot observations and the distilled policies.

Each observation row concatenates, in the robot's translation-only frame:
(a) the down-sampled current particles, (b) the goal particles, (c) the
relative position of the nearest neighbor robot, and (d) the current-to-goal
particle vectors; with N_p' particles the row width is 9*N_p' + 3.

The attention policy treats the robot count as a batch dimension and its
visibility mask restricts every robot to itself and its nearest neighbor.
Inference pads the token dimension to a fixed capacity with fully-masked
dummy rows, so per-step latency is robot-count-independent; masked padding
cannot change real rows' outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffsim import ContractViolation, SimConfig, SimState
from .nnet import Linear, MultiHeadSelfAttention, Tanh
from .scene import GoalSpec

N_DOWNSAMPLED = 102


def downsample_particles(particles: np.ndarray, n: int, seed: int = 0) -> np.ndarray:
    """Uniformly spaced (stride-based) index subset, fixed per episode.

    The seed only rotates the phase of the stride pattern, so indices stay
    uniform and deterministic."""
    total = particles.shape[0]
    if n > total:
        raise ContractViolation(f"cannot downsample {total} particles to {n}")
    if n == total:
        return np.arange(total, dtype=np.int64)
    idx = (np.arange(n, dtype=np.int64) * total) // n
    offset = seed % max(1, total // n)
    return (idx + offset) % total if offset else idx


def nearest_neighbors(robot_xy: np.ndarray) -> np.ndarray:
    """Index of each robot's nearest neighbor (ties to the lower index);
    a lone robot maps to itself."""
    n = robot_xy.shape[0]
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    d = np.linalg.norm(robot_xy[:, None, :] - robot_xy[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    return np.argmin(d, axis=1)


def visibility_mask(nn_idx: np.ndarray) -> np.ndarray:
    """Boolean (N, N): row i sees itself and its nearest neighbor."""
    n = nn_idx.shape[0]
    mask = np.zeros((n, n), dtype=bool)
    mask[np.arange(n), np.arange(n)] = True
    mask[np.arange(n), nn_idx] = True
    return mask


def observation_dim(n_down: int = N_DOWNSAMPLED) -> int:
    return 9 * n_down + 3


def build_observation(state: SimState, goal: GoalSpec,
                      indices: np.ndarray) -> np.ndarray:
    """Assemble the N_r x d_in observation matrix (parts a, b, c, d)."""
    cur = state.particles.positions[indices]        # (n', 3)
    gol = goal.goal_particles[indices]              # (n', 3)
    rob = state.robots.positions                    # (R, 3)
    n_r = rob.shape[0]
    nn_idx = nearest_neighbors(rob[:, :2])

    part_a = (cur[None, :, :] - rob[:, None, :]).reshape(n_r, -1)
    part_b = (gol[None, :, :] - rob[:, None, :]).reshape(n_r, -1)
    if n_r == 1:
        part_c = np.zeros((1, 3))
    else:
        part_c = rob[nn_idx] - rob
    part_d = np.broadcast_to((gol - cur).reshape(1, -1), (n_r, part_a.shape[1]))
    return np.concatenate([part_a, part_b, part_c, part_d], axis=1)


class AttentionPolicyNet:
    """Embed MLP -> masked self-attention stack -> output MLP.

    Both MLPs are single affine layers; d_feat = n_heads * d_v so the
    attention output width matches the embedding width.
    """

    def __init__(self, d_in: int, d_feat: int = 128, n_heads: int = 4,
                 d_k: int = 32, n_layers: int = 2, seed: int = 0,
                 scale_by_dk: bool = False, capacity: int = 128):
        if n_heads * d_k != d_feat:
            raise ContractViolation("d_feat must equal n_heads * d_v")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA77E]))
        self.d_in = d_in
        self.d_feat = d_feat
        self.capacity = capacity
        self.embed = Linear(d_in, d_feat, rng, name="embed")
        self.layers = [
            MultiHeadSelfAttention(d_feat, n_heads, d_k, d_k, rng,
                                   name=f"attn{i}", scale_by_dk=scale_by_dk)
            for i in range(n_layers)
        ]
        self.out = Linear(d_in + d_feat, 2, rng, name="out")

    def forward(self, obs, mask):
        """obs (..., N, d_in), mask (..., N, N) -> (out (..., N, 2), attn)."""
        h = self.embed.forward(obs)
        attn_all = []
        for layer in self.layers:
            h, attn = layer.forward(h, mask)
            attn_all.append(attn)
        y = self.out.forward(np.concatenate([obs, h], axis=-1))
        return y, attn_all

    def backward(self, gy):
        g = self.out.backward(gy)
        gobs = g[..., :self.d_in]
        gh = g[..., self.d_in:]
        for layer in reversed(self.layers):
            gh = layer.backward(gh)
        gobs = gobs + self.embed.backward(gh)
        return gobs

    def params(self):
        out = {}
        out.update(self.embed.params())
        for layer in self.layers:
            out.update(layer.params())
        out.update(self.out.params())
        return out

    def grads(self):
        out = {}
        out.update(self.embed.grads())
        for layer in self.layers:
            out.update(layer.grads())
        out.update(self.out.grads())
        return out

    def zero_grads(self):
        for g in self.grads().values():
            g[...] = 0.0


@dataclass
class AttentionPolicy:
    """Deployable policy: observation in, clamped velocity commands out.

    The net is trained on velocity-limit-normalized targets, so its output
    is rescaled by action_scale before the hard clamp."""

    net: AttentionPolicyNet
    velocity_limit: float
    action_scale: float = 1.0

    def act(self, obs: np.ndarray, mask: np.ndarray):
        """Returns (actions (N, 2), attention matrices (layers, heads, N, N)).

        Work is done at fixed token capacity: rows beyond N are dummy
        self-attending tokens whose outputs are discarded.
        """
        n = obs.shape[0]
        cap = max(self.net.capacity, n)
        obs_p = np.zeros((cap, obs.shape[1]))
        obs_p[:n] = obs
        mask_p = np.eye(cap, dtype=bool)
        mask_p[:n, :n] = mask
        y, attn = self.net.forward(obs_p, mask_p)
        actions = np.clip(y[:n] * self.action_scale,
                          -self.velocity_limit, self.velocity_limit)
        attn = np.stack([a[:, :n, :n] for a in attn])
        return actions, attn


class MlpNet:
    """Plain MLP with tanh hidden activations (flat input)."""

    def __init__(self, d_in, hidden, d_out, seed=0, name="mlp"):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x317]))
        dims = [d_in] + list(hidden) + [d_out]
        self.linears = [Linear(dims[i], dims[i + 1], rng, name=f"{name}{i}")
                        for i in range(len(dims) - 1)]
        self.acts = [Tanh() for _ in range(len(hidden))]

    def forward(self, x):
        h = x
        for i, lin in enumerate(self.linears):
            h = lin.forward(h)
            if i < len(self.acts):
                h = self.acts[i].forward(h)
        return h

    def backward(self, gy):
        g = gy
        for i in range(len(self.linears) - 1, -1, -1):
            if i < len(self.acts):
                g = self.acts[i].backward(g)
            g = self.linears[i].backward(g)
        return g

    def params(self):
        out = {}
        for lin in self.linears:
            out.update(lin.params())
        return out

    def grads(self):
        out = {}
        for lin in self.linears:
            out.update(lin.grads())
        return out

    def zero_grads(self):
        for g in self.grads().values():
            g[...] = 0.0


@dataclass
class MlpPolicy:
    """Fixed-robot-order baseline: rejects any other robot count."""

    net: MlpNet
    n_robots: int
    obs_dim: int
    velocity_limit: float
    action_scale: float = 1.0

    def act_mlp(self, obs_flat: np.ndarray) -> np.ndarray:
        if obs_flat.shape[-1] != self.n_robots * self.obs_dim:
            raise ContractViolation(
                f"MLP policy expects N_r={self.n_robots} "
                f"(flat width {self.n_robots * self.obs_dim}), "
                f"got width {obs_flat.shape[-1]}")
        y = self.net.forward(obs_flat) * self.action_scale
        return np.clip(y.reshape(self.n_robots, 2),
                       -self.velocity_limit, self.velocity_limit)


@dataclass
class ActionSmoother:
    """Mean of the latest H policy outputs (jerk reduction)."""

    window: int = 5
    _hist: list = field(default_factory=list)

    def smooth(self, actions: np.ndarray) -> np.ndarray:
        self._hist.append(np.asarray(actions, dtype=np.float64))
        if len(self._hist) > self.window:
            self._hist.pop(0)
        return np.mean(self._hist, axis=0)

    def reset(self):
        self._hist.clear()


def make_policy_config(sim_cfg: SimConfig, n_down: int = N_DOWNSAMPLED,
                       seed: int = 0, n_heads: int = 4, d_feat: int = 128,
                       n_layers: int = 2) -> AttentionPolicy:
    net = AttentionPolicyNet(observation_dim(n_down), d_feat=d_feat,
                             n_heads=n_heads, d_k=d_feat // n_heads,
                             n_layers=n_layers, seed=seed)
    return AttentionPolicy(net, sim_cfg.velocity_limit)
