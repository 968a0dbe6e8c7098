"""Scenes, goals and the task metrics.

Goal poses are cubic curves y = a3 x^3 + a2 x^2 + a1 x + a0 over an
x-interval; ropes are sampled by placing equally spaced centerline stations
along arc length and filling the cross-section, so a scene and its goal
built from the same particle count share construction-order correspondence.

The evaluation metric (grid IoU and the normalized-improvement reward) uses
hard binary occupancy and is never differentiated; the per-step planner loss
uses smoothed bilinear density rasters so it stays differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .diffsim import ContractViolation, ParticleField, SimConfig, SimState

WORKSPACE = (0.0, 1.0)


class SceneConstructionError(ValueError):
    pass


@dataclass(frozen=True)
class Lattice:
    """Cell lattice covering the unit workspace; nz = 1 planar slab."""

    res: int = 32

    @property
    def resolution(self) -> tuple[int, int, int]:
        return (self.res, self.res, 1)

    @property
    def cell_size(self) -> float:
        return 1.0 / self.res


@dataclass
class OccupancyGrid:
    lattice: Lattice
    occupancy: np.ndarray  # (nx, ny, 1), values in [0, 1]


@dataclass
class SdfGrid:
    lattice: Lattice
    values: np.ndarray  # (nx, ny, 1), meters, negative inside


@dataclass
class GoalSpec:
    """Cubic goal curve plus its fixed sampled particle set."""

    cubic_coeffs: tuple[float, float, float, float]
    x_span: tuple[float, float]
    rope_half_width: float
    goal_particles: np.ndarray  # (N, 3)


def _curve_points(coeffs, x_span, n_dense: int = 2048):
    a3, a2, a1, a0 = coeffs
    xs = np.linspace(x_span[0], x_span[1], n_dense)
    ys = ((a3 * xs + a2) * xs + a1) * xs + a0
    dy = (3.0 * a3 * xs + 2.0 * a2) * xs + a1
    return xs, ys, dy


def curve_margin_ok(coeffs, x_span, margin: float) -> tuple[bool, float]:
    """Whether the curve keeps `margin` to the workspace box; returns the
    first violating x when it does not."""
    xs, ys, _ = _curve_points(coeffs, x_span)
    lo, hi = WORKSPACE
    bad = (ys < lo + margin) | (ys > hi - margin)
    if x_span[0] < lo + margin or x_span[1] > hi - margin:
        return False, x_span[0]
    if np.any(bad):
        return False, float(xs[np.argmax(bad)])
    return True, 0.0


def _rope_lattice_shape(n_particles: int, half_width: float,
                        span_len: float) -> tuple[int, int]:
    spacing = np.sqrt(2.0 * half_width * span_len / n_particles)
    n_off = max(3, int(round(2.0 * half_width / spacing)))
    n_sta = int(np.ceil(n_particles / n_off))
    return n_sta, n_off


def _sample_rope(coeffs, x_span, half_width, n_particles) -> np.ndarray:
    """Equally spaced arc-length stations, uniform offsets across the width.

    Station-major ordering gives index correspondence between any two ropes
    sampled with the same particle count and width.
    """
    ok, bad_x = curve_margin_ok(coeffs, x_span, half_width)
    if not ok:
        raise SceneConstructionError(
            f"goal curve leaves the workspace margin near x={bad_x:.3f}")
    xs, ys, dy = _curve_points(coeffs, x_span)
    seg = np.hypot(np.diff(xs), np.diff(ys))
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    total = arc[-1]

    n_sta, n_off = _rope_lattice_shape(n_particles, half_width, total)
    st_arc = (np.arange(n_sta) + 0.5) * total / n_sta
    sx = np.interp(st_arc, arc, xs)
    sy = np.interp(st_arc, arc, ys)
    sdy = np.interp(st_arc, arc, dy)
    tlen = np.hypot(1.0, sdy)
    nx = -sdy / tlen
    ny = 1.0 / tlen

    offs = (np.arange(n_off) + 0.5) / n_off * 2.0 - 1.0  # in (-1, 1)
    offs = offs * half_width
    pts = np.empty((n_sta * n_off, 2))
    pts[:, 0] = (sx[:, None] + nx[:, None] * offs[None, :]).ravel()
    pts[:, 1] = (sy[:, None] + ny[:, None] * offs[None, :]).ravel()
    return pts[:n_particles]


def build_rope_scene(cfg: SimConfig, curve, n_particles: int,
                     x_span=(0.2, 0.8), rope_half_width: float = 0.02) -> ParticleField:
    """Sample a rope body along a cubic curve; zero velocity, identity F."""
    xy = _sample_rope(tuple(curve), tuple(x_span), rope_half_width, n_particles)
    return ParticleField.from_xy(xy, cfg.particle_mass)


def _box_lattice_dims(cfg: SimConfig, half_extents) -> tuple[int, int]:
    # two particles per grid cell along each axis
    spacing = cfg.dx / 2.0
    hx, hy = half_extents
    return (max(4, int(round(2.0 * hx / spacing))),
            max(4, int(round(2.0 * hy / spacing))))


def build_box_scene(cfg: SimConfig, center, half_extents) -> ParticleField:
    """Uniform particle lattice filling a rectangle (near-rigid block)."""
    cx, cy = center
    hx, hy = half_extents
    lo, hi = WORKSPACE
    if cx - hx < lo or cx + hx > hi or cy - hy < lo or cy + hy > hi:
        raise SceneConstructionError("box leaves the workspace")
    nx, ny = _box_lattice_dims(cfg, half_extents)
    gx = cx - hx + (np.arange(nx) + 0.5) * 2.0 * hx / nx
    gy = cy - hy + (np.arange(ny) + 0.5) * 2.0 * hy / ny
    xy = np.stack(np.meshgrid(gx, gy, indexing="ij"), axis=-1).reshape(-1, 2)
    return ParticleField.from_xy(xy, cfg.particle_mass)


def box_lattice_count(cfg: SimConfig, half_extents) -> int:
    nx, ny = _box_lattice_dims(cfg, half_extents)
    return nx * ny


def make_goal(curve, template: ParticleField, x_span=(0.2, 0.8),
              rope_half_width: float = 0.02) -> GoalSpec:
    """Goal particles built by the same sampling procedure as the scene."""
    pts = _sample_rope(tuple(curve), tuple(x_span), rope_half_width,
                       template.count)
    goal = np.full((template.count, 3), template.positions[0, 2])
    goal[:, :2] = pts
    return GoalSpec(tuple(float(c) for c in curve), tuple(x_span),
                    rope_half_width, goal)


def sample_goal_curves(n: int, seed: int, x_span=(0.2, 0.8), center_y: float = 0.5,
                       margin: float = 0.06, max_dev: float = 0.16) -> list[tuple]:
    """Draw cubic coefficients from fixed ranges, center a0 so the curve's
    mean height is center_y, rejection-sample for workspace margin."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x60A1]))
    out = []
    while len(out) < n:
        a3 = rng.uniform(-1.0, 1.0)
        a2 = rng.uniform(-0.8, 0.8)
        a1 = rng.uniform(-0.5, 0.5)
        xs = np.linspace(x_span[0], x_span[1], 256)
        mean_wo = np.mean(((a3 * xs + a2) * xs + a1) * xs)
        a0 = center_y - mean_wo
        coeffs = (a3, a2, a1, a0)
        ys = ((a3 * xs + a2) * xs + a1) * xs + a0
        if np.max(np.abs(ys - center_y)) > max_dev:
            continue
        if curve_margin_ok(coeffs, x_span, margin)[0]:
            out.append(coeffs)
    return out


def occupancy(particles: np.ndarray, lattice: Lattice) -> OccupancyGrid:
    """Binary occupancy: 1 where any particle falls in the cell."""
    n = lattice.res
    occ = np.zeros((n, n, 1))
    pts = np.asarray(particles)[:, :2]
    if pts.shape[0]:
        idx = np.clip((pts * n).astype(np.int64), 0, n - 1)
        occ[idx[:, 0], idx[:, 1], 0] = 1.0
    return OccupancyGrid(lattice, occ)


def iou(a: OccupancyGrid, b: OccupancyGrid) -> float:
    if a.lattice != b.lattice:
        raise ContractViolation("occupancy grids live on different lattices")
    inter = np.sum((a.occupancy > 0) & (b.occupancy > 0))
    union = np.sum((a.occupancy > 0) | (b.occupancy > 0))
    if union == 0:
        return 1.0  # both empty: degenerate self-similarity
    return float(inter) / float(union)


def similarity(s_a: np.ndarray, s_b: np.ndarray, lattice: Lattice) -> float:
    return iou(occupancy(s_a, lattice), occupancy(s_b, lattice))


def reward(s_t: np.ndarray, s_0: np.ndarray, s_g: np.ndarray,
           lattice: Lattice, eps: float = 1e-6) -> float:
    """Normalized IoU improvement toward the goal, floored at zero."""
    if eps <= 0:
        raise ContractViolation("eps must be positive")
    f_t = similarity(s_t, s_g, lattice)
    f_0 = similarity(s_0, s_g, lattice)
    return max((f_t - f_0) / max(1.0 - f_0, eps), 0.0)


def sdf(occ: OccupancyGrid) -> SdfGrid:
    """Exact Euclidean distance transform, negative inside the body.

    Convention: an isolated occupied cell carries -cell_size/2; free cells
    carry (distance-to-nearest-occupied - cell_size/2).
    """
    grid = occ.occupancy[..., 0] > 0
    if not np.any(grid):
        raise ContractViolation("SDF of an empty occupancy grid is undefined")
    h = occ.lattice.cell_size
    d_out = ndimage.distance_transform_edt(~grid)
    d_in = ndimage.distance_transform_edt(grid)
    vals = np.where(grid, -(d_in - 0.5) * h, (d_out - 0.5) * h)
    return SdfGrid(occ.lattice, vals[..., None])


# ---------------------------------------------------------------------------
# Differentiable per-step loss (mass + sdf + grasp)
# ---------------------------------------------------------------------------

def density_raster(xy: np.ndarray, lattice: Lattice, p_mass: float):
    """Bilinear mass splat onto cell centers; returns (rho, base, fr).

    Splat coordinates are clamped half a cell inside the workspace so the
    raster always sums to the total particle mass.
    """
    n = lattice.res
    h = lattice.cell_size
    eps = 1e-9
    q = np.clip(xy / h - 0.5, eps, n - 1.0 - eps)
    base = np.floor(q).astype(np.int64)
    fr = q - base
    rho = np.zeros((n, n))
    for i in range(2):
        for j in range(2):
            w = (np.abs(1 - i - fr[:, 0])) * (np.abs(1 - j - fr[:, 1]))
            np.add.at(rho, (base[:, 0] + i, base[:, 1] + j), p_mass * w)
    return rho, base, fr


def _density_backward(grho: np.ndarray, xy, lattice: Lattice, p_mass: float,
                      base, fr):
    n = lattice.res
    h = lattice.cell_size
    gxy = np.zeros_like(xy)
    # clamped coordinates have zero derivative
    q = xy / h - 0.5
    live = (q > 1e-9) & (q < n - 1.0 - 1e-9)
    for i in range(2):
        for j in range(2):
            g = grho[base[:, 0] + i, base[:, 1] + j]
            wi = np.abs(1 - i - fr[:, 0])
            wj = np.abs(1 - j - fr[:, 1])
            dwi = (1.0 if i == 1 else -1.0)
            dwj = (1.0 if j == 1 else -1.0)
            gxy[:, 0] += g * p_mass * dwi * wj / h
            gxy[:, 1] += g * p_mass * wi * dwj / h
    return np.where(live, gxy, 0.0)


@dataclass
class StepLoss:
    """Eq-style per-step loss: c1*L_mass + c2*L_dist + c3*L_grasp.

    L_mass is the L1 distance between smoothed density rasters of the
    current and goal states, L_dist the inner product of the current
    density with the goal's (precomputed, constant) signed distance field,
    and L_grasp a per-robot softmin of surface distances to the particles.
    `literal_sdf_dot` switches L_dist to the literal <SDF(s_t), SDF(s_g)>
    reading (non-differentiable; evaluation only).
    """

    goal: GoalSpec
    sim_cfg: SimConfig
    coeffs: tuple[float, float, float] = (500.0, 500.0, 1.0)
    lattice: Lattice = Lattice(32)
    grasp_temperature: float = 1e-3
    literal_sdf_dot: bool = False

    def __post_init__(self):
        self._rho_g, _, _ = density_raster(self.goal.goal_particles[:, :2],
                                           self.lattice, self.sim_cfg.particle_mass)
        self._sdf_g = sdf(occupancy(self.goal.goal_particles, self.lattice)).values[..., 0]

    def _grasp(self, xy, robots):
        """Softmin of (center distance - radius) per robot; also hard min."""
        tau = self.grasp_temperature
        radius = self.sim_cfg.robot_radius
        total = 0.0
        hard = 0.0
        gx = np.zeros_like(xy)
        gr = np.zeros((robots.shape[0], 2))
        for k in range(robots.shape[0]):
            d = np.hypot(xy[:, 0] - robots[k, 0], xy[:, 1] - robots[k, 1])
            surf = d - radius
            m = surf.min()
            w = np.exp(-(surf - m) / tau)
            z = w.sum()
            total += m - tau * np.log(z)
            hard += m
            wn = w / z
            dirn = (robots[k, :2] - xy) / np.maximum(d, 1e-12)[:, None]
            gr[k] = (wn[:, None] * dirn).sum(axis=0)
            gx += -wn[:, None] * dirn
        return total, hard, gx, gr

    def value(self, state: SimState) -> float:
        return self.grads(state)[0]

    def terms(self, state: SimState) -> dict:
        xy = state.particles.positions[:, :2]
        rho_t, _, _ = density_raster(xy, self.lattice, self.sim_cfg.particle_mass)
        l_mass = np.abs(rho_t - self._rho_g).sum()
        if self.literal_sdf_dot:
            sdf_t = sdf(occupancy(state.particles.positions, self.lattice)).values[..., 0]
            l_dist = float((sdf_t * self._sdf_g).sum())
        else:
            l_dist = float((rho_t * self._sdf_g).sum())
        soft, hard, _, _ = self._grasp(xy, state.robots.positions[:, :2])
        return {"mass": float(l_mass), "dist": l_dist,
                "grasp": float(soft), "grasp_hard": float(hard)}

    def grads(self, state: SimState):
        """Returns (value, dL/d particle xy (N,2), dL/d robot xy (R,2))."""
        if self.literal_sdf_dot:
            raise ContractViolation(
                "the literal <SDF(s_t), SDF(s_g)> variant is evaluation-only")
        c1, c2, c3 = self.coeffs
        xy = state.particles.positions[:, :2]
        robots = state.robots.positions[:, :2]
        pm = self.sim_cfg.particle_mass
        rho_t, base, fr = density_raster(xy, self.lattice, pm)
        diff = rho_t - self._rho_g
        l_mass = np.abs(diff).sum()
        l_dist = (rho_t * self._sdf_g).sum()
        grho = c1 * np.sign(diff) + c2 * self._sdf_g
        gxy = _density_backward(grho, xy, self.lattice, pm, base, fr)
        l_grasp, _, g_gx, g_gr = self._grasp(xy, robots)
        gxy += c3 * g_gx
        grob = c3 * g_gr
        value = float(c1 * l_mass + c2 * l_dist + c3 * l_grasp)
        return value, gxy, grob


def loss_step(state: SimState, goal: GoalSpec, coeffs=(500.0, 500.0, 1.0),
              sim_cfg: SimConfig | None = None, lattice: Lattice | None = None) -> float:
    cfg = sim_cfg if sim_cfg is not None else SimConfig()
    lat = lattice if lattice is not None else Lattice(32)
    return StepLoss(goal, cfg, tuple(coeffs), lat).value(state)
