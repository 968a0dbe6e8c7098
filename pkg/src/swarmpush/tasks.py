"""Standard task construction shared by training, evaluation and the CLI.

A task is: a straight rope along y = center_y, robots staggered above and
below it, and a suite of cubic goal curves drawn from the configured
ranges.  Everything derives from the run config plus one root seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import scene
from .diffsim import RobotSet, SimConfig, SimState
from .scene import GoalSpec, Lattice


def sim_config_from(cfg: dict) -> SimConfig:
    s = cfg["sim"]
    sc_ = cfg["scene"]
    base = SimConfig(
        friction=s["friction"], yield_stress=s["yield_stress"],
        velocity_limit=s["velocity_limit"], robot_radius=s["robot_radius"],
        dt=s["dt"], grid_res=s["grid_res"],
        youngs_modulus=s["youngs_modulus"], poisson_ratio=s["poisson_ratio"],
        substeps_per_control=s["substeps_per_control"],
        particle_mass=s["particle_mass"],
        contact_softness=s["contact_softness"],
        contact_cutoff=s["contact_cutoff"],
        boundary_cells=s["boundary_cells"],
    )
    span = sc_["x_hi"] - sc_["x_lo"]
    area = span * 2.0 * sc_["rope_half_width"]
    return base.with_particle_count(sc_["n_particles"], area)


def standard_robot_xy(n_r: int, center_y: float = 0.5,
                      offset: float = 0.04) -> np.ndarray:
    """Robots staggered below/above the initial rope, spread along x."""
    xs = np.linspace(0.28, 0.72, n_r) if n_r > 1 else np.array([0.5])
    sign = np.where(np.arange(n_r) % 2 == 0, -1.0, 1.0)
    return np.stack([xs, center_y + sign * offset], axis=1)


@dataclass
class Task:
    sim_cfg: SimConfig
    initial_curve: tuple
    x_span: tuple
    rope_half_width: float
    n_particles: int
    center_y: float
    lattice: Lattice

    def initial_state(self, n_r: int) -> SimState:
        pf = scene.build_rope_scene(self.sim_cfg, self.initial_curve,
                                    self.n_particles, self.x_span,
                                    self.rope_half_width)
        robots = RobotSet.from_xy(standard_robot_xy(n_r, self.center_y),
                                  self.sim_cfg.robot_radius)
        return SimState(pf, robots)

    def goal_from_curve(self, curve) -> GoalSpec:
        template = scene.build_rope_scene(self.sim_cfg, self.initial_curve,
                                          self.n_particles, self.x_span,
                                          self.rope_half_width)
        return scene.make_goal(curve, template, self.x_span,
                               self.rope_half_width)

    def goal_suite(self, n_goals: int, seed: int, margin: float,
                   max_dev: float) -> list[GoalSpec]:
        curves = scene.sample_goal_curves(
            n_goals, seed, self.x_span, self.center_y, margin, max_dev)
        return [self.goal_from_curve(c) for c in curves]


def task_from(cfg: dict) -> Task:
    sc_ = cfg["scene"]
    return Task(
        sim_cfg=sim_config_from(cfg),
        initial_curve=(0.0, 0.0, 0.0, sc_["center_y"]),
        x_span=(sc_["x_lo"], sc_["x_hi"]),
        rope_half_width=sc_["rope_half_width"],
        n_particles=sc_["n_particles"],
        center_y=sc_["center_y"],
        lattice=Lattice(sc_["lattice_res"]),
    )
