"""Command-line surface: scene/goal authoring, planning, data collection,
training, evaluation and the kernel benchmark.

Exit codes: 0 success, 2 usage/config error, 3 runtime fault.  All
randomness fans out from --seed via named substreams, and every artifact
starts with a header carrying the resolved config hash, so reports
regenerate byte-identically from (config, seed).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import backend, evalbench, gmp, mppi, nnet, train as tr
from .diffsim import ContractViolation, SimConfig, SimulationFault
from .gmp import GmpConfig, PlannerDiverged
from .mppi import MppiConfig
from .policy import (AttentionPolicy, AttentionPolicyNet, MlpNet, MlpPolicy,
                     observation_dim)
from .records import (ConfigError, RecordWriter, config_hash, default_config,
                      derive_seed, load_config, serialize_config)
from .tasks import task_from

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _resolve_config(args):
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = default_config()
    return cfg, config_hash(cfg)


def _make_run_dir(out, cfg):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.ini"), "w", encoding="utf-8") as f:
        f.write(serialize_config(cfg))
    return out


def _goals(cfg, task, which="eval"):
    sec = cfg["scene"]
    if which == "train":
        n = cfg["train"]["n_train_goals"]
        seed = sec["goal_seed"]
    else:
        n = cfg["eval"]["n_goals"]
        seed = cfg["eval"]["goal_seed"]
    return task.goal_suite(n, seed, sec["goal_margin"], sec["goal_max_dev"])


def _gmp_cfg(cfg, seed):
    g = cfg["gmp"]
    return GmpConfig(learning_rate=g["learning_rate"], iterations=g["iterations"],
                     coeffs=(g["c1"], g["c2"], g["c3"]),
                     init_scale=g["init_scale"], seed=seed,
                     lattice_res=g["lattice_res"])


def _mppi_cfg(cfg, seed):
    m = cfg["mppi"]
    return MppiConfig(n_samples=m["n_samples"], horizon=m["horizon"],
                      n_stages=m["n_stages"], noise_mean=m["noise_mean"],
                      noise_std=m["noise_std"], temperature=m["temperature"],
                      seed=seed, lattice_res=m["lattice_res"])


def save_policy(path, policy, meta):
    if isinstance(policy, AttentionPolicy):
        nnet.save_params(path, policy.net.params())
    else:
        nnet.save_params(path, policy.net.params())
    with open(path + ".meta.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def load_policy(path, sim_cfg: SimConfig):
    with open(path + ".meta.json", "r", encoding="utf-8") as f:
        meta = json.load(f)
    params = nnet.load_params(path)
    scale = meta.get("action_scale", 1.0)
    if meta["arch"] == "attention":
        net = AttentionPolicyNet(meta["d_in"], d_feat=meta["d_feat"],
                                 n_heads=meta["n_heads"],
                                 d_k=meta["d_feat"] // meta["n_heads"],
                                 n_layers=meta["n_layers"],
                                 capacity=meta.get("capacity", 128))
        for key, val in net.params().items():
            val[...] = params[key]
        return AttentionPolicy(net, sim_cfg.velocity_limit,
                               action_scale=scale), meta
    net = MlpNet(meta["n_robots"] * meta["d_in"], (64, 64),
                 meta["n_robots"] * 2, name="bcmlp")
    for key, val in net.params().items():
        val[...] = params[key]
    return MlpPolicy(net, meta["n_robots"], meta["d_in"],
                     sim_cfg.velocity_limit, action_scale=scale), meta


def cmd_plan(args) -> int:
    cfg, cfg_hash = _resolve_config(args)
    task = task_from(cfg)
    goals = _goals(cfg, task, which="eval")
    if not 0 <= args.goal < len(goals):
        raise CliError(f"goal id {args.goal} outside suite of {len(goals)}",
                       EXIT_CONFIG)
    goal = goals[args.goal]
    n_r = cfg["eval"]["n_robots"]
    horizon = cfg["eval"]["horizon"]
    state0 = task.initial_state(n_r)
    seed = derive_seed(args.seed, "plan", args.method, args.goal)
    t0 = time.time()
    if args.method == "gmp":
        plan, history = gmp.plan(state0, goal, task.sim_cfg,
                                 _gmp_cfg(cfg, seed), horizon=horizon)
        hist = [{"iteration": i, "loss": l} for i, l in enumerate(history)]
    else:
        plan, stages = mppi.mppi_plan(state0, goal, task.sim_cfg,
                                      _mppi_cfg(cfg, seed), horizon=horizon)
        hist = stages
    elapsed = time.time() - t0
    # execute the plan to report its achieved reward
    from .diffsim import rollout
    from . import scene as sc
    traj = rollout(state0, plan, task.sim_cfg)
    reward = sc.reward(traj[-1].particles.positions,
                       state0.particles.positions,
                       goal.goal_particles, task.lattice)
    _make_run_dir(args.out, cfg)
    path = os.path.join(args.out, f"plan_{args.method}_goal{args.goal}.jsonl")
    with RecordWriter(path, "plan", cfg_hash,
                      extra={"backend": backend.BACKEND_NAME,
                             "seed": args.seed}) as w:
        w.write({"plan": plan.commands.tolist(), "method": args.method,
                 "goal_id": args.goal, "reward": reward,
                 "wall_seconds": elapsed})
        for h in hist:
            w.write({"history": h})
    print(f"plan[{args.method}] goal={args.goal} reward={reward:.3f} "
          f"({elapsed:.1f}s) -> {path}")
    return EXIT_OK


def cmd_collect(args) -> int:
    cfg, cfg_hash = _resolve_config(args)
    task = task_from(cfg)
    goals = _goals(cfg, task, which="train")
    t = cfg["train"]
    seed = derive_seed(args.seed, "collect")
    demos, manifest = tr.collect(
        task, goals, t["horizons"], t["n_robots"], _gmp_cfg(cfg, 0),
        t["n_demos"], seed, n_down=cfg["policy"]["n_down"],
        progress=lambda i, n, r: print(f"  demo {i + 1}/{n} r={r:.3f}"))
    _make_run_dir(args.out, cfg)
    prefix = os.path.join(args.out, "dataset")
    tr.save_dataset(prefix, demos, manifest, cfg_hash)
    print(f"collected {manifest.n_demos} demos ({manifest.skipped} skipped) "
          f"-> {prefix}_demos.jsonl")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, cfg_hash = _resolve_config(args)
    task = task_from(cfg)
    t = cfg["train"]
    _make_run_dir(args.out, cfg)
    if args.arch in ("attention", "mlp"):
        if not args.dataset:
            raise CliError("--dataset is required for behavior cloning",
                           EXIT_CONFIG)
        demos, manifest = tr.load_dataset(args.dataset, task,
                                          n_down=cfg["policy"]["n_down"])
        if not demos:
            raise CliError("empty dataset", EXIT_CONFIG)
        policy, curve = tr.bc_fit(
            demos, args.arch, t["bc_epochs"], t["bc_lr"], t["bc_batch"],
            seed=derive_seed(args.seed, "bc", args.arch),
            patience=t["bc_patience"], sim_cfg=task.sim_cfg,
            policy_cfg=cfg["policy"])
        meta = {"arch": args.arch, "d_in": observation_dim(cfg["policy"]["n_down"]),
                "d_feat": cfg["policy"]["d_feat"],
                "n_heads": cfg["policy"]["n_heads"],
                "n_layers": cfg["policy"]["n_layers"],
                "capacity": cfg["policy"]["capacity"],
                "n_robots": manifest.n_robots,
                "action_scale": task.sim_cfg.velocity_limit,
                "best_epoch": curve.best_epoch}
        path = os.path.join(args.out, f"policy_{args.arch}.ckpt")
        save_policy(path, policy, meta)
        with RecordWriter(os.path.join(args.out, f"curve_{args.arch}.jsonl"),
                          "train-curve", cfg_hash) as w:
            for i, (tl, vl) in enumerate(zip(curve.train_loss, curve.val_loss)):
                w.write({"epoch": i, "train_mse": tl, "val_mse": vl})
        print(f"trained {args.arch}: best epoch {curve.best_epoch}, "
              f"val mse {min(curve.val_loss):.3g} -> {path}")
        return EXIT_OK
    # ppo
    goals = _goals(cfg, task, which="train")
    env = tr.PushEnv(task, goals, t["n_robots"], cfg["eval"]["horizon"],
                     seed=derive_seed(args.seed, "ppo-env"),
                     n_down=cfg["policy"]["n_down"])
    ppo_cfg = tr.PpoConfig(learning_rate=t["ppo_lr"],
                           entropy_coef=t["ppo_entropy_coef"],
                           value_coef=t["ppo_value_coef"],
                           batch_size=t["ppo_batch"], epochs=t["ppo_epochs"],
                           total_steps=t["ppo_total_steps"],
                           seed=derive_seed(args.seed, "ppo"))
    agent, curve = tr.ppo_fit(env, ppo_cfg,
                              progress=lambda s, n, r: print(
                                  f"  ppo {s}/{n} r={r:.3f}"))
    path = os.path.join(args.out, "policy_ppo.ckpt")
    nnet.save_params(path, agent.params())
    with open(path + ".meta.json", "w", encoding="utf-8") as f:
        json.dump({"arch": "ppo", "d_in": observation_dim(cfg["policy"]["n_down"]),
                   "n_robots": t["n_robots"]}, f, indent=2, sort_keys=True)
        f.write("\n")
    with RecordWriter(os.path.join(args.out, "curve_ppo.jsonl"),
                      "train-curve", cfg_hash) as w:
        for i, r in enumerate(curve):
            w.write({"buffer": i, "mean_final_reward": r})
    print(f"trained ppo: final curve point "
          f"{curve[-1] if curve else float('nan'):.3f} -> {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, cfg_hash = _resolve_config(args)
    task = task_from(cfg)
    e = cfg["eval"]
    goals = _goals(cfg, task, which="eval")
    _make_run_dir(args.out, cfg)
    n_r, horizon = e["n_robots"], e["horizon"]
    sw = cfg["policy"]["smooth_window"]

    if args.suite == "compare":
        methods = {}
        seed0 = derive_seed(args.seed, "eval")
        methods["gmp"] = lambda goal, gi, s: evalbench.run_plan_episode(
            task, goal, "gmp", n_r, horizon, s, gmp_cfg=_gmp_cfg(cfg, s))
        methods["mppi"] = lambda goal, gi, s: evalbench.run_plan_episode(
            task, goal, "mppi", n_r, horizon, s, mppi_cfg=_mppi_cfg(cfg, s))
        methods["random"] = lambda goal, gi, s: evalbench.run_plan_episode(
            task, goal, "random", n_r, horizon, s)
        if args.policy:
            policy, _ = load_policy(args.policy, task.sim_cfg)
            methods["bc_attention"] = lambda goal, gi, s: \
                evalbench.run_policy_episode(task, goal, policy, n_r, horizon,
                                             smooth_window=sw)
        report = evalbench.compare_methods(task, methods, goals, n_r,
                                           horizon, seed=seed0)
    elif args.suite == "timing":
        policy, meta = load_policy(args.policy, task.sim_cfg)
        report = evalbench.timing_scaling(policy, [6, 100], meta["d_in"])
    elif args.suite in ("sweep", "robots", "kidnap"):
        policy, meta = load_policy(args.policy, task.sim_cfg)
        if args.suite == "sweep":
            report = evalbench.generalization_sweep(
                task, {"bc_attention": policy}, goals, n_r, horizon,
                seed=derive_seed(args.seed, "sweep"), smooth_window=sw)
        elif args.suite == "robots":
            report = evalbench.robot_count_eval(task, policy, [3, 4, 5],
                                                goals, horizon,
                                                smooth_window=sw)
        else:
            report, traces = evalbench.kidnap_study(
                task, policy, goals[0], n_r, e["kidnap_step"], 0, horizon,
                smooth_window=sw)
            with RecordWriter(os.path.join(args.out, "kidnap_traces.jsonl"),
                              "kidnap-traces", cfg_hash) as w:
                for trace in traces:
                    w.write(trace)
    else:
        raise CliError(f"unknown suite {args.suite!r}", EXIT_CONFIG)

    report.provenance = {"config_sha256": cfg_hash, "seed": args.seed,
                         "backend": backend.BACKEND_NAME}
    csv_path = os.path.join(args.out, f"report_{args.suite}.csv")
    report.to_csv(csv_path)
    with RecordWriter(os.path.join(args.out, f"report_{args.suite}.jsonl"),
                      "report", cfg_hash,
                      extra=report.provenance) as w:
        for row in report.rows:
            w.write(row)
    for key, stats in report.summary().items():
        print(f"{key}: reward {stats['reward_mean']:.3f} "
              f"± {stats['reward_std']:.3f} (n={stats['n']}), "
              f"time/step {stats['time_mean']:.4f}s")
    print(f"-> {csv_path}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .backend import get_backend
    from . import scene as sc
    cfg = SimConfig()
    pf = sc.build_rope_scene(cfg, (0, 0, 0, 0.5), 512)
    prm = cfg.with_particle_count(512, 0.6 * 0.04).params_vector()
    rng = np.random.default_rng(0)
    x = pf.positions[:, :2].copy()
    v = np.zeros_like(x)
    F = np.tile(np.eye(2), (512, 1, 1))
    C = np.zeros((512, 2, 2))
    rp = np.array([[0.3, 0.46], [0.5, 0.54], [0.7, 0.46]])
    rv = rng.uniform(-0.015, 0.015, (3, 2))
    g = [rng.standard_normal(s) for s in [(512, 2), (512, 2), (512, 2, 2),
                                          (512, 2, 2)]]
    names = ["python"]
    try:
        get_backend("compiled")
        names.insert(0, "compiled")
    except ImportError:
        pass
    print(f"active backend: {backend.BACKEND_NAME}")
    for name in names:
        mod = get_backend(name)
        for _ in range(3):
            mod.substep_forward(x, v, F, C, rp, rv, prm)
        t0 = time.perf_counter()
        for _ in range(args.reps):
            mod.substep_forward(x, v, F, C, rp, rv, prm)
        fwd = (time.perf_counter() - t0) / args.reps
        t0 = time.perf_counter()
        for _ in range(args.reps):
            mod.substep_backward(x, v, F, C, rp, rv, prm, *g)
        bwd = (time.perf_counter() - t0) / args.reps
        print(f"{name:9s} substep forward {fwd * 1e3:7.3f} ms   "
              f"backward {bwd * 1e3:7.3f} ms")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(
        prog="swarmpush",
        description="cooperative multi-robot push manipulation toolkit")
    p.add_argument("--config", default=None, help="run config (INI)")
    p.add_argument("--seed", type=int, default=0, help="root seed")
    p.add_argument("--jobs", type=int, default=1,
                   help="worker cap for parallel episodes (advisory)")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("plan", help="optimize one plan for a goal")
    sp.add_argument("--method", choices=("gmp", "mppi"), default="gmp")
    sp.add_argument("--goal", type=int, default=0)
    sp.add_argument("--out", default="runs/plan")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("collect", help="collect a teacher demo dataset")
    sp.add_argument("--out", default="runs/dataset")
    sp.set_defaults(func=cmd_collect)

    sp = sub.add_parser("train", help="behavior-clone or train PPO")
    sp.add_argument("--arch", choices=("attention", "mlp", "ppo"),
                    required=True)
    sp.add_argument("--dataset", default=None,
                    help="dataset path prefix (from collect)")
    sp.add_argument("--out", default="runs/train")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="run an experiment suite")
    sp.add_argument("--suite", choices=("compare", "sweep", "robots",
                                        "kidnap", "timing"), required=True)
    sp.add_argument("--policy", default=None, help="policy checkpoint path")
    sp.add_argument("--out", default="runs/eval")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="compare kernel backends")
    sp.add_argument("--reps", type=int, default=100)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationFault, PlannerDiverged, tr.TrainingDiverged,
            ContractViolation, mppi.MppiDiverged) as exc:
        print(f"runtime fault [{type(exc).__module__.split('.')[-1]}."
              f"{type(exc).__name__}]: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
