"""Run configuration, deterministic seed derivation and record streams.

A RunConfig is a typed INI document with sections sim/scene/gmp/mppi/
policy/train/eval; unknown sections or keys are rejected and the canonical
serialization round-trips byte-identically, so its sha256 names the run.
Artifacts are line-delimited JSON record streams whose first line is a
header carrying the format version and the resolved config hash.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import json
import zlib

import numpy as np

STREAM_VERSION = 1


class ConfigError(ValueError):
    pass


def _opt(typ):
    return ("opt", typ)


# section -> key -> (type, default); types: int, float, bool, str,
# ("opt", t) meaning t or none, ("list", int) comma-separated.
CONFIG_SCHEMA: dict = {
    "sim": {
        "friction": (float, 1.5),
        "yield_stress": (float, 30.0),
        "velocity_limit": (float, 0.015),
        "robot_radius": (float, 0.02),
        "dt": (float, 0.04),
        "grid_res": (int, 32),
        "youngs_modulus": (float, 5e3),
        "poisson_ratio": (float, 0.2),
        "substeps_per_control": (int, 5),
        "particle_mass": (float, 2.0),
        "contact_softness": (float, 60.0),
        "contact_cutoff": (float, 1e-2),
        "boundary_cells": (int, 2),
    },
    "scene": {
        "n_particles": (int, 512),
        "x_lo": (float, 0.2),
        "x_hi": (float, 0.8),
        "rope_half_width": (float, 0.02),
        "center_y": (float, 0.5),
        "lattice_res": (int, 32),
        "n_goals": (int, 20),
        "goal_seed": (int, 7),
        "goal_margin": (float, 0.06),
        "goal_max_dev": (float, 0.16),
    },
    "gmp": {
        "learning_rate": (float, 0.1),
        "iterations": (int, 50),
        "c1": (float, 500.0),
        "c2": (float, 500.0),
        "c3": (float, 1.0),
        "init_scale": (_opt(float), None),
        "lattice_res": (int, 64),
    },
    "mppi": {
        "n_samples": (int, 200),
        "horizon": (int, 40),
        "n_stages": (int, 10),
        "noise_mean": (float, 0.0),
        "noise_std": (float, 1.0),
        "temperature": (_opt(float), None),
        "lattice_res": (int, 64),
    },
    "policy": {
        "n_down": (int, 102),
        "d_feat": (int, 128),
        "n_heads": (int, 4),
        "n_layers": (int, 2),
        "smooth_window": (int, 5),
        "capacity": (int, 128),
        "scale_by_dk": (bool, False),
    },
    "train": {
        "n_demos": (int, 60),
        "horizons": (("list", int), (40,)),
        "n_robots": (int, 3),
        "n_train_goals": (int, 20),
        "bc_epochs": (int, 150),
        "bc_lr": (float, 1e-3),
        "bc_batch": (int, 64),
        "bc_patience": (int, 10),
        "ppo_total_steps": (int, 48000),
        "ppo_lr": (float, 3e-4),
        "ppo_entropy_coef": (float, 0.01),
        "ppo_value_coef": (float, 0.5),
        "ppo_batch": (int, 32),
        "ppo_epochs": (int, 10),
    },
    "eval": {
        "n_goals": (int, 20),
        "horizon": (int, 40),
        "n_robots": (int, 3),
        "goal_seed": (int, 101),
        "kidnap_step": (int, 15),
    },
}


def default_config() -> dict:
    return {sec: {k: v for k, (_, v) in keys.items()}
            for sec, keys in CONFIG_SCHEMA.items()}


def _parse_value(section, key, raw):
    typ, _ = CONFIG_SCHEMA[section][key]
    raw = raw.strip()
    if isinstance(typ, tuple) and typ[0] == "opt":
        if raw.lower() == "none":
            return None
        typ = typ[1]
    if isinstance(typ, tuple) and typ[0] == "list":
        if not raw:
            return ()
        return tuple(typ[1](part.strip()) for part in raw.split(","))
    if typ is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"[{section}] {key}: not a boolean: {raw!r}")
    try:
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from None


def _format_value(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> dict:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = default_config()
    for section in parser.sections():
        if section not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in CONFIG_SCHEMA[section]:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")
            cfg[section][key] = _parse_value(section, key, raw)
    return cfg


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def serialize_config(cfg: dict) -> str:
    out = io.StringIO()
    for section, keys in CONFIG_SCHEMA.items():
        out.write(f"[{section}]\n")
        for key in keys:
            out.write(f"{key} = {_format_value(cfg[section][key])}\n")
        out.write("\n")
    return out.getvalue()


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()


def derive_seed(root: int, *names) -> int:
    """Named substream derivation: every consumer of randomness hangs off
    the single root seed through a stable label path."""
    h = zlib.crc32(repr(tuple(names)).encode("utf-8"))
    state = np.random.SeedSequence([int(root) & 0x7FFFFFFF, h]).generate_state(1)
    return int(state[0] & 0x7FFFFFFF)


def substream(root: int, *names) -> np.random.Generator:
    h = zlib.crc32(repr(tuple(names)).encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(root) & 0x7FFFFFFF, h]))


# ---------------------------------------------------------------------------
# Record streams: one JSON object per line, header first.
# ---------------------------------------------------------------------------

class RecordWriter:
    def __init__(self, path, kind: str, cfg_hash: str, extra: dict | None = None):
        self._f = open(path, "w", encoding="utf-8")
        header = {"record": "header", "version": STREAM_VERSION,
                  "kind": kind, "config_sha256": cfg_hash}
        if extra:
            header.update(extra)
        self.write(header)

    def write(self, obj: dict) -> None:
        self._f.write(json.dumps(obj, sort_keys=True) + "\n")

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_records(path, expect_kind: str | None = None):
    """Returns (header, list of records); validates the header line."""
    with open(path, "r", encoding="utf-8") as f:
        lines = [line for line in f if line.strip()]
    if not lines:
        raise ConfigError(f"{path}: empty record stream")
    header = json.loads(lines[0])
    if header.get("record") != "header":
        raise ConfigError(f"{path}: missing stream header")
    if header.get("version") != STREAM_VERSION:
        raise ConfigError(f"{path}: unsupported stream version")
    if expect_kind is not None and header.get("kind") != expect_kind:
        raise ConfigError(f"{path}: expected kind {expect_kind!r}, "
                          f"got {header.get('kind')!r}")
    return header, [json.loads(line) for line in lines[1:]]
