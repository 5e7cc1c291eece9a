"""Declarative experiment configuration loaded from TOML.

Every hyperparameter of the sinusoid study has an explicit default here;
a config file overrides any subset of them.  Unknown keys and missing
required keys raise :class:`ConfigError` naming the offending field.
"""

import copy
import hashlib
import json
import math
from dataclasses import dataclass

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from pacmeta.map_learners import ALGORITHMS
from pacmeta.tasks import SINUSOID, TOY_CLASSIFICATION, TaskEnvironment

MATCHED = "matched"

DEFAULTS = {
    "experiment": {
        "name": "experiment",
        "algorithm": None,
        "output_dir": "runs",
    },
    "environment": {
        "family": SINUSOID,
        "noise": 0.1,
        "amplitude": [1.4, 2.6],
        "phase": [0.0, math.pi],
        "offset": [-1.0, 1.0],
        "x_range": [-5.0, 5.0],
    },
    "protocol": {
        "n": 20,
        "m": 5,
        "m_i": [5, 10, 30, 50, 100],
        "m_prime": None,
        "subsample_mode": "subset",
        "resample_inner": True,
        "meta_train_sets": [0, 1],
        "init_seeds": [0, 1, 2],
        "target_tasks": 20,
        "folds": 4,
        "n_test": 100,
        "target_seed": 1000,
    },
    "grid": {
        "beta_ratio": [10.0, 30.0, 100.0],
        "alpha_ratio": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
        "inner_lr": [0.01],
        "inner_steps": [1],
    },
    "optimizer": {
        "lr": 3e-3,
        "batch_size": 5,
        "iterations": 8000,
    },
    "prior": {
        "sigma0_sq": 3.0,
        "sigma_sq": 1.0,
        "lam": math.inf,
        "delta": 0.1,
        "kl_normalizer": False,
    },
    "inner": {
        "method": "quasi-newton",
        "steps": 10,
        "lr": 5e-3,
        "tol": 1e-6,
        "history": 10,
    },
    "bound": {
        "enabled": False,
        "paths": ["pacoh", "pacmaml"],
        "n_mc": 200,
    },
}

PAPER_SCALE = {"meta_train_sets": list(range(8)), "init_seeds": list(range(5))}

REQUIRED = (("experiment", "algorithm"),)


class ConfigError(ValueError):
    """Malformed or incomplete configuration; the message names the field."""


def _merge(base, override, where=""):
    out = copy.deepcopy(base)
    for key, val in override.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise ConfigError(f"unknown field '{path}'")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"field '{path}' must be a table")
            out[key] = _merge(base[key], val, path)
        else:
            out[key] = val
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved configuration; ``raw`` is the full nested mapping."""

    raw: dict

    def __getitem__(self, section):
        return self.raw[section]

    @property
    def algorithm(self):
        return self.raw["experiment"]["algorithm"]

    @property
    def output_dir(self):
        return self.raw["experiment"]["output_dir"]

    def environment(self, m_i=None):
        env = dict(self.raw["environment"])
        for k in ("amplitude", "phase", "offset", "x_range"):
            env[k] = tuple(env[k])
        m = self.raw["protocol"]["m"]
        return TaskEnvironment(m=m, m_obs=m if m_i is None else m_i, **env)

    def grid_points(self):
        """Hyperparameter points relevant to the configured algorithm, in grid order."""
        g = self.raw["grid"]
        alg = self.algorithm
        if alg == "pacmaml":
            return [dict(beta_ratio=b, alpha_ratio=a)
                    for b in g["beta_ratio"] for a in g["alpha_ratio"]]
        if alg in ("pacoh", "reptile"):
            return [dict(beta_ratio=b) for b in g["beta_ratio"]]
        if alg in ("maml", "fomaml"):
            return [dict(inner_lr=lr, inner_steps=k)
                    for k in g["inner_steps"] for lr in g["inner_lr"]]
        return [dict()]

    def digest(self):
        blob = json.dumps(self.raw, sort_keys=True, default=repr).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_json(self):
        return json.loads(json.dumps(self.raw, default=repr))


def _validate(cfg):
    for section, key in REQUIRED:
        if cfg[section][key] is None:
            raise ConfigError(f"missing required field '{section}.{key}'")
    alg = cfg["experiment"]["algorithm"]
    if alg not in ALGORITHMS:
        raise ConfigError(f"field 'experiment.algorithm': unknown algorithm {alg!r}")
    if alg in ("pacmaml", "maml", "fomaml") and cfg["protocol"]["m_prime"] is None:
        raise ConfigError(f"missing required field 'protocol.m_prime' (needed by {alg})")
    if cfg["environment"]["family"] not in (SINUSOID, TOY_CLASSIFICATION):
        raise ConfigError("field 'environment.family': unknown family")
    for key in ("beta_ratio", "alpha_ratio", "inner_lr", "inner_steps"):
        vals = cfg["grid"][key]
        if not isinstance(vals, list) or not vals:
            raise ConfigError(f"field 'grid.{key}' must be a nonempty list")
    for a in cfg["grid"]["alpha_ratio"]:
        if a != MATCHED and not (isinstance(a, (int, float)) and a > 0):
            raise ConfigError(f"field 'grid.alpha_ratio': invalid entry {a!r}")
    proto = cfg["protocol"]
    for key in ("m_i", "meta_train_sets", "init_seeds"):
        if not isinstance(proto[key], list) or not proto[key]:
            raise ConfigError(f"field 'protocol.{key}' must be a nonempty list")
    if proto["target_tasks"] % proto["folds"]:
        raise ConfigError("field 'protocol.folds' must divide protocol.target_tasks")
    if proto["m_prime"] is not None and proto["m_prime"] > min(proto["m_i"]):
        raise ConfigError("field 'protocol.m_prime' exceeds the smallest m_i")
    if cfg["optimizer"]["iterations"] < 0:
        raise ConfigError("field 'optimizer.iterations' must be >= 0")


def from_dict(data, paper_scale=False):
    cfg = _merge(DEFAULTS, data)
    if paper_scale:
        cfg["protocol"].update(copy.deepcopy(PAPER_SCALE))
    _validate(cfg)
    return ExperimentConfig(cfg)


def load_config(path, paper_scale=False):
    """Parse a TOML file; syntax errors report the line and column."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_dict(data, paper_scale)
