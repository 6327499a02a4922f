"""Experiment configuration: one flat JSON document with dotted keys drives
a full run (dataset, construction, interpretation, pruning).

Library-level config classes default to the reference protocol values
(t_max=100, c_max=50, l_max=10, 400 episodes); the CLI defaults below are a
desk-scale experiment that finishes in minutes on a laptop.  Unknown keys
are rejected so a config file documents exactly what ran.
"""

import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .network import BuildConfig
from .prune import DdpgConfig

DEFAULTS = {
    "seed": 7,
    "workers": 1,
    "data.source": "synthetic",   # synthetic | folder
    "data.root": "",              # image-folder root; synthetic runs in memory when empty
    "data.size": 64,              # synthetic image side
    "data.n_train": 50,           # per-class counts for the synthetic splits
    "data.n_val": 12,
    "data.n_test": 25,
    "data.crop": 0,               # 0 -> min image dimension
    "data.resize": 0,             # 0 -> crop size
    "data.augment": False,
    "data.eta": 0.05,
    "build.error_limit": 0.01,
    "build.t_max": 30,
    "build.xi_lo": 1.5,
    "build.xi_hi": 5.0,
    "build.r_lo": 1.05,
    "build.r_hi": 1.5,
    "build.k": 3,
    "build.l_max": 2,
    "build.c_max": 8,
    "build.pool_every": 2,
    "build.retry_rounds": 10,
    "build.ridge": 100.0,
    "build.u_scale": 1e-9,
    "interpret.layer": 0,         # 0 -> final layer, else 1-based
    "interpret.theta": 0.5,
    "interpret.samples": 8,       # heatmaps exported by `explain`
    "ddpg.gamma": 0.9,
    "ddpg.replay": 2000,
    "ddpg.step_size": 0.005,
    "ddpg.tau": 0.01,
    "ddpg.batch": 32,
    "ddpg.episodes": 40,
    "ddpg.noise_start": 0.3,
    "ddpg.noise_end": 0.05,
    "ddpg.beta": 0.01,
    "ddpg.a_max": 0.8,
    "ddpg.rank_batch": 32,        # eval-batch size for kernel ranking
}


@dataclass
class DataCfg:
    source: str = "synthetic"
    root: str = ""
    size: int = 64
    n_train: int = 50
    n_val: int = 12
    n_test: int = 25
    crop: int = 0
    resize: int = 0
    augment: bool = False
    eta: float = 0.05

    def validate(self):
        if self.source not in ("synthetic", "folder"):
            raise ConfigError(f"data.source must be synthetic|folder, got {self.source!r}")
        if self.source == "folder" and not self.root:
            raise ConfigError("data.source=folder requires data.root")
        if self.size < 32:
            raise ConfigError(f"data.size must be >= 32, got {self.size}")
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"data.{name} must be >= 1")
        if self.crop < 0 or self.resize < 0:
            raise ConfigError("data.crop and data.resize must be >= 0")
        if self.eta < 0:
            raise ConfigError(f"data.eta must be >= 0, got {self.eta}")


@dataclass
class InterpretCfg:
    layer: int = 0
    theta: float = 0.5
    samples: int = 8

    def validate(self):
        if self.layer < 0:
            raise ConfigError("interpret.layer must be >= 0 (0 = final layer)")
        if not 0 < self.theta <= 1:
            raise ConfigError(f"interpret.theta must be in (0,1], got {self.theta}")
        if self.samples < 0:
            raise ConfigError("interpret.samples must be >= 0")


@dataclass
class RunConfig:
    seed: int = 7
    workers: int = 1
    rank_batch: int = 32
    data: DataCfg = field(default_factory=DataCfg)
    build: BuildConfig = field(default_factory=BuildConfig)
    interpret: InterpretCfg = field(default_factory=InterpretCfg)
    ddpg: DdpgConfig = field(default_factory=DdpgConfig)

    def validate(self):
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.rank_batch < 1:
            raise ConfigError("ddpg.rank_batch must be >= 1")
        self.data.validate()
        self.build.validate()
        self.interpret.validate()
        self.ddpg.validate()


def _coerce(key, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        if float(value) != int(value):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key} expects a string, got {value!r}")
    return value


def load_config(path=None, overrides=None):
    """Build a validated RunConfig from defaults, an optional JSON file of
    flat dotted keys, and optional override pairs (applied last)."""
    flat = dict(DEFAULTS)
    if path is not None:
        with open(path) as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ConfigError("config file must contain a JSON object")
        for key, value in doc.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            flat[key] = _coerce(key, value, DEFAULTS[key])
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        flat[key] = _coerce(key, value, DEFAULTS[key])

    cfg = RunConfig(
        seed=flat["seed"],
        workers=flat["workers"],
        rank_batch=flat["ddpg.rank_batch"],
        data=DataCfg(
            source=flat["data.source"], root=flat["data.root"],
            size=flat["data.size"], n_train=flat["data.n_train"],
            n_val=flat["data.n_val"], n_test=flat["data.n_test"],
            crop=flat["data.crop"], resize=flat["data.resize"],
            augment=flat["data.augment"], eta=flat["data.eta"]),
        build=BuildConfig(
            error_limit=flat["build.error_limit"], t_max=flat["build.t_max"],
            xi_range=(flat["build.xi_lo"], flat["build.xi_hi"]),
            r_range=(flat["build.r_lo"], flat["build.r_hi"]),
            k=flat["build.k"], l_max=flat["build.l_max"],
            c_max=flat["build.c_max"], pool_every=flat["build.pool_every"],
            retry_rounds=flat["build.retry_rounds"], ridge=flat["build.ridge"],
            u_scale=flat["build.u_scale"]),
        interpret=InterpretCfg(
            layer=flat["interpret.layer"], theta=flat["interpret.theta"],
            samples=flat["interpret.samples"]),
        ddpg=DdpgConfig(
            gamma=flat["ddpg.gamma"], replay_capacity=flat["ddpg.replay"],
            step_size=flat["ddpg.step_size"], tau=flat["ddpg.tau"],
            batch_size=flat["ddpg.batch"], episodes=flat["ddpg.episodes"],
            noise_start=flat["ddpg.noise_start"], noise_end=flat["ddpg.noise_end"],
            beta=flat["ddpg.beta"], a_max=flat["ddpg.a_max"]),
    )
    cfg.validate()
    return cfg
