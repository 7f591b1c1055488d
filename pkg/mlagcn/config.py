"""Experiment configuration: TOML or JSON files with [model] [graph] [loss] [train] [da] sections."""
import copy
import hashlib
import json
import math
import os

import singer
import singer.utils

from mlagcn.exceptions import ConfigError
from mlagcn.labelgraph import ABLATIONS, ADJACENCY_NORMS, COMPOSITE_NORMS, MAX_LAYERS, NODE_FEATURE_MODES
from mlagcn.losses import LossConfig
from mlagcn.model import GENERATOR_KINDS, HEAD_KINDS

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

LOGGER = singer.get_logger()

REQUIRED_CONFIG_KEYS = [
    "train.seed",
]

LAMBDA_SCHEDULES = ("constant", "dann_ramp")
GRL_LAMBDA_LOCATIONS = ("objective", "grl")

DEFAULTS = {
    "model": {
        "generator": "identity",
        "generator_hidden": [],
        "d_f": None,
        "layers": 2,
        "head": "agcn",
        "domain_hidden": None,
        "leaky_slope": 0.2,
        "node_features": "prototype",
        "node_features_path": "",
        "detach_c": False,
        "init_scale": 1.0,
    },
    "graph": {
        "tau": 0.0,
        "adjacency_norm": "auto",
        "composite_norm": "balanced",
    },
    "loss": {
        "gamma_pos": 0.0,
        "gamma_neg": 4.0,
        "margin": 0.05,
        "lambda_d": 1.0,
    },
    "train": {
        "epochs": 40,
        "max_lr": 1e-4,
        "batch_size": 32,
        "seed": None,
        "ablation": "ABC",
        "patience": 8,
        "decision_threshold": 0.5,
        "topk": 0,
    },
    "da": {
        "lambda_schedule": "constant",
        "grl_lambda_location": "objective",
    },
}

# Keys whose values are integers; every other numeric default is a real.
INTEGER_KEYS = {
    "model.d_f", "model.layers", "model.domain_hidden",
    "train.epochs", "train.batch_size", "train.seed", "train.patience", "train.topk",
}

CHOICES = {
    "model.generator": GENERATOR_KINDS,
    "model.head": HEAD_KINDS,
    "model.node_features": NODE_FEATURE_MODES,
    "graph.adjacency_norm": ADJACENCY_NORMS,
    "graph.composite_norm": COMPOSITE_NORMS,
    "train.ablation": ABLATIONS,
    "da.lambda_schedule": LAMBDA_SCHEDULES,
    "da.grl_lambda_location": GRL_LAMBDA_LOCATIONS,
}


def _is_int(value):
    return isinstance(value, int) and not isinstance(value, bool)


def _is_real(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def _check_type(dotted, value, default):
    if value is None:
        if default is None:
            return None
        raise ConfigError("{} may not be null".format(dotted))
    if dotted in INTEGER_KEYS:
        if not _is_int(value):
            raise ConfigError("{} must be an integer, got {!r}".format(dotted, value))
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError("{} must be true or false, got {!r}".format(dotted, value))
        return value
    if isinstance(default, float):
        if not _is_real(value):
            raise ConfigError("{} must be a finite number, got {!r}".format(dotted, value))
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError("{} must be a string, got {!r}".format(dotted, value))
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or not all(_is_int(item) and item > 0 for item in value):
            raise ConfigError("{} must be a list of positive integers, got {!r}".format(dotted, value))
        return list(value)
    return value


def check_config(raw, required_keys=REQUIRED_CONFIG_KEYS):
    missing = [key for key in required_keys
               if raw.get(key.split(".")[0], {}).get(key.split(".")[1]) is None]
    if missing:
        raise ConfigError("Config is missing required keys: {}".format(missing))


def _check_ranges(sections):
    model, graph, train = sections["model"], sections["graph"], sections["train"]
    for dotted, choices in CHOICES.items():
        section, key = dotted.split(".")
        if sections[section][key] not in choices:
            raise ConfigError("{} must be one of {}; got {!r}".format(
                dotted, ", ".join(choices), sections[section][key]))
    if not 1 <= model["layers"] <= MAX_LAYERS:
        raise ConfigError("model.layers must be 1 or 2, got {}".format(model["layers"]))
    for key in ("d_f", "domain_hidden"):
        if model[key] is not None and model[key] <= 0:
            raise ConfigError("model.{} must be positive, got {}".format(key, model[key]))
    if not 0.0 < model["leaky_slope"] < 1.0:
        raise ConfigError("model.leaky_slope must lie in (0, 1), got {}".format(model["leaky_slope"]))
    if model["init_scale"] <= 0:
        raise ConfigError("model.init_scale must be positive, got {}".format(model["init_scale"]))
    if model["generator"] == "identity" and model["generator_hidden"]:
        raise ConfigError("model.generator_hidden needs model.generator = 'mlp'")
    if model["node_features"] == "file" and not model["node_features_path"]:
        raise ConfigError("model.node_features_path is required when model.node_features = 'file'")
    if not 0.0 <= graph["tau"] <= 1.0:
        raise ConfigError("graph.tau must lie in [0, 1], got {}".format(graph["tau"]))
    if train["seed"] is not None and train["seed"] < 0:
        raise ConfigError("train.seed must be >= 0, got {}".format(train["seed"]))
    if train["epochs"] < 0:
        raise ConfigError("train.epochs must be >= 0, got {}".format(train["epochs"]))
    if train["max_lr"] <= 0:
        raise ConfigError("train.max_lr must be positive, got {}".format(train["max_lr"]))
    if train["batch_size"] <= 0:
        raise ConfigError("train.batch_size must be positive, got {}".format(train["batch_size"]))
    if train["patience"] < 0 or train["topk"] < 0:
        raise ConfigError("train.patience and train.topk must be >= 0")
    if not 0.0 <= train["decision_threshold"] <= 1.0:
        raise ConfigError("train.decision_threshold must lie in [0, 1], got {}".format(train["decision_threshold"]))


class TrainConfig:
    """Resolved experiment settings, one dict per section."""

    def __init__(self, sections):
        self.sections = sections

    @classmethod
    def from_dict(cls, raw, seed=None):
        if not isinstance(raw, dict):
            raise ConfigError("config must be a table of sections")
        raw = copy.deepcopy(raw)
        for section, values in raw.items():
            if section not in DEFAULTS:
                raise ConfigError("unknown config section [{}]".format(section))
            if not isinstance(values, dict):
                raise ConfigError("config section [{}] must be a table".format(section))
            for key in values:
                if key not in DEFAULTS[section]:
                    raise ConfigError("unknown config key {}.{}".format(section, key))
        if seed is not None:
            raw.setdefault("train", {})["seed"] = seed
        check_config(raw)

        sections = {}
        for section, defaults in DEFAULTS.items():
            given = raw.get(section, {})
            sections[section] = {
                key: _check_type("{}.{}".format(section, key), given.get(key, default), default)
                for key, default in defaults.items()
            }
        _check_ranges(sections)
        sections["loss"] = LossConfig(**sections["loss"]).to_dict()
        return cls(sections)

    def __getattr__(self, name):
        if name != "sections" and name in DEFAULTS:
            return self.sections[name]
        raise AttributeError(name)

    @property
    def seed(self):
        return self.sections["train"]["seed"]

    @property
    def loss_config(self):
        return LossConfig(**self.sections["loss"])

    def resolve(self, d_in):
        """Fill the width defaults that depend on the data."""
        sections = copy.deepcopy(self.sections)
        model = sections["model"]
        if model["d_f"] is None:
            model["d_f"] = d_in
        if model["domain_hidden"] is None:
            model["domain_hidden"] = 4 * model["d_f"]
        return TrainConfig(sections)

    def replace(self, section, **values):
        sections = copy.deepcopy(self.sections)
        for key, value in values.items():
            if key not in sections[section]:
                raise ConfigError("unknown config key {}.{}".format(section, key))
            sections[section][key] = value
        _check_ranges(sections)
        return TrainConfig(sections)

    def to_dict(self):
        return copy.deepcopy(self.sections)

    def echo(self):
        return json.dumps(self.sections, sort_keys=True, indent=2) + "\n"

    def digest(self):
        return hashlib.sha256(self.echo().encode("utf-8")).hexdigest()


def load_config(path, seed=None):
    """Read a .toml or .json config; ``seed`` overrides train.seed."""
    if not os.path.isfile(path):
        raise ConfigError("config file not found: {}".format(path))
    extension = os.path.splitext(path)[1].lower()
    try:
        if extension == ".json":
            raw = singer.utils.load_json(path)
        else:
            with open(path, "rb") as handle:
                raw = tomllib.load(handle)
    except ValueError as exc:
        raise ConfigError("cannot parse config {}: {}".format(path, exc)) from exc
    cfg = TrainConfig.from_dict(raw, seed=seed)
    LOGGER.info("Loaded config %s (seed %s)", path, cfg.seed)
    return cfg
