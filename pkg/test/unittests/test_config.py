import json
import os
import tempfile
import unittest

from mlagcn import config
from mlagcn.exceptions import ConfigError

TOML = """
[model]
layers = 1
leaky_slope = 0.1

[graph]
tau = 0.4

[train]
seed = 3
epochs = 5
max_lr = 1
"""


class TestFromDict(unittest.TestCase):
    def test_defaults_fill_every_section(self):
        cfg = config.TrainConfig.from_dict({"train": {"seed": 1}})
        self.assertEqual(cfg.seed, 1)
        self.assertEqual(cfg.train["epochs"], 40)
        self.assertEqual(cfg.train["max_lr"], 1e-4)
        self.assertEqual(cfg.graph["adjacency_norm"], "auto")
        self.assertEqual(cfg.graph["composite_norm"], "balanced")
        self.assertEqual(cfg.da["grl_lambda_location"], "objective")
        self.assertIsNone(cfg.model["d_f"])
        self.assertEqual(cfg.loss_config.gamma_neg, 4.0)

    def test_missing_seed_names_the_key(self):
        with self.assertRaises(ConfigError) as context:
            config.TrainConfig.from_dict({"train": {"epochs": 2}})
        self.assertIn("train.seed", str(context.exception))
        self.assertEqual(context.exception.exit_code, 1)

    def test_seed_override(self):
        self.assertEqual(config.TrainConfig.from_dict({}, seed=9).seed, 9)
        self.assertEqual(config.TrainConfig.from_dict({"train": {"seed": 1}}, seed=9).seed, 9)

    def test_unknown_section_and_key(self):
        with self.assertRaises(ConfigError) as context:
            config.TrainConfig.from_dict({"train": {"seed": 1}, "optimizer": {}})
        self.assertIn("optimizer", str(context.exception))
        with self.assertRaises(ConfigError) as context:
            config.TrainConfig.from_dict({"train": {"seed": 1, "momentum": 0.9}})
        self.assertIn("train.momentum", str(context.exception))

    def test_type_and_range_errors(self):
        for section, values in (("train", {"epochs": 2.5}), ("train", {"max_lr": 0.0}), ("train", {"max_lr": "fast"}),
                                ("model", {"layers": 3}), ("model", {"leaky_slope": 1.0}),
                                ("model", {"generator_hidden": [8]}), ("model", {"detach_c": "yes"}),
                                ("graph", {"tau": 1.5}), ("train", {"ablation": "B"}),
                                ("da", {"lambda_schedule": "step"}), ("loss", {"margin": 1.0}),
                                ("model", {"node_features": "file"}), ("graph", {"composite_norm": "mean"})):
            raw = {"train": {"seed": 1}}
            raw.setdefault(section, {}).update(values)
            with self.assertRaises(ConfigError, msg=str(values)):
                config.TrainConfig.from_dict(raw)

    def test_negative_seed_is_a_config_error(self):
        with self.assertRaises(ConfigError) as context:
            config.TrainConfig.from_dict({"train": {"seed": -1}})
        self.assertIn("train.seed", str(context.exception))
        self.assertEqual(context.exception.exit_code, 1)
        with self.assertRaises(ConfigError):
            config.TrainConfig.from_dict({"train": {"seed": 1}}, seed=-3)
        self.assertEqual(config.TrainConfig.from_dict({"train": {"seed": 0}}).seed, 0)

    def test_integers_stay_integers_and_reals_become_floats(self):
        cfg = config.TrainConfig.from_dict({"train": {"seed": 1, "max_lr": 1}, "graph": {"tau": 0}})
        self.assertIsInstance(cfg.train["max_lr"], float)
        self.assertIsInstance(cfg.graph["tau"], float)
        with self.assertRaises(ConfigError):
            config.TrainConfig.from_dict({"train": {"seed": True}})


class TestDerivedValues(unittest.TestCase):
    def test_resolve_widths(self):
        cfg = config.TrainConfig.from_dict({"train": {"seed": 1}}).resolve(6)
        self.assertEqual(cfg.model["d_f"], 6)
        self.assertEqual(cfg.model["domain_hidden"], 24)
        explicit = config.TrainConfig.from_dict({"train": {"seed": 1}, "model": {"generator": "mlp", "d_f": 4,
                                                                                "domain_hidden": 3}})
        self.assertEqual(explicit.resolve(6).model["d_f"], 4)
        self.assertEqual(explicit.resolve(6).model["domain_hidden"], 3)

    def test_replace_checks_ranges(self):
        cfg = config.TrainConfig.from_dict({"train": {"seed": 1}})
        self.assertEqual(cfg.replace("train", ablation="A").train["ablation"], "A")
        self.assertEqual(cfg.train["ablation"], "ABC")
        with self.assertRaises(ConfigError):
            cfg.replace("train", ablation="C")
        with self.assertRaises(ConfigError):
            cfg.replace("train", momentum=0.5)

    def test_echo_and_digest(self):
        first = config.TrainConfig.from_dict({"train": {"seed": 1}})
        second = config.TrainConfig.from_dict({"train": {"seed": 1, "epochs": 40}})
        self.assertEqual(first.echo(), second.echo())
        self.assertEqual(first.digest(), second.digest())
        self.assertNotEqual(first.digest(), config.TrainConfig.from_dict({"train": {"seed": 2}}).digest())
        self.assertEqual(json.loads(first.echo()), first.to_dict())
        self.assertTrue(first.echo().endswith("}\n"))


class TestLoadConfig(unittest.TestCase):
    def test_toml_and_json_agree(self):
        with tempfile.TemporaryDirectory() as directory:
            toml_path = os.path.join(directory, "run.toml")
            with open(toml_path, "w") as handle:
                handle.write(TOML)
            from_toml = config.load_config(toml_path)

            json_path = os.path.join(directory, "run.json")
            with open(json_path, "w") as handle:
                json.dump({"model": {"layers": 1, "leaky_slope": 0.1}, "graph": {"tau": 0.4},
                           "train": {"seed": 3, "epochs": 5, "max_lr": 1}}, handle)
            from_json = config.load_config(json_path)
        self.assertEqual(from_toml.echo(), from_json.echo())
        self.assertEqual(from_toml.model["layers"], 1)
        self.assertEqual(from_toml.train["max_lr"], 1.0)

    def test_seed_flag_overrides_the_file(self):
        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, "run.toml")
            with open(path, "w") as handle:
                handle.write(TOML)
            self.assertEqual(config.load_config(path, seed=42).seed, 42)

    def test_unreadable_files(self):
        with tempfile.TemporaryDirectory() as directory:
            with self.assertRaises(ConfigError):
                config.load_config(os.path.join(directory, "missing.toml"))
            path = os.path.join(directory, "broken.toml")
            with open(path, "w") as handle:
                handle.write("[train\nseed = ")
            with self.assertRaises(ConfigError):
                config.load_config(path)
            path = os.path.join(directory, "broken.json")
            with open(path, "w") as handle:
                handle.write("{\"train\": ")
            with self.assertRaises(ConfigError):
                config.load_config(path)
