import contextlib
import csv
import io
import json
import os
import shutil
import tempfile
import unittest
from unittest import mock

from mlagcn import cli
from mlagcn import metrics
from mlagcn.exceptions import DivergenceError

CONFIG = """
[model]
layers = 1

[train]
seed = 4
epochs = 2
batch_size = 16
max_lr = 0.01
"""


def synth_spec(**overrides):
    spec = {"n_labels": 4, "n_clusters": 2, "samples": 40, "feature_dim": 5, "seed": 13, "noise_sigma": 0.2}
    spec.update(overrides)
    return spec


def quiet(argv):
    with contextlib.redirect_stdout(io.StringIO()), contextlib.redirect_stderr(io.StringIO()):
        return cli(argv)


class TestExitCodes(unittest.TestCase):
    def setUp(self):
        self.directory = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.directory)

    def path(self, name):
        return os.path.join(self.directory, name)

    def write(self, name, text):
        with open(self.path(name), "w") as handle:
            handle.write(text)
        return self.path(name)

    def test_gradcheck_passes(self):
        self.assertEqual(quiet(["gradcheck", "--trials", "1"]), 0)

    def test_usage_errors(self):
        self.assertEqual(quiet([]), 1)
        self.assertEqual(quiet(["fit"]), 1)
        self.assertEqual(quiet(["gradcheck", "--shots", "3"]), 1)
        self.assertEqual(quiet(["train", "--config", "x.toml"]), 1)

    def test_help(self):
        self.assertEqual(quiet(["--help"]), 0)

    def test_missing_seed(self):
        spec = self.write("spec.json", json.dumps(synth_spec()))
        self.assertEqual(quiet(["gen-synth", "--spec", spec, "--out", self.path("train")]), 0)
        config = self.write("run.toml", "[train]\nepochs = 1\n")
        code = quiet(["train", "--config", config, "--train", self.path("train"), "--val", self.path("train"),
                      "--out", self.path("run")])
        self.assertEqual(code, 1)
        self.assertFalse(os.path.exists(self.path("run")))

    def test_bad_synthetic_spec(self):
        spec = self.write("spec.json", json.dumps(synth_spec(n_clusters=9)))
        self.assertEqual(quiet(["gen-synth", "--spec", spec, "--out", self.path("train")]), 1)
        spec = self.write("broken.json", "{")
        self.assertEqual(quiet(["gen-synth", "--spec", spec, "--out", self.path("train")]), 1)

    def test_negative_seeds_and_short_bias_exit_with_one(self):
        spec = self.write("spec.json", json.dumps(synth_spec(seed=-1)))
        self.assertEqual(quiet(["gen-synth", "--spec", spec, "--out", self.path("train")]), 1)
        spec = self.write("spec.json", json.dumps(synth_spec(shift={"kind": "affine", "bias": [0.5, 0.5]})))
        self.assertEqual(quiet(["gen-synth", "--spec", spec, "--out", self.path("train")]), 1)
        self.assertFalse(os.path.exists(self.path("train")))

        spec = self.write("spec.json", json.dumps(synth_spec()))
        self.assertEqual(quiet(["gen-synth", "--spec", spec, "--out", self.path("train")]), 0)
        config = self.write("run.toml", CONFIG.replace("seed = 4", "seed = -4"))
        argv = ["train", "--config", config, "--train", self.path("train"), "--val", self.path("train"),
                "--out", self.path("run")]
        self.assertEqual(quiet(argv), 1)
        config = self.write("run.toml", CONFIG)
        self.assertEqual(quiet(argv[:2] + [config] + argv[3:] + ["--seed", "-2"]), 1)
        self.assertEqual(quiet(["gradcheck", "--trials", "1", "--seed", "-1"]), 1)

    def test_failed_runs_exit_with_two(self):
        spec = self.write("spec.json", json.dumps(synth_spec()))
        quiet(["gen-synth", "--spec", spec, "--out", self.path("train")])
        config = self.write("run.toml", CONFIG)
        argv = ["train", "--config", config, "--train", self.path("train"), "--val", self.path("train"),
                "--out", self.path("run")]
        with mock.patch("mlagcn.runkit.train_single", side_effect=DivergenceError("loss became nan")):
            self.assertEqual(quiet(argv), 2)
        with mock.patch("mlagcn.runkit.train_single", side_effect=RuntimeError("boom")):
            self.assertEqual(quiet(argv), 2)

    def test_ablate_argument_combinations(self):
        config = self.write("run.toml", CONFIG)
        self.assertEqual(quiet(["ablate", "--config", config, "--out", self.path("a.csv")]), 1)
        self.assertEqual(quiet(["ablate", "--config", config, "--train", "t", "--source", "s",
                                "--out", self.path("a.csv")]), 1)
        self.assertEqual(quiet(["ablate", "--config", config, "--blocks", "--train", "t", "--val", "v",
                                "--out", self.path("a.csv")]), 1)


class TestPipeline(unittest.TestCase):
    def setUp(self):
        self.directory = tempfile.mkdtemp()
        self.config = os.path.join(self.directory, "run.toml")
        with open(self.config, "w") as handle:
            handle.write(CONFIG)
        specs = {
            "train": synth_spec(),
            "val": synth_spec(sample_seed=1, samples=20),
            "target": synth_spec(sample_seed=2, shift={"kind": "affine", "rotation_seed": 3}),
            "target_val": synth_spec(sample_seed=3, samples=20, shift={"kind": "affine", "rotation_seed": 3},
                                     reveal_labels=True),
        }
        for name, spec in specs.items():
            path = os.path.join(self.directory, name + ".json")
            with open(path, "w") as handle:
                json.dump(spec, handle)
            self.assertEqual(quiet(["gen-synth", "--spec", path, "--out", self.data(name)]), 0)

    def tearDown(self):
        shutil.rmtree(self.directory)

    def data(self, name):
        return os.path.join(self.directory, "data", name)

    def test_train_then_eval(self):
        run = os.path.join(self.directory, "run")
        self.assertEqual(quiet(["train", "--config", self.config, "--train", self.data("train"),
                                "--val", self.data("val"), "--out", run]), 0)
        with open(os.path.join(run, "metrics.csv")) as handle:
            rows = list(csv.DictReader(handle))
        self.assertEqual([(row["epoch"], row["split"]) for row in rows][-2:], [("2", "train"), ("2", "val")])

        report_path = os.path.join(self.directory, "eval", "report.json")
        self.assertEqual(quiet(["eval", "--model", os.path.join(run, "model"), "--data", self.data("val"),
                                "--out", report_path]), 0)
        with open(report_path) as handle:
            report = json.load(handle)
        for key in metrics.REPORT_KEYS:
            self.assertGreaterEqual(report[key], 0.0)
            self.assertLessEqual(report[key], 1.0)
        with open(os.path.join(run, "report.json")) as handle:
            self.assertAlmostEqual(json.load(handle)["map"], report["map"], places=10)
        self.assertTrue(os.path.isfile(os.path.join(self.directory, "eval", "report.csv")))

    def test_eval_needs_labels(self):
        run = os.path.join(self.directory, "run")
        quiet(["train", "--config", self.config, "--train", self.data("train"), "--val", self.data("val"),
               "--out", run])
        self.assertEqual(quiet(["eval", "--model", os.path.join(run, "model"), "--data", self.data("target"),
                                "--out", os.path.join(self.directory, "r.json")]), 1)

    def test_domain_adaptation_and_ablation(self):
        run = os.path.join(self.directory, "da")
        self.assertEqual(quiet(["train-da", "--config", self.config, "--source", self.data("train"),
                                "--target", self.data("target"), "--target-val", self.data("target_val"),
                                "--out", run]), 0)
        self.assertTrue(os.path.isfile(os.path.join(run, "domain.csv")))
        self.assertEqual(quiet(["train-da", "--config", self.config, "--source", self.data("train"),
                                "--target", self.data("target_val"), "--target-val", self.data("target_val"),
                                "--out", os.path.join(self.directory, "leaky")]), 1)

        table = os.path.join(self.directory, "ablation.csv")
        self.assertEqual(quiet(["ablate", "--config", self.config, "--train", self.data("train"),
                                "--val", self.data("val"), "--seeds", "1", "--out", table]), 0)
        with open(table) as handle:
            self.assertEqual([row["variant"] for row in csv.DictReader(handle)], ["A", "A+B", "A+B+C"])
