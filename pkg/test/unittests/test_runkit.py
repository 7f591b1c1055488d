import csv
import io
import math
import os
import tempfile
import unittest

import numpy as np

from mlagcn import datakit
from mlagcn import losses
from mlagcn import model
from mlagcn import numgrad
from mlagcn import runkit
from mlagcn import throughput
from mlagcn.config import TrainConfig
from mlagcn.exceptions import ContractError, ShapeError


def synth(sample_seed=None, shift=None, samples=48):
    return datakit.generate_synthetic(datakit.SynthSpec(
        n_labels=4, n_clusters=2, samples=samples, feature_dim=5, seed=21, noise_sigma=0.2,
        sample_seed=sample_seed, shift=shift or {"kind": "none"}))


def make_config(**sections):
    raw = {"train": {"seed": 1, "epochs": 2, "batch_size": 16, "max_lr": 0.01}}
    for section, values in sections.items():
        raw.setdefault(section, {}).update(values)
    return TrainConfig.from_dict(raw)


class FixedBatches:
    def __init__(self, rows):
        self.rows = rows

    def next(self):
        return self.rows


class TestAdam(unittest.TestCase):
    def test_zero_gradient_leaves_parameters(self):
        params = {"w": np.array([[1.0, -2.0]])}
        new, state = runkit.adam_step(params, {"w": np.zeros((1, 2))}, runkit.AdamState(), 0.1)
        np.testing.assert_array_equal(new["w"], params["w"])
        self.assertEqual(state.step, 1)

    def test_first_step_moves_by_the_learning_rate(self):
        params = {"w": np.array([[1.0, -2.0, 0.5]])}
        grads = {"w": np.array([[3.0, -0.01, 250.0]])}
        new, _ = runkit.adam_step(params, grads, runkit.AdamState(), 0.01)
        np.testing.assert_allclose(new["w"] - params["w"], -0.01 * np.sign(grads["w"]), rtol=1e-5)

    def test_two_steps_match_a_hand_unroll(self):
        w, lr = 0.5, 0.05
        g1, g2 = 2.0, -1.0
        params, state = {"w": np.array([[w]])}, runkit.AdamState()
        params, state = runkit.adam_step(params, {"w": np.array([[g1]])}, state, lr)
        params, state = runkit.adam_step(params, {"w": np.array([[g2]])}, state, lr)

        m1, v1 = 0.1 * g1, 0.001 * g1 * g1
        w1 = w - lr * (m1 / 0.1) / (math.sqrt(v1 / 0.001) + 1e-8)
        m2, v2 = 0.9 * m1 + 0.1 * g2, 0.999 * v1 + 0.001 * g2 * g2
        w2 = w1 - lr * (m2 / (1 - 0.9 ** 2)) / (math.sqrt(v2 / (1 - 0.999 ** 2)) + 1e-8)
        self.assertAlmostEqual(params["w"][0, 0], w2, places=12)
        self.assertEqual(state.step, 2)

    def test_missing_gradient_counts_as_zero(self):
        params = {"a": np.ones((1, 1)), "b": np.ones((1, 1))}
        new, state = runkit.adam_step(params, {"a": np.ones((1, 1))}, runkit.AdamState(), 0.1)
        self.assertEqual(new["b"][0, 0], 1.0)
        self.assertIn("b", state.m)

    def test_contract_errors(self):
        with self.assertRaises(ShapeError):
            runkit.adam_step({"w": np.ones((2, 2))}, {"w": np.ones((1, 2))}, runkit.AdamState(), 0.1)
        with self.assertRaises(ContractError):
            runkit.adam_step({"w": np.ones((1, 1))}, {}, runkit.AdamState(), 0.0)


class TestSchedules(unittest.TestCase):
    def test_cosine_values(self):
        self.assertEqual(runkit.cosine_lr(0, 10, 1e-4), 1e-4)
        self.assertAlmostEqual(runkit.cosine_lr(5, 10, 1e-4), 5e-5, places=18)
        self.assertAlmostEqual(runkit.cosine_lr(10, 10, 1e-4), 0.0, places=18)
        values = [runkit.cosine_lr(t, 10, 1.0) for t in range(11)]
        self.assertEqual(values, sorted(values, reverse=True))

    def test_cosine_contract(self):
        for t, total in ((0, 0), (-1, 10), (11, 10)):
            with self.assertRaises(ContractError):
                runkit.cosine_lr(t, total, 1e-4)

    def test_ramp(self):
        self.assertEqual(runkit.dann_ramp(0.0), 0.0)
        self.assertAlmostEqual(runkit.dann_ramp(1.0), 2.0 / (1.0 + math.exp(-10.0)) - 1.0)
        self.assertLess(runkit.dann_ramp(0.1), runkit.dann_ramp(0.2))


class TestBatches(unittest.TestCase):
    def test_batches_cover_every_sample_once(self):
        batches = runkit.batch_indices(10, 4, np.random.default_rng(0))
        self.assertEqual([len(rows) for rows in batches], [4, 4, 2])
        self.assertEqual(sorted(np.concatenate(batches)), list(range(10)))

    def test_target_batches_cycle(self):
        supply = runkit.TargetBatches(5, 2, np.random.default_rng(0))
        drawn = [supply.next() for _ in range(6)]
        self.assertEqual([len(rows) for rows in drawn], [2, 2, 1, 2, 2, 1])
        self.assertEqual(sorted(np.concatenate(drawn[:3])), list(range(5)))


class TestSingleDomainTraining(unittest.TestCase):
    def setUp(self):
        self.train, self.val = synth(), synth(sample_seed=1, samples=24)

    def test_zero_epochs_reports_the_untrained_model(self):
        cfg = make_config(train={"epochs": 0})
        artifacts = runkit.train_single(cfg, self.train, self.val)
        self.assertEqual([(row["epoch"], row["split"]) for row in artifacts.metrics_rows], [(0, "train"), (0, "val")])
        bundle = model.build_bundle(artifacts.bundle.graph, 5, 5, np.random.SeedSequence(1).spawn(4)[0],
                                    composite_norm="balanced")
        untrained = runkit.SingleDomainTrainer(cfg.resolve(5))
        untrained.bundle = bundle
        report, _ = untrained.evaluate(self.val)
        self.assertEqual(artifacts.final_report.map, report.map)

    def test_runs_are_reproducible(self):
        cfg = make_config()
        first = runkit.train_single(cfg, self.train, self.val)
        second = runkit.train_single(cfg, self.train, self.val)
        self.assertEqual(first.metrics_csv(), second.metrics_csv())
        header = first.metrics_csv().splitlines()[0]
        self.assertEqual(header, ",".join(runkit.METRICS_COLUMNS))
        self.assertEqual(len(first.metrics_rows), 6)
        for key, value in first.bundle.parameters().items():
            np.testing.assert_array_equal(second.bundle.parameters()[key], value)

    def test_learning_rate_follows_the_cosine(self):
        seen = []
        cfg = make_config(train={"epochs": 2, "batch_size": 16})
        trainer = runkit.SingleDomainTrainer(cfg.resolve(5), on_step=lambda step, bundle: seen.append(step))
        artifacts = trainer.run(self.train, self.val)
        self.assertEqual(seen, list(range(1, 7)))
        last_lr = artifacts.metrics_rows[-1]["lr"]
        self.assertAlmostEqual(last_lr, runkit.cosine_lr(5, 6, 0.01))

    def test_unlabeled_training_data(self):
        hidden = synth(shift={"kind": "affine"})
        with self.assertRaises(ContractError):
            runkit.train_single(make_config(), hidden, self.val)

    def test_short_run_beats_the_untrained_model(self):
        def twelve_labels(samples, sample_seed=None):
            return datakit.generate_synthetic(datakit.SynthSpec(
                n_labels=12, n_clusters=3, samples=samples, feature_dim=8, seed=2024, noise_sigma=0.5,
                sample_seed=sample_seed))
        cfg = make_config(model={"layers": 1}, train={"ablation": "ABC", "epochs": 5, "batch_size": 32})
        artifacts = runkit.train_single(cfg, twelve_labels(400), twelve_labels(200, sample_seed=1))
        untrained = [row for row in artifacts.metrics_rows if row["epoch"] == 0 and row["split"] == "val"][0]
        self.assertGreater(artifacts.final_report.map, untrained["map"])

    def test_throughput_starts_fresh_each_run(self):
        throughput.capture("stale", 5)
        try:
            runkit.train_single(make_config(), self.train, self.val)
            rates = dict(throughput.throughput_data["aggregate_rates"])
        finally:
            throughput.reset()
        self.assertNotIn("stale", rates)
        self.assertEqual(sum(rates["step"]), 6)
        self.assertEqual(sum(rates["sample"]), 2 * 48)

    def test_write_artifacts(self):
        artifacts = runkit.train_single(make_config(train={"epochs": 1}), self.train, self.val)
        with tempfile.TemporaryDirectory() as directory:
            artifacts.write(directory)
            names = sorted(os.listdir(directory))
            with open(os.path.join(directory, "config.json")) as handle:
                echoed = handle.read()
        self.assertEqual(names, ["config.json", "metrics.csv", "model", "report.csv", "report.json"])
        self.assertEqual(echoed, artifacts.config_echo)


class TestDomainAdversarialTraining(unittest.TestCase):
    def setUp(self):
        self.source = synth()
        self.target = synth(sample_seed=2, shift={"kind": "affine", "rotation_seed": 5})
        self.target_val = synth(sample_seed=3, samples=24, shift={"kind": "affine", "rotation_seed": 5}).reveal()

    def test_target_with_visible_labels_is_refused(self):
        with self.assertRaises(ContractError):
            runkit.train_da(make_config(), self.source, self.target.reveal(), self.target_val)

    def test_domain_rows(self):
        artifacts = runkit.train_da(make_config(), self.source, self.target, self.target_val)
        self.assertEqual([row["epoch"] for row in artifacts.domain_rows], [1, 2])
        lines = list(csv.reader(io.StringIO(artifacts.domain_csv())))
        self.assertEqual(lines[0], list(runkit.DOMAIN_COLUMNS))
        self.assertIn("domain_loss_paper_form", lines[0])
        for row in artifacts.domain_rows:
            self.assertGreaterEqual(row["domain_accuracy"], 0.0)
            self.assertLessEqual(row["domain_accuracy"], 1.0)
            self.assertEqual(row["lambda"], 1.0)
        self.assertIn("dom.0.weight", artifacts.bundle.parameters())

    def test_ramp_schedule_starts_at_zero(self):
        trainer = runkit.DomainAdversarialTrainer(make_config(da={"lambda_schedule": "dann_ramp"}).resolve(5))
        trainer.total_steps = 10
        self.assertEqual(trainer.current_lambda(), 0.0)
        trainer.step = 10
        self.assertAlmostEqual(trainer.current_lambda(), runkit.dann_ramp(1.0))

    def test_zero_lambda_matches_single_domain_training(self):
        cfg = make_config(model={"generator": "mlp", "generator_hidden": [6], "d_f": 4}, loss={"lambda_d": 0.0})
        single_steps, da_steps = [], []
        runkit.train_single(cfg, self.source, self.target_val,
                            on_step=lambda step, bundle: single_steps.append(bundle.copy().parameters()))
        runkit.train_da(cfg, self.source, self.target, self.target_val,
                        on_step=lambda step, bundle: da_steps.append(bundle.copy().parameters()))
        self.assertEqual(len(single_steps), len(da_steps))
        for plain, adapted in zip(single_steps, da_steps):
            for key, value in plain.items():
                np.testing.assert_array_equal(adapted[key], value)


def plain_domain_probs(clf, feats):
    """The domain classifier without a reversal layer."""
    tape = feats.tape
    hidden = numgrad.add_row(numgrad.matmul(feats, tape.leaf("dom.0.weight", clf.params["dom.0.weight"])),
                             tape.leaf("dom.0.bias", clf.params["dom.0.bias"]))
    hidden = numgrad.leaky_relu(hidden, clf.leaky_slope)
    logits = numgrad.add_row(numgrad.matmul(hidden, tape.leaf("dom.1.weight", clf.params["dom.1.weight"])),
                             tape.leaf("dom.1.bias", clf.params["dom.1.bias"]))
    return numgrad.sigmoid(logits)


class TestMinMaxStep(unittest.TestCase):
    """One optimiser step through the reversal layer against two separate passes."""

    def one_step(self, location, lam=0.7):
        source = synth()
        target = synth(sample_seed=2, shift={"kind": "affine", "rotation_seed": 5})
        cfg = make_config(model={"generator": "mlp", "generator_hidden": [6], "d_f": 4},
                          loss={"lambda_d": lam}, da={"grl_lambda_location": location}).resolve(5)
        trainer = runkit.DomainAdversarialTrainer(cfg)
        trainer.bundle = trainer.build(source)
        trainer.total_steps = 10
        source_rows, target_rows = np.arange(8), np.arange(4, 12)
        trainer.target_batches = FixedBatches(target_rows)
        before = trainer.bundle.copy()

        tape = numgrad.Tape()
        _, probs = model.forward(before, source.features[source_rows], tape)
        classification = tape.backward(losses.asl_loss(probs, source.labels[source_rows], cfg.loss_config,
                                                       strict=False))
        tape = numgrad.Tape()
        feats = numgrad.concat_rows(model.generate_features(before.generator, source.features[source_rows], tape),
                                    model.generate_features(before.generator, target.features[target_rows], tape))
        d = np.concatenate([np.zeros(8), np.ones(8)])
        domain = tape.backward(losses.domain_loss(plain_domain_probs(before.domain_clf, feats), d, strict=False))

        grads = {}
        for key in before.parameters():
            g_c = classification.get(key, 0.0)
            g_d = domain.get(key, 0.0)
            if key.startswith("gen."):
                grads[key] = g_c - lam * g_d
            elif key.startswith("dom."):
                grads[key] = (lam if location == "objective" else 1.0) * g_d
            else:
                grads[key] = g_c
        expected, _ = runkit.adam_step(before.parameters(), grads, runkit.AdamState(), 0.01)

        trainer.train_step(source, source_rows, target)
        return expected, trainer.bundle.parameters()

    def test_lambda_in_the_objective(self):
        expected, actual = self.one_step("objective")
        for key, value in expected.items():
            np.testing.assert_allclose(actual[key], value, atol=1e-10, err_msg=key)

    def test_lambda_in_the_reversal_layer(self):
        expected, actual = self.one_step("grl")
        for key, value in expected.items():
            np.testing.assert_allclose(actual[key], value, atol=1e-10, err_msg=key)


class TestAblation(unittest.TestCase):
    def test_table_layout(self):
        train, val = synth(), synth(sample_seed=1, samples=24)
        rows = runkit.ablate(make_config(train={"epochs": 1}), train, val, n_seeds=2)
        self.assertEqual([row["variant"] for row in rows], ["A", "A+B", "A+B+C"])
        self.assertEqual(rows[0]["delta_map"], 0.0)
        for row in rows:
            self.assertAlmostEqual(row["mean_map"], (row["map_seed_1"] + row["map_seed_2"]) / 2.0)
        self.assertEqual(runkit.ablation_csv(rows).splitlines()[0], "variant,mean_map,delta_map,map_seed_1,map_seed_2")
        with tempfile.TemporaryDirectory() as directory:
            path = runkit.write_ablation(rows, os.path.join(directory, "tables", "ablation.csv"))
            self.assertTrue(os.path.isfile(path))

    def test_seed_count(self):
        with self.assertRaises(ContractError):
            runkit.ablation_seeds(make_config(), 0)
        self.assertEqual(runkit.ablation_seeds(make_config(), 3), [1, 2, 3])
