"""Adam, the cosine schedule, the single-domain and domain-adversarial trainers, and the ablation harness.

All randomness of a run flows from ``train.seed``: the seed sequence is split
into independent streams for initialisation, source shuffling, target
shuffling and learned node features, so enabling the domain branch never
perturbs the draws of the classification path.
"""
import csv
import io
import math
import os
from dataclasses import dataclass, field

import numpy as np
import singer

from mlagcn import labelgraph
from mlagcn import losses
from mlagcn import metrics
from mlagcn import model
from mlagcn import numgrad
from mlagcn import persist
from mlagcn import throughput
from mlagcn.exceptions import ContractError, DivergenceError, ShapeError

LOGGER = singer.get_logger()

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8

METRICS_COLUMNS = ("epoch", "split", "map", "cp", "cr", "cf1", "op", "or", "of1", "loss", "lr")
DOMAIN_COLUMNS = ("epoch", "domain_loss", "domain_accuracy", "domain_loss_paper_form", "lambda")

ABLATION_VARIANTS = (("A", "A"), ("A+B", "AB"), ("A+B+C", "ABC"))
BLOCK_VARIANTS = ("linear (source only)", "agcn (source only)", "agcn + domain classifier")


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``.

    Parameters without a gradient entry are treated as having a zero gradient.
    """
    if not lr > 0:
        raise ContractError("learning rate must be positive, got {}".format(lr))
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(value)
        if grad.shape != value.shape:
            raise ShapeError("gradient for {} has shape {}, parameter is {}".format(
                name, numgrad.shape_str(grad.shape), numgrad.shape_str(value.shape)))
        m = BETA1 * state.m.get(name, np.zeros_like(value)) + (1.0 - BETA1) * grad
        v = BETA2 * state.v.get(name, np.zeros_like(value)) + (1.0 - BETA2) * grad * grad
        m_hat = m / (1.0 - BETA1 ** t)
        v_hat = v / (1.0 - BETA2 ** t)
        new_params[name] = value - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(t, new_m, new_v)


def cosine_lr(t, T, max_lr):
    if T <= 0:
        raise ContractError("total steps must be positive, got {}".format(T))
    if t < 0 or t > T:
        raise ContractError("step {} lies outside [0, {}]".format(t, T))
    return max_lr * 0.5 * (1.0 + math.cos(math.pi * t / T))


def dann_ramp(progress):
    """2 / (1 + exp(-10 p)) - 1, rising from 0 at p = 0 towards 1."""
    return 2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0


def batch_indices(n_samples, batch_size, rng):
    """Seeded permutation cut into batches; the last partial batch is kept."""
    order = rng.permutation(n_samples)
    return [order[start:start + batch_size] for start in range(0, n_samples, batch_size)]


class TargetBatches:
    """Endless supply of target batches, reshuffled each time the set is used up."""

    def __init__(self, n_samples, batch_size, rng):
        self.n_samples = n_samples
        self.batch_size = batch_size
        self.rng = rng
        self.pending = []

    def next(self):
        if not self.pending:
            self.pending = batch_indices(self.n_samples, self.batch_size, self.rng)
        return self.pending.pop(0)


@dataclass
class RunArtifacts:
    metrics_rows: list
    final_report: metrics.MetricsReport
    bundle: model.ModelBundle
    config_echo: str
    config_digest: str
    domain_rows: list = field(default_factory=list)
    stopped_early: bool = False

    def metrics_csv(self):
        return _csv_text(METRICS_COLUMNS, self.metrics_rows)

    def domain_csv(self):
        return _csv_text(DOMAIN_COLUMNS, self.domain_rows)

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        files = {
            "metrics.csv": self.metrics_csv(),
            "report.json": self.final_report.to_json(),
            "report.csv": self.final_report.to_csv(),
            "config.json": self.config_echo,
        }
        if self.domain_rows:
            files["domain.csv"] = self.domain_csv()
        for name, text in files.items():
            with open(os.path.join(out_dir, name), "w", newline="") as handle:
                handle.write(text)
        persist.save_model(self.bundle, os.path.join(out_dir, "model"), self.config_digest)
        LOGGER.info("Wrote run artifacts to %s", out_dir)


def _format(value):
    if isinstance(value, float):
        return repr(value)
    return value


def _csv_text(columns, rows):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_format(row[column]) for column in columns])
    return buffer.getvalue()


def _check_labeled(ds, role):
    ds.require_labels(role)
    if ds.n_samples == 0:
        raise ContractError("{} dataset is empty".format(role))


def _check_compatible(reference, other, role):
    if tuple(other.label_names) != tuple(reference.label_names):
        raise ContractError("{} labels {} do not match the training labels {}".format(
            role, list(other.label_names), list(reference.label_names)))
    if other.feature_dim != reference.feature_dim:
        raise ContractError("{} has {} features, training data has {}".format(
            role, other.feature_dim, reference.feature_dim))


class SingleDomainTrainer:
    """Minimises the asymmetric loss on a labeled training split."""
    name = "single"
    with_domain = False

    def __init__(self, cfg, on_step=None):
        self.cfg = cfg
        self.on_step = on_step
        self.loss_cfg = cfg.loss_config
        self.metrics_rows = []
        self.domain_rows = []
        self.bundle = None
        self.state = AdamState()
        self.step = 0
        self.total_steps = 0
        init_seq, shuffle_seq, target_seq, graph_seq = np.random.SeedSequence(cfg.seed).spawn(4)
        self.init_seq = init_seq
        self.shuffle_rng = np.random.default_rng(shuffle_seq)
        self.target_rng = np.random.default_rng(target_seq)
        self.graph_rng = np.random.default_rng(graph_seq)

    def build(self, source):
        model_cfg = self.cfg.model
        graph = labelgraph.build_label_graph(
            source.labels, source.features, source.label_names,
            tau=self.cfg.graph["tau"],
            adjacency_norm=self.cfg.graph["adjacency_norm"],
            node_features=model_cfg["node_features"],
            node_features_path=model_cfg["node_features_path"] or None,
            rng=self.graph_rng)
        return model.build_bundle(
            graph, source.feature_dim, model_cfg["d_f"], self.init_seq,
            generator=model_cfg["generator"],
            generator_hidden=model_cfg["generator_hidden"],
            layers=model_cfg["layers"],
            head=model_cfg["head"],
            domain_hidden=model_cfg["domain_hidden"],
            with_domain=self.with_domain,
            leaky_slope=model_cfg["leaky_slope"],
            init_scale=model_cfg["init_scale"],
            ablation=self.cfg.train["ablation"],
            detach_c=model_cfg["detach_c"],
            composite_norm=self.cfg.graph["composite_norm"])

    def evaluate(self, ds):
        """(MetricsReport, ASL loss) of the current bundle on a labeled split."""
        tape = numgrad.Tape()
        probs = model.predict(self.bundle, ds.features, tape=tape)
        loss = losses.asl_loss(probs, ds.labels, self.loss_cfg, strict=False)
        report = metrics.evaluate(probs.value, ds.labels,
                                  decision_threshold=self.cfg.train["decision_threshold"],
                                  topk=self.cfg.train["topk"])
        return report, float(loss.value[0, 0])

    def _record(self, epoch, split, report, loss, lr):
        row = {"epoch": epoch, "split": split, "loss": loss, "lr": lr}
        row.update({key: value for key, value in zip(metrics.REPORT_KEYS, report.values())})
        self.metrics_rows.append(row)

    def objective(self, tape, source, rows, target=None):
        """Scalar to minimise for one batch, plus per-batch diagnostics."""
        _, probs = model.forward(self.bundle, source.features[rows], tape)
        l_c = losses.asl_loss(probs, source.labels[rows], self.loss_cfg, strict=False)
        return l_c, {"loss": float(l_c.value[0, 0])}

    def train_step(self, source, rows, target=None):
        tape = numgrad.Tape()
        root, details = self.objective(tape, source, rows, target)
        if not np.isfinite(root.value).all():
            raise DivergenceError("loss became {} at step {}".format(root.value[0, 0], self.step))
        grads = tape.backward(root)
        for name, grad in grads.items():
            if not np.isfinite(grad).all():
                raise DivergenceError("gradient of {} is not finite at step {}".format(name, self.step))
        lr = cosine_lr(self.step, self.total_steps, self.cfg.train["max_lr"])
        new_params, self.state = adam_step(self.bundle.parameters(), grads, self.state, lr)
        self.bundle.assign(new_params)
        self.step += 1
        details["lr"] = lr
        throughput.capture("step")
        throughput.capture("sample", len(rows))
        LOGGER.debug("Step %d: loss %.6f, lr %.3g", self.step, details["loss"], lr)
        if self.on_step is not None:
            self.on_step(self.step, self.bundle)
        return details

    def end_epoch(self, epoch, steps):
        """Hook for per-epoch bookkeeping beyond the metrics rows."""

    def run(self, source, val, target=None):
        _check_labeled(source, "training")
        _check_labeled(val, "validation")
        _check_compatible(source, val, "validation split")
        train_cfg = self.cfg.train
        LOGGER.info("Starting %s training: %d samples, %d labels, %d epochs, ablation %s",
                    self.name, source.n_samples, source.n_labels, train_cfg["epochs"], train_cfg["ablation"])

        throughput.reset()
        self.bundle = self.build(source)
        n_batches = math.ceil(source.n_samples / train_cfg["batch_size"])
        self.total_steps = train_cfg["epochs"] * n_batches
        lr = train_cfg["max_lr"]

        report, loss = self.evaluate(source)
        self._record(0, "train", report, loss, lr)
        report, loss = self.evaluate(val)
        self._record(0, "val", report, loss, lr)
        LOGGER.info("Untrained model: val mAP %.4f", report.map)

        best_map = report.map
        stale = 0
        stopped_early = False
        for epoch in range(1, train_cfg["epochs"] + 1):
            steps = []
            for rows in batch_indices(source.n_samples, train_cfg["batch_size"], self.shuffle_rng):
                steps.append(self.train_step(source, rows, target))
            lr = steps[-1]["lr"]
            train_loss = float(np.mean([details["loss"] for details in steps]))
            report, _ = self.evaluate(source)
            self._record(epoch, "train", report, train_loss, lr)
            report, loss = self.evaluate(val)
            self._record(epoch, "val", report, loss, lr)
            self.end_epoch(epoch, steps)
            LOGGER.info("Epoch %d/%d: train loss %.4f, val loss %.4f, val mAP %.4f, lr %.3g",
                        epoch, train_cfg["epochs"], train_loss, loss, report.map, lr)

            if report.map > best_map:
                best_map = report.map
                stale = 0
            else:
                stale += 1
            if train_cfg["patience"] and stale >= train_cfg["patience"]:
                LOGGER.warning("Stopping after epoch %d: val mAP has not improved for %d epochs",
                               epoch, stale)
                stopped_early = True
                break

        throughput.log_aggregate_rates()
        LOGGER.info("Finished %s training: val mAP %.4f", self.name, report.map)
        return RunArtifacts(metrics_rows=self.metrics_rows, final_report=report, bundle=self.bundle,
                            config_echo=self.cfg.echo(), config_digest=self.cfg.digest(),
                            domain_rows=self.domain_rows, stopped_early=stopped_early)


class DomainAdversarialTrainer(SingleDomainTrainer):
    """Adds the domain classifier behind a gradient reversal layer.

    Each source batch is paired with one target batch; the domain loss sees the
    features of both, labelled 0 (source) and 1 (target).
    """
    name = "da"
    with_domain = True

    def __init__(self, cfg, on_step=None):
        super().__init__(cfg, on_step)
        self.target_batches = None

    def current_lambda(self):
        lam = self.loss_cfg.lambda_d
        if self.cfg.da["lambda_schedule"] == "dann_ramp":
            lam *= dann_ramp(self.step / self.total_steps if self.total_steps else 0.0)
        return lam

    def objective(self, tape, source, rows, target=None):
        lam = self.current_lambda()
        if self.cfg.da["grl_lambda_location"] == "grl":
            weight, grl_factor = 1.0, lam
        else:
            weight, grl_factor = lam, 1.0

        source_feats, probs = model.forward(self.bundle, source.features[rows], tape)
        l_c = losses.asl_loss(probs, source.labels[rows], self.loss_cfg, strict=False)

        target_rows = self.target_batches.next()
        target_feats = model.generate_features(self.bundle.generator, target.features[target_rows], tape)
        d_hat = model.classify_domain(self.bundle.domain_clf, numgrad.concat_rows(source_feats, target_feats),
                                      grl_factor)
        d = np.concatenate([np.zeros(len(rows)), np.ones(len(target_rows))]).reshape(-1, 1)
        l_d = losses.domain_loss(d_hat, d, strict=False)

        total = losses.total_objective(l_c, l_d, self.loss_cfg, weight=weight)
        predicted = (d_hat.value >= 0.5).astype(np.float64)
        return total, {
            "loss": float(l_c.value[0, 0]),
            "domain_loss": float(l_d.value[0, 0]),
            "domain_accuracy": float(np.mean(predicted == d)),
            "domain_loss_paper_form": losses.domain_loss_paper_form(d_hat.value, d),
            "lambda": lam,
        }

    def end_epoch(self, epoch, steps):
        row = {"epoch": epoch, "lambda": steps[-1]["lambda"]}
        for key in ("domain_loss", "domain_accuracy", "domain_loss_paper_form"):
            row[key] = float(np.mean([details[key] for details in steps]))
        self.domain_rows.append(row)
        LOGGER.info("Epoch %d: domain loss %.4f, domain accuracy %.3f, lambda %.3g",
                    epoch, row["domain_loss"], row["domain_accuracy"], row["lambda"])

    def run(self, source, val, target=None):
        if target is None:
            raise ContractError("domain-adversarial training needs a target dataset")
        if target.has_visible_labels:
            raise ContractError("target training data must not carry visible labels")
        if target.n_samples == 0:
            raise ContractError("target dataset is empty")
        if target.feature_dim != source.feature_dim:
            raise ContractError("target has {} features, source has {}".format(
                target.feature_dim, source.feature_dim))
        self.target_batches = TargetBatches(target.n_samples, self.cfg.train["batch_size"], self.target_rng)
        return super().run(source, val, target)


TRAINERS = {
    "single": SingleDomainTrainer,
    "da": DomainAdversarialTrainer,
}


def train_single(cfg, train, val, on_step=None):
    cfg = cfg.resolve(train.feature_dim)
    return TRAINERS["single"](cfg, on_step).run(train, val)


def train_da(cfg, source, target, target_val, on_step=None):
    cfg = cfg.resolve(source.feature_dim)
    return TRAINERS["da"](cfg, on_step).run(source, target_val, target)


def _table(variants, maps_by_variant, seeds):
    base = float(np.mean(maps_by_variant[variants[0]]))
    rows = []
    for variant in variants:
        mean_map = float(np.mean(maps_by_variant[variant]))
        row = {"variant": variant, "mean_map": mean_map, "delta_map": mean_map - base}
        for seed, value in zip(seeds, maps_by_variant[variant]):
            row["map_seed_{}".format(seed)] = value
        rows.append(row)
        LOGGER.info("%s: mean mAP %.4f (%+.4f)", variant, mean_map, mean_map - base)
    return rows


def ablation_seeds(cfg, n_seeds):
    if n_seeds <= 0:
        raise ContractError("ablation needs at least one seed, got {}".format(n_seeds))
    return [cfg.seed + offset for offset in range(n_seeds)]


def ablate(cfg, train, val, n_seeds=5, target=None):
    """mAP of the A / A+B / A+B+C adjacency variants under identical seeds.

    With ``target`` the variants are trained domain-adversarially and ``val``
    is the labeled target split.
    """
    seeds = ablation_seeds(cfg, n_seeds)
    maps = {}
    for variant, ablation in ABLATION_VARIANTS:
        maps[variant] = []
        for seed in seeds:
            run_cfg = cfg.replace("train", ablation=ablation, seed=seed).replace("model", head="agcn")
            if target is None:
                artifacts = train_single(run_cfg, train, val)
            else:
                artifacts = train_da(run_cfg, train, target, val)
            maps[variant].append(artifacts.final_report.map)
    return _table([variant for variant, _ in ABLATION_VARIANTS], maps, seeds)


def ablate_blocks(cfg, source, target, target_val, n_seeds=5):
    """Linear head, AGCN head and AGCN with the domain classifier, all scored on the target split."""
    seeds = ablation_seeds(cfg, n_seeds)
    maps = {variant: [] for variant in BLOCK_VARIANTS}
    for seed in seeds:
        seeded = cfg.replace("train", seed=seed)
        linear = seeded.replace("model", head="linear")
        agcn = seeded.replace("model", head="agcn")
        maps[BLOCK_VARIANTS[0]].append(train_single(linear, source, target_val).final_report.map)
        maps[BLOCK_VARIANTS[1]].append(train_single(agcn, source, target_val).final_report.map)
        maps[BLOCK_VARIANTS[2]].append(train_da(agcn, source, target, target_val).final_report.map)
    return _table(list(BLOCK_VARIANTS), maps, seeds)


def ablation_csv(rows):
    columns = ["variant", "mean_map", "delta_map"] + [key for key in rows[0] if key.startswith("map_seed_")]
    return _csv_text(columns, rows)


def write_ablation(rows, path):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", newline="") as handle:
        handle.write(ablation_csv(rows))
    LOGGER.info("Wrote ablation table (%d rows) to %s", len(rows), path)
    return path
