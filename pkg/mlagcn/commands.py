import os

import singer
import singer.utils

from mlagcn import datakit
from mlagcn import gradcheck
from mlagcn import metrics
from mlagcn import model
from mlagcn import persist
from mlagcn import runkit
from mlagcn.config import load_config
from mlagcn.exceptions import ConfigError, ContractError, UsageError

LOGGER = singer.get_logger()


class Command:
    name = None
    help = None

    def add_arguments(self, parser):
        pass

    def run(self, args):
        raise NotImplementedError()


class TrainingCommand(Command):
    """Shared flags of the commands that read a training config."""

    def add_arguments(self, parser):
        parser.add_argument("--config", required=True, help="TOML or JSON experiment config")
        parser.add_argument("--seed", type=int, default=None, help="overrides train.seed")

    def config(self, args):
        return load_config(args.config, seed=args.seed)


class GenSynth(Command):
    name = "gen-synth"
    help = "generate a synthetic multi-label dataset"

    def add_arguments(self, parser):
        parser.add_argument("--spec", required=True, help="JSON synthetic dataset spec")
        parser.add_argument("--out", required=True, help="output dataset directory")

    def run(self, args):
        try:
            raw = singer.utils.load_json(args.spec)
        except (OSError, ValueError) as exc:
            raise ConfigError("cannot read synthetic spec {}: {}".format(args.spec, exc)) from exc
        dataset = datakit.generate_synthetic(datakit.SynthSpec.from_dict(raw, path=args.spec))
        datakit.save_dataset(dataset, args.out)
        return 0


class Train(TrainingCommand):
    name = "train"
    help = "train ML-AGCN on a labeled split"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--train", required=True, help="training dataset (directory or manifest)")
        parser.add_argument("--val", required=True, help="validation dataset")
        parser.add_argument("--out", required=True, help="run directory")

    def run(self, args):
        cfg = self.config(args)
        artifacts = runkit.train_single(cfg, datakit.load_dataset(args.train), datakit.load_dataset(args.val))
        artifacts.write(args.out)
        return 0


class TrainDa(TrainingCommand):
    name = "train-da"
    help = "train DA-AGCN on a labeled source and an unlabeled target"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--source", required=True, help="labeled source dataset")
        parser.add_argument("--target", required=True, help="unlabeled target dataset")
        parser.add_argument("--target-val", required=True, help="labeled target validation dataset")
        parser.add_argument("--out", required=True, help="run directory")

    def run(self, args):
        cfg = self.config(args)
        artifacts = runkit.train_da(cfg, datakit.load_dataset(args.source), datakit.load_dataset(args.target),
                                    datakit.load_dataset(args.target_val))
        artifacts.write(args.out)
        return 0


class Eval(Command):
    name = "eval"
    help = "score a saved model on a labeled dataset"

    def add_arguments(self, parser):
        parser.add_argument("--model", required=True, help="model directory")
        parser.add_argument("--data", required=True, help="labeled dataset")
        parser.add_argument("--out", required=True, help="report JSON path; a .csv twin is written next to it")
        parser.add_argument("--threshold", type=float, default=0.5, help="decision threshold for P/R/F1")
        parser.add_argument("--topk", type=int, default=0, help="predict the top k labels instead")

    def run(self, args):
        bundle, _ = persist.load_model(args.model)
        dataset = datakit.load_dataset(args.data)
        dataset.require_labels("evaluation")
        if tuple(dataset.label_names) != tuple(bundle.graph.label_names):
            raise ContractError("dataset labels {} do not match the model labels {}".format(
                list(dataset.label_names), list(bundle.graph.label_names)))
        probs = model.predict(bundle, dataset.features)
        report = metrics.evaluate(probs.value, dataset.labels, decision_threshold=args.threshold, topk=args.topk)

        directory = os.path.dirname(args.out)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(args.out, "w") as handle:
            handle.write(report.to_json())
        with open(os.path.splitext(args.out)[0] + ".csv", "w") as handle:
            handle.write(report.to_csv())
        LOGGER.info("mAP %.4f, CF1 %.4f, OF1 %.4f on %d samples", report.map, report.cf1, report.of1,
                    dataset.n_samples)
        return 0


class Ablate(TrainingCommand):
    name = "ablate"
    help = "multi-seed ablation of the adjacency (A, A+B, A+B+C) or of the model blocks"

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--train", help="labeled training dataset (single-domain ablation)")
        parser.add_argument("--val", help="labeled validation dataset (single-domain ablation)")
        parser.add_argument("--source", help="labeled source dataset (domain-shift ablation)")
        parser.add_argument("--target", help="unlabeled target dataset (domain-shift ablation)")
        parser.add_argument("--target-val", help="labeled target validation dataset (domain-shift ablation)")
        parser.add_argument("--seeds", type=int, default=5, help="number of seeds, counted up from train.seed")
        parser.add_argument("--blocks", action="store_true",
                            help="compare linear head, AGCN head and AGCN with domain classifier")
        parser.add_argument("--out", required=True, help="ablation table CSV")

    def run(self, args):
        shifted = args.source or args.target or args.target_val
        if shifted or args.blocks:
            if not (args.source and args.target and args.target_val):
                raise UsageError("domain-shift ablations need --source, --target and --target-val")
            if args.train or args.val:
                raise UsageError("--train/--val cannot be combined with --source/--target")
        elif not (args.train and args.val):
            raise UsageError("ablate needs --train and --val, or --source, --target and --target-val")

        cfg = self.config(args)
        if args.blocks:
            rows = runkit.ablate_blocks(cfg, datakit.load_dataset(args.source), datakit.load_dataset(args.target),
                                        datakit.load_dataset(args.target_val), n_seeds=args.seeds)
        elif shifted:
            rows = runkit.ablate(cfg, datakit.load_dataset(args.source), datakit.load_dataset(args.target_val),
                                 n_seeds=args.seeds, target=datakit.load_dataset(args.target))
        else:
            rows = runkit.ablate(cfg, datakit.load_dataset(args.train), datakit.load_dataset(args.val),
                                 n_seeds=args.seeds)
        runkit.write_ablation(rows, args.out)
        return 0


class Gradcheck(Command):
    name = "gradcheck"
    help = "compare analytic gradients with central differences"

    def add_arguments(self, parser):
        parser.add_argument("--trials", type=int, default=gradcheck.DEFAULT_TRIALS)
        parser.add_argument("--tol", type=float, default=gradcheck.DEFAULT_TOL)
        parser.add_argument("--seed", type=int, default=7)

    def run(self, args):
        gradcheck.run_suite(trials=args.trials, tol=args.tol, seed=args.seed)
        return 0


COMMANDS = {
    "gen-synth": GenSynth,
    "train": Train,
    "train-da": TrainDa,
    "eval": Eval,
    "ablate": Ablate,
    "gradcheck": Gradcheck,
}
