"""mAP and the per-class / overall precision, recall and F1 aggregates."""
import json
from dataclasses import dataclass, field

import numpy as np
import singer

from mlagcn.exceptions import ContractError, ShapeError

LOGGER = singer.get_logger()

REPORT_KEYS = ("map", "cp", "cr", "cf1", "op", "or", "of1")


@dataclass(frozen=True)
class EvalFrame:
    scores: np.ndarray
    targets: np.ndarray
    decision_threshold: float = 0.5
    topk: int = 0

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        targets = np.asarray(self.targets)
        if scores.ndim != 2 or scores.shape != targets.shape:
            raise ShapeError("scores {} and targets {} must be matching 2-D matrices".format(
                scores.shape, targets.shape))
        if not np.all(np.isfinite(scores)):
            raise ContractError("scores contain NaN or Inf entries")
        if not np.all((targets == 0) | (targets == 1)):
            raise ContractError("targets must contain only 0 and 1")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "targets", targets.astype(np.int64))


@dataclass
class MetricsReport:
    map: float
    cp: float
    cr: float
    cf1: float
    op_: float
    or_: float
    of1: float
    per_label_ap: list = field(default_factory=list)
    excluded_labels: list = field(default_factory=list)

    def to_dict(self):
        return {
            "map": self.map,
            "cp": self.cp,
            "cr": self.cr,
            "cf1": self.cf1,
            "op": self.op_,
            "or": self.or_,
            "of1": self.of1,
            "per_label_ap": list(self.per_label_ap),
            "excluded_labels": list(self.excluded_labels),
        }

    def values(self):
        return [self.map, self.cp, self.cr, self.cf1, self.op_, self.or_, self.of1]

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def to_csv(self):
        return ",".join(REPORT_KEYS) + "\n" + ",".join(repr(float(v)) for v in self.values()) + "\n"


def f1_score(precision, recall):
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def ranking(scores):
    """Indices by descending score; equal scores keep ascending sample order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def average_precision(scores, targets):
    """Mean of precision@k over the ranks k of the positives; None when there are no positives."""
    targets = np.asarray(targets)
    if targets.sum() == 0:
        return None
    hits = targets[ranking(scores)] == 1
    ranks = np.flatnonzero(hits) + 1.0
    precision_at_hits = np.arange(1, len(ranks) + 1) / ranks
    return float(precision_at_hits.mean())


def mean_average_precision(frame):
    per_label = []
    excluded = []
    for label in range(frame.targets.shape[1]):
        ap = average_precision(frame.scores[:, label], frame.targets[:, label])
        per_label.append(ap)
        if ap is None:
            excluded.append(label)
    kept = [ap for ap in per_label if ap is not None]
    if not kept:
        raise ContractError("no label has a positive sample; mAP is undefined")
    return float(np.mean(kept)), per_label, excluded


def predicted_positives(frame):
    if frame.topk > 0:
        k = min(frame.topk, frame.scores.shape[1])
        chosen = np.zeros(frame.scores.shape, dtype=bool)
        for row, scores in enumerate(frame.scores):
            chosen[row, ranking(scores)[:k]] = True
        return chosen
    return frame.scores >= frame.decision_threshold


def prf_aggregates(frame):
    """(cp, cr, cf1, op, or, of1); classes with nothing predicted / nothing present count as 0."""
    predicted = predicted_positives(frame)
    actual = frame.targets == 1
    true_pos = (predicted & actual).sum(axis=0).astype(np.float64)
    n_predicted = predicted.sum(axis=0).astype(np.float64)
    n_actual = actual.sum(axis=0).astype(np.float64)

    per_class_p = np.where(n_predicted > 0, true_pos / np.where(n_predicted > 0, n_predicted, 1.0), 0.0)
    per_class_r = np.where(n_actual > 0, true_pos / np.where(n_actual > 0, n_actual, 1.0), 0.0)
    cp = float(per_class_p.mean())
    cr = float(per_class_r.mean())

    pooled_tp = true_pos.sum()
    op_ = float(pooled_tp / n_predicted.sum()) if n_predicted.sum() > 0 else 0.0
    or_ = float(pooled_tp / n_actual.sum()) if n_actual.sum() > 0 else 0.0
    return cp, cr, f1_score(cp, cr), op_, or_, f1_score(op_, or_)


def evaluate(scores, targets, decision_threshold=0.5, topk=0):
    frame = EvalFrame(scores, targets, decision_threshold, topk)
    map_, per_label, excluded = mean_average_precision(frame)
    if excluded:
        LOGGER.warning("%d label(s) have no positive sample and are left out of mAP: %s",
                       len(excluded), excluded)
    cp, cr, cf1, op_, or_, of1 = prf_aggregates(frame)
    return MetricsReport(map_, cp, cr, cf1, op_, or_, of1, per_label, excluded)
