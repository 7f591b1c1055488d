"""Asymmetric classification loss, domain loss and the combined objective.

Both losses are written as quantities to minimise: the asymmetric loss is the
negated mean log-likelihood, and the domain loss is plain binary cross-entropy
that the gradient reversal layer turns adversarial for the generator.
"""
import math
from dataclasses import asdict, dataclass

import numpy as np

from mlagcn import numgrad
from mlagcn.exceptions import ConfigError, ContractError, ShapeError


@dataclass(frozen=True)
class LossConfig:
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    margin: float = 0.05
    lambda_d: float = 1.0

    def __post_init__(self):
        for key in ("gamma_pos", "gamma_neg", "margin", "lambda_d"):
            value = getattr(self, key)
            if not isinstance(value, (int, float)) or isinstance(value, bool) or not math.isfinite(value):
                raise ConfigError("loss.{} must be a finite number, got {!r}".format(key, value))
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise ConfigError("loss.gamma_pos and loss.gamma_neg must be >= 0")
        if not 0.0 <= self.margin < 1.0:
            raise ConfigError("loss.margin must lie in [0, 1), got {}".format(self.margin))
        if self.lambda_d < 0:
            raise ConfigError("loss.lambda_d must be >= 0, got {}".format(self.lambda_d))

    def to_dict(self):
        return asdict(self)


def _targets(targets, shape, name):
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim == 1:
        targets = targets.reshape(-1, 1)
    if targets.shape != shape:
        raise ShapeError("{} shape {} does not match predictions {}".format(
            name, numgrad.shape_str(targets.shape), numgrad.shape_str(shape)))
    if not np.all((targets == 0.0) | (targets == 1.0)):
        raise ContractError("{} must contain only 0 and 1".format(name))
    return targets


def _check_open_interval(node, name):
    if np.any(node.value <= 0.0) or np.any(node.value >= 1.0):
        raise ContractError("{} must lie strictly inside (0, 1)".format(name))


def asl_loss(probs, targets, cfg, strict=True):
    """Mean over samples of the summed per-label asymmetric loss.

    When ``probs`` is a sigmoid node the log terms are taken from its logits.
    ``strict`` rejects probabilities at exactly 0 or 1. Trainers pass False
    because float64 sigmoids saturate for large logits.
    """
    targets = _targets(targets, probs.shape, "targets")
    if strict:
        _check_open_interval(probs, "probabilities")
    tape = probs.tape

    positives = tape.constant(targets)
    negatives = tape.constant(1.0 - targets)
    logits = probs.inputs[0] if probs.op == numgrad.Op.SIGMOID else None
    log_p = numgrad.log(probs) if logits is None else numgrad.log_sigmoid(logits)
    positive_terms = numgrad.hadamard(numgrad.power(numgrad.one_minus(probs), cfg.gamma_pos), log_p)

    shifted = numgrad.clamp_min(numgrad.sub(probs, tape.constant(np.full(probs.shape, cfg.margin))), 0.0)
    if logits is not None and cfg.margin == 0.0:
        log_q = numgrad.log_sigmoid(numgrad.scale(logits, -1.0))
    else:
        # with a positive margin 1 - shifted >= margin stays above the log floor
        log_q = numgrad.log(numgrad.one_minus(shifted))
    negative_terms = numgrad.hadamard(numgrad.power(shifted, cfg.gamma_neg), log_q)

    likelihood = numgrad.add(numgrad.hadamard(positives, positive_terms),
                             numgrad.hadamard(negatives, negative_terms))
    return numgrad.scale(numgrad.total_sum(likelihood), -1.0 / probs.shape[0])


def domain_loss(d_hat, d, strict=True):
    """Binary cross-entropy of the domain predictions; d = 0 source, d = 1 target."""
    d = _targets(d, d_hat.shape, "domain labels")
    if strict:
        _check_open_interval(d_hat, "domain predictions")
    tape = d_hat.tape
    if d_hat.op == numgrad.Op.SIGMOID:
        logits = d_hat.inputs[0]
        log_source, log_target = numgrad.log_sigmoid(numgrad.scale(logits, -1.0)), numgrad.log_sigmoid(logits)
    else:
        log_source, log_target = numgrad.log(numgrad.one_minus(d_hat)), numgrad.log(d_hat)
    likelihood = numgrad.add(numgrad.hadamard(tape.constant(1.0 - d), log_source),
                             numgrad.hadamard(tape.constant(d), log_target))
    return numgrad.scale(numgrad.total_sum(likelihood), -1.0 / d_hat.shape[0])


def domain_loss_paper_form(d_hat, d, floor=numgrad.LOG_FLOOR):
    """E_s log(1/d-hat) + E_t log(1/(1 - d-hat)) from values only; reported, never optimised."""
    d_hat = np.asarray(d_hat, dtype=np.float64).reshape(-1)
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    total = 0.0
    source = d_hat[d == 0.0]
    target = d_hat[d == 1.0]
    if source.size:
        total += float(np.mean(-np.log(np.maximum(source, floor))))
    if target.size:
        total += float(np.mean(-np.log(np.maximum(1.0 - target, floor))))
    return total


def total_objective(l_c, l_d, cfg, weight=None):
    """L_c + lambda * L_d; ``weight`` overrides lambda (1.0 when lambda sits in the GRL)."""
    if l_d is None:
        return l_c
    weight = cfg.lambda_d if weight is None else weight
    return numgrad.add(l_c, numgrad.scale(l_d, weight))
