"""Analytic gradients of every primitive and of the composed objectives against central differences."""
import sys

import numpy as np
import singer

from mlagcn import labelgraph
from mlagcn import losses
from mlagcn import model
from mlagcn import numgrad
from mlagcn.exceptions import ContractError, GradcheckFailure

LOGGER = singer.get_logger()

DEFAULT_TRIALS = 100
DEFAULT_TOL = 1e-5
ABSOLUTE_FLOOR = 1e-8
STEP = 1e-6
MAX_SIDE = 8


def relative_error(analytic, numeric, tol=DEFAULT_TOL, atol=ABSOLUTE_FLOOR):
    """Largest entrywise |a - n| / max(|a|, |n|, atol / tol).

    The floor makes an absolute difference of ``atol`` count exactly as a
    relative difference of ``tol``.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol / tol)
    return float(np.max(np.abs(analytic - numeric) / scale))


def _side(rng, low=1):
    return int(rng.integers(low, MAX_SIDE + 1))


def _away_from(rng, shape, point=0.0, gap=0.1):
    """Normal draws pushed at least ``gap`` away from a kink at ``point``."""
    values = rng.normal(size=shape)
    return point + np.sign(values) * (np.abs(values) + gap)


# Each case returns (inputs, forward[, numeric_factor]). ``forward`` maps the
# tape and the leaf nodes to an output node; the analytic gradient is compared
# with numeric_factor times the central difference of the forward value.

def _matmul_case(rng):
    r, k, c = _side(rng), _side(rng), _side(rng)
    return {"a": rng.normal(size=(r, k)), "b": rng.normal(size=(k, c))}, \
        lambda tape, x: numgrad.matmul(x["a"], x["b"])


def _add_case(rng):
    shape = (_side(rng), _side(rng))
    return {"a": rng.normal(size=shape), "b": rng.normal(size=shape)}, \
        lambda tape, x: numgrad.add(x["a"], x["b"])


def _sub_case(rng):
    shape = (_side(rng), _side(rng))
    return {"a": rng.normal(size=shape), "b": rng.normal(size=shape)}, \
        lambda tape, x: numgrad.sub(x["a"], x["b"])


def _scale_case(rng):
    factor = float(rng.normal())
    return {"x": rng.normal(size=(_side(rng), _side(rng)))}, \
        lambda tape, x: numgrad.scale(x["x"], factor)


def _hadamard_case(rng):
    shape = (_side(rng), _side(rng))
    return {"a": rng.normal(size=shape), "b": rng.normal(size=shape)}, \
        lambda tape, x: numgrad.hadamard(x["a"], x["b"])


def _concat_cols_case(rng):
    rows = _side(rng)
    return {"a": rng.normal(size=(rows, _side(rng))), "b": rng.normal(size=(rows, _side(rng)))}, \
        lambda tape, x: numgrad.concat_cols(x["a"], x["b"])


def _row_sum_case(rng):
    return {"x": rng.normal(size=(_side(rng), _side(rng)))}, lambda tape, x: numgrad.row_sum(x["x"])


def _total_sum_case(rng):
    return {"x": rng.normal(size=(_side(rng), _side(rng)))}, lambda tape, x: numgrad.total_sum(x["x"])


def _mean_case(rng):
    return {"x": rng.normal(size=(_side(rng), _side(rng)))}, lambda tape, x: numgrad.mean(x["x"])


def _log_case(rng):
    return {"x": rng.uniform(0.2, 3.0, size=(_side(rng), _side(rng)))}, lambda tape, x: numgrad.log(x["x"])


def _power_case(rng):
    exponent = float(rng.choice([0.5, 2.0, 3.0, 4.0, 1.5]))
    return {"x": rng.uniform(0.2, 2.0, size=(_side(rng), _side(rng)))}, \
        lambda tape, x: numgrad.power(x["x"], exponent)


def _transpose_case(rng):
    return {"x": rng.normal(size=(_side(rng), _side(rng)))}, lambda tape, x: numgrad.transpose(x["x"])


def _add_row_case(rng):
    rows, cols = _side(rng), _side(rng)
    return {"x": rng.normal(size=(rows, cols)), "row": rng.normal(size=(1, cols))}, \
        lambda tape, x: numgrad.add_row(x["x"], x["row"])


def _leaky_relu_case(rng):
    slope = float(rng.uniform(0.05, 0.5))
    return {"x": _away_from(rng, (_side(rng), _side(rng)))}, \
        lambda tape, x: numgrad.leaky_relu(x["x"], slope)


def _sigmoid_case(rng):
    return {"x": 3.0 * rng.normal(size=(_side(rng), _side(rng)))}, lambda tape, x: numgrad.sigmoid(x["x"])


def _row_softmax_case(rng):
    return {"x": 2.0 * rng.normal(size=(_side(rng), _side(rng)))}, lambda tape, x: numgrad.row_softmax(x["x"])


def _cosine_row_pairs_case(rng):
    return {"f": rng.normal(size=(_side(rng), _side(rng)))}, lambda tape, x: numgrad.cosine_row_pairs(x["f"])


def _row_max_case(rng):
    rows, cols = _side(rng), _side(rng)
    # distinct entries per row keep the argmax stable under the finite-difference step
    values = np.stack([rng.permutation(cols) * 0.5 + rng.uniform(0.0, 0.1, size=cols) for _ in range(rows)])
    return {"x": values}, lambda tape, x: numgrad.row_max(x["x"])


def _clamp_min_case(rng):
    floor = float(rng.normal())
    return {"x": _away_from(rng, (_side(rng), _side(rng)), point=floor)}, \
        lambda tape, x: numgrad.clamp_min(x["x"], floor)


def _reverse_gradient_case(rng):
    factor = float(rng.uniform(0.0, 2.0))
    return {"x": rng.normal(size=(_side(rng), _side(rng)))}, \
        lambda tape, x: numgrad.reverse_gradient(x["x"], factor), -factor


def _shared_input_case(rng):
    side = _side(rng)

    def forward(tape, x):
        return numgrad.add(numgrad.hadamard(x["x"], x["x"]), numgrad.matmul(x["x"], numgrad.transpose(x["x"])))
    return {"x": rng.normal(size=(side, side))}, forward


def _small_graph(rng, n_labels, width, positive=False):
    adjacency = rng.uniform(0.0, 1.0, size=(n_labels, n_labels))
    node_features = rng.uniform(0.1, 0.6, size=(n_labels, width)) if positive else 0.5 * rng.normal(size=(n_labels, width))
    return labelgraph.LabelGraph(
        label_names=tuple("l{}".format(i) for i in range(n_labels)),
        node_features=node_features,
        cooccurrence=adjacency,
        fixed_adj=labelgraph.normalize_adjacency(adjacency, "row"),
    )


def _agcn_subnet_case(rng):
    n_labels, width = int(rng.integers(1, 6)), int(rng.integers(1, 5))
    composite_norm = str(rng.choice(labelgraph.COMPOSITE_NORMS))
    # balanced rows of C divide by |C|; positive inputs keep the cosines clear of its kink
    balanced = composite_norm == "balanced"
    n_layers = 1 if balanced else int(rng.integers(1, 3))
    graph = _small_graph(rng, n_labels, width, positive=balanced)
    inputs = {"f0": graph.node_features}
    layers = []
    for index, (fan_in, fan_out) in enumerate(labelgraph.layer_widths(width, width, n_layers)):
        layer = labelgraph.AdaptiveLayerParams("gcn.{}".format(index),
                                               rng.normal(size=(fan_in, fan_out)) / np.sqrt(fan_in),
                                               0.5 * rng.normal(size=(2 * fan_out, 1)))
        inputs.update(layer.params)
        layers.append(layer)

    def forward(tape, x):
        return labelgraph.gcn_subnet_forward(graph, layers, "ABC", tape=tape, node_features=x["f0"],
                                             composite_norm=composite_norm)
    return inputs, forward


def _absolute_case(rng):
    return {"x": _away_from(rng, (_side(rng), _side(rng)))}, lambda tape, x: numgrad.absolute(x["x"])


def _log_sigmoid_case(rng):
    return {"x": 3.0 * rng.normal(size=(_side(rng), _side(rng)))}, lambda tape, x: numgrad.log_sigmoid(x["x"])


def _unit_abs_rows_case(rng):
    return {"x": _away_from(rng, (_side(rng), _side(rng)))}, lambda tape, x: labelgraph.unit_abs_rows(x["x"])


PRIMITIVE_CASES = {
    "matmul": _matmul_case,
    "add": _add_case,
    "sub": _sub_case,
    "scale": _scale_case,
    "hadamard": _hadamard_case,
    "concat_cols": _concat_cols_case,
    "row_sum": _row_sum_case,
    "total_sum": _total_sum_case,
    "mean": _mean_case,
    "log": _log_case,
    "power": _power_case,
    "transpose": _transpose_case,
    "add_row": _add_row_case,
    "leaky_relu": _leaky_relu_case,
    "sigmoid": _sigmoid_case,
    "row_softmax": _row_softmax_case,
    "cosine_row_pairs": _cosine_row_pairs_case,
    "row_max": _row_max_case,
    "clamp_min": _clamp_min_case,
    "reverse_gradient": _reverse_gradient_case,
    "absolute": _absolute_case,
    "log_sigmoid": _log_sigmoid_case,
    "unit_abs_rows": _unit_abs_rows_case,
    "shared_input": _shared_input_case,
    "agcn_subnet": _agcn_subnet_case,
}


def _weighted_sum(output, weights):
    """Scalar that exercises every entry of the output with its own weight."""
    return numgrad.total_sum(numgrad.hadamard(output, output.tape.constant(weights)))


def check_case(inputs, forward, rng, numeric_factor=1.0, tol=DEFAULT_TOL, h=STEP):
    """Worst relative error over every input of one random instance."""
    tape = numgrad.Tape()
    leaves = {name: tape.leaf(name, value) for name, value in inputs.items()}
    output = forward(tape, leaves)
    # unit variance whatever the output size
    weights = rng.normal(size=output.shape) / np.sqrt(output.value.size)
    analytic = tape.backward(_weighted_sum(output, weights))

    worst = 0.0
    for name, value in inputs.items():
        def scalar(p, name=name):
            fresh = numgrad.Tape()
            fresh_leaves = {key: fresh.leaf(key, p if key == name else other) for key, other in inputs.items()}
            return _weighted_sum(forward(fresh, fresh_leaves), weights).value[0, 0]
        numeric = numeric_factor * numgrad.finite_diff_grad(scalar, value, h)
        worst = max(worst, relative_error(analytic[name], numeric, tol))
    return worst


def asl_objective_error(rng, tol=DEFAULT_TOL, h=STEP):
    """Asymmetric loss through a sigmoid, differentiated w.r.t. the logits."""
    n, n_labels = int(rng.integers(1, 5)), int(rng.integers(1, 7))
    cfg = losses.LossConfig(gamma_pos=float(rng.uniform(0.0, 2.0)), gamma_neg=float(rng.uniform(0.0, 5.0)),
                            margin=float(rng.uniform(0.0, 0.2)), lambda_d=1.0)
    logits = rng.normal(size=(n, n_labels))
    targets = (rng.random((n, n_labels)) < 0.5).astype(np.float64)

    def loss_value(p):
        tape = numgrad.Tape()
        return losses.asl_loss(numgrad.sigmoid(tape.leaf("logits", p)), targets, cfg).value[0, 0]

    tape = numgrad.Tape()
    analytic = tape.backward(losses.asl_loss(numgrad.sigmoid(tape.leaf("logits", logits)), targets, cfg))
    return relative_error(analytic["logits"], numgrad.finite_diff_grad(loss_value, logits, h), tol)


def _toy_bundle(rng):
    n_labels, d_in, d_f = int(rng.integers(1, 6)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
    graph = _small_graph(rng, n_labels, d_in)
    bundle = model.build_bundle(graph, d_in, d_f, np.random.SeedSequence(int(rng.integers(2 ** 31))),
                                generator="mlp", generator_hidden=[int(rng.integers(1, 5))], layers=1,
                                domain_hidden=int(rng.integers(1, 5)), with_domain=True)
    n_source, n_target = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    return bundle, {
        "source": rng.normal(size=(n_source, d_in)),
        "target": rng.normal(size=(n_target, d_in)),
        "targets": (rng.random((n_source, n_labels)) < 0.5).astype(np.float64),
    }


def _branch_losses(bundle, batch, cfg, grl_factor, tape):
    source_feats, probs = model.forward(bundle, batch["source"], tape)
    l_c = losses.asl_loss(probs, batch["targets"], cfg)
    target_feats = model.generate_features(bundle.generator, batch["target"], tape)
    d_hat = model.classify_domain(bundle.domain_clf, numgrad.concat_rows(source_feats, target_feats), grl_factor)
    d = np.concatenate([np.zeros(len(batch["source"])), np.ones(len(batch["target"]))])
    return l_c, losses.domain_loss(d_hat, d)


def grl_objective_error(rng, tol=DEFAULT_TOL, h=STEP):
    """L_c + w L_d with the domain branch behind a GRL of factor g.

    The expected gradient is dL_c + w dL_d for the classifier and domain
    parameters and dL_c - g w dL_d for the generator, each term taken by
    central differences of the plain forward values.
    """
    bundle, batch = _toy_bundle(rng)
    cfg = losses.LossConfig(gamma_pos=0.0, gamma_neg=float(rng.uniform(0.0, 4.0)),
                            margin=float(rng.uniform(0.0, 0.1)), lambda_d=float(rng.uniform(0.0, 2.0)))
    grl_factor = float(rng.uniform(0.0, 2.0))

    tape = numgrad.Tape()
    l_c, l_d = _branch_losses(bundle, batch, cfg, grl_factor, tape)
    analytic = tape.backward(losses.total_objective(l_c, l_d, cfg))

    params = bundle.parameters()
    worst = 0.0
    for name, value in params.items():
        seen = {}

        def branch(p, which, name=name, seen=seen):
            key = p.tobytes()
            if key not in seen:
                trial = bundle.copy()
                trial.assign({name: p})
                seen[key] = [node.value[0, 0] for node in _branch_losses(trial, batch, cfg, grl_factor, numgrad.Tape())]
            return seen[key][which]
        d_c = numgrad.finite_diff_grad(lambda p: branch(p, 0), value, h)
        d_d = numgrad.finite_diff_grad(lambda p: branch(p, 1), value, h)
        sign = -grl_factor if name.startswith("gen.") else 1.0
        expected = d_c + sign * cfg.lambda_d * d_d
        worst = max(worst, relative_error(analytic.get(name, np.zeros_like(value)), expected, tol))
    return worst


OBJECTIVE_CASES = {
    "asl_objective": asl_objective_error,
    "grl_objective": grl_objective_error,
}


def run_suite(trials=DEFAULT_TRIALS, tol=DEFAULT_TOL, seed=7, out=None):
    """Check every primitive and objective on ``trials`` random instances.

    Writes one line per check with its largest relative error and returns the
    ``{name: max_error}`` map; raises GradcheckFailure if any check exceeds ``tol``.
    """
    if trials <= 0:
        raise ContractError("gradcheck needs at least one trial, got {}".format(trials))
    if not tol > 0:
        raise ContractError("gradcheck tolerance must be positive, got {}".format(tol))
    if seed < 0:
        raise ContractError("gradcheck seed must be >= 0, got {}".format(seed))
    out = out or sys.stdout
    children = np.random.SeedSequence(seed).spawn(len(PRIMITIVE_CASES) + len(OBJECTIVE_CASES))
    results = {}
    LOGGER.info("Starting gradcheck: %d trials per check, tolerance %g, seed %d", trials, tol, seed)

    names = list(PRIMITIVE_CASES) + list(OBJECTIVE_CASES)
    for name, child in zip(names, children):
        rng = np.random.default_rng(child)
        worst = 0.0
        for _ in range(trials):
            if name in PRIMITIVE_CASES:
                inputs, forward, *factor = PRIMITIVE_CASES[name](rng)
                error = check_case(inputs, forward, rng, factor[0] if factor else 1.0, tol)
            else:
                error = OBJECTIVE_CASES[name](rng, tol)
            worst = max(worst, error)
        results[name] = worst
        out.write("{:<18} max rel error {:.3e}  {}\n".format(name, worst, "ok" if worst < tol else "FAIL"))

    failed = sorted(name for name, worst in results.items() if not worst < tol)
    if failed:
        raise GradcheckFailure("gradient check failed for: {}".format(", ".join(failed)))
    LOGGER.info("Gradcheck passed: %d checks", len(results))
    return results
