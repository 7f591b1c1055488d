"""Label graph construction and the adaptive graph convolution layer.

The fixed adjacency A comes from label co-occurrence in the training split.
Each layer adds two learned adjacencies: B, from pairwise attention with the
self-importance boost on the diagonal, and C, the cosine similarity of the
layer's input node features.
"""
import csv
import math
from dataclasses import dataclass, field

import numpy as np
import singer

from mlagcn import numgrad
from mlagcn.exceptions import ConfigError, ContractError, DataFormatError, ShapeError

LOGGER = singer.get_logger()

ABLATIONS = ("A", "AB", "ABC")
ADJACENCY_NORMS = ("auto", "row", "sym")
COMPOSITE_NORMS = ("sum", "balanced")
NODE_FEATURE_MODES = ("prototype", "file", "learned")
MAX_LAYERS = 2


@dataclass(frozen=True)
class LabelGraph:
    label_names: tuple
    node_features: np.ndarray
    cooccurrence: np.ndarray
    fixed_adj: np.ndarray
    threshold: float = 0.0
    adjacency_norm: str = "row"
    node_feature_mode: str = "prototype"

    @property
    def n_labels(self):
        return len(self.label_names)


class AdaptiveLayerParams:
    """W^l and a^(l) of one layer, stored under ``<name>.weight`` and ``<name>.attn``."""

    def __init__(self, name, weight, attn_vec, leaky_slope=0.2):
        weight = numgrad.as_matrix(weight, name + ".weight")
        attn_vec = numgrad.as_matrix(attn_vec, name + ".attn")
        if attn_vec.shape != (2 * weight.shape[1], 1):
            raise ShapeError("{}: attention vector must be {}x1 for weight {}, got {}".format(
                name, 2 * weight.shape[1], numgrad.shape_str(weight.shape), numgrad.shape_str(attn_vec.shape)))
        self.name = name
        self.leaky_slope = leaky_slope
        self.params = {self.weight_key: weight, self.attn_key: attn_vec}

    @property
    def weight_key(self):
        return self.name + ".weight"

    @property
    def attn_key(self):
        return self.name + ".attn"

    @property
    def weight(self):
        return self.params[self.weight_key]

    @property
    def attn_vec(self):
        return self.params[self.attn_key]

    @property
    def in_width(self):
        return self.weight.shape[0]

    @property
    def out_width(self):
        return self.weight.shape[1]

    def nodes(self, tape):
        return tape.leaf(self.weight_key, self.weight), tape.leaf(self.attn_key, self.attn_vec)


def _binary_matrix(labels, name="labels"):
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeError("{} must be a 2-D binary matrix".format(name))
    if not np.all((labels == 0) | (labels == 1)):
        raise ContractError("{} must contain only 0 and 1".format(name))
    return labels.astype(np.float64)


def co_occurrence_matrix(labels):
    """p_ij = P(label j | label i) estimated by counting; rows of absent labels are zero."""
    labels = _binary_matrix(labels)
    if labels.shape[0] < 1:
        raise ContractError("co-occurrence needs at least one labelled sample")
    counts = labels.T @ labels
    occurrences = np.diag(counts).copy()
    present = occurrences > 0
    probs = np.zeros_like(counts)
    probs[present] = counts[present] / occurrences[present][:, None]
    return probs


def threshold_adjacency(p, tau):
    if not 0.0 <= tau <= 1.0:
        raise ConfigError("graph.tau must lie in [0, 1], got {}".format(tau))
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ContractError("co-occurrence probabilities must lie in [0, 1]")
    return (p >= tau).astype(np.float64)


def normalize_adjacency(a, scheme):
    a = np.asarray(a, dtype=np.float64)
    if np.any(a < 0.0):
        raise ContractError("adjacency to normalize must be nonnegative")
    if scheme == "row":
        sums = a.sum(axis=1, keepdims=True)
        return np.where(sums > 0.0, a / np.where(sums > 0.0, sums, 1.0), 0.0)
    if scheme == "sym":
        with_self = a + np.eye(a.shape[0])
        inv_sqrt = 1.0 / np.sqrt(with_self.sum(axis=1))
        return inv_sqrt[:, None] * with_self * inv_sqrt[None, :]
    raise ConfigError("graph.adjacency_norm must be one of row, sym; got {!r}".format(scheme))


def fixed_adjacency(cooccurrence, tau=0.0, adjacency_norm="auto"):
    """A as used by the layers: raw probabilities when tau is 0, thresholded otherwise."""
    if adjacency_norm not in ADJACENCY_NORMS:
        raise ConfigError("graph.adjacency_norm must be one of {}; got {!r}".format(
            ", ".join(ADJACENCY_NORMS), adjacency_norm))
    if not 0.0 <= tau <= 1.0:
        raise ConfigError("graph.tau must lie in [0, 1], got {}".format(tau))
    adjacency = threshold_adjacency(cooccurrence, tau) if tau > 0.0 else np.asarray(cooccurrence, dtype=np.float64)
    scheme = adjacency_norm
    if scheme == "auto":
        scheme = "sym" if tau > 0.0 else "row"
    return normalize_adjacency(adjacency, scheme), scheme


def prototype_node_features(features, labels):
    """Mean training feature vector of the samples carrying each label (zeros if none do)."""
    labels = _binary_matrix(labels)
    features = np.asarray(features, dtype=np.float64)
    counts = labels.sum(axis=0)
    sums = labels.T @ features
    return np.where(counts[:, None] > 0, sums / np.where(counts > 0, counts, 1.0)[:, None], 0.0)


def build_label_graph(labels, features, label_names, tau=0.0, adjacency_norm="auto",
                      node_features="prototype", node_features_path=None, rng=None):
    if node_features not in NODE_FEATURE_MODES:
        raise ConfigError("model.node_features must be one of {}; got {!r}".format(
            ", ".join(NODE_FEATURE_MODES), node_features))
    cooccurrence = co_occurrence_matrix(labels)
    adjacency, scheme = fixed_adjacency(cooccurrence, tau, adjacency_norm)

    if node_features == "prototype":
        initial = prototype_node_features(features, labels)
    elif node_features == "file":
        if not node_features_path:
            raise ConfigError("model.node_features_path is required when model.node_features = 'file'")
        initial = read_node_features_csv(node_features_path, label_names)
    else:
        if rng is None:
            raise ContractError("learned node features need a random generator")
        width = np.asarray(features).shape[1]
        initial = rng.normal(0.0, 1.0 / math.sqrt(width), size=(len(label_names), width))

    absent = [name for name, row in zip(label_names, cooccurrence) if not row.any()]
    if absent:
        LOGGER.warning("Labels never present in the training split: %s", ", ".join(absent))
    LOGGER.info("Built label graph: %d labels, tau=%s, %s normalization, %s node features",
                len(label_names), tau, scheme, node_features)
    return LabelGraph(label_names=tuple(label_names),
                      node_features=numgrad.as_matrix(initial, "node_features"),
                      cooccurrence=cooccurrence,
                      fixed_adj=adjacency,
                      threshold=tau,
                      adjacency_norm=scheme,
                      node_feature_mode=node_features)


def attention_scores(f, params):
    """e_ij = LeakyReLU(a^T [W f_i || W f_j]) over all node pairs."""
    tape = f.tape
    weight, attn = params.nodes(tape)
    if f.shape[1] != weight.shape[0]:
        raise ShapeError("{}: node features {} do not match weight {}".format(
            params.name, numgrad.shape_str(f.shape), numgrad.shape_str(weight.shape)))
    n_nodes = f.shape[0]
    projected = numgrad.matmul(f, weight)
    zeros = tape.constant(np.zeros(projected.shape))
    # a^T [h_i || h_j] splits into a per-row term plus a per-column term
    source = numgrad.matmul(numgrad.concat_cols(projected, zeros), attn)
    target = numgrad.matmul(numgrad.concat_cols(zeros, projected), attn)
    ones_row = tape.constant(np.ones((1, n_nodes)))
    pairs = numgrad.add_row(numgrad.matmul(source, ones_row), numgrad.transpose(target))
    return numgrad.leaky_relu(pairs, params.leaky_slope)


def self_importance(alpha):
    """Add each row's maximum to its diagonal entry."""
    tape = alpha.tape
    n_nodes = alpha.shape[0]
    if alpha.shape[1] != n_nodes:
        raise ShapeError("self_importance needs a square matrix, got {}".format(numgrad.shape_str(alpha.shape)))
    row_peaks = numgrad.row_max(alpha)
    spread = numgrad.matmul(row_peaks, tape.constant(np.ones((1, n_nodes))))
    diagonal = numgrad.hadamard(tape.constant(np.eye(n_nodes)), spread)
    return numgrad.add(alpha, diagonal)


def attention_adjacency(f, params):
    return self_importance(numgrad.row_softmax(attention_scores(f, params)))


def similarity_adjacency(f, detach_c=False):
    return numgrad.cosine_row_pairs(numgrad.detach(f) if detach_c else f)


def _check_ablation(ablation):
    if ablation not in ABLATIONS:
        raise ConfigError("train.ablation must be one of {}; got {!r}".format(", ".join(ABLATIONS), ablation))


def _check_composite_norm(composite_norm):
    if composite_norm not in COMPOSITE_NORMS:
        raise ConfigError("graph.composite_norm must be one of {}; got {!r}".format(
            ", ".join(COMPOSITE_NORMS), composite_norm))


def unit_abs_rows(x):
    """Divide each row by its absolute sum; rows that sum to zero stay zero."""
    tape = x.tape
    totals = numgrad.clamp_min(numgrad.row_sum(numgrad.absolute(x)), numgrad.EPS_NORM)
    spread = numgrad.matmul(numgrad.power(totals, -1.0), tape.constant(np.ones((1, x.shape[1]))))
    return numgrad.hadamard(x, spread)


def composite_adjacency(f, graph, params, ablation="ABC", detach_c=False, composite_norm="sum"):
    """A + B + C with B and C left out per ``ablation``.

    ``balanced`` scales the rows of C to unit absolute sum and averages the
    active terms; ``sum`` is the plain sum.
    """
    _check_ablation(ablation)
    _check_composite_norm(composite_norm)
    terms = [f.tape.constant(graph.fixed_adj)]
    if "B" in ablation:
        terms.append(attention_adjacency(f, params))
    if "C" in ablation:
        similarity = similarity_adjacency(f, detach_c)
        terms.append(unit_abs_rows(similarity) if composite_norm == "balanced" else similarity)
    adjacency = terms[0]
    for term in terms[1:]:
        adjacency = numgrad.add(adjacency, term)
    if composite_norm == "balanced" and len(terms) > 1:
        adjacency = numgrad.scale(adjacency, 1.0 / len(terms))
    return adjacency


def agcn_layer(f, graph, params, ablation="ABC", detach_c=False, composite_norm="sum"):
    """LeakyReLU(M f W) with M the composite adjacency."""
    _check_ablation(ablation)
    tape = f.tape
    n_nodes = f.shape[0]
    if graph.fixed_adj.shape != (n_nodes, n_nodes):
        raise ShapeError("{}: adjacency {} does not match {} nodes".format(
            params.name, numgrad.shape_str(graph.fixed_adj.shape), n_nodes))
    weight, _ = params.nodes(tape)
    if f.shape[1] != weight.shape[0]:
        raise ShapeError("{}: node features {} do not match weight {}".format(
            params.name, numgrad.shape_str(f.shape), numgrad.shape_str(weight.shape)))

    adjacency = composite_adjacency(f, graph, params, ablation, detach_c, composite_norm)
    aggregated = numgrad.matmul(numgrad.matmul(adjacency, f), weight)
    return numgrad.leaky_relu(aggregated, params.leaky_slope)


def gcn_subnet_forward(graph, layers, ablation="ABC", tape=None, node_features=None, d_f=None, detach_c=False,
                       composite_norm="sum"):
    """Stack the layers over F^0 and return the N x d_f classifier matrix F^L."""
    _check_ablation(ablation)
    if not 1 <= len(layers) <= MAX_LAYERS:
        raise ConfigError("model.layers must be 1 or 2, got {}".format(len(layers)))
    if d_f is not None and layers[-1].out_width != d_f:
        raise ConfigError("final graph layer width {} does not match feature width d_f={}".format(
            layers[-1].out_width, d_f))
    if node_features is None:
        tape = tape or numgrad.Tape()
        node_features = tape.constant(graph.node_features, name="node_features")
    f = node_features
    for params in layers:
        f = agcn_layer(f, graph, params, ablation=ablation, detach_c=detach_c, composite_norm=composite_norm)
    return f


def layer_widths(node_width, d_f, n_layers):
    if n_layers == 1:
        return [(node_width, d_f)]
    if n_layers == 2:
        hidden = int(math.ceil(d_f / 2.0))
        return [(node_width, hidden), (hidden, d_f)]
    raise ConfigError("model.layers must be 1 or 2, got {}".format(n_layers))


def write_cooccurrence_csv(path, matrix, label_names):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(label_names)
        for row in np.asarray(matrix, dtype=np.float64):
            writer.writerow([repr(float(value)) for value in row])


def read_cooccurrence_csv(path):
    with open(path, newline="") as handle:
        rows = list(csv.reader(handle))
    if not rows:
        raise DataFormatError("empty co-occurrence file", path=path)
    names = rows[0]
    if len(rows) - 1 != len(names):
        raise DataFormatError("expected {} matrix rows, found {}".format(len(names), len(rows) - 1), path=path)
    matrix = np.zeros((len(names), len(names)))
    for index, row in enumerate(rows[1:]):
        line_number = index + 2
        if len(row) != len(names):
            raise DataFormatError("expected {} values, found {}".format(len(names), len(row)),
                                  path=path, line_number=line_number)
        try:
            matrix[index] = [float(value) for value in row]
        except ValueError as exc:
            raise DataFormatError(str(exc), path=path, line_number=line_number) from exc
    return names, matrix


def read_node_features_csv(path, label_names):
    """Rows of ``label,v0,v1,...``; every label must appear exactly once."""
    by_label = {}
    width = None
    with open(path, newline="") as handle:
        for line_number, row in enumerate(csv.reader(handle), start=1):
            if not row:
                continue
            name, values = row[0], row[1:]
            try:
                vector = [float(value) for value in values]
            except ValueError as exc:
                raise DataFormatError(str(exc), path=path, line_number=line_number) from exc
            if width is None:
                width = len(vector)
            if len(vector) != width or not vector:
                raise DataFormatError("expected {} feature values, found {}".format(width, len(vector)),
                                      path=path, line_number=line_number)
            if name in by_label:
                raise DataFormatError("duplicate label {!r}".format(name), path=path, line_number=line_number)
            by_label[name] = vector
    missing = [name for name in label_names if name not in by_label]
    if missing:
        raise DataFormatError("no node features for labels {}".format(missing), path=path)
    return np.array([by_label[name] for name in label_names], dtype=np.float64)
