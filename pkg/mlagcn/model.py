"""Feature generator, graph classifier head, domain classifier and the prediction path."""
import math

import numpy as np
import singer

from mlagcn import labelgraph
from mlagcn import numgrad
from mlagcn.exceptions import ConfigError, ShapeError

LOGGER = singer.get_logger()

GENERATOR_KINDS = ("identity", "mlp")
HEAD_KINDS = ("agcn", "linear")

NODE_FEATURES_KEY = "graph.node_features"
HEAD_WEIGHT_KEY = "head.weight"


def glorot(rng, fan_in, fan_out, scale=1.0):
    limit = scale * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class FeatureGenerator:
    """f_g: identity passthrough or an MLP with LeakyReLU hidden layers."""

    def __init__(self, kind, d_in, widths, params=None, leaky_slope=0.2):
        if kind not in GENERATOR_KINDS:
            raise ConfigError("model.generator must be one of {}; got {!r}".format(", ".join(GENERATOR_KINDS), kind))
        widths = [int(width) for width in widths]
        if not widths or any(width <= 0 for width in widths):
            raise ConfigError("generator widths must be positive, got {}".format(widths))
        if kind == "identity" and (len(widths) != 1 or widths[0] != d_in):
            raise ConfigError("identity generator needs d_f equal to the input width {}, got {}".format(d_in, widths[-1]))
        self.kind = kind
        self.d_in = d_in
        self.widths = widths
        self.leaky_slope = leaky_slope
        self.params = dict(params or {})

    @property
    def d_f(self):
        return self.widths[-1]

    def layer_keys(self):
        return [("gen.{}.weight".format(i), "gen.{}.bias".format(i)) for i in range(len(self.widths))]

    def init_params(self, rng, scale=1.0):
        if self.kind == "identity":
            return
        fan_in = self.d_in
        for (weight_key, bias_key), width in zip(self.layer_keys(), self.widths):
            self.params[weight_key] = glorot(rng, fan_in, width, scale)
            self.params[bias_key] = np.zeros((1, width))
            fan_in = width


class DomainClassifier:
    """f_d: one hidden LeakyReLU layer and a sigmoid output."""

    def __init__(self, d_f, hidden_width, params=None, leaky_slope=0.2):
        if hidden_width <= 0:
            raise ConfigError("model.domain_hidden must be positive, got {}".format(hidden_width))
        self.d_f = d_f
        self.hidden_width = hidden_width
        self.leaky_slope = leaky_slope
        self.params = dict(params or {})

    def init_params(self, rng, scale=1.0):
        self.params["dom.0.weight"] = glorot(rng, self.d_f, self.hidden_width, scale)
        self.params["dom.0.bias"] = np.zeros((1, self.hidden_width))
        self.params["dom.1.weight"] = glorot(rng, self.hidden_width, 1, scale)
        self.params["dom.1.bias"] = np.zeros((1, 1))


class ModelBundle:
    """All three networks plus the label graph they share.

    Parameters live in the ``params`` dicts of the components; ``parameters()``
    gathers them and ``assign()`` writes optimizer results back.
    """

    def __init__(self, generator, graph, layers, d_f, domain_clf=None, head="agcn",
                 head_params=None, node_params=None, ablation="ABC", detach_c=False, composite_norm="sum"):
        if head not in HEAD_KINDS:
            raise ConfigError("model.head must be one of {}; got {!r}".format(", ".join(HEAD_KINDS), head))
        if generator.d_f != d_f:
            raise ConfigError("generator output width {} does not match d_f={}".format(generator.d_f, d_f))
        if domain_clf is not None and domain_clf.d_f != d_f:
            raise ConfigError("domain classifier input width {} does not match d_f={}".format(domain_clf.d_f, d_f))
        self.generator = generator
        self.graph = graph
        self.layers = list(layers)
        self.d_f = d_f
        self.domain_clf = domain_clf
        self.head = head
        self.head_params = dict(head_params or {})
        self.node_params = dict(node_params or {})
        self.ablation = ablation
        self.detach_c = detach_c
        self.composite_norm = composite_norm

    def _groups(self):
        groups = [("generator", [self.generator.params]),
                  ("classifier", [layer.params for layer in self.layers] + [self.head_params, self.node_params])]
        if self.domain_clf is not None:
            groups.append(("domain", [self.domain_clf.params]))
        return groups

    def parameters(self):
        merged = {}
        for _, dicts in self._groups():
            for params in dicts:
                merged.update(params)
        return merged

    def assign(self, values):
        for _, dicts in self._groups():
            for params in dicts:
                for key in params:
                    if key in values:
                        params[key] = values[key]

    def parameter_counts(self):
        counts = {}
        for group, dicts in self._groups():
            counts[group] = int(sum(array.size for params in dicts for array in params.values()))
        return counts

    def copy(self):
        clone = ModelBundle.__new__(ModelBundle)
        clone.__dict__.update(self.__dict__)
        clone.generator = FeatureGenerator(self.generator.kind, self.generator.d_in, self.generator.widths,
                                           {k: v.copy() for k, v in self.generator.params.items()},
                                           self.generator.leaky_slope)
        clone.layers = [labelgraph.AdaptiveLayerParams(layer.name, layer.weight, layer.attn_vec, layer.leaky_slope)
                        for layer in self.layers]
        clone.head_params = {k: v.copy() for k, v in self.head_params.items()}
        clone.node_params = {k: v.copy() for k, v in self.node_params.items()}
        if self.domain_clf is not None:
            clone.domain_clf = DomainClassifier(self.domain_clf.d_f, self.domain_clf.hidden_width,
                                                {k: v.copy() for k, v in self.domain_clf.params.items()},
                                                self.domain_clf.leaky_slope)
        return clone


def build_bundle(graph, d_in, d_f, seed_sequence, generator="identity", generator_hidden=(), layers=2,
                 head="agcn", domain_hidden=None, with_domain=False, leaky_slope=0.2, init_scale=1.0,
                 ablation="ABC", detach_c=False, composite_norm="sum"):
    """Fresh bundle with Glorot-initialised parameters.

    Every component draws from its own child of ``seed_sequence`` so that adding
    a domain classifier leaves the other initial values untouched.
    """
    gen_rng, gcn_rng, head_rng, dom_rng = [np.random.default_rng(child) for child in seed_sequence.spawn(4)]

    widths = [d_f] if generator == "identity" else list(generator_hidden) + [d_f]
    feature_generator = FeatureGenerator(generator, d_in, widths, leaky_slope=leaky_slope)
    feature_generator.init_params(gen_rng, init_scale)

    node_width = graph.node_features.shape[1]
    graph_layers = []
    gcn_widths = labelgraph.layer_widths(node_width, d_f, layers) if head == "agcn" else []
    for index, (fan_in, fan_out) in enumerate(gcn_widths):
        graph_layers.append(labelgraph.AdaptiveLayerParams(
            "gcn.{}".format(index),
            glorot(gcn_rng, fan_in, fan_out, init_scale),
            glorot(gcn_rng, 2 * fan_out, 1, init_scale),
            leaky_slope))

    head_params = {}
    if head == "linear":
        head_params[HEAD_WEIGHT_KEY] = glorot(head_rng, graph.n_labels, d_f, init_scale)
    node_params = {}
    if graph.node_feature_mode == "learned" and head == "agcn":
        node_params[NODE_FEATURES_KEY] = graph.node_features.copy()

    domain_clf = None
    if with_domain:
        domain_clf = DomainClassifier(d_f, domain_hidden or 4 * d_f, leaky_slope=leaky_slope)
        domain_clf.init_params(dom_rng, init_scale)

    bundle = ModelBundle(feature_generator, graph, graph_layers, d_f, domain_clf=domain_clf, head=head,
                         head_params=head_params, node_params=node_params, ablation=ablation, detach_c=detach_c,
                         composite_norm=composite_norm)
    LOGGER.info("Initialised model: %s", bundle.parameter_counts())
    return bundle


def generate_features(gen, batch, tape=None):
    tape = tape or numgrad.Tape()
    inputs = tape.constant(batch, name="batch")
    if inputs.shape[1] != gen.d_in:
        raise ShapeError("generator expects {} input features, batch is {}".format(
            gen.d_in, numgrad.shape_str(inputs.shape)))
    if gen.kind == "identity":
        return inputs
    hidden = inputs
    keys = gen.layer_keys()
    for index, (weight_key, bias_key) in enumerate(keys):
        weight = tape.leaf(weight_key, gen.params[weight_key])
        bias = tape.leaf(bias_key, gen.params[bias_key])
        hidden = numgrad.add_row(numgrad.matmul(hidden, weight), bias)
        if index < len(keys) - 1:
            hidden = numgrad.leaky_relu(hidden, gen.leaky_slope)
    return hidden


def label_classifiers(bundle, tape, ablation=None):
    """F^L (N x d_f): graph output for the agcn head, the free matrix for the linear head."""
    if bundle.head == "linear":
        return tape.leaf(HEAD_WEIGHT_KEY, bundle.head_params[HEAD_WEIGHT_KEY])
    if NODE_FEATURES_KEY in bundle.node_params:
        node_features = tape.leaf(NODE_FEATURES_KEY, bundle.node_params[NODE_FEATURES_KEY])
    else:
        node_features = tape.constant(bundle.graph.node_features, name="node_features")
    return labelgraph.gcn_subnet_forward(bundle.graph, bundle.layers, ablation or bundle.ablation,
                                         tape=tape, node_features=node_features, d_f=bundle.d_f,
                                         detach_c=bundle.detach_c, composite_norm=bundle.composite_norm)


def forward(bundle, batch, tape, ablation=None):
    """Features X and label probabilities sig(X (F^L)^T) for one batch."""
    features = generate_features(bundle.generator, batch, tape)
    classifiers = label_classifiers(bundle, tape, ablation)
    logits = numgrad.matmul(features, numgrad.transpose(classifiers))
    return features, numgrad.sigmoid(logits)


def predict(bundle, batch, ablation=None, tape=None):
    _, probs = forward(bundle, batch, tape or numgrad.Tape(), ablation)
    return probs


def grl(x, lam):
    return numgrad.reverse_gradient(x, lam)


def classify_domain(clf, feats, lam):
    """d-hat in (0, 1) per row, read through a gradient reversal layer."""
    if feats.shape[1] != clf.d_f:
        raise ShapeError("domain classifier expects {} features, got {}".format(
            clf.d_f, numgrad.shape_str(feats.shape)))
    tape = feats.tape
    reversed_feats = grl(feats, lam)
    hidden = numgrad.add_row(numgrad.matmul(reversed_feats, tape.leaf("dom.0.weight", clf.params["dom.0.weight"])),
                             tape.leaf("dom.0.bias", clf.params["dom.0.bias"]))
    hidden = numgrad.leaky_relu(hidden, clf.leaky_slope)
    logits = numgrad.add_row(numgrad.matmul(hidden, tape.leaf("dom.1.weight", clf.params["dom.1.weight"])),
                             tape.leaf("dom.1.bias", clf.params["dom.1.bias"]))
    return numgrad.sigmoid(logits)
