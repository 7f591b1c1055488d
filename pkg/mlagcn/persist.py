"""Model directories: ``manifest.json`` plus ``arrays.jsonl``, one array per line.

Values are written as shortest round-trip decimals, so a loaded model predicts
bit-for-bit what the saved one did.
"""
import json
import os

import numpy as np
import singer
from singer import Transformer

from mlagcn import labelgraph
from mlagcn import model
from mlagcn import schema
from mlagcn.exceptions import DataFormatError

LOGGER = singer.get_logger()

FORMAT_VERSION = 1
MANIFEST_FILE = "manifest.json"
ARRAYS_FILE = "arrays.jsonl"

GRAPH_ARRAYS = ("graph.fixed_adj", "graph.cooccurrence", "graph.initial_node_features")


def _graph_arrays(graph):
    return {
        "graph.fixed_adj": graph.fixed_adj,
        "graph.cooccurrence": graph.cooccurrence,
        "graph.initial_node_features": graph.node_features,
    }


def build_manifest(bundle, config_digest=""):
    arrays = dict(_graph_arrays(bundle.graph))
    arrays.update(bundle.parameters())
    return {
        "format_version": FORMAT_VERSION,
        "config_digest": config_digest,
        "label_names": list(bundle.graph.label_names),
        "d_in": bundle.generator.d_in,
        "d_f": bundle.d_f,
        "generator": {"kind": bundle.generator.kind, "widths": list(bundle.generator.widths)},
        "head": bundle.head,
        "ablation": bundle.ablation,
        "detach_c": bundle.detach_c,
        "composite_norm": bundle.composite_norm,
        "leaky_slope": bundle.generator.leaky_slope,
        "graph": {
            "threshold": bundle.graph.threshold,
            "adjacency_norm": bundle.graph.adjacency_norm,
            "node_feature_mode": bundle.graph.node_feature_mode,
        },
        "layers": [layer.name for layer in bundle.layers],
        "domain_hidden": bundle.domain_clf.hidden_width if bundle.domain_clf is not None else None,
        "arrays": [{"name": name, "shape": list(value.shape)} for name, value in sorted(arrays.items())],
        "parameter_counts": bundle.parameter_counts(),
    }, arrays


def save_model(bundle, directory, config_digest=""):
    os.makedirs(directory, exist_ok=True)
    manifest, arrays = build_manifest(bundle, config_digest)
    manifest_path = os.path.join(directory, MANIFEST_FILE)
    with open(manifest_path, "w") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")
    with open(os.path.join(directory, ARRAYS_FILE), "w") as handle:
        for name, value in sorted(arrays.items()):
            record = {"name": name, "shape": list(value.shape), "values": [float(v) for v in value.ravel()]}
            handle.write(json.dumps(record) + "\n")
    LOGGER.info("Saved model (%d arrays) to %s", len(arrays), directory)
    return manifest_path


def _read_arrays(path):
    arrays = {}
    with open(path) as handle, Transformer() as transformer:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError("malformed JSON: {}".format(exc), path=path, line_number=line_number) from exc
            record = schema.coerce(raw, "array_record", path=path, line_number=line_number, transformer=transformer)
            shape = tuple(record.get("shape") or ())
            values = record.get("values") or []
            if len(shape) != 2 or shape[0] * shape[1] != len(values):
                raise DataFormatError("array {!r} has {} values for shape {}".format(
                    record.get("name"), len(values), list(shape)), path=path, line_number=line_number)
            arrays[record["name"]] = np.array(values, dtype=np.float64).reshape(shape)
    return arrays


def load_model(directory):
    """(bundle, manifest) read back from ``save_model`` output."""
    manifest_path = os.path.join(directory, MANIFEST_FILE)
    try:
        with open(manifest_path) as handle:
            raw = json.load(handle)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError("cannot read model manifest: {}".format(exc), path=manifest_path) from exc
    manifest = schema.coerce(raw, "model_manifest", path=manifest_path)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataFormatError("unsupported model format version {!r}".format(manifest.get("format_version")),
                              path=manifest_path)

    arrays_path = os.path.join(directory, ARRAYS_FILE)
    arrays = _read_arrays(arrays_path)
    for entry in manifest["arrays"]:
        if entry["name"] not in arrays:
            raise DataFormatError("array {!r} listed in the manifest is missing".format(entry["name"]),
                                  path=arrays_path)
        if list(arrays[entry["name"]].shape) != entry["shape"]:
            raise DataFormatError("array {!r} has shape {}, manifest says {}".format(
                entry["name"], list(arrays[entry["name"]].shape), entry["shape"]), path=arrays_path)

    graph_meta = manifest["graph"]
    graph = labelgraph.LabelGraph(
        label_names=tuple(manifest["label_names"]),
        node_features=arrays["graph.initial_node_features"],
        cooccurrence=arrays["graph.cooccurrence"],
        fixed_adj=arrays["graph.fixed_adj"],
        threshold=graph_meta["threshold"],
        adjacency_norm=graph_meta["adjacency_norm"],
        node_feature_mode=graph_meta["node_feature_mode"],
    )
    slope = manifest["leaky_slope"]
    generator_meta = manifest["generator"]
    generator = model.FeatureGenerator(generator_meta["kind"], manifest["d_in"], generator_meta["widths"],
                                       leaky_slope=slope)
    if generator.kind != "identity":
        for weight_key, bias_key in generator.layer_keys():
            generator.params[weight_key] = arrays[weight_key]
            generator.params[bias_key] = arrays[bias_key]

    layers = [labelgraph.AdaptiveLayerParams(name, arrays[name + ".weight"], arrays[name + ".attn"], slope)
              for name in manifest["layers"]]
    head_params = {model.HEAD_WEIGHT_KEY: arrays[model.HEAD_WEIGHT_KEY]} if manifest["head"] == "linear" else {}
    node_params = {}
    if model.NODE_FEATURES_KEY in arrays:
        node_params[model.NODE_FEATURES_KEY] = arrays[model.NODE_FEATURES_KEY]
    domain_clf = None
    if manifest.get("domain_hidden") is not None:
        domain_clf = model.DomainClassifier(manifest["d_f"], manifest["domain_hidden"], leaky_slope=slope)
        for key in ("dom.0.weight", "dom.0.bias", "dom.1.weight", "dom.1.bias"):
            domain_clf.params[key] = arrays[key]

    bundle = model.ModelBundle(generator, graph, layers, manifest["d_f"], domain_clf=domain_clf,
                               head=manifest["head"], head_params=head_params, node_params=node_params,
                               ablation=manifest["ablation"], detach_c=manifest["detach_c"],
                               composite_norm=manifest.get("composite_norm") or "sum")
    LOGGER.info("Loaded model from %s (config digest %s)", directory, manifest.get("config_digest") or "-")
    return bundle, manifest
