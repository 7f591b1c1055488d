"""Multi-label datasets: synthetic generation, domain shift, and the on-disk format.

A dataset directory holds ``manifest.json`` and ``data.jsonl`` with one
``{"id", "features", "labels"}`` object per sample. Floats are written as
shortest round-trip decimals, so save followed by load is bit-exact.
"""
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
import singer
from singer import Transformer

from mlagcn import schema
from mlagcn.exceptions import ConfigError, ContractError, DataFormatError

LOGGER = singer.get_logger()

FORMAT_VERSION = 1
MANIFEST_FILE = "manifest.json"
DATA_FILE = "data.jsonl"
DOMAIN_TAGS = ("source", "target")
SHIFT_KINDS = ("none", "affine", "noise")

DEFAULT_P_IN = 0.8
DEFAULT_P_OUT = 0.05


@dataclass(frozen=True)
class MultiLabelDataset:
    features: np.ndarray
    labels: np.ndarray = None
    label_names: tuple = ()
    domain_tag: str = "source"
    ids: tuple = ()
    labels_hidden: bool = False

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2:
            raise ContractError("features must be a 2-D matrix")
        n_samples = features.shape[0]
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (n_samples, len(self.label_names)):
                raise ContractError("labels shape {} does not match {} samples x {} labels".format(
                    labels.shape, n_samples, len(self.label_names)))
            if not np.all((labels == 0) | (labels == 1)):
                raise ContractError("labels must contain only 0 and 1")
            object.__setattr__(self, "labels", labels.astype(np.int64))
        if len(set(self.label_names)) != len(self.label_names):
            raise ContractError("label names must be unique")
        if self.domain_tag not in DOMAIN_TAGS:
            raise ContractError("domain_tag must be source or target, got {!r}".format(self.domain_tag))
        ids = tuple(self.ids) or tuple("s{:06d}".format(i) for i in range(n_samples))
        if len(ids) != n_samples:
            raise ContractError("{} ids for {} samples".format(len(ids), n_samples))
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "label_names", tuple(self.label_names))

    @property
    def n_samples(self):
        return self.features.shape[0]

    @property
    def n_labels(self):
        return len(self.label_names)

    @property
    def feature_dim(self):
        return self.features.shape[1]

    @property
    def has_visible_labels(self):
        return self.labels is not None and not self.labels_hidden

    def require_labels(self, role):
        if not self.has_visible_labels:
            raise ContractError("{} dataset must carry visible labels".format(role))
        return self.labels

    def reveal(self):
        return replace(self, labels_hidden=False)


@dataclass(frozen=True)
class SynthSpec:
    n_labels: int
    n_clusters: int
    samples: int
    feature_dim: int
    seed: int
    noise_sigma: float = 0.0
    p_in: float = DEFAULT_P_IN
    p_out: float = DEFAULT_P_OUT
    shift: dict = field(default_factory=lambda: {"kind": "none"})
    sample_seed: int = None
    reveal_labels: bool = False
    label_prefix: str = "label"

    def __post_init__(self):
        for key in ("n_labels", "n_clusters", "samples", "feature_dim"):
            if int(getattr(self, key)) <= 0:
                raise ConfigError("synthetic spec {} must be positive".format(key))
        if self.n_clusters > self.n_labels:
            raise ConfigError("synthetic spec n_clusters ({}) exceeds n_labels ({})".format(
                self.n_clusters, self.n_labels))
        if self.noise_sigma < 0:
            raise ConfigError("synthetic spec noise_sigma must be >= 0")
        for key in ("p_in", "p_out"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ConfigError("synthetic spec {} must lie in [0, 1]".format(key))
        for key in ("seed", "sample_seed"):
            if getattr(self, key) is not None and getattr(self, key) < 0:
                raise ConfigError("synthetic spec {} must be >= 0, got {}".format(key, getattr(self, key)))
        object.__setattr__(self, "shift", validate_shift(self.shift))
        _check_bias_length(self.shift, self.feature_dim)

    @classmethod
    def from_dict(cls, raw, path=None):
        extra = schema.unknown_keys(raw, "synth_spec")
        if extra:
            raise ConfigError("unknown synthetic spec key(s): {}".format(", ".join(extra)))
        missing = [key for key in ("n_labels", "n_clusters", "samples", "feature_dim", "seed") if key not in raw]
        if missing:
            raise ConfigError("synthetic spec is missing required key(s): {}".format(", ".join(missing)))
        record = schema.coerce(raw, "synth_spec", path=path)
        return cls(**{key: value for key, value in record.items() if value is not None})


def validate_shift(shift):
    shift = dict(shift or {"kind": "none"})
    kind = shift.get("kind", "none")
    if kind not in SHIFT_KINDS:
        raise ConfigError("shift kind must be one of {}; got {!r}".format(", ".join(SHIFT_KINDS), kind))
    if kind == "affine":
        shift.setdefault("scale", 1.0)
        shift.setdefault("rotation_seed", None)
        shift.setdefault("bias", 0.0)
        if shift["scale"] is None or not shift["scale"] > 0:
            raise ConfigError("affine shift scale must be > 0")
    if kind == "noise":
        if shift.get("sigma") is None or shift["sigma"] < 0:
            raise ConfigError("noise shift needs sigma >= 0")
    shift["kind"] = kind
    return {key: value for key, value in shift.items() if value is not None or key == "rotation_seed"}


def _check_bias_length(shift, feature_dim):
    bias = shift.get("bias")
    if bias is None or np.ndim(bias) == 0:
        return
    if np.shape(bias) != (feature_dim,):
        raise ConfigError("affine shift bias has {} values for {} features".format(np.size(bias), feature_dim))


def label_clusters(n_labels, n_clusters, rng):
    """Seeded partition of the labels into ``n_clusters`` non-empty groups."""
    order = rng.permutation(n_labels)
    return [np.sort(group) for group in np.array_split(order, n_clusters)]


def random_rotation(dim, seed):
    if seed is None:
        return np.eye(dim)
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    q = q * np.sign(np.diag(r))[None, :]
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def generate_synthetic(spec):
    """Cluster-mixture labels plus prototype-sum features; a pure function of ``spec``."""
    structure_rng = np.random.default_rng(spec.seed)
    clusters = label_clusters(spec.n_labels, spec.n_clusters, structure_rng)
    prototypes = structure_rng.normal(0.0, 1.0, size=(spec.n_labels, spec.feature_dim))

    entropy = [spec.seed] if spec.sample_seed is None else [spec.seed, spec.sample_seed]
    sample_rng = np.random.default_rng(np.random.SeedSequence(entropy).spawn(1)[0])

    membership = np.zeros((spec.n_clusters, spec.n_labels), dtype=bool)
    for index, members in enumerate(clusters):
        membership[index, members] = True
    chosen = sample_rng.integers(0, spec.n_clusters, size=spec.samples)
    inclusion = np.where(membership[chosen], spec.p_in, spec.p_out)
    labels = (sample_rng.random((spec.samples, spec.n_labels)) < inclusion).astype(np.int64)

    features = labels @ prototypes
    if spec.noise_sigma > 0:
        features = features + sample_rng.normal(0.0, spec.noise_sigma, size=features.shape)

    dataset = MultiLabelDataset(
        features=features,
        labels=labels,
        label_names=tuple("{}_{:02d}".format(spec.label_prefix, i) for i in range(spec.n_labels)),
        domain_tag="source",
    )
    if spec.shift["kind"] != "none":
        dataset = apply_shift(dataset, spec.shift, seed=spec.seed if spec.sample_seed is None else spec.sample_seed)
        if spec.reveal_labels:
            dataset = dataset.reveal()
    LOGGER.info("Generated %d synthetic samples: %d labels in %d clusters, %d features, shift=%s",
                spec.samples, spec.n_labels, spec.n_clusters, spec.feature_dim, spec.shift["kind"])
    return dataset


def apply_shift(ds, shift, seed=0):
    """Move the features to a target domain; labels are kept but marked hidden."""
    shift = validate_shift(shift)
    _check_bias_length(shift, ds.feature_dim)
    if shift["kind"] == "none":
        return ds
    features = ds.features
    if shift["kind"] == "affine":
        rotation = random_rotation(ds.feature_dim, shift["rotation_seed"])
        bias = np.broadcast_to(np.asarray(shift["bias"], dtype=np.float64), (ds.feature_dim,))
        features = features @ rotation * shift["scale"] + bias[None, :]
    else:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        features = features + rng.normal(0.0, shift["sigma"], size=features.shape)
    return replace(ds, features=features, domain_tag="target", labels_hidden=ds.labels is not None)


def save_dataset(ds, directory):
    """Write ``manifest.json`` + ``data.jsonl``; hidden labels are not written."""
    os.makedirs(directory, exist_ok=True)
    write_labels = ds.has_visible_labels
    manifest = {
        "format_version": FORMAT_VERSION,
        "n_labels": ds.n_labels,
        "feature_dim": ds.feature_dim,
        "n_samples": ds.n_samples,
        "label_names": list(ds.label_names),
        "domain_tag": ds.domain_tag,
        "has_labels": write_labels,
    }
    manifest_path = os.path.join(directory, MANIFEST_FILE)
    with open(manifest_path, "w") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")
    with open(os.path.join(directory, DATA_FILE), "w") as handle:
        for index, sample_id in enumerate(ds.ids):
            record = {"id": sample_id, "features": [float(v) for v in ds.features[index]]}
            if write_labels:
                record["labels"] = [int(v) for v in ds.labels[index]]
            handle.write(json.dumps(record) + "\n")
    LOGGER.info("Wrote %d samples to %s", ds.n_samples, directory)
    return manifest_path


def _read_manifest(manifest_path):
    try:
        with open(manifest_path) as handle:
            raw = json.load(handle)
    except json.JSONDecodeError as exc:
        raise DataFormatError("malformed manifest: {}".format(exc), path=manifest_path) from exc
    except OSError as exc:
        raise DataFormatError("cannot read manifest: {}".format(exc), path=manifest_path) from exc
    manifest = schema.coerce(raw, "dataset_manifest", path=manifest_path)
    for key in ("n_labels", "feature_dim", "label_names"):
        if manifest.get(key) is None:
            raise DataFormatError("manifest is missing {!r}".format(key), path=manifest_path)
    if len(manifest["label_names"]) != manifest["n_labels"]:
        raise DataFormatError("manifest declares {} labels but names {}".format(
            manifest["n_labels"], len(manifest["label_names"])), path=manifest_path)
    return manifest


def load_dataset(manifest_path):
    """Read a dataset from its manifest path (or from the directory holding it)."""
    if os.path.isdir(manifest_path):
        manifest_path = os.path.join(manifest_path, MANIFEST_FILE)
    manifest = _read_manifest(manifest_path)
    n_labels = manifest["n_labels"]
    feature_dim = manifest["feature_dim"]
    data_path = os.path.join(os.path.dirname(manifest_path), DATA_FILE)

    ids, features, labels = [], [], []
    with open(data_path) as handle, Transformer() as transformer:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError("malformed JSON: {}".format(exc), path=data_path, line_number=line_number) from exc
            raw_labels = raw.get("labels") if isinstance(raw, dict) else None
            if raw_labels is not None and (not isinstance(raw_labels, list) or
                                           not all(isinstance(v, int) and v in (0, 1) for v in raw_labels)):
                raise DataFormatError("labels must be 0/1 integers", path=data_path, line_number=line_number)
            record = schema.coerce(raw, "sample", path=data_path, line_number=line_number, transformer=transformer)
            if len(record.get("features") or []) != feature_dim:
                raise DataFormatError("expected {} features, found {}".format(
                    feature_dim, len(record.get("features") or [])), path=data_path, line_number=line_number)
            if record.get("labels") is not None:
                if len(record["labels"]) != n_labels:
                    raise DataFormatError("manifest declares {} labels, sample has {}".format(
                        n_labels, len(record["labels"])), path=data_path, line_number=line_number)
                labels.append(record["labels"])
            elif labels:
                raise DataFormatError("sample has no labels while earlier samples do",
                                      path=data_path, line_number=line_number)
            if labels and len(labels) != len(features) + 1:
                raise DataFormatError("sample has labels while earlier samples do not",
                                      path=data_path, line_number=line_number)
            ids.append(record.get("id") or "s{:06d}".format(len(ids)))
            features.append(record["features"])

    declared = manifest.get("n_samples")
    if declared is not None and declared != len(features):
        raise DataFormatError("manifest declares {} samples, found {}".format(declared, len(features)),
                              path=manifest_path)
    if not features:
        raise DataFormatError("dataset has no samples", path=data_path)
    if manifest.get("has_labels") and not labels:
        raise DataFormatError("manifest declares labels but samples carry none", path=manifest_path)

    dataset = MultiLabelDataset(
        features=np.array(features, dtype=np.float64),
        labels=np.array(labels, dtype=np.int64) if labels else None,
        label_names=tuple(manifest["label_names"]),
        domain_tag=manifest.get("domain_tag") or "source",
        ids=tuple(ids),
    )
    LOGGER.info("Loaded %d samples (%s, labels %s) from %s", dataset.n_samples, dataset.domain_tag,
                "present" if labels else "absent", manifest_path)
    return dataset
