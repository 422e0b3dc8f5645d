"""Dataset ingestion, synthetic CTR generation, deterministic batching.

Readers parse raw string columns and keep file order (ad logs are
chronological, so order is the time axis).  Categorical encoding is a
separate step: vocabularies come from the training partition only, with
index 0 reserved for out-of-vocabulary values, so validation rows can
never leak labels through the encoding.

The synthetic generator plants a known structure: items carry
cluster-shaped embeddings, and the click logit mixes linear effects
with two pairwise interactions (user taste x item cluster, item cluster
x first static feature).  A one-hot linear model can fit the marginals
but not the interactions, which is exactly the gap the ranking model is
supposed to close.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .tokenizer import EmbeddingTable, read_embeddings  # noqa: F401  (shared format)

ROLES = ("high_cardinality_item", "static", "group_key", "label")
CACHE_MAGIC = b"STRD1"


class DatasetSchema:
    """Ordered columns with roles; exactly one label, at least one item
    and one group-key column."""

    def __init__(self, columns, cardinality_hints=None):
        names = [c[0] for c in columns]
        if len(set(names)) != len(names):
            raise ValueError("duplicate column names in schema")
        for name, role in columns:
            if role not in ROLES:
                raise ValueError(f"column {name!r} has unknown role {role!r}")
        roles = [c[1] for c in columns]
        if roles.count("label") != 1:
            raise ValueError("schema needs exactly one label column")
        if roles.count("high_cardinality_item") < 1:
            raise ValueError("schema needs an item column")
        if roles.count("group_key") < 1:
            raise ValueError("schema needs a group-key column")
        self.columns = [(str(n), str(r)) for n, r in columns]
        self.cardinality_hints = dict(cardinality_hints or {})

    @property
    def label_col(self):
        return next(n for n, r in self.columns if r == "label")

    @property
    def item_col(self):
        return next(n for n, r in self.columns if r == "high_cardinality_item")

    @property
    def group_col(self):
        return next(n for n, r in self.columns if r == "group_key")

    @property
    def static_cols(self):
        return [n for n, r in self.columns if r == "static"]

    @property
    def feature_cols(self):
        """Everything encodable: item, statics, group key, in schema order."""
        return [n for n, r in self.columns if r != "label"]

    @classmethod
    def avazu_default(cls):
        return cls([
            ("click", "label"),
            ("site_id", "high_cardinality_item"),
            ("device_id", "group_key"),
            ("hour", "static"),
            ("banner_pos", "static"),
            ("site_category", "static"),
            ("app_category", "static"),
            ("device_type", "static"),
        ])


class Dataset:
    """Raw string columns plus binary labels, in original (file) order."""

    def __init__(self, schema, columns, labels, chronological):
        labels = np.asarray(labels, dtype=np.int8)
        if labels.ndim != 1:
            raise ValueError("labels must be 1-d")
        if labels.size and not np.all((labels == 0) | (labels == 1)):
            raise ValueError("labels must be binary")
        self.schema = schema
        self.columns = {}
        for name in schema.feature_cols:
            if name not in columns:
                raise ValueError(f"missing column {name!r}")
            col = np.asarray(columns[name])
            if col.shape != labels.shape:
                raise ValueError(f"column {name!r} length {col.shape} "
                                 f"!= labels {labels.shape}")
            self.columns[name] = col
        self.labels = labels
        self.chronological = bool(chronological)

    def __len__(self):
        return self.labels.size

    def column(self, name):
        return self.columns[name]

    def subset(self, indices):
        indices = np.asarray(indices)
        out = Dataset(self.schema,
                      {n: c[indices] for n, c in self.columns.items()},
                      self.labels[indices], self.chronological)
        return out


def read_avazu_csv(path, schema, skip_malformed=False):
    """Parse a comma-separated click log into raw columns, keeping order.

    Malformed rows raise with the 1-based line number unless
    skip_malformed is set, in which case they are counted on the
    returned dataset's ``skipped_rows``.
    """
    with open(path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split(",")
        missing = [n for n in ([schema.label_col] + schema.feature_cols)
                   if n not in header]
        if missing:
            raise ValueError(f"{path}:1: header lacks schema columns {missing}")
        pos = {n: header.index(n) for n in header}
        want = len(header)
        label_i = pos[schema.label_col]
        feat_pos = [(n, pos[n]) for n in schema.feature_cols]
        cols = {n: [] for n in schema.feature_cols}
        labels = []
        skipped = 0
        for lineno, line in enumerate(f, start=2):
            parts = line.rstrip("\n").split(",")
            if len(parts) != want:
                if skip_malformed:
                    skipped += 1
                    continue
                raise ValueError(f"{path}:{lineno}: expected {want} fields, "
                                 f"got {len(parts)}")
            raw_label = parts[label_i]
            if raw_label not in ("0", "1"):
                if skip_malformed:
                    skipped += 1
                    continue
                raise ValueError(f"{path}:{lineno}: label must be 0 or 1, "
                                 f"got {raw_label!r}")
            labels.append(int(raw_label))
            for n, i in feat_pos:
                cols[n].append(parts[i])
    ds = Dataset(schema, {n: np.asarray(v, dtype=object) for n, v in cols.items()},
                 labels, chronological=True)
    ds.skipped_rows = skipped
    return ds


# ---------------------------------------------------------------------------
# encoding and splits
# ---------------------------------------------------------------------------

def build_vocab(values):
    """Sorted distinct values -> indices starting at 1; 0 is reserved OOV."""
    return {v: i + 1 for i, v in enumerate(sorted(set(values)))}


def encode_column(values, vocab):
    return np.fromiter((vocab.get(v, 0) for v in values),
                       count=len(values), dtype=np.int64)


class EncodedData:
    """Integer-coded features ready for model consumption.

    features: column name -> int codes (0 = out of vocabulary);
    vocab_sizes include the OOV slot.  Raw item strings are kept for
    SID lookup, groups alias the group-key codes for GAUC.
    """

    def __init__(self, schema, features, labels, raw_items):
        self.schema = schema
        self.features = features
        self.labels = np.asarray(labels, dtype=np.float64)
        self.raw_items = raw_items
        self.groups = features[schema.group_col]

    def __len__(self):
        return self.labels.size


def encode_features(train, val, schema):
    """Encode both partitions with train-only vocabularies.

    Returns (train_encoded, val_encoded, vocabs).  Validation values
    unseen in training map to 0.
    """
    vocabs = {n: build_vocab(train.column(n)) for n in schema.feature_cols}
    out = []
    for ds in (train, val):
        if ds is None:
            out.append(None)
            continue
        feats = {n: encode_column(ds.column(n), vocabs[n])
                 for n in schema.feature_cols}
        enc = EncodedData(schema, feats, ds.labels, ds.column(schema.item_col))
        out.append(enc)
    vocab_sizes = {n: len(v) + 1 for n, v in vocabs.items()}
    for enc in out:
        if enc is not None:
            enc.vocab_sizes = vocab_sizes
    return out[0], out[1], vocabs


def chrono_split(dataset, val_fraction=0.1):
    """Last fraction of rows (file order = time) becomes validation."""
    if not dataset.chronological:
        raise ValueError("chronological split on non-chronological data")
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n = len(dataset)
    n_val = max(1, int(round(n * val_fraction)))
    if n_val >= n:
        raise ValueError(f"validation fraction {val_fraction} leaves no training rows")
    idx = np.arange(n)
    return dataset.subset(idx[:n - n_val]), dataset.subset(idx[n - n_val:])


def random_split(dataset, val_fraction=0.1, seed=0):
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n = len(dataset)
    n_val = max(1, int(round(n * val_fraction)))
    if n_val >= n:
        raise ValueError(f"validation fraction {val_fraction} leaves no training rows")
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.subset(perm[n_val:]), dataset.subset(perm[:n_val])


def batch_iter(data, batch_size, shuffle_seed=None, epoch=0):
    """Yield index arrays covering the data exactly once.

    shuffle_seed None keeps original order; otherwise the permutation is
    a pure function of (shuffle_seed, epoch).  The last short batch is
    kept.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = data if isinstance(data, int) else len(data)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng([int(shuffle_seed), int(epoch)]).permutation(n)
    for a in range(0, n, batch_size):
        yield order[a:a + batch_size]


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    n_instances: int = 10000
    n_items: int = 1000
    n_users: int = 200
    d_p: int = 16
    n_clusters: int = 16
    static_cards: tuple = (8, 12)
    n_user_tastes: int = 8
    noise_rate: float = 0.02
    interaction_scale: float = 2.0
    linear_scale: float = 0.6
    bias: float = -0.4
    embed_noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters > self.n_items:
            raise ValueError(f"n_clusters {self.n_clusters} > n_items {self.n_items}")
        if not 0.0 <= self.noise_rate < 0.5:
            raise ValueError(f"noise_rate must be in [0, 0.5), got {self.noise_rate}")
        if self.n_instances < 1 or self.n_users < 1 or self.d_p < 1:
            raise ValueError("n_instances, n_users and d_p must be positive")


def synthetic_schema(spec):
    cols = [("click", "label"),
            ("item_id", "high_cardinality_item"),
            ("user_id", "group_key")]
    cols += [(f"f{j}", "static") for j in range(len(spec.static_cards))]
    return DatasetSchema(cols)


def gen_synthetic(spec):
    """(Dataset, EmbeddingTable) with planted, learnable click structure.

    Click logit = bias + linear(cluster, statics, user)
                + taste(user) x cluster + cluster x f0.
    The planted per-instance probabilities are attached to the dataset
    as ``planted_probs`` for calibration checks.
    """
    rng = np.random.default_rng(spec.seed)
    centers = 2.0 * rng.normal(size=(spec.n_clusters, spec.d_p))
    item_cluster = rng.integers(spec.n_clusters, size=spec.n_items)
    vectors = centers[item_cluster] + spec.embed_noise * rng.normal(
        size=(spec.n_items, spec.d_p))
    table = EmbeddingTable(np.arange(spec.n_items).astype(str), vectors)

    user_taste = rng.integers(spec.n_user_tastes, size=spec.n_users)
    w_taste_cluster = spec.interaction_scale * rng.normal(
        size=(spec.n_user_tastes, spec.n_clusters))
    w_cluster_f0 = spec.interaction_scale * rng.normal(
        size=(spec.n_clusters, spec.static_cards[0]))
    w_cluster = spec.linear_scale * rng.normal(size=spec.n_clusters)
    w_user = spec.linear_scale * rng.normal(size=spec.n_users)
    w_static = [spec.linear_scale * rng.normal(size=c) for c in spec.static_cards]

    n = spec.n_instances
    items = rng.integers(spec.n_items, size=n)
    users = rng.integers(spec.n_users, size=n)
    statics = [rng.integers(c, size=n) for c in spec.static_cards]

    cl = item_cluster[items]
    logit = spec.bias + w_cluster[cl] + w_user[users]
    for j, s in enumerate(statics):
        logit = logit + w_static[j][s]
    logit = logit + w_taste_cluster[user_taste[users], cl]
    logit = logit + w_cluster_f0[cl, statics[0]]
    # each where-branch evaluates over the other's range: exp overflows to
    # inf and inf/inf gives nan in lanes the mask then discards
    with np.errstate(over="ignore", invalid="ignore"):
        probs = np.where(logit >= 0.0, 1.0 / (1.0 + np.exp(-logit)),
                         np.exp(logit) / (1.0 + np.exp(logit)))
    labels = (rng.random(n) < probs).astype(np.int8)
    if spec.noise_rate > 0.0:
        flip = rng.random(n) < spec.noise_rate
        labels = np.where(flip, 1 - labels, labels).astype(np.int8)

    cols = {"item_id": items.astype(str).astype(object),
            "user_id": users.astype(str).astype(object)}
    for j, s in enumerate(statics):
        cols[f"f{j}"] = s.astype(str).astype(object)
    ds = Dataset(synthetic_schema(spec), cols, labels, chronological=False)
    ds.planted_probs = probs
    return ds, table


# ---------------------------------------------------------------------------
# binary cache
# ---------------------------------------------------------------------------

def save_dataset_cache(path, dataset):
    """Versioned container: magic, JSON header echoing the schema, then
    newline-joined utf-8 column blobs and raw int8 labels."""
    blobs = []
    for name in dataset.schema.feature_cols:
        vals = dataset.column(name)
        if any("\n" in str(v) for v in vals):
            raise ValueError(f"column {name!r} contains newline values")
        blobs.append("\n".join(str(v) for v in vals).encode("utf-8"))
    header = {
        "schema": [[n, r] for n, r in dataset.schema.columns],
        "n": len(dataset),
        "chronological": dataset.chronological,
        "columns": dataset.schema.feature_cols,
        "blob_bytes": [len(b) for b in blobs],
    }
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC + b"\n")
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for b in blobs:
            f.write(b)
        f.write(dataset.labels.astype("<i1").tobytes())


def load_dataset_cache(path):
    with open(path, "rb") as f:
        magic = f.readline().rstrip(b"\n")
        if magic != CACHE_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {CACHE_MAGIC!r}")
        header = json.loads(f.readline())
        schema = DatasetSchema([(n, r) for n, r in header["schema"]])
        n = header["n"]
        cols = {}
        for name, nbytes in zip(header["columns"], header["blob_bytes"]):
            blob = f.read(nbytes).decode("utf-8")
            vals = blob.split("\n") if n else []
            if len(vals) != n:
                raise ValueError(f"{path}: column {name!r} has {len(vals)} "
                                 f"values, expected {n}")
            cols[name] = np.asarray(vals, dtype=object)
        labels = np.frombuffer(f.read(n), dtype="<i1")
        if labels.size != n:
            raise ValueError(f"{path}: truncated label block")
        if f.read(1):
            raise ValueError(f"{path}: trailing bytes after labels")
    return Dataset(schema, cols, labels, header["chronological"])
