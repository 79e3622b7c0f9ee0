"""Grouped tabular datasets: CSV ingestion, encoding, splitting and serialization."""
from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "val", "test")
MISSING_TOKENS = frozenset({"", "?", "NA", "NaN", "nan", "null"})
FORMAT_VERSION = 1


class DataError(ValueError):
    """Malformed input data (missing values, unknown categories, absent groups)."""


class StratificationError(DataError):
    pass


@dataclass
class GroupedDataset:
    """Samples ``(x, y, a)``: features, class labels and group labels."""

    features: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    n_classes: int | None = None
    n_groups: int | None = None
    split: np.ndarray | None = None
    class_names: list[str] | None = None
    group_names: list[str] | None = None
    feature_names: list[str] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.groups = np.asarray(self.groups, dtype=np.int64)
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.groups.shape != (n,):
            raise DataError("features, labels and groups must have the same number of rows")
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1 if n else 0
        if self.n_groups is None:
            self.n_groups = int(self.groups.max()) + 1 if n else 0
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError("label index outside the class alphabet")
        if n and (self.groups.min() < 0 or self.groups.max() >= self.n_groups):
            raise DataError("group index outside the group alphabet")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain missing or non-finite values")
        if self.split is not None:
            self.split = np.asarray(self.split, dtype=np.int8)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> "GroupedDataset":
        return GroupedDataset(
            self.features[index],
            self.labels[index],
            self.groups[index],
            n_classes=self.n_classes,
            n_groups=self.n_groups,
            split=None if self.split is None else self.split[index],
            class_names=self.class_names,
            group_names=self.group_names,
            feature_names=self.feature_names,
        )

    def with_split(self, split) -> "GroupedDataset":
        out = self.subset(slice(None))
        out.split = np.asarray(split, dtype=np.int8)
        return out

    def partition(self, tag: int) -> "GroupedDataset":
        if self.split is None:
            raise DataError("dataset has no split assignment")
        return self.subset(self.split == tag)

    def group_counts(self) -> np.ndarray:
        return np.bincount(self.groups, minlength=self.n_groups)

    def group_indices(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.groups == a) for a in range(self.n_groups)]

    def require_all_groups(self, what: str = "dataset") -> None:
        missing = np.flatnonzero(self.group_counts() == 0)
        if missing.size:
            names = [self._group_name(a) for a in missing]
            raise DataError(f"{what} has no samples for group(s) {names}")

    def _group_name(self, a: int) -> str:
        return self.group_names[a] if self.group_names else str(a)


# ---------------------------------------------------------------------------
# schema and encoding


@dataclass
class SchemaConfig:
    label: str
    group: list[str]
    numeric: list[str] = field(default_factory=list)
    categorical: list[str] = field(default_factory=list)
    ignore: list[str] = field(default_factory=list)
    standardize: bool = True
    keep_sensitive: bool = False

    def __post_init__(self):
        if not self.label:
            raise ValueError("schema needs exactly one label column")
        if not self.group:
            raise ValueError("schema needs at least one group column")

    @classmethod
    def from_file(cls, path) -> "SchemaConfig":
        return cls.from_text(Path(path).read_text())

    @classmethod
    def from_text(cls, text: str) -> "SchemaConfig":
        kv = parse_key_values(text)
        if "label" not in kv:
            raise ValueError("schema is missing 'label'")
        labels = _split_list(kv["label"])
        if len(labels) != 1:
            raise ValueError("schema needs exactly one label column")

        def flag(key, default):
            raw = kv.get(key)
            return default if raw is None else raw.strip().lower() in {"1", "true", "yes", "on"}

        return cls(
            label=labels[0],
            group=_split_list(kv.get("group", "")),
            numeric=_split_list(kv.get("numeric", "")),
            categorical=_split_list(kv.get("categorical", "")),
            ignore=_split_list(kv.get("ignore", "")),
            standardize=flag("standardize", True),
            keep_sensitive=flag("keep_sensitive", False),
        )


def parse_key_values(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip().lower()] = value.strip()
    return out


def _split_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


@dataclass
class Encoder:
    """Category vocabularies fitted on one file and reusable on others."""

    schema: SchemaConfig
    categories: dict[str, list[str]]
    label_classes: list[str]
    group_categories: list[list[str]]

    @property
    def feature_columns(self) -> list[str]:
        cols = list(self.schema.numeric)
        for c in self.schema.categorical:
            if c in self.schema.group and not self.schema.keep_sensitive:
                continue
            cols.append(c)
        return cols

    @property
    def feature_names(self) -> list[str]:
        names = []
        for c in self.feature_columns:
            if c in self.schema.categorical:
                names.extend(f"{c}={v}" for v in self.categories[c])
            else:
                names.append(c)
        if self.schema.keep_sensitive:
            for c in self.schema.group:
                if c not in self.schema.categorical:
                    names.extend(f"{c}={v}" for v in self.group_categories[self.schema.group.index(c)])
        return names

    @property
    def group_names(self) -> list[str]:
        return ["/".join(combo) for combo in itertools.product(*self.group_categories)]

    def to_json(self) -> dict:
        return {
            "schema": self.schema.__dict__,
            "categories": self.categories,
            "label_classes": self.label_classes,
            "group_categories": self.group_categories,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Encoder":
        return cls(SchemaConfig(**d["schema"]), d["categories"], d["label_classes"], d["group_categories"])


def _read_rows(path, schema: SchemaConfig):
    with open(path, newline="") as fh:
        reader = csv.reader(fh, skipinitialspace=True)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        needed = [schema.label, *schema.group, *schema.numeric, *schema.categorical]
        absent = [c for c in needed if c not in header]
        if absent:
            raise DataError(f"{path}: columns {absent} not found in header")
        rows = []
        for lineno, row in enumerate(reader, 2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            rec = {h: cell.strip() for h, cell in zip(header, row)}
            for c in needed:
                if rec[c] in MISSING_TOKENS:
                    raise DataError(f"{path}:{lineno}: missing value in column {c!r}")
            rows.append((lineno, rec))
    return rows


def fit_encoder(rows, schema: SchemaConfig) -> Encoder:
    recs = [rec for _, rec in rows]
    categories = {c: sorted({r[c] for r in recs}) for c in schema.categorical}
    label_classes = sorted({r[schema.label] for r in recs})
    group_categories = [sorted({r[c] for r in recs}) for c in schema.group]
    return Encoder(schema, categories, label_classes, group_categories)


def ingest_csv(path, schema: SchemaConfig, encoder: Encoder | None = None) -> tuple[GroupedDataset, Encoder]:
    """Read a CSV into a :class:`GroupedDataset`.

    Categorical columns are one-hot encoded; the group index is the
    cross-product of the sensitive columns. Sensitive columns are dropped from
    the features unless ``schema.keep_sensitive``. Numeric columns are left
    raw; call :func:`standardize` after splitting. Passing an ``encoder``
    fitted elsewhere applies its vocabularies and rejects unseen categories.
    """
    rows = _read_rows(path, schema)
    if not rows:
        raise DataError(f"{path}: no data rows")
    if encoder is None:
        encoder = fit_encoder(rows, schema)

    cat_index = {c: {v: i for i, v in enumerate(vals)} for c, vals in encoder.categories.items()}
    label_index = {v: i for i, v in enumerate(encoder.label_classes)}
    group_index = [{v: i for i, v in enumerate(vals)} for vals in encoder.group_categories]
    radix = [len(v) for v in encoder.group_categories]
    extra_sensitive = [c for c in schema.group if schema.keep_sensitive and c not in schema.categorical]

    def lookup(table, value, column, lineno):
        try:
            return table[value]
        except KeyError:
            raise DataError(f"{path}:{lineno}: unknown category {value!r} in column {column!r}") from None

    n = len(rows)
    d = len(encoder.feature_names)
    X = np.empty((n, d))
    y = np.empty(n, dtype=np.int64)
    a = np.empty(n, dtype=np.int64)
    for i, (lineno, rec) in enumerate(rows):
        j = 0
        for c in encoder.feature_columns:
            if c in schema.categorical:
                k = len(encoder.categories[c])
                X[i, j:j + k] = 0.0
                X[i, j + lookup(cat_index[c], rec[c], c, lineno)] = 1.0
                j += k
            else:
                try:
                    X[i, j] = float(rec[c])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric value {rec[c]!r} in column {c!r}") from None
                j += 1
        for c in extra_sensitive:
            gi = schema.group.index(c)
            k = radix[gi]
            X[i, j:j + k] = 0.0
            X[i, j + lookup(group_index[gi], rec[c], c, lineno)] = 1.0
            j += k
        y[i] = lookup(label_index, rec[schema.label], schema.label, lineno)
        code = 0
        for gi, c in enumerate(schema.group):
            code = code * radix[gi] + lookup(group_index[gi], rec[c], c, lineno)
        a[i] = code

    ds = GroupedDataset(
        X, y, a,
        n_classes=len(encoder.label_classes),
        n_groups=int(np.prod(radix)),
        class_names=list(encoder.label_classes),
        group_names=encoder.group_names,
        feature_names=encoder.feature_names,
    )
    return ds, encoder


def write_csv(ds: GroupedDataset, path) -> None:
    """Emit features, label and group as a numeric CSV (``repr`` floats round-trip exactly)."""
    names = ds.feature_names or [f"x{j}" for j in range(ds.n_features)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*names, "label", "group"])
        for xi, yi, ai in zip(ds.features, ds.labels, ds.groups):
            w.writerow([*(repr(float(v)) for v in xi), int(yi), int(ai)])


# ---------------------------------------------------------------------------
# splitting and standardization


def split(ds: GroupedDataset, fractions=(0.6, 0.2, 0.2), seed: int = 0, n_splits: int = 5) -> list[np.ndarray]:
    """Stratified train/val/test assignments, one array of tags per split.

    Each group is shuffled independently with a generator keyed on
    ``(seed, split index)`` and cut by ``fractions``.
    """
    fractions = np.asarray(fractions, dtype=float)
    if fractions.shape != (3,) or np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    out = []
    for s in range(n_splits):
        rng = np.random.default_rng([seed, s])
        tags = np.empty(len(ds), dtype=np.int8)
        for a, idx in enumerate(ds.group_indices()):
            n = idx.size
            n_train = int(round(n * fractions[0]))
            n_val = int(round(n * fractions[1]))
            n_test = n - n_train - n_val
            sizes = (n_train, n_val, n_test)
            if any(sz <= 0 for sz, f in zip(sizes, fractions) if f > 0):
                raise StratificationError(
                    f"group {ds._group_name(a)!r} has {n} samples, too few to appear in every partition"
                )
            perm = rng.permutation(idx)
            tags[perm[:n_train]] = TRAIN
            tags[perm[n_train:n_train + n_val]] = VAL
            tags[perm[n_train + n_val:]] = TEST
        out.append(tags)
    return out


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray
    columns: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray, columns) -> "Standardizer":
        columns = np.asarray(columns, dtype=np.int64)
        mean = X[:, columns].mean(axis=0)
        scale = X[:, columns].std(axis=0)
        scale[scale == 0] = 1.0
        return cls(mean, scale, columns)

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = X.copy()
        X[:, self.columns] = (X[:, self.columns] - self.mean) / self.scale
        return X


def standardize(ds: GroupedDataset, split_tags, numeric_columns=None) -> tuple[GroupedDataset, Standardizer]:
    """Standardize numeric columns using statistics of the train rows only."""
    split_tags = np.asarray(split_tags)
    if numeric_columns is None:
        numeric_columns = np.arange(ds.n_features)
    st = Standardizer.fit(ds.features[split_tags == TRAIN], numeric_columns)
    out = ds.with_split(split_tags)
    out.features = st.apply(ds.features)
    return out, st


def numeric_feature_columns(encoder: Encoder) -> list[int]:
    names = encoder.feature_names
    return [names.index(c) for c in encoder.schema.numeric]


def prepare_splits(ds: GroupedDataset, encoder: Encoder | None, seed: int, n_splits: int,
                   fractions=(0.6, 0.2, 0.2)):
    """Yield ``(train, val, test)`` triples, standardized per split when the schema asks for it."""
    cols = numeric_feature_columns(encoder) if encoder is not None else list(range(ds.n_features))
    do_std = encoder is None or encoder.schema.standardize
    for tags in split(ds, fractions, seed, n_splits):
        if do_std and cols:
            split_ds, _ = standardize(ds, tags, cols)
        else:
            split_ds = ds.with_split(tags)
        yield split_ds.partition(TRAIN), split_ds.partition(VAL), split_ds.partition(TEST)


# ---------------------------------------------------------------------------
# binary serialization


def save_dataset(ds: GroupedDataset, path) -> tuple[Path, Path]:
    """Write ``<path>.npz`` (one array per column) plus a ``<path>.json`` sidecar."""
    path = Path(path)
    arrays = {"features": ds.features, "labels": ds.labels, "groups": ds.groups}
    if ds.split is not None:
        arrays["split"] = ds.split
    bin_path = path.with_suffix(".npz")
    np.savez(bin_path, **arrays)
    meta = {
        "format_version": FORMAT_VERSION,
        "n_rows": len(ds),
        "n_features": ds.n_features,
        "n_classes": ds.n_classes,
        "n_groups": ds.n_groups,
        "class_names": ds.class_names,
        "group_names": ds.group_names,
        "feature_names": ds.feature_names,
        "has_split": ds.split is not None,
    }
    json_path = path.with_suffix(".json")
    json_path.write_text(json.dumps(meta, indent=2))
    return bin_path, json_path


def load_dataset(path) -> GroupedDataset:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported dataset format version {meta.get('format_version')}")
    with np.load(path.with_suffix(".npz")) as z:
        return GroupedDataset(
            z["features"], z["labels"], z["groups"],
            n_classes=meta["n_classes"], n_groups=meta["n_groups"],
            split=z["split"] if meta["has_split"] else None,
            class_names=meta["class_names"], group_names=meta["group_names"],
            feature_names=meta["feature_names"],
        )
