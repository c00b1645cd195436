"""Granular datasets: CSV ingestion, vocabularies, splits and synthetic data."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import DataError, SchemaError

OOV = -1


@dataclass
class Schema:
    """Feature names and per-feature vocabularies (raw string -> dense index)."""

    feature_names: list[str]
    vocab: list[dict[str, int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.vocab:
            self.vocab = [{} for _ in self.feature_names]
        if len(self.vocab) != len(self.feature_names):
            raise SchemaError("one vocabulary per feature is required")

    @property
    def num_features(self) -> int:
        return len(self.feature_names)

    @property
    def cardinality(self) -> list[int]:
        return [len(v) for v in self.vocab]

    def tokens(self, i: int) -> list[str]:
        """Raw values of feature ``i`` ordered by dense index."""
        out = [""] * len(self.vocab[i])
        for raw, idx in self.vocab[i].items():
            out[idx] = raw
        return out

    def copy(self) -> "Schema":
        return Schema(list(self.feature_names), [dict(v) for v in self.vocab])

    @classmethod
    def from_cardinalities(cls, cardinalities, names=None) -> "Schema":
        names = names or [f"f{i}" for i in range(len(cardinalities))]
        return cls(list(names), [{str(m): m for m in range(d)} for d in cardinalities])


@dataclass(frozen=True)
class GranularDataset:
    """Rows of dense modality indices plus binary click/sale labels.

    ``features`` may contain ``OOV`` (-1) for values unknown to the schema;
    those contribute no coordinates when encoded.
    """

    features: np.ndarray
    clicks: np.ndarray
    sales: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.int64)
        if f.ndim != 2:
            raise DataError("features must be a 2-d array")
        object.__setattr__(self, "features", f)
        for name in ("clicks", "sales"):
            v = np.asarray(getattr(self, name), dtype=np.int8)
            if v.shape != (f.shape[0],):
                raise DataError(f"{name} must have one entry per row")
            object.__setattr__(self, name, v)

    def __len__(self):
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def labels(self, kind: str) -> np.ndarray:
        if kind == "click":
            return self.clicks
        if kind == "sale":
            return self.sales
        raise ValueError(f"unknown label kind {kind!r}")

    def take(self, idx) -> "GranularDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return GranularDataset(self.features[idx], self.clicks[idx], self.sales[idx])

    @staticmethod
    def concat(parts: Sequence["GranularDataset"]) -> "GranularDataset":
        return GranularDataset(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.clicks for p in parts]),
            np.concatenate([p.sales for p in parts]),
        )


@dataclass
class ColumnMap:
    feature_columns: list[str]
    click_column: str = "click"
    sale_column: str = "sale"


def _parse_labels(values: pd.Series, column: str) -> np.ndarray:
    ok = values.isin(["0", "1"]).to_numpy()
    if not ok.all():
        row = int(np.flatnonzero(~ok)[0])
        # +2: header is line 1
        raise DataError(
            f"line {row + 2}: label column {column!r} has non-binary value {values.iloc[row]!r}"
        )
    return (values.to_numpy() == "1").astype(np.int8)


def load_granular_csv(path, column_map: ColumnMap | None = None,
                      schema: Schema | None = None, extend: bool = True,
                      labeled: bool = True):
    """Read a granular CSV into a dataset and a schema.

    Raw values get dense indices in first-seen order. When ``schema`` is
    given its vocabularies are reused; unseen values are appended if
    ``extend`` else mapped to ``OOV``. The input schema is not mutated.
    With ``labeled=False`` label columns are optional and read as zeros.
    """
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False)
    if column_map is None:
        label_cols = {"click", "sale"}
        column_map = ColumnMap([c for c in frame.columns if c not in label_cols])
    needed = list(column_map.feature_columns)
    if labeled:
        needed += [column_map.click_column, column_map.sale_column]
    for col in needed:
        if col not in frame.columns:
            raise SchemaError(f"missing column {col!r} in {path}")

    if schema is None:
        schema = Schema(list(column_map.feature_columns))
    else:
        if schema.num_features != len(column_map.feature_columns):
            raise SchemaError("column map and schema disagree on the number of features")
        schema = schema.copy()

    n = len(frame)
    feats = np.empty((n, schema.num_features), dtype=np.int64)
    for i, col in enumerate(column_map.feature_columns):
        codes, uniques = pd.factorize(frame[col], sort=False)
        vocab = schema.vocab[i]
        lookup = np.empty(len(uniques), dtype=np.int64)
        for k, raw in enumerate(uniques):
            idx = vocab.get(raw)
            if idx is None:
                if extend:
                    idx = len(vocab)
                    vocab[raw] = idx
                else:
                    idx = OOV
            lookup[k] = idx
        feats[:, i] = lookup[codes] if n else codes

    if labeled:
        clicks = _parse_labels(frame[column_map.click_column], column_map.click_column)
        sales = _parse_labels(frame[column_map.sale_column], column_map.sale_column)
    else:
        clicks = sales = np.zeros(n, dtype=np.int8)
    return GranularDataset(feats, clicks, sales), schema


def write_granular_csv(dataset: GranularDataset, schema: Schema, path,
                       column_map: ColumnMap | None = None):
    column_map = column_map or ColumnMap(list(schema.feature_names))
    tokens = [schema.tokens(i) for i in range(schema.num_features)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(column_map.feature_columns)
                   + [column_map.click_column, column_map.sale_column])
        for row, c, s in zip(dataset.features.tolist(), dataset.clicks.tolist(),
                             dataset.sales.tolist()):
            w.writerow([tokens[i][m] for i, m in enumerate(row)] + [c, s])


def write_vocab(schema: Schema, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "name", "index", "value"])
        for i, name in enumerate(schema.feature_names):
            for m, raw in enumerate(schema.tokens(i)):
                w.writerow([i, name, m, raw])


def read_vocab(path) -> Schema:
    names: dict[int, str] = {}
    vocab: dict[int, dict[str, int]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            i = int(rec["feature"])
            names[i] = rec["name"]
            vocab.setdefault(i, {})[rec["value"]] = int(rec["index"])
    order = sorted(names)
    if order != list(range(len(order))):
        raise SchemaError(f"{path}: feature indices are not contiguous")
    return Schema([names[i] for i in order], [vocab.get(i, {}) for i in order])


def split(dataset: GranularDataset, fractions: Sequence[float], seed: int = 0):
    """Random disjoint partition with sizes proportional to ``fractions``.

    Each part keeps the input's row order.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.size == 0 or np.any(fractions < 0) or np.any(fractions > 1):
        raise ValueError("fractions must lie in [0, 1]")
    if abs(fractions.sum() - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    n = len(dataset)
    bounds = np.rint(np.cumsum(fractions) * n).astype(np.int64)
    bounds[-1] = n
    perm = np.random.default_rng(seed).permutation(n)
    parts = []
    start = 0
    for stop in bounds:
        parts.append(dataset.take(np.sort(perm[start:stop])))
        start = stop
    return parts


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    cardinalities: Sequence[int]
    num_rows: int
    marginal_skew: float | Sequence[float] = 1.1
    true_weight_density: float = 0.3
    base_rate: float = 0.1
    seed: int = 0
    weight_scale: float = 1.0
    sale_rate: float = 0.005

    @property
    def num_features(self) -> int:
        return len(self.cardinalities)


@dataclass(frozen=True)
class TrueModel:
    """Ground-truth logistic model over the exact K(x) layout."""

    click_theta: np.ndarray
    click_bias: float
    sale_theta: np.ndarray
    sale_bias: float
    marginals: list[np.ndarray]

    def logits(self, features, encoder, kind="click"):
        theta = self.click_theta if kind == "click" else self.sale_theta
        bias = self.click_bias if kind == "click" else self.sale_bias
        cols = encoder.encode_rows(features)
        return theta[cols].sum(axis=1) + bias

    def probabilities(self, features, encoder, kind="click"):
        return 1.0 / (1.0 + np.exp(-self.logits(features, encoder, kind)))


def _zipf_marginal(d, s):
    p = np.arange(1, d + 1, dtype=np.float64) ** -float(s)
    return p / p.sum()


def _calibrate_bias(logits, rate):
    lo, hi = -40.0, 40.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if np.mean(1.0 / (1.0 + np.exp(-(logits + mid)))) < rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _draw_features(rng, marginals, n):
    out = np.empty((n, len(marginals)), dtype=np.int64)
    for i, p in enumerate(marginals):
        out[:, i] = rng.choice(len(p), size=n, p=p)
    return out


def generate_synthetic(spec: SyntheticSpec, num_rows: int | None = None, seed: int | None = None):
    """Draw a dataset from a random sparse logistic model over K(x).

    Returns ``(dataset, true_model, schema)``. ``num_rows``/``seed`` override
    ``spec.num_rows``/``spec.seed`` to draw extra i.i.d. rows from the *same*
    model; the model itself depends only on ``spec.seed``.
    """
    from .encoding import FeatureIndexMap

    if any(d < 2 for d in spec.cardinalities):
        raise ValueError("every cardinality must be at least 2")
    if not 0.0 < spec.base_rate < 1.0 or not 0.0 < spec.sale_rate < 1.0:
        raise ValueError("base rates must lie in (0, 1)")
    if not 0.0 <= spec.true_weight_density <= 1.0:
        raise ValueError("true_weight_density must lie in [0, 1]")

    skews = np.broadcast_to(np.asarray(spec.marginal_skew, dtype=np.float64),
                            (spec.num_features,))
    marginals = [_zipf_marginal(d, s) for d, s in zip(spec.cardinalities, skews)]
    schema = Schema.from_cardinalities(spec.cardinalities)
    enc = FeatureIndexMap(schema.cardinality)

    model_rng = np.random.default_rng([spec.seed, 0])
    thetas = []
    for _ in range(2):
        mask = model_rng.random(enc.dim) < spec.true_weight_density
        thetas.append(np.where(mask, model_rng.normal(0.0, spec.weight_scale, enc.dim), 0.0))

    # bias calibrated on a fixed reference sample so it is a property of the model
    ref = _draw_features(np.random.default_rng([spec.seed, 1]), marginals, 50_000)
    ref_cols = enc.encode_rows(ref)
    click_bias = _calibrate_bias(thetas[0][ref_cols].sum(axis=1), spec.base_rate)
    sale_bias = _calibrate_bias(thetas[1][ref_cols].sum(axis=1), spec.sale_rate)
    truth = TrueModel(thetas[0], click_bias, thetas[1], sale_bias, marginals)

    n = spec.num_rows if num_rows is None else num_rows
    s = spec.seed if seed is None else seed
    rng = np.random.default_rng([s, 2])
    feats = _draw_features(rng, marginals, n)
    p_click = truth.probabilities(feats, enc, "click") if n else np.zeros(0)
    p_sale = truth.probabilities(feats, enc, "sale") if n else np.zeros(0)
    clicks = (rng.random(n) < p_click).astype(np.int8)
    sales = (rng.random(n) < p_sale).astype(np.int8)
    return GranularDataset(feats, clicks, sales), truth, schema
