"""Target encoding of granular rows with smoothed CTRs read from a report."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import optimize, sparse
from scipy.special import expit, log_expit

from .aggregation import (AggregationReport, _fmt, coordinate_rows, parse_coordinate, read_meta,
                          row_order, unreparameterize, write_meta)
from .data import GranularDataset, Schema
from .encoding import FeatureIndexMap, encoder_from_descriptor, lookup, table_names


@dataclass(frozen=True)
class CtrTable:
    """Smoothed rate and floored display count per report coordinate."""

    encoder: object
    coords: np.ndarray
    rates: np.ndarray
    displays: np.ndarray
    prior_weight: float
    global_rate: float
    label_kind: str


def compute_ctr_table(report: AggregationReport, label_kind: str = "click",
                      prior_weight: float = 0.0, global_rate: float | None = None) -> CtrTable:
    """rate = (max(C,0) + w p0) / (max(D,0) + w), clamped to [0, 1].

    This is the posterior mean under a Beta(w p0, w (1 - p0)) prior. ``p0``
    defaults to the floored click/display ratio over single-feature tables
    (all coordinates for hashed reports). Entries with a zero denominator
    fall back to ``p0``.
    """
    if prior_weight < 0:
        raise ValueError("prior_weight must be non-negative")
    report = unreparameterize(report)
    d = np.maximum(report.counts()[0], 0.0)
    c = np.maximum(report.labels(label_kind).values, 0.0)
    if global_rate is None:
        mask = report.single_mask() if isinstance(report.encoder, FeatureIndexMap) else None
        dd, cc = (d[mask], c[mask]) if mask is not None else (d, c)
        global_rate = float(cc.sum() / dd.sum()) if dd.sum() > 0 else 0.0
    global_rate = min(max(float(global_rate), 0.0), 1.0)
    num = c + prior_weight * global_rate
    den = d + prior_weight
    rates = np.where(den > 0, num / np.where(den > 0, den, 1.0), global_rate)
    return CtrTable(report.encoder, report.coords, np.clip(rates, 0.0, 1.0), d,
                    float(prior_weight), global_rate, label_kind)


def write_ctr_table(table: CtrTable, out_dir):
    """``ctr.csv`` (report coordinate convention) plus ``ctr.meta``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ctr.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "feat_i", "feat_j", "mod_i", "mod_j", "rate", "displays"])
        order = row_order(table.encoder, table.coords)
        for key, r, d in zip(coordinate_rows(table.encoder, table.coords[order]),
                             table.rates[order].tolist(), table.displays[order].tolist()):
            w.writerow(key + [_fmt(r), _fmt(d)])
    meta = dict(table.encoder.descriptor())
    meta.update({"prior_weight": _fmt(table.prior_weight), "global_rate": _fmt(table.global_rate),
                 "label_kind": table.label_kind})
    write_meta(out_dir / "ctr.meta", meta)


def read_ctr_table(in_dir, schema: Schema) -> CtrTable:
    in_dir = Path(in_dir)
    meta = read_meta(in_dir / "ctr.meta")
    encoder = encoder_from_descriptor(meta, schema)
    coords, rates, displays = [], [], []
    with open(in_dir / "ctr.csv", newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            coords.append(parse_coordinate(encoder, rec))
            rates.append(float(rec["rate"]))
            displays.append(float(rec["displays"]))
    coords = np.asarray(coords, dtype=np.int64)
    order = np.argsort(coords, kind="stable")
    return CtrTable(encoder, coords[order], np.asarray(rates)[order],
                    np.asarray(displays)[order], float(meta["prior_weight"]),
                    float(meta["global_rate"]), meta["label_kind"])


@dataclass(frozen=True)
class EnrichedDataset:
    features: np.ndarray
    ctr: np.ndarray
    counts: np.ndarray | None
    labels: np.ndarray | None

    def __len__(self):
        return self.features.shape[0]

    @property
    def num_features(self):
        return self.features.shape[1]

    def column_names(self):
        F = self.num_features
        tables = table_names(F)
        names = [f"feat_{i}" for i in range(F)] + [f"ctr_{t}" for t in tables]
        if self.counts is not None:
            names += [f"cnt_{t}" for t in tables]
        return names + ["label"]


def enrich(dataset: GranularDataset, table: CtrTable, include_counts: bool = False,
           labeled: bool = True) -> EnrichedDataset:
    """Append one CTR column (and optionally one count column) per table.

    Modalities missing from the table get the global rate and count 0.
    """
    if dataset.num_features != table.encoder.num_features:
        raise ValueError("dataset and report have different numbers of features")
    cols = table.encoder.encode_rows(dataset.features)
    ctr = lookup(table.coords, table.rates, cols, table.global_rate)
    counts = lookup(table.coords, table.displays, cols, 0.0) if include_counts else None
    labels = dataset.labels(table.label_kind).copy() if labeled else None
    return EnrichedDataset(dataset.features.copy(), ctr, counts, labels)


def write_enriched_csv(enriched: EnrichedDataset, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(enriched.column_names())
        for r in range(len(enriched)):
            row = [str(v) for v in enriched.features[r].tolist()]
            row += [_fmt(v) for v in enriched.ctr[r].tolist()]
            if enriched.counts is not None:
                row += [_fmt(v) for v in enriched.counts[r].tolist()]
            row.append("" if enriched.labels is None else str(int(enriched.labels[r])))
            w.writerow(row)


# ---------------------------------------------------------------------------
# built-in learner


@dataclass
class EnrichConfig:
    l2: float = 1.0
    max_iter: int = 500
    ctr_transform: str = "logit"  # "logit" or "identity"
    onehot: bool = True
    seed: int = 0


@dataclass
class EnrichedModel:
    cardinalities: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    weights: np.ndarray
    onehot_weights: np.ndarray
    bias: float
    config: EnrichConfig
    include_counts: bool
    meta: dict


_CTR_FLOOR = 1e-4


def _numeric(enriched: EnrichedDataset, transform: str):
    x = enriched.ctr
    if transform == "logit":
        x = np.clip(x, _CTR_FLOOR, 1 - _CTR_FLOOR)
        x = np.log(x) - np.log1p(-x)
    if enriched.counts is not None:
        x = np.hstack([x, np.log1p(np.maximum(enriched.counts, 0.0))])
    return x


def _onehot(features, cardinalities):
    n, F = features.shape
    offsets = np.concatenate([[0], np.cumsum(cardinalities)])
    ok = (features >= 0) & (features < cardinalities[None, :])
    rows = np.repeat(np.arange(n), F).reshape(n, F)[ok]
    cols = (features + offsets[None, :-1])[ok]
    return sparse.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, int(offsets[-1])))


def _design(model_like, enriched, transform, cardinalities, onehot):
    z = (_numeric(enriched, transform) - model_like[0]) / model_like[1]
    blocks = [sparse.csr_matrix(z)]
    if onehot:
        blocks.append(_onehot(enriched.features, cardinalities))
    return sparse.hstack(blocks, format="csr")


def train_enriched(enriched: EnrichedDataset, cardinalities,
                   config: EnrichConfig | None = None) -> EnrichedModel:
    """L2-regularized logistic regression on standardized enriched columns.

    CTR columns are logit-transformed (or used raw), count columns log1p'd,
    all numeric columns standardized, and one-hot singles appended.
    Fitted with L-BFGS on the summed log-loss plus ``l2/2 |w|^2``.
    """
    config = config or EnrichConfig()
    y = np.asarray(enriched.labels, dtype=np.float64)
    if y.size == 0:
        raise ValueError("the labeled set is empty")
    if y.min() == y.max():
        raise ValueError("labels contain a single class")
    cardinalities = np.asarray(cardinalities, dtype=np.int64)
    num = _numeric(enriched, config.ctr_transform)
    mean = num.mean(axis=0)
    scale = num.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    X = _design((mean, scale), enriched, config.ctr_transform, cardinalities, config.onehot)
    k = X.shape[1]
    rate = y.mean()

    def fun(w):
        m = X @ w[:-1] + w[-1]
        f = -(y * log_expit(m) + (1 - y) * log_expit(-m)).sum() + 0.5 * config.l2 * w[:-1] @ w[:-1]
        r = expit(m) - y
        g = np.append(X.T @ r + config.l2 * w[:-1], r.sum())
        return f, g

    w0 = np.zeros(k + 1)
    w0[-1] = np.log(rate / (1 - rate))
    res = optimize.minimize(fun, w0, jac=True, method="L-BFGS-B",
                            options={"maxiter": config.max_iter})
    w = res.x
    n_num = num.shape[1]
    return EnrichedModel(cardinalities, mean, scale, w[:n_num], w[n_num:-1], float(w[-1]),
                         config, enriched.counts is not None, {"method": "enrich"})


def predict_enriched(model: EnrichedModel, enriched: EnrichedDataset):
    if (enriched.counts is not None) != model.include_counts:
        raise ValueError("count columns do not match the model")
    X = _design((model.mean, model.scale), enriched, model.config.ctr_transform,
                model.cardinalities, model.config.onehot)
    w = np.concatenate([model.weights, model.onehot_weights])
    return expit(X @ w + model.bias)


def write_enriched_model(model: EnrichedModel, out_dir):
    """``model.csv`` rows ``column,mean,scale,weight`` plus ``model.meta``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    F = model.cardinalities.size
    tables = table_names(F)
    names = [f"ctr_{t}" for t in tables]
    if model.include_counts:
        names += [f"cnt_{t}" for t in tables]
    with open(out_dir / "model.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["column", "mean", "scale", "weight"])
        for name, mu, sd, wt in zip(names, model.mean.tolist(), model.scale.tolist(),
                                    model.weights.tolist()):
            w.writerow([name, _fmt(mu), _fmt(sd), _fmt(wt)])
        k = 0
        for i, d in enumerate(model.cardinalities.tolist()):
            for m in range(d):
                if model.config.onehot:
                    w.writerow([f"onehot_{i}_{m}", "", "", _fmt(model.onehot_weights[k])])
                    k += 1
    meta = {"method": "enrich", "bias": _fmt(model.bias),
            "cardinalities": " ".join(str(d) for d in model.cardinalities.tolist()),
            "include_counts": int(model.include_counts), "config.l2": _fmt(model.config.l2),
            "config.max_iter": model.config.max_iter,
            "config.ctr_transform": model.config.ctr_transform,
            "config.onehot": int(model.config.onehot), "config.seed": model.config.seed}
    meta.update({k: v for k, v in model.meta.items() if k not in meta})
    write_meta(out_dir / "model.meta", meta)


def read_enriched_model(model_dir) -> EnrichedModel:
    model_dir = Path(model_dir)
    meta = read_meta(model_dir / "model.meta")
    mean, scale, weights, onehot = [], [], [], []
    with open(model_dir / "model.csv", newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            if rec["column"].startswith("onehot_"):
                onehot.append(float(rec["weight"]))
            else:
                mean.append(float(rec["mean"]))
                scale.append(float(rec["scale"]))
                weights.append(float(rec["weight"]))
    config = EnrichConfig(l2=float(meta["config.l2"]), max_iter=int(meta["config.max_iter"]),
                          ctr_transform=meta["config.ctr_transform"],
                          onehot=meta["config.onehot"] == "1", seed=int(meta["config.seed"]))
    keep = {k: v for k, v in meta.items()
            if not k.startswith("config.") and k not in ("bias", "cardinalities",
                                                          "include_counts")}
    return EnrichedModel(np.array([int(v) for v in meta["cardinalities"].split()], dtype=np.int64),
                         np.array(mean), np.array(scale), np.array(weights), np.array(onehot),
                         float(meta["bias"]), config, meta["include_counts"] == "1", keep)
