"""Logistic regression over K(x) trained from aggregated labels.

The log-likelihood gradient of a logistic model over K(x) is
``sum(y K(x)) - sum(p(x) K(x))``. The first term is the report's label
vector; the second is estimated on unlabeled granular rows, rescaled either
globally (raw count / number of unlabeled rows) or per coordinate
(report displays / unlabeled displays).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.special import expit, log_expit

from .aggregation import (AggregationReport, _fmt, coordinate_rows, estimate_label_total,
                          estimate_raw_count, parse_coordinate, read_meta, row_order,
                          unreparameterize, write_meta)
from .data import GranularDataset, Schema, read_vocab, write_vocab
from .encoding import FeatureIndexMap, SparseVector, encoder_from_descriptor, lookup
from .errors import DivergenceError, EncodingError

log = logging.getLogger(__name__)


def _features(rows):
    if isinstance(rows, GranularDataset):
        return rows.features
    return np.asarray(rows, dtype=np.int64)


@dataclass
class Model:
    """Sparse weights over the encoder's coordinates plus an intercept.

    Coordinates absent from ``coords`` have weight 0.
    """

    encoder: object
    coords: np.ndarray
    weights: np.ndarray
    bias: float = 0.0
    meta: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def logits(self, rows):
        X = _features(rows)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.encoder.num_features:
            raise EncodingError("rows do not match the model's encoder")
        cols = self.encoder.encode_rows(X)
        return lookup(self.coords, self.weights, cols).sum(axis=1) + self.bias

    @property
    def theta(self) -> SparseVector:
        return SparseVector(self.coords, self.weights)


def predict(model: Model, rows):
    """P(y=1 | x) for one row (scalar) or many rows (array)."""
    X = _features(rows)
    p = expit(model.logits(X))
    return float(p[0]) if X.ndim == 1 else p


@dataclass
class Gradient:
    theta: SparseVector
    bias: float

    def dense(self, dim):
        return self.theta.dense(dim)


@dataclass
class TrainConfig:
    optimizer: str = "precond"  # "precond" (constant step) or "adam"
    step_size: float | None = None  # None: 6 / tables per row (precond), 0.05 (adam)
    l2: float = 0.0
    l1: float = 0.0
    num_iterations: int = 200
    rescaling: str = "coordinate"  # "coordinate" or "global"
    raw_count_estimate: float | None = None
    label: str = "click"
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("precond", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.rescaling not in ("coordinate", "global"):
            raise ValueError(f"unknown rescaling {self.rescaling!r}")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.l2 < 0 or self.l1 < 0:
            raise ValueError("regularization strengths must be non-negative")
        if self.num_iterations < 1:
            raise ValueError("num_iterations must be at least 1")
        if self.l1 > 0 and self.optimizer != "adam":
            raise ValueError("l1 is only supported by the adam optimizer")


# ---------------------------------------------------------------------------
# shared machinery


class Design:
    """Rows of K(x) re-indexed onto a compact sorted support.

    Identical rows are merged and carry a multiplicity; per-row quantities
    are evaluated once per distinct row. The matrix is held sparse and
    duplicate coordinates within a row (hash collisions) add up.
    """

    def __init__(self, cols, support=None):
        cols = np.asarray(cols, dtype=np.int64)
        self.num_rows, self.num_tables = cols.shape
        if self.num_rows:
            uniq, inverse, mult = np.unique(cols, axis=0, return_inverse=True,
                                            return_counts=True)
        else:
            uniq, inverse, mult = cols, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        self.inverse = inverse.ravel()
        self.multiplicity = mult.astype(np.float64)
        present = uniq >= 0
        if support is None:
            support = np.unique(uniq[present])
        else:
            support = np.union1d(np.asarray(support, dtype=np.int64), uniq[present])
        self.support = support
        self.size = support.size
        rows = np.broadcast_to(np.arange(uniq.shape[0])[:, None], uniq.shape)[present]
        local = np.searchsorted(support, uniq[present])
        K = sparse.csr_matrix((np.ones(local.size), (rows, local)),
                              shape=(uniq.shape[0], self.size))
        K.sum_duplicates()
        self.K = K
        self.KT = K.T.tocsr()

    def margins(self, theta, bias):
        """Margins of the distinct rows."""
        return self.K @ theta + bias

    def scatter(self, values):
        """sum over all rows of value(row) * K(row), for per-distinct-row values."""
        return self.KT @ (self.multiplicity * np.asarray(values, dtype=np.float64))

    def total(self, values):
        return float(self.multiplicity @ np.asarray(values, dtype=np.float64))

    def scatter_rows(self, row_values):
        """Same as ``scatter`` for values given per original row."""
        merged = np.bincount(self.inverse, weights=np.asarray(row_values, dtype=np.float64),
                             minlength=self.K.shape[0])
        return self.KT @ merged

    def counts(self):
        return self.KT @ self.multiplicity

    def align(self, coords, values):
        """Report values scattered onto the support (0 where absent)."""
        return lookup(np.asarray(coords), np.asarray(values), self.support, 0.0)

    def contains(self, coords):
        return lookup(np.asarray(coords), np.ones(len(coords)), self.support, 0.0) > 0


@dataclass
class Problem:
    """Ascent direction ``target - multiplier * scatter(p)`` on a design.

    ``row_weight`` only scales the logged surrogate objective.
    """

    design: Design
    target: np.ndarray
    multiplier: np.ndarray
    bias_target: float
    bias_multiplier: float
    row_weight: float = 1.0

    def gradient(self, theta, bias, margins=None):
        if margins is None:
            margins = self.design.margins(theta, bias)
        p = expit(margins)
        g = self.target - self.multiplier * self.design.scatter(p)
        gb = self.bias_target - self.bias_multiplier * self.design.total(p)
        return g, gb

    def objective(self, theta, bias, l2, margins=None):
        """Surrogate penalized log-likelihood (exact for the granular problem)."""
        if margins is None:
            margins = self.design.margins(theta, bias)
        return (self.target @ theta + self.bias_target * bias
                + self.row_weight * self.design.total(log_expit(-margins))
                - 0.5 * l2 * theta @ theta)

    def preconditioner(self, l2=0.0):
        """Scaled granular counts plus the L2 strength, floored at 1."""
        return np.maximum(self.multiplier * self.design.counts() + l2, 1.0), max(
            self.bias_multiplier * self.design.num_rows, 1.0)

    def initial_bias(self):
        rate = self.bias_target / max(self.bias_multiplier * self.design.num_rows, 1.0)
        rate = min(max(rate, 1e-6), 1 - 1e-6)
        return float(np.log(rate / (1 - rate)))


def optimize(problem: Problem, config: TrainConfig):
    """Full-batch ascent on the penalized likelihood; returns (theta, bias, history)."""
    theta = np.zeros(problem.design.size)
    bias = problem.initial_bias()
    history = []
    step = config.step_size
    if config.optimizer == "precond":
        step = step or 6.0 / problem.design.num_tables
        pre, pre_b = problem.preconditioner(config.l2)
    else:
        step = step or 0.05
        m1 = np.zeros(theta.size + 1)
        m2 = np.zeros(theta.size + 1)
        b1, b2, eps = 0.9, 0.999, 1e-8

    for it in range(1, config.num_iterations + 1):
        margins = problem.design.margins(theta, bias)
        objective = float(problem.objective(theta, bias, config.l2, margins))
        g, gb = problem.gradient(theta, bias, margins)
        g = g - config.l2 * theta
        if config.optimizer == "precond":
            with np.errstate(over="ignore", invalid="ignore"):
                theta = theta + step * g / pre
                bias = bias + step * gb / pre_b
        else:
            full = np.append(g, gb)
            m1 = b1 * m1 + (1 - b1) * full
            m2 = b2 * m2 + (1 - b2) * full * full
            denom = np.sqrt(m2 / (1 - b2**it)) + eps
            upd = step * (m1 / (1 - b1**it)) / denom
            theta = theta + upd[:-1]
            bias = bias + upd[-1]
            if config.l1 > 0:
                shrink = step * config.l1 / denom[:-1]
                theta = np.sign(theta) * np.maximum(np.abs(theta) - shrink, 0.0)
        if not (np.all(np.isfinite(theta)) and np.isfinite(bias)):
            raise DivergenceError(it)
        # objective and gradient norm are taken where the step started
        history.append({"iteration": it, "objective": objective,
                        "grad_norm": float(np.sqrt(g @ g + gb * gb))})
    return theta, bias, history


# ---------------------------------------------------------------------------
# gradients


def exact_gradient(model: Model, rows, labels) -> Gradient:
    """Log-likelihood gradient on labeled rows: sum((y - p) K(x))."""
    X = _features(rows)
    y = np.asarray(labels, dtype=np.float64)
    cols = model.encoder.encode_rows(X)
    design = Design(cols)
    r = y - predict(model, X)
    return Gradient(SparseVector(design.support, design.scatter_rows(r)), float(r.sum()))


def _report_counts(report: AggregationReport, label: str):
    report = unreparameterize(report)
    d, _, _ = report.counts()
    return report, d, report.labels(label).values


def _aggregate_problem(report: AggregationReport, unlabeled, rescaling: str,
                       raw_count=None, label="click") -> Problem:
    X = _features(unlabeled)
    if X.shape[0] == 0:
        raise ValueError("the unlabeled granular set is empty")
    if X.shape[1] != report.encoder.num_features:
        raise EncodingError("unlabeled rows do not match the report's encoder")
    report, d, y = _report_counts(report, label)
    design = Design(report.encoder.encode_rows(X), support=report.coords)
    n_raw = estimate_raw_count(report) if raw_count is None else float(raw_count)
    ratio = n_raw / design.num_rows
    in_report = design.contains(report.coords)
    target = design.align(report.coords, y)
    if rescaling == "global":
        multiplier = np.where(in_report, ratio, 0.0)
    else:
        g = design.counts()
        d_pos = np.maximum(design.align(report.coords, d), 0.0)
        # no granular mass => no likelihood gradient for that coordinate
        observed = in_report & (g > 0)
        multiplier = np.where(observed, d_pos / np.where(g > 0, g, 1.0), 0.0)
        target = np.where(observed, target, 0.0)
    return Problem(design, target, multiplier,
                   bias_target=estimate_label_total(report, label),
                   bias_multiplier=ratio, row_weight=ratio)


def _problem_gradient(problem: Problem, model: Model) -> Gradient:
    theta = lookup(model.coords, model.weights, problem.design.support)
    g, gb = problem.gradient(theta, model.bias)
    return Gradient(SparseVector(problem.design.support, g), float(gb))


def estimate_gradient_simple(model: Model, report: AggregationReport, unlabeled,
                             raw_count=None, label="click") -> Gradient:
    """C - (raw_count / |unlabeled|) * sum_unlabeled p(x) K(x).

    Coordinates outside the report's support get no likelihood gradient.
    """
    return _problem_gradient(
        _aggregate_problem(report, unlabeled, "global", raw_count, label), model)


def estimate_gradient_rescaled(model: Model, report: AggregationReport, unlabeled,
                               label="click") -> Gradient:
    """C - (D / G) ⊙ sum_unlabeled p(x) K(x), with G the unlabeled counts.

    Noisy negative D is floored at 0 inside the ratio; coordinates with
    G = 0 get no likelihood gradient.
    """
    return _problem_gradient(
        _aggregate_problem(report, unlabeled, "coordinate", None, label), model)


def zero_model(encoder, bias=0.0) -> Model:
    return Model(encoder, np.zeros(0, dtype=np.int64), np.zeros(0), bias)


def train(report: AggregationReport, unlabeled, config: TrainConfig | None = None) -> Model:
    """Fit the aggregated logistic model; ``model.history`` logs each iteration."""
    config = config or TrainConfig()
    problem = _aggregate_problem(report, unlabeled, config.rescaling,
                                 config.raw_count_estimate, config.label)
    theta, bias, history = optimize(problem, config)
    meta = {"method": "agglogistic", "label": config.label,
            "estimator": "rescaled" if config.rescaling == "coordinate" else "simple"}
    meta.update({f"config.{k}": v for k, v in asdict(config).items()})
    return Model(report.encoder, problem.design.support, theta, bias, meta, history)


def generate_fake_granular(report: AggregationReport, n: int, seed: int = 0) -> np.ndarray:
    """Sample ``n`` rows with independent features from the single-table marginals.

    Negative noisy displays are floored at 0 before normalizing.
    """
    if not isinstance(report.encoder, FeatureIndexMap):
        raise ValueError("fake granular sampling needs an exact-encoder report")
    enc = report.encoder
    d = np.maximum(unreparameterize(report).counts()[0], 0.0)
    rng = np.random.default_rng(seed)
    out = np.empty((n, enc.num_features), dtype=np.int64)
    for i in range(enc.num_features):
        lo, hi = enc.offsets[i], enc.offsets[i + 1]
        mask = (report.coords >= lo) & (report.coords < hi)
        mass = np.zeros(int(enc.cardinalities[i]))
        mass[report.coords[mask] - lo] = d[mask]
        if mass.sum() <= 0:
            raise ValueError(f"feature {i} has no positive display mass in the report")
        out[:, i] = rng.choice(mass.size, size=n, p=mass / mass.sum())
    return out


# ---------------------------------------------------------------------------
# model files

MODEL_HEADER = ["kind", "feat_i", "feat_j", "mod_i", "mod_j", "weight"]


def write_model(model: Model, schema: Schema, out_dir):
    """``model.csv`` (report coordinate convention), ``model.meta``, ``vocab.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "model.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MODEL_HEADER)
        order = row_order(model.encoder, model.coords)
        for key, v in zip(coordinate_rows(model.encoder, model.coords[order]),
                          model.weights[order].tolist()):
            w.writerow(key + [_fmt(v)])
    meta = dict(model.encoder.descriptor())
    meta["bias"] = _fmt(model.bias)
    meta.update({k: v for k, v in model.meta.items() if k not in meta})
    write_meta(out_dir / "model.meta", meta)
    write_vocab(schema, out_dir / "vocab.csv")


def read_model(model_dir):
    """Inverse of ``write_model``; returns ``(model, schema)``."""
    model_dir = Path(model_dir)
    meta = read_meta(model_dir / "model.meta")
    schema = read_vocab(model_dir / "vocab.csv")
    encoder = encoder_from_descriptor(meta, schema)
    coords, weights = [], []
    with open(model_dir / "model.csv", newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            coords.append(parse_coordinate(encoder, rec))
            weights.append(float(rec["weight"]))
    coords = np.asarray(coords, dtype=np.int64)
    order = np.argsort(coords, kind="stable")
    skip = {"encoder", "cardinalities", "p", "salt", "bias"}
    return Model(encoder, coords[order], np.asarray(weights, dtype=np.float64)[order],
                 float(meta["bias"]), {k: v for k, v in meta.items() if k not in skip}), schema
