"""Contingency-table reports: aggregation, thresholding and Gaussian noise.

A report holds, for every coordinate of K(x) that survived, the display
count D, click sum C and sale sum S. Coordinates absent from a report were
either never observed or discarded by thresholding; they are not zeros.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import _hashing
from .data import GranularDataset, Schema, read_vocab, write_vocab
from .encoding import FeatureIndexMap, SparseVector, encoder_from_descriptor
from .errors import EncodingError, ReportStateError

REPORT_HEADER = ["kind", "feat_i", "feat_j", "mod_i", "mod_j", "displays", "clicks", "sales"]


@dataclass(frozen=True)
class AggregationReport:
    """Sparse D/C/S vectors sharing one support.

    When ``reparameterized`` is set the three stored metrics are
    (displays without click, clicks without sale, sales); ``counts()``
    always returns (D, C, S).
    """

    encoder: object
    coords: np.ndarray
    displays: np.ndarray
    clicks: np.ndarray
    sales: np.ndarray
    noised: bool = False
    thresholded: bool = False
    reparameterized: bool = False
    sigma: float = 0.0
    threshold: int = 0
    seed: int | None = None

    def __len__(self):
        return self.coords.size

    def counts(self):
        """(D, C, S) as dense arrays aligned with ``coords``."""
        if not self.reparameterized:
            return self.displays, self.clicks, self.sales
        s = self.sales
        c = s + self.clicks
        d = c + self.displays
        return d, c, s

    @property
    def D(self) -> SparseVector:
        return SparseVector(self.coords, self.counts()[0])

    @property
    def C(self) -> SparseVector:
        return SparseVector(self.coords, self.counts()[1])

    @property
    def S(self) -> SparseVector:
        return SparseVector(self.coords, self.counts()[2])

    def labels(self, kind: str) -> SparseVector:
        if kind == "click":
            return self.C
        if kind == "sale":
            return self.S
        raise ValueError(f"unknown label kind {kind!r}")

    def single_mask(self):
        """Mask of coordinates that belong to single-feature tables.

        Hashed reports have no separable single tables; every coordinate is
        reported as mixed and the mask is all False.
        """
        if isinstance(self.encoder, FeatureIndexMap):
            return self.encoder.is_single(self.coords)
        return np.zeros(self.coords.size, dtype=bool)

    def with_counts(self, d, c, s):
        return replace(self, displays=np.asarray(d, float), clicks=np.asarray(c, float),
                       sales=np.asarray(s, float), reparameterized=False)


def aggregate(dataset: GranularDataset, encoder) -> AggregationReport:
    """Exact sums of K(x), y_click*K(x) and y_sale*K(x) over the rows."""
    if dataset.num_features != encoder.num_features:
        raise EncodingError(
            f"dataset has {dataset.num_features} features, encoder expects {encoder.num_features}")
    cols = encoder.encode_rows(dataset.features)
    flat = cols.ravel()
    keep = flat >= 0
    coords, inv = np.unique(flat[keep], return_inverse=True)
    P = cols.shape[1]
    out = []
    for w in (None, dataset.clicks, dataset.sales):
        weights = None if w is None else np.repeat(w.astype(np.float64), P)[keep]
        out.append(np.bincount(inv, weights=weights, minlength=coords.size).astype(np.float64))
    return AggregationReport(encoder, coords, *out)


def threshold_report(report: AggregationReport, min_count: int) -> AggregationReport:
    """Drop coordinates whose true display count is below ``min_count``."""
    if report.noised:
        raise ReportStateError("thresholding must be applied to true counts, before noise")
    if min_count < 0:
        raise ValueError("min_count must be non-negative")
    keep = report.counts()[0] >= min_count
    return replace(report, coords=report.coords[keep], displays=report.displays[keep],
                   clicks=report.clicks[keep], sales=report.sales[keep],
                   thresholded=True, threshold=int(min_count))


@dataclass(frozen=True)
class PrivacyParams:
    epsilon: float
    delta: float
    l2_sensitivity: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.l2_sensitivity < 0:
            raise ValueError("sensitivity must be non-negative")

    @property
    def sigma(self) -> float:
        return calibrate_sigma(self.epsilon, self.delta, self.l2_sensitivity)


def calibrate_sigma(epsilon: float, delta: float, l2_sensitivity: float) -> float:
    """Classical Gaussian mechanism: Δ·sqrt(2 ln(1.25/δ)) / ε."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if l2_sensitivity < 0:
        raise ValueError("sensitivity must be non-negative")
    return l2_sensitivity * math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def l2_sensitivity(num_tables: int, metrics_per_line: int = 3,
                   reparameterized: bool = False) -> float:
    """L2 norm of one record's contribution to all tables."""
    if num_tables < 1 or metrics_per_line not in (1, 2, 3):
        raise ValueError("need num_tables >= 1 and 1 <= metrics_per_line <= 3")
    if reparameterized:
        return math.sqrt(num_tables)
    return math.sqrt(num_tables * metrics_per_line)


def add_gaussian_noise(report: AggregationReport, sigma: float, seed: int) -> AggregationReport:
    """Add N(0, sigma^2) to every stored value.

    The draw for (metric, coordinate) depends only on the seed, so the same
    coordinate gets the same noise however the report was built.
    """
    if report.noised:
        raise ReportStateError("report is already noised")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    noisy = []
    for stream, values in enumerate((report.displays, report.clicks, report.sales)):
        if sigma == 0:
            noisy.append(values.copy())
        else:
            noisy.append(values + sigma * _hashing.counter_gaussian(seed, stream, report.coords))
    return replace(report, displays=noisy[0], clicks=noisy[1], sales=noisy[2],
                   noised=True, sigma=float(sigma), seed=int(seed))


def reparameterize(report: AggregationReport) -> AggregationReport:
    """Store (displays - clicks, clicks - sales, sales) so one record hits one metric."""
    if report.noised:
        raise ReportStateError("re-parameterization is defined on true counts")
    if report.reparameterized:
        return report
    d, c, s = report.counts()
    return replace(report, displays=d - c, clicks=c - s, sales=s.copy(), reparameterized=True)


def unreparameterize(report: AggregationReport) -> AggregationReport:
    """Back to (D, C, S) by prefix sums; valid on noised reports too."""
    if not report.reparameterized:
        return report
    return report.with_counts(*report.counts())


def build_report(dataset: GranularDataset, encoder, *, threshold: int = 0,
                 sigma: float = 0.0, seed: int = 0,
                 reparameterized: bool = False) -> AggregationReport:
    """aggregate -> threshold -> (reparameterize) -> noise, in that order."""
    report = aggregate(dataset, encoder)
    if threshold > 0:
        report = threshold_report(report, threshold)
    if reparameterized:
        report = reparameterize(report)
    return add_gaussian_noise(report, sigma, seed)


def estimate_raw_count(report: AggregationReport) -> float:
    """Estimated number of rows behind a report.

    Exact encoder: mean over single tables of their display sums. Hashed
    encoder: total display mass divided by the number of tables per row.
    Clamped below at 1.
    """
    d = report.counts()[0]
    if isinstance(report.encoder, FeatureIndexMap):
        mask = report.single_mask()
        if not mask.any():
            raise ValueError("report has no single-feature table entries")
        total = d[mask].sum() / report.encoder.num_features
    else:
        if len(report) == 0:
            raise ValueError("report is empty")
        total = d.sum() / report.encoder.num_tables
    return max(float(total), 1.0)


def estimate_label_total(report: AggregationReport, kind: str = "click") -> float:
    """Estimated number of positive rows, same averaging as ``estimate_raw_count``."""
    y = report.labels(kind).values
    if isinstance(report.encoder, FeatureIndexMap):
        mask = report.single_mask()
        if not mask.any():
            raise ValueError("report has no single-feature table entries")
        return float(y[mask].sum() / report.encoder.num_features)
    return float(y.sum() / report.encoder.num_tables)


# ---------------------------------------------------------------------------
# serialization


def _fmt(x: float) -> str:
    return repr(float(x))


def coordinate_rows(encoder, coords):
    """(kind, feat_i, feat_j, mod_i, mod_j) string columns for coordinates."""
    coords = np.asarray(coords, dtype=np.int64)
    if isinstance(encoder, FeatureIndexMap):
        _, fi, fj, mi, mj = encoder.decode_many(coords)
        rows = []
        for a, b, c, e in zip(fi.tolist(), fj.tolist(), mi.tolist(), mj.tolist()):
            if b < 0:
                rows.append(["single", str(a), "", str(c), ""])
            else:
                rows.append(["pair", str(a), str(b), str(c), str(e)])
        return rows
    return [["hashed", "", "", str(c), ""] for c in coords.tolist()]


def row_order(encoder, coords):
    """Permutation sorting coordinates by (kind, feat_i, feat_j, mod_i, mod_j).

    "pair" sorts before "single"; within a kind this is coordinate order.
    """
    coords = np.asarray(coords, dtype=np.int64)
    if isinstance(encoder, FeatureIndexMap):
        return np.argsort(encoder.is_single(coords), kind="stable")
    return np.argsort(coords, kind="stable")


def parse_coordinate(encoder, rec) -> int:
    kind = rec["kind"]
    if kind == "hashed":
        return int(rec["mod_i"])
    if kind == "single":
        return encoder.coordinate_of(int(rec["feat_i"]), int(rec["mod_i"]))
    if kind == "pair":
        return encoder.coordinate_of_pair(int(rec["feat_i"]), int(rec["feat_j"]),
                                          int(rec["mod_i"]), int(rec["mod_j"]))
    raise ValueError(f"unknown row kind {kind!r}")


def write_meta(path, items: dict):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k, v in items.items():
            fh.write(f"{k}={v}\n")


def read_meta(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def write_report(report: AggregationReport, schema: Schema, out_dir):
    """Write ``report.csv``, ``report.meta`` and ``vocab.csv`` into ``out_dir``.

    Rows are sorted by (kind, feat_i, feat_j, mod_i, mod_j): pairs by (i, j)
    then (m_i, m_j), then singles by feature and modality; hashed rows by
    coordinate.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        order = row_order(report.encoder, report.coords)
        keys = coordinate_rows(report.encoder, report.coords[order])
        for key, d, c, s in zip(keys, report.displays[order].tolist(),
                                report.clicks[order].tolist(), report.sales[order].tolist()):
            w.writerow(key + [_fmt(d), _fmt(c), _fmt(s)])
    meta = dict(report.encoder.descriptor())
    meta.update({
        "num_features": report.encoder.num_features,
        "noised": int(report.noised),
        "thresholded": int(report.thresholded),
        "reparameterized": int(report.reparameterized),
        "sigma": _fmt(report.sigma),
        "threshold": report.threshold,
        "seed": "" if report.seed is None else report.seed,
    })
    write_meta(out_dir / "report.meta", meta)
    write_vocab(schema, out_dir / "vocab.csv")


def read_report(report_dir):
    """Inverse of ``write_report``; returns ``(report, schema)``."""
    report_dir = Path(report_dir)
    meta = read_meta(report_dir / "report.meta")
    schema = read_vocab(report_dir / "vocab.csv")
    encoder = encoder_from_descriptor(meta, schema)
    coords, d, c, s = [], [], [], []
    with open(report_dir / "report.csv", newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            coords.append(parse_coordinate(encoder, rec))
            d.append(float(rec["displays"]))
            c.append(float(rec["clicks"]))
            s.append(float(rec["sales"]))
    coords = np.asarray(coords, dtype=np.int64)
    order = np.argsort(coords, kind="stable")
    report = AggregationReport(
        encoder, coords[order], np.asarray(d)[order], np.asarray(c)[order],
        np.asarray(s)[order],
        noised=meta["noised"] == "1", thresholded=meta["thresholded"] == "1",
        reparameterized=meta["reparameterized"] == "1", sigma=float(meta["sigma"]),
        threshold=int(meta["threshold"]),
        seed=int(meta["seed"]) if meta.get("seed") else None)
    return report, schema
