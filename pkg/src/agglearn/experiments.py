"""Synthetic experiment sweeps: privacy noise, granular data size and L2 / rescaling ablation.

Every (grid value, seed) pair is an independent task that rebuilds its own
synthetic world, so tasks can run in any order on any number of workers and
the merged rows only depend on the grid.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .agg_logistic import TrainConfig, generate_fake_granular, predict, train
from .aggregation import _fmt, add_gaussian_noise, aggregate, threshold_report
from .data import SyntheticSpec, generate_synthetic
from .encoding import FeatureIndexMap, HashedEncoder, HashedEncoderConfig
from .enrichment import EnrichConfig, compute_ctr_table, enrich, predict_enriched, train_enriched
from .errors import AggLearnError
from .evaluation import nce
from .skyline import train_skyline

log = logging.getLogger(__name__)

SWEEP_HEADER = ["sweep_param", "value", "method", "seed", "l2", "log_loss", "nce", "error"]
SWEEP_KINDS = {"noise": "sigma", "granular-size": "num_granular", "l2-ablation": "l2"}
# methods whose inner knob is the L2 strength; enrich sweeps the prior weight instead
L2_METHODS = ("agglogistic", "agglogistic-global", "agglogistic-testsamples", "skyline", "fake")
METHODS = L2_METHODS + ("enrich",)
GRANULAR_SOURCES = ("fresh", "raw", "test")

# row-draw seeds of the auxiliary sets, offset from the sweep seed
_TEST_SEED = 1_000_003
_POOL_SEED = 2_000_003


@dataclass(frozen=True)
class Scenario:
    cardinalities: tuple = (8, 12, 20, 30, 50)
    num_raw: int = 200_000
    num_test: int = 50_000
    num_granular: int = 20_000
    granular_source: str = "fresh"
    weight_scale: float = 1.0
    base_rate: float = 0.1
    sigma: float = 17.0
    threshold: int = 10
    hashed_p: int = 0
    hash_salt: int = 0
    l2_grid: tuple = (4.0, 16.0, 64.0, 256.0, 1024.0, 4096.0)
    prior_weights: tuple = (1.0, 10.0, 100.0, 1000.0)
    enrich_l2: float = 10.0
    num_iterations: int = 300
    label: str = "click"
    methods: tuple = ("agglogistic", "enrich")

    def __post_init__(self):
        if self.granular_source not in GRANULAR_SOURCES:
            raise ValueError(f"granular_source must be one of {GRANULAR_SOURCES}")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown or not self.methods:
            raise ValueError(f"unknown or empty methods {list(unknown)}; choose from {METHODS}")
        if not self.l2_grid or not self.prior_weights:
            raise ValueError("inner grids must be non-empty")

    def synthetic_spec(self, seed):
        return SyntheticSpec(list(self.cardinalities), self.num_raw, base_rate=self.base_rate,
                             seed=seed, weight_scale=self.weight_scale)


@dataclass
class World:
    raw: object
    test: object
    schema: object
    encoder: object
    base_report: object  # aggregated and thresholded, not yet noised


@lru_cache(maxsize=2)
def _world(scenario: Scenario, seed: int, threshold: int) -> World:
    spec = scenario.synthetic_spec(seed)
    raw, _, schema = generate_synthetic(spec)
    test, _, _ = generate_synthetic(spec, num_rows=scenario.num_test, seed=_TEST_SEED + seed)
    if scenario.hashed_p:
        encoder = HashedEncoder(schema, HashedEncoderConfig(scenario.hashed_p, scenario.hash_salt))
    else:
        encoder = FeatureIndexMap(schema.cardinality)
    report = aggregate(raw, encoder)
    if threshold > 0:
        report = threshold_report(report, threshold)
    return World(raw, test, schema, encoder, report)


def granular_set(scenario: Scenario, world: World, n: int, seed: int):
    """Labeled granular rows: fresh i.i.d. draws, a raw subsample, or the test rows."""
    if n < 1:
        raise ValueError("granular set size must be positive")
    if scenario.granular_source == "fresh":
        data, _, _ = generate_synthetic(scenario.synthetic_spec(seed), num_rows=n,
                                        seed=_POOL_SEED + seed)
        return data
    source = world.raw if scenario.granular_source == "raw" else world.test
    if n > len(source):
        raise ValueError(f"asked for {n} granular rows, source has {len(source)}")
    if scenario.granular_source == "test":
        return source.take(np.arange(n))
    idx = np.random.default_rng([seed, 3]).permutation(len(source))[:n]
    return source.take(np.sort(idx))


def _fit_predict(method, knob, scenario, world, report, granular, seed):
    test = world.test
    if method == "enrich":
        table = compute_ctr_table(report, scenario.label, knob)
        model = train_enriched(enrich(granular, table), world.schema.cardinality,
                               EnrichConfig(l2=scenario.enrich_l2, seed=seed))
        return predict_enriched(model, enrich(test, table, labeled=False))
    cfg = TrainConfig(l2=knob, num_iterations=scenario.num_iterations, label=scenario.label,
                      rescaling="global" if method == "agglogistic-global" else "coordinate",
                      seed=seed)
    if method == "skyline":
        model = train_skyline(granular, granular.labels(scenario.label), world.encoder, cfg)
    elif method == "fake":
        rows = generate_fake_granular(report, len(granular), seed=seed)
        model = train(report, rows, cfg)
    elif method == "agglogistic-testsamples":
        model = train(report, test.features[:len(granular)], cfg)
    else:
        model = train(report, granular.features, cfg)
    return predict(model, test)


def _row(param, value, method, seed, knob, loss="", score="", error=""):
    return {"sweep_param": param, "value": value, "method": method, "seed": str(seed),
            "l2": knob if isinstance(knob, str) else _fmt(knob),
            "log_loss": loss if isinstance(loss, str) else _fmt(loss),
            "nce": score if isinstance(score, str) else _fmt(score), "error": error}


def run_task(kind: str, value, seed: int, scenario: Scenario):
    """All rows for one grid value and seed."""
    param = SWEEP_KINDS[kind]
    text = _fmt(value) if isinstance(value, float) else str(value)
    if kind == "noise":
        scenario = replace(scenario, sigma=float(value))
    elif kind == "granular-size":
        scenario = replace(scenario, num_granular=int(value))
    rows = []
    try:
        world = _world(replace(scenario, sigma=0.0, num_granular=0, methods=("agglogistic",)),
                       seed, scenario.threshold)
        report = add_gaussian_noise(world.base_report, scenario.sigma, seed)
        granular = granular_set(scenario, world, scenario.num_granular, seed)
    except (AggLearnError, ValueError) as exc:
        return [_row(param, text, m, seed, "", error=_error(exc)) for m in scenario.methods]

    for method in scenario.methods:
        if kind == "l2-ablation":
            knobs = [float(value)] if method in L2_METHODS else []
            if not knobs:
                rows.append(_row(param, text, method, seed, "",
                                 error="method has no L2 knob; not part of an L2 ablation"))
                continue
        else:
            knobs = scenario.prior_weights if method == "enrich" else scenario.l2_grid
        results = []
        for knob in knobs:
            try:
                p = _fit_predict(method, float(knob), scenario, world, report, granular, seed)
                r = nce(p, world.test.labels(scenario.label))
                rows.append(_row(param, text, method, seed, float(knob), r.log_loss, r.nce))
                results.append((r.nce, float(knob), r.log_loss))
            except (AggLearnError, ValueError, FloatingPointError) as exc:
                rows.append(_row(param, text, method, seed, float(knob), error=_error(exc)))
        if kind != "l2-ablation":
            if results:
                best = max(results, key=lambda t: (t[0], -t[1]))
                rows.append(_row(param, text, f"{method}:best", seed, best[1], best[2], best[0]))
            else:
                rows.append(_row(param, text, f"{method}:best", seed, "",
                                 error="no inner grid point succeeded"))
    return rows


def _error(exc):
    return f"{type(exc).__name__}: {exc}".replace("\n", " ")


def _run_star(args):
    return run_task(*args)


def run_sweep(kind: str, grid, seeds, scenario: Scenario, workers: int = 1):
    """Rows for every grid value x seed x method, ordered by grid then seed."""
    if kind not in SWEEP_KINDS:
        raise ValueError(f"unknown sweep kind {kind!r}; choose from {sorted(SWEEP_KINDS)}")
    grid, seeds = list(grid), list(seeds)
    if not grid or not seeds:
        raise ValueError("sweep grid and seeds must be non-empty")
    tasks = [(kind, v, int(s), scenario) for v in grid for s in seeds]
    if workers <= 1:
        chunks = [_run_star(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_star, tasks))
    return [row for chunk in chunks for row in chunk]


def write_sweep_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_HEADER, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def summarize(rows, method, value=None):
    """Mean NCE of ``method`` rows per value (or at one value), skipping failures."""
    out = {}
    for r in rows:
        if r["method"] != method or r["error"]:
            continue
        out.setdefault(r["value"], []).append(float(r["nce"]))
    means = {k: float(np.mean(v)) for k, v in out.items()}
    return means if value is None else means.get(value)
