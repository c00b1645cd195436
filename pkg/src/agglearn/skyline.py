"""Baselines with full label access: the granular Skyline and the Dummy model."""

from __future__ import annotations

from dataclasses import asdict

import numpy as np

from .agg_logistic import Design, Model, Problem, TrainConfig, _features, optimize


def skyline_problem(rows, labels, encoder) -> Problem:
    X = _features(rows)
    y = np.asarray(labels, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("the labeled set is empty")
    design = Design(encoder.encode_rows(X))
    return Problem(design, design.scatter_rows(y), np.ones(design.size), float(y.sum()), 1.0)


def train_skyline(rows, labels, encoder, config: TrainConfig | None = None) -> Model:
    """L2-regularized logistic regression on K(x) of fully labeled rows.

    Uses the same optimizer as the aggregated trainer, so gaps between the
    two come from data access alone.
    """
    config = config or TrainConfig()
    y = np.asarray(labels)
    if y.size and (y.min() == y.max()):
        raise ValueError("labels contain a single class")
    problem = skyline_problem(rows, y, encoder)
    theta, bias, history = optimize(problem, config)
    meta = {"method": "skyline", "label": config.label}
    meta.update({f"config.{k}": v for k, v in asdict(config).items()})
    return Model(encoder, problem.design.support, theta, bias, meta, history)


def dummy_model(labels, encoder, clip_epsilon: float = 1e-7) -> Model:
    """Constant predictor at the mean label (clipped away from 0 and 1)."""
    y = np.asarray(labels, dtype=np.float64)
    if y.size == 0:
        raise ValueError("labels are empty")
    rate = min(max(y.mean(), clip_epsilon), 1 - clip_epsilon)
    return Model(encoder, np.zeros(0, dtype=np.int64), np.zeros(0),
                 float(np.log(rate) - np.log1p(-rate)), {"method": "dummy"})
