"""Log-loss, NCE, Skyline degradation and paired bootstrap comparisons.

Losses are means over samples (natural log), not sums, so values compare
across dataset sizes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

CLIP_EPSILON = 1e-7


@dataclass(frozen=True)
class EvalResult:
    log_loss: float
    entropy: float
    nce: float
    num_samples: int
    clip_epsilon: float


def _check(predictions, labels):
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} predictions vs {y.shape} labels")
    if p.size == 0:
        raise ValueError("need at least one sample")
    if not np.all(np.isfinite(p)):
        raise ValueError("predictions must be finite")
    return p, y


def per_sample_loss(predictions, labels, clip_epsilon=CLIP_EPSILON):
    p, y = _check(predictions, labels)
    p = np.clip(p, clip_epsilon, 1 - clip_epsilon)
    return -(y * np.log(p) + (1 - y) * np.log1p(-p))


def log_loss(predictions, labels, clip_epsilon=CLIP_EPSILON) -> float:
    return float(per_sample_loss(predictions, labels, clip_epsilon).mean())


def binary_entropy(rate: float) -> float:
    if rate <= 0 or rate >= 1:
        return 0.0
    return -(rate * math.log(rate) + (1 - rate) * math.log1p(-rate))


def nce(predictions, labels, clip_epsilon=CLIP_EPSILON) -> EvalResult:
    """Normalized cross-entropy: (H(Y) - L) / H(Y)."""
    p, y = _check(predictions, labels)
    h = binary_entropy(float(y.mean()))
    if h == 0.0:
        raise ValueError("labels have zero entropy; NCE is undefined")
    loss = log_loss(p, y, clip_epsilon)
    return EvalResult(loss, h, (h - loss) / h, int(y.size), clip_epsilon)


def skyline_degradation(loss: float, skyline_loss: float) -> float:
    """Relative log-loss change vs the Skyline in percent (negative is worse)."""
    if not skyline_loss > 0:
        raise ValueError("skyline_loss must be positive")
    return -100.0 * (loss - skyline_loss) / skyline_loss


def bootstrap_compare(preds_a, preds_b, labels, num_bootstraps=10_000, seed=0,
                      clip_epsilon=CLIP_EPSILON, chunk=256):
    """Paired bootstrap on the log-loss difference ``loss(a) - loss(b)``.

    Returns ``(observed mean delta, p_value)`` where the p-value is twice the
    fraction of resamples whose delta does not share the observed sign,
    capped at 1. Resamples are drawn in fixed-size chunks, each from its own
    seed, so the result does not depend on how chunks are scheduled.
    """
    la = per_sample_loss(preds_a, labels, clip_epsilon)
    lb = per_sample_loss(preds_b, labels, clip_epsilon)
    if la.shape != lb.shape:
        raise ValueError("prediction sets differ in length")
    if num_bootstraps < 100:
        raise ValueError("num_bootstraps must be at least 100")
    diff = la - lb
    n = diff.size
    observed = float(diff.mean())
    deltas = np.empty(num_bootstraps)
    for c, start in enumerate(range(0, num_bootstraps, chunk)):
        k = min(chunk, num_bootstraps - start)
        rng = np.random.default_rng([seed, c])
        idx = rng.integers(0, n, size=(k, n))
        deltas[start:start + k] = diff[idx].mean(axis=1)
    if observed == 0.0:
        return observed, 1.0
    flips = np.mean(deltas <= 0) if observed > 0 else np.mean(deltas >= 0)
    return observed, float(min(1.0, 2.0 * flips))


def write_eval(path, result: EvalResult, extra: dict | None = None):
    rows = [("log_loss", result.log_loss), ("entropy", result.entropy), ("nce", result.nce),
            ("num_samples", result.num_samples), ("clip_epsilon", result.clip_epsilon)]
    rows += list((extra or {}).items())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in rows:
            w.writerow([k, repr(v) if isinstance(v, float) else v])
