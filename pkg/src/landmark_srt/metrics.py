"""Accuracy (NME, AUC, failure rate) and precision (P-error) metrics."""
from __future__ import annotations

import csv
import io

import numpy as np

from .synthworld import EltConfig, affine_apply, affine_invert, bbox_scale, elt_transform_pair

AUC_BINS = 1000
REPORT_COLUMNS = ("metric", "value", "normalizer", "seed", "config_hash")


def nme(pred, gt, normalizer: float) -> float:
    """Mean over landmarks of the Euclidean error, divided by ``normalizer``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ValueError(f"landmark sets differ: {pred.shape} vs {gt.shape}")
    if not normalizer > 0:
        raise ValueError("normalizer must be positive")
    return float(np.mean(np.linalg.norm(pred - gt, axis=1)) / normalizer)


def _errors(per_sample):
    e = np.asarray(per_sample, dtype=np.float64).reshape(-1)
    if e.size == 0:
        raise ValueError("no errors given")
    return e


def auc_at(per_sample_nme, threshold: float, bins: int = AUC_BINS) -> float:
    """Area under the cumulative error curve on ``[0, threshold]``, scaled to [0, 1].

    The curve is evaluated at ``bins`` evenly spaced thresholds and integrated
    with the trapezoid rule.
    """
    e = np.sort(_errors(per_sample_nme))
    if not threshold > 0 or bins < 2:
        raise ValueError("need threshold > 0 and bins >= 2")
    xs = np.linspace(0.0, threshold, bins)
    ced = np.searchsorted(e, xs, side="right") / e.size
    return float(np.sum((ced[1:] + ced[:-1]) * 0.5 * np.diff(xs)) / threshold)


def failure_rate(per_sample_nme, threshold: float) -> float:
    """Fraction of samples with error strictly above ``threshold``."""
    e = _errors(per_sample_nme)
    return float(np.mean(e > threshold))


def p_error(detector_fn, image, bbox, n_pairs: int, rng, cfg: EltConfig = EltConfig()) -> float:
    """Mean normalised disagreement of detections under two random affine crops.

    ``detector_fn(crop)`` returns ``(K, 2)`` crop coordinates. Each pair's
    detections are mapped back to the image with the inverse crop transforms;
    the per-pair value is the mean landmark distance over ``sqrt(bbox area)``.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be at least 1")
    eta = bbox_scale(bbox)
    total = 0.0
    for _ in range(n_pairs):
        a, ta, b, tb = elt_transform_pair(image, bbox, rng, cfg)
        total += pair_discrepancy(detector_fn(a), ta, detector_fn(b), tb, eta)
    return float(total / n_pairs)


def pair_discrepancy(la, theta_a, lb, theta_b, eta: float) -> float:
    """Mean distance of two crop-space detections mapped back to the image, over ``eta``."""
    pa = affine_apply(affine_invert(theta_a), la)
    pb = affine_apply(affine_invert(theta_b), lb)
    return float(np.mean(np.linalg.norm(pa - pb, axis=1)) / eta)


def format_report(rows) -> str:
    """CSV with the fixed column set; ``rows`` are dicts keyed by column."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        r = dict(r)
        if isinstance(r.get("value"), float):
            r["value"] = format(r["value"], ".17g")
        w.writerow(r)
    return buf.getvalue()


def parse_report(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and tuple(rows[0].keys()) != REPORT_COLUMNS:
        raise ValueError(f"unexpected report columns {tuple(rows[0].keys())}")
    return rows
