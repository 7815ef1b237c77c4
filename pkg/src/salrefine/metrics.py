"""Saliency evaluation: PR curve, max F-beta, MAE, S-measure, batch reports."""

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imagery import check_graymap, check_mask, check_same_shape, load_graymap, load_mask

logger = logging.getLogger(__name__)

N_THRESHOLDS = 256
BETA2 = 0.3
_EPS = np.finfo(np.float64).eps


@dataclass(frozen=True)
class PrCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    @property
    def points(self):
        return list(zip(self.thresholds.tolist(), self.precision.tolist(), self.recall.tolist()))


def _pair(gray, gt):
    gray = check_graymap(gray)
    gt = check_mask(gt)
    check_same_shape(gray, gt, "map and ground truth")
    return gray, gt


def pr_curve(gray, gt):
    """Precision/recall at thresholds k/255 (k = 0..255), predicting ``map >= t``.

    Precision is 1 where nothing is predicted positive.
    """
    gray, gt = _pair(gray, gt)
    n_pos = int(gt.sum())
    if n_pos == 0:
        raise ValueError("ground truth has no positive pixels")
    thresholds = np.arange(N_THRESHOLDS) / 255.0
    pos_vals = np.sort(gray[gt])
    neg_vals = np.sort(gray[~gt])
    tp = pos_vals.size - np.searchsorted(pos_vals, thresholds, side="left")
    fp = neg_vals.size - np.searchsorted(neg_vals, thresholds, side="left")
    predicted = tp + fp
    precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 1.0)
    recall = tp / n_pos
    return PrCurve(thresholds, precision, recall)


def fbeta_curve(curve, beta2=BETA2):
    p, r = curve.precision, curve.recall
    denom = beta2 * p + r
    return np.where(denom > 0, (1 + beta2) * p * r / np.where(denom > 0, denom, 1.0), 0.0)


def max_fbeta(curve, beta2=BETA2):
    return float(fbeta_curve(curve, beta2).max())


def mae(gray, gt):
    gray, gt = _pair(gray, gt)
    return float(np.abs(gray - gt).mean())


# --------------------------------------------------------------------------
# S-measure (structure measure, Fan et al. 2017), alpha = 0.5.
# Constants follow the reference MATLAB code: eps = 2.2204e-16, sample std
# (N - 1), centroid rounded half away from zero on 1-based indices.
# --------------------------------------------------------------------------


def _object_score(values):
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma + _EPS)


def _s_object(gray, gt):
    fg = np.where(gt, gray, 0.0)
    bg = np.where(~gt, 1.0 - gray, 0.0)
    u = gt.mean()
    return u * _object_score(fg[gt]) + (1.0 - u) * _object_score(bg[~gt])


def _centroid(gt):
    h, w = gt.shape
    total = gt.sum()
    if total == 0:
        return int(math.floor(w / 2 + 0.5)), int(math.floor(h / 2 + 0.5))
    rows, cols = np.nonzero(gt)
    x = int(math.floor(np.sum(cols + 1) / total + 0.5))
    y = int(math.floor(np.sum(rows + 1) / total + 0.5))
    return x, y


def _ssim(gray, gt):
    n = gray.size
    if n == 0:
        return 0.0
    gt = gt.astype(np.float64)
    x, y = gray.mean(), gt.mean()
    sx = np.sum((gray - x) ** 2) / (n - 1 + _EPS)
    sy = np.sum((gt - y) ** 2) / (n - 1 + _EPS)
    sxy = np.sum((gray - x) * (gt - y)) / (n - 1 + _EPS)
    num = 4.0 * x * y * sxy
    den = (x * x + y * y) * (sx + sy)
    if num != 0:
        return num / (den + _EPS)
    if den == 0:
        return 1.0
    return 0.0


def _s_region(gray, gt):
    h, w = gt.shape
    x, y = _centroid(gt)
    area = h * w
    quads = [
        (slice(0, y), slice(0, x), x * y),
        (slice(0, y), slice(x, w), (w - x) * y),
        (slice(y, h), slice(0, x), x * (h - y)),
        (slice(y, h), slice(x, w), (w - x) * (h - y)),
    ]
    score = 0.0
    for rs, cs, n in quads:
        if n:
            score += n / area * _ssim(gray[rs, cs], gt[rs, cs])
    return score


def s_measure(gray, gt):
    """Structure measure ``(S_o + S_r) / 2`` clamped to [0, 1].

    All-background ground truth scores ``1 - mean(map)`` and all-foreground
    ground truth scores ``mean(map)``.
    """
    gray, gt = _pair(gray, gt)
    ratio = gt.mean()
    if ratio == 0:
        q = 1.0 - gray.mean()
    elif ratio == 1:
        q = gray.mean()
    else:
        q = 0.5 * _s_object(gray, gt) + 0.5 * _s_region(gray, gt)
    return float(min(max(q, 0.0), 1.0))


# --------------------------------------------------------------------------
# batch evaluation
# --------------------------------------------------------------------------

FIELDS = ("max_fbeta", "mae", "s_measure")


@dataclass
class EvalReport:
    rows: list  # (id, max_fbeta, mae, s_measure)
    skipped: list = field(default_factory=list)

    @property
    def means(self):
        arr = np.array([r[1:] for r in self.rows], dtype=np.float64)
        return dict(zip(FIELDS, (float(v) for v in arr.mean(axis=0))))

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("id",) + FIELDS)
        for row in self.rows:
            writer.writerow((row[0],) + tuple(repr(float(v)) for v in row[1:]))
        m = self.means
        writer.writerow(("MEAN",) + tuple(repr(m[k]) for k in FIELDS))
        return buf.getvalue()

    def to_json(self):
        payload = {
            "rows": [dict(zip(("id",) + FIELDS, r)) for r in self.rows],
            "MEAN": self.means,
            "skipped": self.skipped,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def evaluate_pair(gray, gt):
    return max_fbeta(pr_curve(gray, gt)), mae(gray, gt), s_measure(gray, gt)


def _index(directory):
    return {p.stem: p for p in sorted(Path(directory).iterdir())
            if p.is_file() and p.suffix.lower() in (".png", ".pgm", ".ppm")}


def batch_eval(map_dir, gt_dir, jobs=1):
    """Evaluate every map against the ground truth with the same file stem.

    Files without a partner are skipped and listed in ``report.skipped``.
    """
    maps, gts = _index(map_dir), _index(gt_dir)
    common = sorted(set(maps) & set(gts))
    skipped = sorted(set(maps) ^ set(gts))
    if not common:
        raise ValueError(f"no matching file names between {map_dir} and {gt_dir}")
    for name in skipped:
        logger.warning("no partner for %s; skipped", name)

    def one(name):
        return (name,) + evaluate_pair(load_graymap(maps[name]), load_mask(gts[name]))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(one, common))
    else:
        rows = [one(name) for name in common]
    return EvalReport(rows=rows, skipped=skipped)
