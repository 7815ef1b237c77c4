"""Saliency updating: mask the current salient region out of the input and
re-run Grad-CAM so activation spreads to less discriminative parts."""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .gradcam import DEFAULT_SCALES, class_activation_map
from .imagery import check_graymap, check_image, check_same_shape, normalize_unit, resize_image
from .toyscorer import forward


@dataclass(frozen=True)
class SumConfig:
    omega: float = 50.0
    sigma: float = 0.5
    alpha: float = 1.0
    iterations: int = 1

    def __post_init__(self):
        if not self.omega > 0:
            raise ValueError(f"omega must be positive, got {self.omega}")
        if not 0 < self.sigma < 1:
            raise ValueError(f"sigma must lie in (0, 1), got {self.sigma}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")


@dataclass(frozen=True)
class IterationRecord:
    iteration_index: int
    map: np.ndarray  # this iteration's Grad-CAM map
    accumulated: np.ndarray  # elementwise max of all maps so far
    masked_image: np.ndarray  # the input this iteration was scored on
    class_score: float  # softmax probability of the tracked class on masked_image


def _sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def fuse_mask(original, gray, cfg):
    """Remove the region where ``gray`` exceeds ``cfg.sigma`` from ``original``.

    ``out = I - sigmoid(omega * (M - sigma)) * I`` with one mask factor shared
    by all three channels.
    """
    original = check_image(original, "original")
    gray = check_graymap(gray)
    check_same_shape(original, gray, "image and map")
    factor = _sigmoid(cfg.omega * (gray - cfg.sigma))
    out = original - factor[:, :, None] * original
    return np.clip(out, 0.0, 1.0)


def mask_mining_loss(scores):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise ValueError("mask_mining_loss needs at least one score")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    return float(scores.mean())


def total_loss(l_cls, l_mask, alpha):
    return l_cls + alpha * l_mask


def active_area(gray, threshold=0.5):
    """Fraction of pixels strictly above ``threshold``."""
    return float(np.mean(np.asarray(gray) > threshold))


def update_loop(original, model, cfg, class_index=None, scales=DEFAULT_SCALES):
    """Iterated masking and Grad-CAM.

    Iteration 1 explains ``original``; iteration i >= 2 explains ``original``
    with the running elementwise maximum of all earlier maps masked out.  The
    tracked class is ``class_index`` or, if omitted, the argmax on ``original``.
    Returns the list of :class:`IterationRecord`; the final map is
    ``normalize_unit(records[-1].accumulated)``.
    """
    original = check_image(original, "original")
    records = []
    accumulated = None
    for it in range(1, cfg.iterations + 1):
        current = original if accumulated is None else fuse_mask(original, accumulated, cfg)
        gray, class_index = class_activation_map(model, current, class_index, scales)
        accumulated = gray if accumulated is None else np.maximum(accumulated, gray)
        probs = forward(model, resize_image(current, model.working_size, model.working_size)).probs
        records.append(IterationRecord(it, gray, accumulated, current, float(probs[class_index])))
    return records


def final_map(records):
    return normalize_unit(records[-1].accumulated)


class SaliencyUpdater(TransformerMixin, BaseEstimator):
    """Transformer running :func:`update_loop` on each image of a batch."""

    def __init__(self, model=None, omega=50.0, sigma=0.5, alpha=1.0, iterations=10,
                 class_index=None, scales=DEFAULT_SCALES):
        self.model = model
        self.omega = omega
        self.sigma = sigma
        self.alpha = alpha
        self.iterations = iterations
        self.class_index = class_index
        self.scales = scales

    def fit(self, X=None, y=None):
        if self.model is None:
            raise ValueError("SaliencyUpdater needs a model")
        self.model._check_initialized()
        self.config_ = SumConfig(self.omega, self.sigma, self.alpha, self.iterations)
        return self

    def transform(self, X):
        if not hasattr(self, "config_"):
            self.fit()
        self.records_ = [update_loop(im, self.model, self.config_, self.class_index, self.scales)
                         for im in X]
        return [final_map(r) for r in self.records_]
