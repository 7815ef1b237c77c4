"""Gradient-weighted class activation maps and their multi-scale fusion."""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .imagery import check_image, check_stack, normalize_unit, resize_array, resize_image

N_CLASSES = 5
DEFAULT_SCALES = (0.5, 0.75, 1.0)


@dataclass(frozen=True)
class NeuronWeights:
    weights: np.ndarray
    class_index: int


def _check_class(class_index):
    if not 0 <= int(class_index) < N_CLASSES:
        raise ValueError(f"class_index must be in 0..{N_CLASSES - 1}, got {class_index}")
    return int(class_index)


def neuron_weights(grads, class_index):
    """Spatial mean of the class-score gradient for every channel."""
    grads = check_stack(grads, "grads")
    k, m, h = grads.shape
    weights = grads.reshape(k, m * h).sum(axis=1) / (m * h)
    return NeuronWeights(weights=weights, class_index=_check_class(class_index))


def cam(acts, w):
    """ReLU of the weighted channel sum; returns a raw (m, h) map."""
    acts = check_stack(acts, "acts")
    weights = np.asarray(w.weights if isinstance(w, NeuronWeights) else w, dtype=np.float64)
    if weights.shape != (acts.shape[0],):
        raise ValueError(f"{weights.shape[0] if weights.ndim else 0} weights for {acts.shape[0]} channels")
    return np.maximum(np.tensordot(weights, acts, axes=1), 0.0)


def multiscale_cam(maps, target_w, target_h):
    """Upsample every raw map to the target size, sum, and rescale to [0, 1]."""
    if len(maps) == 0:
        raise ValueError("multiscale_cam needs at least one map")
    total = np.zeros((target_h, target_w))
    for raw in maps:
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 2:
            raise ValueError(f"raw maps must be 2-D, got shape {raw.shape}")
        total += resize_array(raw, target_w, target_h)
    return normalize_unit(total)


def class_activation_map(model, image, class_index=None, scales=DEFAULT_SCALES):
    """Multi-scale Grad-CAM of ``model`` on ``image``, returned at image size.

    The image is resized to ``scale * model.working_size`` for each scale.
    Without ``class_index`` the model's argmax class at scale 1 is used.
    Returns ``(map, class_index)``.
    """
    from .toyscorer import backprop_class, forward

    image = check_image(image)
    h, w = image.shape[:2]
    if not scales:
        raise ValueError("scales must be non-empty")
    if class_index is None:
        trace = forward(model, resize_image(image, model.working_size, model.working_size))
        class_index = int(np.argmax(trace.logits))
    class_index = _check_class(class_index)
    raw_maps = []
    for scale in scales:
        if scale <= 0:
            raise ValueError(f"scales must be positive, got {scale}")
        side = max(3, int(round(scale * model.working_size)))
        trace = forward(model, resize_image(image, side, side))
        grads, _ = backprop_class(model, trace, class_index)
        raw_maps.append(cam(trace.features, neuron_weights(grads, class_index)))
    return multiscale_cam(raw_maps, w, h), class_index


class GradCAM(TransformerMixin, BaseEstimator):
    """Transformer mapping a batch of RGB images to multi-scale Grad-CAM maps.

    Parameters
    ----------
    model : ToyScorer
        A fitted (or initialized) scorer.
    class_index : int or None
        Fixed class to explain; ``None`` explains each image's argmax class.
    scales : tuple of float
        Input scales relative to the model's working size.
    """

    def __init__(self, model=None, class_index=None, scales=DEFAULT_SCALES):
        self.model = model
        self.class_index = class_index
        self.scales = scales

    def fit(self, X=None, y=None):
        if self.model is None:
            raise ValueError("GradCAM needs a model")
        self.model._check_initialized()
        if self.class_index is not None:
            _check_class(self.class_index)
        self.classes_used_ = []
        return self

    def transform(self, X):
        if not hasattr(self, "classes_used_"):
            self.fit()
        maps, used = [], []
        for image in X:
            m, c = class_activation_map(self.model, image, self.class_index, self.scales)
            maps.append(m)
            used.append(c)
        self.classes_used_ = used
        return maps
