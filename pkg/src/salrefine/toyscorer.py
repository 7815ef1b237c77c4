"""A small differentiable 5-way subitizing classifier with hand-written backprop.

Architecture: valid 3x3 convolution (stride 1) -> ReLU -> global average
pool -> linear head -> softmax.  Parameters are float64 so gradients can be
checked against central differences.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .gradcam import N_CLASSES, _check_class, cam, neuron_weights
from .imagery import atomic_write_bytes, check_image, decode_tensor, encode_tensor, resize_image

KERNEL = 3
PARAM_NAMES = ("conv_kernels", "conv_bias", "head_weights", "head_bias")
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ForwardTrace:
    patches: np.ndarray  # (m, h, 3, 3, 3) sliding windows of the input
    preact: np.ndarray  # (K, m, h) conv output before ReLU
    features: np.ndarray  # (K, m, h) after ReLU
    pooled: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


@dataclass
class Batch:
    images: list
    labels: np.ndarray
    masked_images: list = None


class StepLoss(NamedTuple):
    l_cls: float
    l_mask: float
    total: float


def softmax(logits):
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def forward(model, image):
    """Run the scorer on an (H, W, 3) image with H, W >= 3."""
    model._check_initialized()
    image = check_image(image)
    if image.shape[0] < KERNEL or image.shape[1] < KERNEL:
        raise ValueError(f"input must be at least {KERNEL}x{KERNEL}, got {image.shape[:2]}")
    # (m, h, c, dy, dx)
    patches = sliding_window_view(image, (KERNEL, KERNEL), axis=(0, 1))
    preact = np.einsum("ijcyx,kyxc->kij", patches, model.conv_kernels_, optimize=True)
    preact += model.conv_bias_[:, None, None]
    features = np.maximum(preact, 0.0)
    pooled = features.mean(axis=(1, 2))
    logits = model.head_weights_ @ pooled + model.head_bias_
    return ForwardTrace(patches, preact, features, pooled, logits, softmax(logits))


def head_logits(model, features):
    """Logits from a feature stack (pool + linear head only)."""
    return model.head_weights_ @ features.mean(axis=(1, 2)) + model.head_bias_


def backward(model, trace, dlogits):
    """Backpropagate a logit cotangent; return (dfeatures, parameter grads)."""
    dlogits = np.asarray(dlogits, dtype=np.float64)
    k, m, h = trace.features.shape
    dpooled = model.head_weights_.T @ dlogits
    dfeatures = np.broadcast_to((dpooled / (m * h))[:, None, None], (k, m, h)).copy()
    dpre = dfeatures * (trace.preact > 0)
    grads = {
        "conv_kernels": np.einsum("kij,ijcyx->kyxc", dpre, trace.patches, optimize=True),
        "conv_bias": dpre.sum(axis=(1, 2)),
        "head_weights": np.outer(dlogits, trace.pooled),
        "head_bias": dlogits.copy(),
    }
    return dfeatures, grads


def backprop_class(model, trace, class_index):
    """Gradient of the pre-softmax logit of ``class_index``.

    Returns the gradient with respect to the post-ReLU feature maps (same
    shape as ``trace.features``) and a dict of parameter gradients.
    """
    c = _check_class(class_index)
    onehot = np.zeros(N_CLASSES)
    onehot[c] = 1.0
    return backward(model, trace, onehot)


def cross_entropy_loss(probs, labels):
    """Mean of -log(p[label]) over the batch, with p floored at 1e-12."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    if probs.shape[0] != labels.shape[0]:
        raise ValueError("probs and labels differ in batch size")
    if np.any((labels < 0) | (labels >= probs.shape[1])):
        raise ValueError("labels out of range")
    picked = probs[np.arange(labels.shape[0]), labels]
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


def _batch_gradients(model, batch, alpha):
    n = len(batch.images)
    grads = {name: np.zeros_like(getattr(model, name + "_")) for name in PARAM_NAMES}
    l_cls = l_mask = 0.0
    masked = batch.masked_images
    for idx in range(n):
        label = int(batch.labels[idx])
        trace = forward(model, batch.images[idx])
        l_cls -= np.log(max(trace.probs[label], PROB_FLOOR))
        dlogits = trace.probs.copy()
        dlogits[label] -= 1.0
        _, g = backward(model, trace, dlogits)
        for name in PARAM_NAMES:
            grads[name] += g[name]
        if masked is not None and alpha != 0:
            # bounded score: softmax probability of the true class on the masked input
            mtrace = forward(model, masked[idx])
            p = mtrace.probs
            l_mask += p[label]
            dl = -p[label] * p
            dl[label] += p[label]
            _, g = backward(model, mtrace, alpha * dl)
            for name in PARAM_NAMES:
                grads[name] += g[name]
    for name in PARAM_NAMES:
        grads[name] /= n
    l_cls /= n
    l_mask = l_mask / n if masked is not None else 0.0
    return grads, l_cls, l_mask


def train_step(model, batch, learning_rate, momentum=0.9, weight_decay=5e-4, alpha=1.0, frozen=()):
    """One SGD step with momentum and L2 weight decay.

    The loss is cross-entropy, plus ``alpha`` times the mean true-class
    probability on ``batch.masked_images`` when those are supplied.  An empty
    batch contributes no data gradient (decay only).  Returns a new model and
    a :class:`StepLoss`; the input model is left untouched.  Parameter blocks
    named in ``frozen`` are not updated.
    """
    if learning_rate < 0:
        raise ValueError("learning_rate must be non-negative")
    model._check_initialized()
    if len(batch.images) == 0:
        grads = {name: np.zeros_like(getattr(model, name + "_")) for name in PARAM_NAMES}
        l_cls = l_mask = 0.0
    else:
        grads, l_cls, l_mask = _batch_gradients(model, batch, alpha)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}; step aborted")
    new = model._copy()
    for name in PARAM_NAMES:
        if name in frozen:
            continue
        param = getattr(model, name + "_")
        step = grads[name] + weight_decay * param
        vel = momentum * model.velocity_[name] + step
        new.velocity_[name] = vel
        setattr(new, name + "_", param - learning_rate * vel)
    total = l_cls + alpha * l_mask
    return new, StepLoss(float(l_cls), float(l_mask), float(total))


def masked_inputs(model, images, labels, omega, sigma):
    """Single-scale Grad-CAM masks of the true class fused into each image."""
    from .imagery import normalize_unit, resize_array
    from .sum import SumConfig, fuse_mask

    cfg = SumConfig(omega=omega, sigma=sigma)
    out = []
    for image, label in zip(images, labels):
        trace = forward(model, image)
        grads, _ = backprop_class(model, trace, label)
        raw = cam(trace.features, neuron_weights(grads, label))
        h, w = image.shape[:2]
        gray = normalize_unit(resize_array(raw, w, h))
        out.append(fuse_mask(image, gray, cfg))
    return out


class ToyScorer(ClassifierMixin, BaseEstimator):
    """Conv -> ReLU -> global average pool -> 5-way linear head.

    Parameters
    ----------
    n_channels : int
        Number of convolution kernels K.
    working_size : int
        Side length images are resized to before scoring.
    learning_rate, momentum, weight_decay : float
        SGD hyper-parameters used by :meth:`fit`.
    n_steps : int
        Number of minibatch steps taken by :meth:`fit`.
    batch_size : int
    alpha : float
        Weight of the mask-mining term; 0 disables it.
    omega, sigma : float
        Sigmoid sharpness and threshold used to build masked training inputs.
    random_state : int
        Seed for initialization and minibatch sampling.
    """

    def __init__(self, n_channels=8, working_size=64, learning_rate=0.05, momentum=0.9,
                 weight_decay=5e-4, n_steps=500, batch_size=8, alpha=1.0, omega=50.0,
                 sigma=0.5, random_state=42):
        self.n_channels = n_channels
        self.working_size = working_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.alpha = alpha
        self.omega = omega
        self.sigma = sigma
        self.random_state = random_state

    # -- parameters -----------------------------------------------------

    def initialize(self):
        """Draw parameters uniformly from [-0.1, 0.1] using ``random_state``."""
        if self.n_channels < 1:
            raise ValueError("n_channels must be >= 1")
        rng = np.random.default_rng(self.random_state)
        k = self.n_channels
        self.conv_kernels_ = rng.uniform(-0.1, 0.1, size=(k, KERNEL, KERNEL, 3))
        self.conv_bias_ = rng.uniform(-0.1, 0.1, size=k)
        self.head_weights_ = rng.uniform(-0.1, 0.1, size=(N_CLASSES, k))
        self.head_bias_ = rng.uniform(-0.1, 0.1, size=N_CLASSES)
        self.velocity_ = {name: np.zeros_like(getattr(self, name + "_")) for name in PARAM_NAMES}
        self.classes_ = np.arange(N_CLASSES)
        self.loss_curve_ = []
        return self

    def _check_initialized(self):
        if not hasattr(self, "conv_kernels_"):
            raise NotFittedError("ToyScorer has no parameters; call initialize() or fit() first")

    def _copy(self):
        new = type(self)(**self.get_params())
        for name in PARAM_NAMES:
            setattr(new, name + "_", getattr(self, name + "_").copy())
        new.velocity_ = {k: v.copy() for k, v in self.velocity_.items()}
        new.classes_ = self.classes_
        new.loss_curve_ = list(getattr(self, "loss_curve_", []))
        return new

    def get_parameters(self):
        self._check_initialized()
        return {name: getattr(self, name + "_") for name in PARAM_NAMES}

    def set_parameters(self, params):
        for name in PARAM_NAMES:
            setattr(self, name + "_", np.asarray(params[name], dtype=np.float64).copy())
        self.n_channels = self.conv_kernels_.shape[0]
        self.velocity_ = {name: np.zeros_like(getattr(self, name + "_")) for name in PARAM_NAMES}
        self.classes_ = np.arange(N_CLASSES)
        self.loss_curve_ = []
        return self

    # -- sklearn surface ------------------------------------------------

    def _prepare(self, image):
        image = check_image(image)
        return resize_image(image, self.working_size, self.working_size)

    def fit(self, X, y):
        """Train from scratch with minibatch SGD on images ``X`` and counts ``y``."""
        self.initialize()
        images = [self._prepare(im) for im in X]
        labels = np.asarray(y, dtype=int)
        if len(images) == 0 or len(images) != labels.shape[0]:
            raise ValueError("X and y must be non-empty and the same length")
        if np.any((labels < 0) | (labels >= N_CLASSES)):
            raise ValueError(f"labels must be in 0..{N_CLASSES - 1}")
        rng = np.random.default_rng(self.random_state)
        model = self
        for _ in range(self.n_steps):
            idx = rng.choice(len(images), size=min(self.batch_size, len(images)), replace=False)
            batch = Batch([images[i] for i in idx], labels[idx])
            if self.alpha:
                batch.masked_images = masked_inputs(model, batch.images, batch.labels,
                                                    self.omega, self.sigma)
            model, loss = train_step(model, batch, self.learning_rate, self.momentum,
                                     self.weight_decay, self.alpha)
            model.loss_curve_.append(loss)
        for name in PARAM_NAMES:
            setattr(self, name + "_", getattr(model, name + "_"))
        self.velocity_ = model.velocity_
        self.loss_curve_ = model.loss_curve_
        return self

    def predict_proba(self, X):
        self._check_initialized()
        return np.array([forward(self, self._prepare(im)).probs for im in X])

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)


# --------------------------------------------------------------------------
# checkpoints: concatenated SALT records + "name shape offset" manifest
# --------------------------------------------------------------------------


def _manifest_path(path):
    return Path(str(path) + ".manifest")


def save_checkpoint(model, path):
    model._check_initialized()
    path = Path(path)
    blob = bytearray()
    lines = [f"# working_size {model.working_size}"]
    for name in PARAM_NAMES:
        arr = getattr(model, name + "_")
        shape = "x".join(str(s) for s in arr.shape)
        lines.append(f"{name} {shape} {len(blob)}")
        blob += encode_tensor(arr.reshape(1, 1, -1) if arr.ndim < 3 else arr.reshape(arr.shape[0], arr.shape[1], -1))
    atomic_write_bytes(path, bytes(blob))
    atomic_write_bytes(_manifest_path(path), ("\n".join(lines) + "\n").encode("ascii"))


def load_checkpoint(path):
    path = Path(path)
    manifest = _manifest_path(path)
    for p in (path, manifest):
        if not p.is_file():
            raise FileNotFoundError(f"no such checkpoint file: {p}")
    blob = path.read_bytes()
    params, working_size = {}, 64
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition(" ")
            if key == "working_size":
                working_size = int(value)
            continue
        name, shape, offset = line.split()
        dims = tuple(int(s) for s in shape.split("x"))
        arr, _ = decode_tensor(blob, int(offset))
        params[name] = arr.reshape(dims)
    missing = set(PARAM_NAMES) - set(params)
    if missing:
        raise ValueError(f"checkpoint lacks {sorted(missing)}")
    model = ToyScorer(n_channels=params["conv_kernels"].shape[0], working_size=working_size)
    return model.set_parameters(params)
