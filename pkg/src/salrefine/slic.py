"""SLIC superpixels, per-superpixel features, and the 4-adjacency graph."""

import math
from dataclasses import dataclass

import numpy as np
from skimage.color import rgb2lab
from skimage.measure import label as connected_components
from sklearn.base import BaseEstimator, TransformerMixin

from .imagery import check_image, check_same_shape


@dataclass(frozen=True)
class SuperpixelLabeling:
    labels: np.ndarray  # (H, W) int, values in [0, count)
    count: int

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]

    def sizes(self):
        return np.bincount(self.labels.ravel(), minlength=self.count)


@dataclass(frozen=True)
class SuperpixelFeatures:
    features: np.ndarray  # (count, 5): L/100, a/128, b/128, x/W, y/H
    sizes: np.ndarray

    @property
    def count(self):
        return self.features.shape[0]


def _gradient_magnitude(lab):
    padded = np.pad(lab, ((1, 1), (1, 1), (0, 0)), mode="edge")
    dy = padded[2:, 1:-1] - padded[:-2, 1:-1]
    dx = padded[1:-1, 2:] - padded[1:-1, :-2]
    return (dy ** 2).sum(axis=2) + (dx ** 2).sum(axis=2)


def _initial_centers(lab, target_count):
    h, w = lab.shape[:2]
    step = math.sqrt(h * w / target_count)
    ny = max(1, min(h, int(round(h / step))))
    nx = max(1, min(w, int(round(target_count / ny))))
    grad = _gradient_magnitude(lab)
    centers = []
    for r in range(ny):
        for c in range(nx):
            cy = (r + 0.5) * h / ny - 0.5
            cx = (c + 0.5) * w / nx - 0.5
            py, px = int(round(cy)), int(round(cx))
            best, best_pos = grad[py, px], None
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    y, x = py + dy, px + dx
                    if 0 <= y < h and 0 <= x < w and grad[y, x] < best:
                        best, best_pos = grad[y, x], (y, x)
            if best_pos is not None:
                cy, cx = float(best_pos[0]), float(best_pos[1])
            centers.append((cy, cx, *lab[py if best_pos is None else best_pos[0],
                                          px if best_pos is None else best_pos[1]]))
    return np.array(centers, dtype=np.float64), step


def _assign(lab, centers, step, compactness):
    h, w = lab.shape[:2]
    dist = np.full((h, w), np.inf)
    labels = np.full((h, w), -1, dtype=np.int64)
    spatial_weight = compactness / step
    for k, (cy, cx, l, a, b) in enumerate(centers):
        y0, y1 = max(0, math.ceil(cy - step)), min(h, math.floor(cy + step) + 1)
        x0, x1 = max(0, math.ceil(cx - step)), min(w, math.floor(cx + step) + 1)
        if y0 >= y1 or x0 >= x1:
            continue
        win = lab[y0:y1, x0:x1]
        d_lab = np.sqrt((win[..., 0] - l) ** 2 + (win[..., 1] - a) ** 2 + (win[..., 2] - b) ** 2)
        yy = np.arange(y0, y1)[:, None] - cy
        xx = np.arange(x0, x1)[None, :] - cx
        d = d_lab + spatial_weight * np.sqrt(yy ** 2 + xx ** 2)
        sub = dist[y0:y1, x0:x1]
        better = d < sub  # strict: earlier (lower-index) centers win ties
        sub[better] = d[better]
        labels[y0:y1, x0:x1][better] = k
    missing = labels < 0
    if missing.any():
        ys, xs = np.nonzero(missing)
        px = lab[ys, xs]
        d_lab = np.sqrt(((px[:, None, :] - centers[None, :, 2:]) ** 2).sum(axis=2))
        d_xy = np.sqrt((ys[:, None] - centers[None, :, 0]) ** 2 + (xs[:, None] - centers[None, :, 1]) ** 2)
        labels[ys, xs] = np.argmin(d_lab + spatial_weight * d_xy, axis=1)
    return labels


def _update_centers(lab, labels, centers):
    h, w = labels.shape
    n = centers.shape[0]
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=n).astype(np.float64)
    ys, xs = np.mgrid[0:h, 0:w]
    new = centers.copy()
    nonempty = counts > 0
    for col, values in enumerate((ys, xs, lab[..., 0], lab[..., 1], lab[..., 2])):
        sums = np.bincount(flat, weights=values.ravel(), minlength=n)
        new[nonempty, col] = sums[nonempty] / counts[nonempty]
    return new


def _component_pairs(comp):
    a = np.concatenate([comp[:, :-1].ravel(), comp[:-1, :].ravel()])
    b = np.concatenate([comp[:, 1:].ravel(), comp[1:, :].ravel()])
    diff = a != b
    lo = np.minimum(a[diff], b[diff]).astype(np.int64)
    hi = np.maximum(a[diff], b[diff]).astype(np.int64)
    n = int(comp.max()) + 1
    keys = np.unique(lo * n + hi)
    return np.stack([keys // n, keys % n], axis=1)


def enforce_connectivity(labels):
    """Keep the largest 4-connected piece of every cluster; merge the rest.

    Orphan pieces join the largest superpixel they touch, in rounds (sizes
    are frozen within a round, ties go to the lower index).  Returns compact
    labels 0..count-1 with cluster order preserved, and the count.
    """
    comp = connected_components(labels + 1, connectivity=1, background=0) - 1
    n_comp = int(comp.max()) + 1
    comp_cluster = np.zeros(n_comp, dtype=np.int64)
    comp_cluster[comp.ravel()] = labels.ravel()
    comp_size = np.bincount(comp.ravel(), minlength=n_comp)

    # largest piece per cluster; ties go to the first piece in scan order
    order = np.lexsort((np.arange(n_comp), -comp_size, comp_cluster))
    first = np.ones(n_comp, dtype=bool)
    first[1:] = comp_cluster[order][1:] != comp_cluster[order][:-1]
    kept = order[first]
    owner = np.full(n_comp, -1, dtype=np.int64)  # piece -> kept piece it joins
    owner[kept] = kept
    size = np.zeros(n_comp, dtype=np.int64)
    size[kept] = comp_size[kept]

    pairs = _component_pairs(comp)
    edges = np.concatenate([pairs, pairs[:, ::-1]])  # (piece, neighbor), both directions
    while np.any(owner < 0):
        src, nb = edges[:, 0], edges[:, 1]
        live = (owner[src] < 0) & (owner[nb] >= 0)
        if not live.any():
            raise RuntimeError("connectivity pass stalled on isolated fragments")
        src, root = src[live], owner[nb[live]]
        pick = np.lexsort((root, -size[root], src))
        src, root = src[pick], root[pick]
        head = np.ones(src.shape[0], dtype=bool)
        head[1:] = src[1:] != src[:-1]
        src, root = src[head], root[head]
        owner[src] = root
        size += np.bincount(root, weights=comp_size[src], minlength=n_comp).astype(np.int64)

    merged = comp_cluster[owner[comp]]
    _, compact = np.unique(merged, return_inverse=True)
    compact = compact.reshape(labels.shape)
    return compact, int(compact.max()) + 1


def slic_segment(image, target_count=200, compactness=10.0, max_iters=10):
    """SLIC superpixels in CIELAB with a post-pass enforcing 4-connectivity.

    Distance is ``d_lab + (compactness / S) * d_xy`` with
    ``S = sqrt(H * W / target_count)``, searched within 2S x 2S windows.
    """
    image = check_image(image)
    h, w = image.shape[:2]
    if not 1 <= target_count <= h * w:
        raise ValueError(f"target_count must lie in [1, {h * w}], got {target_count}")
    if compactness < 0 or max_iters < 1:
        raise ValueError("compactness must be >= 0 and max_iters >= 1")
    lab = rgb2lab(image)
    centers, step = _initial_centers(lab, target_count)
    labels = None
    for _ in range(max_iters):
        new_labels = _assign(lab, centers, step, compactness)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        centers = _update_centers(lab, labels, centers)
    labels, count = enforce_connectivity(labels)
    return SuperpixelLabeling(labels=labels, count=count)


def _check_labeling(labeling):
    labels = labeling.labels
    sizes = np.bincount(labels.ravel(), minlength=labeling.count)
    if labels.min() < 0 or sizes.shape[0] != labeling.count or np.any(sizes == 0):
        raise ValueError("labeling must use every label in [0, count) at least once")
    return sizes


def superpixel_features(image, labeling):
    """Mean scaled CIELAB color and normalized centroid per superpixel."""
    image = check_image(image)
    check_same_shape(image, labeling.labels, "image and labeling")
    sizes = _check_labeling(labeling)
    h, w = labeling.labels.shape
    flat = labeling.labels.ravel()
    lab = rgb2lab(image)
    ys, xs = np.mgrid[0:h, 0:w]
    columns = (lab[..., 0] / 100.0, lab[..., 1] / 128.0, lab[..., 2] / 128.0, xs / w, ys / h)
    feats = np.stack([np.bincount(flat, weights=c.ravel(), minlength=labeling.count) / sizes
                      for c in columns], axis=1)
    return SuperpixelFeatures(features=feats, sizes=sizes)


def adjacency_pairs(labeling):
    """Unordered pairs (i, j), i < j, of 4-adjacent superpixels."""
    return {(int(p), int(q)) for p, q in _component_pairs(labeling.labels)}


class SlicSegmenter(TransformerMixin, BaseEstimator):
    """Transformer mapping RGB images to :class:`SuperpixelLabeling` objects."""

    def __init__(self, n_segments=200, compactness=10.0, max_iter=10):
        self.n_segments = n_segments
        self.compactness = compactness
        self.max_iter = max_iter

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return [slic_segment(im, self.n_segments, self.compactness, self.max_iter) for im in X]
