"""Superpixel-graph refinement of coarse saliency maps.

Superpixel scores are modelled as ``g = K @ alpha`` with a Gaussian kernel
gram matrix ``K`` over superpixel features.  ``alpha`` minimizes

    (1/l) ||y - J K alpha||^2 + theta1 alpha^T K alpha
        + theta2 / N^2 * alpha^T K Dn L Dn K alpha

where ``J`` selects the ``l`` seeded superpixels, ``L = D - A`` is the graph
Laplacian of the kernel-weighted 4-adjacency graph and ``Dn = D^(-1/2)``.
Setting the gradient to zero and factoring out ``K`` gives the linear system

    (J K + theta1 l I + theta2 l / N^2 * Dn L Dn K) alpha = y

which :func:`solve_alpha` solves directly.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .imagery import check_graymap, check_image, check_same_shape, normalize_unit
from .slic import adjacency_pairs, slic_segment, superpixel_features

THETA1 = 1.0
THETA2 = 1e-6


class DegenerateSeedWarning(UserWarning):
    """No superpixel passed either seed threshold; fell back to extremes."""


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class RefineSystem:
    gram: np.ndarray  # K, (N, N)
    adj: np.ndarray  # A, (N, N)
    degree: np.ndarray  # diagonal of D, (N,)
    laplacian: np.ndarray  # L = D - A
    seeded: np.ndarray  # diagonal of J, bool (N,)
    y: np.ndarray  # targets, zero where unseeded
    theta1: float = THETA1
    theta2: float = THETA2
    fallback: bool = False

    @property
    def count(self):
        return self.gram.shape[0]

    @property
    def n_seeds(self):
        return int(self.seeded.sum())


@dataclass(frozen=True)
class RegressionSolution:
    coefficients: np.ndarray  # alpha*
    scores: np.ndarray  # K @ alpha*, unnormalized

    @property
    def count(self):
        return self.coefficients.shape[0]


def gaussian_gram(X, Y=None):
    """``exp(-||x - y||^2 / 2)`` for all row pairs."""
    X = np.asarray(X, dtype=np.float64)
    if Y is None:
        sq = cdist(X, X, "sqeuclidean")
        sq = 0.5 * (sq + sq.T)
        np.fill_diagonal(sq, 0.0)
    else:
        sq = cdist(X, np.asarray(Y, dtype=np.float64), "sqeuclidean")
    return np.exp(-0.5 * sq)


def _adjacency_matrix(pairs, n):
    mask = np.zeros((n, n), dtype=bool)
    if isinstance(pairs, np.ndarray) and pairs.ndim == 2 and pairs.shape == (n, n):
        mask = pairs.astype(bool)
        mask = mask | mask.T
    else:
        for i, j in pairs:
            if i == j or not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"invalid adjacency pair ({i}, {j})")
            mask[i, j] = mask[j, i] = True
    np.fill_diagonal(mask, False)
    return mask


def assemble_system(features, pairs, seeded, y, theta1=THETA1, theta2=THETA2, fallback=False):
    """Build the kernel, adjacency, degree and Laplacian matrices."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    seeded = np.asarray(seeded, dtype=bool)
    y = np.where(seeded, np.asarray(y, dtype=np.float64), 0.0)
    if seeded.shape != (n,) or y.shape != (n,):
        raise ValueError("seeded and y must have one entry per superpixel")
    if not seeded.any():
        raise ValueError("at least one seeded superpixel is required")
    gram = gaussian_gram(features)
    adj = np.where(_adjacency_matrix(pairs, n), gram, 0.0)
    degree = adj.sum(axis=1)
    laplacian = np.diag(degree) - adj
    return RefineSystem(gram, adj, degree, laplacian, seeded, y, theta1, theta2, fallback)


def superpixel_means(values, labeling):
    flat = labeling.labels.ravel()
    sums = np.bincount(flat, weights=np.asarray(values, dtype=np.float64).ravel(),
                       minlength=labeling.count)
    return sums / np.bincount(flat, minlength=labeling.count)


def build_system(feats, pairs, coarse, labeling, seed_hi=0.7, seed_lo=0.2,
                 theta1=THETA1, theta2=THETA2):
    """Seed superpixels from a coarse map and assemble the regression system.

    Superpixels whose mean coarse saliency is >= ``seed_hi`` are seeded with
    target 1, those <= ``seed_lo`` with target 0.  If nothing qualifies, the
    top-1 and bottom-1 superpixels are seeded instead and a
    :class:`DegenerateSeedWarning` is issued.
    """
    coarse = check_graymap(coarse, "coarse")
    check_same_shape(coarse, labeling.labels, "coarse map and labeling")
    if feats.count != labeling.count:
        raise ValueError(f"{feats.count} feature rows for {labeling.count} superpixels")
    if not seed_lo < seed_hi:
        raise ValueError("seed_lo must be below seed_hi")
    s = superpixel_means(coarse, labeling)
    hi = s >= seed_hi
    lo = s <= seed_lo
    fallback = False
    if not (hi.any() or lo.any()):
        warnings.warn("coarse map has no confident region; seeding the extreme superpixels",
                      DegenerateSeedWarning, stacklevel=2)
        order = np.argsort(s, kind="stable")
        hi = np.zeros_like(hi)
        hi[order[-1]] = True
        if order.shape[0] > 1:
            lo[order[0]] = True
        fallback = True
    y = hi.astype(np.float64)
    return assemble_system(feats.features, pairs, hi | lo, y, theta1, theta2, fallback)


def _inv_sqrt_degree(degree):
    out = np.zeros_like(degree)
    pos = degree > 0
    out[pos] = 1.0 / np.sqrt(degree[pos])
    return out


def normalized_laplacian(sys):
    dn = _inv_sqrt_degree(sys.degree)
    return dn[:, None] * sys.laplacian * dn[None, :]


def system_matrix(sys):
    n, l = sys.count, sys.n_seeds
    J = sys.seeded.astype(np.float64)
    return (J[:, None] * sys.gram + sys.theta1 * l * np.eye(n)
            + (sys.theta2 * l / n ** 2) * normalized_laplacian(sys) @ sys.gram)


def objective(sys, alpha):
    """Matrix-form regression objective at ``alpha``."""
    g = sys.gram @ alpha
    resid = sys.y - np.where(sys.seeded, g, 0.0)
    return (resid @ resid / sys.n_seeds + sys.theta1 * alpha @ g
            + sys.theta2 / sys.count ** 2 * g @ normalized_laplacian(sys) @ g)


def objective_gradient(sys, alpha):
    g = sys.gram @ alpha
    J = sys.seeded.astype(np.float64)
    resid = sys.y - J * g
    inner = (-J * resid / sys.n_seeds + sys.theta1 * alpha
             + sys.theta2 / sys.count ** 2 * normalized_laplacian(sys) @ g)
    return 2.0 * sys.gram @ inner


def solve_alpha(sys):
    """Closed-form coefficients via LU with partial pivoting."""
    M = system_matrix(sys)
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond * np.finfo(np.float64).eps >= 1.0:
        raise SingularSystemError(f"refinement system is singular (condition estimate {cond:.3g})")
    lu, piv = scipy.linalg.lu_factor(M, check_finite=True)
    alpha = scipy.linalg.lu_solve((lu, piv), sys.y)
    return RegressionSolution(coefficients=alpha, scores=sys.gram @ alpha)


def render_refined(sol, labeling):
    """Paint each superpixel with its score and rescale to [0, 1]."""
    if sol.count != labeling.count:
        raise ValueError(f"{sol.count} scores for {labeling.count} superpixels")
    return normalize_unit(sol.scores[labeling.labels])


def refine_map(image, coarse, n_segments=200, compactness=10.0, seed_hi=0.7, seed_lo=0.2,
               theta1=THETA1, theta2=THETA2):
    """Segment, seed from ``coarse``, solve, and render the refined map."""
    return SuperpixelRefiner(n_segments, compactness, seed_hi, seed_lo, theta1,
                             theta2).fit(image, coarse).transform(image)


class LaplacianKernelRegressor(RegressorMixin, BaseEstimator):
    """Semi-supervised kernel regression with a normalized Laplacian penalty.

    ``y`` marks unlabeled samples with NaN.  ``adjacency`` is either an
    (N, N) boolean matrix or an iterable of index pairs.
    """

    def __init__(self, theta1=THETA1, theta2=THETA2):
        self.theta1 = theta1
        self.theta2 = theta2

    def fit(self, X, y, adjacency=()):
        X = check_array(X)
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (X.shape[0],):
            raise ValueError("y must have one entry per row of X")
        seeded = ~np.isnan(y)
        self.system_ = assemble_system(X, adjacency, seeded, np.nan_to_num(y),
                                       self.theta1, self.theta2)
        sol = solve_alpha(self.system_)
        self.dual_coef_ = sol.coefficients
        self.X_fit_ = X
        return self

    def predict(self, X):
        check_is_fitted(self, "dual_coef_")
        return gaussian_gram(check_array(X), self.X_fit_) @ self.dual_coef_


class SuperpixelRefiner(TransformerMixin, BaseEstimator):
    """Refine a coarse saliency map along superpixel boundaries.

    ``fit(image, coarse)`` segments the image and solves the regression;
    ``transform(image)`` renders the refined map.
    """

    def __init__(self, n_segments=200, compactness=10.0, seed_hi=0.7, seed_lo=0.2,
                 theta1=THETA1, theta2=THETA2):
        self.n_segments = n_segments
        self.compactness = compactness
        self.seed_hi = seed_hi
        self.seed_lo = seed_lo
        self.theta1 = theta1
        self.theta2 = theta2

    def fit(self, X, y):
        image = check_image(X)
        coarse = check_graymap(y, "coarse")
        check_same_shape(image, coarse, "image and coarse map")
        self.labeling_ = slic_segment(image, self.n_segments, self.compactness)
        self.features_ = superpixel_features(image, self.labeling_)
        self.pairs_ = adjacency_pairs(self.labeling_)
        self.system_ = build_system(self.features_, self.pairs_, coarse, self.labeling_,
                                    self.seed_hi, self.seed_lo, self.theta1, self.theta2)
        self.solution_ = solve_alpha(self.system_)
        return self

    def transform(self, X):
        check_is_fitted(self, "solution_")
        return render_refined(self.solution_, self.labeling_)
