"""Dense linear algebra, seeded randomness, finite differences and PCA.

Everything runs in float64.  Random streams come from numpy's PCG64
generator, which is bit-reproducible for a fixed seed and call sequence.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_matrix


def make_rng(seed: int | np.random.Generator | None = None) -> np.random.Generator:
    """Return a PCG64 generator; generators pass through unchanged."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rng(seed: int, *keys: int) -> np.random.Generator:
    """Child stream derived deterministically from ``seed`` and integer keys."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *keys])))


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: a is {a.shape}, b is {b.shape}; inner dimensions differ")
    return a @ b


def masked_row_softmax(scores) -> np.ndarray:
    """Causal softmax over the last two axes.

    Entry ``[..., i, j]`` with ``j > i`` is exactly zero; every row sums to one
    over ``j <= i``.  Leading axes are treated as a batch.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim < 2 or scores.shape[-1] != scores.shape[-2]:
        raise ValueError(f"scores must be square in the last two axes, got {scores.shape}")
    T = scores.shape[-1]
    allowed = np.tri(T, dtype=bool)
    s = np.where(allowed, scores, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def finite_diff_gradient(loss_fn: Callable[[np.ndarray], float], params, step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat parameter vector."""
    if step <= 0:
        raise ValueError("step must be positive")
    theta = np.array(params, dtype=np.float64, copy=True)
    flat = theta.reshape(-1)
    grad = np.empty_like(flat)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        f_plus = loss_fn(theta)
        flat[k] = orig - step
        f_minus = loss_fn(theta)
        flat[k] = orig
        grad[k] = (f_plus - f_minus) / (2.0 * step)
    return grad.reshape(theta.shape)


class PCA(TransformerMixin, BaseEstimator):
    """Principal component analysis on centered (unscaled) samples.

    Components come from the SVD of the centered data matrix.  Signs are fixed
    so the largest-magnitude loading of every component is positive, which
    makes repeated fits on identical data return identical output.

    Attributes
    ----------
    components_ : ndarray (n_components, n_features), orthonormal rows
    explained_variance_ : ndarray (n_components,)
    explained_variance_ratio_ : ndarray (n_components,)
    mean_ : ndarray (n_features,)
    degenerate_ : bool
        True when the samples have zero total variance.
    """

    def __init__(self, n_components: int | None = None):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = as_matrix(X, "X")
        n, m = X.shape
        if n < 2:
            raise ValueError("PCA needs at least two samples")
        k = min(n - 1, m) if self.n_components is None else int(self.n_components)
        if not 1 <= k <= min(n - 1, m):
            raise ValueError(f"n_components={k} must lie in [1, {min(n - 1, m)}]")
        self.mean_ = X.mean(axis=0)
        Xc = X - self.mean_
        total = float(np.sum(Xc * Xc)) / (n - 1)
        self.degenerate_ = total <= 0.0
        if self.degenerate_:
            self.components_ = np.eye(m)[:k]
            self.explained_variance_ = np.zeros(k)
            self.explained_variance_ratio_ = np.zeros(k)
        else:
            _, s, vt = np.linalg.svd(Xc, full_matrices=False)
            vt = vt[:k]
            pivot = np.argmax(np.abs(vt), axis=1)
            vt = vt * np.sign(vt[np.arange(k), pivot])[:, None]
            var = s[:k] ** 2 / (n - 1)
            self.components_ = vt
            self.explained_variance_ = var
            self.explained_variance_ratio_ = np.clip(var / total, 0.0, 1.0)
        self.n_components_ = k
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = as_matrix(X, "X")
        return (X - self.mean_) @ self.components_.T

    def inverse_transform(self, Z):
        check_is_fitted(self, "components_")
        return np.asarray(Z, dtype=np.float64) @ self.components_ + self.mean_


def pca(samples, k: int | None = None) -> PCA:
    """Fit a :class:`PCA` and attach ``projections_`` for the fitted samples."""
    model = PCA(n_components=k).fit(samples)
    model.projections_ = model.transform(samples)
    return model
