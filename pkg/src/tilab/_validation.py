"""Input checks shared by the estimators and analysis functions."""
from __future__ import annotations

import numpy as np


def as_matrix(a, name: str = "array") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains NaN or Inf")
    return a


def check_tokens(X, token_dim: int | None = None, max_len: int | None = None) -> np.ndarray:
    """Validate a token batch of shape (n_sequences, T, token_dim).

    A single 2-D sequence is promoted to a batch of one.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"tokens must have shape (n, T, dim), got {X.shape}")
    if X.shape[1] < 1:
        raise ValueError("token sequences must be non-empty")
    if token_dim is not None and X.shape[2] != token_dim:
        raise ValueError(f"token dim {X.shape[2]} does not match model dim {token_dim}")
    if max_len is not None and X.shape[1] > max_len:
        raise ValueError(f"sequence length {X.shape[1]} exceeds positional capacity {max_len}")
    if not np.all(np.isfinite(X)):
        raise ValueError("tokens contain NaN or Inf")
    return X


def check_targets(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != n:
        raise ValueError(f"got {y.shape[0]} targets for {n} sequences")
    if n == 0:
        raise ValueError("empty batch")
    return y


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or int(value) != value or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)
