"""scikit-learn style wrapper around the attention-only transformer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_positive_int, check_targets, check_tokens
from .model import ArchConfig, ModelParams, batched_forward, classify, final_residual, init_params, loss_and_grad
from .numerics import make_rng
from .optim import AdamState, adam_step


class AttentionOnlyTransformer(TransformerMixin, RegressorMixin, BaseEstimator):
    """Causal attention-only transformer regressing a scalar from token sequences.

    ``X`` is a float array of shape (n_sequences, T, token_dim); the target is
    read off the last token.  ``fit`` runs ``max_iter`` Adam steps on random
    minibatches of ``X``; ``partial_fit`` takes exactly one step on the batch
    it is given, which is how the streaming task regimes drive training.
    ``transform`` returns the final-layer residual of the last token.
    """

    def __init__(self, n_layers=2, n_heads=8, head_dim=None, scale_attention=False,
                 learning_rate=1e-3, weight_decay=1e-7, beta1=0.9, beta2=0.999, eps=1e-8,
                 batch_size=128, max_iter=1000, random_state=None):
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.scale_attention = scale_attention
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.random_state = random_state

    def arch_config(self, token_dim: int) -> ArchConfig:
        return ArchConfig(token_dim=token_dim, n_layers=self.n_layers, n_heads=self.n_heads,
                          head_dim=self.head_dim, scale_attention=self.scale_attention)

    @property
    def attn_scale(self) -> float:
        return self.arch_.attn_scale

    def initialize(self, token_dim: int, rng=None) -> "AttentionOnlyTransformer":
        self.arch_ = self.arch_config(token_dim)
        self.params_ = init_params(self.arch_, make_rng(self.random_state) if rng is None else rng)
        self.optimizer_ = AdamState.zeros_like(self.params_)
        self.loss_curve_ = []
        self.n_iter_ = 0
        return self

    @classmethod
    def from_params(cls, params: ModelParams, arch: ArchConfig, **kwargs) -> "AttentionOnlyTransformer":
        kw = dict(n_layers=arch.n_layers, n_heads=arch.n_heads, head_dim=arch.head_dim,
                  scale_attention=arch.scale_attention)
        est = cls(**{**kw, **kwargs})
        est.arch_ = arch
        est.params_ = params
        est.optimizer_ = AdamState.zeros_like(params)
        est.loss_curve_ = []
        est.n_iter_ = 0
        return est

    def _step(self, X: np.ndarray, y: np.ndarray) -> float:
        # overflow is caught below as a non-finite loss
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = loss_and_grad(self.params_, X, y, scale=self.attn_scale)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at iteration {self.n_iter_}")
        self.params_, self.optimizer_ = adam_step(
            self.optimizer_, self.params_, grads, lr=self.learning_rate,
            beta1=self.beta1, beta2=self.beta2, eps=self.eps, weight_decay=self.weight_decay,
        )
        self.loss_curve_.append(loss)
        self.n_iter_ += 1
        return loss

    def partial_fit(self, X, y):
        X = check_tokens(X)
        y = check_targets(y, X.shape[0])
        if not hasattr(self, "params_"):
            self.initialize(X.shape[2])
        X = check_tokens(X, self.arch_.token_dim)
        self._step(X, y)
        return self

    def fit(self, X, y):
        X = check_tokens(X)
        y = check_targets(y, X.shape[0])
        check_positive_int(self.max_iter, "max_iter")
        rng = make_rng(self.random_state)
        self.initialize(X.shape[2], rng)
        bs = min(self.batch_size, X.shape[0])
        for _ in range(self.max_iter):
            idx = rng.choice(X.shape[0], size=bs, replace=False)
            self._step(X[idx], y[idx])
        return self

    def predict(self, X, ablation=None):
        check_is_fitted(self, "params_")
        return batched_forward(self.params_, X, ablation, scale=self.attn_scale)

    def predict_sign(self, X, ablation=None):
        return classify(self.predict(X, ablation))

    def transform(self, X, ablation=None):
        check_is_fitted(self, "params_")
        return final_residual(self.params_, X, ablation, scale=self.attn_scale)

    def trace(self, X, ablation=None):
        """Predictions plus attention weights and residual snapshots."""
        check_is_fitted(self, "params_")
        return batched_forward(self.params_, X, ablation, scale=self.attn_scale, return_trace=True)

    def sign_accuracy(self, X, y, ablation=None) -> float:
        y = check_targets(y, len(X))
        return float(np.mean(self.predict_sign(X, ablation) == np.sign(y)))
