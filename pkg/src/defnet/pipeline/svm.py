"""One-vs-rest linear SVMs trained by full-batch subgradient descent."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import DimensionError, ParameterError


@dataclass
class LinearSVM:
    """``K`` independent hinge-loss classifiers over standardized features.

    Minimises ``mean_i max(0, 1 - y_ik (w_k . z_i + b_k)) + lam/2 |w_k|^2`` with
    ``z = (x - mean) / scale``.
    """

    lam: float = 1e-3
    epochs: int = 300
    lr: float = 0.5
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None

    def fit(self, X, Y, balanced: bool = False) -> "LinearSVM":
        X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        if Y.ndim == 1:
            Y = Y[:, None]
        if len(X) == 0 or len(X) != len(Y):
            raise DimensionError("need matching, non-empty X and Y")
        if not np.all((Y == 1) | (Y == -1)):
            raise ParameterError("labels must be -1 or +1")
        self.mean = X.mean(axis=0)
        self.scale = X.std(axis=0) + 1e-8
        Z = (X - self.mean) / self.scale
        n, d = Z.shape
        K = Y.shape[1]
        if balanced:
            pos = (Y > 0).sum(axis=0).clip(1)
            neg = (Y < 0).sum(axis=0).clip(1)
            cw = np.where(Y > 0, n / (2.0 * pos), n / (2.0 * neg))
        else:
            cw = np.ones_like(Y)
        W = np.zeros((K, d))
        b = np.zeros(K)
        for t in range(self.epochs):
            s = Z @ W.T + b
            active = (Y * s < 1) * cw  # [n, K]
            g = -(active * Y)
            gW = g.T @ Z / n + self.lam * W
            gb = g.sum(axis=0) / n
            step = self.lr / np.sqrt(1.0 + t)
            W -= step * gW
            b -= step * gb
        self.weight, self.bias = W, b
        return self

    def decision(self, X) -> np.ndarray:
        if self.weight is None:
            raise ParameterError("SVM is not fitted")
        Z = (np.asarray(X, dtype=np.float64) - self.mean) / self.scale
        if Z.shape[-1] != self.weight.shape[1]:
            raise DimensionError(f"expected {self.weight.shape[1]} features, got {Z.shape[-1]}")
        return Z @ self.weight.T + self.bias

    def raw_weights(self):
        """Weights and bias acting on unstandardized features."""
        W = self.weight / self.scale
        return W, self.bias - W @ self.mean
