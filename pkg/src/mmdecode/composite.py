"""LDA fusion of the two decoders' logits, and ensemble logit averaging.

The composite decoder is a closed-form linear discriminant on the
(lf_logit, gamma_logit) plane: class means, pooled within-class covariance,
w = Sigma^-1 (mu1 - mu0). Its sigmoid posterior is the probability that a pair
is matched; among several candidates the matched one is taken to be the
argmax.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .decoder import LogitPair, sigmoid


class CompositeError(ValueError):
    """Degenerate fusion inputs (single class, too few samples, empty lists)."""


def average_logits(logits: Sequence[float]) -> float:
    """Arithmetic mean of ensemble instance logits."""
    arr = np.asarray(logits, dtype=np.float64)
    if arr.size == 0:
        raise CompositeError("cannot average an empty list of logits")
    return float(np.mean(arr))


@dataclass
class LdaModel:
    mu0: np.ndarray  # mismatched-class mean
    mu1: np.ndarray  # matched-class mean
    cov: np.ndarray  # pooled within-class covariance
    prior0: float
    prior1: float
    weights: np.ndarray  # Sigma^-1 (mu1 - mu0)
    bias: float
    regularized: bool = False

    def to_dict(self) -> dict:
        return {
            "mu0": self.mu0.tolist(),
            "mu1": self.mu1.tolist(),
            "cov": self.cov.tolist(),
            "prior0": self.prior0,
            "prior1": self.prior1,
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "regularized": self.regularized,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LdaModel":
        return cls(
            mu0=np.asarray(data["mu0"], dtype=np.float64),
            mu1=np.asarray(data["mu1"], dtype=np.float64),
            cov=np.asarray(data["cov"], dtype=np.float64),
            prior0=float(data["prior0"]),
            prior1=float(data["prior1"]),
            weights=np.asarray(data["weights"], dtype=np.float64),
            bias=float(data["bias"]),
            regularized=bool(data.get("regularized", False)),
        )


def _as_xy(pairs: Sequence[LogitPair]) -> tuple[np.ndarray, np.ndarray]:
    X = np.array([[p.lf_logit, p.gamma_logit] for p in pairs], dtype=np.float64)
    labels = [p.label for p in pairs]
    if any(lbl is None for lbl in labels):
        raise CompositeError("all logit pairs must carry labels to fit the LDA")
    return X, np.asarray(labels, dtype=np.int64)


def fit_lda(pairs: Sequence[LogitPair]) -> LdaModel:
    """Closed-form LDA on labeled (lf_logit, gamma_logit) pairs."""
    X, y = _as_xy(pairs)
    return fit_lda_xy(X, y)


def fit_lda_xy(X: np.ndarray, y: np.ndarray) -> LdaModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise CompositeError("X must be (n, d) with one label per row")
    n0, n1 = int(np.sum(y == 0)), int(np.sum(y == 1))
    if n0 < 3 or n1 < 3:
        raise CompositeError(f"need at least 3 samples per class, got {n0}/{n1}")
    X0, X1 = X[y == 0], X[y == 1]
    mu0, mu1 = X0.mean(axis=0), X1.mean(axis=0)
    # Pooled within-class covariance with the standard n - 2 denominator.
    S = (X0 - mu0).T @ (X0 - mu0) + (X1 - mu1).T @ (X1 - mu1)
    cov = S / (n0 + n1 - 2)
    regularized = False
    if np.linalg.cond(cov) > 1e10:
        cov = cov + 1e-8 * (np.trace(cov) / cov.shape[0]) * np.eye(cov.shape[0])
        regularized = True
    prior0, prior1 = n0 / (n0 + n1), n1 / (n0 + n1)
    weights = np.linalg.solve(cov, mu1 - mu0)
    bias = -0.5 * float(weights @ (mu1 + mu0)) + float(np.log(prior1 / prior0))
    return LdaModel(
        mu0=mu0,
        mu1=mu1,
        cov=cov,
        prior0=prior0,
        prior1=prior1,
        weights=weights,
        bias=bias,
        regularized=regularized,
    )


def _features(pair) -> np.ndarray:
    if isinstance(pair, LogitPair):
        return pair.xy
    return np.asarray(pair, dtype=np.float64)


def predict_proba(model: LdaModel, pair) -> float:
    """Probability that the pair is matched: sigmoid(w.x + b)."""
    x = _features(pair)
    return float(sigmoid(np.asarray(model.weights @ x + model.bias)))


def decision_score(model: LdaModel, pair) -> float:
    return float(model.weights @ _features(pair) + model.bias)


@dataclass
class MatchSelection:
    index: int
    probabilities: np.ndarray
    tied: bool  # argmax shared by several candidates; lowest index reported


def select_match(model: LdaModel, candidates: Sequence) -> MatchSelection:
    """Index of the candidate with the largest matched probability.

    Ties break to the lowest index, recorded in the output.
    """
    if len(candidates) == 0:
        raise CompositeError("empty candidate list")
    if len(candidates) < 2:
        raise CompositeError("select_match needs at least 2 candidates")
    probs = np.array([predict_proba(model, c) for c in candidates])
    index = int(np.argmax(probs))
    tied = bool(np.sum(probs == probs[index]) > 1)
    return MatchSelection(index=index, probabilities=probs, tied=tied)
