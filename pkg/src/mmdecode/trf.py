"""Lagged ridge regression from envelope to EEG, and GFP-based SNR curves.

The lag window may include negative (acausal) lags; normalizing the GFP curve
by its mean over a pre-response background window turns peak values into SNR
estimates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .dsp import Envelope, MultichannelSignal


class TrfError(ValueError):
    """Invalid TRF inputs or a degenerate regression system."""


# Lag and background windows (seconds) per analysis band.
GAMMA_LAG_WINDOW = (-0.050, 0.150)
GAMMA_BACKGROUND_WINDOW = (-0.050, -0.010)
LF_LAG_WINDOW = (-0.100, 0.400)
LF_BACKGROUND_WINDOW = (-0.100, -0.020)

RIDGE_GRID = tuple(10.0**k for k in range(-4, 5))


@dataclass
class Trf:
    weights: np.ndarray  # (channels, lags)
    lag_axis_s: np.ndarray
    rate_hz: float
    band_hz: tuple[float, float] | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.lag_axis_s = np.asarray(self.lag_axis_s, dtype=np.float64)
        if not np.all(np.isfinite(self.weights)):
            raise TrfError("TRF weights contain non-finite values")
        if np.any(np.diff(self.lag_axis_s) <= 0):
            raise TrfError("lag axis must be strictly increasing")
        if self.weights.shape[1] != self.lag_axis_s.size:
            raise TrfError("weights and lag axis disagree on the number of lags")


@dataclass
class GfpCurve:
    values: np.ndarray  # per lag, >= 0
    lag_axis_s: np.ndarray
    normalization: float | None = None  # background mean divided out, if any
    peak_snr: float | None = None
    peak_lag_s: float | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.lag_axis_s = np.asarray(self.lag_axis_s, dtype=np.float64)
        if np.any(self.values < 0):
            raise TrfError("GFP values must be nonnegative")


def lag_range_samples(rate_hz: float, lag_min_s: float, lag_max_s: float) -> np.ndarray:
    k_min = int(round(lag_min_s * rate_hz))
    k_max = int(round(lag_max_s * rate_hz))
    if k_min >= k_max:
        raise TrfError(f"lag window [{lag_min_s}, {lag_max_s}] s collapses at {rate_hz} Hz")
    return np.arange(k_min, k_max + 1)


def build_lagged_matrix(
    envelope: Envelope, lag_min_s: float, lag_max_s: float
) -> tuple[np.ndarray, np.ndarray, slice]:
    """Design matrix of lagged envelope copies.

    Returns (X, lag_axis_s, rows): X[i, k] = env[rows.start + i - lag_k]; rows
    are the time points where every lag is in range.
    """
    env = envelope.data
    lags = lag_range_samples(envelope.rate_hz, lag_min_s, lag_max_s)
    n = env.size
    t0 = max(int(lags[-1]), 0)
    t1 = n - 1 + min(int(lags[0]), 0)
    if t1 < t0:
        raise TrfError("lag window is longer than the signal")
    rows = slice(t0, t1 + 1)
    times = np.arange(t0, t1 + 1)
    X = env[times[:, None] - lags[None, :]]
    return X, lags / envelope.rate_hz, rows


def fit_trf(
    envelope: Envelope,
    eeg: MultichannelSignal,
    lag_min_s: float,
    lag_max_s: float,
    ridge_lambda: float,
) -> Trf:
    """Ridge solution (X'X + lambda I)^-1 X'Y per channel."""
    if abs(envelope.rate_hz - eeg.rate_hz) > 1e-9:
        raise TrfError(
            f"envelope rate {envelope.rate_hz} differs from EEG rate {eeg.rate_hz}"
        )
    if envelope.n_samples != eeg.n_samples:
        raise TrfError("envelope and EEG must cover the same samples")
    if ridge_lambda < 0:
        raise TrfError("ridge lambda must be >= 0")
    X, lag_axis_s, rows = build_lagged_matrix(envelope, lag_min_s, lag_max_s)
    Y = eeg.data[:, rows].T
    gram = X.T @ X
    gram[np.diag_indices_from(gram)] += ridge_lambda
    try:
        cho = scipy.linalg.cho_factor(gram)
    except scipy.linalg.LinAlgError as exc:
        raise TrfError(
            "singular regression system (degenerate envelope at this lambda)"
        ) from exc
    weights = scipy.linalg.cho_solve(cho, X.T @ Y).T
    return Trf(weights=weights, lag_axis_s=lag_axis_s, rate_hz=eeg.rate_hz)


def select_ridge_lambda(
    envelope: Envelope,
    eeg: MultichannelSignal,
    lag_min_s: float,
    lag_max_s: float,
    grid=RIDGE_GRID,
) -> float:
    """Grid-select lambda (scaled by trace(X'X)/n_lags) on a held-out final third.

    Deterministic given the data: ties resolve to the smaller lambda.
    """
    X, _, rows = build_lagged_matrix(envelope, lag_min_s, lag_max_s)
    Y = eeg.data[:, rows].T
    n = X.shape[0]
    cut = (2 * n) // 3
    if cut < X.shape[1] or n - cut < 2:
        raise TrfError("too few samples to hold out a validation third")
    X_fit, X_val = X[:cut], X[cut:]
    Y_fit, Y_val = Y[:cut], Y[cut:]
    gram = X_fit.T @ X_fit
    scale = np.trace(gram) / gram.shape[0]
    xty = X_fit.T @ Y_fit
    best_lambda, best_score = None, -np.inf
    for factor in grid:
        lam = factor * scale
        g = gram.copy()
        g[np.diag_indices_from(g)] += lam
        try:
            W = scipy.linalg.cho_solve(scipy.linalg.cho_factor(g), xty)
        except scipy.linalg.LinAlgError:
            continue
        pred = X_val @ W
        pc = pred - pred.mean(axis=0)
        yc = Y_val - Y_val.mean(axis=0)
        denom = np.linalg.norm(pc, axis=0) * np.linalg.norm(yc, axis=0)
        valid = denom > 0
        if not np.any(valid):
            continue
        score = float(np.mean((pc * yc).sum(axis=0)[valid] / denom[valid]))
        if score > best_score + 1e-12:
            best_lambda, best_score = lam, score
    if best_lambda is None:
        raise TrfError("lambda selection failed on all grid points")
    return best_lambda


def gfp(trf: Trf) -> GfpCurve:
    """Per-lag standard deviation across channels (population form)."""
    if trf.weights.shape[0] < 2:
        raise TrfError("GFP needs at least 2 channels")
    values = np.std(trf.weights, axis=0, ddof=0)
    return GfpCurve(values=values, lag_axis_s=trf.lag_axis_s.copy())


def normalize_gfp(curve: GfpCurve, background_window_s: tuple[float, float]) -> GfpCurve:
    """Divide by the mean over the background lags; peak of the result is the SNR."""
    lo, hi = background_window_s
    mask = (curve.lag_axis_s >= lo) & (curve.lag_axis_s <= hi)
    if not np.any(mask):
        raise TrfError(f"background window [{lo}, {hi}] s contains no lags")
    background = float(np.mean(curve.values[mask]))
    if background <= 0:
        raise TrfError("background mean is zero; cannot normalize")
    values = curve.values / background
    peak_index = int(np.argmax(values))
    return GfpCurve(
        values=values,
        lag_axis_s=curve.lag_axis_s.copy(),
        normalization=background,
        peak_snr=float(values[peak_index]),
        peak_lag_s=float(curve.lag_axis_s[peak_index]),
    )
