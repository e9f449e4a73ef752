"""Filter design, zero-phase filtering, resampling, envelopes, segmentation.

All filtering uses low-order Butterworth IIR designs applied forward and
backward (zero net group delay), which keeps edge artefacts small on short
segments and preserves the EEG/stimulus temporal alignment the match-mismatch
task depends on.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import scipy.signal


class DspError(ValueError):
    """Invalid signal or filter parameters."""


@dataclass
class MultichannelSignal:
    """channels x samples float matrix with a sampling rate."""

    data: np.ndarray
    rate_hz: float

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=np.float64))
        if self.data.ndim != 2 or self.data.shape[1] < 1:
            raise DspError(f"signal must be channels x samples, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise DspError("signal contains non-finite values")
        if self.rate_hz <= 0:
            raise DspError("sampling rate must be positive")

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.rate_hz


@dataclass
class Envelope:
    """Single-channel nonnegative amplitude envelope."""

    data: np.ndarray
    rate_hz: float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64).reshape(-1)
        if self.data.size < 1:
            raise DspError("envelope is empty")
        if not np.all(np.isfinite(self.data)):
            raise DspError("envelope contains non-finite values")
        if self.rate_hz <= 0:
            raise DspError("sampling rate must be positive")

    @property
    def n_samples(self) -> int:
        return self.data.size


@dataclass
class IirCoefficients:
    """Cascaded second-order sections plus design metadata."""

    sos: np.ndarray  # (n_sections, 6) rows [b0, b1, b2, 1, a1, a2]
    band_hz: tuple[float, float]
    order: int
    rate_hz: float
    kind: str = "bandpass"

    def __post_init__(self):
        self.sos = np.asarray(self.sos, dtype=np.float64)
        if self.sos.ndim != 2 or self.sos.shape[1] != 6 or self.sos.shape[0] == 0:
            raise DspError("sos must be a non-empty (n, 6) array")
        for row in self.sos:
            poles = np.roots([row[3], row[4], row[5]])
            if np.any(np.abs(poles) >= 1.0):
                raise DspError("unstable filter design: pole on or outside the unit circle")

    def sections(self) -> list[tuple[float, float, float, float, float]]:
        """(b0, b1, b2, a1, a2) per section, a0 normalized to 1."""
        return [tuple(row[[0, 1, 2, 4, 5]]) for row in self.sos]


def design_bandpass(low_hz: float, high_hz: float, order: int, rate_hz: float) -> IirCoefficients:
    """Butterworth band-pass as second-order sections; -3 dB at both edges."""
    if not (0 < low_hz < high_hz < rate_hz / 2):
        raise DspError(
            f"band edges must satisfy 0 < {low_hz} < {high_hz} < {rate_hz / 2} (rate/2)"
        )
    if not (1 <= order <= 8):
        raise DspError(f"order must be in [1, 8], got {order}")
    sos = scipy.signal.butter(order, [low_hz, high_hz], btype="bandpass", fs=rate_hz, output="sos")
    return IirCoefficients(sos=sos, band_hz=(low_hz, high_hz), order=order, rate_hz=rate_hz)


def design_lowpass(cutoff_hz: float, order: int, rate_hz: float) -> IirCoefficients:
    """Butterworth low-pass; used for envelope smoothing and resampling anti-alias."""
    if not (0 < cutoff_hz < rate_hz / 2):
        raise DspError(f"cutoff must satisfy 0 < {cutoff_hz} < {rate_hz / 2} (rate/2)")
    if not (1 <= order <= 8):
        raise DspError(f"order must be in [1, 8], got {order}")
    sos = scipy.signal.butter(order, cutoff_hz, btype="lowpass", fs=rate_hz, output="sos")
    return IirCoefficients(
        sos=sos, band_hz=(0.0, cutoff_hz), order=order, rate_hz=rate_hz, kind="lowpass"
    )


def magnitude_response(coeffs: IirCoefficients, freqs_hz) -> np.ndarray:
    """|H(f)| of the cascade, evaluated directly on the unit circle."""
    freqs_hz = np.asarray(freqs_hz, dtype=np.float64)
    z = np.exp(-2j * np.pi * freqs_hz / coeffs.rate_hz)
    h = np.ones_like(z, dtype=np.complex128)
    for b0, b1, b2, a1, a2 in coeffs.sections():
        h *= (b0 + b1 * z + b2 * z**2) / (1.0 + a1 * z + a2 * z**2)
    return np.abs(h)


def settle_length(coeffs: IirCoefficients, tol: float = 1e-5, max_len: int = 1 << 20) -> int:
    """Samples until the impulse response stays below tol x its peak magnitude."""
    n = 1024
    while n <= max_len:
        impulse = np.zeros(n)
        impulse[0] = 1.0
        h = scipy.signal.sosfilt(coeffs.sos, impulse)
        peak = np.max(np.abs(h))
        above = np.nonzero(np.abs(h) >= tol * peak)[0]
        last = int(above[-1])
        if last < n - 1:
            return last + 1
        n *= 2
    raise DspError("impulse response does not settle; filter appears marginally stable")


def filter_zero_phase(signal: MultichannelSignal, coeffs: IirCoefficients) -> MultichannelSignal:
    """Forward-backward filtering per channel; zero net group delay.

    Edges are handled by reflect-padding each channel with 3x the filter's
    settle length before the two passes, then cropping.
    """
    if abs(signal.rate_hz - coeffs.rate_hz) > 1e-9:
        raise DspError(
            f"signal rate {signal.rate_hz} Hz differs from design rate {coeffs.rate_hz} Hz"
        )
    pad = min(3 * settle_length(coeffs), signal.n_samples - 1)
    x = signal.data
    if pad > 0:
        x = np.pad(x, ((0, 0), (pad, pad)), mode="reflect")
    y = scipy.signal.sosfilt(coeffs.sos, x, axis=1)
    y = scipy.signal.sosfilt(coeffs.sos, y[:, ::-1], axis=1)[:, ::-1]
    if pad > 0:
        y = y[:, pad:-pad]
    return MultichannelSignal(data=y, rate_hz=signal.rate_hz)


def _rational_ratio(source_hz: float, target_hz: float, max_term: int = 64) -> tuple[int, int]:
    frac = Fraction(target_hz / source_hz).limit_denominator(max_term)
    if frac.numerator > max_term or frac.numerator <= 0:
        raise DspError(
            f"rate ratio {target_hz}/{source_hz} has no rational form with terms <= {max_term}"
        )
    if abs(float(frac) - target_hz / source_hz) > 1e-12:
        raise DspError(
            f"rate ratio {target_hz}/{source_hz} is not rational with terms <= {max_term}"
        )
    return frac.numerator, frac.denominator


def _antialias_fir(up: int, source_hz: float, target_hz: float) -> np.ndarray:
    """Linear-phase kaiser low-pass at 0.45 x min(rates) for the polyphase stage.

    Designed at the internal (upsampled) rate with an 80 dB stopband and a
    transition narrow enough that the passband stays flat below the cutoff.
    """
    internal = source_hz * up
    cutoff = 0.45 * min(source_hz, target_hz)
    width = 0.12 * cutoff
    numtaps, beta = scipy.signal.kaiserord(80.0, width / (internal / 2.0))
    numtaps |= 1  # symmetric type-I filter, integral group delay
    return scipy.signal.firwin(numtaps, cutoff, window=("kaiser", beta), fs=internal)


def resample(signal: MultichannelSignal, target_rate_hz: float) -> MultichannelSignal:
    """Anti-alias low-pass at 0.45 x min(rates), then polyphase rational rate change."""
    if target_rate_hz <= 0:
        raise DspError("target rate must be positive")
    if abs(target_rate_hz - signal.rate_hz) < 1e-12:
        return MultichannelSignal(data=signal.data.copy(), rate_hz=signal.rate_hz)
    up, down = _rational_ratio(signal.rate_hz, target_rate_hz)
    h = _antialias_fir(up, signal.rate_hz, target_rate_hz)
    data = scipy.signal.resample_poly(signal.data, up, down, axis=1, window=h, padtype="line")
    return MultichannelSignal(data=data, rate_hz=target_rate_hz)


def resample_envelope(env: Envelope, target_rate_hz: float) -> Envelope:
    out = resample(MultichannelSignal(data=env.data[None, :], rate_hz=env.rate_hz), target_rate_hz)
    # Polyphase ripple can dip a hair below zero on a nonnegative input.
    return Envelope(data=np.maximum(out.data[0], 0.0), rate_hz=target_rate_hz)


def _cascade_stages(source_hz: float, target_hz: float, max_term: int = 64) -> list[float]:
    """Intermediate rates so every stage has a small-term rational ratio."""
    try:
        _rational_ratio(source_hz, target_hz, max_term)
        return [target_hz]
    except DspError:
        pass
    ratio = Fraction(source_hz / target_hz).limit_denominator(10**6)
    if abs(float(ratio) - source_hz / target_hz) > 1e-9:
        raise DspError(f"rate ratio {source_hz}/{target_hz} is not rational")
    stages: list[float] = []
    current = source_hz
    # Peel off integer factors <= max_term while reducing toward the target.
    remaining = ratio
    while remaining > 1:
        factor = None
        for cand in range(max_term, 1, -1):
            if remaining % cand == 0:
                factor = cand
                break
        if factor is None:
            raise DspError(
                f"cannot factor rate ratio {source_hz}/{target_hz} into stages with terms <= {max_term}"
            )
        remaining /= factor
        current = current / factor
        stages.append(current)
    if not stages or abs(stages[-1] - target_hz) > 1e-9:
        raise DspError(f"cannot reach {target_hz} Hz from {source_hz} Hz by staged resampling")
    return stages


def extract_envelope(audio: MultichannelSignal, target_rate_hz: float) -> Envelope:
    """Full-wave rectification, zero-phase low-pass at 0.45 x target, resample.

    Large exact rate ratios (e.g. 16 kHz -> 64 Hz) are resampled in stages so
    each stage satisfies the small-term rational-ratio contract.
    """
    if audio.n_channels != 1:
        raise DspError(f"audio must be single-channel, got {audio.n_channels} channels")
    rectified = MultichannelSignal(data=np.abs(audio.data), rate_hz=audio.rate_hz)
    cutoff = 0.45 * target_rate_hz
    if cutoff < audio.rate_hz / 2:
        rectified = filter_zero_phase(rectified, design_lowpass(cutoff, 3, audio.rate_hz))
    out = rectified
    for stage_rate in _cascade_stages(audio.rate_hz, target_rate_hz):
        out = resample(out, stage_rate)
    return Envelope(data=np.maximum(out.data[0], 0.0), rate_hz=target_rate_hz)


@dataclass
class Segment:
    """A full-length window tagged with its start-sample index."""

    start: int
    data: np.ndarray  # (channels, length) or (length,) matching the source


def segment_signal(signal, length_s: float, hop_s: float, rate_hz: float | None = None) -> list[Segment]:
    """Maximal list of full-length windows; no partial tail window.

    Accepts a MultichannelSignal, an Envelope, or a raw array plus rate_hz;
    windows run along the last axis.
    """
    if hasattr(signal, "rate_hz"):
        data, rate_hz = signal.data, signal.rate_hz
    else:
        if rate_hz is None:
            raise DspError("rate_hz required when segmenting a raw array")
        data = signal
    length_f = length_s * rate_hz
    length = int(round(length_f))
    if abs(length_f - length) > 1e-9 or length < 1:
        raise DspError(f"segment length {length_s} s is not an integral number of samples")
    if hop_s <= 0:
        raise DspError("hop must be positive")
    hop = int(round(hop_s * rate_hz))
    if hop < 1:
        raise DspError(f"hop {hop_s} s is below one sample at {rate_hz} Hz")
    data = np.asarray(data)
    n = data.shape[-1]
    if n < 1:
        raise DspError("cannot segment an empty signal")
    segments = []
    start = 0
    while start + length <= n:
        segments.append(Segment(start=start, data=data[..., start : start + length]))
        start += hop
    return segments
