"""Forward model for fabricating cohorts with known envelope responses.

EEG is built as mixing @ [g_lf * (lf_kernel (*) env); g_gamma * (gamma_kernel (*) env)]
plus 1/f noise, so every downstream stage (TRF recovery, decoder training,
fusion, evaluation) can be verified at desk scale with known ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import CohortParams
from .dsp import Envelope, MultichannelSignal, design_bandpass, filter_zero_phase
from .storage import DatasetManifest, Participant, Recording, save_manifest, write_tensor


class SynthError(ValueError):
    """Invalid forward-model configuration."""


def build_kernel(
    rate_hz: float, freq_hz: float, delay_s: float, decay_s: float, support_s: float
) -> np.ndarray:
    """Damped oscillation on [delay, support], zero before onset, unit L2 norm.

    Onset and offset are raised-cosine tapered; a hard onset would put a wide
    spectral skirt under the oscillation and leak a high-frequency kernel into
    the low-frequency analysis path.
    """
    n = int(round(support_s * rate_hz)) + 1
    t = np.arange(n) / rate_hz
    tau = t - delay_s
    kernel = np.where(tau >= 0, np.sin(2 * np.pi * freq_hz * tau) * np.exp(-tau / decay_s), 0.0)
    ramp = 0.25 * (support_s - delay_s)
    rise = np.clip(tau / ramp, 0.0, 1.0)
    fall = np.clip((support_s - t) / ramp, 0.0, 1.0)
    kernel = kernel * np.sin(0.5 * np.pi * rise) ** 2 * np.sin(0.5 * np.pi * fall) ** 2
    norm = np.linalg.norm(kernel)
    if norm == 0:
        raise SynthError("kernel is identically zero; check delay/support")
    return kernel / norm


@dataclass
class SynthConfig:
    """One participant's forward model."""

    n_channels: int = 64
    rate_hz: float = 512.0
    g_lf: float = 1.0
    g_gamma: float = 1.0
    # LF response: damped 4 Hz oscillation over 0-400 ms.
    lf_freq_hz: float = 4.0
    lf_delay_s: float = 0.03
    lf_decay_s: float = 0.12
    lf_support_s: float = 0.4
    # Gamma response: damped ~80 Hz oscillation with 10-40 ms support.
    gamma_freq_hz: float = 80.0
    gamma_delay_s: float = 0.01
    gamma_decay_s: float = 0.012
    gamma_support_s: float = 0.04
    noise_alpha: float = 1.0
    noise_level: float = 1.0
    shared_noise_rank: int = 3
    shared_noise_level: float = 0.5
    mixing: np.ndarray | None = None  # (n_channels, 2); drawn from seed when None
    lf_kernel: np.ndarray | None = None  # explicit override, at rate_hz
    gamma_kernel: np.ndarray | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.n_channels < 2:
            raise SynthError("need at least 2 channels")
        if self.g_lf < 0 or self.g_gamma < 0:
            raise SynthError("gains must be >= 0")
        if self.noise_level < 0 or self.shared_noise_level < 0:
            raise SynthError("noise levels must be >= 0")
        if self.mixing is not None:
            m = np.asarray(self.mixing, dtype=np.float64)
            if m.shape != (self.n_channels, 2):
                raise SynthError(f"mixing must be ({self.n_channels}, 2), got {m.shape}")
            if not np.all(np.isfinite(m)):
                raise SynthError("mixing contains non-finite values")
            if np.linalg.matrix_rank(m) < 2:
                raise SynthError("mixing must have full column rank")
        for name in ("lf_kernel", "gamma_kernel"):
            k = getattr(self, name)
            if k is not None and not np.all(np.isfinite(np.asarray(k))):
                raise SynthError(f"{name} contains non-finite values")

    def kernels(self) -> tuple[np.ndarray, np.ndarray]:
        lf = (
            np.asarray(self.lf_kernel, dtype=np.float64)
            if self.lf_kernel is not None
            else build_kernel(
                self.rate_hz, self.lf_freq_hz, self.lf_delay_s, self.lf_decay_s, self.lf_support_s
            )
        )
        gamma = (
            np.asarray(self.gamma_kernel, dtype=np.float64)
            if self.gamma_kernel is not None
            else build_kernel(
                self.rate_hz,
                self.gamma_freq_hz,
                self.gamma_delay_s,
                self.gamma_decay_s,
                self.gamma_support_s,
            )
        )
        return lf, gamma


def synth_envelope(duration_s: float, rate_hz: float, seed: int, ripple: float = 0.3) -> Envelope:
    """Nonnegative envelope with speech-like slow modulations (energy ~1-6 Hz).

    A small broadband ripple rides multiplicatively on the slow modulator
    (as pitch-rate fluctuations ride on syllabic energy in speech); it is what
    makes the envelope detectable in the gamma band at all. The modulation
    spectrum peak stays in the syllabic range because the ripple spreads far
    less power per Hz than the slow band.
    """
    if duration_s < 10.0:
        raise SynthError("training material must be at least 10 s")
    if rate_hz < 16.0:
        raise SynthError("envelope rate too low to carry the modulation band")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x456E56]))
    n = int(round(duration_s * rate_hz))
    slow = _band_noise(rng, n, rate_hz, 1.5, 6.0)
    # Offset keeps the clip at zero rare, so the modulation spectrum stays put.
    base = np.maximum(1.5 + slow, 0.0)
    if ripple > 0 and rate_hz >= 128.0:
        fast = _band_noise(rng, n, rate_hz, 20.0, 0.47 * rate_hz)
        base = np.maximum(base * (1.0 + ripple * fast), 0.0)
    return Envelope(data=base, rate_hz=rate_hz)


def _band_noise(rng: np.random.Generator, n: int, rate_hz: float, low: float, high: float) -> np.ndarray:
    white = rng.standard_normal(n)
    band = design_bandpass(low, high, 3, rate_hz)
    out = filter_zero_phase(MultichannelSignal(data=white[None, :], rate_hz=rate_hz), band).data[0]
    return out / (np.std(out) + 1e-12)


def _pink_noise(rng: np.random.Generator, n_rows: int, n: int, alpha: float) -> np.ndarray:
    """Rows of 1/f^alpha-power noise, each normalized to unit standard deviation."""
    white = rng.standard_normal((n_rows, n))
    spectrum = np.fft.rfft(white, axis=1)
    freqs = np.fft.rfftfreq(n)
    shaping = np.zeros_like(freqs)
    shaping[1:] = freqs[1:] ** (-alpha / 2.0)
    shaped = np.fft.irfft(spectrum * shaping, n, axis=1)
    shaped /= np.std(shaped, axis=1, keepdims=True) + 1e-300
    return shaped


def _convolve_causal(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return np.convolve(x, kernel, mode="full")[: x.size]


def synth_eeg(envelope: Envelope, config: SynthConfig) -> MultichannelSignal:
    """Mix kernel-convolved envelope responses into channels and add 1/f noise."""
    config.validate()
    if envelope.rate_hz < 512.0:
        raise SynthError(f"envelope must be sampled at >= 512 Hz, got {envelope.rate_hz}")
    if abs(envelope.rate_hz - config.rate_hz) > 1e-9:
        raise SynthError(
            f"envelope rate {envelope.rate_hz} differs from config rate {config.rate_hz}"
        )
    ss = np.random.SeedSequence([int(config.seed), 0x454547])
    mix_rng, noise_rng, shared_rng = (np.random.default_rng(c) for c in ss.spawn(3))

    lf_kernel, gamma_kernel = config.kernels()
    env = envelope.data - np.mean(envelope.data)
    responses = np.stack(
        [
            config.g_lf * _normalized(_convolve_causal(env, lf_kernel)),
            config.g_gamma * _normalized(_convolve_causal(env, gamma_kernel)),
        ]
    )

    if config.mixing is not None:
        mixing = np.asarray(config.mixing, dtype=np.float64)
    else:
        mixing = mix_rng.standard_normal((config.n_channels, 2))
        mixing /= np.linalg.norm(mixing, axis=0, keepdims=True)

    data = mixing @ responses
    if config.noise_level > 0:
        noise = _pink_noise(noise_rng, config.n_channels, env.size, config.noise_alpha)
        if config.shared_noise_rank > 0 and config.shared_noise_level > 0:
            sources = _pink_noise(shared_rng, config.shared_noise_rank, env.size, config.noise_alpha)
            loadings = shared_rng.standard_normal((config.n_channels, config.shared_noise_rank))
            loadings /= np.sqrt(config.shared_noise_rank)
            noise = noise + config.shared_noise_level * (loadings @ sources)
        data = data + config.noise_level * noise
    return MultichannelSignal(data=data, rate_hz=config.rate_hz)


def _normalized(x: np.ndarray) -> np.ndarray:
    std = np.std(x)
    return x / std if std > 0 else x


@dataclass
class CohortResult:
    manifest: DatasetManifest
    manifest_path: str
    configs: list[SynthConfig] = field(default_factory=list)


def _participant_seed(seed: int, index: int, stream: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index), stream]).generate_state(1)[0])


def participant_config(params: CohortParams, index: int) -> SynthConfig:
    """Forward model of participant ``index``: gains drawn from the cohort ranges."""
    rng = np.random.default_rng(np.random.SeedSequence([int(params.seed), int(index), 1]))
    g_lf = rng.uniform(*params.g_lf_range)
    g_gamma = rng.uniform(*params.g_gamma_range)
    return SynthConfig(
        n_channels=params.n_channels,
        rate_hz=params.rate_hz,
        g_lf=g_lf,
        g_gamma=g_gamma,
        noise_level=params.noise_level,
        seed=_participant_seed(params.seed, index, 2),
    )


def generate_cohort(out_dir, params: CohortParams) -> CohortResult:
    """Write a synthetic cohort (tensors + manifest) under ``out_dir``.

    Participant i is generated from an RNG stream derived from
    (cohort seed, i), so cohorts are reproducible and participants can be
    regenerated independently.
    """
    from pathlib import Path

    params.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    total = params.n_train + params.n_heldout
    participants = []
    configs = []
    for i in range(total):
        pid = f"p{i:03d}"
        split = "train" if i < params.n_train else "heldout"
        env = synth_envelope(params.duration_s, params.rate_hz, _participant_seed(params.seed, i, 0))
        config = participant_config(params, i)
        eeg = synth_eeg(env, config)
        eeg_rel = f"{pid}/eeg.mmt"
        env_rel = f"{pid}/envelope.mmt"
        write_tensor(out_dir / eeg_rel, eeg.data, dtype="f32")
        write_tensor(out_dir / env_rel, env.data, dtype="f32")
        participants.append(
            Participant(
                id=pid,
                split=split,
                recordings=[
                    Recording(
                        eeg_path=eeg_rel,
                        envelope_path=env_rel,
                        eeg_rate_hz=params.rate_hz,
                        envelope_rate_hz=params.rate_hz,
                    )
                ],
            )
        )
        configs.append(config)
    manifest = DatasetManifest(participants=participants, root=out_dir)
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest, manifest_path)
    return CohortResult(manifest=manifest, manifest_path=str(manifest_path), configs=configs)
