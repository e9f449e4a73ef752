"""Stage orchestration: band preprocessing, logit computation, fusion data,
evaluation driving, and TRF band analysis.

Everything here is deterministic given the seeds it is handed; the CLI and the
in-memory test paths run through the same functions.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import composite, decoder, evaluation, storage, training, trf
from .config import CohortParams, PipelineConfig
from .dsp import (
    Envelope,
    MultichannelSignal,
    design_bandpass,
    filter_zero_phase,
    resample,
    resample_envelope,
)
from .storage import Checkpoint, DatasetManifest, Participant, Recording
from .synthgen import participant_config, synth_eeg, synth_envelope
from .training import BandRecording


class PipelineError(RuntimeError):
    """A stage received inconsistent artifacts."""


BANDS = ("lf", "gamma")


# ---------------------------------------------------------------------------
# Preprocessing


def band_preprocess(
    eeg: MultichannelSignal, env: Envelope, band: str, cfg: PipelineConfig
) -> tuple[MultichannelSignal, Envelope]:
    """The per-band §-style preprocessing path.

    lf: broadband EEG and envelope, both resampled to the LF rate.
    gamma: EEG band-passed at its source rate, then resampled to the gamma
    rate; the broadband envelope resampled to the same rate.
    """
    if band == "lf":
        return resample(eeg, cfg.lf_rate_hz), resample_envelope(env, cfg.lf_rate_hz)
    if band == "gamma":
        low, high = cfg.gamma_band_hz
        coeffs = design_bandpass(low, high, 3, eeg.rate_hz)
        filtered = filter_zero_phase(eeg, coeffs)
        return resample(filtered, cfg.gamma_rate_hz), resample_envelope(env, cfg.gamma_rate_hz)
    raise PipelineError(f"unknown band {band!r}")


def load_raw_recording(
    manifest: DatasetManifest, rec: Recording
) -> tuple[MultichannelSignal, Envelope]:
    eeg = storage.read_tensor(manifest.resolve(rec.eeg_path)).values
    env = storage.read_tensor(manifest.resolve(rec.envelope_path)).values
    return (
        MultichannelSignal(data=eeg, rate_hz=rec.eeg_rate_hz),
        Envelope(data=env, rate_hz=rec.envelope_rate_hz),
    )


def preprocess_manifest(
    manifest: DatasetManifest, band: str, cfg: PipelineConfig, out_dir
) -> Path:
    """Write a band-preprocessed copy of the dataset; returns the new manifest path."""
    out_dir = Path(out_dir)
    participants = []
    for participant in manifest.participants:
        recordings = []
        for i, rec in enumerate(participant.recordings):
            eeg, env = load_raw_recording(manifest, rec)
            eeg_b, env_b = band_preprocess(eeg, env, band, cfg)
            n = min(eeg_b.n_samples, env_b.n_samples)
            eeg_rel = f"{participant.id}/rec{i}_eeg.mmt"
            env_rel = f"{participant.id}/rec{i}_envelope.mmt"
            storage.write_tensor(out_dir / eeg_rel, eeg_b.data[:, :n], dtype="f32")
            storage.write_tensor(out_dir / env_rel, env_b.data[:n], dtype="f32")
            recordings.append(
                Recording(
                    eeg_path=eeg_rel,
                    envelope_path=env_rel,
                    eeg_rate_hz=eeg_b.rate_hz,
                    envelope_rate_hz=env_b.rate_hz,
                )
            )
        participants.append(
            Participant(id=participant.id, split=participant.split, recordings=recordings)
        )
    out_manifest = DatasetManifest(participants=participants, root=out_dir)
    path = out_dir / "manifest.json"
    storage.save_manifest(out_manifest, path)
    return path


# ---------------------------------------------------------------------------
# Paired (two-band) datasets


@dataclass
class PairedDataset:
    """Time-aligned LF and gamma views of the same recordings."""

    lf: list[BandRecording]
    gamma: list[BandRecording]
    ratio: int  # gamma samples per LF sample

    def __post_init__(self):
        if len(self.lf) != len(self.gamma):
            raise PipelineError("band datasets list different recordings")
        for a, b in zip(self.lf, self.gamma):
            if a.participant != b.participant:
                raise PipelineError("band datasets are not participant-aligned")


def paired_ratio(cfg: PipelineConfig) -> int:
    ratio = cfg.gamma_rate_hz / cfg.lf_rate_hz
    if abs(ratio - round(ratio)) > 1e-9 or ratio < 1:
        raise PipelineError(
            "composite pairing needs gamma_rate to be an integer multiple of lf_rate"
        )
    return int(round(ratio))


def load_paired(
    lf_manifest: DatasetManifest, gamma_manifest: DatasetManifest, split: str, cfg: PipelineConfig
) -> PairedDataset:
    lf = training.load_band_recordings(lf_manifest, split)
    gamma = training.load_band_recordings(gamma_manifest, split)
    return PairedDataset(lf=lf, gamma=gamma, ratio=paired_ratio(cfg))


@dataclass
class PairedSource:
    """Trial source whose windows carry both bands; indices on the LF grid."""

    lf: BandRecording
    gamma: BandRecording
    ratio: int

    @property
    def n_samples(self) -> int:
        # Conservative: only indices valid in both bands.
        return min(self.lf.n_samples, self.gamma.n_samples // self.ratio)

    @property
    def participant(self) -> str:
        return self.lf.participant

    def eeg_window(self, start: int, length: int):
        r = self.ratio
        return {
            "lf": self.lf.eeg[:, start : start + length],
            "gamma": self.gamma.eeg[:, start * r : (start + length) * r],
        }

    def env_window(self, start: int, length: int):
        r = self.ratio
        return {
            "lf": self.lf.envelope[start : start + length],
            "gamma": self.gamma.envelope[start * r : (start + length) * r],
        }


# ---------------------------------------------------------------------------
# Scorers


def _band_item(item, band: str):
    return item[band] if isinstance(item, dict) else item


def ensemble_logits(
    checkpoints: list[Checkpoint], eeg_item, env_items: list, band: str
) -> np.ndarray:
    """Per-candidate logits, averaged over the ensemble's instances."""
    eeg = np.asarray(_band_item(eeg_item, band))
    envs = np.stack([np.asarray(_band_item(e, band)) for e in env_items])
    eeg_batch = np.broadcast_to(eeg, (envs.shape[0],) + eeg.shape)
    per_instance = [decoder.forward_batch(c.params, eeg_batch, envs) for c in checkpoints]
    return np.mean(per_instance, axis=0)


def decoder_scorer(checkpoints: list[Checkpoint], band: str):
    """Batched scorer: ensemble-averaged logits for each candidate envelope."""
    if not checkpoints:
        raise PipelineError("no checkpoints given")

    def scorer(eeg_item, env_items):
        return ensemble_logits(checkpoints, eeg_item, env_items, band)

    return scorer


def composite_scorer(
    lf_checkpoints: list[Checkpoint],
    gamma_checkpoints: list[Checkpoint],
    lda: composite.LdaModel,
):
    """Batched scorer: LDA matched-probability of the averaged logit pair."""

    def scorer(eeg_item, env_items):
        lf_logits = ensemble_logits(lf_checkpoints, eeg_item, env_items, "lf")
        gamma_logits = ensemble_logits(gamma_checkpoints, eeg_item, env_items, "gamma")
        return np.array(
            [
                composite.predict_proba(lda, np.array([l, g]))
                for l, g in zip(lf_logits, gamma_logits)
            ]
        )

    return scorer


# ---------------------------------------------------------------------------
# Fusion data (validation logit pairs)


def validation_logit_pairs(
    paired: PairedDataset,
    lf_checkpoints: list[Checkpoint],
    gamma_checkpoints: list[Checkpoint],
    cfg: PipelineConfig,
    seed: int,
) -> list[decoder.LogitPair]:
    """Matched and mismatched logit pairs on the validation portion of the data.

    The validation carve-out mirrors the training split, so the LDA never sees
    logits from material the decoders trained on. Mismatch starts are drawn on
    the LF grid and scaled to the gamma grid, keeping both logits of a pair on
    identical time windows.
    """
    _, val_split = training.build_splits(paired.lf, cfg.train)
    seg_len = int(round(cfg.segment_seconds * cfg.lf_rate_hz))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x4C4441]))
    pairs = []
    for ref in val_split.segments:
        source = PairedSource(paired.lf[ref.rec], paired.gamma[ref.rec], paired.ratio)
        eeg_item = source.eeg_window(ref.start, seg_len)
        mismatch = training.sample_mismatch(
            source.n_samples, ref.start, seg_len, rng, ref.region, cfg.imposter_policy
        )
        env_items = [source.env_window(ref.start, seg_len), source.env_window(mismatch, seg_len)]
        lf_logits = ensemble_logits(lf_checkpoints, eeg_item, env_items, "lf")
        gamma_logits = ensemble_logits(gamma_checkpoints, eeg_item, env_items, "gamma")
        for j, label in ((0, 1), (1, 0)):
            start = ref.start if label else mismatch
            pairs.append(
                decoder.LogitPair(
                    lf_logit=float(lf_logits[j]),
                    gamma_logit=float(gamma_logits[j]),
                    label=label,
                    eeg_segment=f"{source.participant}:{ref.start}",
                    stimulus_segment=f"{source.participant}:{start}",
                )
            )
    return pairs


def fit_composite(
    paired: PairedDataset,
    lf_checkpoints: list[Checkpoint],
    gamma_checkpoints: list[Checkpoint],
    cfg: PipelineConfig,
    seed: int | None = None,
) -> tuple[composite.LdaModel, list[decoder.LogitPair]]:
    seed = cfg.seed if seed is None else seed
    pairs = validation_logit_pairs(paired, lf_checkpoints, gamma_checkpoints, cfg, seed)
    return composite.fit_lda(pairs), pairs


# ---------------------------------------------------------------------------
# Evaluation driving


def _heldout_sources(paired: PairedDataset) -> list[PairedSource]:
    return [
        PairedSource(lf, gamma, paired.ratio) for lf, gamma in zip(paired.lf, paired.gamma)
    ]


def evaluate_manifest(
    dataset,
    checkpoints: dict[str, list[Checkpoint]],
    lda: composite.LdaModel | None,
    tasks=evaluation.TASKS,
    config: PipelineConfig | None = None,
    seed: int = 0,
) -> evaluation.EvaluationReport:
    """Evaluate available decoders over the heldout split.

    ``dataset`` is a PairedDataset of heldout recordings, or a dict
    {"lf": manifest, "gamma": manifest} of band-preprocessed manifests. All
    decoders are scored on identical candidate sets per trial, so rows of the
    report are directly comparable.
    """
    cfg = config if config is not None else PipelineConfig()
    if isinstance(dataset, dict):
        dataset = load_paired(dataset["lf"], dataset["gamma"], "heldout", cfg)
    sources = _heldout_sources(dataset)
    if not sources:
        raise PipelineError("no heldout recordings to evaluate")

    scorers: dict[str, tuple] = {}
    if "lf" in checkpoints:
        scorers["lf"] = (decoder_scorer(checkpoints["lf"], "lf"), 0.0)
    if "gamma" in checkpoints:
        scorers["gamma"] = (decoder_scorer(checkpoints["gamma"], "gamma"), 0.0)
    if lda is not None and "lf" in checkpoints and "gamma" in checkpoints:
        scorers["composite"] = (
            composite_scorer(checkpoints["lf"], checkpoints["gamma"], lda),
            0.5,
        )
    if not scorers:
        raise PipelineError("no decoders to evaluate")

    seg_len = int(round(cfg.segment_seconds * cfg.lf_rate_hz))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x4556]))

    by_participant: dict[str, list] = {}
    for source in sources:
        segs = [
            (source, k * seg_len)
            for k in range(source.n_samples // seg_len)
        ]
        by_participant.setdefault(source.participant, []).extend(segs)

    task_cells: dict[str, dict] = {t: {} for t in tasks}
    n_segments = {pid: len(segs) for pid, segs in by_participant.items()}
    per_decoder_pp: dict[str, dict[str, dict[str, float]]] = {
        t: {name: {} for name in scorers} for t in tasks
    }

    for pid, segments in by_participant.items():
        for task in tasks:
            if task == "absolute":
                trials = _absolute_trials(segments, seg_len, cfg, rng)
                for name, (scorer, threshold) in scorers.items():
                    per_decoder_pp[task][name][pid] = 100.0 * _absolute_over_trials(
                        scorer, trials, seg_len, threshold
                    )
            else:
                k = 1 if task == "imposter_1" else 4
                trials = [
                    (
                        source,
                        start,
                        evaluation.draw_imposters(
                            source, start, seg_len, k, cfg.imposter_policy, rng
                        ),
                        rng.permutation(k + 1),
                    )
                    for source, start in segments
                ]
                for name, (scorer, _) in scorers.items():
                    per_decoder_pp[task][name][pid] = 100.0 * _selection_over_trials(
                        scorer, trials, seg_len
                    )

    for task in tasks:
        for name in scorers:
            task_cells[task][name] = evaluation.aggregate_cell(
                per_decoder_pp[task][name], cfg.ci_method
            )

    return evaluation.EvaluationReport(
        tasks=task_cells,
        n_segments=n_segments,
        ci_method=cfg.ci_method,
        seed=seed,
        config=dataclasses.asdict(cfg) if cfg is not None else {},
    )


def _absolute_trials(segments, seg_len, cfg, rng):
    trials = []
    for source, start in segments:
        mismatch = training.sample_mismatch(
            source.n_samples, start, seg_len, rng, None, cfg.imposter_policy
        )
        trials.append((source, start, mismatch))
    return trials


def _absolute_over_trials(scorer, trials, seg_len, threshold) -> float:
    """Balanced matched/mismatched pairs; prediction is score > threshold."""
    correct = 0
    for source, start, mismatch in trials:
        eeg_item = source.eeg_window(start, seg_len)
        env_items = [source.env_window(start, seg_len), source.env_window(mismatch, seg_len)]
        scores = np.asarray(scorer(eeg_item, env_items))
        correct += int(scores[0] > threshold)
        correct += int(not scores[1] > threshold)
    return correct / (2 * len(trials))


def _selection_over_trials(scorer, trials, seg_len) -> float:
    correct = 0
    for source, start, imposters, order in trials:
        starts = [start] + list(imposters)
        matched_position = int(np.nonzero(order == 0)[0][0])
        env_items = [source.env_window(starts[j], seg_len) for j in order]
        scores = np.asarray(scorer(source.eeg_window(start, seg_len), env_items))
        correct += int(np.argmax(scores)) == matched_position
    return correct / len(trials)


# ---------------------------------------------------------------------------
# In-memory synthetic cohorts (same path the disk pipeline takes, minus I/O)


@dataclass
class BandCohort:
    train: PairedDataset
    heldout: PairedDataset


def synth_band_cohort(params: CohortParams, cfg: PipelineConfig) -> BandCohort:
    """Generate a cohort and band-preprocess it without touching disk.

    Data is held at f32 like the on-disk tensors, so in-memory runs and
    CLI runs see bit-identical inputs.
    """
    from .synthgen import _participant_seed  # same derivation as generate_cohort

    params.validate()
    ratio = paired_ratio(cfg)
    splits = {"train": ([], []), "heldout": ([], [])}
    total = params.n_train + params.n_heldout
    for i in range(total):
        pid = f"p{i:03d}"
        split = "train" if i < params.n_train else "heldout"
        env = synth_envelope(params.duration_s, params.rate_hz, _participant_seed(params.seed, i, 0))
        eeg = synth_eeg(env, participant_config(params, i))
        eeg32 = MultichannelSignal(data=eeg.data.astype(np.float32), rate_hz=eeg.rate_hz)
        env32 = Envelope(data=env.data.astype(np.float32), rate_hz=env.rate_hz)
        lf_list, gamma_list = splits[split]
        for band, bucket in (("lf", lf_list), ("gamma", gamma_list)):
            eeg_b, env_b = band_preprocess(eeg32, env32, band, cfg)
            n = min(eeg_b.n_samples, env_b.n_samples)
            bucket.append(
                BandRecording(
                    participant=pid,
                    eeg=eeg_b.data[:, :n].astype(np.float32),
                    envelope=env_b.data[:n].astype(np.float32),
                    rate_hz=eeg_b.rate_hz,
                )
            )
    return BandCohort(
        train=PairedDataset(lf=splits["train"][0], gamma=splits["train"][1], ratio=ratio),
        heldout=PairedDataset(lf=splits["heldout"][0], gamma=splits["heldout"][1], ratio=ratio),
    )


@dataclass
class EndToEndResult:
    report: evaluation.EvaluationReport
    lda: composite.LdaModel
    lf_checkpoints: list[Checkpoint]
    gamma_checkpoints: list[Checkpoint]
    logit_pairs: list[decoder.LogitPair]


def run_end_to_end(
    params: CohortParams,
    cfg: PipelineConfig,
    n_instances: int = 1,
    tasks=evaluation.TASKS,
) -> EndToEndResult:
    """synth -> preprocess -> train both bands -> fit LDA -> evaluate, in memory."""
    cohort = synth_band_cohort(params, cfg)
    lf_ckpts = training.train_ensemble(cohort.train.lf, "lf", cfg.train, n_instances)
    gamma_ckpts = training.train_ensemble(cohort.train.gamma, "gamma", cfg.train, n_instances)
    lda, pairs = fit_composite(cohort.train, lf_ckpts, gamma_ckpts, cfg)
    report = evaluate_manifest(
        cohort.heldout,
        {"lf": lf_ckpts, "gamma": gamma_ckpts},
        lda,
        tasks=tasks,
        config=cfg,
        seed=cfg.seed,
    )
    return EndToEndResult(
        report=report,
        lda=lda,
        lf_checkpoints=lf_ckpts,
        gamma_checkpoints=gamma_ckpts,
        logit_pairs=pairs,
    )


# ---------------------------------------------------------------------------
# TRF / GFP band analysis (Figure-1-style curves)


TRF_PRESETS = {
    "lf": {"band_hz": None, "lags": trf.LF_LAG_WINDOW, "background": trf.LF_BACKGROUND_WINDOW},
    "lower-gamma": {
        "band_hz": "gamma_band_hz",
        "lags": trf.GAMMA_LAG_WINDOW,
        "background": trf.GAMMA_BACKGROUND_WINDOW,
    },
    "high-gamma": {
        "band_hz": "alt_gamma_band_hz",
        "lags": trf.GAMMA_LAG_WINDOW,
        "background": trf.GAMMA_BACKGROUND_WINDOW,
    },
}


def trf_analysis(
    recordings: list[tuple[MultichannelSignal, Envelope]],
    preset: str,
    cfg: PipelineConfig,
    ridge_lambda: float | None = None,
) -> tuple[trf.GfpCurve, dict]:
    """Average TRF across recordings for one band preset; normalized GFP + summary.

    EEG and envelope are centered before the lagged regression (the ridge
    formula carries no intercept).
    """
    if preset not in TRF_PRESETS:
        raise PipelineError(f"unknown TRF preset {preset!r}; choose from {sorted(TRF_PRESETS)}")
    spec = TRF_PRESETS[preset]
    lag_lo, lag_hi = spec["lags"]
    weights_sum = None
    lag_axis = None
    rate = cfg.lf_rate_hz if preset == "lf" else cfg.gamma_rate_hz
    for eeg, env in recordings:
        if spec["band_hz"] is None:
            eeg_b, env_b = resample(eeg, rate), resample_envelope(env, rate)
        else:
            low, high = getattr(cfg, spec["band_hz"])
            eeg_b = resample(filter_zero_phase(eeg, design_bandpass(low, high, 3, eeg.rate_hz)), rate)
            env_b = resample_envelope(env, rate)
        n = min(eeg_b.n_samples, env_b.n_samples)
        eeg_c = MultichannelSignal(
            data=eeg_b.data[:, :n] - eeg_b.data[:, :n].mean(axis=1, keepdims=True), rate_hz=rate
        )
        env_c = Envelope(data=env_b.data[:n] - env_b.data[:n].mean(), rate_hz=rate)
        lam = (
            ridge_lambda
            if ridge_lambda is not None
            else trf.select_ridge_lambda(env_c, eeg_c, lag_lo, lag_hi)
        )
        fitted = trf.fit_trf(env_c, eeg_c, lag_lo, lag_hi, lam)
        weights_sum = fitted.weights if weights_sum is None else weights_sum + fitted.weights
        lag_axis = fitted.lag_axis_s
    mean_trf = trf.Trf(
        weights=weights_sum / len(recordings), lag_axis_s=lag_axis, rate_hz=rate
    )
    curve = trf.normalize_gfp(trf.gfp(mean_trf), spec["background"])
    summary = {
        "band": preset,
        "peak_snr": curve.peak_snr,
        "peak_lag_s": curve.peak_lag_s,
    }
    return curve, summary


def manifest_raw_recordings(
    manifest: DatasetManifest, split: str = "train"
) -> list[tuple[MultichannelSignal, Envelope]]:
    out = []
    for participant in manifest.by_split(split):
        for rec in participant.recordings:
            out.append(load_raw_recording(manifest, rec))
    return out


# ---------------------------------------------------------------------------
# Plot-data exports (CSV/JSON consumed by external plotting)


def gfp_csv(curve: trf.GfpCurve) -> str:
    lines = ["lag_s,gfp"]
    for lag, value in zip(curve.lag_axis_s, curve.values):
        lines.append(f"{lag:.9g},{value:.9g}")
    return "\n".join(lines) + "\n"


def logit_pairs_csv(pairs: list[decoder.LogitPair]) -> str:
    lines = ["lf_logit,gamma_logit,label"]
    for p in pairs:
        label = "" if p.label is None else int(p.label)
        lines.append(f"{p.lf_logit:.9g},{p.gamma_logit:.9g},{label}")
    return "\n".join(lines) + "\n"
