"""Match-mismatch training: random imposter sampling, balanced batches,
plateau LR scheduling, early stopping, and seed-derived ensembles.

Mismatched segments are drawn uniformly from the same recording, never
overlapping the matched window, and are re-drawn every epoch (random-mismatch
training). Validation is the trailing fraction of every training recording,
snapped to the segment grid, with its own frozen imposters so early stopping
compares like with like across epochs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import decoder
from .config import TrainConfig
from .storage import Checkpoint, DatasetManifest, read_tensor

__all__ = [
    "TrainConfig",
    "TrainHistory",
    "BandRecording",
    "SegmentRef",
    "TrainSplit",
    "TrainingDivergedError",
    "TrainingError",
    "load_band_recordings",
    "sample_mismatch",
    "make_batch",
    "build_splits",
    "train_decoder",
    "train_ensemble",
]


class TrainingError(ValueError):
    """Invalid training inputs (empty splits, short recordings, rate clashes)."""


class TrainingDivergedError(RuntimeError):
    """Non-finite loss encountered; carries the epoch/batch where it happened."""

    def __init__(self, epoch: int, batch_index: int, loss: float):
        self.epoch = epoch
        self.batch_index = batch_index
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch_index}")


@dataclass
class BandRecording:
    """One recording already preprocessed to a single band's rate."""

    participant: str
    eeg: np.ndarray  # (channels, samples)
    envelope: np.ndarray  # (samples,)
    rate_hz: float

    def __post_init__(self):
        self.eeg = np.asarray(self.eeg)
        self.envelope = np.asarray(self.envelope).reshape(-1)
        if self.eeg.ndim != 2:
            raise TrainingError("eeg must be channels x samples")
        if self.eeg.shape[1] != self.envelope.size:
            raise TrainingError("eeg and envelope lengths differ")

    @property
    def n_samples(self) -> int:
        return self.eeg.shape[1]


@dataclass(frozen=True)
class SegmentRef:
    """A matched window: recording index, start sample, sampling region bounds."""

    rec: int
    start: int
    region: tuple[int, int]  # imposters for this segment are drawn inside here


@dataclass
class TrainSplit:
    recordings: list[BandRecording]
    segments: list[SegmentRef]


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainHistory":
        return cls(**data)


def load_band_recordings(manifest: DatasetManifest, split: str) -> list[BandRecording]:
    """Materialize one split's recordings from a band-preprocessed manifest."""
    recordings = []
    for participant in manifest.by_split(split):
        for rec in participant.recordings:
            if abs(rec.eeg_rate_hz - rec.envelope_rate_hz) > 1e-9:
                raise TrainingError(
                    f"{participant.id}: band recordings need matching EEG/envelope rates"
                )
            eeg = read_tensor(manifest.resolve(rec.eeg_path)).values
            env = read_tensor(manifest.resolve(rec.envelope_path)).values
            recordings.append(
                BandRecording(
                    participant=participant.id,
                    eeg=eeg,
                    envelope=env,
                    rate_hz=rec.eeg_rate_hz,
                )
            )
    return recordings


def sample_mismatch(
    n_samples: int,
    matched_start: int,
    segment_len: int,
    rng: np.random.Generator,
    region: tuple[int, int] | None = None,
    policy: str = "random",
) -> int:
    """Start index of a window disjoint from the matched one, in the same recording.

    "random" draws uniformly over every valid start inside ``region``;
    "fixed_offset" takes the window one segment after the matched one (before,
    when there is no room after).
    """
    lo, hi = region if region is not None else (0, n_samples)
    last = hi - segment_len
    if policy == "fixed_offset":
        for cand in (matched_start + segment_len, matched_start - segment_len):
            if lo <= cand <= last:
                return cand
        raise TrainingError("no room for a fixed-offset mismatch window")
    if policy != "random":
        raise TrainingError(f"unknown mismatch policy {policy!r}")
    ex_lo = max(lo, matched_start - segment_len + 1)
    ex_hi = min(last, matched_start + segment_len - 1)
    n_excluded = max(0, ex_hi - ex_lo + 1)
    n_valid = (last - lo + 1) - n_excluded
    if n_valid <= 0:
        raise TrainingError("recording region too short for a disjoint mismatch window")
    s = lo + int(rng.integers(n_valid))
    if n_excluded and s >= ex_lo:
        s += n_excluded
    return s


@dataclass
class Batch:
    eeg: np.ndarray  # (B, channels, segment)
    env: np.ndarray  # (B, segment)
    labels: np.ndarray  # (B,) in {0, 1}


def make_batch(
    split: TrainSplit,
    config: TrainConfig,
    rng: np.random.Generator,
    matched: list[SegmentRef] | None = None,
    segment_len: int | None = None,
) -> Batch:
    """Balanced batch: each matched window plus one imposter pairing of the
    same EEG window against a mismatched envelope window."""
    if not split.segments:
        raise TrainingError("split has no segments")
    rate = split.recordings[0].rate_hz
    if segment_len is None:
        segment_len = int(round(config.segment_seconds * rate))
    if matched is None:
        half = config.batch_size // 2
        if half <= len(split.segments):
            idx = rng.choice(len(split.segments), size=half, replace=False)
        else:
            idx = rng.integers(len(split.segments), size=half)
        matched = [split.segments[int(i)] for i in idx]
    eeg_items, env_items, labels = [], [], []
    for ref in matched:
        rec = split.recordings[ref.rec]
        eeg_win = rec.eeg[:, ref.start : ref.start + segment_len]
        env_win = rec.envelope[ref.start : ref.start + segment_len]
        imposter = sample_mismatch(
            rec.n_samples, ref.start, segment_len, rng, ref.region, config.mismatch_policy
        )
        eeg_items.append(eeg_win)
        env_items.append(env_win)
        labels.append(1)
        eeg_items.append(eeg_win)
        env_items.append(rec.envelope[imposter : imposter + segment_len])
        labels.append(0)
    return Batch(
        eeg=np.stack(eeg_items),
        env=np.stack(env_items),
        labels=np.asarray(labels, dtype=np.int64),
    )


def build_splits(
    recordings: list[BandRecording], config: TrainConfig
) -> tuple[TrainSplit, TrainSplit]:
    """Carve train/validation matched-segment grids out of each recording.

    The trailing ``val_fraction`` of every recording (snapped to the segment
    grid) is validation; imposter sampling is confined to each segment's own
    region so no envelope material leaks across the boundary.
    """
    if not recordings:
        raise TrainingError("no recordings to train on")
    rate = recordings[0].rate_hz
    for rec in recordings:
        if abs(rec.rate_hz - rate) > 1e-9:
            raise TrainingError("recordings have inconsistent rates")
    segment_len = int(round(config.segment_seconds * rate))
    train_refs, val_refs = [], []
    for r, rec in enumerate(recordings):
        n_seg = rec.n_samples // segment_len
        n_train = int(np.floor(n_seg * (1.0 - config.val_fraction)))
        n_val = n_seg - n_train
        if n_train < 2 or n_val < 2:
            raise TrainingError(
                f"recording {r} has {n_seg} segments; too few for a "
                f"{1 - config.val_fraction:.0%}/{config.val_fraction:.0%} split with imposters"
            )
        train_region = (0, n_train * segment_len)
        val_region = (n_train * segment_len, n_seg * segment_len)
        for k in range(n_train):
            train_refs.append(SegmentRef(rec=r, start=k * segment_len, region=train_region))
        for k in range(n_train, n_seg):
            val_refs.append(SegmentRef(rec=r, start=k * segment_len, region=val_region))
    return TrainSplit(recordings, train_refs), TrainSplit(recordings, val_refs)


def _as_recordings(dataset, split: str = "train") -> list[BandRecording]:
    if isinstance(dataset, DatasetManifest):
        return load_band_recordings(dataset, split)
    return list(dataset)


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean((logits > 0).astype(np.int64) == labels))


def train_decoder(dataset, band: str, config: TrainConfig) -> tuple[Checkpoint, TrainHistory]:
    """Full training run; returns the best-validation-loss parameters.

    ``dataset`` is either a band-preprocessed DatasetManifest (its "train"
    split is used) or a list of BandRecording. Deterministic given
    (config.seed, config.instance) under single-threaded reduction order.
    """
    config.validate()
    recordings = _as_recordings(dataset, "train")
    train_split, val_split = build_splits(recordings, config)
    rate = recordings[0].rate_hz
    segment_len = int(round(config.segment_seconds * rate))
    n_channels = recordings[0].eeg.shape[0]
    for rec in recordings:
        if rec.eeg.shape[0] != n_channels:
            raise TrainingError("recordings have inconsistent channel counts")

    root = np.random.SeedSequence([int(config.seed), int(config.instance)])
    init_ss, val_ss, train_ss = root.spawn(3)

    arch = dataclasses.replace(decoder.Architecture(), n_channels=n_channels)
    params64 = decoder.init_params(init_ss, band, arch)
    dtype = np.float32 if config.dtype == "f32" else np.float64
    params = params64.astype(dtype)
    state = decoder.init_adam(
        params, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps
    )

    # Validation pairs are drawn once so val loss is comparable across epochs.
    val_batch = make_batch(
        val_split,
        config,
        np.random.default_rng(val_ss),
        matched=val_split.segments,
        segment_len=segment_len,
    )
    val_eeg = val_batch.eeg.astype(dtype)
    val_env = val_batch.env.astype(dtype)

    history = TrainHistory()
    best_val = np.inf
    best_params = params64
    es_wait = 0
    sched_wait = 0
    half = config.batch_size // 2
    order_rng_seq = train_ss

    for epoch in range(config.max_epochs):
        epoch_rng = np.random.default_rng(order_rng_seq.spawn(1)[0])
        order = epoch_rng.permutation(len(train_split.segments))
        epoch_loss = 0.0
        epoch_correct = 0.0
        n_items = 0
        for b0 in range(0, len(order), half):
            chunk = [train_split.segments[i] for i in order[b0 : b0 + half]]
            batch = make_batch(train_split, config, epoch_rng, matched=chunk, segment_len=segment_len)
            grads, loss, logits = decoder.backward(
                params,
                batch.eeg.astype(dtype),
                batch.env.astype(dtype),
                batch.labels,
                return_logits=True,
            )
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, b0 // half, loss)
            epoch_loss += loss * batch.labels.size
            epoch_correct += _accuracy(logits, batch.labels) * batch.labels.size
            n_items += batch.labels.size
            params, state = decoder.adam_step(params, grads, state)

        val_logits = decoder.forward_batch(params, val_eeg, val_env)
        val_loss = decoder.bce_loss(val_logits, val_batch.labels)
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(epoch, -1, val_loss)

        history.train_loss.append(epoch_loss / n_items)
        history.train_acc.append(epoch_correct / n_items)
        history.val_loss.append(float(val_loss))
        history.val_acc.append(_accuracy(val_logits, val_batch.labels))
        history.lr.append(state.lr)
        history.stopped_epoch = epoch

        if val_loss < best_val:
            best_val = val_loss
            best_params = params.astype(np.float64)
            history.best_epoch = epoch
            es_wait = 0
            sched_wait = 0
        else:
            es_wait += 1
            sched_wait += 1
            if sched_wait >= config.scheduler_patience and state.lr > config.min_lr:
                state = dataclasses.replace(state, lr=max(state.lr / 2.0, config.min_lr))
                sched_wait = 0
            if es_wait >= config.early_stop_patience:
                break

    checkpoint = Checkpoint(
        band=band,
        params=best_params,
        training_history=history.to_dict(),
        rng_seed=config.seed,
    )
    return checkpoint, history


def train_ensemble(dataset, band: str, config: TrainConfig, n_instances: int) -> list[Checkpoint]:
    """Train ``n_instances`` decoders; instance i runs with stream (seed, i)."""
    if n_instances < 1:
        raise TrainingError("n_instances must be >= 1")
    recordings = _as_recordings(dataset, "train")
    checkpoints = []
    for i in range(n_instances):
        ckpt, _ = train_decoder(recordings, band, dataclasses.replace(config, instance=i))
        checkpoints.append(ckpt)
    return checkpoints
