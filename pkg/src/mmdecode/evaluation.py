"""Evaluation tasks and statistics: absolute decoding, k-imposter selection,
per-participant aggregation, and confidence intervals on cohort means.

A "trial" pairs one EEG segment with its matched envelope window plus k
imposter windows from the same recording; the decoder under test must rank
the matched window highest. Scorers are batched callables
``scorer(eeg_item, [env_items]) -> scores`` so decoder forwards can vectorize
over candidates; argmax ties break to the lowest index, matching the
composite selector's rule.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.stats


class EvaluationError(ValueError):
    """Empty inputs or impossible trial construction."""


# ---------------------------------------------------------------------------
# Task primitives


def absolute_accuracy(
    scorer: Callable, pairs: Sequence[tuple], threshold: float = 0.0
) -> float:
    """Fraction of (item, label) pairs the thresholded scorer classifies correctly.

    Use threshold 0 for logit scorers and 0.5 for probability scorers.
    """
    if len(pairs) == 0:
        raise EvaluationError("no pairs to score")
    correct = 0
    for item, label in pairs:
        predicted = 1 if scorer(item) > threshold else 0
        correct += predicted == int(label)
    return correct / len(pairs)


@dataclass
class RecordingView:
    """Single-band trial source: windows indexed in its own samples."""

    eeg: np.ndarray  # (channels, samples)
    envelope: np.ndarray  # (samples,)
    participant: str = ""

    @property
    def n_samples(self) -> int:
        return self.eeg.shape[1]

    def eeg_window(self, start: int, length: int):
        return self.eeg[:, start : start + length]

    def env_window(self, start: int, length: int):
        return self.envelope[start : start + length]


def _sample_disjoint_start(
    n_samples: int, length: int, taken: list[int], rng: np.random.Generator
) -> int:
    """Uniform start whose window overlaps none of the windows in ``taken``."""
    last = n_samples - length
    if last < 0:
        raise EvaluationError("recording shorter than one window")
    valid = np.ones(last + 1, dtype=bool)
    for s in taken:
        valid[max(0, s - length + 1) : min(last, s + length - 1) + 1] = False
    starts = np.nonzero(valid)[0]
    if starts.size == 0:
        raise EvaluationError("recording too short for another disjoint window")
    return int(starts[rng.integers(starts.size)])


def draw_imposters(
    source,
    matched_start: int,
    segment_len: int,
    k: int,
    policy: str,
    rng: np.random.Generator,
) -> list[int]:
    """k pairwise-disjoint imposter starts, all disjoint from the matched window."""
    if policy == "random":
        taken = [matched_start]
        for _ in range(k):
            s = _sample_disjoint_start(source.n_samples, segment_len, taken, rng)
            taken.append(s)
        return taken[1:]
    if policy == "fixed_offset":
        last = source.n_samples - segment_len
        offsets = [1, -1, 2, -2, 3, -3, 4, -4]
        starts = []
        for off in offsets:
            cand = matched_start + off * segment_len
            if 0 <= cand <= last:
                starts.append(cand)
            if len(starts) == k:
                return starts
        raise EvaluationError(f"not enough room for {k} fixed-offset imposters")
    raise EvaluationError(f"unknown imposter policy {policy!r}")


def imposter_accuracy(
    scorer: Callable,
    segments: Sequence[tuple],
    k_imposters: int,
    segment_len: int,
    policy: str = "random",
    rng: np.random.Generator | None = None,
) -> float:
    """1-of-(k+1) selection accuracy over matched segments.

    ``segments`` holds (source, matched_start) pairs; for each one, k imposter
    envelope windows are drawn from the same source, the candidate order is
    shuffled, and the trial counts as correct when the matched candidate gets
    the (lowest-index tie-broken) argmax score.
    """
    if len(segments) == 0:
        raise EvaluationError("no segments to evaluate")
    if k_imposters < 1:
        raise EvaluationError("need at least one imposter")
    rng = np.random.default_rng(0) if rng is None else rng
    correct = 0
    for source, start in segments:
        imposters = draw_imposters(source, start, segment_len, k_imposters, policy, rng)
        starts = [start] + imposters
        order = rng.permutation(len(starts))
        matched_position = int(np.nonzero(order == 0)[0][0])
        env_items = [source.env_window(starts[j], segment_len) for j in order]
        scores = np.asarray(scorer(source.eeg_window(start, segment_len), env_items))
        predicted = int(np.argmax(scores))  # np.argmax ties -> lowest index
        correct += predicted == matched_position
    return correct / len(segments)


# ---------------------------------------------------------------------------
# Statistics


def confidence_interval(
    values: Sequence[float], confidence: float = 0.95, method: str = "t"
) -> tuple[float, float]:
    """(mean, margin) of the cohort mean; margin from the t (default) or
    normal quantile on the standard error."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        raise EvaluationError("confidence interval needs at least 2 values")
    if not (0 < confidence < 1):
        raise EvaluationError("confidence must lie in (0, 1)")
    mean = float(np.mean(arr))
    se = float(np.std(arr, ddof=1) / np.sqrt(arr.size))
    q = 0.5 + confidence / 2.0
    if method == "t":
        crit = float(scipy.stats.t.ppf(q, arr.size - 1))
    elif method == "normal":
        crit = float(scipy.stats.norm.ppf(q))
    else:
        raise EvaluationError(f"unknown CI method {method!r}")
    return mean, crit * se


def format_mean_margin(mean: float, margin: float) -> str:
    """Render in the tables' percentage-point style, e.g. '76.18 ± 5.37'."""
    return f"{mean:.2f} ± {margin:.2f}"


# ---------------------------------------------------------------------------
# Reports


TASKS = ("absolute", "imposter_1", "imposter_4")
DECODERS = ("gamma", "lf", "composite")


@dataclass
class EvaluationReport:
    """Per-participant and cohort accuracies (percentage points) per task."""

    tasks: dict  # task -> decoder -> {per_participant, mean, margin, rendered}
    n_segments: dict  # participant -> trial count
    ci_method: str = "t"
    seed: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "tasks": self.tasks,
            "n_segments": self.n_segments,
            "ci_method": self.ci_method,
            "seed": self.seed,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "EvaluationReport":
        return cls(
            tasks=data["tasks"],
            n_segments=data["n_segments"],
            ci_method=data.get("ci_method", "t"),
            seed=data.get("seed", 0),
            config=data.get("config", {}),
        )

    def accuracy(self, task: str, decoder_name: str) -> float:
        return self.tasks[task][decoder_name]["mean"]

    def per_participant_rows(self) -> list[tuple[str, str, str, float]]:
        rows = []
        for task, per_decoder in self.tasks.items():
            for name, cell in per_decoder.items():
                for pid, acc in cell["per_participant"].items():
                    rows.append((pid, task, name, acc))
        return rows

    def per_participant_csv(self) -> str:
        lines = ["participant,task,decoder,accuracy_pct"]
        for pid, task, name, acc in self.per_participant_rows():
            lines.append(f"{pid},{task},{name},{acc:.6f}")
        return "\n".join(lines) + "\n"


def aggregate_cell(per_participant: dict[str, float], ci_method: str) -> dict:
    """Cohort cell from per-participant accuracies given in percentage points.

    A single-participant cohort has no interval; its margin is reported null.
    """
    values = list(per_participant.values())
    if len(values) >= 2:
        mean, margin = confidence_interval(values, method=ci_method)
        rendered = format_mean_margin(mean, margin)
    else:
        mean, margin = float(values[0]), None
        rendered = f"{mean:.2f}"
    return {
        "per_participant": per_participant,
        "mean": mean,
        "margin": margin,
        "rendered": rendered,
    }


def build_report(manifest, checkpoints: dict, lda, tasks=TASKS, config=None, seed: int = 0):
    """Evaluate every decoder on the manifest's heldout participants.

    ``checkpoints`` maps band -> list of Checkpoints (singletons are fine);
    ``lda`` fuses the two bands' (possibly ensemble-averaged) logits. Thin
    wrapper over the pipeline's evaluation driver, kept here because reports
    are this module's surface.
    """
    from . import pipeline  # deferred: pipeline imports this module

    return pipeline.evaluate_manifest(
        manifest, checkpoints, lda, tasks=tasks, config=config, seed=seed
    )
