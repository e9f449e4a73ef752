"""Bit-exact on-disk formats: tensors, dataset manifests, checkpoints, run config.

Tensor files: 4-byte magic ``MMT1``, little-endian u32 header length, a JSON
header ``{"dtype", "shape", "order": "row-major"}``, then the raw little-endian
payload. Checkpoints use the same container layout (magic ``MMC1``) with all
parameters stored as f64 regardless of compute precision. Manifests and configs
are JSON; all manifest paths are relative to the manifest's directory.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .config import PipelineConfig, config_from_dict, config_to_dict

TENSOR_MAGIC = b"MMT1"
CHECKPOINT_MAGIC = b"MMC1"
CHECKPOINT_FORMAT_VERSION = 1

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class StorageError(Exception):
    """Base class for on-disk format errors; carries the file path and byte offset."""

    def __init__(self, message: str, path: Any = None, offset: int | None = None):
        self.path = None if path is None else str(path)
        self.offset = offset
        detail = f" [file={self.path}, offset={self.offset}]" if path is not None else ""
        super().__init__(message + detail)


class MagicError(StorageError):
    """File does not start with the expected magic bytes."""


class HeaderError(StorageError):
    """Header is not valid JSON or declares an inconsistent layout."""


class TruncatedPayloadError(StorageError):
    """Payload is shorter than the header-declared element count."""


class VersionError(StorageError):
    """Checkpoint format version differs from this implementation's."""


class ManifestError(StorageError):
    """Dataset manifest violates its invariants."""


# ---------------------------------------------------------------------------
# Tensor files


@dataclass
class TensorFile:
    dtype: str
    shape: tuple[int, ...]
    values: np.ndarray  # row-major, native-endian copy of the payload


def _check_shape(shape: tuple[int, ...], path: Any) -> None:
    if len(shape) == 0:
        raise HeaderError("shape must be non-empty", path, 8)
    if any((not isinstance(d, int)) or isinstance(d, bool) or d <= 0 for d in shape):
        raise HeaderError(f"shape dimensions must be positive integers, got {shape}", path, 8)


def write_tensor(path: str | Path, values: np.ndarray, dtype: str = "f64") -> None:
    """Write ``values`` as a self-describing row-major little-endian tensor file."""
    if dtype not in _DTYPES:
        raise HeaderError(f"unsupported dtype tag {dtype!r}", path)
    arr = np.ascontiguousarray(np.asarray(values), dtype=_DTYPES[dtype])
    _check_shape(tuple(int(d) for d in arr.shape), path)
    header = json.dumps(
        {"dtype": dtype, "shape": list(arr.shape), "order": "row-major"}
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def _read_container(path: str | Path, magic: bytes) -> tuple[dict, bytes]:
    """Read a magic/header/payload container; returns (header dict, payload bytes)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read file: {exc}", path) from exc
    if len(raw) < 8 or raw[:4] != magic:
        raise MagicError(
            f"expected magic {magic!r}, found {raw[:4]!r}", path, 0
        )
    (header_len,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + header_len:
        raise HeaderError(
            f"header declares {header_len} bytes, file has {len(raw) - 8}", path, 8
        )
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"header is not valid JSON: {exc}", path, 8) from exc
    if not isinstance(header, dict):
        raise HeaderError("header must be a JSON object", path, 8)
    return header, raw[8 + header_len :]


def read_tensor(path: str | Path) -> TensorFile:
    """Read a tensor file; the inverse of :func:`write_tensor`, bit-exact."""
    header, payload = _read_container(path, TENSOR_MAGIC)
    dtype = header.get("dtype")
    if dtype not in _DTYPES:
        raise HeaderError(f"unsupported dtype tag {dtype!r}", path, 8)
    if header.get("order") != "row-major":
        raise HeaderError(f"unsupported order {header.get('order')!r}", path, 8)
    shape = header.get("shape")
    if not isinstance(shape, list):
        raise HeaderError("shape must be a list", path, 8)
    shape = tuple(shape)
    _check_shape(shape, path)
    np_dtype = _DTYPES[dtype]
    expected = int(np.prod(shape)) * np_dtype.itemsize
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"payload has {len(payload)} bytes, header declares {expected}",
            path,
            offset=8 + len(payload),
        )
    if len(payload) > expected:
        raise HeaderError(
            f"payload has {len(payload)} bytes, header declares {expected}",
            path,
            offset=8 + expected,
        )
    values = np.frombuffer(payload, dtype=np_dtype).reshape(shape).copy()
    return TensorFile(dtype=dtype, shape=shape, values=values)


def read_tensor_header(path: str | Path) -> tuple[str, tuple[int, ...]]:
    """Parse and validate a tensor file without materializing the payload."""
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8 or head[:4] != TENSOR_MAGIC:
            raise MagicError(f"expected magic {TENSOR_MAGIC!r}, found {head[:4]!r}", path, 0)
        (header_len,) = struct.unpack("<I", head[4:8])
        header_bytes = fh.read(header_len)
    if len(header_bytes) < header_len:
        raise HeaderError("truncated header", path, 8)
    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"header is not valid JSON: {exc}", path, 8) from exc
    dtype = header.get("dtype")
    if dtype not in _DTYPES:
        raise HeaderError(f"unsupported dtype tag {dtype!r}", path, 8)
    shape = header.get("shape")
    if not isinstance(shape, list):
        raise HeaderError("shape must be a list", path, 8)
    shape = tuple(shape)
    _check_shape(shape, path)
    expected = int(np.prod(shape)) * _DTYPES[dtype].itemsize
    actual = os.path.getsize(path) - 8 - header_len
    if actual < expected:
        raise TruncatedPayloadError(
            f"payload has {actual} bytes, header declares {expected}", path, 8 + max(actual, 0)
        )
    if actual > expected:
        raise HeaderError(
            f"payload has {actual} bytes, header declares {expected}", path, 8 + expected
        )
    return dtype, shape


# ---------------------------------------------------------------------------
# Dataset manifests


@dataclass
class Recording:
    eeg_path: str
    envelope_path: str
    eeg_rate_hz: float
    envelope_rate_hz: float


@dataclass
class Participant:
    id: str
    split: str  # "train" | "heldout"
    recordings: list[Recording]


@dataclass
class DatasetManifest:
    participants: list[Participant]
    root: Path  # directory the manifest was loaded from; resolves relative paths

    def by_split(self, split: str) -> list[Participant]:
        return [p for p in self.participants if p.split == split]

    def split_counts(self) -> tuple[int, int]:
        return len(self.by_split("train")), len(self.by_split("heldout"))

    def resolve(self, rel: str) -> Path:
        return self.root / rel


def _duration_mismatch(n_a: int, rate_a: float, n_b: int, rate_b: float) -> bool:
    # Durations must agree within one sample at the coarser rate.
    return abs(n_a / rate_a - n_b / rate_b) > 1.0 / min(rate_a, rate_b)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and fully validate a dataset manifest."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ManifestError(f"cannot read manifest: {exc}", path) from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}", path) from exc
    root = path.parent
    raw_participants = data.get("participants")
    if not isinstance(raw_participants, list) or not raw_participants:
        raise ManifestError("manifest must list at least one participant", path)
    participants: list[Participant] = []
    seen_ids: set[str] = set()
    for entry in raw_participants:
        pid = entry.get("id")
        split = entry.get("split")
        if not isinstance(pid, str) or not pid:
            raise ManifestError("participant id must be a non-empty string", path)
        if pid in seen_ids:
            raise ManifestError(f"duplicate participant id {pid!r}", path)
        seen_ids.add(pid)
        if split not in ("train", "heldout"):
            raise ManifestError(f"participant {pid!r}: unknown split tag {split!r}", path)
        recs_raw = entry.get("recordings")
        if not isinstance(recs_raw, list) or not recs_raw:
            raise ManifestError(f"participant {pid!r} has no recordings", path)
        recordings = []
        for rec in recs_raw:
            recording = Recording(
                eeg_path=rec["eeg"],
                envelope_path=rec["envelope"],
                eeg_rate_hz=float(rec["eeg_rate_hz"]),
                envelope_rate_hz=float(rec["envelope_rate_hz"]),
            )
            if recording.eeg_rate_hz <= 0 or recording.envelope_rate_hz <= 0:
                raise ManifestError(f"participant {pid!r}: rates must be positive", path)
            for rel in (recording.eeg_path, recording.envelope_path):
                target = root / rel
                if not target.is_file():
                    raise ManifestError(f"referenced file missing: {rel}", path)
            _, eeg_shape = read_tensor_header(root / recording.eeg_path)
            _, env_shape = read_tensor_header(root / recording.envelope_path)
            if len(eeg_shape) != 2:
                raise ManifestError(
                    f"EEG tensor must be channels x samples, got shape {eeg_shape}", path
                )
            if len(env_shape) != 1:
                raise ManifestError(
                    f"envelope tensor must be 1-D, got shape {env_shape}", path
                )
            if _duration_mismatch(
                eeg_shape[1], recording.eeg_rate_hz, env_shape[0], recording.envelope_rate_hz
            ):
                raise ManifestError(
                    f"participant {pid!r}: EEG covers {eeg_shape[1] / recording.eeg_rate_hz:.3f} s "
                    f"but envelope covers {env_shape[0] / recording.envelope_rate_hz:.3f} s",
                    path,
                )
            recordings.append(recording)
        participants.append(Participant(id=pid, split=split, recordings=recordings))
    return DatasetManifest(participants=participants, root=root)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write a manifest JSON; paths stay relative to the manifest directory."""
    doc = {
        "participants": [
            {
                "id": p.id,
                "split": p.split,
                "recordings": [
                    {
                        "eeg": r.eeg_path,
                        "envelope": r.envelope_path,
                        "eeg_rate_hz": r.eeg_rate_hz,
                        "envelope_rate_hz": r.envelope_rate_hz,
                    }
                    for r in p.recordings
                ],
            }
            for p in manifest.participants
        ]
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    """A trained decoder instance: parameters plus provenance."""

    band: str
    params: Any  # decoder.DecoderParameters
    training_history: dict = field(default_factory=dict)
    rng_seed: int = 0
    format_version: int = CHECKPOINT_FORMAT_VERSION


def save_checkpoint(path: str | Path, checkpoint: Checkpoint) -> None:
    """Write a checkpoint; parameters stored f64 regardless of compute precision."""
    named = checkpoint.params.to_named()
    tensors = []
    payloads = []
    for name in sorted(named):
        arr = np.ascontiguousarray(np.asarray(named[name], dtype="<f8"))
        tensors.append({"name": name, "dtype": "f64", "shape": list(arr.shape)})
        payloads.append(arr.tobytes(order="C"))
    header = json.dumps(
        {
            "format_version": checkpoint.format_version,
            "band": checkpoint.band,
            "rng_seed": checkpoint.rng_seed,
            "dilations": list(getattr(checkpoint.params, "dilations", (1, 3, 9))),
            "training_history": checkpoint.training_history,
            "tensors": tensors,
        }
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for chunk in payloads:
            fh.write(chunk)


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Load a checkpoint; version-checked, bit-exact parameter round-trip."""
    from .decoder import params_from_named  # deferred to keep storage import-light

    header, payload = _read_container(path, CHECKPOINT_MAGIC)
    version = header.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise VersionError(
            f"checkpoint format_version {version} unsupported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})",
            path,
            8,
        )
    named: dict[str, np.ndarray] = {}
    offset = 0
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        nbytes = int(np.prod(shape)) * 8 if shape else 8
        chunk = payload[offset : offset + nbytes]
        if len(chunk) < nbytes:
            raise TruncatedPayloadError(
                f"tensor {spec['name']!r} truncated", path, offset=offset
            )
        named[spec["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise HeaderError(
            f"{len(payload) - offset} trailing bytes after declared tensors", path, offset
        )
    params = params_from_named(
        header["band"], named, dilations=tuple(header.get("dilations", (1, 3, 9)))
    )
    return Checkpoint(
        band=header["band"],
        params=params,
        training_history=header.get("training_history", {}),
        rng_seed=int(header.get("rng_seed", 0)),
        format_version=version,
    )


# ---------------------------------------------------------------------------
# Pipeline config files


def load_config(path: str | Path) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise StorageError(f"cannot read config: {exc}", path) from exc
    except json.JSONDecodeError as exc:
        raise HeaderError(f"config is not valid JSON: {exc}", path) from exc
    return config_from_dict(data)


def save_config(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n")
