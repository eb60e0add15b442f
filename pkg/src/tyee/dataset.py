"""Epoching, sample caching, retrieval, and dataset splitting.

Records become fixed-length labeled samples by sliding-window epoching.
Offline-transformed samples are persisted in a content-addressed cache
keyed by the source file digest, the canonical offline pipeline, and the
epoching configuration, so any change invalidates exactly the affected
entries. Sample payloads are stored as little-endian 32-bit reals; the
same truncation is applied when the cache is disabled, making cached and
uncached datasets bit-identical.
"""

from __future__ import annotations

import bisect
import hashlib
import json
import os
import shutil
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    CacheCorrupt,
    IndexOutOfRange,
    InsufficientGroups,
    IoFailure,
    MissingLabel,
    MixedRates,
    TyeeError,
    WindowTooLong,
)
from .records import Record
from .signal_io import read_record
from .transforms import Pipeline, compile_pipeline

CACHE_FORMAT_VERSION = 1
BLOCK_MAGIC = b"TYE1"
LABEL_KIND_CLASS = 0
LABEL_KIND_VECTOR = 1

LABEL_SCHEMES = ("per_record", "per_event", "regression")
SPLIT_MODES = ("by_subject", "by_record", "by_fraction")


@dataclass(frozen=True)
class EpochSpec:
    """Sliding-window parameters, in seconds."""

    window: float
    stride: float

    def __post_init__(self):
        if self.window <= 0 or self.stride <= 0:
            raise ValueError(f"window and stride must be positive, got {self.window}, {self.stride}")

    def counts(self, rate: float) -> tuple[int, int]:
        w = round(self.window * rate)
        s = round(self.stride * rate)
        if w < 1 or s < 1:
            raise ValueError(f"window/stride too short for rate {rate} Hz")
        return w, s


@dataclass(frozen=True)
class Sample:
    """One labeled window with its provenance."""

    data: np.ndarray
    label: int | np.ndarray
    subject_id: str
    record_id: str
    window_index: int

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError(f"sample data must be channels x time, got shape {data.shape}")
        data = data.copy() if data.flags.writeable else data
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        if self.window_index < 0:
            raise ValueError("window_index must be >= 0")


@dataclass(frozen=True)
class SplitSpec:
    """How to partition samples into train/valid/test."""

    mode: str
    fractions: tuple[float, float, float]
    seed: int = 0

    def __post_init__(self):
        if self.mode not in SPLIT_MODES:
            raise ValueError(f"mode must be one of {SPLIT_MODES}, got {self.mode!r}")
        fr = tuple(float(f) for f in self.fractions)
        object.__setattr__(self, "fractions", fr)
        if len(fr) != 3 or any(f < 0 or f > 1 for f in fr):
            raise ValueError(f"fractions must be three values in [0, 1], got {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"fractions must sum to 1, got {sum(fr)}")


# --- labeling -----------------------------------------------------------------


def _label_value(text: str, classes: list[str] | None):
    if classes is not None:
        if text not in classes:
            raise MissingLabel(f"annotation label {text!r} not in configured classes {classes}")
        return classes.index(text)
    try:
        return int(text)
    except ValueError as exc:
        raise MissingLabel(
            f"annotation label {text!r} is not an integer; configure a 'classes' list"
        ) from exc


def epoch_record(
    record: Record,
    spec: EpochSpec,
    scheme: str = "per_record",
    classes: list[str] | None = None,
    target_channels: list[str] | None = None,
) -> list[Sample]:
    """Slice a record into labeled fixed-length windows.

    All channels must share one sampling rate. The last partial window is
    dropped. Labeling follows the scheme: ``per_record`` assigns the
    earliest annotation's label to every window; ``per_event`` labels each
    window by the annotation covering its center (ties go to the earliest
    onset; uncovered windows are dropped); ``regression`` uses the target
    channels' windowed values as the label vector and excludes those
    channels from the sample data.
    """
    if scheme not in LABEL_SCHEMES:
        raise ValueError(f"unknown label scheme {scheme!r}")
    if not record.channels:
        raise MixedRates(f"record {record.record_id!r} has no channels")
    rates = {ch.sampling_rate for ch in record.channels}
    if len(rates) > 1:
        raise MixedRates(
            f"record {record.record_id!r} mixes rates {sorted(rates)}; resample first"
        )
    rate = record.channels[0].sampling_rate
    w, s = spec.counts(rate)
    n = min(len(d) for d in record.data)
    if w > n:
        raise WindowTooLong(
            f"window of {w} samples exceeds record length {n} ({record.record_id!r})"
        )
    count = (n - w) // s + 1
    matrix = np.stack([d[:n] for d in record.data])

    if scheme == "regression":
        if not target_channels:
            raise MissingLabel("regression labeling needs 'target_channels'")
        target_idx = []
        for label in target_channels:
            try:
                target_idx.append(record.channel_index(label))
            except KeyError as exc:
                raise MissingLabel(f"target channel {label!r} not in record") from exc
        input_idx = [i for i in range(len(record.channels)) if i not in target_idx]
        if not input_idx:
            raise MissingLabel("all channels are regression targets; nothing left as input")
    elif scheme == "per_record":
        if not record.annotations:
            raise MissingLabel(f"record {record.record_id!r} has no annotations to label it")
        first = min(record.annotations, key=lambda a: a.onset)
        record_label = _label_value(first.label, classes)

    anns = sorted(record.annotations, key=lambda a: a.onset)
    samples: list[Sample] = []
    for idx in range(count):
        start = idx * s
        window = matrix[:, start : start + w]
        if scheme == "per_record":
            label = record_label
        elif scheme == "per_event":
            center = (start + w / 2.0) / rate
            label = None
            for ann in anns:
                if ann.onset <= center <= ann.end:
                    label = _label_value(ann.label, classes)
                    break
            if label is None:
                continue
        else:
            label = window[target_idx].ravel().astype(np.float64)
            window = window[input_idx]
        samples.append(
            Sample(
                data=window,
                label=label,
                subject_id=record.subject_id,
                record_id=record.record_id,
                window_index=idx,
            )
        )
    return samples


# --- cache blocks ---------------------------------------------------------------


def _truncate32(data: np.ndarray) -> np.ndarray:
    """Apply the cache's 32-bit storage precision without touching disk."""
    return data.astype("<f4").astype(np.float64)


def _encode_block(data: np.ndarray, label) -> bytes:
    channels, length = data.shape
    if isinstance(label, (int, np.integer)):
        head = struct.pack("<4sIIIB", BLOCK_MAGIC, CACHE_FORMAT_VERSION, channels, length, LABEL_KIND_CLASS)
        head += struct.pack("<q", int(label))
    else:
        vec = np.asarray(label, dtype="<f8").ravel()
        head = struct.pack("<4sIIIB", BLOCK_MAGIC, CACHE_FORMAT_VERSION, channels, length, LABEL_KIND_VECTOR)
        head += struct.pack("<I", vec.size) + vec.tobytes()
    return head + data.astype("<f4").tobytes()


def _decode_block(buf: bytes, where: str) -> tuple[np.ndarray, int | np.ndarray]:
    try:
        magic, version, channels, length, kind = struct.unpack_from("<4sIIIB", buf, 0)
    except struct.error as exc:
        raise CacheCorrupt(f"{where}: short block header") from exc
    if magic != BLOCK_MAGIC:
        raise CacheCorrupt(f"{where}: bad block magic {magic!r}")
    if version != CACHE_FORMAT_VERSION:
        raise CacheCorrupt(f"{where}: unsupported block version {version}")
    offset = struct.calcsize("<4sIIIB")
    if kind == LABEL_KIND_CLASS:
        (label,) = struct.unpack_from("<q", buf, offset)
        label = int(label)
        offset += 8
    elif kind == LABEL_KIND_VECTOR:
        (dim,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        label = np.frombuffer(buf, dtype="<f8", count=dim, offset=offset).copy()
        offset += 8 * dim
    else:
        raise CacheCorrupt(f"{where}: unknown label kind {kind}")
    expected = channels * length * 4
    payload = buf[offset:]
    if len(payload) != expected:
        raise CacheCorrupt(f"{where}: payload holds {len(payload)} bytes, need {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(channels, length).astype(np.float64)
    return data, label


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    try:
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return h.hexdigest()


def cache_key(source_digest: str, pipeline: Pipeline, epoch_config: dict) -> str:
    """Content address of one record's offline-processed samples."""
    payload = "\x00".join(
        (
            source_digest,
            json.dumps(pipeline.canonical(), sort_keys=True),
            json.dumps(epoch_config, sort_keys=True),
            str(CACHE_FORMAT_VERSION),
        )
    )
    return hashlib.sha256(payload.encode()).hexdigest()


# --- dataset entries --------------------------------------------------------------


class _Entry:
    record_id: str
    subject_id: str
    count: int

    def load(self, index: int) -> tuple[np.ndarray, int | np.ndarray, int]:
        raise NotImplementedError


class _MemoryEntry(_Entry):
    def __init__(self, record_id, subject_id, samples):
        self.record_id = record_id
        self.subject_id = subject_id
        self.samples = samples
        self.count = len(samples)

    def load(self, index):
        data, label, window_index = self.samples[index]
        return data, label, window_index


class _CacheEntry(_Entry):
    def __init__(self, directory: Path):
        self.directory = directory
        manifest_path = directory / "manifest.json"
        try:
            manifest = json.loads(manifest_path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CacheCorrupt(f"{directory}: unreadable manifest: {exc}") from exc
        for field in ("format_version", "record_id", "subject_id", "sample_count", "blocks"):
            if field not in manifest:
                raise CacheCorrupt(f"{directory}: manifest missing {field!r}")
        if manifest["format_version"] != CACHE_FORMAT_VERSION:
            raise CacheCorrupt(f"{directory}: cache format {manifest['format_version']} unsupported")
        if len(manifest["blocks"]) != manifest["sample_count"]:
            raise CacheCorrupt(f"{directory}: manifest lists wrong block count")
        self.manifest = manifest
        self.record_id = manifest["record_id"]
        self.subject_id = manifest["subject_id"]
        self.count = manifest["sample_count"]

    def load(self, index):
        block = self.manifest["blocks"][index]
        path = self.directory / block["file"]
        try:
            buf = path.read_bytes()
        except OSError as exc:
            raise CacheCorrupt(f"{path}: missing block: {exc}") from exc
        if hashlib.sha256(buf).hexdigest() != block["sha256"]:
            raise CacheCorrupt(f"{path}: block digest mismatch (key {self.directory.name})")
        data, label = _decode_block(buf, str(path))
        return data, label, block["window_index"]


def _write_cache_entry(
    root: Path,
    key: str,
    record_id: str,
    subject_id: str,
    samples: list[tuple[np.ndarray, int | np.ndarray, int]],
    source_digest: str,
    pipeline: Pipeline,
    epoch_config: dict,
) -> Path:
    """Materialize an entry under a temp name, then atomically rename it."""
    final = root / key
    root.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".tmp-{key[:12]}-", dir=root))
    try:
        blocks = []
        shape = None
        label_kind = LABEL_KIND_CLASS
        for i, (data, label, window_index) in enumerate(samples):
            blob = _encode_block(data, label)
            name = f"block_{i:06d}.bin"
            (tmp / name).write_bytes(blob)
            blocks.append(
                {"file": name, "sha256": hashlib.sha256(blob).hexdigest(), "window_index": window_index}
            )
            shape = list(data.shape)
            if not isinstance(label, (int, np.integer)):
                label_kind = LABEL_KIND_VECTOR
        manifest = {
            "format_version": CACHE_FORMAT_VERSION,
            "key": key,
            "record_id": record_id,
            "subject_id": subject_id,
            "sample_count": len(samples),
            "shape": shape,
            "label_kind": label_kind,
            "source_digest": source_digest,
            "pipeline": pipeline.canonical(),
            "epoch": epoch_config,
        }
        manifest["blocks"] = blocks
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        try:
            os.replace(tmp, final)
        except OSError as exc:
            shutil.rmtree(tmp, ignore_errors=True)
            if not (final / "manifest.json").exists():
                raise IoFailure(f"cannot materialize cache entry {final}: {exc}") from exc
            # else: lost a race with a concurrent builder; its entry is equivalent
    except Exception:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return final


# --- the dataset handle -------------------------------------------------------------


@dataclass(frozen=True)
class RecordBuildInfo:
    """Per-record summary emitted while building a dataset."""

    record_id: str
    windows: int
    cache_key: str | None
    cache_hit: bool


class Dataset:
    """Index-addressable samples with the online pipeline applied on access."""

    def __init__(self, entries: list[_Entry], online: Pipeline):
        self._entries = entries
        self._online = online
        self._offsets = []
        total = 0
        for entry in entries:
            self._offsets.append(total)
            total += entry.count
        self._length = total
        self.build_info: list[RecordBuildInfo] = []

    def __len__(self) -> int:
        return self._length

    def _locate(self, index: int) -> tuple[_Entry, int]:
        if not isinstance(index, (int, np.integer)) or not 0 <= index < self._length:
            raise IndexOutOfRange(f"index {index} outside [0, {self._length})")
        slot = bisect.bisect_right(self._offsets, index) - 1
        return self._entries[slot], index - self._offsets[slot]

    def __getitem__(self, index: int) -> Sample:
        entry, local = self._locate(index)
        data, label, window_index = entry.load(local)
        sample = Sample(
            data=data,
            label=label,
            subject_id=entry.subject_id,
            record_id=entry.record_id,
            window_index=window_index,
        )
        return self._online(sample)

    def get_item(self, index: int) -> Sample:
        return self[index]

    def subject_of(self, index: int) -> str:
        entry, _ = self._locate(index)
        return entry.subject_id

    def record_of(self, index: int) -> str:
        entry, _ = self._locate(index)
        return entry.record_id

    def sample_shape(self) -> tuple[int, int]:
        if not self._length:
            raise IndexOutOfRange("dataset is empty")
        entry, _ = self._locate(0)
        data, _, _ = entry.load(0)
        return data.shape

    @classmethod
    def from_samples(cls, samples: list[Sample], online: Pipeline | None = None) -> "Dataset":
        """In-memory dataset over pre-built samples (storage precision applied)."""
        groups: dict[tuple[str, str], list] = {}
        for s in samples:
            groups.setdefault((s.record_id, s.subject_id), []).append(
                (_truncate32(s.data), s.label, s.window_index)
            )
        entries = [
            _MemoryEntry(record_id, subject_id, stored)
            for (record_id, subject_id), stored in groups.items()
        ]
        return cls(entries, online or compile_pipeline([], "online"))


def _scan_paths(paths: list[str]) -> list[Path]:
    known = (".edf", ".bdf", ".csv")
    files: list[Path] = []
    for raw in paths:
        p = Path(raw)
        if p.is_dir():
            files.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in known))
        elif p.exists():
            files.append(p)
        else:
            raise IoFailure(f"dataset path does not exist: {p}")
    if not files:
        raise IoFailure(f"no record files found under {paths}")
    return files


def build_dataset(section: dict) -> Dataset:
    """Build a dataset from the ``dataset`` config section.

    Reads each record, applies the offline pipeline, epochs it, and stores
    the samples in the cache (keyed by file digest + pipeline + epoching);
    records whose key is already cached are not reprocessed. With no cache
    directory configured (and no TYEE_CACHE_DIR), samples stay in memory.
    """
    offline = compile_pipeline(section.get("offline_transforms") or [], "offline")
    online = compile_pipeline(section.get("online_transforms") or [], "online")
    epoch_cfg = dict(section.get("epoch") or {})
    spec = EpochSpec(window=epoch_cfg["window"], stride=epoch_cfg.get("stride") or epoch_cfg["window"])
    scheme = section.get("label_scheme") or "per_record"
    classes = section.get("classes")
    targets = section.get("target_channels")
    fmt = section.get("format")
    rate = section.get("sampling_rate")

    cache_dir = section.get("cache_dir") or os.environ.get("TYEE_CACHE_DIR")
    cache_root = Path(cache_dir) if cache_dir else None
    epoch_canonical = {
        "window": spec.window,
        "stride": spec.stride,
        "scheme": scheme,
        "classes": classes,
        "target_channels": targets,
    }

    entries: list[_Entry] = []
    info: list[RecordBuildInfo] = []
    for path in _scan_paths(section["paths"]):
        record_id = path.stem
        try:
            digest = _file_digest(path)
            key = cache_key(digest, offline, epoch_canonical)
            if cache_root is not None and (cache_root / key / "manifest.json").exists():
                entry = _CacheEntry(cache_root / key)
                entries.append(entry)
                info.append(RecordBuildInfo(entry.record_id, entry.count, key, True))
                continue
            record = read_record(path, format=fmt, sampling_rate=rate)
            processed = offline(record)
            samples = epoch_record(processed, spec, scheme, classes=classes, target_channels=targets)
            stored = [(_truncate32(s.data), s.label, s.window_index) for s in samples]
            if cache_root is not None:
                _write_cache_entry(
                    cache_root, key, record.record_id, record.subject_id,
                    stored, digest, offline, epoch_canonical,
                )
                entry = _CacheEntry(cache_root / key)
            else:
                entry = _MemoryEntry(record.record_id, record.subject_id, stored)
            entries.append(entry)
            info.append(RecordBuildInfo(entry.record_id, entry.count, key if cache_root else None, False))
        except TyeeError as exc:
            exc.args = (f"{record_id}: {exc}",)
            raise
    dataset = Dataset(entries, online)
    dataset.build_info = info
    return dataset


# --- splitting ------------------------------------------------------------------------


def _allocate(n: int, fractions: tuple[float, float, float]) -> list[int]:
    """Largest-remainder allocation; nonzero fractions get at least one slot
    whenever enough items exist."""
    quotas = [f * n for f in fractions]
    base = [int(q) for q in quotas]
    remainder = n - sum(base)
    order = sorted(range(3), key=lambda i: (quotas[i] - base[i], -i), reverse=True)
    for i in range(remainder):
        base[order[i % 3]] += 1
    nonzero = [i for i in range(3) if fractions[i] > 0]
    if n >= len(nonzero):
        for i in nonzero:
            while base[i] == 0:
                donor = max((j for j in range(3) if base[j] > 1), key=lambda j: base[j], default=None)
                if donor is None:
                    break
                base[donor] -= 1
                base[i] += 1
    return base


def split(dataset: Dataset, spec: SplitSpec) -> tuple[list[int], list[int], list[int]]:
    """Partition sample indices into train/valid/test.

    ``by_subject`` and ``by_record`` shuffle the sorted group ids with the
    split seed and cut the group list by the fractions, so every group's
    samples land in exactly one part. ``by_fraction`` shuffles raw indices.
    """
    n = len(dataset)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    if spec.mode == "by_fraction":
        perm = [int(i) for i in rng.permutation(n)]
        a, b, _ = _allocate(n, spec.fractions)
        return perm[:a], perm[a : a + b], perm[a + b :]

    group_of = dataset.subject_of if spec.mode == "by_subject" else dataset.record_of
    groups: dict[str, list[int]] = {}
    for i in range(n):
        groups.setdefault(group_of(i), []).append(i)
    ids = sorted(groups)
    needed = sum(1 for f in spec.fractions if f > 0)
    if len(ids) < needed:
        raise InsufficientGroups(
            f"{spec.mode} split with {needed} non-empty parts needs >= {needed} groups, "
            f"got {len(ids)}"
        )
    shuffled = [ids[int(i)] for i in rng.permutation(len(ids))]
    a, b, _ = _allocate(len(ids), spec.fractions)
    parts = (shuffled[:a], shuffled[a : a + b], shuffled[a + b :])
    return tuple(sorted(i for g in part for i in groups[g]) for part in parts)
