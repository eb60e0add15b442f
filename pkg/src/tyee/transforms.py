"""Named signal transforms and configurable pipelines.

Transforms are registered under the names used in configuration files
(``bandpass``, ``notch``, ``resample``, ``zscore``, ``minmax``,
``select_channels``, ``crop``). A pipeline is an ordered, validated,
immutable sequence of transforms tagged for the offline stage (whole
records, before caching) or the online stage (samples, at retrieval time).
All transforms are pure: inputs are never mutated.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Callable

import numpy as np
from scipy.signal import butter, sosfilt, sosfilt_zi, upfirdn

from .errors import (
    DuplicateRegistration,
    InvalidBand,
    InvalidParams,
    InvalidRate,
    InvalidWindow,
    MissingChannel,
    TyeeError,
    UnknownTransform,
)
from .records import ChannelInfo, Record

EPSILON = 1e-8

STAGE_OFFLINE = "offline"
STAGE_ONLINE = "online"
_STAGES = (STAGE_OFFLINE, STAGE_ONLINE)


# --- filtering and resampling internals ---------------------------------------


def _zero_phase(sos: np.ndarray, x: np.ndarray, padlen: int) -> np.ndarray:
    """Forward-backward filtering with reflective edge padding.

    Initial filter state is set to the step-response steady state scaled by
    the first padded sample, so constant inputs produce their steady-state
    output immediately.
    """
    n = len(x)
    if n == 0:
        return x.copy()
    padlen = min(padlen, n - 1)
    if padlen > 0:
        xp = np.concatenate([x[padlen:0:-1], x, x[-2 : -padlen - 2 : -1]])
    else:
        xp = x
    zi = sosfilt_zi(sos)
    y, _ = sosfilt(sos, xp, zi=zi * xp[0])
    y = y[::-1]
    y, _ = sosfilt(sos, y, zi=zi * y[0])
    y = y[::-1]
    return y[padlen : padlen + n]


def design_bandpass(low: float, high: float, order: int, rate: float) -> np.ndarray:
    """Butterworth bandpass of the given total order as a biquad cascade."""
    return butter(order // 2, [low, high], btype="bandpass", fs=rate, output="sos")


def design_notch(freq: float, q: float, rate: float) -> np.ndarray:
    """Second-order IIR notch (unit gain at DC and Nyquist, zero at freq)."""
    w0 = 2.0 * math.pi * freq / rate
    alpha = math.sin(w0) / (2.0 * q)
    cosw = math.cos(w0)
    a0 = 1.0 + alpha
    return np.array([[1.0 / a0, -2.0 * cosw / a0, 1.0 / a0,
                      1.0, -2.0 * cosw / a0, (1.0 - alpha) / a0]])


def _check_band(low: float, high: float, rate: float) -> None:
    if not (0 < low < high < rate / 2):
        raise InvalidBand(
            f"band [{low}, {high}] Hz invalid for sampling rate {rate} Hz"
        )


def rational_ratio(source: float, target: float, max_denominator: int = 1000) -> tuple[int, int]:
    """Reduce target/source to a small rational, or raise InvalidRate."""
    if target <= 0 or source <= 0:
        raise InvalidRate(f"rates must be positive, got {source} -> {target}")
    ratio = target / source
    frac = Fraction(ratio).limit_denominator(max_denominator)
    if frac.numerator <= 0 or abs(float(frac) - ratio) > 1e-9 * ratio:
        raise InvalidRate(
            f"ratio {target}/{source} has no rational form with denominator <= {max_denominator}"
        )
    return frac.numerator, frac.denominator


def _resample_array(x: np.ndarray, up: int, down: int) -> np.ndarray:
    """Polyphase resampling with a Kaiser-windowed sinc (beta 8.6, 32 taps/phase)."""
    if up == down:
        return x.copy()
    half = 16 * up
    taps = np.arange(-half, half + 1)
    max_rate = max(up, down)
    h = np.sinc(taps / max_rate) * np.kaiser(2 * half + 1, 8.6)
    h *= up / h.sum()
    pre = (-half) % down  # align the filter delay to the output grid
    if pre:
        h = np.concatenate([np.zeros(pre), h])
    skip = (half + pre) // down
    y = upfirdn(h, x, up, down)
    q, r = divmod(len(x) * up, down)
    n_out = q + (1 if 2 * r >= down else 0)
    return y[skip : skip + n_out]


def _zscore_array(x: np.ndarray) -> np.ndarray:
    return (x - x.mean()) / (x.std() + EPSILON)


def _minmax_array(x: np.ndarray) -> np.ndarray:
    lo = x.min()
    return (x - lo) / (x.max() - lo + EPSILON)


# --- transform classes ---------------------------------------------------------


class Transform:
    """Base class: one named, parameterized operation on a record or sample."""

    name = ""
    stages: frozenset[str] = frozenset(_STAGES)

    def params(self) -> dict[str, Any]:
        return {}

    def apply_record(self, record: Record) -> Record:
        raise InvalidParams(self.name, "cannot be applied to whole records")

    def apply_sample(self, sample):
        raise InvalidParams(self.name, "cannot be applied to windowed samples")

    def __call__(self, x):
        if isinstance(x, Record):
            return self.apply_record(x)
        return self.apply_sample(x)

    def spec(self) -> "TransformSpec":
        return TransformSpec(self.name, dict(self.params()))


def _require_number(name: str, key: str, value) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise InvalidParams(name, f"{key} must be a number, got {value!r}")
    return float(value)


class ZScore(Transform):
    """Per-channel standardization: (x - mean) / (std + eps), population std."""

    name = "zscore"

    def apply_record(self, record: Record) -> Record:
        return record.with_changes(data=tuple(_zscore_array(d) for d in record.data))

    def apply_sample(self, sample):
        data = np.stack([_zscore_array(row) for row in sample.data])
        return dataclasses.replace(sample, data=data)


class MinMax(Transform):
    """Per-channel rescaling into [0, 1]: (x - min) / (max - min + eps)."""

    name = "minmax"

    def apply_record(self, record: Record) -> Record:
        return record.with_changes(data=tuple(_minmax_array(d) for d in record.data))

    def apply_sample(self, sample):
        data = np.stack([_minmax_array(row) for row in sample.data])
        return dataclasses.replace(sample, data=data)


class BandPass(Transform):
    """Zero-phase Butterworth bandpass, applied per channel."""

    name = "bandpass"
    stages = frozenset({STAGE_OFFLINE})

    def __init__(self, low, high, order=4):
        self.low = _require_number(self.name, "low", low)
        self.high = _require_number(self.name, "high", high)
        if isinstance(order, bool) or not isinstance(order, int) or order <= 0 or order % 2:
            raise InvalidParams(self.name, f"order must be a positive even integer, got {order!r}")
        if not 0 < self.low < self.high:
            raise InvalidParams(self.name, f"need 0 < low < high, got [{low}, {high}]")
        self.order = order

    def params(self):
        return {"low": self.low, "high": self.high, "order": self.order}

    def apply_record(self, record: Record) -> Record:
        out = []
        for ch, x in zip(record.channels, record.data):
            _check_band(self.low, self.high, ch.sampling_rate)
            sos = design_bandpass(self.low, self.high, self.order, ch.sampling_rate)
            out.append(_zero_phase(sos, x, padlen=3 * self.order))
        return record.with_changes(data=tuple(out))


class Notch(Transform):
    """Zero-phase second-order notch at one frequency."""

    name = "notch"
    stages = frozenset({STAGE_OFFLINE})

    def __init__(self, freq, q=30.0):
        self.freq = _require_number(self.name, "freq", freq)
        self.q = _require_number(self.name, "q", q)
        if self.freq <= 0:
            raise InvalidParams(self.name, f"freq must be positive, got {freq!r}")
        if self.q <= 0:
            raise InvalidParams(self.name, f"q must be positive, got {q!r}")

    def params(self):
        return {"freq": self.freq, "q": self.q}

    def apply_record(self, record: Record) -> Record:
        out = []
        for ch, x in zip(record.channels, record.data):
            if not 0 < self.freq < ch.sampling_rate / 2:
                raise InvalidBand(
                    f"notch at {self.freq} Hz invalid for rate {ch.sampling_rate} Hz"
                )
            sos = design_notch(self.freq, self.q, ch.sampling_rate)
            out.append(_zero_phase(sos, x, padlen=6))
        return record.with_changes(data=tuple(out))


class Resample(Transform):
    """Polyphase rate conversion of every channel to one target rate."""

    name = "resample"
    stages = frozenset({STAGE_OFFLINE})

    def __init__(self, target_rate):
        self.target_rate = _require_number(self.name, "target_rate", target_rate)
        if self.target_rate <= 0:
            raise InvalidParams(self.name, f"target_rate must be positive, got {target_rate!r}")

    def params(self):
        return {"target_rate": self.target_rate}

    def apply_record(self, record: Record) -> Record:
        channels = []
        data = []
        for ch, x in zip(record.channels, record.data):
            up, down = rational_ratio(ch.sampling_rate, self.target_rate)
            if up == down:
                channels.append(ch)
                data.append(x)
                continue
            data.append(_resample_array(x, up, down))
            channels.append(dataclasses.replace(ch, sampling_rate=self.target_rate))
        return record.with_changes(channels=tuple(channels), data=tuple(data))


class SelectChannels(Transform):
    """Keep only the requested channels, in the requested order."""

    name = "select_channels"
    stages = frozenset({STAGE_OFFLINE})

    def __init__(self, labels):
        if not isinstance(labels, (list, tuple)) or not labels or not all(
            isinstance(l, str) for l in labels
        ):
            raise InvalidParams(self.name, f"labels must be a non-empty list of strings, got {labels!r}")
        self.labels = tuple(labels)

    def params(self):
        return {"labels": list(self.labels)}

    def apply_record(self, record: Record) -> Record:
        have = {ch.label: i for i, ch in enumerate(record.channels)}
        indices = []
        for label in self.labels:
            if label not in have:
                raise MissingChannel(f"channel {label!r} not in record {record.record_id!r}")
            indices.append(have[label])
        return record.with_changes(
            channels=tuple(record.channels[i] for i in indices),
            data=tuple(record.data[i] for i in indices),
        )


class Crop(Transform):
    """Keep samples in [start, end) seconds; shift annotations accordingly."""

    name = "crop"
    stages = frozenset({STAGE_OFFLINE})

    def __init__(self, start, end):
        self.start = _require_number(self.name, "start", start)
        self.end = _require_number(self.name, "end", end)
        if self.start < 0 or self.end <= self.start:
            raise InvalidParams(self.name, f"need 0 <= start < end, got [{start}, {end}]")

    def params(self):
        return {"start": self.start, "end": self.end}

    def apply_record(self, record: Record) -> Record:
        if self.end > record.duration + 1e-9:
            raise InvalidWindow(
                f"crop [{self.start}, {self.end}] exceeds duration {record.duration:.6g}"
            )
        data = []
        for ch, x in zip(record.channels, record.data):
            i0 = round(self.start * ch.sampling_rate)
            i1 = round(self.end * ch.sampling_rate)
            data.append(x[i0:i1])
        span = self.end - self.start
        annotations = []
        for ann in record.annotations:
            if ann.duration == 0:
                inside = self.start <= ann.onset < self.end
            else:
                inside = ann.onset < self.end and ann.end > self.start
            if not inside:
                continue
            onset = max(ann.onset - self.start, 0.0)
            end = min(ann.end - self.start, span)
            annotations.append(dataclasses.replace(ann, onset=onset, duration=end - onset))
        return record.with_changes(data=tuple(data), annotations=tuple(annotations))


# --- registry and pipelines -----------------------------------------------------


_TRANSFORMS: dict[str, Callable[..., Transform]] = {}


def register_transform(name: str, factory: Callable[..., Transform]) -> None:
    """Add a transform to the registry under a new configuration name."""
    if name in _TRANSFORMS:
        raise DuplicateRegistration(f"transform already registered: {name}")
    _TRANSFORMS[name] = factory


for _cls in (ZScore, MinMax, BandPass, Notch, Resample, SelectChannels, Crop):
    register_transform(_cls.name, _cls)


@dataclass(frozen=True)
class TransformSpec:
    """A registry name plus its parameter map."""

    name: str
    params: dict[str, Any]

    @classmethod
    def from_config(cls, entry) -> "TransformSpec":
        if isinstance(entry, TransformSpec):
            return entry
        if isinstance(entry, str):
            return cls(entry, {})
        if isinstance(entry, dict) and "name" in entry:
            params = {k: v for k, v in entry.items() if k != "name"}
            return cls(str(entry["name"]), params)
        raise InvalidParams(str(entry), "transform entries need a 'name' key")

    def canonical(self) -> dict[str, Any]:
        return {"name": self.name, "params": dict(sorted(self.params.items()))}


@dataclass(frozen=True)
class Pipeline:
    """An immutable, compiled sequence of transforms for one stage."""

    stage: str
    steps: tuple[Transform, ...]
    specs: tuple[TransformSpec, ...]

    def __call__(self, x):
        return apply(self, x)

    def __len__(self) -> int:
        return len(self.steps)

    def canonical(self) -> list[dict[str, Any]]:
        return [step.spec().canonical() for step in self.steps]


def compile_pipeline(specs, stage: str) -> Pipeline:
    """Resolve and validate a list of transform specs into a pipeline.

    Raises UnknownTransform for unresolvable names and InvalidParams when a
    transform rejects its parameters or cannot run in the given stage.
    """
    if stage not in _STAGES:
        raise ValueError(f"stage must be one of {_STAGES}, got {stage!r}")
    parsed = [TransformSpec.from_config(s) for s in (specs or [])]
    steps = []
    for spec in parsed:
        factory = _TRANSFORMS.get(spec.name)
        if factory is None:
            raise UnknownTransform(f"unknown transform: {spec.name!r}")
        try:
            step = factory(**spec.params)
        except InvalidParams:
            raise
        except TypeError as exc:
            raise InvalidParams(spec.name, str(exc)) from exc
        if stage not in step.stages:
            raise InvalidParams(spec.name, f"not usable in the {stage} stage")
        steps.append(step)
    return Pipeline(stage=stage, steps=tuple(steps), specs=tuple(parsed))


def apply(pipeline: Pipeline, x):
    """Run the pipeline steps left to right; step errors carry their index."""
    for index, step in enumerate(pipeline.steps):
        try:
            x = step(x)
        except TyeeError as exc:
            exc.step_index = index
            raise
    return x


# --- direct operation forms ------------------------------------------------------


def bandpass_filter(record: Record, low: float, high: float, order: int = 4) -> Record:
    """Zero-phase Butterworth bandpass; raises InvalidBand on a bad band."""
    if not 0 < low < high:
        raise InvalidBand(f"need 0 < low < high, got [{low}, {high}]")
    for ch in record.channels:
        _check_band(low, high, ch.sampling_rate)
    return BandPass(low=low, high=high, order=order).apply_record(record)


def notch_filter(record: Record, freq: float, q: float) -> Record:
    """Zero-phase notch at ``freq``; raises InvalidBand above Nyquist."""
    for ch in record.channels:
        if not 0 < freq < ch.sampling_rate / 2:
            raise InvalidBand(f"notch at {freq} Hz invalid for rate {ch.sampling_rate} Hz")
    return Notch(freq=freq, q=q).apply_record(record)


def resample(record: Record, target_rate: float) -> Record:
    """Resample all channels to ``target_rate``; raises InvalidRate."""
    if target_rate <= 0:
        raise InvalidRate(f"target_rate must be positive, got {target_rate}")
    return Resample(target_rate=target_rate).apply_record(record)


def zscore_normalize(x):
    """Standardize a record or sample per channel."""
    return ZScore()(x)


def min_max_normalize(x):
    """Rescale a record or sample per channel into [0, 1]."""
    return MinMax()(x)


def select_channels(record: Record, labels) -> Record:
    """Subset and reorder channels by exact label match."""
    return SelectChannels(labels=list(labels)).apply_record(record)


def crop(record: Record, start: float, end: float) -> Record:
    """Keep the [start, end) span; raises InvalidWindow on bad bounds."""
    if start < 0 or end <= start:
        raise InvalidWindow(f"need 0 <= start < end, got [{start}, {end}]")
    return Crop(start=start, end=end).apply_record(record)
