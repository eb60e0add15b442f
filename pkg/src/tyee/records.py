"""In-memory representation of a physiological recording.

A :class:`Record` holds per-channel physical-unit samples, per-channel
metadata, and event annotations. Records are immutable after construction
and safe to share between threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from datetime import datetime

import numpy as np

DEFAULT_START_TIME = datetime(1970, 1, 1, 0, 0, 0)


@dataclass(frozen=True)
class ChannelInfo:
    """Metadata for one channel: label, unit, rate, and calibration ranges."""

    label: str
    sampling_rate: float
    physical_unit: str = "uV"
    physical_min: float = -1000.0
    physical_max: float = 1000.0
    digital_min: int = -32768
    digital_max: int = 32767

    def __post_init__(self):
        if not self.sampling_rate > 0:
            raise ValueError(f"sampling_rate must be positive, got {self.sampling_rate}")
        if not self.physical_max > self.physical_min:
            raise ValueError(f"{self.label}: physical_max must exceed physical_min")
        if not self.digital_max > self.digital_min:
            raise ValueError(f"{self.label}: digital_max must exceed digital_min")

    @property
    def quantization_step(self) -> float:
        """Physical size of one digital step."""
        return (self.physical_max - self.physical_min) / (self.digital_max - self.digital_min)


@dataclass(frozen=True)
class EventAnnotation:
    """One labeled event: onset and duration in seconds from record start."""

    onset: float
    duration: float
    label: str

    def __post_init__(self):
        if self.onset < 0:
            raise ValueError(f"annotation onset must be >= 0, got {self.onset}")
        if self.duration < 0:
            raise ValueError(f"annotation duration must be >= 0, got {self.duration}")

    @property
    def end(self) -> float:
        return self.onset + self.duration


def _freeze(array) -> np.ndarray:
    out = np.asarray(array, dtype=np.float64)
    if out.ndim != 1:
        raise ValueError("channel data must be one-dimensional")
    out = out.copy() if out.flags.writeable else out
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Record:
    """One recording: channels, physical-unit samples, and annotations."""

    record_id: str
    subject_id: str
    channels: tuple[ChannelInfo, ...]
    data: tuple[np.ndarray, ...]
    annotations: tuple[EventAnnotation, ...] = ()
    start_time: datetime = field(default=DEFAULT_START_TIME)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "data", tuple(_freeze(d) for d in self.data))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        if len(self.data) != len(self.channels):
            raise ValueError(
                f"{len(self.data)} data arrays for {len(self.channels)} channels"
            )
        durations = [len(d) / ch.sampling_rate for ch, d in zip(self.channels, self.data)]
        if durations:
            period = max(1.0 / ch.sampling_rate for ch in self.channels)
            if max(durations) - min(durations) > period + 1e-9:
                raise ValueError("channel durations differ by more than one sample period")
        for ann in self.annotations:
            if ann.end > self.duration + 1e-9:
                raise ValueError(
                    f"annotation {ann.label!r} extends past record end "
                    f"({ann.end:.6g} > {self.duration:.6g})"
                )

    @property
    def duration(self) -> float:
        """Record duration in seconds (shortest channel)."""
        if not self.channels:
            return 0.0
        return min(len(d) / ch.sampling_rate for ch, d in zip(self.channels, self.data))

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(ch.label for ch in self.channels)

    def channel_index(self, label: str) -> int:
        for i, ch in enumerate(self.channels):
            if ch.label == label:
                return i
        raise KeyError(label)

    def with_changes(self, **kwargs) -> "Record":
        """Copy of this record with the given fields replaced."""
        return replace(self, **kwargs)
