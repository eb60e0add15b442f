"""Shared builders for synthetic records, datasets, and experiment configs."""

import numpy as np
import pytest

from tyee.records import ChannelInfo, EventAnnotation, Record
from tyee.signal_io import write_edf


def make_record(
    n_channels=2,
    rate=256.0,
    duration=4.0,
    rng=None,
    amplitude=100.0,
    phys_range=500.0,
    record_id="rec1",
    subject_id="subj1",
    annotations=(),
    labels=None,
):
    """Random smooth-ish record with headroom inside its physical range."""
    rng = rng or np.random.default_rng(0)
    n = round(duration * rate)
    labels = labels or [f"C{i}" for i in range(n_channels)]
    channels = tuple(
        ChannelInfo(label=labels[i], sampling_rate=rate,
                    physical_min=-phys_range, physical_max=phys_range)
        for i in range(n_channels)
    )
    data = tuple(rng.normal(0.0, amplitude / 4, size=n).clip(-phys_range, phys_range)
                 for _ in range(n_channels))
    return Record(
        record_id=record_id,
        subject_id=subject_id,
        channels=channels,
        data=data,
        annotations=tuple(annotations),
    )


def sine_record(freq, rate=256.0, duration=4.0, n_channels=1, amplitude=1.0,
                record_id="sine", subject_id="s1", annotations=()):
    n = round(duration * rate)
    t = np.arange(n) / rate
    wave = amplitude * np.sin(2 * np.pi * freq * t)
    channels = tuple(
        ChannelInfo(label=f"C{i}", sampling_rate=rate,
                    physical_min=-10 * max(amplitude, 1.0),
                    physical_max=10 * max(amplitude, 1.0))
        for i in range(n_channels)
    )
    return Record(
        record_id=record_id,
        subject_id=subject_id,
        channels=channels,
        data=tuple(wave.copy() for _ in range(n_channels)),
        annotations=tuple(annotations),
    )


def records_equal(a: Record, b: Record) -> bool:
    return (
        a.channels == b.channels
        and a.annotations == b.annotations
        and len(a.data) == len(b.data)
        and all(np.array_equal(x, y) for x, y in zip(a.data, b.data))
    )


def projected_amplitude(y, freq, rate):
    """Amplitude of the ``freq`` component via complex projection."""
    t = np.arange(len(y)) / rate
    return 2.0 * abs(np.mean(y * np.exp(-2j * np.pi * freq * t)))


def interior(x, fraction=0.1):
    k = int(len(x) * fraction)
    return x[k : len(x) - k]


@pytest.fixture
def experiment_data(tmp_path):
    """3 subjects x 2 records of two-class sine EDFs for end-to-end runs."""
    data_dir = tmp_path / "data"
    data_dir.mkdir()
    generate_experiment_records(data_dir)
    return data_dir


def generate_experiment_records(data_dir, subjects=3, records_per_subject=2,
                                duration=60.0, rate=256.0, noise=0.5, seed=7):
    """Class 0 records carry a 10 Hz sine, class 1 a 20 Hz sine, plus noise."""
    rng = np.random.default_rng(seed)
    n = round(duration * rate)
    t = np.arange(n) / rate
    paths = []
    for s in range(subjects):
        for r in range(records_per_subject):
            cls = r % 2
            freq = 10.0 if cls == 0 else 20.0
            channels = tuple(
                ChannelInfo(label=f"C{c}", sampling_rate=rate,
                            physical_min=-8.0, physical_max=8.0)
                for c in range(2)
            )
            data = tuple(
                (np.sin(2 * np.pi * freq * t) + rng.normal(0, noise, n)).clip(-8, 8)
                for _ in range(2)
            )
            record = Record(
                record_id=f"subj{s}_rec{r}",
                subject_id=f"subj{s}",
                channels=channels,
                data=data,
                annotations=(EventAnnotation(0.0, duration, str(cls)),),
            )
            path = data_dir / f"subj{s}_rec{r}.edf"
            write_edf(record, path)
            paths.append(path)
    return paths


def experiment_config(data_dir, out_dir, cache_dir=None, epochs=20, seed=123):
    cache_line = f"  cache_dir: {cache_dir}\n" if cache_dir else ""
    return f"""\
common:
  seed: {seed}
  output_dir: {out_dir}
  log_level: warning
dataset:
  paths: [{data_dir}]
  offline_transforms:
    - name: bandpass
      low: 1.0
      high: 40.0
      order: 4
    - name: zscore
  epoch:
    window: 2.0
    stride: 1.0
  label_scheme: per_record
  split:
    mode: by_subject
    fractions: [0.7, 0.3, 0.0]
    seed: 5
{cache_line}model:
  kind: mlp
  input_dim: 1024
  output_dim: 2
  hidden: [32]
  activation: relu
optimizer:
  kind: adam
  lr: 0.001
task:
  type: classification
  criterion: cross_entropy
  metrics: [accuracy, balanced_accuracy, kappa]
trainer:
  epochs: {epochs}
  batch_size: 32
  checkpoint_interval: 5
"""
