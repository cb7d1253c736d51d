"""Epoch datasets: container format, standardization, LOSO splits, synthetic data."""

import csv
import json
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .errors import (
    ConfigError,
    DataError,
    HeaderError,
    InputShapeError,
    LabelRangeError,
    TruncatedPayloadError,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Epochs ``x`` of shape (N, C, T) with labels in ``0..num_classes-1``.

    ``ids`` are stable epoch identifiers that survive subsetting; the
    experiment harness uses them to track which epochs reach which stage.
    """

    x: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray
    num_classes: int
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 3:
            raise InputShapeError(f"epochs must be (N, C, T), got {x.shape}")
        n = x.shape[0]
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        subjects = np.asarray(self.subjects, dtype=np.int64).reshape(-1)
        ids = np.arange(n, dtype=np.int64) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if labels.shape != (n,) or subjects.shape != (n,) or ids.shape != (n,):
            raise InputShapeError("labels, subjects and ids must have one entry per epoch")
        if self.num_classes < 2:
            raise DataError("num_classes must be at least 2")
        if n and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise LabelRangeError(f"labels must lie in 0..{self.num_classes - 1}")
        if not np.all(np.isfinite(x)):
            raise DataError("epochs contain non-finite values")
        for name, arr in (("x", x), ("labels", labels), ("subjects", subjects), ("ids", ids)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def __len__(self):
        return self.x.shape[0]

    @property
    def channels(self):
        return self.x.shape[1]

    @property
    def samples(self):
        return self.x.shape[2]

    @property
    def subject_ids(self):
        return np.unique(self.subjects)

    def subset(self, index):
        return Dataset(self.x[index], self.labels[index], self.subjects[index], self.num_classes, self.ids[index])

    def for_subjects(self, subjects):
        return self.subset(np.isin(self.subjects, list(subjects)))

    def with_x(self, x):
        return Dataset(x, self.labels, self.subjects, self.num_classes, self.ids)

    def equals(self, other):
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.subjects, other.subjects)
            and np.array_equal(self.ids, other.ids)
        )

    @staticmethod
    def concat(parts):
        parts = list(parts)
        return Dataset(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.subjects for p in parts]),
            parts[0].num_classes,
            np.concatenate([p.ids for p in parts]),
        )


# -- standardization -------------------------------------------------------


def zscore_standardize(epoch):
    """Per-channel z-score over time using the population standard deviation.

    Works on one epoch (C, T) or a batch (N, C, T). Constant channels become
    all zeros.
    """
    x = np.asarray(epoch, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    std = x.std(axis=-1, keepdims=True)
    flat = std == 0
    if np.any(flat):
        warnings.warn("zero-variance channel left at 0", RuntimeWarning, stacklevel=2)
    return np.where(flat, 0.0, (x - mean) / np.where(flat, 1.0, std))


def ema_standardize(epoch, decay=0.999, eps=1e-8):
    """Exponential-moving standardization along time, run per epoch and channel.

    m_t = decay*m_{t-1} + (1-decay)*x_t and
    v_t = decay*v_{t-1} + (1-decay)*(x_t - m_t)^2, starting from m_0 = x_0,
    v_0 = 1. Output is (x_t - m_t) / sqrt(v_t + eps).
    """
    if not 0.0 < decay <= 1.0:
        raise ConfigError("decay must lie in (0, 1]")
    x = np.asarray(epoch, dtype=np.float64)
    b, a = [1.0 - decay], [1.0, -decay]
    m = np.empty_like(x)
    m[..., 0] = x[..., 0]
    if x.shape[-1] > 1:
        m[..., 1:], _ = lfilter(b, a, x[..., 1:], axis=-1, zi=(decay * x[..., :1]))
    sq = (x - m) ** 2
    v = np.empty_like(x)
    v[..., 0] = 1.0
    if x.shape[-1] > 1:
        v[..., 1:], _ = lfilter(b, a, sq[..., 1:], axis=-1, zi=np.full(x.shape[:-1] + (1,), decay))
    return (x - m) / np.sqrt(v + eps)


def standardize(dataset, method):
    if method in (None, "none"):
        return dataset
    if method == "zscore":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return dataset.with_x(zscore_standardize(dataset.x))
    if method == "ema":
        return dataset.with_x(ema_standardize(dataset.x))
    raise ConfigError(f"unknown standardization {method!r}")


# -- splitting -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LosoSplit:
    test_subject: int
    probe_subjects: tuple
    train_subjects: tuple
    train: Dataset
    probes: tuple
    test: Dataset


def loso_split(dataset, test_subject):
    """Hold out ``test_subject``; the next two subjects (cyclically, in sorted
    order) become the two substitute-probe sets; the rest train the target."""
    subjects = [int(s) for s in dataset.subject_ids]
    if len(subjects) < 4:
        raise ConfigError(f"leave-one-subject-out with probes needs >= 4 subjects, got {len(subjects)}")
    if test_subject not in subjects:
        raise ConfigError(f"subject {test_subject} not in dataset")
    i = subjects.index(test_subject)
    probe_subjects = (subjects[(i + 1) % len(subjects)], subjects[(i + 2) % len(subjects)])
    train_subjects = tuple(s for s in subjects if s != test_subject and s not in probe_subjects)
    return LosoSplit(
        test_subject=test_subject,
        probe_subjects=probe_subjects,
        train_subjects=train_subjects,
        train=dataset.for_subjects(train_subjects),
        probes=tuple(dataset.for_subjects([s]) for s in probe_subjects),
        test=dataset.for_subjects([test_subject]),
    )


# -- synthetic generator ---------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    num_subjects: int = 6
    epochs_per_subject: int = 120
    channels: int = 16
    samples: int = 256
    num_classes: int = 2
    class_separation: float = 0.06
    subject_shift_scale: float = 0.2
    noise_sigma: float = 1.0
    components: int = 3
    seed: int = 0

    def __post_init__(self):
        if min(self.num_subjects, self.epochs_per_subject, self.channels, self.samples, self.components) < 1:
            raise ConfigError("synthetic sizes must be positive")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if not self.class_separation > 0:
            raise ConfigError("class_separation must be positive")
        if self.subject_shift_scale < 0 or self.noise_sigma < 0:
            raise ConfigError("subject_shift_scale and noise_sigma must be nonnegative")


def class_templates(config, rng):
    """One (C, T) template per class: a few sinusoids in 2-16 cycles/epoch with
    class-specific frequencies, spatial weights and phases, scaled to RMS
    ``class_separation``."""
    t = np.arange(config.samples) / config.samples
    templates = np.zeros((config.num_classes, config.channels, config.samples))
    for c in range(config.num_classes):
        freqs = rng.uniform(2.0, 16.0, size=config.components)
        weights = rng.normal(size=(config.components, config.channels))
        phases = rng.uniform(0, 2 * np.pi, size=(config.components, config.channels))
        for m in range(config.components):
            templates[c] += weights[m][:, None] * np.sin(2 * np.pi * freqs[m] * t[None, :] + phases[m][:, None])
        templates[c] *= config.class_separation / np.sqrt(np.mean(templates[c] ** 2))
    return templates


def synth_generate(config=SynthConfig()):
    """Class template + per-subject channel gain/offset + white Gaussian noise."""
    rng = np.random.default_rng(config.seed)
    templates = class_templates(config, rng)
    n_sub, n_ep = config.num_subjects, config.epochs_per_subject
    x = np.empty((n_sub * n_ep, config.channels, config.samples))
    labels = np.empty(n_sub * n_ep, dtype=np.int64)
    subjects = np.repeat(np.arange(n_sub, dtype=np.int64), n_ep)
    for s in range(n_sub):
        gain = np.exp(config.subject_shift_scale * rng.normal(size=config.channels))
        offset = config.subject_shift_scale * rng.normal(size=config.channels)
        y = rng.permutation(np.arange(n_ep) % config.num_classes)
        noise = config.noise_sigma * rng.normal(size=(n_ep, config.channels, config.samples))
        sl = slice(s * n_ep, (s + 1) * n_ep)
        x[sl] = gain[None, :, None] * templates[y] + offset[None, :, None] + noise
        labels[sl] = y
    return Dataset(x, labels, subjects, config.num_classes)


# -- container format ------------------------------------------------------

DATASET_MAGIC = b"EEGADV-EPOCHS\n"
SCHEMA_VERSION = 1


def save_dataset(dataset, path):
    """Write magic, uint64 header length, JSON header, then float64 LE payload
    in epoch-major, channel-major, time-minor order."""
    header = {
        "schema": "eegadv-epochs",
        "version": SCHEMA_VERSION,
        "num_epochs": len(dataset),
        "channels": dataset.channels,
        "samples": dataset.samples,
        "num_classes": dataset.num_classes,
        # 1-based on disk, 0-based in memory
        "labels": (dataset.labels + 1).tolist(),
        "subjects": dataset.subjects.tolist(),
        "ids": dataset.ids.tolist(),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(Path(path), "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(dataset.x, dtype="<f8").tobytes())


def _parse_dataset(raw, source="<bytes>"):
    if not raw.startswith(DATASET_MAGIC):
        raise HeaderError(f"{source}: not an epochs container")
    off = len(DATASET_MAGIC)
    if len(raw) < off + 8:
        raise HeaderError(f"{source}: truncated header length")
    (hlen,) = struct.unpack("<Q", raw[off:off + 8])
    off += 8
    if len(raw) < off + hlen:
        raise HeaderError(f"{source}: truncated header")
    try:
        h = json.loads(raw[off:off + hlen])
        n, c, t, k = (int(h[key]) for key in ("num_epochs", "channels", "samples", "num_classes"))
        labels = np.asarray(h["labels"], dtype=np.int64)
        subjects = np.asarray(h["subjects"], dtype=np.int64)
        ids = np.asarray(h.get("ids", range(n)), dtype=np.int64)
        version = h["version"]
    except (ValueError, KeyError, TypeError) as exc:
        raise HeaderError(f"{source}: malformed header: {exc}") from None
    if version != SCHEMA_VERSION:
        raise HeaderError(f"{source}: unsupported schema version {version}")
    if min(n, c, t) < 0 or labels.shape != (n,) or subjects.shape != (n,) or ids.shape != (n,):
        raise InputShapeError(f"{source}: header counts disagree with label/subject lists")
    if n and (labels.min() < 1 or labels.max() > k):
        raise LabelRangeError(f"{source}: labels outside 1..{k}")
    off += hlen
    expected = 8 * n * c * t
    payload = raw[off:]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{source}: payload has {len(payload)} bytes, header implies {expected}")
    if len(payload) > expected:
        raise InputShapeError(f"{source}: {len(payload) - expected} bytes beyond the declared payload")
    x = np.frombuffer(payload, dtype="<f8").reshape(n, c, t).astype(np.float64)
    return Dataset(x, labels - 1, subjects, k, ids)


def load_dataset(path):
    return _parse_dataset(Path(path).read_bytes(), str(path))


def load_csv(path, channels, samples, num_classes=None):
    """Read one epoch per row: ``subject, label, C*T values`` (channel-major),
    labels in 1..num_classes.

    A header row is skipped if its first cell is not an integer.
    """
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if lineno == 1:
                try:
                    int(row[0])
                except ValueError:
                    continue
            if len(row) != 2 + channels * samples:
                raise InputShapeError(f"{path}:{lineno}: expected {2 + channels * samples} fields, got {len(row)}")
            rows.append(row)
    if not rows:
        raise DataError(f"{path}: no epochs")
    try:
        subjects = np.array([int(r[0]) for r in rows])
        labels = np.array([int(r[1]) for r in rows])
        x = np.array([[float(v) for v in r[2:]] for r in rows]).reshape(len(rows), channels, samples)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    k = int(labels.max()) if num_classes is None else num_classes
    if labels.min() < 1 or labels.max() > k:
        raise LabelRangeError(f"{path}: labels outside 1..{k}")
    return Dataset(x, labels - 1, subjects, max(k, 2))
