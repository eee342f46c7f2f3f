"""Recording -> epoch preprocessing and the on-disk dataset container."""

from __future__ import annotations

import json
from functools import lru_cache
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .filters import FilterSpec, design_butterworth, zero_phase_matrix

SCHEMA_VERSION = 1
FORMAT_NAME = "stpam-dataset"
LABEL_NAMES = ("non-target", "target")


class DatasetFormatError(ValueError):
    pass


@dataclass
class RawRecording:
    """Continuous multichannel signal with labelled stimulus onsets (sample indices)."""
    data: np.ndarray                     # (C, S)
    fs: float
    channel_names: tuple[str, ...]
    onsets: np.ndarray                   # (E,) int
    labels: np.ndarray                   # (E,) 0 = non-target, 1 = target
    subject: str = "S0"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.onsets = np.asarray(self.onsets, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.data.ndim != 2 or self.data.shape[0] != len(self.channel_names):
            raise ValueError("data must be channels x samples with one name per channel")
        if self.onsets.shape != self.labels.shape:
            raise ValueError("one label per onset expected")
        if np.any(np.diff(self.onsets) <= 0):
            raise ValueError("event onsets must be strictly increasing")
        if len(self.onsets) and self.onsets[0] < 0:
            raise ValueError("event onsets must be nonnegative")


@dataclass(frozen=True)
class PreprocessConfig:
    epoch_seconds: float = 1.0
    order: int = 6
    low: float = 1.0
    high: float = 40.0
    decimation: int = 4
    zscore_scope: str = "sample"         # or "subject"

    def __post_init__(self):
        if self.zscore_scope not in ("sample", "subject"):
            raise ValueError("zscore_scope must be 'sample' or 'subject'")
        if self.decimation < 1:
            raise ValueError("decimation factor must be at least 1")


@dataclass
class Dataset:
    X: np.ndarray                        # (N, C, T) float32
    y: np.ndarray                        # (N,) uint8
    fs: float
    channel_names: tuple[str, ...]
    label_names: tuple[str, ...] = LABEL_NAMES
    subjects: list = field(default_factory=list)
    onsets: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.uint8)
        if self.X.ndim != 3 or len(self.X) != len(self.y):
            raise ValueError("X must be (N, C, T) with one label per sample")
        if self.X.shape[1] != len(self.channel_names):
            raise ValueError("one channel name per channel expected")
        self.channel_names = tuple(self.channel_names)
        self.label_names = tuple(self.label_names)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.X.shape

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        pick = lambda seq: [seq[i] for i in idx] if seq else []
        return Dataset(self.X[idx], self.y[idx], self.fs, self.channel_names, self.label_names,
                       pick(self.subjects), pick(self.onsets), dict(self.provenance))

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        if not parts:
            raise ValueError("nothing to concatenate")
        first = parts[0]
        for p in parts[1:]:
            if p.channel_names != first.channel_names or p.fs != first.fs or p.X.shape[2] != first.X.shape[2]:
                raise ValueError("datasets differ in channels, rate or length")
        return Dataset(np.concatenate([p.X for p in parts]), np.concatenate([p.y for p in parts]),
                       first.fs, first.channel_names, first.label_names,
                       sum((list(p.subjects) for p in parts), []), sum((list(p.onsets) for p in parts), []),
                       dict(first.provenance))


# ---------------------------------------------------------------------------
# preprocessing steps


def segment(rec: RawRecording, seconds: float = 1.0) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Cut [onset, onset + seconds) windows.

    Returns (epochs (E, C, L), labels, onsets, skipped) where events running
    past the end of the recording are skipped and counted.
    """
    length = int(round(seconds * rec.fs))
    ok = rec.onsets + length <= rec.data.shape[1]
    onsets = rec.onsets[ok]
    idx = onsets[:, None] + np.arange(length)[None, :]
    epochs = rec.data[:, idx].transpose(1, 0, 2) if len(onsets) else np.zeros((0, rec.data.shape[0], length))
    return epochs, rec.labels[ok], onsets, int((~ok).sum())


def decimate(x: np.ndarray, factor: int) -> np.ndarray:
    """Keep every ``factor``-th sample along the last axis (a trailing remainder is dropped)."""
    if factor == 1:
        return x
    usable = x.shape[-1] - x.shape[-1] % factor
    return x[..., :usable:factor]


def zscore(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Standardize along ``axis`` with the population std; constant rows become zeros."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=axis, keepdims=True)
    sd = x.std(axis=axis, keepdims=True)
    flat = sd < 1e-12
    return np.where(flat, 0.0, (x - mu) / np.where(flat, 1.0, sd))


def zscore_by_subject(X: np.ndarray, subjects: Sequence[str]) -> np.ndarray:
    """Per-channel statistics pooled over all samples and time points of each subject."""
    X = np.asarray(X, dtype=np.float64)
    out = np.empty_like(X)
    subjects = np.asarray(subjects)
    for s in np.unique(subjects):
        sel = subjects == s
        block = X[sel]
        mu = block.mean(axis=(0, 2), keepdims=True)
        sd = block.std(axis=(0, 2), keepdims=True)
        flat = sd < 1e-12
        out[sel] = np.where(flat, 0.0, (block - mu) / np.where(flat, 1.0, sd))
    return out


def filter_spec(cfg: PreprocessConfig, fs: float) -> FilterSpec:
    return design_butterworth(cfg.order, cfg.low, cfg.high, fs)


@lru_cache(maxsize=8)
def _filter_decimate_matrix(order: int, low: float, high: float, fs: float, length: int,
                            factor: int) -> np.ndarray:
    usable = length - length % factor
    M = zero_phase_matrix(design_butterworth(order, low, high, fs), length)
    M = M[:, :usable:factor].copy()
    M.setflags(write=False)
    return M


def filter_and_decimate(epochs: np.ndarray, cfg: PreprocessConfig, fs: float) -> np.ndarray:
    """Zero-phase band-pass followed by decimation, applied as one precomputed linear map."""
    M = _filter_decimate_matrix(cfg.order, cfg.low, cfg.high, float(fs), epochs.shape[-1], cfg.decimation)
    return np.asarray(epochs, dtype=np.float64) @ M


def preprocess(rec: RawRecording, cfg: PreprocessConfig = PreprocessConfig()) -> tuple[Dataset, int]:
    """segment -> zero-phase band-pass -> decimate -> standardize. Returns (dataset, skipped)."""
    epochs, labels, onsets, skipped = segment(rec, cfg.epoch_seconds)
    epochs = filter_and_decimate(epochs, cfg, rec.fs)
    if cfg.zscore_scope == "sample":
        epochs = zscore(epochs)
    elif len(epochs):
        epochs = zscore_by_subject(epochs, [rec.subject] * len(epochs))
    ds = Dataset(epochs, labels, rec.fs / cfg.decimation, rec.channel_names,
                 subjects=[rec.subject] * len(labels), onsets=[int(o) for o in onsets],
                 provenance={"preprocess": {"filter": [cfg.order, cfg.low, cfg.high],
                                            "decimation": cfg.decimation, "zscore": cfg.zscore_scope,
                                            "source_fs": rec.fs}})
    return ds, skipped


# ---------------------------------------------------------------------------
# splitting


def stratified_split(y: np.ndarray, train_fraction: float = 0.75,
                     seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays (train, test) with the class ratio preserved; both sorted."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cls in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == cls))
        k = int(round(train_fraction * len(idx)))
        train.append(idx[:k])
        test.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def balance(y: np.ndarray, seed: int = 0) -> np.ndarray:
    """Sorted indices keeping every sample of the rarest class and an equal random draw of the others."""
    y = np.asarray(y)
    classes, counts = np.unique(y, return_counts=True)
    k = counts.min()
    rng = np.random.default_rng(seed)
    keep = [rng.choice(np.flatnonzero(y == c), size=k, replace=False) for c in classes]
    return np.sort(np.concatenate(keep))


# ---------------------------------------------------------------------------
# container


def write_dataset(ds: Dataset, path: Union[str, Path]) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    N, C, T = ds.X.shape
    meta = {
        "format": FORMAT_NAME,
        "schema_version": SCHEMA_VERSION,
        "n_samples": int(N),
        "n_channels": int(C),
        "n_times": int(T),
        "fs": float(ds.fs),
        "channel_names": list(ds.channel_names),
        "label_names": list(ds.label_names),
        "subjects": list(ds.subjects),
        "onsets": [int(o) for o in ds.onsets],
        "provenance": ds.provenance,
    }
    (path / "data.bin").write_bytes(np.ascontiguousarray(ds.X, dtype="<f4").tobytes())
    (path / "labels.bin").write_bytes(np.ascontiguousarray(ds.y, dtype=np.uint8).tobytes())
    (path / "meta.json").write_text(json.dumps(meta, indent=1) + "\n")


def read_dataset(path: Union[str, Path]) -> Dataset:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except FileNotFoundError:
        raise DatasetFormatError(f"{path}: no meta.json") from None
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: meta.json is not valid JSON ({exc})") from None
    if meta.get("format") != FORMAT_NAME:
        raise DatasetFormatError(f"{path}: not a dataset directory (format tag {meta.get('format')!r})")
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise DatasetFormatError(f"{path}: unsupported schema version {meta.get('schema_version')}")
    N, C, T = meta["n_samples"], meta["n_channels"], meta["n_times"]
    try:
        raw = (path / "data.bin").read_bytes()
        lab = (path / "labels.bin").read_bytes()
    except FileNotFoundError as exc:
        raise DatasetFormatError(f"{path}: missing {Path(exc.filename).name}") from None
    if len(raw) != 4 * N * C * T:
        raise DatasetFormatError(f"{path}: data.bin holds {len(raw)} bytes, expected {4 * N * C * T}")
    if len(lab) != N:
        raise DatasetFormatError(f"{path}: labels.bin holds {len(lab)} bytes, expected {N}")
    X = np.frombuffer(raw, dtype="<f4").reshape(N, C, T).astype(np.float32)
    y = np.frombuffer(lab, dtype=np.uint8).copy()
    return Dataset(X, y, meta["fs"], tuple(meta["channel_names"]), tuple(meta["label_names"]),
                   list(meta.get("subjects", [])), list(meta.get("onsets", [])), meta.get("provenance", {}))


def load_arrays(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """float64 model inputs and int labels."""
    return ds.X.astype(np.float64), ds.y.astype(np.int64)
