"""Epoch/feature dataset containers and the on-disk store format.

A store is a directory holding ``meta.json`` (shape, dtype, labels,
acquisition order, ...) plus ``data.bin`` with the raw float32
little-endian payload (optionally gzip-compressed, flagged in the meta).
"""

from __future__ import annotations

import gzip
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

STORE_VERSION = 1


class StoreFormatError(Exception):
    """Raised when a store directory is missing, malformed or inconsistent."""


def _as_float32(data) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float32)
    return arr


def _check_acquisition_order(order: np.ndarray, n: int) -> None:
    if sorted(order.tolist()) != list(range(n)):
        raise ValueError("acquisition_order must be a permutation of 0..N-1")


@dataclass
class EpochSet:
    """Labeled per-trial EEG segments for one subject.

    data has shape (N, C, T); labels are 0 (non-target) / 1 (target);
    acquisition_order[i] is the chronological rank of epoch i.
    """

    data: np.ndarray
    labels: np.ndarray
    subject_id: str
    sampling_rate: float
    onset_index: int = 0
    acquisition_order: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.data = _as_float32(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"data must be (N, C, T), got shape {self.data.shape}")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.data.shape[0]
        if self.labels.shape != (n,):
            raise ValueError("labels length must match number of epochs")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must contain only 0 and 1")
        if self.sampling_rate <= 0:
            raise ValueError("sampling_rate must be positive")
        if self.acquisition_order is None:
            self.acquisition_order = np.arange(n, dtype=np.int64)
        else:
            self.acquisition_order = np.asarray(self.acquisition_order, dtype=np.int64)
            if self.acquisition_order.shape != (n,):
                raise ValueError("acquisition_order length must match number of epochs")
            _check_acquisition_order(self.acquisition_order, n)

    @property
    def n_epochs(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def n_samples(self) -> int:
        return self.data.shape[2]

    def take(self, indices: np.ndarray) -> "EpochSet":
        """New EpochSet containing the given rows; chronological ranks are
        re-densified to 0..len-1 while preserving relative order."""
        indices = np.asarray(indices, dtype=np.int64)
        ranks = self.acquisition_order[indices]
        new_order = np.empty(len(indices), dtype=np.int64)
        new_order[np.argsort(ranks, kind="stable")] = np.arange(len(indices))
        return replace(
            self,
            data=self.data[indices],
            labels=self.labels[indices],
            acquisition_order=new_order,
        )


@dataclass
class FeatureSet:
    """Per-trial time-frequency features of shape (N, C, 64, 64)."""

    values: np.ndarray
    labels: np.ndarray
    subject_id: str
    acquisition_order: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.values = _as_float32(self.values)
        if self.values.ndim != 4:
            raise ValueError(f"values must be (N, C, H, W), got {self.values.shape}")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.values.shape[0]
        if self.labels.shape != (n,):
            raise ValueError("labels length must match number of trials")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must contain only 0 and 1")
        if self.acquisition_order is None:
            self.acquisition_order = np.arange(n, dtype=np.int64)
        else:
            self.acquisition_order = np.asarray(self.acquisition_order, dtype=np.int64)
            if self.acquisition_order.shape != (n,):
                raise ValueError("acquisition_order length must match number of trials")
            _check_acquisition_order(self.acquisition_order, n)

    @property
    def n_trials(self) -> int:
        return self.values.shape[0]

    def take(self, indices: np.ndarray) -> "FeatureSet":
        indices = np.asarray(indices, dtype=np.int64)
        ranks = self.acquisition_order[indices]
        new_order = np.empty(len(indices), dtype=np.int64)
        new_order[np.argsort(ranks, kind="stable")] = np.arange(len(indices))
        return FeatureSet(
            values=self.values[indices],
            labels=self.labels[indices],
            subject_id=self.subject_id,
            acquisition_order=new_order,
        )


@dataclass(frozen=True)
class SplitSpec:
    """Chronological/random subset selection rule."""

    mode: str  # "earliest" | "latest" | "random"
    fraction: float
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("earliest", "latest", "random"):
            raise ValueError(f"unknown subset mode: {self.mode!r}")
        if not (0.0 < self.fraction <= 1.0):
            raise ValueError("fraction must be in (0, 1]")


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _write_payload(path: Path, array: np.ndarray, compress: bool) -> None:
    payload = np.ascontiguousarray(array, dtype="<f4").tobytes()
    if compress:
        payload = gzip.compress(payload)
    (path / "data.bin").write_bytes(payload)


def _read_payload(path: Path, shape, compress: bool) -> np.ndarray:
    raw = (path / "data.bin").read_bytes()
    if compress:
        raw = gzip.decompress(raw)
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise StoreFormatError(
            f"payload size {len(raw)} does not match declared shape {tuple(shape)}"
        )
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def save_epoch_store(epochs: EpochSet, path, compress: bool = False) -> None:
    """Persist an EpochSet; ``load_epoch_store`` round-trips bit-exactly."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": STORE_VERSION,
        "kind": "epochs",
        "shape": list(epochs.data.shape),
        "dtype": "float32",
        "byte_order": "little",
        "gzip": bool(compress),
        "subject_id": epochs.subject_id,
        "sampling_rate": epochs.sampling_rate,
        "onset_index": int(epochs.onset_index),
        "labels": epochs.labels.tolist(),
        "acquisition_order": epochs.acquisition_order.tolist(),
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=1))
    _write_payload(path, epochs.data, compress)


def _load_meta(path: Path, expected_kind: str) -> dict:
    meta_path = path / "meta.json"
    if not meta_path.is_file():
        raise StoreFormatError(f"missing meta.json in {path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise StoreFormatError(f"malformed meta.json in {path}: {exc}") from exc
    if meta.get("version") != STORE_VERSION:
        raise StoreFormatError(f"unsupported store version: {meta.get('version')!r}")
    if meta.get("kind") != expected_kind:
        raise StoreFormatError(
            f"store kind {meta.get('kind')!r} does not match expected {expected_kind!r}"
        )
    n = meta["shape"][0]
    if len(meta["labels"]) != n:
        raise StoreFormatError(
            f"declared N={n} disagrees with {len(meta['labels'])} labels"
        )
    if len(meta["acquisition_order"]) != n:
        raise StoreFormatError("acquisition_order length disagrees with declared N")
    return meta


def load_epoch_store(path) -> EpochSet:
    path = Path(path)
    meta = _load_meta(path, "epochs")
    data = _read_payload(path, meta["shape"], meta.get("gzip", False))
    return EpochSet(
        data=data,
        labels=np.asarray(meta["labels"], dtype=np.int64),
        subject_id=meta["subject_id"],
        sampling_rate=meta["sampling_rate"],
        onset_index=meta.get("onset_index", 0),
        acquisition_order=np.asarray(meta["acquisition_order"], dtype=np.int64),
    )


def save_feature_store(features: FeatureSet, path, compress: bool = False) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": STORE_VERSION,
        "kind": "tfr",
        "shape": list(features.values.shape),
        "dtype": "float32",
        "byte_order": "little",
        "gzip": bool(compress),
        "subject_id": features.subject_id,
        "labels": features.labels.tolist(),
        "acquisition_order": features.acquisition_order.tolist(),
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=1))
    _write_payload(path, features.values, compress)


def load_feature_store(path) -> FeatureSet:
    path = Path(path)
    meta = _load_meta(path, "tfr")
    values = _read_payload(path, meta["shape"], meta.get("gzip", False))
    return FeatureSet(
        values=values,
        labels=np.asarray(meta["labels"], dtype=np.int64),
        subject_id=meta["subject_id"],
        acquisition_order=np.asarray(meta["acquisition_order"], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# Class-balance and subsetting manipulation
# ---------------------------------------------------------------------------

def downsample_nontargets(epochs: EpochSet, ratio: int, seed: int = 0) -> EpochSet:
    """Keep all targets; subsample non-targets to ratio x target count.

    If there are fewer non-targets than the requested ratio allows, all are
    kept. Relative acquisition order of the survivors is preserved.
    """
    if ratio < 1:
        raise ValueError("ratio must be >= 1")
    target_idx = np.flatnonzero(epochs.labels == 1)
    nontarget_idx = np.flatnonzero(epochs.labels == 0)
    if len(target_idx) == 0:
        raise ValueError("cannot downsample: no target epochs present")
    n_keep = min(len(nontarget_idx), ratio * len(target_idx))
    rng = np.random.default_rng(seed)
    kept_nt = rng.choice(nontarget_idx, size=n_keep, replace=False)
    keep = np.sort(np.concatenate([target_idx, kept_nt]))
    return epochs.take(keep)


def oversample_targets(epochs: EpochSet, seed: int = 0) -> EpochSet:
    """Duplicate target epochs (with replacement) until the classes are 1:1."""
    target_idx = np.flatnonzero(epochs.labels == 1)
    nontarget_idx = np.flatnonzero(epochs.labels == 0)
    if len(target_idx) == 0 or len(nontarget_idx) == 0:
        raise ValueError("oversampling requires both classes to be present")
    deficit = len(nontarget_idx) - len(target_idx)
    if deficit < 0:
        raise ValueError("more targets than non-targets; nothing to balance against")
    if deficit == 0:
        return epochs.take(np.arange(epochs.n_epochs))
    rng = np.random.default_rng(seed)
    extra = rng.choice(target_idx, size=deficit, replace=True)
    indices = np.concatenate([np.arange(epochs.n_epochs), extra])
    # take() requires unique ranks; build the duplicated set by hand instead.
    data = epochs.data[indices]
    labels = epochs.labels[indices]
    ranks = epochs.acquisition_order[indices]
    # duplicates get fresh ranks appended after the originals, in draw order
    order = np.empty(len(indices), dtype=np.int64)
    order[np.lexsort((np.arange(len(indices)), ranks))] = np.arange(len(indices))
    return replace(epochs, data=data, labels=labels, acquisition_order=order)


def subset(epochs: EpochSet, spec: SplitSpec) -> EpochSet:
    """Select round(fraction * N) epochs chronologically or at random."""
    n = epochs.n_epochs
    size = int(round(spec.fraction * n))
    if size == 0:
        raise ValueError(f"fraction {spec.fraction} selects 0 of {n} epochs")
    if spec.mode == "random":
        rng = np.random.default_rng(spec.seed)
        keep = np.sort(rng.choice(n, size=size, replace=False))
    else:
        by_rank = np.argsort(epochs.acquisition_order)
        keep = np.sort(by_rank[:size] if spec.mode == "earliest" else by_rank[-size:])
    return epochs.take(keep)


def subset_features(features: FeatureSet, spec: SplitSpec) -> FeatureSet:
    """Same selection rule as ``subset``, applied to a FeatureSet."""
    n = features.n_trials
    size = int(round(spec.fraction * n))
    if size == 0:
        raise ValueError(f"fraction {spec.fraction} selects 0 of {n} trials")
    if spec.mode == "random":
        rng = np.random.default_rng(spec.seed)
        keep = np.sort(rng.choice(n, size=size, replace=False))
    else:
        by_rank = np.argsort(features.acquisition_order)
        keep = np.sort(by_rank[:size] if spec.mode == "earliest" else by_rank[-size:])
    return features.take(keep)


def stratified_folds(labels, k: int, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded stratified k-fold split over label array.

    Returns (train_indices, test_indices) pairs; each test fold preserves the
    class ratio within one epoch, folds are disjoint and cover everything.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError("k must be >= 2")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(labels), dtype=np.int64)
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        if 0 < len(idx) < k:
            raise ValueError(f"class {cls} has {len(idx)} members, fewer than k={k}")
        rng.shuffle(idx)
        fold_of[idx] = np.arange(len(idx)) % k
    folds = []
    everything = np.arange(len(labels))
    for f in range(k):
        test = everything[fold_of == f]
        train = everything[fold_of != f]
        folds.append((train, test))
    return folds
