"""Line-delimited sequence datasets.

One JSON object per line, keys in this order::

    {"split": "train", "label": "gamma5", "seq": [[x_00, ...], [x_10, ...], ...]}

``label`` may be null.  ``seq`` holds T rows of d values; d must be constant
across the file.  Floats are written with their shortest round-trip repr, so
export followed by ingest reproduces every value exactly.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from ..bho import TrajectoryBatch, WindowSpec

SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    sequences: dict[str, list[np.ndarray]] = field(default_factory=dict)  # split -> list of (T_i, d)
    labels: dict[str, list[str | None]] = field(default_factory=dict)
    dim: int = 1
    rejected: Counter = field(default_factory=Counter)  # split -> sequences too short for the window

    def __len__(self) -> int:
        return sum(len(v) for v in self.sequences.values())

    def split(self, name: str) -> list[np.ndarray]:
        if not self.sequences.get(name):
            raise DatasetError(f"split {name!r} is empty")
        return self.sequences[name]

    def stacked(self, name: str, length: int | None = None) -> np.ndarray:
        """(n, length, d) array of the first ``length`` steps of each sequence."""
        seqs = self.split(name)
        length = min(len(s) for s in seqs) if length is None else length
        if any(len(s) < length for s in seqs):
            raise DatasetError(f"split {name!r} has sequences shorter than {length}")
        return np.stack([s[:length] for s in seqs])

    def by_label(self, name: str) -> dict[str | None, list[np.ndarray]]:
        out: dict[str | None, list[np.ndarray]] = {}
        for s, lab in zip(self.split(name), self.labels[name]):
            out.setdefault(lab, []).append(s)
        return out

    def add(self, split: str, seq: np.ndarray, label: str | None = None) -> None:
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}")
        seq = np.asarray(seq, dtype=np.float64)
        if seq.ndim == 1:
            seq = seq[:, None]
        if seq.ndim != 2 or seq.shape[1] != self.dim:
            raise DatasetError(f"sequence of shape {seq.shape} does not have dimension {self.dim}")
        self.sequences.setdefault(split, []).append(seq)
        self.labels.setdefault(split, []).append(label)


def _min_len(window: WindowSpec | int | None) -> int:
    if window is None:
        return 1
    if isinstance(window, int):
        return window
    return window.t_past + window.t_future


def ingest(path, window: WindowSpec | int | None = None) -> Dataset:
    """Load a dataset file, dropping (and counting) sequences shorter than the window."""
    need = _min_len(window)
    ds: Dataset | None = None
    seen: set[str] = set()
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                split, label, seq = rec["split"], rec.get("label"), rec["seq"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed record ({exc})") from exc
            arr = np.asarray(seq, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[0] == 0:
                raise DatasetError(f"{path}:{lineno}: seq must be a non-empty list of equal-length rows")
            if ds is None:
                ds = Dataset(dim=arr.shape[1])
            if arr.shape[1] != ds.dim:
                raise DatasetError(f"{path}:{lineno}: ragged dimension {arr.shape[1]} (file uses {ds.dim})")
            if split not in SPLITS:
                raise DatasetError(f"{path}:{lineno}: unknown split {split!r}")
            seen.add(split)
            if len(arr) < need:
                ds.rejected[split] += 1
                continue
            ds.add(split, arr, label)
    if ds is None:
        raise DatasetError(f"{path}: no records")
    empty = sorted(s for s in seen if not ds.sequences.get(s))
    if empty:
        raise DatasetError(f"{path}: split(s) {empty} empty after removing {dict(ds.rejected)} short sequences")
    return ds


def _records(ds: Dataset) -> Iterable[str]:
    for split in SPLITS:
        for seq, label in zip(ds.sequences.get(split, []), ds.labels.get(split, [])):
            yield json.dumps({"split": split, "label": label, "seq": seq.tolist()})


def export(path, ds: Dataset) -> None:
    Path(path).write_text("".join(r + "\n" for r in _records(ds)))


def from_batch(
    batch: TrajectoryBatch,
    fractions=(0.8, 0.1, 0.1),
    label: str | None = None,
    positions_only: bool = True,
) -> Dataset:
    """Partition a simulated batch into consecutive train/val/test blocks."""
    data = batch.positions if positions_only else batch.data
    n = len(data)
    if len(fractions) != 3 or min(fractions) < 0 or not np.isclose(sum(fractions), 1.0):
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    ds = Dataset(dim=data.shape[2])
    for i, seq in enumerate(data):
        split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
        ds.add(split, seq, label)
    return ds


def merge(*parts: Dataset) -> Dataset:
    out = Dataset(dim=parts[0].dim)
    for ds in parts:
        for split in SPLITS:
            for seq, lab in zip(ds.sequences.get(split, []), ds.labels.get(split, [])):
                out.add(split, seq, lab)
    return out


def augment_scale(ds: Dataset, factor_std: float = 0.15, copies: int = 1, rng=None, splits=("train",)) -> Dataset:
    """Originals plus ``copies`` rescaled versions of every sequence in ``splits``.

    Each copy multiplies a whole sequence by one factor 1 + eps, eps ~ N(0, factor_std^2).
    """
    if factor_std < 0:
        raise ValueError("factor_std must be >= 0")
    if copies < 0:
        raise ValueError("copies must be >= 0")
    rng = np.random.default_rng(rng)
    out = Dataset(dim=ds.dim, rejected=Counter(ds.rejected))
    for split in SPLITS:
        seqs = ds.sequences.get(split, [])
        labels = ds.labels.get(split, [])
        for seq, lab in zip(seqs, labels):
            out.add(split, seq.copy(), lab)
        if split not in splits:
            continue
        for _ in range(copies):
            for seq, lab in zip(seqs, labels):
                out.add(split, seq * (1.0 + factor_std * rng.standard_normal()), lab)
    return out
