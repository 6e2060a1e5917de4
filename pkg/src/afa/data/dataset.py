"""Labelled sample sets and their on-disk form (JSON manifest + f32 payload)."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["Dataset", "save_dataset", "load_dataset", "first_n_per_class"]


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    split: str = "train"
    num_classes: int | None = None
    image: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.y.ndim != 1 or len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} samples but {self.y.shape} labels")
        if self.num_classes is None:
            self.num_classes = int(self.y.max()) + 1 if len(self.y) else 0
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.image and self.x.size and (self.x.min() < 0 or self.x.max() > 1):
            raise ValueError("image values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.y[idx], self.split, self.num_classes, self.image, dict(self.meta))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)


def first_n_per_class(ds: Dataset, n: int) -> Dataset:
    """Deterministic desk-scale subset: the first ``n`` samples of every class in file order."""
    keep = []
    for c in range(ds.num_classes):
        rows = np.flatnonzero(ds.y == c)[:n]
        if len(rows) < n:
            raise ValueError(f"class {c} has only {len(rows)} samples, need {n}")
        keep.append(rows)
    idx = np.sort(np.concatenate(keep))
    out = ds.subset(idx)
    out.meta["subset"] = f"first {n} per class"
    return out


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    manifest = {
        "split": ds.split,
        "num_classes": ds.num_classes,
        "image": ds.image,
        "shape": list(ds.x.shape),
        "count": len(ds),
        "meta": ds.meta,
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    payload = np.ascontiguousarray(ds.x, dtype="<f4").tobytes() + np.ascontiguousarray(ds.y, dtype="<i4").tobytes()
    path.with_suffix(".bin").write_bytes(payload)


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    raw = path.with_suffix(".bin").read_bytes()
    shape = tuple(manifest["shape"])
    nx = int(np.prod(shape))
    if len(raw) != 4 * nx + 4 * manifest["count"]:
        raise ValueError(f"{path}: payload has {len(raw)} bytes, manifest implies {4 * nx + 4 * manifest['count']}")
    x = np.frombuffer(raw[:4 * nx], dtype="<f4").reshape(shape)
    y = np.frombuffer(raw[4 * nx:], dtype="<i4").astype(np.int64)
    return Dataset(x.copy(), y, manifest["split"], manifest["num_classes"], manifest["image"], manifest["meta"])
