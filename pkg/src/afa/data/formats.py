"""IDX (MNIST) and CIFAR binary readers.  Gzip-compressed files are accepted."""
from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .dataset import Dataset

__all__ = [
    "DataFormatError",
    "MagicError",
    "TruncatedError",
    "LabelRangeError",
    "read_idx",
    "write_idx",
    "load_idx",
    "load_cifar_binary",
    "write_cifar_binary",
    "IDX_IMAGES",
    "IDX_LABELS",
]

IDX_IMAGES = 0x0803
IDX_LABELS = 0x0801
CIFAR_PIXELS = 3 * 32 * 32


class DataFormatError(ValueError):
    pass


class MagicError(DataFormatError):
    pass


class TruncatedError(DataFormatError):
    pass


class LabelRangeError(DataFormatError):
    pass


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (EOFError, OSError) as exc:
            raise TruncatedError(f"{path}: corrupt gzip stream ({exc})") from None
    return raw


def read_idx(path) -> np.ndarray:
    """Raw uint8 array of an IDX file (``0x0803`` images or ``0x0801`` labels)."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise TruncatedError(f"{path}: {len(raw)} bytes, no IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise MagicError(f"{path}: magic 0x{magic:08x}, expected 0x{IDX_IMAGES:08x} or 0x{IDX_LABELS:08x}")
    ndim = 3 if magic == IDX_IMAGES else 1
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedError(f"{path}: header needs {head} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    size = int(np.prod(dims))
    if len(raw) < head + size:
        raise TruncatedError(f"{path}: payload needs {size} bytes, file has {len(raw) - head}")
    if len(raw) > head + size:
        raise DataFormatError(f"{path}: {len(raw) - head - size} trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=head).reshape(dims)


def write_idx(path, arr: np.ndarray, compress: bool | None = None) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    if arr.ndim == 3:
        magic = IDX_IMAGES
    elif arr.ndim == 1:
        magic = IDX_LABELS
    else:
        raise ValueError("IDX writer supports (n, h, w) images or (n,) labels")
    blob = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
    path = Path(path)
    if compress if compress is not None else path.suffix == ".gz":
        blob = gzip.compress(blob, mtime=0)
    path.write_bytes(blob)


def load_idx(images_path, labels_path, num_classes: int = 10, split: str = "train") -> Dataset:
    """Images scaled to [0, 1] with a trailing channel axis: ``(n, h, w, 1)``."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1:
        raise MagicError("expected an image file (0x0803) and a label file (0x0801)")
    if len(images) != len(labels):
        raise DataFormatError(f"{len(images)} images but {len(labels)} labels")
    if labels.size and labels.max() >= num_classes:
        raise LabelRangeError(f"label {int(labels.max())} outside [0, {num_classes})")
    x = (images.astype(np.float32) / np.float32(255.0))[..., None]
    return Dataset(x, labels.astype(np.int64), split, num_classes, True,
                   {"source": str(images_path)})


def load_cifar_binary(paths, num_classes: int = 10, label_bytes: int = 1, split: str = "train") -> Dataset:
    """Rows of ``label_bytes`` label byte(s) and 3072 planar RGB bytes, returned as (n, 32, 32, 3).

    With two label bytes (CIFAR-100) the second, fine label is used.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    row = label_bytes + CIFAR_PIXELS
    xs, ys = [], []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) == 0 or len(raw) % row:
            raise TruncatedError(f"{path}: {len(raw)} bytes is not a whole number of {row}-byte rows")
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, row)
        labels = arr[:, label_bytes - 1].astype(np.int64)
        if labels.max() >= num_classes:
            raise LabelRangeError(f"{path}: label {int(labels.max())} outside [0, {num_classes})")
        planes = arr[:, label_bytes:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
        xs.append(planes.astype(np.float32) / np.float32(255.0))
        ys.append(labels)
    return Dataset(np.concatenate(xs), np.concatenate(ys), split, num_classes, True,
                   {"source": [str(p) for p in paths]})


def write_cifar_binary(path, images: np.ndarray, labels) -> None:
    """Inverse of :func:`load_cifar_binary` for uint8 (n, 32, 32, 3) images; used for fixtures."""
    images = np.asarray(images, dtype=np.uint8)
    planes = images.transpose(0, 3, 1, 2).reshape(len(images), -1)
    rows = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], planes], axis=1)
    Path(path).write_bytes(rows.tobytes())
