"""IDX datasets, preprocessing, class-balanced redaction and batching."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import BadMagic, DimensionMismatch, EmptyDataset, Truncated, UnlabeledDataset
from .tensor import make_rng

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

# stream ids for make_rng
_REDACT_STREAM = 11
_SHUFFLE_STREAM = 12


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [N,1,H,W] or [N,D]
    labels: np.ndarray | None
    class_count: int
    name: str = ""
    mean: np.ndarray | float | None = None  # stored by preprocess

    def __post_init__(self):
        if self.labels is not None:
            if len(self.labels) != len(self.images):
                raise DimensionMismatch(f"{len(self.images)} images but {len(self.labels)} labels")
            if len(self.labels) and int(self.labels.max()) >= self.class_count:
                raise DimensionMismatch(f"label {int(self.labels.max())} >= class count {self.class_count}")

    def __len__(self):
        return len(self.images)

    @property
    def labeled(self):
        return self.labels is not None

    def subset(self, indices, name=None):
        indices = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[indices]
        return replace(self, images=self.images[indices], labels=labels, name=name or self.name)

    def unlabeled(self):
        return replace(self, labels=None)


@dataclass(frozen=True)
class RedactionSpec:
    p: int
    seed: int = 0

    def __post_init__(self):
        if self.p < 1:
            raise ValueError(f"samples per class must be >= 1, got {self.p}")


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int = 500
    seed: int = 0
    drop_last: bool = False


# ---------------------------------------------------------------- IDX io


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise Truncated(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise BadMagic(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise Truncated(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise Truncated(f"{path}: expected {count} bytes of data, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path=None, name=None, class_count=None) -> Dataset:
    images = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, images_path)
    labels = None
    if labels_path is not None:
        labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, labels_path).astype(np.int64)
        if len(labels) != len(images):
            raise DimensionMismatch(f"{images_path} holds {len(images)} images, {labels_path} holds {len(labels)} labels")
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels is not None and len(labels) else 0
    return Dataset(images[:, None].astype(np.float32), labels, class_count, name or Path(images_path).name)


def save_idx(ds: Dataset, images_path, labels_path=None, compress=None):
    """Write raw (0..255) images and labels back to IDX; gzip when the name ends in .gz."""
    imgs = ds.images.reshape(len(ds), *ds.images.shape[-2:]) if ds.images.ndim == 4 else ds.images
    out = [(images_path, IMAGES_MAGIC, imgs)]
    if labels_path is not None:
        if ds.labels is None:
            raise UnlabeledDataset("dataset has no labels to write")
        out.append((labels_path, LABELS_MAGIC, ds.labels))
    for path, magic, arr in out:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        raw = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.astype(np.uint8).tobytes()
        gz = path.suffix == ".gz" if compress is None else compress
        path.write_bytes(gzip.compress(raw, mtime=0) if gz else raw)


# ---------------------------------------------------------------- transforms


def preprocess(ds: Dataset, mean=None, mode="per_pixel") -> Dataset:
    """Scale pixels to [0, 1] and subtract the training mean.

    Pass the training split's stored ``mean`` when preprocessing a test split.
    """
    x = ds.images.astype(np.float64) / 255.0
    if mean is None:
        if len(x) == 0:
            raise EmptyDataset("cannot compute a mean over an empty dataset")
        if mode == "per_pixel":
            mean = x.mean(axis=0)
        elif mode == "global":
            mean = float(x.mean())
        else:
            raise ValueError(f"unknown mean mode {mode!r}")
    return replace(ds, images=(x - mean).astype(np.float32), mean=mean)


def redact_indices(ds: Dataset, spec: RedactionSpec) -> np.ndarray:
    if ds.labels is None:
        raise UnlabeledDataset("redaction needs labels")
    rng = make_rng(spec.seed, _REDACT_STREAM)
    picked = []
    for c in range(ds.class_count):
        bucket = np.flatnonzero(ds.labels == c)
        picked.append(rng.permutation(bucket)[:spec.p])
    return rng.permutation(np.concatenate(picked))


def redact(ds: Dataset, spec: RedactionSpec) -> Dataset:
    return ds.subset(redact_indices(ds, spec), name=f"{ds.name}[p={spec.p}]")


def batches(ds, plan: BatchPlan, epoch: int) -> list[np.ndarray]:
    """Index arrays for one epoch; a dataset no larger than a batch is one full batch.

    ``ds`` may be a dataset or just its length.
    """
    n = ds if isinstance(ds, (int, np.integer)) else len(ds)
    if n == 0:
        return []
    order = make_rng(plan.seed, _SHUFFLE_STREAM, epoch).permutation(n)
    size = plan.batch_size
    out = [order[i:i + size] for i in range(0, n, size)]
    if plan.drop_last and len(out) > 1 and len(out[-1]) < size:
        out.pop()
    return out
