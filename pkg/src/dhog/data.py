"""Datasets and the multi-view augmentation pipeline."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

CIFAR_PIXELS = 3 * 32 * 32


@dataclass
class ToySpec:
    means: tuple = ((-2.0, -2.0), (-2.0, 2.0), (2.0, -2.0), (2.0, 2.0))
    std: float = 0.5
    n_per_cluster: int = 250
    augment_noise_std: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.std < 0 or self.augment_noise_std < 0:
            raise ValueError("toy std and augmentation noise must be non-negative")


@dataclass
class Dataset:
    """Inputs plus labels held aside for evaluation.

    ``x`` is float (n, d) for point data or uint8 (n, ch, h, w) for images.
    ``primary`` marks samples belonging to the labelled training pool when
    extra unlabelled data is interspersed; labels of the rest are -1.
    """

    x: np.ndarray
    labels: np.ndarray | None
    name: str = "dataset"
    primary: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.x)

    @property
    def is_image(self) -> bool:
        return self.x.ndim == 4

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.x[idx], None if self.labels is None else self.labels[idx], self.name,
                       None if self.primary is None else self.primary[idx])


def gen_toy(spec: ToySpec | None = None) -> Dataset:
    """Points from isotropic 2-d Gaussians, ``n_per_cluster`` each, cluster-major order."""
    spec = spec or ToySpec()
    rng = np.random.default_rng(spec.seed)
    means = np.asarray(spec.means, dtype=np.float64)
    pts = [m + spec.std * rng.standard_normal((spec.n_per_cluster, 2)) for m in means]
    labels = np.repeat(np.arange(len(means)), spec.n_per_cluster)
    return Dataset(np.concatenate(pts), labels, "toy")


def write_toy_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", "cluster"])
        for (x, y), c in zip(ds.x, ds.labels):
            w.writerow([repr(float(x)), repr(float(y)), int(c)])


# ---------------------------------------------------------------------------
# CIFAR binary format
# ---------------------------------------------------------------------------

def load_cifar_binary(path, label_bytes: int = 1, label_index: int = 0, name: str | None = None) -> Dataset:
    """Parse a CIFAR-format file: per record ``label_bytes`` then 3072 planar RGB bytes.

    CIFAR-10 uses one label byte.  CIFAR-100 uses two (coarse, fine); pass
    ``label_bytes=2, label_index=0`` for the 20 superclasses.
    """
    raw = Path(path).read_bytes()
    rec = label_bytes + CIFAR_PIXELS
    if len(raw) % rec:
        raise ValueError(f"{path}: size {len(raw)} is not a multiple of the {rec}-byte record (truncated file?)")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, label_index].astype(np.int64)
    images = arr[:, label_bytes:].reshape(-1, 3, 32, 32).copy()
    return Dataset(images, labels, name or Path(path).stem)


def write_cifar_binary(path, images: np.ndarray, labels, extra_label_bytes=None) -> None:
    """Inverse of :func:`load_cifar_binary` (one label byte unless extras are given)."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(images), CIFAR_PIXELS)
    cols = [np.asarray(labels, dtype=np.uint8)[:, None]]
    if extra_label_bytes is not None:
        cols.append(np.asarray(extra_label_bytes, dtype=np.uint8).reshape(len(images), -1))
    Path(path).write_bytes(np.concatenate(cols + [images], axis=1).tobytes())


def _concat(parts: list, name: str) -> Dataset:
    if not parts:
        raise FileNotFoundError(f"no dataset files found for {name}")
    return Dataset(np.concatenate([p.x for p in parts]), np.concatenate([p.labels for p in parts]), name)


def load_dataset(name: str, path=None) -> Dataset:
    """Load a named image dataset from a file or directory of CIFAR-format binaries.

    ``path`` defaults to ``$DHOG_DATA_DIR``.
    """
    root = Path(path or os.environ.get("DHOG_DATA_DIR", "."))
    if not root.exists():
        raise FileNotFoundError(f"dataset path does not exist: {root}")
    if name == "cifar100-20":
        files = [root] if root.is_file() else _find(root, ["train.bin"], "cifar-100-binary")
        return _concat([load_cifar_binary(f, 2, 0) for f in files], name)
    if name == "cifar10":
        files = [root] if root.is_file() else _find(
            root, [f"data_batch_{i}.bin" for i in range(1, 6)], "cifar-10-batches-bin")
    elif name in ("svhn-like", "custom"):
        files = [root] if root.is_file() else sorted(root.glob("*.bin"))
    else:
        raise ValueError(f"unknown dataset {name!r}")
    return _concat([load_cifar_binary(f) for f in files], name)


def _find(root: Path, names: list, subdir: str) -> list:
    for base in (root, root / subdir):
        found = [base / n for n in names if (base / n).is_file()]
        if found:
            return found
    raise FileNotFoundError(f"none of {names} found under {root} or {root / subdir}")


def intersperse(primary: Dataset, extra: Dataset) -> Dataset:
    """Append unlabelled ``extra`` data; batches then spread primary samples evenly."""
    labels = np.concatenate([primary.labels, np.full(len(extra), -1, dtype=np.int64)])
    mask = np.concatenate([np.ones(len(primary), bool), np.zeros(len(extra), bool)])
    return Dataset(np.concatenate([primary.x, extra.x]), labels, primary.name, mask)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentationPolicy:
    """Stochastic view generator, applied in field order: crop, flip, jitter, grayscale, noise."""

    crop_size: int | None = None
    crop_pad: int = 0
    flip_p: float = 0.0
    jitter: float = 0.0
    grayscale_p: float = 0.0
    noise_std: float = 0.0
    repeats: int = 4

    def __post_init__(self):
        if self.repeats < 2:
            raise ValueError(f"need at least 2 augmentation repeats, got {self.repeats}")
        for p in (self.flip_p, self.grayscale_p):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")
        if self.noise_std < 0 or self.jitter < 0 or self.crop_pad < 0:
            raise ValueError("noise, jitter and padding must be non-negative")


def toy_policy(noise_std: float = 0.15, repeats: int = 4) -> AugmentationPolicy:
    return AugmentationPolicy(noise_std=noise_std, repeats=repeats)


def image_policy(crop_size: int = 20, repeats: int = 4, **overrides) -> AugmentationPolicy:
    base = dict(crop_size=crop_size, crop_pad=4, flip_p=0.5, jitter=0.2, grayscale_p=0.5, repeats=repeats)
    base.update(overrides)
    return AugmentationPolicy(**base)


def _to_float(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float64) / 255.0 if x.dtype == np.uint8 else x.astype(np.float64)


def _random_crop(x, size, pad, rng):
    n, ch, h, w = x.shape
    if size > h + 2 * pad or size > w + 2 * pad:
        raise ValueError(f"crop size {size} exceeds padded image {h + 2 * pad}x{w + 2 * pad}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    oy = rng.integers(0, h + 2 * pad - size + 1, size=n)
    ox = rng.integers(0, w + 2 * pad - size + 1, size=n)
    rows = oy[:, None] + np.arange(size)
    cols = ox[:, None] + np.arange(size)
    return xp[np.arange(n)[:, None, None, None], np.arange(ch)[None, :, None, None],
              rows[:, None, :, None], cols[:, None, None, :]]


def center_crop(x: np.ndarray, size: int) -> np.ndarray:
    h, w = x.shape[2:]
    if size > h or size > w:
        raise ValueError(f"crop size {size} exceeds image {h}x{w}")
    top, left = (h - size) // 2, (w - size) // 2
    return x[:, :, top:top + size, left:left + size]


def _gray(x):
    g = 0.299 * x[:, 0] + 0.587 * x[:, 1] + 0.114 * x[:, 2]
    return np.repeat(g[:, None], x.shape[1], axis=1)


def augment_once(x: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    x = _to_float(x)
    n = len(x)
    if x.ndim == 4:
        if policy.crop_size is not None:
            x = _random_crop(x, policy.crop_size, policy.crop_pad, rng)
        if policy.flip_p > 0:
            flip = rng.random(n) < policy.flip_p
            x = np.where(flip[:, None, None, None], x[..., ::-1], x)
        if policy.jitter > 0:
            b = rng.uniform(-policy.jitter, policy.jitter, size=(n, 1, 1, 1))
            c = rng.uniform(1 - policy.jitter, 1 + policy.jitter, size=(n, 1, 1, 1))
            mu = x.mean(axis=(1, 2, 3), keepdims=True)
            x = np.clip((x - mu) * c + mu + b, 0.0, 1.0)
        if policy.grayscale_p > 0:
            gray = rng.random(n) < policy.grayscale_p
            x = np.where(gray[:, None, None, None], _gray(x), x)
    if policy.noise_std > 0:
        x = x + policy.noise_std * rng.standard_normal(x.shape)
    return np.ascontiguousarray(x)


def augment(x: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> list:
    """``policy.repeats`` independently augmented float views of ``x``; ``x`` is not modified."""
    return [augment_once(x, policy, rng) for _ in range(policy.repeats)]


def eval_view(x: np.ndarray, policy: AugmentationPolicy) -> np.ndarray:
    """Deterministic view used for evaluation: centre crop, [0, 1] scaling, nothing random."""
    x = _to_float(x)
    if x.ndim == 4 and policy.crop_size is not None:
        x = center_crop(x, policy.crop_size)
    return np.ascontiguousarray(x)


# ---------------------------------------------------------------------------
# minibatches
# ---------------------------------------------------------------------------

@dataclass
class MultiViewBatch:
    views: list
    indices: np.ndarray
    labels: np.ndarray | None = field(default=None, repr=False)  # evaluation only


def epoch_order(ds: Dataset, rng: np.random.Generator) -> np.ndarray:
    """Shuffled sample order; primary samples are spread evenly when data is interspersed."""
    if ds.primary is None or ds.primary.all():
        return rng.permutation(len(ds))
    prim = rng.permutation(np.flatnonzero(ds.primary))
    extra = rng.permutation(np.flatnonzero(~ds.primary))
    n = len(ds)
    order = np.empty(n, dtype=np.intp)
    slots = np.floor(np.arange(len(prim)) * n / len(prim)).astype(np.intp)
    is_slot = np.zeros(n, bool)
    is_slot[slots] = True
    order[is_slot] = prim
    order[~is_slot] = extra
    return order


def batch_rng(seed: int, epoch: int, batch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, batch])


def batches(ds: Dataset, batch_size: int, policy: AugmentationPolicy, seed: int,
            epoch: int = 0) -> Iterator[MultiViewBatch]:
    """Multi-view minibatches for one epoch; the final partial batch is dropped.

    Each batch draws its augmentations from a stream keyed by (seed, epoch, batch).
    """
    if batch_size < 1 or batch_size > len(ds):
        raise ValueError(f"batch size {batch_size} must be in 1..{len(ds)}")
    order = epoch_order(ds, np.random.default_rng([seed, epoch]))
    for b in range(len(ds) // batch_size):
        idx = order[b * batch_size:(b + 1) * batch_size]
        views = augment(ds.x[idx], policy, batch_rng(seed, epoch, b))
        yield MultiViewBatch(views, idx, None if ds.labels is None else ds.labels[idx])
