"""Data loading (IDX, CSV) and synthetic context benchmarks."""

from __future__ import annotations

import csv
import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .encoders import ContextSpec, VarSpec

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
N_CORRUPTIONS = 15
N_SEVERITIES = 5


class ParseError(ValueError):
    pass


@dataclass
class Dataset:
    data: np.ndarray
    contexts: dict[str, np.ndarray] = field(default_factory=dict)
    labels: np.ndarray | None = None
    split: str = "train"

    def __post_init__(self):
        n = len(self.data)
        for name, col in self.contexts.items():
            if len(col) != n:
                raise ValueError(f"context field {name!r} has {len(col)} rows, data has {n}")
        if self.labels is not None and len(self.labels) != n:
            raise ValueError(f"labels have {len(self.labels)} rows, data has {n}")

    def __len__(self) -> int:
        return len(self.data)

    def subset(self, idx, split: str | None = None) -> Dataset:
        idx = np.asarray(idx)
        return Dataset(
            self.data[idx],
            {k: v[idx] for k, v in self.contexts.items()},
            None if self.labels is None else self.labels[idx],
            split or self.split,
        )


def _open(path: Path, mode: str):
    return gzip.open(path, mode) if path.suffix == ".gz" else open(path, mode)


# --------------------------------------------------------------------------
# IDX


def load_idx(path: str | os.PathLike) -> np.ndarray:
    """Decode an IDX image (magic 2051) or label (2049) file.

    Images come back as float64 ``(N, 1, rows, cols)`` in ``[0, 256)``; labels
    as int64 ``(N,)``.
    """
    path = Path(path)
    with _open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 8:
        raise ParseError(f"{path}: header truncated at byte {len(buf)} (need at least 8)")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic == IMAGE_MAGIC:
        ndim = 3
    elif magic == LABEL_MAGIC:
        ndim = 1
    else:
        raise ParseError(f"{path}: bad magic {magic} at byte 0 (expected {IMAGE_MAGIC} or {LABEL_MAGIC})")
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise ParseError(f"{path}: header truncated at byte {len(buf)} (need {head})")
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    expected = head + int(np.prod(dims))
    if len(buf) != expected:
        raise ParseError(f"{path}: payload size mismatch, expected {expected} bytes, got {len(buf)}")
    payload = np.frombuffer(buf, dtype=np.uint8, offset=head).reshape(dims)
    if magic == LABEL_MAGIC:
        return payload.astype(np.int64)
    return payload.astype(np.float64)[:, None]


def write_idx(path: str | os.PathLike, array: np.ndarray) -> Path:
    """Write uint8 images ``(N, [1,] H, W)`` or labels ``(N,)`` as IDX."""
    path = Path(path)
    arr = np.asarray(array)
    if arr.ndim == 4:
        if arr.shape[1] != 1:
            raise ValueError("IDX images must have one channel")
        arr = arr[:, 0]
    if arr.ndim not in (1, 3):
        raise ValueError(f"cannot write a rank-{arr.ndim} array as IDX")
    if np.any(arr < 0) or np.any(arr > 255):
        raise ValueError("IDX payload must fit in uint8")
    magic = LABEL_MAGIC if arr.ndim == 1 else IMAGE_MAGIC
    header = struct.pack(f">I{arr.ndim}I", magic, *arr.shape)
    path.parent.mkdir(parents=True, exist_ok=True)
    with _open(path, "wb") as fh:
        fh.write(header + np.asarray(arr, dtype=np.uint8).tobytes())
    return path


def load_mnist(images: str | os.PathLike, labels: str | os.PathLike) -> Dataset:
    x, y = load_idx(images), load_idx(labels)
    if x.ndim != 4 or y.ndim != 1:
        raise ParseError("expected an image file and a label file")
    return Dataset(x, {}, y)


# --------------------------------------------------------------------------
# CSV


def load_csv(
    path: str | os.PathLike,
    data_columns: list[str] | None = None,
    context_spec: ContextSpec | None = None,
    label_column: str | None = None,
) -> Dataset:
    """Read a headered CSV; columns not named as context or label are data."""
    path = Path(path)
    with _open(path, "rt") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, header row required") from None
        rows = [r for r in reader if r]
    cols = {name: i for i, name in enumerate(header)}
    ctx_names = context_spec.names if context_spec else []
    for name in ctx_names + ([label_column] if label_column else []) + (data_columns or []):
        if name not in cols:
            raise ParseError(f"{path}: column {name!r} not in header")
    if data_columns is None:
        data_columns = [h for h in header if h not in ctx_names and h != label_column]

    def column(name, dtype=np.float64):
        i = cols[name]
        try:
            return np.array([float(r[i]) for r in rows], dtype=np.float64).astype(dtype)
        except (ValueError, IndexError) as err:
            raise ParseError(f"{path}: bad value in column {name!r} ({err})") from None

    data = np.stack([column(c) for c in data_columns], axis=1) if data_columns else np.zeros((len(rows), 0))
    contexts = {}
    for var in context_spec.variables if context_spec else []:
        contexts[var.name] = column(var.name, np.int64 if var.kind == "discrete" else np.float64)
    labels = column(label_column, np.int64) if label_column else None
    ds = Dataset(data, contexts, labels)
    if context_spec:
        context_spec.validate(ds.contexts)
    return ds


def write_csv(path: str | os.PathLike, columns: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    names = list(columns)
    n = len(next(iter(columns.values()))) if columns else 0
    path.parent.mkdir(parents=True, exist_ok=True)
    with _open(path, "wt") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for i in range(n):
            w.writerow([repr(columns[k][i].item()) if hasattr(columns[k][i], "item") else columns[k][i]
                        for k in names])
    return path


# --------------------------------------------------------------------------
# rotation context


def rotation_spec(n_rot: int = 64, encoder: str = "uniform", mapping: str = "integer") -> ContextSpec:
    return ContextSpec([VarSpec("rotation", cardinality=n_rot, mapping=mapping, encoder=encoder)])


def rotate_images(images: np.ndarray, steps: np.ndarray, n_rot: int = 64, quantize: bool = True) -> np.ndarray:
    """Rotate each ``(C, H, W)`` image by ``steps * 360 / n_rot`` degrees (bilinear, zero fill)."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[-1] != images.shape[-2]:
        raise ValueError(f"rotation needs square images, got {images.shape[-2:]}")
    out = images.copy()
    for i, c in enumerate(np.asarray(steps)):
        if c % n_rot == 0:
            continue
        r = ndimage.rotate(images[i], c * 360.0 / n_rot, axes=(-1, -2), reshape=False,
                           order=1, mode="constant", cval=0.0)
        out[i] = np.clip(np.round(r), 0, 255) if quantize else r
    return out


def rotate_context(images: np.ndarray, n_rot: int = 64, rng=None, labels=None) -> Dataset:
    rng = rng if rng is not None else np.random.default_rng(0)
    c = rng.integers(0, n_rot, size=len(images))
    return Dataset(rotate_images(images, c, n_rot), {"rotation": c}, labels)


# --------------------------------------------------------------------------
# corruption context


def _box_blur(x, k):
    return ndimage.uniform_filter(x, size=(1, k, k), mode="nearest")


def _corruption_delta(kind: int, x: np.ndarray, rng) -> np.ndarray:
    """Full-strength perturbation ``f(x) - x`` of a ``(C, H, W)`` image for type ``kind``."""
    c, h, w = x.shape
    mean = x.mean()
    if kind == 1:  # gaussian noise
        return rng.normal(0, 80, x.shape)
    if kind == 2:  # shot noise
        return rng.poisson(np.maximum(x, 0) / 8.0) * 8.0 - x
    if kind == 3:  # impulse noise
        u = rng.random(x.shape)
        return np.where(u < 0.15, 0 - x, np.where(u > 0.85, 255 - x, 0))
    if kind == 4:  # speckle
        return x * rng.normal(0, 0.6, x.shape)
    if kind == 5:  # box blur
        return _box_blur(x, 5) - x
    if kind == 6:  # horizontal motion blur
        return ndimage.uniform_filter1d(x, 7, axis=2, mode="nearest") - x
    if kind == 7:  # gaussian blur
        return ndimage.gaussian_filter(x, sigma=(0, 2, 2)) - x
    if kind == 8:  # contrast loss
        return (mean - x) * 0.8
    if kind == 9:  # brightness
        return np.full_like(x, 120.0)
    if kind == 10:  # darken
        return -0.7 * x
    if kind == 11:  # pixelate
        f = 4
        small = x[:, ::f, ::f]
        big = np.repeat(np.repeat(small, f, axis=1), f, axis=2)[:, :h, :w]
        return big - x
    if kind == 12:  # coarse quantization
        return np.round(x / 96.0) * 96.0 - x
    if kind == 13:  # fog: smooth low-frequency haze
        haze = ndimage.gaussian_filter(rng.random((1, h, w)), sigma=4)
        haze = (haze - haze.min()) / (np.ptp(haze) + 1e-12)
        return np.broadcast_to(haze * 150.0, x.shape).copy()
    if kind == 14:  # elastic-like shift
        return np.roll(x, (2, 2), axis=(1, 2)) - x
    if kind == 15:  # occlusion patch
        d = np.zeros_like(x)
        r0, c0 = rng.integers(0, max(h - h // 3, 1)), rng.integers(0, max(w - w // 3, 1))
        d[:, r0 : r0 + h // 3, c0 : c0 + w // 3] = -x[:, r0 : r0 + h // 3, c0 : c0 + w // 3]
        return d
    raise ValueError(f"corruption type {kind} outside 1..{N_CORRUPTIONS}")


def corrupt(images: np.ndarray, types: np.ndarray, severities: np.ndarray, rng) -> np.ndarray:
    """Apply ``x + (s / 5) * delta_type(x)``, clipped to ``[0, 255]`` and rounded."""
    images = np.asarray(images, dtype=np.float64)
    types, severities = np.asarray(types), np.asarray(severities)
    if np.any(severities < 1) or np.any(severities > N_SEVERITIES):
        raise ValueError(f"severity must be in 1..{N_SEVERITIES}")
    if np.any(types < 1) or np.any(types > N_CORRUPTIONS):
        raise ValueError(f"corruption type must be in 1..{N_CORRUPTIONS}")
    out = np.empty_like(images)
    for i, (t, s) in enumerate(zip(types, severities)):
        delta = _corruption_delta(int(t), images[i], rng)
        out[i] = np.clip(np.round(images[i] + (s / N_SEVERITIES) * delta), 0, 255)
    return out


def corrupt_context(images: np.ndarray, rng=None, labels=None, types: int = N_CORRUPTIONS,
                    severities: int = N_SEVERITIES) -> Dataset:
    if severities < 1:
        raise ValueError("at least one severity level is required")
    rng = rng if rng is not None else np.random.default_rng(0)
    t = rng.integers(1, types + 1, size=len(images))
    s = rng.integers(1, severities + 1, size=len(images))
    return Dataset(corrupt(images, t, s, rng), {"type": t, "severity": s}, labels)


CORRUPTION_SPEC = ContextSpec([
    VarSpec("type", cardinality=N_CORRUPTIONS, low=1),
    VarSpec("severity", cardinality=N_SEVERITIES, low=1),
])


# --------------------------------------------------------------------------
# time series


def sliding_windows(series: np.ndarray, w: int = 8) -> np.ndarray:
    """One window per step: window ``t`` holds points ``t-w+1 .. t``, left-padded by replication."""
    series = np.asarray(series, dtype=np.float64)
    if series.ndim == 1:
        series = series[:, None]
    if w < 1 or len(series) < 1:
        raise ValueError("need w >= 1 and at least one time step")
    padded = np.concatenate([np.repeat(series[:1], w - 1, axis=0), series], axis=0)
    idx = np.arange(len(series))[:, None] + np.arange(w)[None, :]
    return padded[idx]


# --------------------------------------------------------------------------
# toy densities


def two_moons(n: int, rng, noise: float = 0.1) -> np.ndarray:
    n_a = n // 2
    n_b = n - n_a
    ta, tb = rng.random(n_a) * np.pi, rng.random(n_b) * np.pi
    a = np.stack([np.cos(ta), np.sin(ta)], axis=1)
    b = np.stack([1.0 - np.cos(tb), 0.5 - np.sin(tb)], axis=1)
    x = np.concatenate([a, b]) + rng.normal(0, noise, (n, 2))
    x = x - np.array([0.5, 0.25])
    return x[rng.permutation(n)]


def rotate_points(x: np.ndarray, degrees: np.ndarray) -> np.ndarray:
    th = np.deg2rad(np.asarray(degrees, dtype=np.float64))
    cos, sin = np.cos(th), np.sin(th)
    return np.stack([cos * x[:, 0] - sin * x[:, 1], sin * x[:, 0] + cos * x[:, 1]], axis=1)


def two_moons_context(n: int, n_contexts: int = 8, rng=None, noise: float = 0.1) -> Dataset:
    """Centered two moons rotated by ``c * 360 / n_contexts`` degrees per sample."""
    if n_contexts < 1:
        raise ValueError("n_contexts must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    c = rng.integers(0, n_contexts, size=n)
    x = rotate_points(two_moons(n, rng, noise), c * 360.0 / n_contexts)
    return Dataset(x, {"rotation": c})


# --------------------------------------------------------------------------
# splits


def split_dataset(ds: Dataset, seed: int = 0, fractions=(0.8, 0.1, 0.1),
                  fold: int | None = None, n_folds: int = 5) -> dict[str, Dataset]:
    """Seeded shuffle into train/val/test. With ``fold`` the test part is that
    cross-validation fold and val is carved from the rest."""
    n = len(ds)
    perm = np.random.default_rng(seed).permutation(n)
    if fold is not None:
        if not 0 <= fold < n_folds:
            raise ValueError(f"fold {fold} outside [0, {n_folds})")
        parts = np.array_split(perm, n_folds)
        test = parts[fold]
        rest = np.concatenate([p for i, p in enumerate(parts) if i != fold])
        n_val = int(round(len(rest) * fractions[1] / (fractions[0] + fractions[1])))
        val, train = rest[:n_val], rest[n_val:]
    else:
        if abs(sum(fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        n_tr = int(round(n * fractions[0]))
        n_val = int(round(n * fractions[1]))
        train, val, test = perm[:n_tr], perm[n_tr : n_tr + n_val], perm[n_tr + n_val :]
    return {"train": ds.subset(train, "train"), "val": ds.subset(val, "val"), "test": ds.subset(test, "test")}
