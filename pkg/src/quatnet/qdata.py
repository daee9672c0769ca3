"""Real-data-to-quaternion mappings and dataset handling.

Static mappings: RGB into the imaginary components, grayscale into the
real component, 3D points into pure quaternions, and a time-frequency
derivative stack for acoustic-style features.  A synthetic rotated
pattern task provides a deterministic end-to-end classification fixture.

Datasets live on disk as a directory of QT1 tensor files plus a UTF-8,
LF-terminated manifest with one ``relative-path<TAB>label`` line per
sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DatasetError, ShapeError
from .qcore import Quaternion, sandwich_planes, versor
from .qtensor import QTensor, load_qt, save_qt

MANIFEST_NAME = "manifest.txt"


@dataclass
class Dataset:
    """Samples plus bookkeeping for a classification task."""

    samples: list[tuple[QTensor, int]]
    n_classes: int

    def __len__(self) -> int:
        return len(self.samples)


# ---------------------------------------------------------------------------
# Static mappings.
# ---------------------------------------------------------------------------

def _normalize_pixels(image: np.ndarray) -> np.ndarray:
    """Scale integer images to [0, 1]; floats pass through unchanged."""
    image = np.asarray(image)
    if np.issubdtype(image.dtype, np.integer):
        return image.astype(np.float64) / np.iinfo(image.dtype).max
    return image.astype(np.float64)


def map_rgb(image: np.ndarray) -> QTensor:
    """Encode R, G, B into the imaginary components: q = 0 + Ri + Gj + Bk.

    Input is (H, W, 3); output is (H, W, 1) with zero real plane.
    Integer images are scaled to [0, 1] first.
    """
    image = _normalize_pixels(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got {image.shape}")
    h, w, _ = image.shape
    planes = np.zeros((4, h, w, 1))
    planes[1, :, :, 0] = image[:, :, 0]
    planes[2, :, :, 0] = image[:, :, 1]
    planes[3, :, :, 0] = image[:, :, 2]
    return QTensor(planes)


def map_grayscale(image: np.ndarray) -> QTensor:
    """Map gray values to the real component: q = g + 0i + 0j + 0k."""
    image = _normalize_pixels(image)
    if image.ndim != 2:
        raise ShapeError(f"expected (H, W) image, got {image.shape}")
    planes = np.zeros((4,) + image.shape + (1,))
    planes[0, :, :, 0] = image
    return QTensor(planes)


def map_pointcloud(points: np.ndarray) -> QTensor:
    """Map (x, y, z) coordinates to pure quaternions: q = 0 + xi + yj + zk.

    Output is (N, 1); rotating the points in 3D equals sandwich-rotating
    the mapped tensor, which is what makes equivariant layers meaningful.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ShapeError(f"expected (N, 3) points, got {points.shape}")
    planes = np.zeros((4, points.shape[0], 1))
    planes[1, :, 0] = points[:, 0]
    planes[2, :, 0] = points[:, 1]
    planes[3, :, 0] = points[:, 2]
    return QTensor(planes)


def map_derivative_stack(series: np.ndarray) -> QTensor:
    """Stack a feature series with its temporal derivatives.

    ``series`` is (T, F): per frame t and feature f,
    q = 0 + e i + (de/dt) j + (d2e/dt2) k, using central differences on
    the interior; the edge frames copy their nearest interior value so a
    linear ramp yields a constant first-derivative plane.  Output is
    (T, F, 1).
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 2:
        raise ShapeError(f"expected (T, F) series, got {series.shape}")
    t = series.shape[0]
    if t < 3:
        raise ShapeError(f"need at least 3 frames, got {t}")
    d1 = np.empty_like(series)
    d1[1:-1] = (series[2:] - series[:-2]) / 2.0
    d1[0] = d1[1]
    d1[-1] = d1[-2]
    d2 = np.empty_like(series)
    d2[1:-1] = series[2:] - 2.0 * series[1:-1] + series[:-2]
    d2[0] = d2[1]
    d2[-1] = d2[-2]
    planes = np.zeros((4,) + series.shape + (1,))
    planes[1, :, :, 0] = series
    planes[2, :, :, 0] = d1
    planes[3, :, :, 0] = d2
    return QTensor(planes)


# ---------------------------------------------------------------------------
# Synthetic rotated-pattern classification task.
# ---------------------------------------------------------------------------

SYNTH_CLASSES = 4
SYNTH_SHAPE = (8, 8, 1)
SYNTH_MAX_ANGLE = math.pi / 8.0


def synth_prototypes(seed: int) -> list[QTensor]:
    """The four fixed class prototypes for a seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return [QTensor(rng.standard_normal((4,) + SYNTH_SHAPE))
            for _ in range(SYNTH_CLASSES)]


def synth_pattern(seed: int, n_samples: int, noise_sigma: float,
                  rotate: bool = True,
                  sample_seed: int | None = None) -> Dataset:
    """Rotated, noised copies of four random prototype tensors.

    Each sample takes the prototype of its class (assigned round-robin),
    sandwich-rotates every element by one small random versor, and adds
    componentwise Gaussian noise.  Deterministic per seed; prototypes
    depend only on ``seed``, so a different ``sample_seed`` yields a
    held-out draw from the same task.
    """
    if noise_sigma < 0:
        raise ShapeError(f"noise sigma must be >= 0, got {noise_sigma}")
    protos = synth_prototypes(seed)
    if sample_seed is None:
        sample_seed = seed + 1
    rng = np.random.Generator(np.random.PCG64(sample_seed))
    samples: list[tuple[QTensor, int]] = []
    for n in range(n_samples):
        label = n % SYNTH_CLASSES
        planes = protos[label].planes
        if rotate:
            angle = rng.uniform(-SYNTH_MAX_ANGLE, SYNTH_MAX_ANGLE)
            axis = rng.standard_normal(3)
            axis /= np.linalg.norm(axis)
            w = versor(angle, axis).as_array()[:, None, None, None]
            planes = sandwich_planes(w, planes)
        if noise_sigma > 0:
            planes = planes + rng.normal(0.0, noise_sigma, planes.shape)
        else:
            planes = planes.copy()
        samples.append((QTensor(planes), label))
    return Dataset(samples, SYNTH_CLASSES)


def nearest_prototype_accuracy(dataset: Dataset, seed: int) -> float:
    """Accuracy of classifying by closest prototype (oracle baseline)."""
    protos = synth_prototypes(seed)
    hits = 0
    for tensor, label in dataset.samples:
        dists = [float(np.sum((tensor.planes - p.planes) ** 2))
                 for p in protos]
        hits += int(np.argmin(dists) == label)
    return hits / len(dataset)


# ---------------------------------------------------------------------------
# Dataset directory layout.
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset, directory) -> Path:
    """Write samples as QT1 files plus a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for n, (tensor, label) in enumerate(dataset.samples):
        rel = f"sample_{n:05d}.qt"
        save_qt(tensor, directory / rel)
        lines.append(f"{rel}\t{label}\n")
    manifest = directory / MANIFEST_NAME
    manifest.write_text("".join(lines), encoding="utf-8", newline="\n")
    return manifest


def load_dataset(manifest_path, n_classes: int | None = None) -> Dataset:
    """Read a manifest and its sample tensors."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DatasetError(f"manifest not found: {manifest_path}")
    base = manifest_path.parent
    samples: list[tuple[QTensor, int]] = []
    labels: list[int] = []
    for lineno, raw in enumerate(
            manifest_path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DatasetError(
                f"{manifest_path}:{lineno}: expected 'path<TAB>label'")
        rel, label_text = parts
        try:
            label = int(label_text)
        except ValueError as exc:
            raise DatasetError(
                f"{manifest_path}:{lineno}: bad label {label_text!r}"
            ) from exc
        path = base / rel
        if not path.is_file():
            raise DatasetError(f"{manifest_path}:{lineno}: missing sample "
                               f"file {path}")
        try:
            samples.append((load_qt(path), label))
        except Exception as exc:
            raise DatasetError(f"{path}: unreadable sample") from exc
        labels.append(label)
    if not samples:
        raise DatasetError(f"{manifest_path}: no samples listed")
    inferred = max(labels) + 1
    if n_classes is not None:
        if inferred > n_classes:
            raise DatasetError(
                f"{manifest_path}: label {inferred - 1} exceeds declared "
                f"class count {n_classes}")
        inferred = n_classes
    return Dataset(samples, inferred)
