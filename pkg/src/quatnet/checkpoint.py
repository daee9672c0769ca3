"""Checkpoint serialization.

A checkpoint is a directory: a manifest plus one QT1 tensor file per
parameter or buffer.  Quaternion arrays are stored directly as their
component planes; real-valued arrays go into the r plane with zeroed
imaginary planes, keeping one uniform container format.  Save, load,
save round trips are byte-identical because QT1 pins float32 planes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import CheckpointCorruptError, CheckpointMismatchError
from .network import Network
from .qtensor import QTensor, load_qt, save_qt

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.txt"
HEADER = "quatnet-checkpoint"


def save_checkpoint(network: Network, directory) -> Path:
    """Write all parameters and buffers; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"{HEADER} {FORMAT_VERSION}\n"]
    for n, (name, array, quaternion) in enumerate(network.state_items()):
        rel = f"{n:04d}.qt"
        if quaternion:
            tensor = QTensor(array)
        else:
            planes = np.zeros((4,) + array.shape, dtype=array.dtype)
            planes[0] = array
            tensor = QTensor(planes)
        save_qt(tensor, directory / rel)
        kind = "quat" if quaternion else "real"
        lines.append(f"{name}\t{kind}\t{rel}\n")
    manifest = directory / MANIFEST_NAME
    manifest.write_text("".join(lines), encoding="utf-8", newline="\n")
    return manifest


def read_checkpoint(directory) -> list[tuple[str, str, QTensor]]:
    """Read (name, kind, tensor) entries; raises if anything is malformed."""
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.is_file():
        raise CheckpointCorruptError(f"no checkpoint manifest in {directory}")
    lines = manifest.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(HEADER):
        raise CheckpointCorruptError(f"{manifest}: bad checkpoint header")
    try:
        version = int(lines[0].split()[1])
    except (IndexError, ValueError) as exc:
        raise CheckpointCorruptError(f"{manifest}: unreadable version") \
            from exc
    if version != FORMAT_VERSION:
        raise CheckpointCorruptError(
            f"{manifest}: unsupported format version {version}")
    entries = []
    for lineno, raw in enumerate(lines[1:], 2):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) != 3 or parts[1] not in ("quat", "real"):
            raise CheckpointCorruptError(
                f"{manifest}:{lineno}: malformed entry")
        name, kind, rel = parts
        entries.append((name, kind, load_qt(directory / rel)))
    return entries


def load_checkpoint(network: Network, directory) -> None:
    """Restore a network's parameters and buffers from a checkpoint."""
    arrays: dict[str, np.ndarray] = {}
    for name, kind, tensor in read_checkpoint(directory):
        arrays[name] = tensor.planes if kind == "quat" else tensor.r
    try:
        network.load_state(arrays)
    except CheckpointMismatchError:
        raise
    except Exception as exc:
        raise CheckpointMismatchError(str(exc)) from exc


def parameter_accounting(directory) -> list[dict]:
    """Per-layer parameter counts from a checkpoint alone.

    Quaternion parameters count as slots; the expanded real count is four
    per slot (the representational saving of packing four real channels
    into one quaternion).  Real-valued arrays are listed as stored reals
    without an expansion.  Buffers (running statistics) are skipped.
    """
    by_layer: dict[str, dict] = {}
    for name, kind, tensor in read_checkpoint(directory):
        if ".buffer." in name:
            continue
        layer = name.rsplit(".", 1)[0]
        row = by_layer.setdefault(layer, {
            "layer": layer, "quat_params": 0, "real_expanded": 0,
            "stored_reals": 0, "magnitudes": []})
        if kind == "quat":
            row["quat_params"] += tensor.size
            row["stored_reals"] += 4 * tensor.size
            row["magnitudes"].append(tensor.magnitudes().ravel())
        else:
            row["stored_reals"] += tensor.size
            if name.endswith(".scale"):
                row["magnitudes"].append(np.abs(tensor.r).ravel())
    rows = []
    for layer in sorted(by_layer):
        row = by_layer[layer]
        row["real_expanded"] = 4 * row["quat_params"]
        row["magnitudes"] = (np.concatenate(row["magnitudes"])
                             if row["magnitudes"] else np.zeros(0))
        rows.append(row)
    return rows


def magnitude_histogram(mags: np.ndarray, bins: int = 16
                        ) -> list[tuple[float, float, int]]:
    """(lo, hi, count) rows of a uniform histogram from 0 to the max."""
    if mags.size == 0:
        return []
    top = float(mags.max())
    if top <= 0.0:
        return [(0.0, 0.0, int(mags.size))]
    counts, edges = np.histogram(mags, bins=bins, range=(0.0, top))
    return [(float(edges[n]), float(edges[n + 1]), int(counts[n]))
            for n in range(len(counts))]
