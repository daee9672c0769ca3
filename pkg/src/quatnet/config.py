"""Run configuration: flat dotted key-value files and model building.

The format is one ``key = value`` pair per line, ``#`` comments, and
dotted section keys (``train.epochs``, ``layer.1.type``).  Layers are
numbered; their keys are collected per index and turned into layer
objects with shape checking before any training starts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError
from .network import (
    ClassicConv,
    DenseClassic,
    DenseGeometric,
    EquivariantConv,
    GeometricConv,
    Layer,
    MagnitudePool,
    Network,
    REReLU,
    RQBN,
    SplitActivation,
    SplitPool,
    VQBN,
    WQBN,
)
from .qconv import ConvSpec, DEFAULT_AXIS
from .qtrain import LOSSES, PRECISIONS, TrainConfig


def parse_config(text: str) -> dict[str, str]:
    """Parse the flat key-value format; duplicate keys are an error."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got "
                              f"{raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _parse_int(pairs: dict[str, str], key: str, default: int | None = None
               ) -> int:
    if key not in pairs:
        if default is None:
            raise ConfigError(f"missing required key {key!r}")
        return default
    try:
        return int(pairs[key])
    except ValueError as exc:
        raise ConfigError(f"{key}: expected integer, got "
                          f"{pairs[key]!r}") from exc


def _parse_float(pairs: dict[str, str], key: str,
                 default: float | None = None) -> float:
    if key not in pairs:
        if default is None:
            raise ConfigError(f"missing required key {key!r}")
        return default
    try:
        return float(pairs[key])
    except ValueError as exc:
        raise ConfigError(f"{key}: expected number, got "
                          f"{pairs[key]!r}") from exc


def _parse_bool(pairs: dict[str, str], key: str, default: bool) -> bool:
    if key not in pairs:
        return default
    value = pairs[key].lower()
    if value in ("true", "yes", "1", "on"):
        return True
    if value in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{key}: expected true/false, got {pairs[key]!r}")


def _parse_pair(text: str, key: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        if len(parts) == 1:
            v = int(parts[0])
            return (v, v)
        if len(parts) == 2:
            return (int(parts[0]), int(parts[1]))
    except ValueError:
        pass
    raise ConfigError(f"{key}: expected N or NxM, got {text!r}")


def _parse_shape(text: str, key: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"{key}: expected HxWxC, got {text!r}") from exc


def _parse_axis(text: str, key: str) -> tuple[float, float, float]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise ConfigError(f"{key}: expected three comma-separated numbers")
    try:
        x, y, z = (float(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"{key}: bad axis component") from exc
    norm = (x * x + y * y + z * z) ** 0.5
    if norm <= 0:
        raise ConfigError(f"{key}: axis must be nonzero")
    return (x / norm, y / norm, z / norm)


@dataclass
class RunConfig:
    """Everything a CLI run needs, parsed and validated."""

    seed: int
    precision: str
    out_dir: Path | None
    input_shape: tuple[int, ...]
    layer_specs: list[dict[str, str]]
    train: TrainConfig
    train_manifest: Path | None
    val_manifest: Path | None
    n_classes: int | None
    gradcheck_threshold: float
    gradcheck_batch: int
    raw: dict[str, str] = field(default_factory=dict)


def load_run_config(path, overrides: dict[str, str] | None = None
                    ) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    pairs = parse_config(path.read_text(encoding="utf-8"))
    if overrides:
        pairs.update({k: v for k, v in overrides.items() if v is not None})
    return run_config_from_pairs(pairs, base_dir=path.parent)


def run_config_from_pairs(pairs: dict[str, str],
                          base_dir: Path | None = None) -> RunConfig:
    base_dir = base_dir or Path(".")
    seed = _parse_int(pairs, "seed", 0)
    precision = pairs.get("precision", "f32")
    if precision not in PRECISIONS:
        raise ConfigError(f"precision: expected one of "
                          f"{sorted(set(PRECISIONS))}, got {precision!r}")
    out_dir = Path(pairs["out"]) if "out" in pairs else None
    if "model.input" not in pairs:
        raise ConfigError("missing required key 'model.input'")
    input_shape = _parse_shape(pairs["model.input"], "model.input")
    if len(input_shape) != 3:
        raise ConfigError("model.input must be HxWxC (quaternion channels)")

    layer_specs = _collect_layers(pairs)
    loss = pairs.get("train.loss", "crossentropy_magnitude")
    if loss not in LOSSES:
        raise ConfigError(f"train.loss: expected one of "
                          f"{sorted(LOSSES)}, got {loss!r}")
    try:
        train = TrainConfig(
            learning_rate=_parse_float(pairs, "train.lr", 0.05),
            batch_size=_parse_int(pairs, "train.batch_size", 16),
            epochs=_parse_int(pairs, "train.epochs", 10),
            loss=loss,
            seed=seed,
            precision=precision,
        )
    except ShapeError as exc:
        raise ConfigError(str(exc)) from exc

    def _manifest(key: str) -> Path | None:
        if key not in pairs:
            return None
        p = Path(pairs[key])
        return p if p.is_absolute() else base_dir / p

    return RunConfig(
        seed=seed,
        precision=precision,
        out_dir=out_dir,
        input_shape=input_shape,
        layer_specs=layer_specs,
        train=train,
        train_manifest=_manifest("data.train"),
        val_manifest=_manifest("data.val"),
        n_classes=(_parse_int(pairs, "data.classes")
                   if "data.classes" in pairs else None),
        gradcheck_threshold=_parse_float(pairs, "gradcheck.threshold", 1e-6),
        gradcheck_batch=_parse_int(pairs, "gradcheck.batch", 4),
        raw=dict(pairs),
    )


def _collect_layers(pairs: dict[str, str]) -> list[dict[str, str]]:
    by_index: dict[int, dict[str, str]] = {}
    for key, value in pairs.items():
        if not key.startswith("layer."):
            continue
        parts = key.split(".")
        if len(parts) != 3:
            raise ConfigError(f"{key}: layer keys look like layer.N.field")
        try:
            index = int(parts[1])
        except ValueError as exc:
            raise ConfigError(f"{key}: bad layer index") from exc
        by_index.setdefault(index, {})[parts[2]] = value
    if not by_index:
        raise ConfigError("no layers configured (layer.N.type = ...)")
    specs = []
    for index in sorted(by_index):
        spec = by_index[index]
        if "type" not in spec:
            raise ConfigError(f"layer.{index}: missing 'type'")
        spec["_index"] = str(index)
        specs.append(spec)
    return specs


def _layer_seed(seed: int, index: int) -> int:
    return (seed * 1_000_003 + index) % (2 ** 63)


def build_network(run: RunConfig, dtype=None) -> Network:
    """Turn layer specs into a shape-checked Network."""
    dtype = dtype if dtype is not None else PRECISIONS[run.precision]
    shape = tuple(run.input_shape)
    layers: list[Layer] = []
    try:
        for n, spec in enumerate(run.layer_specs):
            layer = _build_layer(spec, shape, _layer_seed(run.seed, n),
                                 dtype)
            layers.append(layer)
            shape = layer.out_shape(shape)
        return Network(layers, run.input_shape)
    except ShapeError as exc:
        raise ConfigError(f"model is not shape-consistent: {exc}") from exc


def _build_layer(spec: dict[str, str], in_shape: tuple[int, ...],
                 seed: int, dtype) -> Layer:
    kind = spec["type"]
    index = spec.get("_index", "?")
    if kind == "conv":
        paradigm = spec.get("paradigm", "classic")
        conv_spec = ConvSpec(
            paradigm=paradigm,
            kernel_extent=_parse_int(spec, "kernel", 3),
            stride=_parse_pair(spec.get("stride", "1"),
                               f"layer.{index}.stride"),
            padding=_parse_pair(spec.get("padding", "0"),
                                f"layer.{index}.padding"),
            channel_scheme=spec.get("scheme", "summed"),
            orientation=spec.get("orientation", "left"),
            flip_kernel=_parse_bool(spec, "flip", False),
            axis_mode=spec.get("axis_mode", "fixed"),
            axis=(_parse_axis(spec["axis"], f"layer.{index}.axis")
                  if "axis" in spec else DEFAULT_AXIS),
        )
        kernels = _parse_int(spec, "kernels", 1)
        in_channels = in_shape[-1]
        if paradigm in ("geometric", "geometric_biased"):
            return GeometricConv(in_channels, kernels, conv_spec, seed,
                                 dtype=dtype)
        if paradigm == "equivariant":
            return EquivariantConv(in_channels, kernels, conv_spec, seed,
                                   dtype=dtype)
        return ClassicConv(in_channels, kernels, conv_spec, seed,
                           bias=_parse_bool(spec, "bias", True), dtype=dtype)
    if kind == "act":
        fn = spec.get("fn", "relu")
        alpha = _parse_float(spec, "alpha", -1.0)
        return SplitActivation(fn, None if alpha < 0 else alpha, dtype=dtype)
    if kind == "rerelu":
        return REReLU()
    if kind == "pool":
        pool_kind = spec.get("kind", "fully")
        window = _parse_pair(spec.get("window", "2"),
                             f"layer.{index}.window")
        stride = (_parse_pair(spec["stride"], f"layer.{index}.stride")
                  if "stride" in spec else None)
        if pool_kind == "fully":
            return MagnitudePool(window, stride)
        if pool_kind in ("split_max", "split_avg"):
            return SplitPool(pool_kind.split("_")[1], window, stride)
        raise ConfigError(f"layer.{index}: unknown pool kind {pool_kind!r}")
    if kind == "norm":
        norm_kind = spec.get("kind", "rqbn")
        channels = in_shape[-1]
        eps = _parse_float(spec, "eps", 1e-5)
        momentum = _parse_float(spec, "momentum", 0.1)
        if norm_kind == "wqbn":
            return WQBN(channels, eps, momentum, dtype=dtype)
        if norm_kind == "vqbn":
            return VQBN(channels, eps, momentum,
                        _parse_bool(spec, "linear_variance", False),
                        dtype=dtype)
        if norm_kind == "rqbn":
            return RQBN(channels, eps, momentum, dtype=dtype)
        raise ConfigError(f"layer.{index}: unknown norm kind {norm_kind!r}")
    if kind == "fc":
        units = _parse_int(spec, "units")
        mode = spec.get("mode", "classic")
        if mode == "geometric":
            return DenseGeometric(in_shape, units, seed,
                                  bias=_parse_bool(spec, "bias", False),
                                  dtype=dtype)
        if mode == "classic":
            return DenseClassic(in_shape, units, seed,
                                bias=_parse_bool(spec, "bias", True),
                                dtype=dtype)
        raise ConfigError(f"layer.{index}: unknown fc mode {mode!r}")
    raise ConfigError(f"layer.{index}: unknown layer type {kind!r}")
