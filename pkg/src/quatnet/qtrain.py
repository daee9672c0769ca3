"""Training machinery: update rules, losses, SGD, gradient verification.

The backward signal that flows through a network is the negative gradient
of the (real-valued) loss with respect to each activation component, so
``param += lr * update`` descends.  Layer classes in :mod:`.network` own
their batched backward implementations; this module adds the single-layer
update rules in their textbook form, the losses, the SGD step, the
training loop, and a finite-difference checker that validates every
parameter component of a network.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError
from .qcore import (
    Quaternion,
    conjugate_planes,
    dot_planes,
    hamilton_contract,
    hamilton_planes,
    magnitude_planes,
)
from .qlayers import rerelu_planes, split_derivative
from .qtensor import QTensor
from .network import Network, stack_batch

THREAD_ENV_VAR = "QUATNET_THREADS"


def worker_threads() -> int:
    """Worker-parallelism cap from the environment (default 1)."""
    raw = os.environ.get(THREAD_ENV_VAR, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# Single-layer update rules in their textbook form.
# ---------------------------------------------------------------------------

def backward_classic(weights: QTensor, d_top: QTensor, inputs: QTensor
                     ) -> tuple[QTensor, QTensor, QTensor]:
    """Classic fully connected update rule.

    ``weights`` is (M, N): row m holds the weights feeding output unit m.
    ``d_top`` carries the error (negative loss gradient) per output unit,
    shape (M,) or batched (B, M); ``inputs`` the cached layer input,
    (N,) or (B, N).  Returns (weight updates, bias updates, d_bottom):

    * weight update (m, n) = mean over batch of d_m * conj(x_n),
    * bias update m = mean over batch of d_m,
    * d_bottom n = sum over m of conj(w_mn) * d_m.
    """
    w = weights.planes
    if w.ndim != 3:
        raise ShapeError(f"weights must be a (M, N) matrix, got "
                         f"{weights.shape}")
    d = d_top.planes
    x = inputs.planes
    if d.ndim == 2:
        d = d[:, None, :]
    if x.ndim == 2:
        x = x[:, None, :]
    if d.shape[2] != w.shape[1] or x.shape[2] != w.shape[2]:
        raise ShapeError(
            f"shapes disagree: weights {weights.shape}, d_top "
            f"{d_top.shape}, inputs {inputs.shape}")
    batch = d.shape[1]
    u_w = hamilton_contract(d, conjugate_planes(x), "bm,bn->mn") / batch
    u_b = d.mean(axis=1)
    d_bottom = hamilton_contract(conjugate_planes(w), d, "mn,bm->bn")
    if d_top.planes.ndim == 2:
        d_bottom = d_bottom[:, 0]
    return QTensor(u_w), QTensor(u_b), QTensor(d_bottom)


def backward_activation(name: str, d_top: QTensor, inputs: QTensor,
                        alpha: float | None = None,
                        rerelu_c: float | None = None) -> QTensor:
    """Error propagation through an activation (componentwise product).

    Split functions multiply by the componentwise derivative at the
    cached input.  ``name='rerelu'`` uses the fully quaternion rule with
    the set constant c held fixed (pass the cached value, or it is
    recomputed from the inputs).
    """
    d = d_top.planes
    x = inputs.planes
    if d.shape != x.shape:
        raise ShapeError(f"d_top {d_top.shape} and inputs {inputs.shape} "
                         "must match")
    if name == "rerelu":
        mags = magnitude_planes(x)
        c = rerelu_reference(mags) if rerelu_c is None else float(rerelu_c)
        passing = mags >= c
        safe_m = np.where(mags > 0, mags, 1.0)
        proj = dot_planes(d, x)
        shrunk = (d * mags + x * (proj / safe_m)) / c if c > 0 \
            else np.zeros_like(d)
        shrunk = np.where(mags > 0, shrunk, 0.0)
        return QTensor(np.where(passing, d, shrunk))
    return QTensor(d * split_derivative(name, x, alpha))


def rerelu_reference(mags: np.ndarray) -> float:
    return float(np.mean(mags))


def backward_geometric(weight: Quaternion, d_top: Quaternion,
                       x: Quaternion) -> tuple[Quaternion, Quaternion]:
    """Geometric update rule for one weight, in its source form.

    Here ``d_top`` follows the opposite sign convention from
    :func:`backward_classic`: it is the loss gradient with respect to the
    unit's output (not its negative).  Returns (weight update direction,
    d_bottom) where

    * update = (1/||w||) * [ (d . (w x conj(w))) / ||w||^2 * w
               - 2 d w conj(x) ],
    * d_bottom = conj(w) d w / ||w||.

    The dot is the 4-component real dot product.  For pure-imaginary
    signals the update equals the exact negative gradient of
    w x conj(w)/||w|| with respect to w.
    """
    w = weight.as_array()
    d = d_top.as_array()
    n = float(np.sqrt(w @ w))
    if n < 1e-300:
        raise ShapeError("geometric update needs a nonzero weight")
    wq, dq, xq = weight, d_top, x
    rotated = _mul(_mul(wq, xq), wq.conjugate())
    dot = float(d @ rotated.as_array())
    term1 = (dot / (n * n)) * wq
    term2 = 2.0 * _mul(_mul(dq, wq), xq.conjugate())
    update = (1.0 / n) * (term1 - term2)
    d_bottom = (1.0 / n) * _mul(_mul(wq.conjugate(), dq), wq)
    return update, d_bottom


def _mul(p: Quaternion, q: Quaternion) -> Quaternion:
    return p * q


# ---------------------------------------------------------------------------
# Losses.  Each returns (scalar loss, seed), the seed being the negative
# gradient of the loss with respect to the output components.
# ---------------------------------------------------------------------------

def loss_mse_real(output: QTensor, target: QTensor
                  ) -> tuple[float, QTensor]:
    """Mean squared error over all real components.

    loss = mean over every component of (out - target)^2; the seed is
    2 * (target - out) / count with count the total component count.
    """
    if output.shape != target.shape:
        raise ShapeError(f"output {output.shape} and target {target.shape} "
                         "must match")
    diff = output.planes - target.planes
    count = diff.size
    loss = float(np.sum(diff * diff) / count)
    seed = (-2.0 / count) * diff
    return loss, QTensor(seed)


def loss_crossentropy_magnitude(output, labels) -> tuple[float, QTensor]:
    """Softmax cross-entropy on quaternion magnitudes.

    Class scores are the magnitudes of the output units.  Accepts a
    batched QTensor of shape (B, U) with an integer label array, or a
    list of per-unit Quaternion values with one integer label.  The seed
    routes the gradient through d||q||/dq_c = q_c/||q|| (zero quaternions
    contribute zero gradient).
    """
    if isinstance(output, QTensor):
        planes = output.planes
        if planes.ndim == 2:
            planes = planes[:, None, :]
            labels = np.array([labels], dtype=np.int64)
            squeeze = True
        else:
            labels = np.asarray(labels, dtype=np.int64)
            squeeze = False
    else:
        units = list(output)
        planes = np.array([[v.r, v.i, v.j, v.k] for v in units]).T[:, None, :]
        labels = np.array([labels], dtype=np.int64)
        squeeze = True
    batch, units_n = planes.shape[1], planes.shape[2]
    if units_n < 2:
        raise ShapeError("cross entropy needs at least 2 classes")
    if np.any(labels < 0) or np.any(labels >= units_n):
        raise ShapeError(f"label out of range for {units_n} classes")
    mags = magnitude_planes(planes)                  # (B, U)
    shifted = mags - mags.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=1, keepdims=True)
    picked = probs[np.arange(batch), labels]
    loss = float(np.mean(-np.log(np.maximum(picked, 1e-300))))
    d_scores = probs.copy()
    d_scores[np.arange(batch), labels] -= 1.0
    d_scores /= batch
    safe = np.where(mags > 0, mags, 1.0)
    unitvec = np.where(mags > 0, planes / safe, 0.0)
    seed = -d_scores * unitvec
    if squeeze:
        seed = seed[:, 0, :]
    return loss, QTensor(seed)


LOSSES: dict[str, Callable] = {
    "mse_real": loss_mse_real,
    "crossentropy_magnitude": loss_crossentropy_magnitude,
}


# ---------------------------------------------------------------------------
# SGD.
# ---------------------------------------------------------------------------

def sgd_step(network: Network, updates: Sequence[dict], lr: float) -> Network:
    """Apply w <- w + lr * update to every parameter, in place."""
    if lr < 0:
        raise ShapeError(f"learning rate must be >= 0, got {lr}")
    network.apply_updates(updates, lr)
    return network


# ---------------------------------------------------------------------------
# Training configuration and loop.
# ---------------------------------------------------------------------------

PRECISIONS = {"f32": np.float32, "single": np.float32,
              "f64": np.float64, "double": np.float64}


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 16
    epochs: int = 10
    loss: str = "crossentropy_magnitude"
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ShapeError("learning rate must be > 0")
        if self.batch_size < 1:
            raise ShapeError("batch size must be >= 1")
        if self.epochs < 0:
            raise ShapeError("epochs must be >= 0")
        if self.loss not in LOSSES:
            raise ShapeError(f"unknown loss {self.loss!r}")
        if self.precision not in PRECISIONS:
            raise ShapeError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


def _one_hot_targets(labels: np.ndarray, units: int, batch: int,
                     dtype) -> QTensor:
    planes = np.zeros((4, batch, units), dtype=dtype)
    planes[0, np.arange(batch), labels] = 1.0
    return QTensor(planes)


def _batch_loss(net_out: np.ndarray, labels: np.ndarray, loss_name: str):
    out = QTensor(net_out)
    if loss_name == "crossentropy_magnitude":
        return loss_crossentropy_magnitude(out, labels)
    units = net_out.shape[-1]
    target = _one_hot_targets(labels, units, net_out.shape[1],
                              net_out.dtype)
    return loss_mse_real(out, target)


def predict_scores(network: Network, planes: np.ndarray) -> np.ndarray:
    """Class scores (output magnitudes) for a stacked batch, (B, U)."""
    out, _ = network.forward(planes, training=False)
    return magnitude_planes(out)


def evaluate(network: Network, planes: np.ndarray, labels: np.ndarray,
             loss_name: str, batch_size: int = 64,
             threads: int | None = None) -> tuple[float, float]:
    """Inference-mode mean loss and accuracy over a stacked dataset.

    Work is split into contiguous chunks; with more than one worker
    thread the chunks run in a pool and are merged back in chunk order,
    so results do not depend on scheduling.
    """
    total = planes.shape[1]
    if total == 0:
        return math.nan, math.nan
    chunks = [(start, min(start + batch_size, total))
              for start in range(0, total, batch_size)]

    def run(bounds):
        lo, hi = bounds
        out, _ = network.forward(planes[:, lo:hi], training=False)
        loss, _ = _batch_loss(out, labels[lo:hi], loss_name)
        preds = magnitude_planes(out).argmax(axis=1)
        return loss * (hi - lo), int(np.sum(preds == labels[lo:hi]))

    threads = worker_threads() if threads is None else max(1, threads)
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    loss_sum = sum(r[0] for r in results)
    hits = sum(r[1] for r in results)
    return loss_sum / total, hits / total


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    wall_ms: float


def train_network(network: Network,
                  train_samples: Sequence[tuple[QTensor, int]],
                  val_samples: Sequence[tuple[QTensor, int]] | None,
                  cfg: TrainConfig,
                  on_epoch: Callable[[EpochRow], None] | None = None,
                  ) -> list[EpochRow]:
    """Plain SGD over shuffled mini-batches.

    Deterministic for a fixed seed: batch order comes from one seeded
    generator, and per-batch gradient accumulation follows sample index
    order inside the vectorized layer code.
    """
    dtype = cfg.dtype
    x_all = stack_batch([s for s, _ in train_samples], dtype=dtype)
    y_all = np.array([lab for _, lab in train_samples], dtype=np.int64)
    if val_samples:
        xv = stack_batch([s for s, _ in val_samples], dtype=dtype)
        yv = np.array([lab for _, lab in val_samples], dtype=np.int64)
    else:
        xv, yv = None, None
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    history: list[EpochRow] = []
    n = x_all.shape[1]
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = x_all[:, idx]
            out, caches = network.forward(x, training=True,
                                          update_running=True)
            _, seed = _batch_loss(out, y_all[idx], cfg.loss)
            updates, _ = network.backward(seed.planes, caches)
            sgd_step(network, updates, cfg.learning_rate)
        train_loss, train_acc = evaluate(network, x_all, y_all, cfg.loss,
                                         cfg.batch_size)
        if xv is not None:
            val_loss, val_acc = evaluate(network, xv, yv, cfg.loss,
                                         cfg.batch_size)
        else:
            val_loss, val_acc = math.nan, math.nan
        row = EpochRow(epoch, train_loss, train_acc, val_loss, val_acc,
                       (time.perf_counter() - t0) * 1000.0)
        history.append(row)
        if on_epoch:
            on_epoch(row)
    return history


# ---------------------------------------------------------------------------
# Finite-difference gradient verification.
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    per_layer: dict[str, float]
    checked: int
    excluded: int
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.threshold

    def lines(self) -> list[str]:
        out = [f"gradient check: max relative error "
               f"{self.max_rel_error:.3e} "
               f"({'PASS' if self.passed else 'FAIL'} at threshold "
               f"{self.threshold:.0e})",
               f"worst parameter: {self.worst_param}",
               f"components checked: {self.checked}, excluded at kinks: "
               f"{self.excluded}"]
        for name, err in self.per_layer.items():
            out.append(f"  {name}: {err:.3e}")
        return out


def _signatures(network: Network, caches) -> list:
    return [layer.branch_signature(cache)
            for layer, cache in zip(network.layers, caches)]


def _same_signature(a, b) -> bool:
    for sa, sb in zip(a, b):
        if sa is None and sb is None:
            continue
        if sa is None or sb is None:
            return False
        if not np.array_equal(sa, sb):
            return False
    return True


def gradient_check(network: Network, x: np.ndarray, labels_or_target,
                   loss: str = "mse_real", step: float = 1e-5,
                   threshold: float = 1e-6) -> GradCheckReport:
    """Compare every analytic update against central finite differences.

    Requires double precision.  The analytic update u must satisfy
    u = -dL/d(component); the check perturbs each component by +-step,
    re-evaluating the loss with each layer's declared frozen constants
    pinned to their base values.  Components whose perturbed runs flip
    any discrete branch (activation kink, pooling selection, clamp) are
    excluded, since finite differences are meaningless across a kink.
    """
    for _, _, p in network.parameters():
        if p.array.dtype != np.float64:
            raise ShapeError("gradient_check requires float64 parameters")
    if x.dtype != np.float64:
        x = x.astype(np.float64)

    def loss_of(out_planes):
        if loss == "mse_real":
            return loss_mse_real(QTensor(out_planes), labels_or_target)
        return _batch_loss(out_planes, labels_or_target, loss)

    out, caches = network.forward(x, training=True, update_running=False,
                                  with_caches=True)
    _, seed = loss_of(out)
    updates, _ = network.backward(seed.planes, caches)
    frozen = {}
    for n, layer in enumerate(network.layers):
        const = layer.frozen_constants(caches[n])
        if const is not None:
            frozen[n] = const
    base_sig = _signatures(network, caches)

    def eval_loss():
        out2, caches2 = network.forward(x, training=True,
                                        update_running=False,
                                        frozen=frozen, with_caches=True)
        return loss_of(out2)[0], _signatures(network, caches2)

    max_rel = 0.0
    worst = "(none)"
    per_layer: dict[str, float] = {}
    checked = 0
    excluded = 0
    for n, layer, param in network.parameters():
        layer_key = f"layer{n:02d}.{layer.name}"
        arr = param.array
        upd = updates[n].get(param.name)
        if upd is None:
            continue
        layer_max = per_layer.get(layer_key, 0.0)
        for flat_idx in range(arr.size):
            idx = np.unravel_index(flat_idx, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + step
            lp, sig_p = eval_loss()
            arr[idx] = orig - step
            lm, sig_m = eval_loss()
            arr[idx] = orig
            if not (_same_signature(sig_p, base_sig)
                    and _same_signature(sig_m, base_sig)):
                excluded += 1
                continue
            fd = (lp - lm) / (2.0 * step)
            analytic = float(upd[idx])
            denom = max(abs(analytic), abs(fd))
            if denom < 1e-10:
                rel = 0.0
            else:
                rel = abs(analytic + fd) / denom
            checked += 1
            if rel > layer_max:
                layer_max = rel
            if rel > max_rel:
                max_rel = rel
                worst = f"{layer_key}.{param.name}{list(idx)}"
        per_layer[layer_key] = layer_max
    return GradCheckReport(max_rel, worst, per_layer, checked, excluded,
                           threshold)
