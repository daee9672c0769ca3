"""Fully connected layers, pooling, activations, and normalizations.

Activations come in two families: split functions apply one real function
independently to each of the four components; the rotation-equivariant
ReLU is a fully quaternion function coupling the components through their
magnitudes.  Normalizations: whitening batch norm (4x4 covariance,
Cholesky whitening), variance batch norm (one real variance per channel),
rotation-equivariant batch norm (second-moment scaling, no learnables),
and spectral normalization of quaternion weight matrices via power
iteration on their real block expansion.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError
from .qcore import (
    Quaternion,
    block_matrix,
    conjugate_planes,
    hamilton_contract,
    hamilton_planes,
    magnitude_planes,
)
from .qtensor import QTensor

logger = logging.getLogger(__name__)

# Floor for quaternion weight norms in geometric fully connected layers.
NORM_FLOOR = 1e-8
# Magnitude ties closer than this fall through to the cosine tie-break.
POOL_TIE_TOL = 1e-12

SPLIT_FUNCTIONS = ("sigmoid", "tanh", "hardtanh", "relu", "prelu",
                   "leakyrelu")
LEAKY_ALPHA = 0.01


# ---------------------------------------------------------------------------
# Fully connected layers.
# ---------------------------------------------------------------------------

def _fc_prepare(weights: QTensor, q: QTensor) -> tuple[np.ndarray, np.ndarray, bool]:
    """Flatten weights/input planes; returns (w, x, single_unit)."""
    if weights.shape == q.shape:
        w = weights.planes.reshape(4, 1, -1)
        single = True
    elif weights.shape[1:] == q.shape:
        w = weights.planes.reshape(4, weights.shape[0], -1)
        single = False
    else:
        raise ShapeError(
            f"weight shape {weights.shape} does not match input {q.shape}")
    x = q.planes.reshape(4, -1)
    return w, x, single


def fc_classic(weights: QTensor, q: QTensor, bias=None):
    """Classic fully connected layer: sum of left Hamilton products.

    ``weights`` either matches the input shape (one output unit, returns
    a Quaternion) or has a leading unit axis (returns a QTensor of unit
    outputs).  ``bias`` is a Quaternion or per-unit sequence.
    """
    w, x, single = _fc_prepare(weights, q)
    out = hamilton_contract(w, x, "on,n->o")  # (4, n_out)
    out = _fc_add_bias(out, bias)
    if single:
        return Quaternion(*(float(c) for c in out[:, 0]))
    return QTensor(out)


def fc_geometric(weights: QTensor, q: QTensor, bias=None):
    """Geometric fully connected layer: norm-scaled sandwich per element.

    Each element contributes w*x*conj(w)/||w|| with the norm clamped away
    from zero, so a unit-norm weight acts as a pure rotation and a real
    weight of value a scales by |a|.
    """
    w, x, single = _fc_prepare(weights, q)
    norms = np.sqrt(np.sum(w * w, axis=0))
    small = norms < NORM_FLOOR
    if np.any(small):
        logger.info("clamped %d fully connected weight norm(s) below %.0e",
                    int(np.count_nonzero(small)), NORM_FLOOR)
        norms = np.maximum(norms, NORM_FLOOR)
    rotated = hamilton_planes(hamilton_planes(w, x[:, None, :]),
                              conjugate_planes(w))
    out = np.sum(rotated / norms, axis=2)
    out = _fc_add_bias(out, bias)
    if single:
        return Quaternion(*(float(c) for c in out[:, 0]))
    return QTensor(out)


def _fc_add_bias(out: np.ndarray, bias) -> np.ndarray:
    if bias is None:
        return out
    if isinstance(bias, Quaternion):
        return out + bias.as_array(out.dtype)[:, None]
    if isinstance(bias, QTensor):
        return out + bias.planes
    arr = np.stack([b.as_array(out.dtype) for b in bias], axis=1)
    return out + arr


# ---------------------------------------------------------------------------
# Pooling.
# ---------------------------------------------------------------------------

def _window_planes(window) -> np.ndarray:
    if isinstance(window, QTensor):
        planes = window.planes.reshape(4, -1)
    else:
        items = list(window)
        if items and isinstance(items[0], Quaternion):
            planes = np.array([[v.r, v.i, v.j, v.k] for v in items]).T
        else:
            raise ShapeError("window must be a QTensor or quaternions")
    if planes.size == 0:
        raise ShapeError("pooling window is empty")
    return planes


def pool_split_max(window) -> Quaternion:
    """Component-wise maxima over the window, assembled into one value.

    The four maxima may come from different window elements.
    """
    planes = _window_planes(window)
    return Quaternion(*(float(v) for v in planes.max(axis=1)))


def pool_split_avg(window) -> Quaternion:
    """Component-wise means over the window."""
    planes = _window_planes(window)
    return Quaternion(*(float(v) for v in planes.mean(axis=1)))


def fully_pool_select(planes: np.ndarray) -> int:
    """Index of the maximum-amplitude element in a (4, n) window.

    Elements whose magnitude lies within POOL_TIE_TOL of the maximum are
    tie-broken by cosine similarity against the window's component-wise
    mean; any remaining tie falls to scan order.
    """
    mags = np.sqrt(np.sum(planes * planes, axis=0))
    best = float(mags.max())
    tied = np.flatnonzero(mags >= best - POOL_TIE_TOL)
    if tied.size == 1:
        return int(tied[0])
    mean = planes.mean(axis=1)
    mean_norm = float(np.sqrt(np.sum(mean * mean)))
    sims = np.zeros(tied.size)
    if mean_norm > 0.0:
        for n, idx in enumerate(tied):
            qn = float(mags[idx])
            if qn > 0.0:
                sims[n] = float(planes[:, idx] @ mean) / (qn * mean_norm)
    return int(tied[int(np.argmax(sims))])


def pool_fully_magnitude(window) -> Quaternion:
    """Select the whole quaternion of maximum amplitude in the window."""
    planes = _window_planes(window)
    idx = fully_pool_select(planes)
    return Quaternion(*(float(v) for v in planes[:, idx]))


# ---------------------------------------------------------------------------
# Split activations.
# ---------------------------------------------------------------------------

def _resolve_alpha(name: str, alpha) -> float:
    if name == "prelu":
        if alpha is None:
            raise ShapeError("prelu needs an alpha parameter")
        return float(alpha)
    if name == "leakyrelu":
        return LEAKY_ALPHA if alpha is None else float(alpha)
    return 0.0


def split_apply(name: str, x: np.ndarray, alpha=None) -> np.ndarray:
    """Apply the named real function to every component array entry."""
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    if name == "tanh":
        return np.tanh(x)
    if name == "hardtanh":
        return np.clip(x, -1.0, 1.0)
    if name == "relu":
        return np.maximum(0.0, x)
    if name in ("prelu", "leakyrelu"):
        a = _resolve_alpha(name, alpha)
        return np.where(x > 0.0, x, a * x)
    raise ShapeError(f"unknown split activation {name!r}")


def split_derivative(name: str, x: np.ndarray, alpha=None) -> np.ndarray:
    """Derivative of the named real function at x, componentwise.

    Kink conventions: relu'(0) = 0; prelu/leakyrelu use the x <= 0 branch
    at 0; hardtanh counts the boundary points as the linear branch.
    """
    if name == "sigmoid":
        s = 1.0 / (1.0 + np.exp(-x))
        return s * (1.0 - s)
    if name == "tanh":
        t = np.tanh(x)
        return 1.0 - t * t
    if name == "hardtanh":
        return ((x >= -1.0) & (x <= 1.0)).astype(x.dtype)
    if name == "relu":
        return (x > 0.0).astype(x.dtype)
    if name in ("prelu", "leakyrelu"):
        a = _resolve_alpha(name, alpha)
        return np.where(x > 0.0, 1.0, a).astype(x.dtype)
    raise ShapeError(f"unknown split activation {name!r}")


def split_branch(name: str, x: np.ndarray) -> np.ndarray | None:
    """Discrete branch code per component, or None for smooth functions."""
    if name in ("relu", "prelu", "leakyrelu"):
        return (x > 0.0)
    if name == "hardtanh":
        return np.sign(np.clip(x, -1.0, 1.0) - x)
    return None


def act_split(name: str, q, alpha=None):
    """Split activation on a Quaternion or QTensor."""
    if isinstance(q, Quaternion):
        arr = split_apply(name, q.as_array(), alpha)
        return Quaternion(*(float(v) for v in arr))
    return QTensor(split_apply(name, q.planes, alpha))


# ---------------------------------------------------------------------------
# Rotation-equivariant ReLU.
# ---------------------------------------------------------------------------

def rerelu_reference(magnitudes: np.ndarray) -> float:
    """The shared constant c: mean magnitude over the whole set."""
    return float(magnitudes.mean())


def rerelu_planes(planes: np.ndarray, c: float | None = None
                  ) -> tuple[np.ndarray, float]:
    """Apply q -> q * ||q|| / max(||q||, c) over all elements.

    Returns the transformed planes and the constant c used (computed from
    the set unless supplied).  Elements of zero magnitude map to zero.
    """
    mags = magnitude_planes(planes)
    if c is None:
        c = rerelu_reference(mags)
    denom = np.maximum(mags, c)
    factor = np.divide(mags, denom, out=np.zeros_like(mags),
                       where=denom > 0.0)
    return planes * factor, c


def act_rerelu(values):
    """Rotation-equivariant ReLU over a set of quaternions.

    Accepts a QTensor (the whole tensor is the set) or a sequence of
    Quaternion values.  Magnitudes above the set's mean magnitude pass
    through; smaller ones shrink by ||q||/c.
    """
    if isinstance(values, QTensor):
        out, _ = rerelu_planes(values.planes)
        return QTensor(out)
    items = list(values)
    if not items:
        raise ShapeError("rotation-equivariant relu needs a nonempty set")
    planes = np.array([[v.r, v.i, v.j, v.k] for v in items]).T
    out, _ = rerelu_planes(planes)
    return [Quaternion(*(float(c) for c in out[:, n]))
            for n in range(out.shape[1])]


# ---------------------------------------------------------------------------
# Batch normalization.
# ---------------------------------------------------------------------------

# Upper-triangle index pairs of a symmetric 4x4 matrix, row-major.
TRI_INDICES: tuple[tuple[int, int], ...] = (
    (0, 0), (0, 1), (0, 2), (0, 3),
    (1, 1), (1, 2), (1, 3),
    (2, 2), (2, 3),
    (3, 3),
)
IDENTITY_TRI = np.array([1.0, 0, 0, 0, 1.0, 0, 0, 1.0, 0, 1.0])


def tri_to_symmetric(tri: np.ndarray) -> np.ndarray:
    """Expand a (10,) upper-triangle vector into a symmetric 4x4 matrix."""
    m = np.zeros((4, 4), dtype=tri.dtype)
    for n, (a, b) in enumerate(TRI_INDICES):
        m[a, b] = tri[n]
        m[b, a] = tri[n]
    return m


@dataclass
class BNState:
    """Parameters and running statistics of one batch-norm layer.

    The three kinds share the container; unused fields stay None.
    Running statistics update by exponential moving average with the set
    momentum whenever a training-mode call asks for it.
    """

    kind: str
    channels: int
    eps: float = 1e-5
    momentum: float = 0.1
    linear_variance: bool = False
    gamma_tri: np.ndarray | None = None     # (C, 10) whitening kind
    gamma: np.ndarray | None = None         # (C,) variance kind
    beta: np.ndarray | None = None          # (4, C)
    running_mean: np.ndarray | None = None  # (4, C)
    running_cov: np.ndarray | None = None   # (C, 4, 4)
    running_var: np.ndarray | None = None   # (C,)
    running_sqnorm: np.ndarray | None = None  # (C,)

    @classmethod
    def wqbn(cls, channels: int, eps: float = 1e-5,
             momentum: float = 0.1) -> "BNState":
        return cls(
            kind="wqbn", channels=channels, eps=eps, momentum=momentum,
            gamma_tri=np.tile(IDENTITY_TRI, (channels, 1)),
            beta=np.zeros((4, channels)),
            running_mean=np.zeros((4, channels)),
            running_cov=np.tile(np.eye(4), (channels, 1, 1)),
        )

    @classmethod
    def vqbn(cls, channels: int, eps: float = 1e-5, momentum: float = 0.1,
             linear_variance: bool = False) -> "BNState":
        return cls(
            kind="vqbn", channels=channels, eps=eps, momentum=momentum,
            linear_variance=linear_variance,
            gamma=np.ones(channels),
            beta=np.zeros((4, channels)),
            running_mean=np.zeros((4, channels)),
            running_var=np.ones(channels),
        )

    @classmethod
    def rqbn(cls, channels: int, eps: float = 1e-5,
             momentum: float = 0.1) -> "BNState":
        return cls(kind="rqbn", channels=channels, eps=eps,
                   momentum=momentum, running_sqnorm=np.ones(channels))


def _bn_flatten(batch: QTensor, channels: int) -> np.ndarray:
    """View the batch as (4, T, C): all non-channel axes pooled into T."""
    if batch.shape[-1] != channels:
        raise ShapeError(
            f"batch has {batch.shape[-1]} channels, state expects {channels}")
    return batch.planes.reshape(4, -1, channels)


def _ema(old: np.ndarray, new: np.ndarray, momentum: float) -> np.ndarray:
    return (1.0 - momentum) * old + momentum * new


def wqbn_forward(state: BNState, batch: QTensor, training: bool = True,
                 update_running: bool | None = None,
                 frozen: tuple[np.ndarray, np.ndarray] | None = None,
                 ) -> tuple[QTensor, dict]:
    """Whitening batch normalization, returning a backward cache.

    The cache holds per-channel (mean, Cholesky factor, whitened values).
    ``frozen`` optionally pins (means, factors) so repeated evaluations
    differentiate the statistics-frozen map.
    """
    if update_running is None:
        update_running = training
    x = _bn_flatten(batch, state.channels)
    samples = x.shape[1]
    if training and frozen is None and samples < 2:
        raise ShapeError("training-mode whitening needs a batch of >= 2")
    out = np.empty_like(x)
    means = np.empty((4, state.channels))
    chols = np.empty((state.channels, 4, 4))
    whitened_all = np.empty_like(x)
    for c in range(state.channels):
        xc = x[:, :, c]
        if frozen is not None:
            mean = frozen[0][:, c]
            chol = frozen[1][c]
            centered = xc - mean[:, None]
        elif training:
            mean = xc.mean(axis=1)
            centered = xc - mean[:, None]
            cov = centered @ centered.T / samples
            if update_running:
                state.running_mean[:, c] = _ema(state.running_mean[:, c],
                                                mean, state.momentum)
                state.running_cov[c] = _ema(state.running_cov[c], cov,
                                            state.momentum)
            chol = _factor(cov, state.eps, c)
        else:
            mean = state.running_mean[:, c]
            centered = xc - mean[:, None]
            chol = _factor(state.running_cov[c], state.eps, c)
        whitened = np.linalg.solve(chol, centered)
        gamma = tri_to_symmetric(state.gamma_tri[c])
        out[:, :, c] = gamma @ whitened + state.beta[:, c][:, None]
        means[:, c] = mean
        chols[c] = chol
        whitened_all[:, :, c] = whitened
    cache = {"means": means, "chols": chols, "whitened": whitened_all,
             "in_shape": batch.planes.shape}
    return QTensor(out.reshape(batch.planes.shape)), cache


def _factor(cov: np.ndarray, eps: float, channel: int) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov + eps * np.eye(4))
    except np.linalg.LinAlgError as exc:
        raise NumericError(
            f"whitening factorization failed for channel {channel}") from exc


def bn_wqbn(state: BNState, batch: QTensor, training: bool = True,
            update_running: bool | None = None) -> QTensor:
    """Whitening batch normalization.

    Per channel the 4x4 covariance V of the components is estimated over
    the batch, V + eps*I is Cholesky-factored as L L^T, and samples are
    whitened by L^{-1}(x - mean), then scaled by the symmetric learnable
    Gamma and shifted by beta.  Inference mode whitens with the running
    statistics instead.
    """
    out, _ = wqbn_forward(state, batch, training, update_running)
    return out


def vqbn_forward(state: BNState, batch: QTensor, training: bool = True,
                 update_running: bool | None = None) -> tuple[QTensor, dict]:
    """Variance batch normalization, returning a backward cache."""
    if update_running is None:
        update_running = training
    x = _bn_flatten(batch, state.channels)
    if training:
        mean = x.mean(axis=1)                       # (4, C)
        v = x - mean[:, None, :]
        var = np.mean(np.sum(v * v, axis=0), axis=0)  # (C,)
        if update_running:
            state.running_mean[:] = _ema(state.running_mean, mean,
                                         state.momentum)
            state.running_var[:] = _ema(state.running_var, var,
                                        state.momentum)
    else:
        mean = state.running_mean
        v = x - mean[:, None, :]
        var = state.running_var
    if state.linear_variance:
        denom = np.sqrt(var + state.eps)
    else:
        denom = np.sqrt(var * var + state.eps)
    out = state.gamma * v / denom + state.beta[:, None, :]
    cache = {"centered": v, "var": var, "denom": denom,
             "training": training, "in_shape": batch.planes.shape}
    return QTensor(out.reshape(batch.planes.shape)), cache


def bn_vqbn(state: BNState, batch: QTensor, training: bool = True,
            update_running: bool | None = None) -> QTensor:
    """Variance batch normalization: one real variance per channel.

    The variance is the mean squared norm of the centered samples.  The
    divisor is sqrt(V^2 + eps) exactly as stated in its source; set
    ``linear_variance`` on the state to use sqrt(V + eps) instead.
    """
    out, _ = vqbn_forward(state, batch, training, update_running)
    return out


def rqbn_forward(state: BNState, batch: QTensor, training: bool = True,
                 update_running: bool | None = None) -> tuple[QTensor, dict]:
    """Rotation-equivariant batch normalization with a backward cache."""
    if update_running is None:
        update_running = training
    x = _bn_flatten(batch, state.channels)
    if training:
        sqnorm = np.mean(np.sum(x * x, axis=0), axis=0)  # (C,)
        if update_running:
            state.running_sqnorm[:] = _ema(state.running_sqnorm, sqnorm,
                                           state.momentum)
    else:
        sqnorm = state.running_sqnorm
    scale = np.sqrt(sqnorm + state.eps)
    out = x / scale
    cache = {"x": x, "scale": scale, "training": training,
             "in_shape": batch.planes.shape}
    return QTensor(out.reshape(batch.planes.shape)), cache


def bn_rqbn(state: BNState, batch: QTensor, training: bool = True,
            update_running: bool | None = None) -> QTensor:
    """Rotation-equivariant batch normalization.

    Divides by the root mean squared norm per channel; no mean
    subtraction and no learnable parameters, so rotating the whole batch
    rotates the outputs identically.
    """
    out, _ = rqbn_forward(state, batch, training, update_running)
    return out


# ---------------------------------------------------------------------------
# Spectral normalization.
# ---------------------------------------------------------------------------

@dataclass
class SpectralState:
    """Persistent power-iteration vectors for one weight matrix."""

    u: np.ndarray | None = None
    v: np.ndarray | None = None
    sigma: float = 0.0
    iterations: int = 0
    seed: int = 0


def spectral_normalize(state: SpectralState, w: QTensor,
                       n_iterations: int = 1) -> QTensor:
    """Divide all four component planes of w by its spectral norm.

    The spectral norm is the largest singular value of the real block
    expansion of the K x L quaternion matrix, estimated by power
    iteration with vectors persisted on the state.  A zero matrix is
    returned unchanged with sigma flagged as 0.
    """
    if len(w.shape) != 2:
        raise ShapeError(f"expected a quaternion matrix, got shape {w.shape}")
    a = block_matrix(w.planes.astype(np.float64))
    if not np.any(a):
        logger.warning("spectral normalization of a zero matrix; skipped")
        state.sigma = 0.0
        return w
    rows, cols = a.shape
    if state.u is None or state.u.shape != (rows,):
        rng = np.random.Generator(np.random.PCG64(state.seed))
        u = rng.standard_normal(rows)
        state.u = u / np.linalg.norm(u)
    u = state.u
    v = None
    for _ in range(max(1, int(n_iterations))):
        v = a.T @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:
            break
        v = v / nv
        u = a @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            break
        u = u / nu
        state.iterations += 1
    state.u = u
    state.v = v
    sigma = float(u @ (a @ v)) if v is not None else 0.0
    state.sigma = sigma
    if sigma <= 0.0:
        logger.warning("spectral norm estimate <= 0; returning unchanged")
        return w
    return QTensor(w.planes / sigma)
