"""Scikit-learn style estimator wrapping the quaternion network.

``QCNNClassifier`` exposes the fit/predict surface so the network drops
into pipelines, cross-validation, and grid search.  Inputs are real
arrays of shape (n_samples, height, width, channels) whose channel count
is a multiple of four; each run of four channels packs into one
quaternion channel (for RGB images, prepend a zero channel first).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .config import RunConfig, build_network
from .errors import ShapeError
from .network import stack_batch
from .qtensor import pack_channels
from .qtrain import PRECISIONS, TrainConfig, predict_scores, train_network


def validate_quaternion_images(X) -> np.ndarray:
    """Validate (n, H, W, C) real input with C a multiple of 4."""
    X = check_array(X, allow_nd=True, dtype=np.float64)
    if X.ndim != 4:
        raise ShapeError(
            f"expected (n_samples, height, width, channels), got shape "
            f"{X.shape}")
    if X.shape[-1] % 4 != 0:
        raise ShapeError(
            f"channel count {X.shape[-1]} is not a multiple of 4")
    return X


class QCNNClassifier(BaseEstimator, ClassifierMixin):
    """Quaternion convolutional classifier with a fixed simple topology.

    The model stacks ``len(n_kernels)`` convolution+activation blocks,
    an optional pooling stage, and one classic fully connected layer
    with as many units as classes; class scores are the output
    magnitudes.

    Parameters mirror the run-config vocabulary: ``paradigm`` selects
    classic, geometric, or equivariant convolutions; ``norm`` optionally
    inserts wqbn/vqbn/rqbn after each block.
    """

    def __init__(self, paradigm: str = "classic",
                 n_kernels: tuple[int, ...] = (2, 2),
                 kernel_size: int = 3, channel_scheme: str = "summed",
                 activation: str = "relu", pool: str | None = "fully",
                 pool_size: int = 2, norm: str | None = None,
                 learning_rate: float = 0.05, epochs: int = 30,
                 batch_size: int = 16,
                 loss: str = "crossentropy_magnitude", seed: int = 0,
                 precision: str = "f32"):
        self.paradigm = paradigm
        self.n_kernels = n_kernels
        self.kernel_size = kernel_size
        self.channel_scheme = channel_scheme
        self.activation = activation
        self.pool = pool
        self.pool_size = pool_size
        self.norm = norm
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.loss = loss
        self.seed = seed
        self.precision = precision

    def _layer_specs(self, n_classes: int) -> list[dict[str, str]]:
        specs: list[dict[str, str]] = []
        for k in self.n_kernels:
            specs.append({"type": "conv", "paradigm": self.paradigm,
                          "kernel": str(self.kernel_size),
                          "kernels": str(k),
                          "scheme": self.channel_scheme})
            if self.activation == "rerelu":
                specs.append({"type": "rerelu"})
            elif self.activation:
                specs.append({"type": "act", "fn": self.activation})
            if self.norm:
                specs.append({"type": "norm", "kind": self.norm})
        if self.pool:
            specs.append({"type": "pool", "kind": self.pool,
                          "window": str(self.pool_size)})
        specs.append({"type": "fc", "units": str(n_classes)})
        for n, spec in enumerate(specs, 1):
            spec["_index"] = str(n)
        return specs

    def _run_config(self, input_shape, n_classes: int) -> RunConfig:
        train = TrainConfig(learning_rate=self.learning_rate,
                            batch_size=self.batch_size, epochs=self.epochs,
                            loss=self.loss, seed=self.seed,
                            precision=self.precision)
        return RunConfig(seed=self.seed, precision=self.precision,
                         out_dir=None, input_shape=tuple(input_shape),
                         layer_specs=self._layer_specs(n_classes),
                         train=train, train_manifest=None,
                         val_manifest=None, n_classes=n_classes,
                         gradcheck_threshold=1e-6, gradcheck_batch=4)

    def fit(self, X, y):
        X = validate_quaternion_images(X)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ShapeError(
                f"y must be one label per sample, got shape {y.shape}")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ShapeError("need at least two classes to fit")
        samples = [(pack_channels(X[n]), int(encoded[n]))
                   for n in range(X.shape[0])]
        input_shape = samples[0][0].shape
        run = self._run_config(input_shape, self.classes_.size)
        self.network_ = build_network(run)
        history = train_network(self.network_, samples, None, run.train)
        self.history_ = history
        self.loss_curve_ = [row.train_loss for row in history]
        self.n_iter_ = len(history)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self._input_shape = X.shape[1:]
        return self

    def _scores(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        X = validate_quaternion_images(X)
        if X.shape[1:] != self._input_shape:
            raise ShapeError(
                f"expected samples of shape {self._input_shape}, got "
                f"{X.shape[1:]}")
        planes = stack_batch([pack_channels(X[n])
                              for n in range(X.shape[0])],
                             dtype=PRECISIONS[self.precision])
        return predict_scores(self.network_, planes)

    def decision_function(self, X) -> np.ndarray:
        return self._scores(X)

    def predict_proba(self, X) -> np.ndarray:
        scores = self._scores(X)
        shifted = scores - scores.max(axis=1, keepdims=True)
        expd = np.exp(shifted)
        return expd / expd.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self._scores(X)
        return self.classes_[scores.argmax(axis=1)]
