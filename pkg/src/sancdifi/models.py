"""Toy networks trained from scratch plus a closed-form Gaussian denoiser.

Classifiers follow the scikit-learn estimator protocol: ``fit(X, y)``,
``predict_proba(X)`` and ``predict(X)`` on unit-domain image batches shaped
``(B, H, W, C)``.  Anything with a ``predict_proba`` method can be used as a
black-box classifier by the saliency and purification code.

Noise predictors expose ``predict_eps(x_t, t)`` on signed-domain batches.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import _nn
from ._validation import check_images, check_labels
from .core import DiffusionSchedule, ParameterError, make_linear_schedule, make_rng, to_signed

__all__ = [
    "TrainingDivergedError",
    "ToyClassifier",
    "ToyNoisePredictor",
    "AnalyticGaussianDenoiser",
    "analytic_eps",
]


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss.  ``loss_trace`` holds the epochs completed so far."""

    def __init__(self, message, loss_trace):
        super().__init__(message)
        self.loss_trace = list(loss_trace)


def _batches(rng, n, batch_size):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


class ToyClassifier(ClassifierMixin, BaseEstimator):
    """3x3 conv (``n_filters`` maps) -> ReLU -> global average pool -> dense -> softmax.

    Parameters
    ----------
    n_filters : int
        Output channels of the convolution.
    n_classes : int or None
        Number of classes.  Inferred as ``max(y) + 1`` when None.
    epochs, batch_size, learning_rate : training schedule for mini-batch
        descent on cross-entropy.
    optimizer : {"adam", "sgd"}
    random_state : int
        Seeds initialization and mini-batch order.

    Attributes
    ----------
    params_ : dict of ndarray
        ``conv_w`` ``(C*9, n_filters)``, ``conv_b``, ``dense_w`` ``(n_filters, K)``, ``dense_b``.
    loss_curve_ : list of float
        Mean training loss per epoch.
    """

    def __init__(self, n_filters=8, n_classes=None, epochs=20, batch_size=32,
                 learning_rate=0.01, optimizer="adam", random_state=0):
        self.n_filters = n_filters
        self.n_classes = n_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.random_state = random_state

    def _init_params(self, channels, n_classes, rng):
        f = self.n_filters
        return {
            "conv_w": _nn.he_normal(rng, channels * 9, (channels * 9, f)),
            "conv_b": np.zeros(f),
            "dense_w": rng.standard_normal((f, n_classes)) * np.sqrt(1.0 / f),
            "dense_b": np.zeros(n_classes),
        }

    def fit(self, X, y):
        X = check_images(X, allow_single=False, ensure_min_samples=1)
        y = check_labels(y, X.shape[0], self.n_classes)
        if self.learning_rate < 0:
            raise ParameterError("learning_rate must be non-negative")
        k = self.n_classes if self.n_classes is not None else int(y.max()) + 1
        self.n_classes_ = max(k, 1)
        self.classes_ = np.arange(self.n_classes_)
        self.n_channels_ = X.shape[3]
        rng = make_rng(self.random_state, "classifier/train")
        self.params_ = self._init_params(self.n_channels_, self.n_classes_, rng)
        opt = _nn.make_optimizer(self.optimizer, self.params_, self.learning_rate)
        self.loss_curve_ = []
        for epoch in range(self.epochs):
            total, count = 0.0, 0
            for idx in _batches(rng, X.shape[0], self.batch_size):
                loss, grads = self._loss_and_grads(X[idx], y[idx])
                if not np.isfinite(loss):
                    raise TrainingDivergedError(f"non-finite loss in epoch {epoch}", self.loss_curve_)
                opt.step(self.params_, grads)
                total += loss * len(idx)
                count += len(idx)
            self.loss_curve_.append(total / count)
        return self

    def _forward(self, X, params=None):
        p = self.params_ if params is None else params
        # inputs centered at mid-gray for better conditioning
        z1, cols = _nn.conv_forward(X - 0.5, p["conv_w"], p["conv_b"])
        a1 = np.maximum(z1, 0.0)
        pooled = a1.mean(axis=(1, 2))
        logits = pooled @ p["dense_w"] + p["dense_b"]
        return logits, (X.shape, cols, z1, pooled)

    def _backward(self, dlogits, cache, need_input_grad=False):
        p = self.params_
        x_shape, cols, z1, pooled = cache
        h, w = x_shape[1], x_shape[2]
        grads = {"dense_w": pooled.T @ dlogits, "dense_b": dlogits.sum(axis=0)}
        dpooled = dlogits @ p["dense_w"].T
        dz1 = np.broadcast_to(dpooled[:, None, None, :] / (h * w), z1.shape) * (z1 > 0)
        dx, grads["conv_w"], grads["conv_b"] = _nn.conv_backward(
            dz1, cols, p["conv_w"], x_shape, need_input_grad)
        return dx, grads

    def _loss_and_grads(self, X, y):
        logits, cache = self._forward(X)
        logp = _nn.log_softmax(logits)
        n = X.shape[0]
        loss = -logp[np.arange(n), y].mean()
        dlogits = np.exp(logp)
        dlogits[np.arange(n), y] -= 1.0
        _, grads = self._backward(dlogits / n, cache)
        return float(loss), grads

    def loss(self, X, y):
        """Mean cross-entropy of the current weights on ``(X, y)``."""
        check_is_fitted(self)
        X = check_images(X)
        logp = _nn.log_softmax(self._forward(X)[0])
        return float(-logp[np.arange(X.shape[0]), np.asarray(y)].mean())

    def decision_function(self, X, chunk=512):
        check_is_fitted(self)
        X = check_images(X)
        out = [self._forward(X[i:i + chunk])[0] for i in range(0, X.shape[0], chunk)]
        return np.concatenate(out) if out else np.empty((0, self.n_classes_))

    def predict_proba(self, X):
        return _nn.softmax(self.decision_function(X))

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)

    def input_gradient(self, X, k):
        """Gradient of ``log p_k(x)`` with respect to the input pixels.

        ``k`` is a class index or one index per image.
        """
        check_is_fitted(self)
        X = check_images(X)
        k = np.broadcast_to(np.asarray(k, dtype=np.int64), (X.shape[0],))
        if np.any(k < 0) or np.any(k >= self.n_classes_):
            raise ParameterError(f"class index out of range for {self.n_classes_} classes")
        logits, cache = self._forward(X)
        dlogits = -_nn.softmax(logits)
        dlogits[np.arange(X.shape[0]), k] += 1.0
        dx, _ = self._backward(dlogits, cache, need_input_grad=True)
        return dx


class ToyNoisePredictor(BaseEstimator):
    """Two-layer conv network predicting the noise of a noised signed-domain image.

    ``eps(x_t, t) = conv2(relu(conv1(x_t) + embed(t)))``, where ``embed`` is a
    learned linear map of sinusoidal timestep features added to every pixel of
    the hidden layer.

    ``fit`` minimizes ``E ||eps - eps_theta(sqrt(ab_t) x0 + sqrt(1 - ab_t) eps, t)||^2``
    with ``t`` uniform over the schedule.  Training images are expected in the
    unit domain and converted internally.
    """

    def __init__(self, hidden=16, emb_dim=16, T=1000, beta_start=1e-4, beta_end=0.02,
                 epochs=30, batch_size=32, learning_rate=0.005, optimizer="adam", random_state=0):
        self.hidden = hidden
        self.emb_dim = emb_dim
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.random_state = random_state

    @property
    def schedule(self) -> DiffusionSchedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)

    def init_params(self, channels):
        """Set freshly initialized weights for ``channels``-channel images and return self."""
        rng = make_rng(self.random_state, "denoiser/init")
        hdim = self.hidden
        self.n_channels_ = channels
        self.params_ = {
            "conv1_w": _nn.he_normal(rng, channels * 9, (channels * 9, hdim)),
            "conv1_b": np.zeros(hdim),
            "emb_w": rng.standard_normal((self.emb_dim, hdim)) * np.sqrt(1.0 / self.emb_dim),
            "conv2_w": rng.standard_normal((hdim * 9, channels)) * np.sqrt(1.0 / (hdim * 9)),
            "conv2_b": np.zeros(channels),
        }
        self.loss_curve_ = []
        return self

    def fit(self, X, y=None):
        X0 = to_signed(check_images(X, allow_single=False, ensure_min_samples=1))
        if self.learning_rate < 0:
            raise ParameterError("learning_rate must be non-negative")
        schedule = self.schedule
        self.init_params(X0.shape[3])
        opt = _nn.make_optimizer(self.optimizer, self.params_, self.learning_rate)
        rng = make_rng(self.random_state, "denoiser/train")
        for epoch in range(self.epochs):
            total, count = 0.0, 0
            for idx in _batches(rng, X0.shape[0], self.batch_size):
                x0 = X0[idx]
                t = rng.integers(0, schedule.T, size=len(idx))
                eps = rng.standard_normal(x0.shape)
                ab = schedule.alpha_bar[t][:, None, None, None]
                xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
                loss, grads = self._loss_and_grads(xt, t, eps)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(f"non-finite loss in epoch {epoch}", self.loss_curve_)
                opt.step(self.params_, grads)
                total += loss * len(idx)
                count += len(idx)
            self.loss_curve_.append(total / count)
        return self

    def _forward(self, xt, t, params=None):
        p = self.params_ if params is None else params
        temb = _nn.timestep_embedding(np.broadcast_to(t, (xt.shape[0],)), self.emb_dim)
        z1, cols1 = _nn.conv_forward(xt, p["conv1_w"], p["conv1_b"])
        z1 = z1 + (temb @ p["emb_w"])[:, None, None, :]
        a1 = np.maximum(z1, 0.0)
        out, cols2 = _nn.conv_forward(a1, p["conv2_w"], p["conv2_b"])
        return out, (xt.shape, cols1, z1, a1.shape, cols2, temb)

    def _loss_and_grads(self, xt, t, eps):
        out, cache = self._forward(xt, t)
        diff = out - eps
        loss = float(np.mean(diff ** 2))
        dout = 2.0 * diff / diff.size
        x_shape, cols1, z1, a1_shape, cols2, temb = cache
        p = self.params_
        grads = {}
        da1, grads["conv2_w"], grads["conv2_b"] = _nn.conv_backward(dout, cols2, p["conv2_w"], a1_shape)
        dz1 = da1 * (z1 > 0)
        grads["emb_w"] = temb.T @ dz1.sum(axis=(1, 2))
        _, grads["conv1_w"], grads["conv1_b"] = _nn.conv_backward(
            dz1, cols1, p["conv1_w"], x_shape, need_input_grad=False)
        return loss, grads

    def loss(self, xt, t, eps):
        """Noise-prediction MSE of the current weights."""
        check_is_fitted(self)
        out, _ = self._forward(check_images(xt), t)
        return float(np.mean((out - np.asarray(eps)) ** 2))

    def predict_eps(self, x_t, t):
        check_is_fitted(self)
        x_t = np.asarray(x_t, dtype=np.float64)
        single = x_t.ndim == 3
        out, _ = self._forward(x_t[None] if single else x_t, t)
        return out[0] if single else out


class AnalyticGaussianDenoiser:
    """Exact posterior-mean noise predictor when data are ``N(mu0, var0 I)``.

    For ``x_t = sqrt(ab) x0 + sqrt(1 - ab) eps`` the conditional mean is
    ``E[eps | x_t] = sqrt(1 - ab) (x_t - sqrt(ab) mu0) / (ab var0 + 1 - ab)``.
    """

    def __init__(self, mu0, var0, schedule: DiffusionSchedule):
        if not var0 > 0:
            raise ParameterError("var0 must be positive")
        self.mu0 = np.asarray(mu0, dtype=np.float64)
        self.var0 = float(var0)
        self.schedule = schedule

    def predict_eps(self, x_t, t):
        return analytic_eps(self, x_t, t)


def analytic_eps(d: AnalyticGaussianDenoiser, x_t, t):
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= d.schedule.T):
        raise ParameterError(f"timestep out of range [0, {d.schedule.T})")
    x_t = np.asarray(x_t, dtype=np.float64)
    ab = d.schedule.alpha_bar[t]
    if ab.ndim == 1 and x_t.ndim == 4:
        ab = ab[:, None, None, None]
    return np.sqrt(1.0 - ab) * (x_t - np.sqrt(ab) * d.mu0) / (ab * d.var0 + 1.0 - ab)
