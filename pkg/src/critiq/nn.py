"""Minimal dense neural kernel: two-layer tanh perceptrons, inverted dropout,
Adam with AMSGrad, and the initializers the model needs.

Parameters are plain numpy arrays (float32 storage by default; tests run a
float64 shadow for finite-difference checks). Gradients are hand-derived
reverse-mode for this fixed architecture; there is no general autodiff.
"""

from __future__ import annotations

import numpy as np

from critiq import kernels


class GradientError(ValueError):
    """Raised when an optimizer step receives a non-finite gradient."""


def xavier_init(shape, rng, dtype=np.float32):
    """Uniform init in +-sqrt(6 / (fan_in + fan_out))."""
    fan_in, fan_out = shape if len(shape) == 2 else (shape[0], shape[0])
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def l2_normalize_rows(mat):
    """Scale each row to unit Euclidean norm; zero rows are left untouched."""
    mat = np.asarray(mat)
    if mat.ndim == 1:
        norm = np.sqrt(np.sum(mat.astype(np.float64) ** 2))
        return mat if norm == 0.0 else (mat / norm).astype(mat.dtype)
    norms = np.sqrt(np.sum(mat.astype(np.float64) ** 2, axis=1, keepdims=True))
    norms[norms == 0.0] = 1.0
    return (mat / norms).astype(mat.dtype)


class TwoLayerNet:
    """x -> tanh(x W1 + b1) W2 + b2, with inverted dropout on the input."""

    def __init__(self, in_dim, hidden_dim, out_dim, rng, dtype=np.float32):
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.out_dim = out_dim
        self.W1 = xavier_init((in_dim, hidden_dim), rng, dtype)
        self.b1 = np.zeros(hidden_dim, dtype=dtype)
        self.W2 = xavier_init((hidden_dim, out_dim), rng, dtype)
        self.b2 = np.zeros(out_dim, dtype=dtype)

    def params(self):
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def forward(self, x, dropout_rate=0.0, training=False, rng=None):
        """Returns (output batch, cache for backward).

        Training mode draws an inverted-dropout mask over the input (scaled
        by 1/(1-p) so eval needs no rescaling); eval mode is deterministic.
        """
        if x.shape[1] != self.in_dim:
            raise ValueError(f"expected input dim {self.in_dim}, got {x.shape[1]}")
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
        mask = None
        if training and dropout_rate > 0.0:
            if rng is None:
                raise ValueError("training-mode dropout requires an rng")
            keep = 1.0 - dropout_rate
            mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
            x = x * mask
        hidden = np.tanh(x @ self.W1 + self.b1)
        out = hidden @ self.W2 + self.b2
        return out, (x, mask, hidden)

    def backward(self, cache, upstream):
        """Gradients of the composed function for a matching forward cache.

        Returns (parameter gradient dict, gradient wrt the pre-dropout input).
        """
        x_dropped, mask, hidden = cache
        grads = {
            "W2": hidden.T @ upstream,
            "b2": upstream.sum(axis=0),
        }
        d_hidden = kernels.tanh_backward(
            hidden, np.ascontiguousarray(upstream @ self.W2.T)
        )
        grads["W1"] = x_dropped.T @ d_hidden
        grads["b1"] = d_hidden.sum(axis=0)
        dx = d_hidden @ self.W1.T
        if mask is not None:
            dx = dx * mask
        return grads, dx


class AdamAmsgrad:
    """Adam with the AMSGrad max-corrected second moment.

    State is keyed by parameter name; arrays are updated in place through
    the kernel backend. Non-finite gradients reject the whole step.
    """

    def __init__(self, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {}
        self._v = {}
        self._vhat = {}

    def step(self, params, grads):
        for key, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise GradientError(f"non-finite gradient for parameter {key!r}")
        self.t += 1
        for key, param in params.items():
            g = np.ascontiguousarray(grads[key], dtype=param.dtype)
            if key not in self._m:
                self._m[key] = np.zeros_like(param)
                self._v[key] = np.zeros_like(param)
                self._vhat[key] = np.zeros_like(param)
            kernels.adam_amsgrad_update(
                param.ravel(), g.ravel(), self._m[key].ravel(),
                self._v[key].ravel(), self._vhat[key].ravel(),
                self.t, self.learning_rate, self.beta1, self.beta2, self.eps,
            )

    def second_moment_max(self, key):
        return self._vhat[key]
