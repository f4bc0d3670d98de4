"""Dense matrix primitives with hand-derived backward passes.

Matrices are plain row-major numpy arrays. Each forward operation has a
matching ``*_backward`` that maps the upstream gradient to gradients of
its inputs; nothing here builds a graph. Gradient-checked builds run in
float64, where every backward matches central finite differences to
better than 1e-4 relative error.
"""

from __future__ import annotations

import hashlib

import numpy as np
from scipy import special

from .errors import NumericError, ShapeError, ValidationError

LAYER_NORM_EPS = 1e-5

# 2-D float64 ndarray in this module's contracts.
DenseMatrix = np.ndarray


class ParamStore:
    """Named parameters with same-shaped gradient buffers.

    Parameter arrays are updated in place by optimizers so views handed
    out at registration time stay valid. Gradient accumulation is
    single-writer; do not share one store across concurrent backwards.
    """

    def __init__(self):
        self._params: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self._params:
            raise ValidationError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        self._params[name] = arr
        self._grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return sorted(self._params)

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def add_grad(self, name: str, g: np.ndarray) -> None:
        self._grads[name] += g

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def copy(self) -> "ParamStore":
        dup = ParamStore()
        for name in self.names():
            dup.add(name, self._params[name].copy())
            dup._grads[name][...] = self._grads[name]
        return dup

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in self.names():
            h.update(name.encode())
            h.update(self._params[name].tobytes())
        return h.hexdigest()


def matmul(a: DenseMatrix, b: DenseMatrix) -> DenseMatrix:
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul {a.shape} x {b.shape}")
    return a @ b


def matmul_backward(grad: DenseMatrix, a: DenseMatrix, b: DenseMatrix):
    return grad @ b.T, a.T @ grad


def linear(x: DenseMatrix, weight: DenseMatrix, bias: np.ndarray) -> DenseMatrix:
    """x @ weight + broadcast bias row."""
    if x.shape[-1] != weight.shape[0] or weight.shape[1] != bias.shape[-1]:
        raise ShapeError(f"linear {x.shape} x {weight.shape} + {bias.shape}")
    return x @ weight + bias


def linear_backward(grad: DenseMatrix, x: DenseMatrix, weight: DenseMatrix):
    return grad @ weight.T, x.T @ grad, grad.sum(axis=0)


def softmax_rows(m: DenseMatrix) -> DenseMatrix:
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(grad: DenseMatrix, out: DenseMatrix) -> DenseMatrix:
    # dL/dm = out * (g - sum_j g_j out_j) per row
    return out * (grad - (grad * out).sum(axis=-1, keepdims=True))


def layer_norm(x: DenseMatrix, gamma: np.ndarray, beta: np.ndarray):
    """Row-wise normalization to zero mean / unit variance, then affine.

    Returns (out, cache) where the cache feeds layer_norm_backward.
    """
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (x - mean) * inv_std
    return xhat * gamma + beta, (xhat, inv_std)


def layer_norm_backward(grad: DenseMatrix, cache, gamma: np.ndarray):
    xhat, inv_std = cache
    gxhat = grad * gamma
    gx = inv_std * (
        gxhat
        - gxhat.mean(axis=-1, keepdims=True)
        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return gx, (grad * xhat).sum(axis=0), grad.sum(axis=0)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + special.erf(x / np.sqrt(2.0)))


def gelu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + special.erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return grad * (cdf + x * pdf)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return special.expit(x)


def sigmoid_backward(grad: np.ndarray, out: np.ndarray) -> np.ndarray:
    return grad * out * (1.0 - out)


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(grad: np.ndarray, out: np.ndarray) -> np.ndarray:
    return grad * (1.0 - out * out)


def finite_diff_check(f, params: ParamStore, eps: float = 1e-5) -> float:
    """Worst relative error of the analytic gradients held in ``params``
    against central finite differences of the scalar function ``f``.

    ``params.grad(name)`` must already hold the analytic gradient of
    ``f`` at the current parameter values. Every element is perturbed by
    +-eps in place and restored bit-exactly afterwards.
    """
    if eps <= 0:
        raise ValidationError(f"eps must be positive, got {eps}")
    worst = 0.0
    for name in params.names():
        arr = params[name]
        analytic = params.grad(name)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f(params))
            flat[i] = orig - eps
            f_minus = float(f(params))
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            rel = abs(numeric - a) / max(abs(numeric), abs(a), 1e-8)
            worst = max(worst, rel)
    return worst
