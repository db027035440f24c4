"""Elementwise kernels shared by the network, loss and attack code.

Tensors are plain float64 numpy arrays. Every public function returns a new
array and refuses to hand back NaN or Inf.
"""

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an operation would produce NaN or Inf."""


class ShapeError(ValueError):
    """Raised when operands that must agree in shape do not."""


def as_tensor(x):
    t = np.asarray(x, dtype=np.float64)
    return check_finite(t)


def check_finite(t, what="tensor"):
    if not np.all(np.isfinite(t)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return t


def _same_shape(*arrays):
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ShapeError(f"shape mismatch: {shape} vs {a.shape}")


def sign(t):
    t = as_tensor(t)
    return np.sign(t)


def clip_box(t, lo, hi):
    """Clamp ``t`` elementwise into ``[lo, hi]``."""
    t, lo, hi = as_tensor(t), as_tensor(lo), as_tensor(hi)
    _same_shape(t, lo, hi)
    if np.any(lo > hi):
        raise ValueError("clip_box requires lo <= hi elementwise")
    return np.minimum(np.maximum(t, lo), hi)


def l2_normalize(t, axis=-1):
    """Scale ``t`` to unit L2 norm along ``axis``.

    A zero-norm row means a degenerate embedding and raises ``ValueError``.
    """
    t = as_tensor(t)
    norm = np.sqrt(np.sum(t * t, axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise ValueError("cannot normalize a zero-norm vector")
    return t / norm


def l2_normalize_backward(t, grad_out, axis=-1):
    """Vector-Jacobian product of :func:`l2_normalize` at ``t``."""
    norm = np.sqrt(np.sum(t * t, axis=axis, keepdims=True))
    u = t / norm
    radial = np.sum(u * grad_out, axis=axis, keepdims=True)
    return (grad_out - u * radial) / norm


def axpy_sign_step(x, g, step):
    """Return ``x + step * sign(g)``.

    A positive step moves along the gradient (loss-increasing perturbation),
    a negative step against it.
    """
    x, g = as_tensor(x), as_tensor(g)
    _same_shape(x, g)
    return check_finite(x + float(step) * np.sign(g), "axpy_sign_step output")


def linf(t):
    t = np.asarray(t)
    return float(np.max(np.abs(t))) if t.size else 0.0
