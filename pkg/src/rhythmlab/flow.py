"""Straight-line conditional flow matching: interpolant, target velocity, loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, Tensor, squared_error


def _check_pair(z0, z1) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(z0), np.asarray(z1)
    if a.shape != b.shape:
        raise DimensionError(f"latent shapes differ: {a.shape} vs {b.shape}")
    return a, b


def interpolate(z0, z1, t):
    """(1 - t) z0 + t z1.  ``t`` may be a scalar or broadcast against leading axes."""
    a, b = _check_pair(z0, z1)
    t = np.asarray(t, dtype=a.dtype)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("interpolation time must lie in [0, 1]")
    if t.ndim:
        t = t.reshape(t.shape + (1,) * (a.ndim - t.ndim))
    return (1 - t) * a + t * b


def target_velocity(z0, z1) -> np.ndarray:
    a, b = _check_pair(z0, z1)
    return b - a


def fm_loss(pred_v, z0, z1) -> Tensor:
    """Mean squared error between predicted velocity and z1 - z0 over every element."""
    target = target_velocity(z0, z1)
    pred = pred_v if isinstance(pred_v, Tensor) else Tensor(pred_v)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} vs target {target.shape}")
    return squared_error(pred, target.astype(pred.dtype, copy=False))


@dataclass
class FlowSample:
    z0: np.ndarray
    z1: np.ndarray
    t: float | np.ndarray
    z_t: np.ndarray
    target_v: np.ndarray

    @classmethod
    def draw(cls, z1: np.ndarray, t, rng: np.random.Generator) -> FlowSample:
        """Pair data ``z1`` with standard-Gaussian noise and form the interpolant."""
        z1 = np.asarray(z1)
        z0 = rng.standard_normal(z1.shape).astype(z1.dtype, copy=False)
        return cls(z0, z1, t, interpolate(z0, z1, t), target_velocity(z0, z1))
