"""Logit-normal timestep density and sampler for flow-matching training."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_EDGE = 1e-7


@dataclass(frozen=True)
class LogitNormalParams:
    m: float = 0.0
    s: float = 1.0

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError(f"logit-normal scale must be positive, got s={self.s}")


def logit(t):
    return np.log(t / (1.0 - t))


def logit_normal_pdf(t, params: LogitNormalParams = LogitNormalParams()):
    """Density of sigmoid(u), u ~ Normal(m, s), evaluated at ``t`` in (0, 1)."""
    if params.s <= 0:
        raise ValueError(f"logit-normal scale must be positive, got s={params.s}")
    arr = np.asarray(t, dtype=np.float64)
    if np.any((arr <= 0.0) | (arr >= 1.0)) or np.any(np.isnan(arr)):
        raise ValueError("logit_normal_pdf is defined on the open interval (0, 1)")
    m, s = params.m, params.s
    z = (logit(arr) - m) / s
    out = np.exp(-0.5 * z * z) / (s * math.sqrt(2.0 * math.pi) * arr * (1.0 - arr))
    return float(out) if out.ndim == 0 else out


def box_muller(rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` standard normals from pairs of uniforms."""
    pairs = (n + 1) // 2
    u1 = 1.0 - rng.random(pairs)  # (0, 1], keeps log finite
    u2 = rng.random(pairs)
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * math.pi * u2
    return np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]


def logistic(u):
    return 1.0 / (1.0 + np.exp(-np.asarray(u, dtype=np.float64)))


def _clamp(t: np.ndarray) -> np.ndarray:
    # only touches values that saturated to an exact endpoint
    t = np.where(t <= 0.0, _EDGE, t)
    return np.where(t >= 1.0, 1.0 - _EDGE, t)


def sample_timesteps(
    rng: np.random.Generator,
    n: int,
    params: LogitNormalParams = LogitNormalParams(),
    uniform: bool = False,
) -> np.ndarray:
    """Draw ``n`` training timesteps; ``uniform=True`` is the ablation baseline."""
    if uniform:
        return _clamp(rng.random(n))
    u = params.m + params.s * box_muller(rng, n)
    return _clamp(logistic(u))


def sample_timestep(rng: np.random.Generator, params: LogitNormalParams = LogitNormalParams()) -> float:
    return float(sample_timesteps(rng, 1, params)[0])
