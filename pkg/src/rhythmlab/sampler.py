"""Euler integration of the learned velocity field with classifier-free guidance."""
from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import tensor as T
from .config import SampleConfig
from .latent import LatentSequence
from .lyrics import PhonemeGrid, PhonemeVocab, build_phoneme_grid, parse_lrc
from .model import ConditionBundle, VelocityNet
from .tensor import DimensionError, NumericError


def cfg_velocity(v_cond, v_uncond, scale: float) -> np.ndarray:
    """v_u + scale * (v_c - v_u); scale 1 and 0 return the branches untouched."""
    v_cond, v_uncond = np.asarray(v_cond), np.asarray(v_uncond)
    if v_cond.shape != v_uncond.shape:
        raise DimensionError(f"guidance branches differ in shape: {v_cond.shape} vs {v_uncond.shape}")
    if scale == 1:
        return v_cond
    if scale == 0:
        return v_uncond
    return v_uncond + scale * (v_cond - v_uncond)


def euler_integrate(
    velocity: Callable[[np.ndarray, float], np.ndarray],
    z0: np.ndarray,
    n_steps: int,
) -> np.ndarray:
    """Explicit Euler from t=0 to t=1, velocity evaluated at the left end of each step."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    z = np.array(z0, dtype=np.float64 if np.asarray(z0).dtype == np.float64 else np.asarray(z0).dtype)
    dt = 1.0 / n_steps
    for k in range(n_steps):
        v = velocity(z, k / n_steps)
        z = z + dt * v
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite latent at Euler step {k}")
    return z


def guided_field(
    net: VelocityNet,
    tokens: np.ndarray,
    style: np.ndarray,
    scale: float,
) -> Callable[[np.ndarray, float], np.ndarray]:
    """Batched CFG velocity for songs (B, L, C).  Only the branches the scale needs are evaluated."""
    tokens = np.asarray(tokens)
    style = np.asarray(style, dtype=net.dtype)
    batch = tokens.shape[0]
    ones, zeros = np.ones(batch), np.zeros(batch)

    def field(z: np.ndarray, t: float) -> np.ndarray:
        tt = np.full(batch, t)
        zt = z.astype(net.dtype, copy=False)
        with T.no_grad():
            if scale == 1:
                return net.forward(zt, tokens, style, tt, zeros, zeros).data
            if scale == 0:
                return net.forward(zt, tokens, style, tt, ones, ones).data
            both = net.forward(
                np.concatenate([zt, zt]),
                np.concatenate([tokens, tokens]),
                np.concatenate([style, style]),
                np.concatenate([tt, tt]),
                np.concatenate([zeros, ones]),
                np.concatenate([zeros, ones]),
            ).data
        return cfg_velocity(both[:batch], both[batch:], scale)

    return field


def euler_sample_batch(
    net: VelocityNet,
    tokens: np.ndarray,
    style: np.ndarray,
    config: SampleConfig,
    z0: np.ndarray | None = None,
) -> np.ndarray:
    tokens = np.asarray(tokens)
    if z0 is None:
        rng = np.random.default_rng(config.seed)
        z0 = rng.standard_normal(tokens.shape + (net.cfg.latent_channels,))
    z0 = np.asarray(z0, dtype=net.dtype)
    return euler_integrate(guided_field(net, tokens, style, config.cfg_scale), z0, config.n_steps)


def euler_sample(net: VelocityNet, bundle: ConditionBundle, config: SampleConfig, z0=None) -> np.ndarray:
    """Generate one latent (L, C); the unconditional branch drops both lyrics and style."""
    style = bundle.style_segment
    tokens = bundle.grid.tokens[None]
    if z0 is not None:
        z0 = np.asarray(z0)[None]
    return euler_sample_batch(net, tokens, style[None], config, z0)[0]


def generate_song(
    net: VelocityNet,
    lrc_text: str,
    style_prompt,
    n_frames: int,
    config: SampleConfig,
    vocab: PhonemeVocab,
    frame_rate: float = 21.5,
    strict: bool = True,
    ablate_align: bool = False,
) -> tuple[LatentSequence, PhonemeGrid, dict]:
    """Lyrics + style prompt -> generated latent, the grid used, and timing stats."""
    if n_frames > net.cfg.max_frames:
        raise DimensionError(f"{n_frames} frames exceed the model's max_frames={net.cfg.max_frames}")
    sheet = parse_lrc(lrc_text, strict=strict)
    grid = build_phoneme_grid(sheet, vocab, n_frames, frame_rate, strict=strict)
    cond_grid = grid
    if ablate_align:
        from .lyrics import pack_to_front

        cond_grid = pack_to_front(grid)
    bundle = ConditionBundle(cond_grid, np.asarray(style_prompt), 0.0)
    start = time.perf_counter()
    z = euler_sample(net, bundle, config)
    wall = time.perf_counter() - start
    seconds = n_frames / frame_rate
    stats = {"wall_seconds": wall, "frames_per_second": n_frames / wall, "rtf": wall / seconds}
    return LatentSequence(np.asarray(z, dtype=np.float32), frame_rate), grid, stats
