"""Toy DiT-style velocity field v(z_t, t, c).

Conditioning: a gated recurrent cell summarises the style prompt into one
vector, which is projected to model width and added to a sinusoidal timestep
embedding (the global condition).  Per frame the network input is
``[noised latent | phoneme embedding | global condition]``; a linear
projection plus learned positions feeds pre-norm bidirectional transformer
blocks, and a final projection returns C velocity channels.

Condition dropout swaps in learned null vectors: the phoneme embeddings
become ``null_lyrics`` on every frame, the projected style becomes
``null_style``.  The timestep part is never dropped.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import NetConfig
from .lyrics import PhonemeGrid
from .tensor import DimensionError, NumericError, Tensor


@dataclass
class ConditionBundle:
    grid: PhonemeGrid
    style_segment: np.ndarray  # (P, C)
    t: float
    drop_lyrics: bool = False
    drop_style: bool = False

    def __post_init__(self):
        self.style_segment = np.asarray(self.style_segment)
        if not self.drop_style and self.style_segment.shape[0] < 1:
            raise ValueError("style segment needs at least one frame")

    def unconditional(self) -> ConditionBundle:
        return ConditionBundle(self.grid, self.style_segment, self.t, True, True)


def param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    W, C, E, H = cfg.model_width, cfg.latent_channels, cfg.phoneme_embed_dim, cfg.style_hidden_dim
    shapes = {
        "phoneme_embed": (cfg.vocab_size, E),
        "null_lyrics": (E,),
        "style_wx": (C, 3 * H),  # update | reset | candidate
        "style_wh_zr": (H, 2 * H),
        "style_wh_n": (H, H),
        "style_b": (3 * H,),
        "style_proj": (H, W),
        "null_style": (W,),
        "in_w": (cfg.input_width, W),
        "in_b": (W,),
        "pos_embed": (cfg.max_frames, W),
    }
    for i in range(cfg.n_layers):
        p = f"block{i}."
        shapes.update({
            p + "ln1_g": (W,), p + "ln1_b": (W,),
            p + "qkv_w": (W, 3 * W),
            p + "attn_out_w": (W, W), p + "attn_out_b": (W,),
            p + "ln2_g": (W,), p + "ln2_b": (W,),
            p + "mlp_w1": (W, cfg.mlp_ratio * W), p + "mlp_b1": (cfg.mlp_ratio * W,),
            p + "mlp_w2": (cfg.mlp_ratio * W, W), p + "mlp_b2": (W,),
        })
    shapes.update({"out_ln_g": (W,), "out_ln_b": (W,), "out_w": (W, C), "out_b": (C,)})
    return shapes


def init_params(cfg: NetConfig, seed: int = 0, dtype=np.float64) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.split(".")[-1]
        if leaf.endswith("_g"):
            value = np.ones(shape)
        elif len(shape) == 1 and ("_b" in leaf):
            value = np.zeros(shape)
        elif name in ("pos_embed", "null_lyrics", "null_style"):
            value = 0.02 * rng.standard_normal(shape)
        elif name == "phoneme_embed":
            value = rng.standard_normal(shape)
        else:
            value = rng.standard_normal(shape) / math.sqrt(shape[0])
        params[name] = Tensor(value.astype(dtype), requires_grad=True)
    return params


# ---------------------------------------------------------------- pieces


def embed_timestep(t, width: int) -> np.ndarray:
    """Sinusoidal embedding; frequencies geometric from 1 to 1e4.  Shape (..., width)."""
    half = width // 2
    freqs = np.geomspace(1.0, 1e4, half) if half > 1 else np.ones(1)
    angles = np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def encode_style(style: Tensor | np.ndarray, params: dict[str, Tensor]) -> Tensor:
    """Final hidden state of a GRU scanned over the prompt frames.  (B, P, C) -> (B, H)."""
    x = style if isinstance(style, Tensor) else Tensor(np.asarray(style))
    if x.ndim == 2:
        x = T.reshape(x, (1,) + x.shape)
    batch, frames, _ = x.shape
    if frames < 1:
        raise ValueError("style segment is empty")
    hidden = params["style_wh_n"].shape[0]
    xw = T.add(T.matmul(x, params["style_wx"]), params["style_b"])  # (B, P, 3H)
    h = Tensor(np.zeros((batch, hidden), dtype=params["style_wx"].dtype))
    for k in range(frames):
        xk = xw[:, k, :]
        zr = T.sigmoid(T.add(xk[:, : 2 * hidden], T.matmul(h, params["style_wh_zr"])))
        z, r = zr[:, :hidden], zr[:, hidden:]
        cand = T.tanh(T.add(xk[:, 2 * hidden :], T.matmul(T.mul(r, h), params["style_wh_n"])))
        h = T.add(h, T.mul(z, T.sub(cand, h)))  # (1 - z) h + z cand
    return h


def global_condition(style_vec: Tensor, t_embed, params: dict[str, Tensor] | None = None) -> Tensor:
    """Projected style plus timestep embedding.  Without ``params`` the style is already at model width."""
    if params is not None:
        style_vec = T.matmul(style_vec, params["style_proj"])
    t_embed = T._as_tensor(t_embed, style_vec)
    return T.add(style_vec, t_embed)


def _mix(value: Tensor, null: Tensor, drop: np.ndarray) -> Tensor:
    """``null`` where ``drop`` is 1, ``value`` elsewhere; drop broadcasts against value."""
    keep = (1.0 - drop).astype(value.dtype)
    return T.add(T.mul(value, keep), T.mul(null, drop.astype(value.dtype)))


def assemble_input(
    noised: Tensor | np.ndarray,
    tokens: np.ndarray,
    g: Tensor,
    params: dict[str, Tensor],
    drop_lyrics=None,
) -> Tensor:
    """Per frame ``[noised | phoneme embedding | g]``: (B, L, C + E + W)."""
    z = noised if isinstance(noised, Tensor) else Tensor(np.asarray(noised))
    tokens = np.asarray(tokens)
    squeeze = z.ndim == 2
    if squeeze:
        z = T.reshape(z, (1,) + z.shape)
        tokens = tokens[None]
        if g.ndim == 1:
            g = T.reshape(g, (1, g.shape[0]))
    batch, frames, _ = z.shape
    if tokens.shape != (batch, frames):
        raise DimensionError(f"grid shape {tokens.shape} does not match latent frames {(batch, frames)}")
    phon = T.embedding(params["phoneme_embed"], tokens)
    if drop_lyrics is not None:
        drop = np.asarray(drop_lyrics, dtype=np.float64).reshape(batch, 1, 1)
        phon = _mix(phon, params["null_lyrics"], drop)
    width = g.shape[-1]
    g_frames = T.add(np.zeros((batch, frames, width), dtype=z.dtype), T.reshape(g, (batch, 1, width)))
    out = T.concat([z, phon, g_frames], axis=-1)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def _block(h: Tensor, params: dict[str, Tensor], prefix: str, n_heads: int) -> Tensor:
    B, L, W = h.shape
    dh = W // n_heads
    x = T.layer_norm(h, params[prefix + "ln1_g"], params[prefix + "ln1_b"])
    qkv = T.matmul(x, params[prefix + "qkv_w"])  # no bias: the key bias has an identically zero gradient
    qkv = T.transpose(T.reshape(qkv, (B, L, 3, n_heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.matmul(T.scale(q, 1.0 / math.sqrt(dh)), T.transpose(k, (0, 1, 3, 2)))
    attn = T.softmax(scores, axis=-1)
    ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (B, L, W))
    h = T.add(h, T.add(T.matmul(ctx, params[prefix + "attn_out_w"]), params[prefix + "attn_out_b"]))
    x = T.layer_norm(h, params[prefix + "ln2_g"], params[prefix + "ln2_b"])
    x = T.gelu(T.add(T.matmul(x, params[prefix + "mlp_w1"]), params[prefix + "mlp_b1"]))
    return T.add(h, T.add(T.matmul(x, params[prefix + "mlp_w2"]), params[prefix + "mlp_b2"]))


# ---------------------------------------------------------------- network


class VelocityNet:
    """Named parameter tensors plus the forward pass."""

    def __init__(self, cfg: NetConfig, params: dict[str, Tensor] | None = None, seed: int = 0, dtype=np.float64):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed, dtype)
        expected = param_shapes(cfg)
        for name, shape in expected.items():
            if name not in self.params or self.params[name].shape != shape:
                got = self.params[name].shape if name in self.params else None
                raise DimensionError(f"parameter {name}: expected {shape}, got {got}")

    @property
    def dtype(self):
        return self.params["in_w"].dtype

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: np.array(v.data) for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            p.assign(state[name])

    def copy(self) -> VelocityNet:
        params = {k: Tensor(np.array(v.data), requires_grad=True) for k, v in self.params.items()}
        return VelocityNet(self.cfg, params)

    def forward(
        self,
        noised,
        tokens: np.ndarray,
        style,
        t,
        drop_lyrics=None,
        drop_style=None,
    ) -> Tensor:
        """Batched velocity.  noised (B, L, C), tokens (B, L), style (B, P, C), t (B,)."""
        p, cfg = self.params, self.cfg
        z = noised if isinstance(noised, Tensor) else Tensor(np.asarray(noised, dtype=self.dtype))
        B, L, C = z.shape
        if C != cfg.latent_channels:
            raise DimensionError(f"latent has {C} channels, network expects {cfg.latent_channels}")
        if L > cfg.max_frames:
            raise DimensionError(f"{L} frames exceed max_frames={cfg.max_frames}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        drop_l = np.zeros(B) if drop_lyrics is None else np.broadcast_to(np.asarray(drop_lyrics, dtype=np.float64), (B,))
        drop_s = np.zeros(B) if drop_style is None else np.broadcast_to(np.asarray(drop_style, dtype=np.float64), (B,))

        style = np.asarray(style, dtype=self.dtype)
        if style.ndim == 2:
            style = np.broadcast_to(style, (B,) + style.shape)
        style_vec = T.matmul(encode_style(style, p), p["style_proj"])
        style_vec = _mix(style_vec, p["null_style"], drop_s.reshape(B, 1))
        g = global_condition(style_vec, embed_timestep(t, cfg.model_width).astype(self.dtype))

        x = assemble_input(z, tokens, g, p, drop_lyrics=drop_l)
        h = T.add(T.add(T.matmul(x, p["in_w"]), p["in_b"]), p["pos_embed"][:L])
        for i in range(cfg.n_layers):
            h = _block(h, p, f"block{i}.", cfg.n_heads)
        h = T.layer_norm(h, p["out_ln_g"], p["out_ln_b"])
        out = T.add(T.matmul(h, p["out_w"]), p["out_b"])
        if not np.all(np.isfinite(out.data)):
            raise NumericError("velocity network produced non-finite output")
        return out

    __call__ = forward


def forward_velocity(bundle: ConditionBundle, noised, net: VelocityNet) -> Tensor:
    """Single-song velocity (L, C) for one condition bundle."""
    z = np.asarray(noised, dtype=net.dtype)
    if len(bundle.grid) != z.shape[0]:
        raise DimensionError(f"grid length {len(bundle.grid)} != latent length {z.shape[0]}")
    style = bundle.style_segment
    if style.shape[0] == 0:  # only legal when the style is dropped
        style = np.zeros((1, z.shape[1]))
    out = net.forward(
        z[None],
        bundle.grid.tokens[None],
        style[None],
        [bundle.t],
        [bundle.drop_lyrics],
        [bundle.drop_style],
    )
    return T.reshape(out, out.shape[1:])
