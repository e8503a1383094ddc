"""Training: AdamW, EMA shadow weights, condition dropout, curriculum, checkpoints."""
from __future__ import annotations

import json
import logging
import struct
import time
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .config import ConfigError, ExperimentConfig, TrainConfig
from .flow import fm_loss, interpolate
from .lyrics import pack_to_front
from .model import ConditionBundle, VelocityNet, param_shapes
from .synth import SongRecord, extract_style_prompt, held_out_split, truncate_pair
from .tensor import DimensionError, NumericError, Tensor
from .timesteps import LogitNormalParams, sample_timesteps

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RHYCKPT\x00"
CHECKPOINT_VERSION = 2


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor]) -> OptimizerState:
        return cls(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adamw_step(
    params: dict[str, Tensor],
    opt: OptimizerState,
    cfg: TrainConfig,
    lr: float | None = None,
    grads: dict[str, np.ndarray] | None = None,
) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params`` and ``opt``.

    Gradients default to each parameter's ``.grad``.  Any non-finite gradient
    aborts the step before anything is modified.
    """
    lr = cfg.lr if lr is None else lr
    if grads is None:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or opt.m[name].shape != p.shape:
            raise DimensionError(f"{name}: grad {g.shape} / moment {opt.m[name].shape} vs param {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; step aborted")
    step = opt.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1**step, 1.0 - b2**step
    for name, p in params.items():
        g = grads[name]
        m = b1 * opt.m[name] + (1 - b1) * g
        v = b2 * opt.v[name] + (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps) + cfg.weight_decay * p.data
        opt.m[name] = m.astype(p.dtype, copy=False)
        opt.v[name] = v.astype(p.dtype, copy=False)
        p.assign(p.data - lr * update)
    opt.step = step


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up, then exponential decay to ``final_lr_frac`` of peak at ``n_steps``."""
    warm = int(cfg.warmup_frac * cfg.n_steps)
    if step < warm:
        return cfg.lr * (step + 1) / warm
    span = max(cfg.n_steps - warm, 1)
    return cfg.lr * cfg.final_lr_frac ** (min(step - warm, span) / span)


# ---------------------------------------------------------------- EMA


@dataclass
class EmaState:
    """Shadow weights plus the weights they started from.

    ``shadow`` follows the plain recursion.  ``origin`` lets :meth:`debiased`
    remove the start point's leftover share ``decay**k``, which is still large
    when only a few hundred updates have been applied.
    """

    shadow: dict[str, np.ndarray]
    updates_applied: int = 0
    origin: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        if self.origin is None:
            self.origin = {k: np.array(v) for k, v in self.shadow.items()}

    @classmethod
    def from_params(cls, params: dict[str, Tensor]) -> EmaState:
        return cls({k: np.array(p.data) for k, p in params.items()})

    def debiased(self, decay: float) -> dict[str, np.ndarray]:
        """Average of the parameters seen so far, without the starting weights."""
        if self.updates_applied == 0:
            return {k: np.array(v) for k, v in self.shadow.items()}
        w = decay**self.updates_applied
        return {
            k: ((s.astype(np.float64) - w * self.origin[k]) / (1.0 - w)).astype(s.dtype)
            for k, s in self.shadow.items()
        }


def ema_update(ema: EmaState, params: dict[str, Tensor], decay: float) -> None:
    for name, p in params.items():
        s = ema.shadow[name]
        if s.shape != p.shape:
            raise DimensionError(f"EMA shadow {name}: {s.shape} vs {p.shape}")
        ema.shadow[name] = decay * s + (1 - decay) * p.data
    ema.updates_applied += 1


# ---------------------------------------------------------------- dropout


def dropout_flags(rng: np.random.Generator, n: int, p: float) -> tuple[np.ndarray, np.ndarray]:
    """Independent (drop_lyrics, drop_style) draws, each with probability ``p``."""
    if not 0 <= p < 1:
        raise ValueError("dropout probability must be in [0, 1)")
    u = rng.random((n, 2))
    return u[:, 0] < p, u[:, 1] < p


def cfg_dropout(bundle: ConditionBundle, rng: np.random.Generator, p: float = 0.2) -> ConditionBundle:
    drop_l, drop_s = dropout_flags(rng, 1, p)
    return replace(bundle, drop_lyrics=bool(drop_l[0]), drop_style=bool(drop_s[0]))


# ---------------------------------------------------------------- batches


@dataclass
class Batch:
    z1: np.ndarray  # (B, L, C)
    z0: np.ndarray
    tokens: np.ndarray  # (B, L)
    style: np.ndarray  # (B, P, C)
    t: np.ndarray  # (B,)
    drop_lyrics: np.ndarray
    drop_style: np.ndarray

    @property
    def z_t(self) -> np.ndarray:
        return interpolate(self.z0, self.z1, self.t)


def window_frames(step: int, cfg: TrainConfig) -> int:
    if step < int(cfg.stage1_frac * cfg.n_steps):
        return min(cfg.stage1_L_max, cfg.L_max)
    return cfg.L_max


def make_batch(
    songs: list[SongRecord],
    cfg: TrainConfig,
    rng: np.random.Generator,
    frames: int,
    noise_sigma: float = 0.0,
) -> Batch:
    """Shared-start latent/grid windows, style prompts, timesteps, noise and dropout flags."""
    dtype = np.dtype(cfg.dtype)
    z1, tokens, styles = [], [], []
    for song in songs:
        seg, grid, _ = truncate_pair(song.latent.frames, song.grid, frames, rng, strict=False, pad_sigma=noise_sigma)
        if cfg.ablate_align:
            grid = pack_to_front(grid)
        z1.append(seg)
        tokens.append(grid.tokens)
        styles.append(extract_style_prompt(song.latent.frames, cfg.prompt_len, rng))
    n = len(songs)
    t = sample_timesteps(rng, n, LogitNormalParams(cfg.t_m, cfg.t_s), uniform=cfg.uniform_t)
    z1 = np.stack(z1).astype(dtype)
    z0 = rng.standard_normal(z1.shape).astype(dtype)
    drop_l, drop_s = dropout_flags(rng, n, cfg.cond_dropout)
    return Batch(z1, z0, np.stack(tokens), np.stack(styles).astype(dtype), t, drop_l, drop_s)


def batch_loss(net: VelocityNet, batch: Batch) -> Tensor:
    pred = net.forward(batch.z_t, batch.tokens, batch.style, batch.t, batch.drop_lyrics, batch.drop_style)
    return fm_loss(pred, batch.z0, batch.z1)


def train_step(
    songs: list[SongRecord],
    net: VelocityNet,
    opt: OptimizerState,
    ema: EmaState,
    cfg: TrainConfig,
    rng: np.random.Generator,
    noise_sigma: float = 0.0,
) -> dict:
    """One optimizer step on a batch of songs.  Returns the step metrics."""
    frames = window_frames(opt.step, cfg)
    batch = make_batch(songs, cfg, rng, frames, noise_sigma)
    net.zero_grad()
    with T.check_finite(cfg.check_finite or T._CHECK_FINITE):
        loss = batch_loss(net, batch)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"loss is {value} at step {opt.step}")
        T.backward(loss, net.parameters())
    lr = learning_rate(opt.step, cfg)
    adamw_step(net.params, opt, cfg, lr)
    if opt.step % cfg.ema_every == 0:
        ema_update(ema, net.params, cfg.ema_decay)
    return {"step": opt.step, "loss": value, "lr": lr, "t_mean": float(batch.t.mean()), "frames": frames}


# ---------------------------------------------------------------- trainer


class Trainer:
    """Owns the model, optimizer, EMA, rng and data order for one run."""

    def __init__(self, config: ExperimentConfig, songs: list[SongRecord], net: VelocityNet | None = None):
        self.config = config
        tc = config.train
        train_idx, _ = held_out_split(len(songs))
        self.songs = [songs[i] for i in train_idx]
        if not self.songs:
            raise ValueError("no training songs")
        self.net = net or VelocityNet(config.net, seed=tc.seed, dtype=np.dtype(tc.dtype))
        self.opt = OptimizerState.zeros_like(self.net.params)
        self.ema = EmaState.from_params(self.net.params)
        self.rng = np.random.default_rng(tc.seed)
        self.order: list[int] = []
        self.cursor = 0
        self.history: list[dict] = []

    @property
    def step(self) -> int:
        return self.opt.step

    def next_songs(self) -> list[SongRecord]:
        picked = []
        for _ in range(self.config.train.batch_size):
            if self.cursor >= len(self.order):
                self.order = [int(i) for i in self.rng.permutation(len(self.songs))]
                self.cursor = 0
            picked.append(self.songs[self.order[self.cursor]])
            self.cursor += 1
        return picked

    def train_step(self) -> dict:
        start = time.perf_counter()
        metrics = train_step(
            self.next_songs(), self.net, self.opt, self.ema, self.config.train, self.rng,
            noise_sigma=self.config.synth.noise_sigma,
        )
        metrics["wall_ms"] = 1000 * (time.perf_counter() - start)
        self.history.append(metrics)
        return metrics

    def run(self, until: int, on_step: Callable[[dict], None] | None = None) -> list[dict]:
        out = []
        while self.step < until:
            m = self.train_step()
            out.append(m)
            if on_step is not None:
                on_step(m)
        return out

    def ema_net(self) -> VelocityNet:
        net = self.net.copy()
        net.load_state_dict(self.ema.debiased(self.config.train.ema_decay))
        return net

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.net, self.opt, self.ema, self.config, self.rng, self.order, self.cursor)

    @classmethod
    def resume(cls, path: str | Path, songs: list[SongRecord], config: ExperimentConfig | None = None) -> Trainer:
        ckpt = load_checkpoint(path, config.net if config is not None else None)
        trainer = cls(config or ckpt.config, songs, net=ckpt.net)
        trainer.opt, trainer.ema = ckpt.opt, ckpt.ema
        trainer.rng.bit_generator.state = ckpt.rng_state
        trainer.order, trainer.cursor = ckpt.order, ckpt.cursor
        return trainer


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    net: VelocityNet
    opt: OptimizerState
    ema: EmaState
    config: ExperimentConfig
    rng_state: dict
    order: list[int]
    cursor: int

    def ema_net(self) -> VelocityNet:
        net = self.net.copy()
        net.load_state_dict(self.ema.debiased(self.config.train.ema_decay))
        return net


def _tensor_groups(net: VelocityNet, opt: OptimizerState, ema: EmaState):
    for name, p in net.params.items():
        yield f"param/{name}", p.data
    for name, arr in ema.shadow.items():
        yield f"ema/{name}", arr
    for name, arr in ema.origin.items():
        yield f"ema_origin/{name}", arr
    for name, arr in opt.m.items():
        yield f"adam_m/{name}", arr
    for name, arr in opt.v.items():
        yield f"adam_v/{name}", arr


def save_checkpoint(
    path: str | Path,
    net: VelocityNet,
    opt: OptimizerState,
    ema: EmaState,
    config: ExperimentConfig,
    rng: np.random.Generator,
    order: list[int] | None = None,
    cursor: int = 0,
) -> None:
    """Layout: magic, u64 header length, JSON header, tensor payloads (little-endian).

    Tensors are stored at their own precision (``<f4`` for float32 training).
    The header carries the payload CRC so truncation or bit flips are caught
    before anything is loaded.
    """
    table, blobs, offset = [], [], 0
    for name, arr in _tensor_groups(net, opt, ema):
        dt = "<f8" if arr.dtype == np.float64 else "<f4"
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        table.append({"name": name, "shape": list(arr.shape), "dtype": dt, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "step": opt.step,
        "ema_updates": ema.updates_applied,
        "rng_state": rng.bit_generator.state,
        "order": list(order or []),
        "cursor": cursor,
        "tensors": table,
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    head = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + payload)
    tmp.replace(path)


def read_header(path: str | Path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC or len(data) < 16:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (head_len,) = struct.unpack("<Q", data[8:16])
    if 16 + head_len > len(data):
        raise CheckpointError(f"{path}: header length {head_len} exceeds file size")
    try:
        header = json.loads(data[16 : 16 + head_len])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    return header, data[16 + head_len :]


def load_checkpoint(path: str | Path, expect_net=None) -> Checkpoint:
    """Validate everything first; no object is built from a damaged file."""
    header, payload = read_header(path)
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {header.get('version')} != {CHECKPOINT_VERSION}")
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header says {header['payload_bytes']}")
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    try:
        config = ExperimentConfig.from_dict(header["config"])
    except ConfigError as exc:
        raise CheckpointError(f"{path}: stored config invalid ({exc})") from exc
    if expect_net is not None and expect_net != config.net:
        raise CheckpointError(f"{path}: network config differs from the current one")

    arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        lo, n = entry["offset"], entry["nbytes"]
        if n != count * dt.itemsize or lo < 0 or lo + n > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']} has an inconsistent byte range")
        arr = np.frombuffer(payload[lo : lo + n], dtype=dt).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(dt.newbyteorder("="))

    shapes = param_shapes(config.net)
    for group in ("param", "ema", "ema_origin", "adam_m", "adam_v"):
        for name, shape in shapes.items():
            key = f"{group}/{name}"
            if key not in arrays or arrays[key].shape != shape:
                raise CheckpointError(f"{path}: {key} missing or shaped {arrays.get(key, np.empty(0)).shape}, expected {shape}")

    params = {name: Tensor(arrays[f"param/{name}"], requires_grad=True) for name in shapes}
    net = VelocityNet(config.net, params)
    opt = OptimizerState(
        {n: arrays[f"adam_m/{n}"] for n in shapes},
        {n: arrays[f"adam_v/{n}"] for n in shapes},
        int(header["step"]),
    )
    ema = EmaState(
        {n: arrays[f"ema/{n}"] for n in shapes},
        int(header["ema_updates"]),
        {n: arrays[f"ema_origin/{n}"] for n in shapes},
    )
    return Checkpoint(net, opt, ema, config, header["rng_state"], list(header["order"]), int(header["cursor"]))
