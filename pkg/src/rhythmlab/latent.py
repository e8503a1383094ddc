"""LatentSequence container and its on-disk format (raw little-endian float32 + JSON sidecar)."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_FRAME_RATE = 21.5


@dataclass
class LatentSequence:
    frames: np.ndarray  # (L, C)
    frame_rate: float = DEFAULT_FRAME_RATE

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2:
            raise ValueError(f"latent must be L x C, got shape {self.frames.shape}")

    def __array__(self, dtype=None, copy=None):
        return self.frames if dtype is None else self.frames.astype(dtype)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def channels(self) -> int:
        return self.frames.shape[1]

    @property
    def seconds(self) -> float:
        return len(self) / self.frame_rate

    def save(self, path: str | Path) -> None:
        """Write ``path`` (raw ``<f4`` values, row-major) and ``path.json`` (shape, frame_rate)."""
        path = Path(path)
        path.write_bytes(np.ascontiguousarray(self.frames, dtype="<f4").tobytes())
        sidecar = {"shape": list(self.frames.shape), "frame_rate": self.frame_rate, "dtype": "<f4"}
        sidecar_path(path).write_text(json.dumps(sidecar, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> LatentSequence:
        path = Path(path)
        meta = json.loads(sidecar_path(path).read_text())
        shape = tuple(meta["shape"])
        raw = path.read_bytes()
        expected = int(np.prod(shape)) * 4
        if len(raw) != expected:
            raise ValueError(f"{path}: {len(raw)} bytes, sidecar shape {shape} needs {expected}")
        frames = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        return cls(frames, float(meta["frame_rate"]))


def sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")
