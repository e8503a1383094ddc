"""Procedural latent songs and a brute-force oracle decoder.

A synthetic latent frame is a sum of known patterns::

    frame[j] = vocal_gain * e[token_j]
             + style_gain * g[style]
             + instr_gain * sin(2 pi j f[style] / frame_rate) * u[style]
             + noise_sigma * eps_j

``e[<pad>]`` is the zero vector, so instrumental frames carry only the style,
accompaniment and noise terms.  Because every pattern is known, decoding a
latent back to phonemes is a nearest-pattern search, which stands in for an
ASR system when measuring intelligibility.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, SynthSpec
from .latent import LatentSequence
from .lyrics import (
    PAD_ID,
    LyricSheet,
    PhonemeGrid,
    PhonemeVocab,
    build_phoneme_grid,
    default_vocab,
    g2p,
)

log = logging.getLogger(__name__)

MAX_COS = 0.8
MAX_TRIES = 10_000
CORPUS_VERSION = 1


@dataclass
class Codebooks:
    phonemes: np.ndarray  # (V, C), row PAD_ID is zero
    styles: np.ndarray  # (S, C)
    instr_dirs: np.ndarray  # (S, C)
    instr_freqs: np.ndarray  # (S,) Hz


def _unit(rng: np.random.Generator, c: int) -> np.ndarray:
    v = rng.standard_normal(c)
    return v / np.linalg.norm(v)


def make_codebooks(spec: SynthSpec, vocab_size: int) -> Codebooks:
    """Unit-norm patterns with every pairwise |cos| < 0.8 (rejection sampling)."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xC0DE]))
    c = spec.latent_channels
    n_needed = (vocab_size - 1) + 2 * spec.n_styles
    accepted: list[np.ndarray] = []
    tries = 0
    while len(accepted) < n_needed:
        tries += 1
        if tries > MAX_TRIES:
            raise ConfigError(
                f"could not place {n_needed} patterns with |cos| < {MAX_COS} in {c} channels"
            )
        v = _unit(rng, c)
        if all(abs(float(v @ a)) < MAX_COS for a in accepted):
            accepted.append(v)
    vecs = np.array(accepted)
    phonemes = np.zeros((vocab_size, c))
    phonemes[1:] = vecs[: vocab_size - 1]
    styles = vecs[vocab_size - 1 : vocab_size - 1 + spec.n_styles]
    dirs = vecs[vocab_size - 1 + spec.n_styles :]
    freqs = rng.uniform(0.5, 3.0, size=spec.n_styles)
    return Codebooks(phonemes, styles, dirs, freqs)


def synth_latent(
    grid: PhonemeGrid,
    style_id: int,
    spec: SynthSpec,
    books: Codebooks,
    rng: np.random.Generator | None = None,
) -> LatentSequence:
    if not 0 <= style_id < len(books.styles):
        raise ValueError(f"unknown style_id {style_id}")
    j = np.arange(len(grid))
    wave = np.sin(2 * np.pi * j * books.instr_freqs[style_id] / spec.frame_rate)
    frames = (
        spec.vocal_gain * books.phonemes[grid.tokens]
        + spec.style_gain * books.styles[style_id]
        + spec.instr_gain * wave[:, None] * books.instr_dirs[style_id]
    )
    if spec.noise_sigma > 0:
        if rng is None:
            raise ValueError("a noise rng is required when noise_sigma > 0")
        frames = frames + spec.noise_sigma * rng.standard_normal(frames.shape)
    return LatentSequence(frames.astype(np.float32), spec.frame_rate)


def oracle_decode(latent, spec: SynthSpec, books: Codebooks) -> np.ndarray:
    """Per-frame token ids by exhaustive search over (style, token).

    For each style the accompaniment subspace span{g, u} is fitted by least
    squares and removed; the frame is then matched to ``vocal_gain * e_k``
    (``e_pad = 0``) by Euclidean distance.  Ties go to the lowest token id.
    """
    x = np.asarray(latent, dtype=np.float64)
    c = x.shape[1]
    patterns = spec.vocal_gain * books.phonemes
    best = np.full((x.shape[0], len(patterns)), np.inf)
    for g, u in zip(books.styles, books.instr_dirs):
        q, _ = np.linalg.qr(np.stack([g, u], axis=1))
        resid = np.eye(c) - q @ q.T
        a = x @ resid
        b = patterns @ resid
        d = (a * a).sum(1)[:, None] - 2 * a @ b.T + (b * b).sum(1)[None, :]
        best = np.minimum(best, d)
    return np.argmin(best, axis=1)


# ---------------------------------------------------------------- windows


def truncate_latent(
    z,
    max_frames: int,
    rng: np.random.Generator,
    strict: bool = True,
    pad_sigma: float = 0.0,
) -> tuple[np.ndarray, int]:
    """Random ``max_frames`` window; returns (segment, start)."""
    z = np.asarray(z)
    n = z.shape[0]
    if n < max_frames:
        if strict:
            raise ValueError(f"latent has {n} frames, window needs {max_frames}")
        pad = pad_sigma * rng.standard_normal((max_frames - n, z.shape[1]))
        return np.concatenate([z, pad.astype(z.dtype)]), 0
    start = int(rng.integers(0, n - max_frames + 1))
    return z[start : start + max_frames], start


def truncate_pair(
    z,
    grid: PhonemeGrid,
    max_frames: int,
    rng: np.random.Generator,
    strict: bool = True,
    pad_sigma: float = 0.0,
) -> tuple[np.ndarray, PhonemeGrid, int]:
    """Latent and grid cut with one shared start frame."""
    if len(grid) != np.asarray(z).shape[0]:
        raise ValueError("latent and grid lengths differ")
    segment, start = truncate_latent(z, max_frames, rng, strict=strict, pad_sigma=pad_sigma)
    return segment, grid.window(start, max_frames), start


def extract_style_prompt(z, prompt_len: int, rng: np.random.Generator) -> np.ndarray:
    z = np.asarray(z)
    if prompt_len < 1 or z.shape[0] < prompt_len:
        raise ValueError(f"cannot take a {prompt_len}-frame prompt from {z.shape[0]} frames")
    start = int(rng.integers(0, z.shape[0] - prompt_len + 1))
    return z[start : start + prompt_len]


# ---------------------------------------------------------------- PER


def edit_distance(ref, hyp) -> int:
    """Levenshtein distance, one vectorized DP row per reference token."""
    ref, hyp = np.asarray(list(ref)), np.asarray(list(hyp))
    cols = np.arange(len(hyp) + 1)
    prev = cols.copy()
    for i, r in enumerate(ref, start=1):
        tmp = np.empty_like(prev)
        tmp[0] = i
        tmp[1:] = np.minimum(prev[1:] + 1, prev[:-1] + (hyp != r))
        # insertions: cur[j] = min_k<=j tmp[k] + (j - k)
        prev = np.minimum.accumulate(tmp - cols) + cols
    return int(prev[-1])


def collapse(tokens) -> list[int]:
    """Strip <pad> and merge consecutive repeats."""
    out: list[int] = []
    for t in tokens:
        t = int(t)
        if t == PAD_ID:
            continue
        if not out or out[-1] != t:
            out.append(t)
    return out


def phoneme_error_rate(ref, hyp) -> float:
    r, h = collapse(ref), collapse(hyp)
    if not r:
        raise ValueError("phoneme error rate is undefined for an empty reference")
    return edit_distance(r, h) / len(r)


# ---------------------------------------------------------------- corpus

_ONSETS = ["b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "y", "z",
           "sh", "ch", "th", "dh", "zh", "q"]
_NUCLEI = ["a", "e", "i", "o", "u", "ee", "ea", "oo", "ai", "ay", "oi", "oy", "ou", "ow", "au", "er", "ur",
           "ie", "uh"]
_CODAS = ["", "", "", "n", "s", "t", "ng", "x", "l", "m"]


@dataclass
class SongRecord:
    sheet: LyricSheet
    style_id: int
    latent: LatentSequence
    grid: PhonemeGrid
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if len(self.latent) != len(self.grid):
            raise ValueError("latent and grid lengths differ")


def _word(rng: np.random.Generator) -> str:
    n = int(rng.integers(1, 4))
    parts = []
    for _ in range(n):
        parts.append(_ONSETS[rng.integers(len(_ONSETS))] + _NUCLEI[rng.integers(len(_NUCLEI))])
    return "".join(parts) + _CODAS[rng.integers(len(_CODAS))]


def random_sheet(
    rng: np.random.Generator,
    seconds: float,
    vocab: PhonemeVocab,
    frame_rate: float,
) -> LyricSheet:
    """Sentences at centisecond timestamps, one frame per phoneme, separated by instrumental gaps."""
    sentences = []
    t = float(rng.uniform(0.5, 3.0))
    while True:
        text = " ".join(_word(rng) for _ in range(int(rng.integers(2, 5))))
        t = round(t, 2)
        n_phones = len(g2p(text, vocab))
        end = t + (n_phones + 1) / frame_rate
        if end > seconds - 0.5:
            break
        sentences.append((t, text))
        gap = rng.uniform(6.0, 12.0) if rng.random() < 0.15 else rng.uniform(0.5, 4.0)
        t = end + gap
    return LyricSheet(tuple(sentences))


def make_song(
    index: int,
    spec: SynthSpec,
    books: Codebooks,
    vocab: PhonemeVocab,
) -> SongRecord:
    """Song ``index`` of the corpus; depends only on (spec, index)."""
    seed = int(np.random.SeedSequence([spec.seed, index]).generate_state(1)[0])
    rng = np.random.default_rng(seed)
    seconds = float(rng.uniform(spec.min_seconds, spec.max_seconds))
    n_frames = int(np.floor(seconds * spec.frame_rate))
    style_id = int(rng.integers(spec.n_styles))
    sheet = random_sheet(rng, n_frames / spec.frame_rate, vocab, spec.frame_rate)
    grid = build_phoneme_grid(sheet, vocab, n_frames, spec.frame_rate, strict=True)
    latent = synth_latent(grid, style_id, spec, books, rng)
    return SongRecord(sheet, style_id, latent, grid, seed, f"song_{index:04d}")


def generate_corpus(spec: SynthSpec, vocab: PhonemeVocab | None = None) -> list[SongRecord]:
    vocab = vocab or default_vocab()
    books = make_codebooks(spec, len(vocab))
    return [make_song(i, spec, books, vocab) for i in range(spec.n_songs)]


def held_out_split(n: int) -> tuple[list[int], list[int]]:
    """Last 10% of indices are held out."""
    n_test = int(round(0.1 * n))
    return list(range(n - n_test)), list(range(n - n_test, n))


def save_corpus(songs: list[SongRecord], spec: SynthSpec, vocab: PhonemeVocab, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for song in songs:
        song.latent.save(out / f"{song.name}.f32")
        (out / f"{song.name}.grid.json").write_text(json.dumps(song.grid.to_json()))
        sheet_obj = {"style_id": song.style_id, "sentences": song.sheet.to_json()}
        (out / f"{song.name}.sheet.json").write_text(json.dumps(sheet_obj))
        entries.append({
            "name": song.name,
            "style_id": song.style_id,
            "seed": song.seed,
            "n_frames": len(song.latent),
        })
    manifest = {
        "version": CORPUS_VERSION,
        "spec": asdict(spec),
        "vocab": list(vocab.symbols),
        "rules": [[g, " ".join(p)] for g, p in vocab.rules],
        "songs": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


@dataclass
class Corpus:
    spec: SynthSpec
    vocab: PhonemeVocab
    songs: list[SongRecord]

    @property
    def codebooks(self) -> Codebooks:
        return make_codebooks(self.spec, len(self.vocab))


def load_corpus(path: str | Path) -> Corpus:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no corpus manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != CORPUS_VERSION:
        raise ValueError(f"corpus version {manifest.get('version')} != {CORPUS_VERSION}")
    spec = SynthSpec(**manifest["spec"])
    vocab = PhonemeVocab.from_rules([(g, p) for g, p in manifest["rules"]])
    songs = []
    for entry in manifest["songs"]:
        name = entry["name"]
        latent = LatentSequence.load(path / f"{name}.f32")
        grid = PhonemeGrid.from_json(json.loads((path / f"{name}.grid.json").read_text()))
        sheet_obj = json.loads((path / f"{name}.sheet.json").read_text())
        sheet = LyricSheet.from_json(sheet_obj["sentences"])
        songs.append(SongRecord(sheet, int(entry["style_id"]), latent, grid, int(entry["seed"]), name))
    return Corpus(spec, vocab, songs)
