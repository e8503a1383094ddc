"""Timestamped lyrics to a latent-length phoneme grid.

Pipeline: LRC text -> :class:`LyricSheet` -> rule-table G2P per sentence ->
each sentence's phonemes written contiguously from frame
``floor(t_start * frame_rate)`` into a grid that is ``<pad>`` everywhere else.
"""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD = "<pad>"
PAD_ID = 0


class LrcParseError(ValueError):
    pass


class EmptyPhonemeError(ValueError):
    pass


class PlacementError(ValueError):
    pass


# ---------------------------------------------------------------- LRC


@dataclass(frozen=True)
class LyricSheet:
    sentences: tuple[tuple[float, str], ...] = ()

    def __post_init__(self):
        prev = -math.inf
        for t, text in self.sentences:
            if t < 0:
                raise ValueError(f"negative timestamp {t}")
            if t < prev:
                raise ValueError("sentence timestamps must be non-decreasing")
            if not text.strip():
                raise ValueError("sentence text must be non-empty")
            prev = t

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)

    def to_lrc(self) -> str:
        lines = []
        for t, text in self.sentences:
            cs = round(t * 100)
            lines.append(f"[{cs // 6000:02d}:{(cs % 6000) // 100:02d}.{cs % 100:02d}]{text}")
        return "\n".join(lines) + ("\n" if lines else "")

    def to_json(self) -> list:
        return [[t, text] for t, text in self.sentences]

    @classmethod
    def from_json(cls, items) -> LyricSheet:
        return cls(tuple((float(t), str(text)) for t, text in items))


_TIME_TAG = re.compile(r"\[(\d+):(\d+(?:\.\d+)?)\]")
_META_TAG = re.compile(r"^\[[A-Za-z#]+:[^\]]*\]\s*$")


def parse_lrc(text: str, strict: bool = True) -> LyricSheet:
    """Parse ``[mm:ss.xx]lyric`` lines; metadata tags and blank lines are skipped.

    A line may carry several leading time tags (repeated chorus).  Lines with a
    time tag but no text are instrumental markers and are dropped.  Out-of-order
    timestamps raise in strict mode and are stably re-sorted otherwise.
    """
    entries: list[tuple[float, str]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or _META_TAG.match(line):
            continue
        times = []
        pos = 0
        while pos < len(line) and line[pos] == "[":
            m = _TIME_TAG.match(line, pos)
            if m is None:
                raise LrcParseError(f"line {lineno}: malformed timestamp in {raw!r}")
            minutes, seconds = int(m.group(1)), float(m.group(2))
            if seconds >= 60:
                raise LrcParseError(f"line {lineno}: seconds field {m.group(2)} >= 60")
            times.append(60 * minutes + seconds)
            pos = m.end()
        if not times:
            raise LrcParseError(f"line {lineno}: expected a [mm:ss.xx] tag, got {raw!r}")
        lyric = line[pos:].strip()
        if not lyric:
            continue
        entries.extend((t, lyric) for t in times)

    ordered = sorted(entries, key=lambda e: e[0])
    if strict and [e[0] for e in ordered] != [e[0] for e in entries]:
        raise LrcParseError("timestamps are not monotonic (pass strict=False to re-sort)")
    return LyricSheet(tuple(ordered))


def read_lrc(path: str | Path, strict: bool = True) -> LyricSheet:
    return parse_lrc(Path(path).read_text(encoding="utf-8"), strict=strict)


# ---------------------------------------------------------------- G2P


@dataclass(frozen=True)
class PhonemeVocab:
    symbols: tuple[str, ...]
    rules: tuple[tuple[str, tuple[str, ...]], ...]
    _table: dict = field(init=False, repr=False, compare=False)
    _index: dict = field(init=False, repr=False, compare=False)
    _longest: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.symbols or self.symbols[PAD_ID] != PAD:
            raise ValueError("symbol 0 must be <pad>")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate phoneme symbols")
        table = {}
        for grapheme, phones in self.rules:
            if PAD in phones:
                raise ValueError("<pad> cannot appear on the right side of a rule")
            if grapheme != grapheme.lower() or not grapheme:
                raise ValueError(f"rule grapheme {grapheme!r} must be non-empty lowercase")
            table.setdefault(grapheme, phones)  # first rule wins
        object.__setattr__(self, "_table", table)
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.symbols)})
        object.__setattr__(self, "_longest", max((len(g) for g in table), default=0))

    @classmethod
    def from_rules(cls, rules: Iterable[tuple[str, Sequence[str] | str]]) -> PhonemeVocab:
        normalized = []
        symbols = [PAD]
        for grapheme, phones in rules:
            phones = tuple(phones.split()) if isinstance(phones, str) else tuple(phones)
            normalized.append((grapheme, phones))
            for p in phones:
                if p not in symbols:
                    symbols.append(p)
        return cls(tuple(symbols), tuple(normalized))

    @classmethod
    def from_tsv(cls, text: str) -> PhonemeVocab:
        rules = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2 or not parts[1].strip():
                raise ValueError(f"rule line {lineno}: expected 'grapheme<TAB>PHONEME', got {line!r}")
            rules.append((parts[0].strip(), parts[1]))
        return cls.from_rules(rules)

    @classmethod
    def load(cls, path: str | Path) -> PhonemeVocab:
        return cls.from_tsv(Path(path).read_text(encoding="utf-8"))

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def pad_id(self) -> int:
        return PAD_ID

    def encode(self, phones: Sequence[str]) -> list[int]:
        return [self._index[p] for p in phones]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.symbols[i] for i in ids]


def default_vocab() -> PhonemeVocab:
    """The bundled ASCII rule table (39 phonemes + <pad>)."""
    text = resources.files("rhythmlab.data").joinpath("g2p_rules.tsv").read_text(encoding="utf-8")
    return PhonemeVocab.from_tsv(text)


def g2p(text: str, vocab: PhonemeVocab) -> list[str]:
    """Longest-match, left-to-right rewrite of lowercased ``text``.

    Whitespace separates words but emits nothing; other unmatched characters
    are dropped and counted in a warning.
    """
    if not text or not text.strip():
        raise EmptyPhonemeError("g2p needs non-empty text")
    s = text.lower()
    out: list[str] = []
    unknown = 0
    i = 0
    while i < len(s):
        for n in range(min(vocab._longest, len(s) - i), 0, -1):
            phones = vocab._table.get(s[i : i + n])
            if phones is not None:
                out.extend(phones)
                i += n
                break
        else:
            if not s[i].isspace():
                unknown += 1
            i += 1
    if unknown:
        log.warning("g2p dropped %d unknown character(s) in %r", unknown, text)
    if not out:
        raise EmptyPhonemeError(f"no phonemes produced for {text!r}")
    return out


# ---------------------------------------------------------------- grid


@dataclass
class PhonemeGrid:
    tokens: np.ndarray  # (L,) int
    frame_rate: float
    spans: list[tuple[int, int, int]] = field(default_factory=list)  # (f_start, length, sentence)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.tokens)

    def window(self, start: int, length: int) -> PhonemeGrid:
        """Frames ``[start, start + length)``, right-padded with <pad> past the end."""
        tokens = np.full(length, PAD_ID, dtype=np.int64)
        piece = self.tokens[start : start + length]
        tokens[: len(piece)] = piece
        spans = []
        for f, n, idx in self.spans:
            lo, hi = max(f, start), min(f + n, start + length, len(self.tokens))
            if lo < hi:
                spans.append((lo - start, hi - lo, idx))
        return PhonemeGrid(tokens, self.frame_rate, spans)

    def non_pad(self) -> np.ndarray:
        return self.tokens[self.tokens != PAD_ID]

    def to_json(self) -> dict:
        return {
            "tokens": self.tokens.tolist(),
            "frame_rate": self.frame_rate,
            "spans": [list(s) for s in self.spans],
        }

    @classmethod
    def from_json(cls, obj: dict) -> PhonemeGrid:
        return cls(np.asarray(obj["tokens"], dtype=np.int64), float(obj["frame_rate"]), [tuple(s) for s in obj["spans"]])


def start_frame(t_start: float, frame_rate: float) -> int:
    """floor(t_start * frame_rate), evaluated on the decimal values so 2.0 s x 21.5 Hz is exactly 43."""
    return math.floor(Fraction(repr(float(t_start))) * Fraction(repr(float(frame_rate))))


def build_phoneme_grid(
    sheet: LyricSheet,
    vocab: PhonemeVocab,
    max_frames: int,
    frame_rate: float,
    strict: bool = True,
) -> PhonemeGrid:
    if max_frames <= 0 or frame_rate <= 0:
        raise ValueError("max_frames and frame_rate must be positive")
    tokens = np.full(max_frames, PAD_ID, dtype=np.int64)
    owner = np.full(max_frames, -1, dtype=np.int64)
    for idx, (t_start, text) in enumerate(sheet.sentences):
        try:
            ids = vocab.encode(g2p(text, vocab))
        except EmptyPhonemeError:
            if strict:
                raise
            log.warning("sentence %d has no phonemes; skipped", idx)
            continue
        f = start_frame(t_start, frame_rate)
        if f >= max_frames:
            if strict:
                raise PlacementError(f"sentence {idx} starts at frame {f} >= {max_frames}")
            log.warning("sentence %d starts at frame %d beyond the grid; skipped", idx, f)
            continue
        if f + len(ids) > max_frames:
            if strict:
                raise PlacementError(f"sentence {idx} spans frames {f}..{f + len(ids)} past {max_frames}")
            log.warning("sentence %d truncated to %d phonemes", idx, max_frames - f)
            ids = ids[: max_frames - f]
        if np.any(owner[f : f + len(ids)] >= 0):
            if strict:
                raise PlacementError(f"sentence {idx} overlaps an earlier sentence at frame {f}")
            log.warning("sentence %d overwrites part of an earlier sentence", idx)
        tokens[f : f + len(ids)] = ids
        owner[f : f + len(ids)] = idx
    return PhonemeGrid(tokens, frame_rate, _runs(owner))


def _runs(owner: np.ndarray) -> list[tuple[int, int, int]]:
    spans = []
    j = 0
    while j < len(owner):
        if owner[j] < 0:
            j += 1
            continue
        k = j
        while k < len(owner) and owner[k] == owner[j]:
            k += 1
        spans.append((j, k - j, int(owner[j])))
        j = k
    return spans


def pack_to_front(grid: PhonemeGrid) -> PhonemeGrid:
    """Drop timestamp placement: all phonemes concatenated from frame 0 (the no-alignment ablation)."""
    seq = grid.non_pad()
    tokens = np.full(len(grid), PAD_ID, dtype=np.int64)
    tokens[: len(seq)] = seq
    spans, pos = [], 0
    for _, n, idx in grid.spans:
        spans.append((pos, n, idx))
        pos += n
    return PhonemeGrid(tokens, grid.frame_rate, spans)


def save_grid(grid: PhonemeGrid, path: str | Path) -> None:
    Path(path).write_text(json.dumps(grid.to_json()))


def load_grid(path: str | Path) -> PhonemeGrid:
    return PhonemeGrid.from_json(json.loads(Path(path).read_text()))
