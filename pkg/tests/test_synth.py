import functools
import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from rhythmlab.config import ConfigError, SynthSpec
from rhythmlab.lyrics import PAD_ID, PhonemeGrid, default_vocab
from rhythmlab.synth import (
    collapse,
    edit_distance,
    extract_style_prompt,
    generate_corpus,
    held_out_split,
    load_corpus,
    make_codebooks,
    make_song,
    oracle_decode,
    phoneme_error_rate,
    save_corpus,
    synth_latent,
    truncate_latent,
    truncate_pair,
)

VOCAB = default_vocab()
SPEC = SynthSpec()
BOOKS = make_codebooks(SPEC, len(VOCAB))


def random_grid(rng, n=200, pad_frac=0.5):
    tokens = rng.integers(1, len(VOCAB), size=n)
    tokens[rng.random(n) < pad_frac] = PAD_ID
    return PhonemeGrid(tokens, 21.5)


# ---- codebooks


def test_codebook_geometry():
    assert np.all(BOOKS.phonemes[PAD_ID] == 0)
    vecs = np.concatenate([BOOKS.phonemes[1:], BOOKS.styles, BOOKS.instr_dirs])
    np.testing.assert_allclose(np.linalg.norm(vecs, axis=1), 1.0, atol=1e-12)
    worst = max(abs(float(a @ b)) for a, b in itertools.combinations(vecs, 2))
    assert worst < 0.8


def test_codebook_rejection_limit():
    with pytest.raises(ConfigError):
        make_codebooks(SynthSpec(latent_channels=2), len(VOCAB))


def test_spec_validation():
    with pytest.raises(ConfigError):
        SynthSpec(noise_sigma=-1)
    with pytest.raises(ConfigError):
        SynthSpec(n_styles=0)


# ---- synthesis


def test_all_zero_gains_give_zero_latent(rng):
    spec = SynthSpec(vocal_gain=0, style_gain=0, instr_gain=0, noise_sigma=0)
    z = synth_latent(random_grid(rng), 1, spec, BOOKS)
    assert np.all(z.frames == 0)


def test_clean_frame_construction(rng):
    spec = SynthSpec(instr_gain=0, noise_sigma=0)
    grid = random_grid(rng)
    z = synth_latent(grid, 2, spec, BOOKS)
    for j in (0, 5, 50):
        expected = spec.vocal_gain * BOOKS.phonemes[grid.tokens[j]] + spec.style_gain * BOOKS.styles[2]
        np.testing.assert_allclose(z.frames[j], expected, atol=1e-6)


def test_unknown_style(rng):
    with pytest.raises(ValueError):
        synth_latent(random_grid(rng), 9, SPEC, BOOKS, rng)


# ---- oracle


def test_zero_latent_decodes_to_pad():
    assert np.all(oracle_decode(np.zeros((10, 16)), SPEC, BOOKS) == PAD_ID)


@pytest.mark.parametrize("style", range(4))
def test_oracle_exact_at_zero_noise(style, rng):
    spec = SynthSpec(noise_sigma=0)
    grid = random_grid(rng, 500)
    hyp = oracle_decode(synth_latent(grid, style, spec, BOOKS), spec, BOOKS)
    np.testing.assert_array_equal(hyp, grid.tokens)


def test_oracle_matches_brute_force_definition(rng):
    # independent loop: for each style, fit span{g, u} by lstsq, then nearest pattern
    spec = SynthSpec(noise_sigma=0.3)
    z = synth_latent(random_grid(rng, 30), 1, spec, BOOKS, rng).frames.astype(np.float64)
    fast = oracle_decode(z, spec, BOOKS)
    for j, x in enumerate(z):
        best, arg = np.inf, None
        for k in range(len(VOCAB)):
            target = x - spec.vocal_gain * BOOKS.phonemes[k]
            for g, u in zip(BOOKS.styles, BOOKS.instr_dirs):
                A = np.stack([g, u], axis=1)
                coef = np.linalg.lstsq(A, target, rcond=None)[0]
                d = float(np.sum((target - A @ coef) ** 2))
                if d < best - 1e-12:
                    best, arg = d, k
        assert fast[j] == arg


def test_oracle_accuracy_under_nominal_noise(rng):
    grid = random_grid(rng, 4000)
    z = synth_latent(grid, 0, SPEC, BOOKS, rng)
    assert np.mean(oracle_decode(z, SPEC, BOOKS) == grid.tokens) > 0.99


# ---- windows


def test_truncate_exact_length(rng):
    z = rng.standard_normal((10, 3))
    seg, start = truncate_latent(z, 10, rng)
    assert start == 0 and np.array_equal(seg, z)


def test_truncate_start_uniform():
    rng = np.random.default_rng(5)
    z = np.zeros((100, 2))
    starts = [truncate_latent(z, 10, rng)[1] for _ in range(10_000)]
    counts = np.bincount(starts, minlength=91)
    assert len(counts) == 91
    assert stats.chisquare(counts).pvalue > 0.01


def test_truncate_short_latent(rng):
    z = rng.standard_normal((5, 2))
    with pytest.raises(ValueError):
        truncate_latent(z, 8, rng)
    seg, start = truncate_latent(z, 8, rng, strict=False)
    assert seg.shape == (8, 2) and start == 0 and np.all(seg[5:] == 0)


def test_truncate_pair_shares_start(rng):
    spec = SynthSpec(noise_sigma=0)
    grid = random_grid(rng, 300)
    z = synth_latent(grid, 3, spec, BOOKS).frames
    for _ in range(20):
        seg, win, start = truncate_pair(z, grid, 64, rng)
        np.testing.assert_array_equal(oracle_decode(seg, spec, BOOKS), win.tokens)
        np.testing.assert_array_equal(win.tokens, grid.tokens[start : start + 64])


def test_style_prompt(rng):
    z = rng.standard_normal((30, 2))
    assert np.array_equal(extract_style_prompt(z, 30, rng), z)
    assert extract_style_prompt(z, 7, rng).shape == (7, 2)
    with pytest.raises(ValueError):
        extract_style_prompt(z, 31, rng)


def test_style_prompt_starts_differ_across_seeds():
    z = np.arange(100.0)[:, None]
    starts = {int(extract_style_prompt(z, 22, np.random.default_rng(s))[0, 0]) for s in range(50)}
    assert len(starts) > 30


# ---- PER


def test_per_examples():
    assert phoneme_error_rate([1, 2, 3], [1, 2, 3]) == 0
    assert phoneme_error_rate([1, 2, 3], [1, 9, 3]) == pytest.approx(1 / 3)
    assert phoneme_error_rate([1, 2, 3], []) == 1.0
    with pytest.raises(ValueError):
        phoneme_error_rate([0, 0], [1])


def test_collapse_strips_pads_and_repeats():
    assert collapse([0, 1, 1, 0, 1, 2, 2, 0]) == [1, 2]
    assert collapse([1, 1, 0, 0, 1]) == [1]


@functools.lru_cache(maxsize=None)
def _lev(a: tuple, b: tuple) -> int:
    if not a or not b:
        return len(a) + len(b)
    return min(_lev(a[1:], b) + 1, _lev(a, b[1:]) + 1, _lev(a[1:], b[1:]) + (a[0] != b[0]))


seqs = st.lists(st.integers(1, 4), max_size=8)


@given(seqs, seqs)
def test_edit_distance_against_recursive_definition(a, b):
    assert edit_distance(a, b) == _lev(tuple(a), tuple(b))


@given(seqs, seqs, seqs)
def test_edit_distance_metric(a, b, c):
    assert edit_distance(a, b) == edit_distance(b, a)
    assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)
    assert (edit_distance(a, b) == 0) == (a == b)


# ---- corpus


SMALL = SynthSpec(n_songs=6, min_seconds=10, max_seconds=20, seed=3)


def test_corpus_deterministic():
    a, b = generate_corpus(SMALL), generate_corpus(SMALL)
    for x, y in zip(a, b):
        assert x.latent.frames.tobytes() == y.latent.frames.tobytes()
        assert x.sheet == y.sheet and x.style_id == y.style_id
    other = generate_corpus(SynthSpec(n_songs=1, min_seconds=10, max_seconds=20, seed=4))
    assert other[0].latent.frames.tobytes() != a[0].latent.frames.tobytes()


def test_song_independent_of_corpus_size():
    books = make_codebooks(SMALL, len(VOCAB))
    assert make_song(2, SMALL, books, VOCAB).latent.frames.tobytes() == generate_corpus(SMALL)[2].latent.frames.tobytes()


def test_song_records_consistent():
    for song in generate_corpus(SMALL):
        assert len(song.latent) == len(song.grid)
        assert song.grid.spans
        assert np.sum(song.grid.tokens != PAD_ID) == sum(n for _, n, _ in song.grid.spans)


def test_held_out_split():
    train, test = held_out_split(200)
    assert test == list(range(180, 200)) and train == list(range(180))


def test_corpus_round_trip(tmp_path):
    songs = generate_corpus(SMALL)
    save_corpus(songs, SMALL, VOCAB, tmp_path)
    corpus = load_corpus(tmp_path)
    assert corpus.spec == SMALL and corpus.vocab.symbols == VOCAB.symbols
    for a, b in zip(songs, corpus.songs):
        assert a.latent.frames.tobytes() == b.latent.frames.tobytes()
        np.testing.assert_array_equal(a.grid.tokens, b.grid.tokens)
        assert a.sheet == b.sheet
    raw = (tmp_path / "song_0000.f32").read_bytes()
    assert raw == songs[0].latent.frames.astype("<f4").tobytes()


def test_missing_corpus(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_corpus(tmp_path)
