import numpy as np
import pytest
from hypothesis import settings

from rhythmlab import tensor as T

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def finite_checks():
    # NaN/Inf assertions are always on under test
    with T.check_finite(True):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_experiment(dtype="float64", **train):
    """A corpus and config small enough for step-level tests."""
    from rhythmlab.config import ExperimentConfig, NetConfig, SynthSpec, TrainConfig
    from rhythmlab.synth import generate_corpus

    synth = SynthSpec(n_songs=10, min_seconds=4, max_seconds=6, latent_channels=8, seed=11)
    net = NetConfig(latent_channels=8, model_width=16, n_layers=1, n_heads=2, phoneme_embed_dim=8,
                    style_hidden_dim=8, max_frames=32, vocab_size=40)
    opts = dict(batch_size=3, n_steps=40, L_max=32, stage1_L_max=16, prompt_len=5, ema_every=2,
                dtype=dtype, lr=1e-3)
    opts.update(train)
    config = ExperimentConfig(synth, net, TrainConfig(**opts))
    return config, generate_corpus(synth)


@pytest.fixture(scope="session")
def small_setup():
    return small_experiment()


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
