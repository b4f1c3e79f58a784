import numpy as np
import pytest
from hypothesis import settings

from cocobert.config import ModelConfig, build_config
from cocobert.data import SyntheticSpec, generate_synthetic
from cocobert.model import CoCoBert

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

TINY_OVERRIDES = {
    "d_frame": 6, "d_model": 8, "n_heads": 2, "vocab_size": 16,
    "max_frames": 6, "max_words": 6, "memory_size": 16, "batch_size": 8,
    "n_pairs": 24, "n_test": 8, "n_concepts": 3,
    "frames_min": 2, "frames_max": 6, "words_min": 2, "words_max": 6,
}


@pytest.fixture
def tiny_cfg():
    return build_config(overrides=TINY_OVERRIDES)


@pytest.fixture
def tiny_model_cfg() -> ModelConfig:
    return build_config(overrides=TINY_OVERRIDES).model


def tiny_spec(**kw) -> SyntheticSpec:
    base = dict(n_pairs=24, n_concepts=3, d_frame=6, vocab_size=16, frames_min=2, frames_max=6,
                words_min=2, words_max=6)
    base.update(kw)
    return SyntheticSpec(**base)


@pytest.fixture
def tiny_pairs():
    return generate_synthetic(tiny_spec())


@pytest.fixture
def tiny_model(tiny_model_cfg):
    return CoCoBert(tiny_model_cfg, seed=3, memory_size=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdicts, printed once at the end of the session
CRITERIA: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
