import numpy as np
import pytest
import torch
from hypothesis import settings

from modalign.lm import BigramLM, load_toy_lm
from modalign.tokenizer import Tokenizer

torch.set_num_threads(1)
settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

WORDS = ["red", "blue", "cube", "ball", "loop", "stop", "go", "the"]


SMALL_TOK = Tokenizer(WORDS)


@pytest.fixture
def small_tok():
    return SMALL_TOK


def rigged_lm(tok, transitions: dict, fill: float = -20.0, max_len: int = 512):
    """Bigram LM whose next-token logits after token a are given by transitions[a] (dict id -> logit).

    Unlisted entries get ``fill``; unlisted rows put all mass on EOS.
    """
    V = len(tok)
    table = torch.full((V, V), fill, dtype=torch.float64)
    for a in range(V):
        row = transitions.get(a)
        if row is None:
            table[a, tok.eos_id] = 20.0
            continue
        for b, logit in row.items():
            table[a, b] = logit
    return BigramLM(table, tok, max_len=max_len)


@pytest.fixture(scope="session")
def toy_lm():
    return load_toy_lm()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance outcomes, printed once at the end of the run
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
