import numpy as np
import pytest

from dmporec.seqmodel import ModelConfig, TransformerLM
from dmporec.tokenizer import TokenSequence


def tiny_lm(seed=0, vocab_size=17, dim=8, layers=1, heads=2, init_std=0.3, **kw):
    kw.setdefault("allowed_adapter_ranks", None)
    cfg = ModelConfig(vocab_size, dim, layers, heads, max_seq_len=32, init_std=init_std, **kw)
    return TransformerLM(cfg, seed=seed)


def random_seq(rng, vocab_size=17, prompt_len=4, n_completion=3):
    ids = rng.integers(0, vocab_size, size=prompt_len + n_completion)
    return TokenSequence(tuple(int(i) for i in ids), prompt_len)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_data():
    """A 40/20/60 synthetic split with k=2, its vocabulary and a small model config."""
    from dmporec import datapipe as dp
    from dmporec.experiments import vocab_from_samples
    from dmporec.synthetic import SyntheticConfig, generate_events

    hists = dp.filter_and_truncate(generate_events(SyntheticConfig(n_users=160, seed=1)))
    pool = dp.build_pool(hists, 2, 0, max_prompt_items=3)
    split = dp.eval_view(dp.make_splits(pool, (40, 20, 60), seed=0))
    vocab = vocab_from_samples(pool, 4096)
    return split, vocab


def small_model(vocab, seed=0, **kw):
    from dmporec.seqmodel import ModelConfig, build_model

    kw.setdefault("max_seq_len", 160)
    return build_model(ModelConfig(len(vocab), 16, 1, 2, **kw), seed=seed)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
