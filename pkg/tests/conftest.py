import numpy as np
import pytest

from tinyvlm import tokenizer as tok


@pytest.fixture(scope="session")
def toy_tokenizer():
    """Small BPE model over the shared toy grammar + caption vocabulary."""
    from helpers import caption_sentences, grammar_sentences

    corpus = grammar_sentences(200, seed=11) + caption_sentences(200, seed=12)
    return tok.train_bpe(corpus, vocab_size=180)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion."""
    rows = []
    for status, label in (("passed", "PASS"), ("failed", "FAIL"), ("error", "FAIL")):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py" in nodeid:
                if status == "passed" and getattr(rep, "when", "call") != "call":
                    continue
                rows.append((nodeid.split("::")[-1], label))
    if rows:
        terminalreporter.write_sep("-", "acceptance criteria")
        for name, label in sorted(set(rows)):
            terminalreporter.write_line(f"{label}  {name}")
