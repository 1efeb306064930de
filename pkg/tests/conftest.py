import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from microbert import synthetic  # noqa: E402
from microbert.corpus import split_documents  # noqa: E402
from microbert.tokenizer import train_wordpiece  # noqa: E402

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def acceptance():
    """Record one acceptance line: ``acceptance(criterion, passed, detail)``."""
    def record(criterion: str, passed: bool, detail: str = ""):
        _ACCEPTANCE.append((criterion, bool(passed), detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {criterion}  {detail}")


@pytest.fixture(scope="session")
def toy_docs():
    return synthetic.documents(3000, seed=0)


@pytest.fixture(scope="session")
def toy_corpus(toy_docs):
    return split_documents(toy_docs, 0.1, seed=0)


@pytest.fixture(scope="session")
def toy_vocab(toy_corpus):
    return train_wordpiece([w for s in toy_corpus.train_sentences() for w in s], 400)


@pytest.fixture(scope="session")
def toy_treebank():
    return synthetic.treebank(40, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
