import numpy as np
import pytest
import torch

from abbrmlm.pinyin import builtin_table
from abbrmlm.tokenizer import build_vocabulary
from abbrmlm.toy import ToyLanguage

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def table():
    return builtin_table()


@pytest.fixture(scope="session")
def lang(table):
    return ToyLanguage.default(table)


@pytest.fixture(scope="session")
def toy_sentences(lang):
    return lang.corpus(60, seed=11)


@pytest.fixture(scope="session")
def toy_vocab(toy_sentences):
    return build_vocabulary(toy_sentences)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
