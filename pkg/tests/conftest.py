import random

import pytest
import torch

from ccaug.backbone import TinyTransformer, TinyTransformerConfig, Vocab
from ccaug.data import synthesize_toy_dataset


@pytest.fixture
def toy():
    return synthesize_toy_dataset(20, random.Random(0))


@pytest.fixture
def toy_vocab(toy):
    return Vocab.from_texts([t.raw_text for t in toy] + ["so good", "so bad", "so so"])


@pytest.fixture
def tiny(toy_vocab):
    torch.manual_seed(0)
    return TinyTransformer(TinyTransformerConfig(vocab_size=len(toy_vocab)))


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
