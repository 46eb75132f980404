import pytest
import torch

from bidirte.corpus import RawExample, RelationVocab, regex_tokenize, tokenize_align
from bidirte.synthetic import OVERLAP_PAIR


@pytest.fixture
def pair_raws():
    return [RawExample(r["text"], tuple(tuple(t) for t in r["triple_list"])) for r in OVERLAP_PAIR]


@pytest.fixture
def pair_vocab(pair_raws):
    return RelationVocab(r for raw in pair_raws for _, r, _ in raw.triples)


@pytest.fixture
def pair_examples(pair_raws, pair_vocab):
    return [tokenize_align(raw, regex_tokenize, 100, pair_vocab, uid=i) for i, raw in enumerate(pair_raws)]


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
