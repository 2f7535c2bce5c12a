import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from drrag.corpus import Corpus, Document  # noqa: E402
from drrag.synth import SynthSpec, generate_instances  # noqa: E402


@pytest.fixture
def heiberg_docs():
    return [
        Document("d1", "heiberg son johan"),
        Document("d2", "johan wife miquette"),
        Document("d3", "johan astronomy"),
    ]


@pytest.fixture
def heiberg_corpus(heiberg_docs):
    return Corpus.from_documents(heiberg_docs)


@pytest.fixture(scope="session")
def synth_small():
    return generate_instances(SynthSpec(num_queries=30, distractors_per_query=3, seed=7))


def write_lines(path: Path, lines) -> Path:
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path
