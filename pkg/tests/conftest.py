import os

import pytest

from trea.data import PreparedDataset, prepare
from trea.kg import load_kg, load_word_graph

FIXTURE_DIR = os.path.join(os.path.dirname(__file__), "..", "fixtures", "toy")


@pytest.fixture(scope="session")
def toy_dir() -> str:
    return os.path.abspath(FIXTURE_DIR)


@pytest.fixture(scope="session")
def prepared(toy_dir, tmp_path_factory) -> PreparedDataset:
    """The toy corpus, prepared once for the whole test run."""
    out = str(tmp_path_factory.mktemp("prepared"))
    kg = load_kg(os.path.join(toy_dir, "kg.tsv"), os.path.join(toy_dir, "entities.tsv"))
    wg = load_word_graph(
        os.path.join(toy_dir, "word_vocab.txt"), os.path.join(toy_dir, "word_edges.tsv")
    )
    prepare(
        os.path.join(toy_dir, "conversations.jsonl"),
        kg,
        wg,
        out,
        graph_sources={
            name: os.path.join(toy_dir, name)
            for name in ("kg.tsv", "entities.tsv", "word_vocab.txt", "word_edges.tsv")
        },
    )
    return PreparedDataset.load(out)


@pytest.fixture(scope="session")
def prepared_dir(toy_dir, tmp_path_factory) -> str:
    """A second prepared directory for CLI-level tests that need the path."""
    out = str(tmp_path_factory.mktemp("prepared_cli"))
    kg = load_kg(os.path.join(toy_dir, "kg.tsv"), os.path.join(toy_dir, "entities.tsv"))
    wg = load_word_graph(
        os.path.join(toy_dir, "word_vocab.txt"), os.path.join(toy_dir, "word_edges.tsv")
    )
    prepare(
        os.path.join(toy_dir, "conversations.jsonl"),
        kg,
        wg,
        out,
        graph_sources={
            name: os.path.join(toy_dir, name)
            for name in ("kg.tsv", "entities.tsv", "word_vocab.txt", "word_edges.tsv")
        },
    )
    return out
