import random

import pytest

from helpers import make_kg, make_wg
from trea.kg import (
    KgFormatError,
    KgValidationError,
    WordGraph,
    is_adjacent,
    link_entities,
    link_words,
    load_kg,
    load_word_graph,
    normalize_text,
    tokenize,
)


def test_normalize_collapses_case_and_whitespace():
    assert normalize_text("  The  MATRIX\tReloaded ") == "the matrix reloaded"


def test_tokenize_drops_punctuation_keeps_digits():
    assert tokenize("Well, I liked K-9: it's fun (2001)!") == [
        "well", "i", "liked", "k", "9", "it's", "fun", "2001",
    ]


def test_forward_neighbors_are_triple_tails():
    kg = make_kg(3, [(1, 0, 2)])
    assert kg.neighbors(1, 0) == frozenset({2})
    assert kg.neighbors(2, 0) == frozenset()


def test_reverse_relation_gets_shifted_id():
    kg = make_kg(3, [(1, 0, 2)])
    assert kg.n_relations == 1
    assert kg.n_relations_with_reverse == 2
    assert kg.neighbors(2, 1) == frozenset({1})


def test_undirected_adjacency_is_symmetric():
    kg = make_kg(4, [(0, 0, 3), (2, 1, 0)])
    for a, b in [(0, 3), (3, 0), (0, 2), (2, 0)]:
        assert is_adjacent(kg, a, b)
    assert not is_adjacent(kg, 1, 3)
    assert not is_adjacent(kg, 0, 0)


def test_norm_constant_is_one_for_populated_pairs():
    kg = make_kg(3, [(0, 0, 1), (0, 0, 2)])
    assert kg.norm_constant[(0, 0)] == 1.0
    assert (1, 0) not in kg.norm_constant  # 1 has only the reverse relation


def test_dangling_entity_rejected():
    with pytest.raises(KgValidationError):
        make_kg(2, [(0, 0, 5)])


def test_dangling_relation_rejected():
    with pytest.raises(KgValidationError):
        make_kg(2, [(0, 3, 1)], n_relations=2)


def test_alias_owned_by_two_entities_rejected():
    with pytest.raises(KgValidationError):
        make_kg(2, [], aliases=[["the same"], ["The  Same"]])


def test_surface_form_falls_back_to_id():
    kg = make_kg(2, [], aliases=[["real name"], []])
    assert kg.surface_form(0) == "real name"
    assert kg.surface_form(1) == "entity_1"


def test_item_ids_and_flags():
    kg = make_kg(4, [], items=[1, 3])
    assert kg.item_ids() == [1, 3]
    assert kg.is_item(3) and not kg.is_item(0)


def test_load_kg_round_trip(tmp_path):
    triples = tmp_path / "kg.tsv"
    triples.write_text("0\t0\t1\n1\t1\t2\n0\t0\t1\n")  # duplicate line collapses
    entities = tmp_path / "entities.tsv"
    entities.write_text("0\t0\tzero thing\n1\t1\tone|first\n2\t0\ttwo\n")
    kg = load_kg(str(triples), str(entities))
    assert kg.n_entities == 3
    assert kg.n_relations == 2
    assert len(kg.triples) == 2
    assert kg.is_item(1)
    assert kg.surface_form(1) == "one"


def test_load_kg_rejects_unordered_ids(tmp_path):
    triples = tmp_path / "kg.tsv"
    triples.write_text("")
    entities = tmp_path / "entities.tsv"
    entities.write_text("1\t0\tfoo\n0\t0\tbar\n")
    with pytest.raises(KgFormatError) as err:
        load_kg(str(triples), str(entities))
    assert "dense" in str(err.value)


def test_load_kg_rejects_self_loop_unless_permitted(tmp_path):
    triples = tmp_path / "kg.tsv"
    triples.write_text("0\t0\t0\n")
    entities = tmp_path / "entities.tsv"
    entities.write_text("0\t0\tfoo\n")
    with pytest.raises(KgFormatError):
        load_kg(str(triples), str(entities))
    kg = load_kg(str(triples), str(entities), self_loop_relations=(0,))
    assert kg.triples[0].head == kg.triples[0].tail == 0


def test_load_kg_bad_field_count(tmp_path):
    triples = tmp_path / "kg.tsv"
    triples.write_text("0\t0\n")
    entities = tmp_path / "entities.tsv"
    entities.write_text("0\t0\tfoo\n")
    with pytest.raises(KgFormatError) as err:
        load_kg(str(triples), str(entities))
    assert err.value.line_no == 1


def test_link_entities_longest_match_wins():
    kg = make_kg(3, [], aliases=[["star"], ["star wars"], ["wars"]])
    assert link_entities("I love Star Wars", kg) == [1]
    assert link_entities("star, then wars", kg) == [0, 2]


def test_link_entities_preserves_repeat_mentions():
    kg = make_kg(2, [], aliases=[["alpha"], ["beta"]])
    assert link_entities("alpha beta alpha", kg) == [0, 1, 0]


def test_link_entities_ignores_partial_tokens():
    kg = make_kg(1, [], aliases=[["cat"]])
    assert link_entities("concatenate cats cat", kg) == [0]


def test_word_graph_rejects_bad_edges():
    with pytest.raises(KgValidationError):
        WordGraph(["a", "b"], [(0, 0)])
    with pytest.raises(KgValidationError):
        WordGraph(["a", "b"], [(0, 5)])


def test_link_words_whole_tokens():
    wg = make_wg(["like", "fun", "dark"])
    assert link_words("I like dark, funny stuff", wg) == [0, 2]


def test_load_word_graph(tmp_path):
    vocab = tmp_path / "vocab.txt"
    vocab.write_text("alpha\nbeta\ngamma\n")
    edges = tmp_path / "edges.tsv"
    edges.write_text("alpha\tbeta\nbeta\tgamma\n")
    wg = load_word_graph(str(vocab), str(edges))
    assert wg.n_tokens == 3
    assert wg.neighbors(1) == {0, 2}


def test_load_word_graph_rejects_unknown_token(tmp_path):
    vocab = tmp_path / "vocab.txt"
    vocab.write_text("alpha\n")
    edges = tmp_path / "edges.tsv"
    edges.write_text("alpha\tomega\n")
    with pytest.raises(KgFormatError):
        load_word_graph(str(vocab), str(edges))


def test_alias_index_matches_random_queries():
    rng = random.Random(11)
    names = [f"name {i}" for i in range(20)]
    kg = make_kg(20, [], aliases=[[n] for n in names])
    for _ in range(50):
        e = rng.randrange(20)
        assert kg.alias_span_entity(tuple(names[e].split())) == e
    assert kg.alias_span_entity(("missing",)) is None
