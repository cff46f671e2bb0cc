"""Shared builders for small graphs used across the tests."""

import random
from typing import List, Optional, Sequence, Tuple

from trea.kg import KnowledgeGraph, Triple, WordGraph


def make_kg(
    n_entities: int,
    triples: Sequence[Tuple[int, int, int]],
    items: Sequence[int] = (),
    aliases: Optional[Sequence[Sequence[str]]] = None,
    n_relations: Optional[int] = None,
) -> KnowledgeGraph:
    if n_relations is None:
        n_relations = max((r for _, r, _ in triples), default=-1) + 1
    if aliases is None:
        aliases = [[f"ent {e}"] for e in range(n_entities)]
    flags = [e in set(items) for e in range(n_entities)]
    return KnowledgeGraph(
        n_entities, n_relations, [Triple(*t) for t in triples], aliases, flags
    )


def make_wg(tokens: Sequence[str], edges: Sequence[Tuple[int, int]] = ()) -> WordGraph:
    return WordGraph(tokens, edges)


def random_kg(
    rng: random.Random,
    n_entities: int,
    n_relations: int,
    n_triples: int,
    item_count: int = 0,
) -> KnowledgeGraph:
    triples = set()
    for _ in range(n_triples):
        h = rng.randrange(n_entities)
        t = rng.randrange(n_entities)
        if h == t:
            continue
        triples.add((h, rng.randrange(n_relations), t))
    items = list(range(n_entities - item_count, n_entities)) if item_count else []
    return make_kg(n_entities, sorted(triples), items=items, n_relations=n_relations)
