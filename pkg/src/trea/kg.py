"""Entity knowledge graph and lexical word graph: loading, validation, linking.

File formats:
  * triples:  UTF-8 TSV, one ``head_id<TAB>relation_id<TAB>tail_id`` per line
  * entities: ``entity_id<TAB>is_item(0|1)<TAB>alias1|alias2|...`` per line
  * word graph: one token per line (vocab) plus ``token<TAB>token`` edge list

Both graphs are immutable after load and safe for concurrent reads.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple

EntityId = int
RelationId = int

_TOKEN_RE = re.compile(r"[a-z0-9_']+")


class KgFormatError(ValueError):
    """Malformed graph file (carries the offending line number)."""

    def __init__(self, path: str, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class KgValidationError(ValueError):
    """Structurally invalid graph (dangling ids, duplicate aliases, ...)."""


def normalize_text(text: str) -> str:
    """Lowercase and collapse runs of whitespace."""
    return " ".join(text.lower().split())


def tokenize(text: str) -> List[str]:
    """Lowercased word tokens; punctuation is dropped, underscores kept."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Triple:
    head: EntityId
    relation: RelationId
    tail: EntityId


class KnowledgeGraph:
    """Typed entity graph with per-relation neighbor index.

    ``neighbor_index[e][r]`` holds the forward neighbors (tails of triples
    headed at ``e``) for ``r < n_relations`` and the reverse neighbors
    (heads of triples ending at ``e``) for ``r = base + n_relations``.
    Reverse relations get distinct ids so relation-aware encoders can
    propagate along both directions of each edge.
    """

    def __init__(
        self,
        n_entities: int,
        n_relations: int,
        triples: Sequence[Triple],
        entity_surface_forms: Sequence[Sequence[str]],
        item_flags: Sequence[bool],
    ):
        if len(entity_surface_forms) != n_entities or len(item_flags) != n_entities:
            raise KgValidationError("entity metadata length does not match entity count")
        self.n_entities = n_entities
        self.n_relations = n_relations
        self.triples: List[Triple] = list(triples)
        self.entity_surface_forms: List[List[str]] = [
            [normalize_text(a) for a in aliases] for aliases in entity_surface_forms
        ]
        self.item_flags: List[bool] = list(item_flags)

        self.neighbor_index: List[Dict[int, Set[int]]] = [dict() for _ in range(n_entities)]
        self._undirected_pairs: Set[Tuple[int, int]] = set()
        for t in self.triples:
            self._check_entity(t.head)
            self._check_entity(t.tail)
            if not 0 <= t.relation < n_relations:
                raise KgValidationError(f"dangling relation id {t.relation}")
            self.neighbor_index[t.head].setdefault(t.relation, set()).add(t.tail)
            self.neighbor_index[t.tail].setdefault(t.relation + n_relations, set()).add(t.head)
            if t.head != t.tail:
                self._undirected_pairs.add((min(t.head, t.tail), max(t.head, t.tail)))

        # Degree normalization, fixed to 1 for every populated (entity, relation).
        self.norm_constant: Dict[Tuple[int, int], float] = {
            (e, r): 1.0 for e in range(n_entities) for r in self.neighbor_index[e]
        }

        self._alias_index: Dict[Tuple[str, ...], int] = {}
        self._max_alias_tokens = 0
        for eid, aliases in enumerate(self.entity_surface_forms):
            for alias in aliases:
                key = tuple(tokenize(alias))
                if not key:
                    continue
                owner = self._alias_index.get(key)
                if owner is not None and owner != eid:
                    raise KgValidationError(
                        f"alias {alias!r} maps to both entity {owner} and entity {eid}"
                    )
                self._alias_index[key] = eid
                self._max_alias_tokens = max(self._max_alias_tokens, len(key))

    def _check_entity(self, e: int) -> None:
        if not 0 <= e < self.n_entities:
            raise KgValidationError(f"dangling entity id {e}")

    @property
    def n_relations_with_reverse(self) -> int:
        return 2 * self.n_relations

    def is_item(self, e: EntityId) -> bool:
        self._check_entity(e)
        return self.item_flags[e]

    def item_ids(self) -> List[int]:
        return [e for e, flag in enumerate(self.item_flags) if flag]

    def neighbors(self, e: EntityId, r: RelationId) -> FrozenSet[int]:
        self._check_entity(e)
        return frozenset(self.neighbor_index[e].get(r, ()))

    def undirected_neighbors(self, e: EntityId) -> Set[int]:
        self._check_entity(e)
        out: Set[int] = set()
        for members in self.neighbor_index[e].values():
            out |= members
        return out

    def surface_form(self, e: EntityId) -> str:
        self._check_entity(e)
        aliases = self.entity_surface_forms[e]
        return aliases[0] if aliases else f"entity_{e}"

    def alias_span_entity(self, span: Tuple[str, ...]) -> Optional[int]:
        return self._alias_index.get(span)

    @property
    def max_alias_tokens(self) -> int:
        return self._max_alias_tokens


def is_adjacent(kg: KnowledgeGraph, a: EntityId, b: EntityId) -> bool:
    """True iff some triple connects ``a`` and ``b`` in either direction."""
    kg._check_entity(a)
    kg._check_entity(b)
    if a == b:
        return (a, a) in kg._undirected_pairs or any(
            t.head == a and t.tail == a for t in kg.triples
        )
    return (min(a, b), max(a, b)) in kg._undirected_pairs


class WordGraph:
    """Undirected lexical graph over word tokens."""

    def __init__(self, token_vocab: Sequence[str], edges: Iterable[Tuple[int, int]]):
        self.token_vocab: List[str] = [normalize_text(t) for t in token_vocab]
        self.token_ids: Dict[str, int] = {}
        for i, tok in enumerate(self.token_vocab):
            if tok in self.token_ids:
                raise KgValidationError(f"duplicate word token {tok!r}")
            self.token_ids[tok] = i
        self.edges: Set[Tuple[int, int]] = set()
        for a, b in edges:
            if a == b:
                raise KgValidationError(f"self-edge on word token {a}")
            if not (0 <= a < len(self.token_vocab) and 0 <= b < len(self.token_vocab)):
                raise KgValidationError(f"word edge endpoint out of vocab: ({a}, {b})")
            self.edges.add((min(a, b), max(a, b)))

    @property
    def n_tokens(self) -> int:
        return len(self.token_vocab)

    def neighbors(self, t: int) -> Set[int]:
        return {b if a == t else a for a, b in self.edges if t in (a, b)}


def _read_lines(path: str) -> List[str]:
    with open(path, encoding="utf-8") as fh:
        return fh.read().splitlines()


def load_kg(
    triples_path: str,
    entities_path: str,
    n_relations: Optional[int] = None,
    self_loop_relations: Iterable[int] = (),
) -> KnowledgeGraph:
    """Load and validate a knowledge graph from its TSV pair.

    Relations are implicitly declared by the triples unless ``n_relations``
    is given, in which case out-of-range relation ids are rejected.
    Self-loop triples are rejected except on relations listed in
    ``self_loop_relations``.
    """
    surface_forms: List[List[str]] = []
    item_flags: List[bool] = []
    for line_no, line in enumerate(_read_lines(entities_path), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise KgFormatError(entities_path, line_no, f"expected 3 fields, got {len(parts)}")
        try:
            eid = int(parts[0])
            flag = int(parts[1])
        except ValueError as exc:
            raise KgFormatError(entities_path, line_no, str(exc)) from None
        if eid != len(surface_forms):
            raise KgFormatError(
                entities_path, line_no, f"entity ids must be dense and ordered, got {eid}"
            )
        if flag not in (0, 1):
            raise KgFormatError(entities_path, line_no, f"is_item must be 0 or 1, got {flag}")
        aliases = [a for a in parts[2].split("|") if a.strip()]
        surface_forms.append(aliases)
        item_flags.append(bool(flag))

    allowed_loops = set(self_loop_relations)
    triples: List[Triple] = []
    seen: Set[Tuple[int, int, int]] = set()
    max_rel = -1
    for line_no, line in enumerate(_read_lines(triples_path), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise KgFormatError(triples_path, line_no, f"expected 3 fields, got {len(parts)}")
        try:
            h, r, t = (int(p) for p in parts)
        except ValueError as exc:
            raise KgFormatError(triples_path, line_no, str(exc)) from None
        if h == t and r not in allowed_loops:
            raise KgFormatError(triples_path, line_no, f"self-loop on relation {r} not permitted")
        max_rel = max(max_rel, r)
        if (h, r, t) in seen:
            continue
        seen.add((h, r, t))
        triples.append(Triple(h, r, t))

    if n_relations is None:
        n_relations = max_rel + 1 if max_rel >= 0 else 0
    return KnowledgeGraph(len(surface_forms), n_relations, triples, surface_forms, item_flags)


def load_word_graph(vocab_path: str, edges_path: str) -> WordGraph:
    vocab = [line.strip() for line in _read_lines(vocab_path) if line.strip()]
    token_ids = {normalize_text(t): i for i, t in enumerate(vocab)}
    edges: List[Tuple[int, int]] = []
    for line_no, line in enumerate(_read_lines(edges_path), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise KgFormatError(edges_path, line_no, f"expected 2 fields, got {len(parts)}")
        a, b = normalize_text(parts[0]), normalize_text(parts[1])
        if a not in token_ids or b not in token_ids:
            raise KgFormatError(edges_path, line_no, f"edge endpoint not in vocab: {line!r}")
        edges.append((token_ids[a], token_ids[b]))
    return WordGraph(vocab, edges)


def link_entities(utterance: str, kg: KnowledgeGraph) -> List[EntityId]:
    """Entity ids of alias matches, left to right, longest match wins.

    Matching is exact over whole word tokens after lowercasing; repeated
    mentions are preserved in order, each being a distinct mention event.
    """
    tokens = tokenize(utterance)
    out: List[int] = []
    i = 0
    n = len(tokens)
    while i < n:
        hit = None
        for length in range(min(kg.max_alias_tokens, n - i), 0, -1):
            eid = kg.alias_span_entity(tuple(tokens[i : i + length]))
            if eid is not None:
                hit = (eid, length)
                break
        if hit is None:
            i += 1
        else:
            out.append(hit[0])
            i += hit[1]
    return out


def link_words(utterance: str, wg: WordGraph) -> List[int]:
    """Word-token ids for whole-token vocab matches, in surface order."""
    return [wg.token_ids[t] for t in tokenize(utterance) if t in wg.token_ids]
