"""Dataset plumbing: vocabulary, raw and prepared formats, sample builders.

Raw corpora are JSON lines, one conversation per line:

    {"id": "c1", "turns": [{"role": "user", "text": "...", "items": []}, ...]}

`prepare` links entity and word mentions per turn, masks item mentions in
recommender responses, replays the reasoning-tree growth, splits 8/1/1 by a
hash of the conversation id, and writes everything alongside copies of the
graph files so a prepared directory is self-contained.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .generator import ContextTurn, ITEM_TOKEN, mask_items
from .kg import (
    KnowledgeGraph,
    WordGraph,
    link_entities,
    link_words,
    load_kg,
    load_word_graph,
    tokenize,
)
from .tree import ReasoningTree, init_tree

log = logging.getLogger(__name__)

PREPARED_FORMAT = "trea-prepared-v1"

PAD_TOKEN = "__pad__"
BOS_TOKEN = "__bos__"
EOS_TOKEN = "__eos__"
UNK_TOKEN = "__unk__"
USER_TOKEN = "__user__"
REC_TOKEN = "__rec__"
RESERVED_TOKENS = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN, ITEM_TOKEN, USER_TOKEN, REC_TOKEN]

ROLE_USER = "user"
ROLE_REC = "rec"
_ROLE_ALIASES = {
    "user": ROLE_USER,
    "seeker": ROLE_USER,
    "rec": ROLE_REC,
    "recommender": ROLE_REC,
    "system": ROLE_REC,
    "assistant": ROLE_REC,
}

GRAPH_FILE_NAMES = ("kg.tsv", "entities.tsv", "word_vocab.txt", "word_edges.tsv")


class DataFormatError(ValueError):
    def __init__(self, path: str, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class Vocabulary:
    """Token table with fixed reserved ids at the front."""

    def __init__(self, tokens: Sequence[str]):
        if list(tokens[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise ValueError("vocabulary must start with the reserved tokens")
        self._tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(self._tokens)}
        if len(self._ids) != len(self._tokens):
            raise ValueError("vocabulary contains duplicate tokens")

    pad_id = 0
    bos_id = 1
    eos_id = 2
    unk_id = 3
    item_id = 4
    user_id = 5
    rec_id = 6

    @classmethod
    def build(cls, corpus_tokens: Iterable[str]) -> "Vocabulary":
        tokens = list(RESERVED_TOKENS)
        seen = set(tokens)
        for tok in corpus_tokens:
            if tok not in seen:
                seen.add(tok)
                tokens.append(tok)
        return cls(tokens)

    def __len__(self) -> int:
        return len(self._tokens)

    def token_to_id(self, token: str) -> int:
        return self._ids.get(token, self.unk_id)

    def id_to_token(self, token_id: int) -> str:
        return self._tokens[token_id]

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.token_to_id(t) for t in tokens]

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self._tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


@dataclass
class RawTurn:
    role: str
    text: str
    items: List[int] = field(default_factory=list)


@dataclass
class RawConversation:
    conversation_id: str
    turns: List[RawTurn]


def load_raw(path: str) -> List[RawConversation]:
    out: List[RawConversation] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(path, line_no, f"bad JSON: {exc}") from None
            if not isinstance(obj, dict):
                raise DataFormatError(path, line_no, "expected a JSON object")
            if obj.get("format") == PREPARED_FORMAT:
                raise DataFormatError(
                    path, line_no, "input is already prepared (format tag present)"
                )
            if "id" not in obj or "turns" not in obj:
                raise DataFormatError(path, line_no, "missing 'id' or 'turns'")
            turns = []
            for i, t in enumerate(obj["turns"]):
                role = _ROLE_ALIASES.get(str(t.get("role", "")).lower())
                if role is None:
                    raise DataFormatError(path, line_no, f"turn {i}: unknown role {t.get('role')!r}")
                text = t.get("text")
                if not isinstance(text, str):
                    raise DataFormatError(path, line_no, f"turn {i}: text must be a string")
                items = t.get("items", [])
                if not all(isinstance(x, int) for x in items):
                    raise DataFormatError(path, line_no, f"turn {i}: items must be integer ids")
                turns.append(RawTurn(role=role, text=text, items=list(items)))
            out.append(RawConversation(conversation_id=str(obj["id"]), turns=turns))
    return out


@dataclass
class Turn:
    role: str
    text: str
    tokens: List[str]
    token_ids: List[int]
    entity_ids: List[int]
    word_ids: List[int]
    items: List[int]
    round_index: int
    target_entity: Optional[int] = None
    target_tokens: Optional[List[str]] = None
    target_token_ids: Optional[List[int]] = None
    slot_positions: Optional[List[int]] = None


@dataclass
class DialogSample:
    conversation_id: str
    turns: List[Turn]
    tree: ReasoningTree
    nodes_after_turn: List[int]

    def validate(self, kg: Optional[KnowledgeGraph] = None) -> "DialogSample":
        rounds = [t.round_index for t in self.turns]
        if any(r < 1 for r in rounds) or any(b < a for a, b in zip(rounds, rounds[1:])):
            raise ValueError(f"{self.conversation_id}: round indices must be 1-based, non-decreasing")
        if len(self.nodes_after_turn) != len(self.turns):
            raise ValueError(f"{self.conversation_id}: nodes_after_turn length mismatch")
        mention_total = sum(len(t.entity_ids) for t in self.turns)
        if self.tree.mention_count != mention_total:
            raise ValueError(f"{self.conversation_id}: tree size disagrees with mentions")
        if kg is not None:
            for t in self.turns:
                if t.target_entity is not None and not kg.is_item(t.target_entity):
                    raise ValueError(f"{self.conversation_id}: target {t.target_entity} is not an item")
        return self


def assign_rounds(roles: Sequence[str]) -> List[int]:
    """1-based exchange numbering: each user turn opens a round, the
    recommender turns that follow stay in it. Leading recommender turns
    (greetings) count as round 1."""
    rounds: List[int] = []
    current = 0
    previous = None
    for role in roles:
        if role == ROLE_USER and previous != ROLE_USER:
            current += 1
        rounds.append(max(current, 1))
        previous = role
    return rounds


def replay_tree(
    turn_entity_lists: Sequence[Sequence[int]], kg: KnowledgeGraph
) -> Tuple[ReasoningTree, List[int]]:
    """Grow the reasoning tree over all mentions, recording per-turn sizes."""
    tree = init_tree()
    nodes_after_turn: List[int] = []
    for turn_index, entity_ids in enumerate(turn_entity_lists):
        for e in entity_ids:
            tree.connect(e, kg, turn_index=turn_index)
        nodes_after_turn.append(len(tree.nodes))
    return tree, nodes_after_turn


class TargetResolutionError(ValueError):
    pass


def prepare_conversation(
    raw: RawConversation, kg: KnowledgeGraph, wg: WordGraph, vocab: Vocabulary
) -> DialogSample:
    """Link, mask, and replay one conversation.

    Raises TargetResolutionError when a recommender turn lists items but
    none of them is a valid item entity; callers drop and count those.
    """
    rounds = assign_rounds([t.role for t in raw.turns])
    turns: List[Turn] = []
    for raw_turn, round_index in zip(raw.turns, rounds):
        tokens = tokenize(raw_turn.text)
        turn = Turn(
            role=raw_turn.role,
            text=raw_turn.text,
            tokens=tokens,
            token_ids=vocab.encode(tokens),
            entity_ids=link_entities(raw_turn.text, kg),
            word_ids=link_words(raw_turn.text, wg),
            items=list(raw_turn.items),
            round_index=round_index,
        )
        if raw_turn.role == ROLE_REC and raw_turn.items:
            valid = [i for i in raw_turn.items if 0 <= i < kg.n_entities and kg.is_item(i)]
            if not valid:
                raise TargetResolutionError(
                    f"{raw.conversation_id}: no item in {raw_turn.items} resolves"
                )
            turn.target_entity = valid[0]
            masked, slots = mask_items(tokens, kg)
            turn.target_tokens = masked
            turn.target_token_ids = vocab.encode(masked)
            turn.slot_positions = slots
        turns.append(turn)
    tree, nodes_after_turn = replay_tree([t.entity_ids for t in turns], kg)
    return DialogSample(
        conversation_id=raw.conversation_id,
        turns=turns,
        tree=tree,
        nodes_after_turn=nodes_after_turn,
    ).validate(kg)


def split_of(conversation_id: str) -> str:
    """Stable 8/1/1 split keyed on a hash of the conversation id."""
    bucket = int(hashlib.md5(conversation_id.encode("utf-8")).hexdigest(), 16) % 10
    if bucket < 8:
        return "train"
    return "valid" if bucket == 8 else "test"


def _turn_to_json(t: Turn) -> Dict:
    return {
        "role": t.role,
        "text": t.text,
        "tokens": t.tokens,
        "token_ids": t.token_ids,
        "entity_ids": t.entity_ids,
        "word_ids": t.word_ids,
        "items": t.items,
        "round_index": t.round_index,
        "target_entity": t.target_entity,
        "target_tokens": t.target_tokens,
        "target_token_ids": t.target_token_ids,
        "slot_positions": t.slot_positions,
    }


def _turn_from_json(obj: Dict) -> Turn:
    return Turn(**obj)


def conversation_to_json(sample: DialogSample) -> Dict:
    return {
        "format": PREPARED_FORMAT,
        "id": sample.conversation_id,
        "turns": [_turn_to_json(t) for t in sample.turns],
        "tree": sample.tree.to_json_dict(),
        "nodes_after_turn": sample.nodes_after_turn,
    }


def conversation_from_json(obj: Dict) -> DialogSample:
    return DialogSample(
        conversation_id=obj["id"],
        turns=[_turn_from_json(t) for t in obj["turns"]],
        tree=ReasoningTree.from_json_dict(obj["tree"]),
        nodes_after_turn=list(obj["nodes_after_turn"]),
    )


def save_prepared(path: str, samples: Sequence[DialogSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(conversation_to_json(s), sort_keys=True) + "\n")


def load_prepared(path: str) -> List[DialogSample]:
    out: List[DialogSample] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if obj.get("format") != PREPARED_FORMAT:
                raise DataFormatError(path, line_no, "missing or unknown prepared-format tag")
            out.append(conversation_from_json(obj))
    return out


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class PrepareReport:
    out_dir: str
    kept: int
    dropped: int
    split_counts: Dict[str, int]


def prepare(
    raw_path: str,
    kg: KnowledgeGraph,
    wg: WordGraph,
    out_dir: str,
    graph_sources: Optional[Mapping[str, str]] = None,
) -> PrepareReport:
    """Turn a raw corpus into a self-contained prepared dataset directory.

    ``graph_sources`` maps canonical graph file names to source paths; they
    are copied into the output directory so later commands need only  the
    directory. Conversations whose recommender turns name items that do not
    resolve are dropped and counted in the manifest.
    """
    raw = load_raw(raw_path)
    vocab = Vocabulary.build(
        tok for conv in raw for turn in conv.turns for tok in tokenize(turn.text)
    )
    kept: List[DialogSample] = []
    dropped = 0
    for conv in raw:
        try:
            kept.append(prepare_conversation(conv, kg, wg, vocab))
        except TargetResolutionError as exc:
            dropped += 1
            log.warning("dropping conversation: %s", exc)
    splits: Dict[str, List[DialogSample]] = {"train": [], "valid": [], "test": []}
    for sample in kept:
        splits[split_of(sample.conversation_id)].append(sample)

    os.makedirs(out_dir, exist_ok=True)
    for name, samples in splits.items():
        save_prepared(os.path.join(out_dir, f"{name}.jsonl"), samples)
    vocab.save(os.path.join(out_dir, "vocab.txt"))
    if graph_sources:
        for name in GRAPH_FILE_NAMES:
            if name not in graph_sources:
                raise ValueError(f"graph_sources is missing {name}")
            shutil.copyfile(graph_sources[name], os.path.join(out_dir, name))
    manifest = {
        "format": PREPARED_FORMAT,
        "conversations": len(raw),
        "kept": len(kept),
        "dropped_conversations": dropped,
        "split_rule": "md5(conversation_id) % 10 -> 0-7 train, 8 valid, 9 test",
        "split_counts": {name: len(samples) for name, samples in splits.items()},
        "files": {},
    }
    for name in sorted(os.listdir(out_dir)):
        if name != "dataset.json":
            manifest["files"][name] = _sha256(os.path.join(out_dir, name))
    with open(os.path.join(out_dir, "dataset.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return PrepareReport(
        out_dir=out_dir,
        kept=len(kept),
        dropped=dropped,
        split_counts=dict(manifest["split_counts"]),
    )


@dataclass
class PreparedDataset:
    """Everything a command needs, loaded from one prepared directory."""

    kg: KnowledgeGraph
    wg: WordGraph
    vocab: Vocabulary
    splits: Dict[str, List[DialogSample]]
    manifest: Dict

    @classmethod
    def load(cls, data_dir: str) -> "PreparedDataset":
        manifest_path = os.path.join(data_dir, "dataset.json")
        if not os.path.exists(manifest_path):
            raise FileNotFoundError(f"{data_dir} has no dataset.json; run prepare first")
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        kg = load_kg(os.path.join(data_dir, "kg.tsv"), os.path.join(data_dir, "entities.tsv"))
        wg = load_word_graph(
            os.path.join(data_dir, "word_vocab.txt"), os.path.join(data_dir, "word_edges.tsv")
        )
        vocab = Vocabulary.load(os.path.join(data_dir, "vocab.txt"))
        splits = {
            name: load_prepared(os.path.join(data_dir, f"{name}.jsonl"))
            for name in ("train", "valid", "test")
        }
        return cls(kg=kg, wg=wg, vocab=vocab, splits=splits, manifest=manifest)


@dataclass
class ReasonerSample:
    """One recommendation decision: the state just before a recommender turn."""

    conversation_id: str
    turn_index: int
    round_index: int
    tree: ReasoningTree
    history_word_ids: List[int]
    current_entity_ids: List[int]
    current_word_ids: List[int]
    target: int


def build_reasoner_samples(sample: DialogSample) -> List[ReasonerSample]:
    out: List[ReasonerSample] = []
    for t, turn in enumerate(sample.turns):
        if turn.role != ROLE_REC or turn.target_entity is None:
            continue
        snapshot = sample.tree.snapshot(sample.nodes_after_turn[t - 1]) if t > 0 else init_tree()
        history_words = [w for prior in sample.turns[:t] for w in prior.word_ids]
        current = sample.turns[t - 1] if t > 0 else None
        out.append(
            ReasonerSample(
                conversation_id=sample.conversation_id,
                turn_index=t,
                round_index=turn.round_index,
                tree=snapshot,
                history_word_ids=history_words,
                current_entity_ids=list(current.entity_ids) if current else [],
                current_word_ids=list(current.word_ids) if current else [],
                target=turn.target_entity,
            )
        )
    return out


@dataclass
class GeneratorSample:
    """One response to produce, with the target entity already connected."""

    conversation_id: str
    turn_index: int
    round_index: int
    tree: ReasoningTree
    target_entity: int
    history: List[ContextTurn]
    target_token_ids: List[int]


def build_generator_samples(
    sample: DialogSample, kg: KnowledgeGraph, vocab: Vocabulary
) -> List[GeneratorSample]:
    role_ids = {ROLE_USER: vocab.user_id, ROLE_REC: vocab.rec_id}
    out: List[GeneratorSample] = []
    for t, turn in enumerate(sample.turns):
        if turn.role != ROLE_REC or turn.target_entity is None:
            continue
        tree = sample.tree.snapshot(sample.nodes_after_turn[t - 1]) if t > 0 else init_tree()
        tree.connect(turn.target_entity, kg, turn_index=t)
        history = [
            ContextTurn(
                role_token_id=role_ids[prior.role],
                token_ids=list(prior.token_ids),
                entity_ids=set(prior.entity_ids),
            )
            for prior in sample.turns[:t]
        ]
        assert turn.target_token_ids is not None
        out.append(
            GeneratorSample(
                conversation_id=sample.conversation_id,
                turn_index=t,
                round_index=turn.round_index,
                tree=tree,
                target_entity=turn.target_entity,
                history=history,
                target_token_ids=list(turn.target_token_ids) + [vocab.eos_id],
            )
        )
    return out
