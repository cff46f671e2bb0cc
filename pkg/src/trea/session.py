"""Live conversation sessions: observe a user turn, recommend, respond.

Each user utterance is linked against the knowledge graph and word graph,
the linked entities grow the reasoning tree, the scorer ranks items, the
top item is connected as the predicted next entity, and the generator
produces the response around it. Model weights are frozen for the whole
session, so the graph embedding tables are computed once up front.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, TextIO

import torch

from .data import Vocabulary
from .generator import ContextTurn, GeneratorModel
from .kg import KnowledgeGraph, WordGraph, link_entities, link_words, tokenize
from .reasoner import ReasonerModel, next_entity_distribution
from .training import rank_items
from .tree import ReasoningTree, init_tree


@dataclass
class TurnResult:
    recommendations: List[int]
    response_tokens: List[str]
    tree_snapshot: Dict


@dataclass
class SessionState:
    tree: ReasoningTree = field(default_factory=init_tree)
    history: List[ContextTurn] = field(default_factory=list)
    history_word_ids: List[int] = field(default_factory=list)
    turn_count: int = 0


class Session:
    """One conversation against frozen models."""

    def __init__(
        self,
        reasoner: ReasonerModel,
        generator: GeneratorModel,
        kg: KnowledgeGraph,
        wg: WordGraph,
        vocab: Vocabulary,
        top_k: int = 10,
        max_len: int = 30,
    ):
        self.reasoner = reasoner.eval()
        self.generator = generator.eval()
        self.kg = kg
        self.wg = wg
        self.vocab = vocab
        self.top_k = top_k
        self.max_len = max_len
        with torch.no_grad():
            self.entity_table, self.word_table = reasoner.encode_graphs()
            self.entity_table = self.entity_table.detach()
            self.word_table = self.word_table.detach()
        self.state = SessionState()

    def observe_and_respond(self, utterance: str) -> TurnResult:
        state = self.state
        user_turn_index = state.turn_count
        entity_ids = link_entities(utterance, self.kg)
        word_ids = link_words(utterance, self.wg)
        tokens = tokenize(utterance)
        for e in entity_ids:
            state.tree.connect(e, self.kg, turn_index=user_turn_index)
        state.history_word_ids.extend(word_ids)
        state.history.append(
            ContextTurn(
                role_token_id=self.vocab.user_id,
                token_ids=self.vocab.encode(tokens),
                entity_ids=set(entity_ids),
            )
        )

        with torch.no_grad():
            out = self.reasoner(
                state.tree,
                state.history_word_ids,
                entity_ids,
                word_ids,
                self.entity_table,
                self.word_table,
            )
            dist = next_entity_distribution(out.user_rep, self.entity_table)
            ranked = rank_items(dist, self.kg)
            predicted = ranked[0]
            state.tree.connect(predicted, self.kg, turn_index=user_turn_index + 1)
            ctx = self.generator.extract_context(
                state.tree, predicted, state.history, self.entity_table
            )
            response = self.generator.generate(
                ctx, self.vocab, kg=self.kg, max_len=self.max_len
            )

        # The response joins the dialogue history; its item mention is
        # already in the tree as the connected prediction, so the tree is
        # not grown a second time for it.
        state.history.append(
            ContextTurn(
                role_token_id=self.vocab.rec_id,
                token_ids=self.vocab.encode(response),
                entity_ids={predicted},
            )
        )
        state.history_word_ids.extend(link_words(" ".join(response), self.wg))
        state.turn_count = user_turn_index + 2
        return TurnResult(
            recommendations=ranked[: self.top_k],
            response_tokens=response,
            tree_snapshot=state.tree.to_json_dict(),
        )


def run_session(
    reasoner: ReasonerModel,
    generator: GeneratorModel,
    kg: KnowledgeGraph,
    wg: WordGraph,
    vocab: Vocabulary,
    utterances: Iterable[str],
    top_k: int = 10,
    max_len: int = 30,
) -> List[TurnResult]:
    """Feed a scripted utterance stream through one session."""
    session = Session(reasoner, generator, kg, wg, vocab, top_k=top_k, max_len=max_len)
    return [session.observe_and_respond(u) for u in utterances]


def chat_repl(
    reasoner: ReasonerModel,
    generator: GeneratorModel,
    kg: KnowledgeGraph,
    wg: WordGraph,
    vocab: Vocabulary,
    in_stream: Optional[TextIO] = None,
    out_stream: Optional[TextIO] = None,
    top_k: int = 10,
    max_len: int = 30,
) -> int:
    """Line-oriented chat loop.

    Meta-commands: ``:quit`` leaves, ``:tree`` prints the current tree in
    DOT form, ``:topk N`` changes the recommendation list length. Feeding a
    transcript file through ``in_stream`` replays it exactly.
    """
    in_stream = sys.stdin if in_stream is None else in_stream
    out_stream = sys.stdout if out_stream is None else out_stream
    session = Session(reasoner, generator, kg, wg, vocab, top_k=top_k, max_len=max_len)

    def say(text: str) -> None:
        out_stream.write(text + "\n")
        out_stream.flush()

    say("type a message, :quit to leave, :tree to see the tree, :topk N to resize")
    while True:
        out_stream.write("you> ")
        out_stream.flush()
        line = in_stream.readline()
        if not line:
            return 0
        line = line.strip()
        if not line:
            continue
        if line == ":quit":
            return 0
        if line == ":tree":
            say(session.state.tree.to_dot(kg))
            continue
        if line.startswith(":topk"):
            parts = line.split()
            if len(parts) != 2 or not parts[1].isdigit() or int(parts[1]) < 1:
                say("usage: :topk N")
                continue
            session.top_k = int(parts[1])
            say(f"top-k set to {session.top_k}")
            continue
        result = session.observe_and_respond(line)
        say("rec> " + " ".join(result.response_tokens))
        say("items: " + ", ".join(kg.surface_form(i) for i in result.recommendations))
