"""Deterministic toy corpus for offline tests and demos.

The world has attribute entities (low ids) and item entities (high ids).
Every attribute neighbors at least one item, so the corpus-construction
rule "the recommended item is the highest-id graph neighbor of the last
mentioned attribute" always yields an item. User turns mention exactly one
attribute; recommender turns mention exactly the chosen item. Everything
is derived from one seed, so regenerating the files is reproducible.
"""

from __future__ import annotations

import argparse
import json
import os
import random
from typing import Dict, List, Tuple

N_ATTRIBUTES = 150
N_ITEMS = 50
N_RELATIONS = 4
# Dialogues mention attributes from a smaller pool so every mapping the
# scorer must learn shows up several times in the training split.
MENTION_POOL = 80

WORD_VOCAB = [
    "i", "you", "we", "like", "love", "enjoy", "want", "need", "watch", "try",
    "something", "anything", "more", "less", "really", "very", "about", "with",
    "and", "or", "the", "a", "an", "is", "was", "great", "good", "fun", "dark",
    "light", "new", "old", "tonight", "today", "please", "thanks", "maybe",
    "sure", "stuff", "pick",
]

USER_TEMPLATES = [
    "i really like {attr}",
    "i want something about {attr}",
    "more {attr} stuff please",
    "do you have anything with {attr}",
    "i enjoy {attr} very much",
]

REC_TEMPLATES = [
    "you should watch {item} tonight",
    "try {item} then",
    "{item} is a great pick",
    "maybe {item} is good for you",
]


def attribute_alias(i: int) -> str:
    return f"kind k{i:03d}"

def item_alias(j: int) -> str:
    return f"movie m{j:03d}"


def build_graph(rng: random.Random) -> Tuple[List[Tuple[int, int, int]], Dict[int, int]]:
    """Random typed triples plus the attribute -> target-item rule table."""
    triples: List[Tuple[int, int, int]] = []
    neighbors: Dict[int, set] = {a: set() for a in range(N_ATTRIBUTES)}
    for _ in range(120):
        a = rng.randrange(N_ATTRIBUTES)
        b = rng.randrange(N_ATTRIBUTES)
        if a == b:
            continue
        triples.append((a, rng.randrange(N_RELATIONS), b))
        neighbors[a].add(b)
        neighbors[b].add(a)
    for j in range(N_ITEMS):
        item = N_ATTRIBUTES + j
        for a in rng.sample(range(N_ATTRIBUTES), rng.randint(3, 6)):
            triples.append((a, rng.randrange(N_RELATIONS), item))
            neighbors[a].add(item)
    for a in range(N_ATTRIBUTES):
        if not any(n >= N_ATTRIBUTES for n in neighbors[a]):
            item = N_ATTRIBUTES + rng.randrange(N_ITEMS)
            triples.append((a, rng.randrange(N_RELATIONS), item))
            neighbors[a].add(item)
    # Items carry the highest ids, so "max-id neighbor" is always an item.
    rule = {a: max(neighbors[a]) for a in range(N_ATTRIBUTES)}
    return triples, rule


def build_conversations(
    rng: random.Random, rule: Dict[int, int], n_conversations: int
) -> List[Dict]:
    conversations = []
    for c in range(n_conversations):
        turns = []
        for _ in range(rng.randint(4, 6)):
            attr = rng.randrange(MENTION_POOL)
            target = rule[attr]
            user_text = rng.choice(USER_TEMPLATES).format(attr=attribute_alias(attr))
            rec_text = rng.choice(REC_TEMPLATES).format(
                item=item_alias(target - N_ATTRIBUTES)
            )
            turns.append({"role": "user", "text": user_text, "items": []})
            turns.append({"role": "rec", "text": rec_text, "items": [target]})
        conversations.append({"id": f"toy-{c:03d}", "turns": turns})
    return conversations


def write_fixture(out_dir: str, seed: int = 13, n_conversations: int = 60) -> Dict[str, str]:
    """Write the five corpus files; returns their paths by canonical name."""
    rng = random.Random(seed)
    triples, rule = build_graph(rng)
    conversations = build_conversations(rng, rule, n_conversations)
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "kg.tsv": os.path.join(out_dir, "kg.tsv"),
        "entities.tsv": os.path.join(out_dir, "entities.tsv"),
        "word_vocab.txt": os.path.join(out_dir, "word_vocab.txt"),
        "word_edges.tsv": os.path.join(out_dir, "word_edges.tsv"),
        "conversations.jsonl": os.path.join(out_dir, "conversations.jsonl"),
    }
    with open(paths["kg.tsv"], "w", encoding="utf-8") as fh:
        for h, r, t in triples:
            fh.write(f"{h}\t{r}\t{t}\n")
    with open(paths["entities.tsv"], "w", encoding="utf-8") as fh:
        for a in range(N_ATTRIBUTES):
            fh.write(f"{a}\t0\t{attribute_alias(a)}\n")
        for j in range(N_ITEMS):
            fh.write(f"{N_ATTRIBUTES + j}\t1\t{item_alias(j)}\n")
    with open(paths["word_vocab.txt"], "w", encoding="utf-8") as fh:
        fh.write("\n".join(WORD_VOCAB) + "\n")
    with open(paths["word_edges.tsv"], "w", encoding="utf-8") as fh:
        written = set()
        while len(written) < 60:
            a, b = rng.sample(range(len(WORD_VOCAB)), 2)
            if (a, b) not in written and (b, a) not in written:
                written.add((a, b))
                fh.write(f"{WORD_VOCAB[a]}\t{WORD_VOCAB[b]}\n")
    with open(paths["conversations.jsonl"], "w", encoding="utf-8") as fh:
        for conv in conversations:
            fh.write(json.dumps(conv, sort_keys=True) + "\n")
    return paths


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="regenerate the bundled toy corpus")
    parser.add_argument("--out", default="fixtures/toy", help="output directory")
    parser.add_argument("--seed", type=int, default=13)
    parser.add_argument("--conversations", type=int, default=60)
    args = parser.parse_args(argv)
    paths = write_fixture(args.out, seed=args.seed, n_conversations=args.conversations)
    for name in sorted(paths):
        print(paths[name])
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
