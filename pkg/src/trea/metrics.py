"""Automatic evaluation metrics: recall, diversity, n-gram overlap, perplexity.

All metrics are corpus-level. BLEU uses whitespace-style token lists with
uniform weights over orders 1..n and no smoothing; any zero precision gives
a zero score, so tiny corpora can legitimately score 0.
"""

from __future__ import annotations

import math
from collections import Counter
from typing import Dict, List, Sequence, Tuple

import torch

PROB_FLOOR = 1e-12


def _ngrams(tokens: Sequence[str], n: int) -> List[Tuple[str, ...]]:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def recall_at_k(rankings: Sequence[Sequence[int]], truths: Sequence[int], k: int) -> float:
    """Fraction of samples whose true item appears in the top k of its ranking."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(rankings) != len(truths):
        raise ValueError("rankings and truths differ in length")
    if not rankings:
        return 0.0
    hits = sum(1 for ranked, truth in zip(rankings, truths) if truth in list(ranked)[:k])
    return hits / len(rankings)


def distinct_n(corpus: Sequence[Sequence[str]], n: int) -> float:
    """Distinct n-grams over total n-gram occurrences across the corpus."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seen = set()
    total = 0
    for tokens in corpus:
        grams = _ngrams(tokens, n)
        total += len(grams)
        seen.update(grams)
    return len(seen) / total if total else 0.0


def bleu_n(
    hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]], n: int
) -> float:
    """Corpus-level clipped n-gram precision with a brevity penalty.

    One reference per hypothesis; weights are uniform over orders 1..n.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in length")
    if not hypotheses:
        return 0.0
    log_precisions = []
    for order in range(1, n + 1):
        matched = 0
        total = 0
        for hyp, ref in zip(hypotheses, references):
            hyp_counts = Counter(_ngrams(hyp, order))
            ref_counts = Counter(_ngrams(ref, order))
            total += sum(hyp_counts.values())
            matched += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
        if total == 0 or matched == 0:
            return 0.0
        log_precisions.append(math.log(matched / total))
    hyp_len = sum(len(h) for h in hypotheses)
    ref_len = sum(len(r) for r in references)
    if hyp_len == 0:
        return 0.0
    brevity = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return brevity * math.exp(sum(log_precisions) / n)


def perplexity(model, batch) -> float:
    """exp of the mean per-token negative log-likelihood over all tokens.

    ``batch`` holds (context, target token ids) pairs; ``model`` needs
    ``decode_logits`` and a ``bos_id``, matching the generator.
    """
    total_nll = 0.0
    total_tokens = 0
    with torch.no_grad():
        for ctx, target_ids in batch:
            if len(target_ids) == 0:
                continue
            full = [model.bos_id] + list(target_ids)
            logits = model.decode_logits(full[:-1], ctx)
            probs = torch.softmax(logits, dim=-1)
            picked = probs[torch.arange(len(target_ids)), torch.tensor(list(target_ids))]
            total_nll += float(-torch.log(picked.clamp(min=PROB_FLOOR)).sum())
            total_tokens += len(target_ids)
    if total_tokens == 0:
        raise ValueError("perplexity over zero tokens")
    return math.exp(total_nll / total_tokens)


def round_bucket_labels(edges: Sequence[int]) -> List[str]:
    """Human-readable labels for buckets [1,e1], (e1,e2], ..., (ek, inf)."""
    _check_edges(edges)
    labels = []
    lo = 1
    for edge in edges:
        labels.append(f"{lo}-{edge}" if lo != edge else f"{edge}")
        lo = edge + 1
    labels.append(f">{edges[-1]}")
    return labels


def bucket_for_round(round_index: int, edges: Sequence[int]) -> str:
    """The unique bucket label containing the given 1-based round."""
    _check_edges(edges)
    if round_index < 1:
        raise ValueError("round indices are 1-based")
    labels = round_bucket_labels(edges)
    for label, edge in zip(labels, edges):
        if round_index <= edge:
            return label
    return labels[-1]


def _check_edges(edges: Sequence[int]) -> None:
    if not edges:
        raise ValueError("need at least one bucket edge")
    if any(e < 1 for e in edges) or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("edges must be positive and strictly increasing")


def eval_by_rounds(
    samples: Sequence[Tuple[int, Sequence[int], int]],
    edges: Sequence[int],
    k: int = 50,
) -> Dict[str, float]:
    """Recall@k per conversation-round bucket.

    ``samples`` holds (round_index, ranked item ids, truth) triples. Every
    sample lands in exactly one bucket; empty buckets report 0.0.
    """
    labels = round_bucket_labels(edges)
    grouped: Dict[str, List[Tuple[Sequence[int], int]]] = {label: [] for label in labels}
    for round_index, ranking, truth in samples:
        grouped[bucket_for_round(round_index, edges)].append((ranking, truth))
    out: Dict[str, float] = {}
    for label in labels:
        pairs = grouped[label]
        if pairs:
            out[label] = recall_at_k([p[0] for p in pairs], [p[1] for p in pairs], k)
        else:
            out[label] = 0.0
    return out
