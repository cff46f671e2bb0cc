"""Two-stage optimization (entity scorer first, then the generator) and the
evaluation harness that turns trained models into a metric report."""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .config import TrainConfig
from .data import (
    DialogSample,
    GeneratorSample,
    ReasonerSample,
    Vocabulary,
    build_generator_samples,
    build_reasoner_samples,
)
from .generator import GeneratorModel
from .kg import KnowledgeGraph, WordGraph
from .metrics import bleu_n, distinct_n, eval_by_rounds, perplexity, recall_at_k
from .reasoner import (
    ReasonerLossSample,
    ReasonerModel,
    next_entity_distribution,
    reasoning_loss,
)


class TrainingDivergedError(RuntimeError):
    """Loss left the reals; training state at failure is in the message."""


def seed_all(seed: int) -> None:
    """Single-threaded, fully seeded execution for reproducible runs."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.set_num_threads(1)


def grad_global_norm(parameters) -> float:
    total = 0.0
    for p in parameters:
        if p.grad is not None:
            total += float(p.grad.pow(2).sum())
    return math.sqrt(total)


def clip_gradients(parameters, max_norm: float, mode: str = "norm") -> float:
    """Clip in place; returns the pre-clip global norm."""
    params = [p for p in parameters if p.grad is not None]
    before = grad_global_norm(params)
    if mode == "norm":
        torch.nn.utils.clip_grad_norm_(params, max_norm)
    elif mode == "value":
        torch.nn.utils.clip_grad_value_(params, max_norm)
    else:
        raise ValueError(f"unknown clip mode {mode!r}")
    return before


@dataclass
class LossCurvePoint:
    epoch: int
    train_loss: float
    valid_loss: Optional[float] = None


def write_loss_curve(path: str, points: Sequence[LossCurvePoint]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,valid_loss\n")
        for p in points:
            valid = "" if p.valid_loss is None else f"{p.valid_loss:.10f}"
            fh.write(f"{p.epoch},{p.train_loss:.10f},{valid}\n")


def _batches(n: int, batch_size: int, shuffle: bool) -> List[List[int]]:
    order = list(range(n))
    if shuffle:
        random.shuffle(order)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _reasoner_batch_loss(
    model: ReasonerModel,
    batch: Sequence[ReasonerSample],
    config: TrainConfig,
    tables: Tuple[torch.Tensor, torch.Tensor],
) -> torch.Tensor:
    entity_table, word_table = tables
    scored = []
    for s in batch:
        out = model(
            s.tree,
            s.history_word_ids,
            s.current_entity_ids,
            s.current_word_ids,
            entity_table,
            word_table,
        )
        dist = next_entity_distribution(out.user_rep, entity_table)
        scored.append(ReasonerLossSample(distribution=dist, target=s.target, output=out))
    total = reasoning_loss(
        scored,
        lambda_iso=config.lambda_iso,
        lambda_align=config.lambda_align,
        lambda_current=config.lambda_current,
        literal_alignment=config.literal_alignment,
    )
    return total / len(batch)


def _mean_reasoner_loss(
    model: ReasonerModel, samples: Sequence[ReasonerSample], config: TrainConfig
) -> float:
    with torch.no_grad():
        tables = model.encode_graphs()
        losses = [
            float(_reasoner_batch_loss(model, chunk, config, tables))
            for chunk in _batches_of(samples, config.batch_size)
        ]
    return sum(losses) / len(losses)


def _batches_of(samples: Sequence, batch_size: int) -> List[Sequence]:
    return [samples[i : i + batch_size] for i in range(0, len(samples), batch_size)]


def train_reasoner(
    train_convs: Sequence[DialogSample],
    kg: KnowledgeGraph,
    wg: WordGraph,
    config: TrainConfig,
    valid_convs: Optional[Sequence[DialogSample]] = None,
    progress: Optional[Callable[[str], None]] = None,
) -> Tuple[ReasonerModel, List[LossCurvePoint]]:
    """Adam with tight global-norm clipping until the monitored loss stalls.

    The monitored loss is the validation loss when a validation split is
    given, the training loss otherwise; `convergence_patience` epochs
    without a new best stop the run.
    """
    seed_all(config.seed)
    samples = [s for conv in train_convs for s in build_reasoner_samples(conv)]
    if not samples:
        raise ValueError("training corpus yields no recommendation samples")
    valid_samples = (
        [s for conv in valid_convs for s in build_reasoner_samples(conv)] if valid_convs else []
    )
    model = ReasonerModel(
        kg,
        wg,
        dim=config.embed_dim,
        branch_len=config.branch_len,
        rgcn_layers=config.rgcn_layers,
        gcn_layers=config.gcn_layers,
        rgcn_nonlinearity=config.rgcn_nonlinearity,
    )
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    curve: List[LossCurvePoint] = []
    best = math.inf
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        epoch_losses: List[float] = []
        for batch_idx in _batches(len(samples), config.batch_size, shuffle=True):
            optimizer.zero_grad()
            tables = model.encode_graphs()
            loss = _reasoner_batch_loss(model, [samples[i] for i in batch_idx], config, tables)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"reasoner loss is {value} at epoch {epoch} after {len(curve)} epochs"
                )
            loss.backward()
            clip_gradients(model.parameters(), config.grad_clip_norm, config.clip_mode)
            optimizer.step()
            epoch_losses.append(value)
        train_loss = sum(epoch_losses) / len(epoch_losses)
        valid_loss = (
            _mean_reasoner_loss(model, valid_samples, config) if valid_samples else None
        )
        curve.append(LossCurvePoint(epoch=epoch, train_loss=train_loss, valid_loss=valid_loss))
        if progress:
            shown = f"epoch {epoch}: train {train_loss:.4f}"
            if valid_loss is not None:
                shown += f" valid {valid_loss:.4f}"
            progress(shown)
        monitored = valid_loss if valid_loss is not None else train_loss
        if monitored < best:
            best = monitored
            stale = 0
        else:
            stale += 1
            if stale >= config.convergence_patience:
                break
    return model, curve


def _generator_batch_loss(
    model: GeneratorModel,
    batch: Sequence[GeneratorSample],
    entity_table: torch.Tensor,
) -> torch.Tensor:
    pairs = []
    for s in batch:
        ctx = model.extract_context(s.tree, s.target_entity, s.history, entity_table)
        pairs.append((ctx, s.target_token_ids))
    return model.generation_loss(pairs)


def train_generator(
    train_convs: Sequence[DialogSample],
    reasoner: ReasonerModel,
    kg: KnowledgeGraph,
    vocab: Vocabulary,
    config: TrainConfig,
    valid_convs: Optional[Sequence[DialogSample]] = None,
    progress: Optional[Callable[[str], None]] = None,
) -> Tuple[GeneratorModel, List[LossCurvePoint]]:
    """Teacher-forced response training against a frozen entity scorer."""
    seed_all(config.seed)
    reasoner.eval()
    for p in reasoner.parameters():
        p.requires_grad_(False)
    with torch.no_grad():
        entity_table = reasoner.entity_encoder().detach()
    samples = [s for conv in train_convs for s in build_generator_samples(conv, kg, vocab)]
    if not samples:
        raise ValueError("training corpus yields no response samples")
    valid_samples = (
        [s for conv in valid_convs for s in build_generator_samples(conv, kg, vocab)]
        if valid_convs
        else []
    )
    model = GeneratorModel(
        vocab_size=len(vocab),
        dim=config.gen_dim,
        n_layers=config.gen_layers,
        n_heads=config.gen_heads,
        entity_dim=config.embed_dim,
        max_positions=config.max_positions,
    )
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    curve: List[LossCurvePoint] = []
    best = math.inf
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        epoch_losses: List[float] = []
        for batch_idx in _batches(len(samples), config.batch_size, shuffle=True):
            optimizer.zero_grad()
            loss = _generator_batch_loss(model, [samples[i] for i in batch_idx], entity_table)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"generator loss is {value} at epoch {epoch} after {len(curve)} epochs"
                )
            loss.backward()
            clip_gradients(model.parameters(), config.grad_clip_norm, config.clip_mode)
            optimizer.step()
            epoch_losses.append(value)
        train_loss = sum(epoch_losses) / len(epoch_losses)
        valid_loss = None
        if valid_samples:
            with torch.no_grad():
                chunks = _batches_of(valid_samples, config.batch_size)
                valid_loss = sum(
                    float(_generator_batch_loss(model, c, entity_table)) for c in chunks
                ) / len(chunks)
        curve.append(LossCurvePoint(epoch=epoch, train_loss=train_loss, valid_loss=valid_loss))
        if progress:
            shown = f"epoch {epoch}: train {train_loss:.4f}"
            if valid_loss is not None:
                shown += f" valid {valid_loss:.4f}"
            progress(shown)
        monitored = valid_loss if valid_loss is not None else train_loss
        if monitored < best:
            best = monitored
            stale = 0
        else:
            stale += 1
            if stale >= config.convergence_patience:
                break
    return model, curve


def rank_items(distribution: torch.Tensor, kg: KnowledgeGraph) -> List[int]:
    """Item ids sorted by probability, ties broken toward the lower id."""
    items = kg.item_ids()
    scores = distribution[torch.tensor(items, dtype=torch.long)]
    order = sorted(range(len(items)), key=lambda i: (-float(scores[i]), items[i]))
    return [items[i] for i in order]


def evaluate_reasoner(
    model: ReasonerModel,
    convs: Sequence[DialogSample],
    kg: KnowledgeGraph,
    ks: Sequence[int] = (1, 10, 50),
    round_edges: Sequence[int] = (5, 10),
) -> Dict:
    """Recall over item rankings, overall and split by conversation round."""
    samples = [s for conv in convs for s in build_reasoner_samples(conv)]
    rankings: List[List[int]] = []
    truths: List[int] = []
    rounds: List[int] = []
    model.eval()
    with torch.no_grad():
        entity_table, word_table = model.encode_graphs()
        for s in samples:
            out = model(
                s.tree,
                s.history_word_ids,
                s.current_entity_ids,
                s.current_word_ids,
                entity_table,
                word_table,
            )
            dist = next_entity_distribution(out.user_rep, entity_table)
            rankings.append(rank_items(dist, kg))
            truths.append(s.target)
            rounds.append(s.round_index)
    report = {
        "n_samples": len(samples),
        "recall": {str(k): recall_at_k(rankings, truths, k) for k in ks},
        "per_round": eval_by_rounds(list(zip(rounds, rankings, truths)), round_edges, k=50),
    }
    return report


def evaluate_generator(
    generator: GeneratorModel,
    reasoner: ReasonerModel,
    convs: Sequence[DialogSample],
    kg: KnowledgeGraph,
    vocab: Vocabulary,
    max_len: int = 30,
    dist_ns: Sequence[int] = (3, 4),
    bleu_ns: Sequence[int] = (2, 3),
    drop_entities: bool = False,
    drop_utterances: bool = False,
) -> Dict:
    """Diversity and overlap of greedy generations, plus perplexity.

    Hypotheses and references are compared in masked form (the placeholder
    token stays in place of item names) so the text metrics score the
    response template rather than the recommendation.
    """
    samples = [s for conv in convs for s in build_generator_samples(conv, kg, vocab)]
    generator.eval()
    reasoner.eval()
    hyps: List[List[str]] = []
    refs: List[List[str]] = []
    ppl_batch = []
    with torch.no_grad():
        entity_table = reasoner.entity_encoder().detach()
        for s in samples:
            ctx = generator.extract_context(
                s.tree,
                s.target_entity,
                s.history,
                entity_table,
                drop_entities=drop_entities,
                drop_utterances=drop_utterances,
            )
            hyps.append(generator.generate(ctx, vocab, kg=None, max_len=max_len))
            refs.append([vocab.id_to_token(i) for i in s.target_token_ids[:-1]])
            ppl_batch.append((ctx, s.target_token_ids))
        report = {
            "n_samples": len(samples),
            "dist": {str(n): distinct_n(hyps, n) for n in dist_ns},
            "bleu": {str(n): bleu_n(hyps, refs, n) for n in bleu_ns},
            "ppl": perplexity(generator, ppl_batch),
        }
    return report


def write_metrics_json(path: str, report: Dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_reasoner(path: str, model: ReasonerModel, config: TrainConfig) -> None:
    torch.save(
        {
            "kind": "reasoner",
            "meta": {
                "dim": model.dim,
                "branch_len": model.branch_len,
                "rgcn_layers": config.rgcn_layers,
                "gcn_layers": config.gcn_layers,
                "rgcn_nonlinearity": config.rgcn_nonlinearity,
            },
            "state": model.state_dict(),
        },
        path,
    )


def load_reasoner(path: str, kg: KnowledgeGraph, wg: WordGraph) -> ReasonerModel:
    blob = torch.load(path, weights_only=False)
    if blob.get("kind") != "reasoner":
        raise ValueError(f"{path} is not a reasoner checkpoint")
    meta = blob["meta"]
    model = ReasonerModel(
        kg,
        wg,
        dim=meta["dim"],
        branch_len=meta["branch_len"],
        rgcn_layers=meta["rgcn_layers"],
        gcn_layers=meta["gcn_layers"],
        rgcn_nonlinearity=meta["rgcn_nonlinearity"],
    )
    model.load_state_dict(blob["state"])
    model.eval()
    return model


def save_generator(path: str, model: GeneratorModel, config: TrainConfig) -> None:
    torch.save(
        {
            "kind": "generator",
            "meta": {
                "vocab_size": model.vocab_size,
                "dim": model.dim,
                "n_layers": len(model.decoder_layers),
                "n_heads": model.decoder_layers[0].self_attn.n_heads,
                "entity_dim": model.entity_projection.in_features,
                "max_positions": model.max_positions,
            },
            "state": model.state_dict(),
        },
        path,
    )


def load_generator(path: str) -> GeneratorModel:
    blob = torch.load(path, weights_only=False)
    if blob.get("kind") != "generator":
        raise ValueError(f"{path} is not a generator checkpoint")
    meta = blob["meta"]
    model = GeneratorModel(
        vocab_size=meta["vocab_size"],
        dim=meta["dim"],
        n_layers=meta["n_layers"],
        n_heads=meta["n_heads"],
        entity_dim=meta["entity_dim"],
        max_positions=meta["max_positions"],
    )
    model.load_state_dict(blob["state"])
    model.eval()
    return model
