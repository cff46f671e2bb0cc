"""Next-entity scoring from reasoning-branch and utterance representations.

Pipeline per dialogue state: embed every tree branch with position-enhanced
entity embeddings, pool each branch with a linear attention, gate the pooled
branches against the dialogue's word-level semantics, enhance with the
current turn, and score all entities by dot product. Two auxiliary losses
shape the representation space: an isolation loss keeping branch
representations dissimilar and an alignment loss pulling entity-side and
word-side views of the same dialogue together.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
from torch import nn

from .encoders import GcnEncoder, RgcnEncoder
from .kg import KnowledgeGraph, WordGraph
from .tree import ReasoningTree, truncate_pad

PROB_FLOOR = 1e-12


class EmptyInputError(ValueError):
    """An aggregation was asked to pool zero rows."""


class LinearAttention(nn.Module):
    """Additive scoring attention: weights = softmax(b . tanh(W x))."""

    def __init__(self, dim: int, attn_dim: Optional[int] = None):
        super().__init__()
        attn_dim = dim if attn_dim is None else attn_dim
        self.weight = nn.Parameter(torch.empty(attn_dim, dim))
        self.bias = nn.Parameter(torch.empty(attn_dim))
        nn.init.xavier_uniform_(self.weight)
        nn.init.uniform_(self.bias, -0.1, 0.1)

    def scores(self, rows: torch.Tensor) -> torch.Tensor:
        return torch.tanh(rows @ self.weight.T) @ self.bias

    def forward(self, rows: torch.Tensor) -> torch.Tensor:
        """Pool (m x d) rows into a single d vector."""
        if rows.dim() != 2 or rows.shape[0] == 0:
            raise EmptyInputError("linear attention needs at least one row")
        weights = torch.softmax(self.scores(rows), dim=0)
        return weights @ rows

    def pool(self, stacked: torch.Tensor) -> torch.Tensor:
        """Pool (n x m x d) into (n x d), attending along the middle axis."""
        if stacked.dim() != 3 or stacked.shape[0] == 0 or stacked.shape[1] == 0:
            raise EmptyInputError("pool needs a non-empty (n, m, d) tensor")
        weights = torch.softmax(self.scores(stacked), dim=1)
        return torch.einsum("nm,nmd->nd", weights, stacked)


class GateFusion(nn.Module):
    """Sigmoid-gated convex combination of two representations."""

    def __init__(self, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(1, 2 * dim))
        nn.init.xavier_uniform_(self.weight)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """Fuse x and y; x may be (n x d) with y a broadcast d vector."""
        if x.dim() == 2 and y.dim() == 1:
            y = y.unsqueeze(0).expand_as(x)
        gate = torch.sigmoid(torch.cat([x, y], dim=-1) @ self.weight.squeeze(0))
        gate = gate.unsqueeze(-1)
        return gate * x + (1.0 - gate) * y


@dataclass
class ReasonerOutput:
    """Intermediate representations of one dialogue state, kept for the losses."""

    branch_reps: torch.Tensor  # (n_branches x d) pooled branch representations
    fused_rep: torch.Tensor  # d, branches fused with dialogue semantics
    user_rep: torch.Tensor  # d, after current-turn enhancement; scores entities
    semantic_rep: torch.Tensor  # d, pooled history word tokens
    current_entity_rep: torch.Tensor  # d, pooled current-turn entities
    current_word_rep: torch.Tensor  # d, pooled current-turn word tokens


class ReasonerModel(nn.Module):
    """All learnable state of the next-entity scorer, encoders included."""

    def __init__(
        self,
        kg: KnowledgeGraph,
        wg: WordGraph,
        dim: int = 300,
        branch_len: int = 10,
        rgcn_layers: int = 1,
        gcn_layers: int = 1,
        rgcn_nonlinearity: str = "sigmoid",
    ):
        super().__init__()
        self.dim = dim
        self.branch_len = branch_len
        self.entity_encoder = RgcnEncoder(kg, dim, rgcn_layers, rgcn_nonlinearity)
        self.word_encoder = GcnEncoder(wg, dim, gcn_layers)
        self.position_embeddings = nn.Parameter(torch.empty(branch_len, dim).uniform_(-0.1, 0.1))
        self.branch_attention = LinearAttention(dim)
        self.semantic_attention = LinearAttention(dim)
        self.current_entity_attention = LinearAttention(dim)
        self.current_word_attention = LinearAttention(dim)
        self.semantic_gate = GateFusion(dim)
        self.turn_inner_gate = GateFusion(dim)
        self.turn_outer_gate = GateFusion(dim)

    def encode_graphs(self) -> Tuple[torch.Tensor, torch.Tensor]:
        """Entity and word embedding tables; compute once per optimizer step."""
        return self.entity_encoder(), self.word_encoder()

    def embed_branches(self, tree: ReasoningTree, entity_table: torch.Tensor) -> torch.Tensor:
        """Position-enhanced branch slots, (n_branches x branch_len x d).

        Pad slots carry the position embedding over a zero entity vector.
        """
        branches = tree.branches()
        if not branches:
            raise EmptyInputError("tree has no branches to embed")
        ids = torch.tensor(
            [truncate_pad(b, self.branch_len, -1) for b in branches], dtype=torch.long
        )
        mask = (ids >= 0).to(entity_table.dtype).unsqueeze(-1)
        ent = entity_table[ids.clamp(min=0)] * mask
        return ent + self.position_embeddings.unsqueeze(0).to(entity_table.dtype)

    def pool_branches(self, branch_slots: torch.Tensor) -> torch.Tensor:
        """(n_branches x branch_len x d) -> (n_branches x d)."""
        return self.branch_attention.pool(branch_slots)

    def fuse_semantics(self, branch_reps: torch.Tensor, semantic_rep: torch.Tensor) -> torch.Tensor:
        """Gate each branch against the dialogue semantics, then pool to one vector."""
        fused = self.semantic_gate(branch_reps, semantic_rep)
        return self.branch_attention(fused)

    def _pool_or_zero(
        self, attention: LinearAttention, table: torch.Tensor, ids: Sequence[int]
    ) -> torch.Tensor:
        # Empty mention sets contribute a zero vector so the gates stay defined.
        if len(ids) == 0:
            return torch.zeros(self.dim, dtype=table.dtype)
        return attention(table[torch.tensor(list(ids), dtype=torch.long)])

    def current_turn_enhance(
        self,
        fused_rep: torch.Tensor,
        current_entity_rows: torch.Tensor,
        current_word_rows: torch.Tensor,
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Blend the fused branch view with pooled current-turn mentions."""
        dtype = fused_rep.dtype
        if current_entity_rows.shape[0]:
            ent_rep = self.current_entity_attention(current_entity_rows)
        else:
            ent_rep = torch.zeros(self.dim, dtype=dtype)
        if current_word_rows.shape[0]:
            word_rep = self.current_word_attention(current_word_rows)
        else:
            word_rep = torch.zeros(self.dim, dtype=dtype)
        inner = self.turn_inner_gate(ent_rep, word_rep)
        user_rep = self.turn_outer_gate(fused_rep, inner)
        return user_rep, ent_rep, word_rep

    def forward(
        self,
        tree: ReasoningTree,
        history_word_ids: Sequence[int],
        current_entity_ids: Sequence[int],
        current_word_ids: Sequence[int],
        entity_table: Optional[torch.Tensor] = None,
        word_table: Optional[torch.Tensor] = None,
    ) -> ReasonerOutput:
        if entity_table is None:
            entity_table = self.entity_encoder()
        if word_table is None:
            word_table = self.word_encoder()
        dtype = entity_table.dtype

        if tree.mention_count > 0:
            branch_reps = self.pool_branches(self.embed_branches(tree, entity_table))
        else:
            # Root-only tree: one neutral branch row keeps the fusion defined.
            branch_reps = torch.zeros(1, self.dim, dtype=dtype)

        if len(history_word_ids) > 0:
            rows = word_table[torch.tensor(list(history_word_ids), dtype=torch.long)]
            semantic_rep = self.semantic_attention(rows)
        else:
            semantic_rep = torch.zeros(self.dim, dtype=dtype)

        fused_rep = self.fuse_semantics(branch_reps, semantic_rep)

        ent_rows = (
            entity_table[torch.tensor(list(current_entity_ids), dtype=torch.long)]
            if len(current_entity_ids)
            else torch.zeros(0, self.dim, dtype=dtype)
        )
        word_rows = (
            word_table[torch.tensor(list(current_word_ids), dtype=torch.long)]
            if len(current_word_ids)
            else torch.zeros(0, self.dim, dtype=dtype)
        )
        user_rep, ent_rep, word_rep = self.current_turn_enhance(fused_rep, ent_rows, word_rows)
        return ReasonerOutput(
            branch_reps=branch_reps,
            fused_rep=fused_rep,
            user_rep=user_rep,
            semantic_rep=semantic_rep,
            current_entity_rep=ent_rep,
            current_word_rep=word_rep,
        )


def next_entity_distribution(
    user_rep: torch.Tensor,
    entity_table: torch.Tensor,
    candidate_mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Softmax over entity dot-product scores; masked entries are exactly 0."""
    logits = entity_table @ user_rep
    if candidate_mask is not None:
        if candidate_mask.dtype != torch.bool or candidate_mask.shape != logits.shape:
            raise ValueError("candidate_mask must be a boolean vector over entities")
        if not bool(candidate_mask.any()):
            raise ValueError("candidate_mask excludes every entity")
        logits = logits.masked_fill(~candidate_mask, float("-inf"))
    return torch.softmax(logits, dim=0)


def select_and_connect(
    tree: ReasoningTree,
    distribution: torch.Tensor,
    kg: KnowledgeGraph,
    turn_index: int = 0,
) -> Tuple[int, int]:
    """Pick the most probable entity (lowest id on ties) and attach it."""
    probs = distribution.detach()
    best = int((probs == probs.max()).nonzero(as_tuple=False)[0])
    node_id = tree.connect(best, kg, turn_index=turn_index)
    return best, node_id


def cosine_similarity(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Cosine with the zero-vector convention: any zero-norm side gives 0."""
    nu = torch.linalg.vector_norm(u)
    nv = torch.linalg.vector_norm(v)
    if nu.item() == 0.0 or nv.item() == 0.0:
        return torch.zeros((), dtype=u.dtype)
    return (u @ v) / (nu * nv)


def isolation_loss(branch_reps: torch.Tensor) -> torch.Tensor:
    """Sum of pairwise cosine similarities over unordered branch pairs."""
    if branch_reps.dim() != 2 or branch_reps.shape[0] == 0:
        raise EmptyInputError("isolation loss needs at least one branch row")
    n = branch_reps.shape[0]
    total = torch.zeros((), dtype=branch_reps.dtype)
    for i in range(n):
        for j in range(i + 1, n):
            total = total + cosine_similarity(branch_reps[i], branch_reps[j])
    return total


def alignment_loss(
    current_entity_rep: torch.Tensor,
    current_word_rep: torch.Tensor,
    fused_rep: torch.Tensor,
    semantic_rep: torch.Tensor,
    lambda_current: float,
    literal_sign: bool = False,
) -> torch.Tensor:
    """Similarity objective tying entity-side and word-side representations.

    The default sign is negated so that *minimizing* the loss pulls the two
    views of the same dialogue together; ``literal_sign=True`` keeps the raw
    weighted similarity instead.
    """
    if not 0.0 <= lambda_current <= 1.0:
        raise ValueError("lambda_current must lie in [0, 1]")
    value = lambda_current * cosine_similarity(current_entity_rep, current_word_rep) + (
        1.0 - lambda_current
    ) * cosine_similarity(fused_rep, semantic_rep)
    return value if literal_sign else -value


@dataclass
class ReasonerLossSample:
    """One scored dialogue state with its ground-truth next entity."""

    distribution: torch.Tensor
    target: int
    output: ReasonerOutput


def reasoning_loss(
    batch: Sequence[ReasonerLossSample],
    lambda_iso: float,
    lambda_align: float,
    lambda_current: float = 0.9,
    literal_alignment: bool = False,
) -> torch.Tensor:
    """Cross-entropy on the target entity plus weighted auxiliary losses, summed."""
    if not batch:
        raise EmptyInputError("reasoning loss over an empty batch")
    total = torch.zeros((), dtype=batch[0].distribution.dtype)
    for sample in batch:
        prob = sample.distribution[sample.target]
        if prob.item() < PROB_FLOOR:
            warnings.warn(
                f"target entity {sample.target} has vanishing probability; clamping",
                RuntimeWarning,
            )
            prob = prob.clamp(min=PROB_FLOOR)
        total = total - torch.log(prob)
        if lambda_iso != 0.0:
            total = total + lambda_iso * isolation_loss(sample.output.branch_reps)
        if lambda_align != 0.0:
            total = total + lambda_align * alignment_loss(
                sample.output.current_entity_rep,
                sample.output.current_word_rep,
                sample.output.fused_rep,
                sample.output.semantic_rep,
                lambda_current,
                literal_sign=literal_alignment,
            )
    return total


def mean_pairwise_branch_cosine(branch_rep_sets: Sequence[torch.Tensor]) -> float:
    """Mean signed pairwise cosine across dialogue states with >= 2 branches."""
    values: List[float] = []
    for reps in branch_rep_sets:
        n = reps.shape[0]
        for i in range(n):
            for j in range(i + 1, n):
                values.append(float(cosine_similarity(reps[i], reps[j])))
    return sum(values) / len(values) if values else 0.0
