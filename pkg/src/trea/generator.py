"""Response generation conditioned on reasoning branches and past utterances.

The decoder is a small transformer variant: each layer runs causal
self-attention, then cross-attention over the entities extracted from the
reasoning tree, then cross-attention over encoded historical utterances,
then a feed-forward block, all as pre-normalization residual sub-layers.
On top of the decoder states sits a copy path that pools the entity rows
with a linear attention and contributes an extra vocabulary logit term.

Target responses are trained with item mentions replaced by a placeholder
token; at inference the placeholder is filled with the recommended item's
surface form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Set, Tuple

import torch
from torch import nn

from .kg import KnowledgeGraph
from .reasoner import LinearAttention
from .tree import ReasoningTree

ITEM_TOKEN = "__item__"
PROB_FLOOR = 1e-12


class GeneratorContractError(ValueError):
    """A decode call violated an input contract (empty prefix, empty context)."""


@dataclass
class ContextTurn:
    """One historical utterance as the generator sees it."""

    role_token_id: int
    token_ids: Sequence[int]
    entity_ids: Set[int] = field(default_factory=set)


@dataclass
class GenerationContext:
    """Conditioning tensors for one response."""

    entity_rows: torch.Tensor  # (n_e x d_g) projected entity embeddings
    utterance_rows: torch.Tensor  # (m x d_g) encoded history tokens
    slot_filler: Optional[int] = None  # entity filling emitted placeholder tokens


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over unbatched (rows x dim) tensors."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads != 0:
            raise ValueError(f"dim {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(
        self,
        query_rows: torch.Tensor,
        key_rows: torch.Tensor,
        mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        lq, lk = query_rows.shape[0], key_rows.shape[0]
        q = self.q_proj(query_rows).view(lq, self.n_heads, self.head_dim).transpose(0, 1)
        k = self.k_proj(key_rows).view(lk, self.n_heads, self.head_dim).transpose(0, 1)
        v = self.v_proj(key_rows).view(lk, self.n_heads, self.head_dim).transpose(0, 1)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if mask is not None:
            scores = scores.masked_fill(~mask.unsqueeze(0), float("-inf"))
        attended = torch.softmax(scores, dim=-1) @ v
        merged = attended.transpose(0, 1).reshape(lq, self.n_heads * self.head_dim)
        return self.out_proj(merged)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.inner = nn.Linear(dim, hidden)
        self.outer = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.outer(torch.relu(self.inner(x)))


class EncoderLayer(nn.Module):
    def __init__(self, dim: int, n_heads: int, ffn_dim: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, n_heads)
        self.ffn = FeedForward(dim, ffn_dim)
        self.norm_attn = nn.LayerNorm(dim)
        self.norm_ffn = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm_attn(x)
        x = x + self.self_attn(h, h)
        x = x + self.ffn(self.norm_ffn(x))
        return x


class DecoderLayer(nn.Module):
    """Self-attention, then entity and utterance cross-attention, then FFN."""

    def __init__(self, dim: int, n_heads: int, ffn_dim: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, n_heads)
        self.entity_attn = MultiHeadAttention(dim, n_heads)
        self.utterance_attn = MultiHeadAttention(dim, n_heads)
        self.ffn = FeedForward(dim, ffn_dim)
        self.norm_self = nn.LayerNorm(dim)
        self.norm_entity = nn.LayerNorm(dim)
        self.norm_utterance = nn.LayerNorm(dim)
        self.norm_ffn = nn.LayerNorm(dim)

    def forward(
        self,
        x: torch.Tensor,
        entity_rows: torch.Tensor,
        utterance_rows: torch.Tensor,
        causal_mask: torch.Tensor,
    ) -> torch.Tensor:
        h = self.norm_self(x)
        x = x + self.self_attn(h, h, causal_mask)
        x = x + self.entity_attn(self.norm_entity(x), entity_rows)
        x = x + self.utterance_attn(self.norm_utterance(x), utterance_rows)
        x = x + self.ffn(self.norm_ffn(x))
        return x


def _causal_mask(length: int) -> torch.Tensor:
    return torch.tril(torch.ones(length, length, dtype=torch.bool))


class GeneratorModel(nn.Module):
    """Decoder stack, utterance encoder, copy path, and the entity bridge."""

    def __init__(
        self,
        vocab_size: int,
        dim: int = 128,
        n_layers: int = 2,
        n_heads: int = 2,
        ffn_dim: Optional[int] = None,
        entity_dim: int = 300,
        max_positions: int = 256,
        pad_id: int = 0,
        bos_id: int = 1,
        eos_id: int = 2,
        unk_id: int = 3,
        item_id: int = 4,
    ):
        super().__init__()
        ffn_dim = 4 * dim if ffn_dim is None else ffn_dim
        self.vocab_size = vocab_size
        self.dim = dim
        self.max_positions = max_positions
        self.pad_id = pad_id
        self.bos_id = bos_id
        self.eos_id = eos_id
        self.unk_id = unk_id
        self.item_id = item_id

        self.vocab_embeddings = nn.Parameter(torch.empty(vocab_size, dim).uniform_(-0.1, 0.1))
        self.encoder_positions = nn.Parameter(torch.empty(max_positions, dim).uniform_(-0.1, 0.1))
        self.decoder_positions = nn.Parameter(torch.empty(max_positions, dim).uniform_(-0.1, 0.1))
        self.encoder_layers = nn.ModuleList(
            EncoderLayer(dim, n_heads, ffn_dim) for _ in range(n_layers)
        )
        self.encoder_norm = nn.LayerNorm(dim)
        self.decoder_layers = nn.ModuleList(
            DecoderLayer(dim, n_heads, ffn_dim) for _ in range(n_layers)
        )
        self.decoder_norm = nn.LayerNorm(dim)
        self.entity_projection = nn.Linear(entity_dim, dim, bias=False)
        self.copy_attention = LinearAttention(dim)
        self.copy_ffn = nn.Sequential(nn.Linear(2 * dim, dim), nn.ReLU(), nn.Linear(dim, dim))
        self.copy_projection = nn.Linear(dim, vocab_size, bias=False)

    def _clamp_ids(self, token_ids: Sequence[int]) -> List[int]:
        return [t if 0 <= t < self.vocab_size else self.unk_id for t in token_ids]

    def encode_utterances(self, token_ids: Sequence[int]) -> torch.Tensor:
        """Self-attention encoding of history tokens behind a begin marker.

        Sequences longer than the position table keep their most recent
        tokens. Empty input yields the single begin-of-context row.
        """
        ids = self._clamp_ids(token_ids)
        if len(ids) > self.max_positions - 1:
            ids = ids[-(self.max_positions - 1) :]
        ids = [self.bos_id] + ids
        idx = torch.tensor(ids, dtype=torch.long)
        x = self.vocab_embeddings[idx] + self.encoder_positions[: len(ids)]
        for layer in self.encoder_layers:
            x = layer(x)
        return self.encoder_norm(x)

    def project_entities(self, raw_rows: torch.Tensor) -> torch.Tensor:
        return self.entity_projection(raw_rows)

    def extract_context(
        self,
        tree: ReasoningTree,
        new_entity: int,
        history: Sequence[ContextTurn],
        entity_table: torch.Tensor,
        drop_entities: bool = False,
        drop_utterances: bool = False,
    ) -> GenerationContext:
        """Collect the entities around the new mention and the turns citing them.

        The entity set is the union over branches that contain the new
        entity; qualifying utterances mention at least one of those entities
        and are concatenated chronologically, each behind its role token.
        The drop flags substitute a single zero row, for pipeline ablations.
        """
        branches = tree.branches_containing(new_entity)
        if not branches:
            raise ValueError(f"entity {new_entity} is not connected to the tree")
        entity_ids = sorted({e for b in branches for e in b.entities})

        if drop_entities:
            entity_rows = torch.zeros(1, self.dim, dtype=entity_table.dtype)
        else:
            raw = entity_table[torch.tensor(entity_ids, dtype=torch.long)]
            entity_rows = self.project_entities(raw)

        if drop_utterances:
            utterance_rows = torch.zeros(1, self.dim, dtype=entity_table.dtype)
        else:
            wanted = set(entity_ids)
            flat: List[int] = []
            for turn in history:
                if wanted & set(turn.entity_ids):
                    flat.append(turn.role_token_id)
                    flat.extend(turn.token_ids)
            utterance_rows = self.encode_utterances(flat)

        return GenerationContext(
            entity_rows=entity_rows, utterance_rows=utterance_rows, slot_filler=new_entity
        )

    def decode_states(self, prefix_ids: Sequence[int], ctx: GenerationContext) -> torch.Tensor:
        """Final decoder states R for the whole prefix, (len x d_g)."""
        if len(prefix_ids) == 0:
            raise GeneratorContractError("decode prefix is empty")
        if prefix_ids[0] != self.bos_id:
            raise GeneratorContractError("decode prefix must start with the begin token")
        if len(prefix_ids) > self.max_positions:
            raise GeneratorContractError(
                f"prefix length {len(prefix_ids)} exceeds position table {self.max_positions}"
            )
        if ctx.entity_rows.dim() != 2 or ctx.entity_rows.shape[0] == 0:
            raise GeneratorContractError("context has no entity rows")
        if ctx.utterance_rows.dim() != 2 or ctx.utterance_rows.shape[0] == 0:
            raise GeneratorContractError("context has no utterance rows")
        idx = torch.tensor(self._clamp_ids(prefix_ids), dtype=torch.long)
        x = self.vocab_embeddings[idx] + self.decoder_positions[: len(prefix_ids)]
        mask = _causal_mask(len(prefix_ids))
        for layer in self.decoder_layers:
            x = layer(x, ctx.entity_rows, ctx.utterance_rows, mask)
        return self.decoder_norm(x)

    def decode_logits(self, prefix_ids: Sequence[int], ctx: GenerationContext) -> torch.Tensor:
        """Vocabulary logits at every prefix position, (len x vocab).

        The copy path pools the entity rows once, broadcasts the summary to
        all positions, and adds its own projection to the decoder logits.
        """
        states = self.decode_states(prefix_ids, ctx)
        pooled = self.copy_attention(ctx.entity_rows)
        copy_states = self.copy_ffn(
            torch.cat([pooled.unsqueeze(0).expand_as(states), states], dim=-1)
        )
        return states @ self.vocab_embeddings.T + self.copy_projection(copy_states)

    def decode_step(self, prefix_ids: Sequence[int], ctx: GenerationContext) -> torch.Tensor:
        """Next-token distribution after the prefix."""
        return torch.softmax(self.decode_logits(prefix_ids, ctx)[-1], dim=0)

    def generation_loss(
        self, batch: Sequence[Tuple[GenerationContext, Sequence[int]]]
    ) -> torch.Tensor:
        """Teacher-forced cross-entropy, per-token within each response,
        averaged over responses."""
        if not batch:
            raise ValueError("generation loss over an empty batch")
        dtype = self.vocab_embeddings.dtype
        total = torch.zeros((), dtype=dtype)
        for ctx, target_ids in batch:
            if len(target_ids) == 0:
                raise ValueError("empty target response")
            full = [self.bos_id] + list(target_ids)
            logits = self.decode_logits(full[:-1], ctx)
            probs = torch.softmax(logits, dim=-1)
            picked = probs[torch.arange(len(target_ids)), torch.tensor(list(target_ids))]
            total = total - torch.log(picked.clamp(min=PROB_FLOOR)).mean()
        return total / len(batch)

    def generate(
        self,
        ctx: GenerationContext,
        vocab,
        kg: Optional[KnowledgeGraph] = None,
        max_len: int = 30,
        mode: str = "greedy",
        beam_width: int = 3,
    ) -> List[str]:
        """Decode a response; placeholder item tokens take the filler's name.

        ``vocab`` only needs an ``id_to_token(i)`` method. ``mode`` is
        "greedy" or "beam"; beam search compares summed log-probabilities,
        so beam_width=1 reproduces greedy decoding.
        """
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        max_len = min(max_len, self.max_positions - 1)
        if mode == "greedy":
            ids = self._greedy_ids(ctx, max_len)
        elif mode == "beam":
            ids = self._beam_ids(ctx, max_len, beam_width)
        else:
            raise ValueError(f"unknown decode mode {mode!r}")
        tokens: List[str] = []
        for t in ids:
            if t == self.eos_id:
                break
            token = vocab.id_to_token(t)
            if t == self.item_id and ctx.slot_filler is not None and kg is not None:
                token = kg.surface_form(ctx.slot_filler)
            tokens.append(token)
        return tokens

    def _greedy_ids(self, ctx: GenerationContext, max_len: int) -> List[int]:
        prefix = [self.bos_id]
        out: List[int] = []
        for _ in range(max_len):
            dist = self.decode_step(prefix, ctx)
            nxt = int((dist == dist.max()).nonzero(as_tuple=False)[0])
            out.append(nxt)
            if nxt == self.eos_id:
                break
            prefix.append(nxt)
        return out

    def _beam_ids(self, ctx: GenerationContext, max_len: int, beam_width: int) -> List[int]:
        if beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        # (score, emitted ids, finished)
        beams: List[Tuple[float, List[int], bool]] = [(0.0, [], False)]
        for _ in range(max_len):
            candidates: List[Tuple[float, List[int], bool]] = []
            for score, ids, finished in beams:
                if finished:
                    candidates.append((score, ids, True))
                    continue
                dist = self.decode_step([self.bos_id] + ids, ctx)
                logp = torch.log(dist.clamp(min=PROB_FLOOR))
                top = torch.topk(logp, min(beam_width, self.vocab_size))
                for val, tok in zip(top.values.tolist(), top.indices.tolist()):
                    candidates.append((score + val, ids + [tok], tok == self.eos_id))
            # Stable order: score desc, then token sequence for ties.
            candidates.sort(key=lambda c: (-c[0], c[1]))
            beams = candidates[:beam_width]
            if all(b[2] for b in beams):
                break
        return beams[0][1]


def mask_items(tokens: Sequence[str], kg: KnowledgeGraph) -> Tuple[List[str], List[int]]:
    """Replace item mentions with the placeholder token, recording positions.

    The scan mirrors the entity linker: leftmost match, longest alias wins.
    Non-item entity mentions pass through untouched. Positions index the
    returned (masked) token list.
    """
    out: List[str] = []
    slots: List[int] = []
    i = 0
    n = len(tokens)
    lowered = [t.lower() for t in tokens]
    while i < n:
        hit = None
        for length in range(min(kg.max_alias_tokens, n - i), 0, -1):
            eid = kg.alias_span_entity(tuple(lowered[i : i + length]))
            if eid is not None:
                hit = (eid, length)
                break
        if hit is None:
            out.append(tokens[i])
            i += 1
        elif kg.is_item(hit[0]):
            slots.append(len(out))
            out.append(ITEM_TOKEN)
            i += hit[1]
        else:
            out.extend(tokens[i : i + hit[1]])
            i += hit[1]
    return out, slots
