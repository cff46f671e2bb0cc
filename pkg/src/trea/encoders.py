"""Graph encoders producing entity and word-token embedding tables.

Entities are encoded with a relation-aware graph convolution: per layer,
each entity state is ``act(sum_r sum_{e' in N_e^r} (1/Z_{e,r}) W_r h_{e'}
+ W h_e)`` where the activation defaults to the logistic sigmoid. Word
tokens use a plain graph convolution with symmetric degree normalization,
self-loops and ReLU.

Both encoders are bound to an immutable graph at construction; the edge
structure is cached as index tensors and aggregation uses ``index_add``.
"""

from __future__ import annotations

from typing import List, Optional

import torch
from torch import nn

from .kg import KnowledgeGraph, WordGraph


class EncoderConfigError(ValueError):
    """Inconsistent encoder configuration (shape mismatch etc.)."""


def _init_base_embeddings(count: int, dim: int) -> nn.Parameter:
    # Base node features start uniform in [-0.1, 0.1].
    return nn.Parameter(torch.empty(count, dim).uniform_(-0.1, 0.1))


class RgcnEncoder(nn.Module):
    """Relation-aware graph convolution over a knowledge graph.

    Reverse edges propagate under their own relation ids (forward id plus
    the base relation count), so both directions of each triple carry
    messages.
    """

    def __init__(
        self,
        kg: KnowledgeGraph,
        dim: int,
        n_layers: int = 1,
        nonlinearity: str = "sigmoid",
    ):
        super().__init__()
        if n_layers < 1:
            raise EncoderConfigError("layer count must be >= 1")
        if nonlinearity not in ("sigmoid", "relu"):
            raise EncoderConfigError(f"unknown nonlinearity {nonlinearity!r}")
        self.n_entities = kg.n_entities
        self.n_relations = kg.n_relations_with_reverse
        self.dim = dim
        self.n_layers = n_layers
        self.nonlinearity = nonlinearity

        self.base_embeddings = _init_base_embeddings(kg.n_entities, dim)
        self.relation_weights = nn.ParameterList()
        self.self_weights = nn.ParameterList()
        for _ in range(n_layers):
            w_rel = nn.Parameter(torch.empty(self.n_relations, dim, dim))
            nn.init.xavier_uniform_(w_rel)
            self.relation_weights.append(w_rel)
            w_self = nn.Parameter(torch.empty(dim, dim))
            nn.init.xavier_uniform_(w_self)
            self.self_weights.append(w_self)

        dst: List[int] = []
        src: List[int] = []
        rel: List[int] = []
        coef: List[float] = []
        for e in range(kg.n_entities):
            for r, members in kg.neighbor_index[e].items():
                z = kg.norm_constant[(e, r)]
                for e2 in sorted(members):
                    dst.append(e)
                    src.append(e2)
                    rel.append(r)
                    coef.append(1.0 / z)
        self.register_buffer("_edge_dst", torch.tensor(dst, dtype=torch.long))
        self.register_buffer("_edge_src", torch.tensor(src, dtype=torch.long))
        self.register_buffer("_edge_rel", torch.tensor(rel, dtype=torch.long))
        self.register_buffer("_edge_coef", torch.tensor(coef, dtype=torch.float32))

    def forward(self) -> torch.Tensor:
        """Return the final-layer entity embedding table (n_entities x dim)."""
        h = self.base_embeddings
        coef = self._edge_coef.to(h.dtype)
        for layer in range(self.n_layers):
            pre = h @ self.self_weights[layer].T
            if self._edge_dst.numel():
                w = self.relation_weights[layer][self._edge_rel]  # (E, d, d)
                msg = torch.bmm(w, h[self._edge_src].unsqueeze(-1)).squeeze(-1)
                msg = msg * coef.unsqueeze(-1)
                pre = pre.index_add(0, self._edge_dst, msg)
            h = torch.sigmoid(pre) if self.nonlinearity == "sigmoid" else torch.relu(pre)
        return h


class GcnEncoder(nn.Module):
    """Symmetric-normalized graph convolution over the word graph."""

    def __init__(self, wg: WordGraph, dim: int, n_layers: int = 1):
        super().__init__()
        if n_layers < 1:
            raise EncoderConfigError("layer count must be >= 1")
        self.n_tokens = wg.n_tokens
        self.dim = dim
        self.n_layers = n_layers

        self.base_embeddings = _init_base_embeddings(wg.n_tokens, dim)
        self.layer_weights = nn.ParameterList()
        for _ in range(n_layers):
            w = nn.Parameter(torch.empty(dim, dim))
            nn.init.xavier_uniform_(w)
            self.layer_weights.append(w)

        degree = [1.0] * wg.n_tokens  # self-loop included
        for a, b in wg.edges:
            degree[a] += 1.0
            degree[b] += 1.0
        dst: List[int] = []
        src: List[int] = []
        coef: List[float] = []
        for t in range(wg.n_tokens):
            dst.append(t)
            src.append(t)
            coef.append(1.0 / degree[t])
        for a, b in sorted(wg.edges):
            norm = 1.0 / (degree[a] ** 0.5 * degree[b] ** 0.5)
            dst.extend((a, b))
            src.extend((b, a))
            coef.extend((norm, norm))
        self.register_buffer("_edge_dst", torch.tensor(dst, dtype=torch.long))
        self.register_buffer("_edge_src", torch.tensor(src, dtype=torch.long))
        self.register_buffer("_edge_coef", torch.tensor(coef, dtype=torch.float32))

    def load_pretrained(self, vectors: torch.Tensor) -> None:
        if vectors.shape != self.base_embeddings.shape:
            raise EncoderConfigError(
                f"pretrained vectors shape {tuple(vectors.shape)} != "
                f"{tuple(self.base_embeddings.shape)}"
            )
        with torch.no_grad():
            self.base_embeddings.copy_(vectors)

    def forward(self) -> torch.Tensor:
        """Return the final-layer token embedding table (n_tokens x dim)."""
        h = self.base_embeddings
        coef = self._edge_coef.to(h.dtype)
        for layer in range(self.n_layers):
            msg = h[self._edge_src] * coef.unsqueeze(-1)
            agg = torch.zeros_like(h).index_add(0, self._edge_dst, msg)
            h = torch.relu(agg @ self.layer_weights[layer].T)
        return h


def load_word_vectors(path: str, wg: WordGraph, dim: int) -> torch.Tensor:
    """Read ``token v1 ... vd`` lines into a (n_tokens x dim) tensor.

    Tokens absent from the file keep uniform random rows so the table is
    always fully populated.
    """
    table = torch.empty(wg.n_tokens, dim).uniform_(-0.1, 0.1)
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if len(parts) != dim + 1:
                continue
            idx = wg.token_ids.get(parts[0].lower())
            if idx is None:
                continue
            table[idx] = torch.tensor([float(v) for v in parts[1:]])
    return table
