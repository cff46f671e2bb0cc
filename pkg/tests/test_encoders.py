import math
import random

import pytest
import torch

from helpers import make_kg, make_wg, random_kg
from trea.encoders import EncoderConfigError, GcnEncoder, RgcnEncoder, load_word_vectors


def scalar_rgcn(kg, base, rel_weights, self_weights, nonlinearity="sigmoid"):
    """Loop-by-loop reference for the relation-aware convolution."""
    h = [[float(v) for v in row] for row in base]
    dim = len(h[0])
    for layer in range(len(self_weights)):
        w_self = self_weights[layer]
        w_rel = rel_weights[layer]
        nxt = []
        for e in range(kg.n_entities):
            row = []
            for i in range(dim):
                acc = sum(float(w_self[i][j]) * h[e][j] for j in range(dim))
                for r, members in kg.neighbor_index[e].items():
                    z = kg.norm_constant[(e, r)]
                    for e2 in members:
                        acc += sum(float(w_rel[r][i][j]) * h[e2][j] for j in range(dim)) / z
                row.append(acc)
            nxt.append(
                [1.0 / (1.0 + math.exp(-v)) if nonlinearity == "sigmoid" else max(v, 0.0)
                 for v in row]
            )
        h = nxt
    return h


def test_rgcn_isolated_entities_with_zero_weights_give_half():
    kg = make_kg(3, [])
    enc = RgcnEncoder(kg, 4)
    with torch.no_grad():
        enc.self_weights[0].zero_()
    out = enc()
    assert torch.allclose(out, torch.full((3, 4), 0.5))


def test_rgcn_identity_self_weight_reduces_to_sigmoid():
    kg = make_kg(2, [])
    enc = RgcnEncoder(kg, 4)
    with torch.no_grad():
        enc.self_weights[0].copy_(torch.eye(4))
    assert torch.allclose(enc(), torch.sigmoid(enc.base_embeddings))


def test_rgcn_matches_scalar_reference():
    rng = random.Random(5)
    kg = random_kg(rng, 6, 2, 12)
    enc = RgcnEncoder(kg, 4)
    expected = torch.tensor(
        scalar_rgcn(
            kg,
            enc.base_embeddings.detach().tolist(),
            [enc.relation_weights[0].detach().tolist()],
            [enc.self_weights[0].detach().tolist()],
        ),
        dtype=torch.float32,
    )
    assert torch.allclose(enc(), expected, atol=1e-6)


def test_rgcn_two_layers_match_scalar_reference():
    rng = random.Random(7)
    kg = random_kg(rng, 5, 2, 10)
    enc = RgcnEncoder(kg, 3, n_layers=2)
    expected = torch.tensor(
        scalar_rgcn(
            kg,
            enc.base_embeddings.detach().tolist(),
            [w.detach().tolist() for w in enc.relation_weights],
            [w.detach().tolist() for w in enc.self_weights],
        ),
        dtype=torch.float32,
    )
    assert torch.allclose(enc(), expected, atol=1e-6)


def test_rgcn_sigmoid_output_range():
    rng = random.Random(9)
    kg = random_kg(rng, 8, 3, 20)
    out = RgcnEncoder(kg, 5)()
    assert (out > 0).all() and (out < 1).all()


def test_rgcn_relu_option():
    rng = random.Random(9)
    kg = random_kg(rng, 8, 3, 20)
    out = RgcnEncoder(kg, 5, nonlinearity="relu")()
    assert (out >= 0).all()


def test_rgcn_permutation_equivariance():
    fwd = [(0, 0, 1), (2, 1, 3), (4, 0, 5), (1, 1, 2)]
    perm = [3, 5, 0, 1, 4, 2]
    kg1 = make_kg(6, fwd, n_relations=2)
    kg2 = make_kg(6, [(perm[h], r, perm[t]) for h, r, t in fwd], n_relations=2)
    enc1 = RgcnEncoder(kg1, 4)
    enc2 = RgcnEncoder(kg2, 4)
    with torch.no_grad():
        enc2.relation_weights[0].copy_(enc1.relation_weights[0])
        enc2.self_weights[0].copy_(enc1.self_weights[0])
        for e in range(6):
            enc2.base_embeddings[perm[e]] = enc1.base_embeddings[e]
    out1, out2 = enc1(), enc2()
    for e in range(6):
        assert torch.allclose(out1[e], out2[perm[e]], atol=1e-6)


def test_rgcn_config_validation():
    kg = make_kg(2, [])
    with pytest.raises(EncoderConfigError):
        RgcnEncoder(kg, 4, n_layers=0)
    with pytest.raises(EncoderConfigError):
        RgcnEncoder(kg, 4, nonlinearity="tanh")


def scalar_gcn(wg, base, weights):
    """Dense normalized-adjacency reference for the word convolution."""
    n = wg.n_tokens
    dim = len(base[0])
    adj = [[1.0 if i == j else 0.0 for j in range(n)] for i in range(n)]
    for a, b in wg.edges:
        adj[a][b] = adj[b][a] = 1.0
    deg = [sum(row) for row in adj]
    norm = [
        [adj[i][j] / math.sqrt(deg[i] * deg[j]) for j in range(n)] for i in range(n)
    ]
    h = [[float(v) for v in row] for row in base]
    for w in weights:
        mixed = [
            [sum(norm[i][k] * h[k][j] for k in range(n)) for j in range(dim)]
            for i in range(n)
        ]
        h = [
            [max(sum(float(w[i][j]) * mixed[e][j] for j in range(dim)), 0.0)
             for i in range(dim)]
            for e in range(n)
        ]
    return h


def test_gcn_no_edges_identity_weight_is_relu_of_base():
    wg = make_wg(["a", "b", "c"])
    enc = GcnEncoder(wg, 4)
    with torch.no_grad():
        enc.layer_weights[0].copy_(torch.eye(4))
    assert torch.allclose(enc(), torch.relu(enc.base_embeddings))


def test_gcn_matches_scalar_reference():
    wg = make_wg(["a", "b", "c", "d"], [(0, 1), (1, 2), (0, 3)])
    enc = GcnEncoder(wg, 4)
    expected = torch.tensor(
        scalar_gcn(
            wg,
            enc.base_embeddings.detach().tolist(),
            [enc.layer_weights[0].detach().tolist()],
        ),
        dtype=torch.float32,
    )
    assert torch.allclose(enc(), expected, atol=1e-6)


def test_gcn_structural_twins_stay_equal():
    wg = make_wg(["a", "b", "c"], [(0, 2), (1, 2)])
    enc = GcnEncoder(wg, 4)
    with torch.no_grad():
        enc.base_embeddings[1] = enc.base_embeddings[0]
    out = enc()
    assert torch.allclose(out[0], out[1], atol=1e-7)


def test_gcn_layer_count_validation():
    with pytest.raises(EncoderConfigError):
        GcnEncoder(make_wg(["a"]), 4, n_layers=0)


def test_load_pretrained_shape_check():
    enc = GcnEncoder(make_wg(["a", "b"]), 4)
    with pytest.raises(EncoderConfigError):
        enc.load_pretrained(torch.zeros(3, 4))
    table = torch.arange(8, dtype=torch.float32).view(2, 4)
    enc.load_pretrained(table)
    assert torch.equal(enc.base_embeddings.detach(), table)


def test_load_word_vectors(tmp_path):
    wg = make_wg(["like", "fun"])
    path = tmp_path / "vectors.txt"
    path.write_text(
        "like 0.5 -0.25 0.125 1.0\n"
        "fun 1 2 3\n"  # wrong arity, ignored
        "unknown 1 1 1 1\n"  # not in vocab, ignored
    )
    table = load_word_vectors(str(path), wg, 4)
    assert torch.equal(table[0], torch.tensor([0.5, -0.25, 0.125, 1.0]))
    assert (table[1].abs() <= 0.1).all()  # untouched random row
