import pytest
import torch

from helpers import make_kg
from trea.generator import (
    ITEM_TOKEN,
    ContextTurn,
    GenerationContext,
    GeneratorContractError,
    GeneratorModel,
    MultiHeadAttention,
    mask_items,
)
from trea.tree import init_tree

TOKENS = [
    "__pad__", "__bos__", "__eos__", "__unk__", "__item__", "__user__", "__rec__",
    "alpha", "beta", "gamma", "delta", "eps",
]


class StubVocab:
    def id_to_token(self, i):
        return TOKENS[i]


def tiny_generator():
    torch.manual_seed(2)
    return GeneratorModel(
        vocab_size=len(TOKENS), dim=8, n_layers=2, n_heads=2, entity_dim=6,
        max_positions=16,
    )


def make_ctx(model, n_entities=3, filler=None):
    torch.manual_seed(3)
    return GenerationContext(
        entity_rows=torch.randn(n_entities, model.dim),
        utterance_rows=model.encode_utterances([7, 8, 9]).detach(),
        slot_filler=filler,
    )


MASK_KG = make_kg(
    4,
    [],
    items=[0, 1],
    aliases=[["movie one"], ["star wars", "wars"], ["star"], ["dark"]],
)


def test_mask_items_replaces_item_spans():
    tokens = "i liked Movie One and dark stuff".split()
    masked, slots = mask_items(tokens, MASK_KG)
    assert masked == ["i", "liked", ITEM_TOKEN, "and", "dark", "stuff"]
    assert slots == [2]


def test_mask_items_two_slots_left_to_right():
    tokens = "movie one beats wars today".split()
    masked, slots = mask_items(tokens, MASK_KG)
    assert masked == [ITEM_TOKEN, "beats", ITEM_TOKEN, "today"]
    assert slots == [0, 2]


def test_mask_items_longest_alias_wins():
    masked, slots = mask_items(["star", "wars"], MASK_KG)
    assert masked == [ITEM_TOKEN]  # "star wars" (item 1), not "star" (entity 2)
    assert slots == [0]


def test_mask_items_ignores_non_item_mentions():
    tokens = "star and dark things".split()
    masked, slots = mask_items(tokens, MASK_KG)
    assert masked == tokens
    assert slots == []


def test_mask_items_no_matches_pass_through():
    tokens = "nothing to see here".split()
    assert mask_items(tokens, MASK_KG) == (tokens, [])


def test_multi_head_attention_validates_dims():
    with pytest.raises(ValueError):
        MultiHeadAttention(10, 3)


def test_encode_utterances_adds_begin_row():
    model = tiny_generator()
    assert model.encode_utterances([7, 8, 9]).shape == (4, 8)
    assert model.encode_utterances([]).shape == (1, 8)


def test_encode_utterances_clamps_oov_to_unk():
    model = tiny_generator()
    a = model.encode_utterances([50, 7])
    b = model.encode_utterances([model.unk_id, 7])
    assert torch.allclose(a, b, atol=1e-7)


def test_encode_utterances_keeps_most_recent_tokens():
    model = tiny_generator()
    long_ids = [7, 8, 9, 10, 11] * 5  # 25 tokens > 15 slots
    a = model.encode_utterances(long_ids)
    b = model.encode_utterances(long_ids[-(model.max_positions - 1):])
    assert a.shape == (model.max_positions, 8)
    assert torch.allclose(a, b, atol=1e-7)


def test_decode_step_is_a_distribution():
    model = tiny_generator()
    ctx = make_ctx(model)
    dist = model.decode_step([model.bos_id, 7], ctx).detach()
    assert dist.shape == (len(TOKENS),)
    assert float(dist.sum()) == pytest.approx(1.0, abs=1e-5)
    assert (dist >= 0).all()


def test_zero_copy_path_reduces_to_vocab_softmax():
    model = tiny_generator()
    ctx = make_ctx(model)
    with torch.no_grad():
        model.copy_projection.weight.zero_()
    prefix = [model.bos_id, 7, 8]
    states = model.decode_states(prefix, ctx)
    expected = torch.softmax(states @ model.vocab_embeddings.T, dim=-1)
    probs = torch.softmax(model.decode_logits(prefix, ctx), dim=-1)
    assert torch.allclose(probs, expected, atol=1e-6)


def test_decoder_is_causal():
    model = tiny_generator()
    ctx = make_ctx(model)
    with_b = model.decode_logits([model.bos_id, 7, 8], ctx)
    with_c = model.decode_logits([model.bos_id, 7, 9], ctx)
    assert torch.allclose(with_b[:2], with_c[:2], atol=1e-6)
    assert not torch.allclose(with_b[2], with_c[2], atol=1e-4)


def test_decode_contract_errors():
    model = tiny_generator()
    ctx = make_ctx(model)
    with pytest.raises(GeneratorContractError):
        model.decode_states([], ctx)
    with pytest.raises(GeneratorContractError):
        model.decode_states([7, 8], ctx)  # missing begin token
    with pytest.raises(GeneratorContractError):
        model.decode_states([model.bos_id] + [7] * model.max_positions, ctx)
    no_entities = GenerationContext(
        entity_rows=torch.zeros(0, 8), utterance_rows=ctx.utterance_rows
    )
    with pytest.raises(GeneratorContractError):
        model.decode_states([model.bos_id], no_entities)
    no_utterances = GenerationContext(
        entity_rows=ctx.entity_rows, utterance_rows=torch.zeros(0, 8)
    )
    with pytest.raises(GeneratorContractError):
        model.decode_states([model.bos_id], no_utterances)


def test_generation_loss_matches_manual_teacher_forcing():
    model = tiny_generator()
    ctx = make_ctx(model)
    target = [7, 8, model.eos_id]
    loss = model.generation_loss([(ctx, target)])
    logits = model.decode_logits([model.bos_id, 7, 8], ctx)
    probs = torch.softmax(logits, dim=-1)
    manual = -(
        torch.log(probs[0, 7]) + torch.log(probs[1, 8]) + torch.log(probs[2, model.eos_id])
    ) / 3
    assert float(loss.detach()) == pytest.approx(float(manual.detach()), abs=1e-6)


def test_generation_loss_averages_over_batch():
    model = tiny_generator()
    ctx = make_ctx(model)
    pair_a = (ctx, [7, model.eos_id])
    pair_b = (ctx, [8, 9, model.eos_id])
    both = float(model.generation_loss([pair_a, pair_b]).detach())
    single_a = float(model.generation_loss([pair_a]).detach())
    single_b = float(model.generation_loss([pair_b]).detach())
    assert both == pytest.approx((single_a + single_b) / 2, abs=1e-6)


def test_generation_loss_input_validation():
    model = tiny_generator()
    ctx = make_ctx(model)
    with pytest.raises(ValueError):
        model.generation_loss([])
    with pytest.raises(ValueError):
        model.generation_loss([(ctx, [])])


def test_greedy_generation_is_deterministic():
    model = tiny_generator()
    ctx = make_ctx(model)
    vocab = StubVocab()
    first = model.generate(ctx, vocab, max_len=8)
    second = model.generate(ctx, vocab, max_len=8)
    assert first == second
    assert len(first) <= 8
    assert "__eos__" not in first


def test_beam_width_one_equals_greedy():
    model = tiny_generator()
    ctx = make_ctx(model)
    vocab = StubVocab()
    greedy = model.generate(ctx, vocab, max_len=8, mode="greedy")
    beam = model.generate(ctx, vocab, max_len=8, mode="beam", beam_width=1)
    assert beam == greedy


def test_generate_max_len_one():
    model = tiny_generator()
    ctx = make_ctx(model)
    out = model.generate(ctx, StubVocab(), max_len=1)
    assert len(out) <= 1


def test_generate_mode_validation():
    model = tiny_generator()
    ctx = make_ctx(model)
    with pytest.raises(ValueError):
        model.generate(ctx, StubVocab(), max_len=0)
    with pytest.raises(ValueError):
        model.generate(ctx, StubVocab(), mode="sampled")


def test_generate_fills_item_slot_with_surface_form():
    model = tiny_generator()
    kg = make_kg(2, [], items=[1], aliases=[["thing"], ["the great film"]])
    ctx = make_ctx(model, filler=1)
    item_dist = torch.zeros(len(TOKENS))
    item_dist[model.item_id] = 1.0
    eos_dist = torch.zeros(len(TOKENS))
    eos_dist[model.eos_id] = 1.0
    feed = iter([item_dist, eos_dist])
    model.decode_step = lambda prefix, ctx: next(feed)
    assert model.generate(ctx, StubVocab(), kg=kg, max_len=5) == ["the great film"]


def test_generate_keeps_placeholder_without_graph():
    model = tiny_generator()
    ctx = make_ctx(model, filler=1)
    item_dist = torch.zeros(len(TOKENS))
    item_dist[model.item_id] = 1.0
    eos_dist = torch.zeros(len(TOKENS))
    eos_dist[model.eos_id] = 1.0
    feed = iter([item_dist, eos_dist])
    model.decode_step = lambda prefix, ctx: next(feed)
    assert model.generate(ctx, StubVocab(), kg=None, max_len=5) == [ITEM_TOKEN]


CTX_KG = make_kg(6, [(0, 0, 1), (1, 0, 2), (2, 0, 3), (4, 0, 5)], items=[3, 5])


def grown_tree():
    tree = init_tree()
    for e in (0, 1, 4, 5, 2):
        tree.connect(e, CTX_KG)
    return tree


def test_extract_context_unions_branches_with_new_entity():
    model = tiny_generator()
    tree = grown_tree()
    table = torch.randn(6, 6)
    history = [
        ContextTurn(role_token_id=5, token_ids=[7, 8], entity_ids={0}),
        ContextTurn(role_token_id=6, token_ids=[9], entity_ids={4}),
        ContextTurn(role_token_id=5, token_ids=[10, 11], entity_ids={5, 2}),
    ]
    ctx = model.extract_context(tree, 2, history, table)
    expected_rows = model.project_entities(table[torch.tensor([0, 1, 2])])
    assert torch.allclose(ctx.entity_rows, expected_rows, atol=1e-7)
    # Qualifying turns: the first (mentions 0) and third (mentions 2);
    # 3 role+content tokens each, plus the begin row.
    assert ctx.utterance_rows.shape == (7, 8)
    assert ctx.slot_filler == 2


def test_extract_context_drop_flags_substitute_zero_rows():
    model = tiny_generator()
    tree = grown_tree()
    table = torch.randn(6, 6)
    ctx = model.extract_context(
        tree, 2, [], table, drop_entities=True, drop_utterances=True
    )
    assert torch.equal(ctx.entity_rows, torch.zeros(1, 8))
    assert torch.equal(ctx.utterance_rows, torch.zeros(1, 8))


def test_extract_context_requires_connected_entity():
    model = tiny_generator()
    tree = grown_tree()
    with pytest.raises(ValueError):
        model.extract_context(tree, 3, [], torch.randn(6, 6))
