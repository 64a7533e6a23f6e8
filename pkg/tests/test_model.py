import numpy as np
import pytest

from vlpt import tensor as T
from vlpt.bpe import CLS, IMG, PAD, SEP
from vlpt.errors import ContractError
from vlpt.model import (
    BIDIRECTIONAL,
    SEQ2SEQ,
    ModelConfig,
    assemble_pair,
    assemble_single_image,
    assemble_single_text,
    build_attention_mode,
    collate,
    forward,
    generate_greedy,
    init_params,
    lm_logits,
    param_list,
)
from vlpt.rng import RngState
from vlpt.scenes import RegionBox, RegionSet


def tiny_config(**kw):
    base = dict(vocab_size=300, n_layers=2, hidden=32, ffn=64, heads=4,
                max_text=12, max_regions=3, d_v=8, n_classes=6,
                dropout=0.0, attn_dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def tiny_regions(n, seed=0, d_v=8, k=6):
    gen = np.random.default_rng(seed)
    boxes = []
    for _ in range(n):
        x1, y1 = gen.uniform(0, 0.5, 2)
        boxes.append(RegionBox(float(x1), float(y1), float(x1) + 0.3, float(y1) + 0.3))
    dist = np.full((n, k), 0.02 / (k - 1))
    dist[np.arange(n), gen.integers(0, k, n)] = 0.98
    return RegionSet(boxes=boxes, features=gen.normal(size=(n, d_v)) * 0.5, class_dist=dist)


class TestConfig:
    def test_heads_must_divide_hidden(self):
        with pytest.raises(ContractError):
            ModelConfig(vocab_size=10, hidden=65, heads=4)

    def test_full_scale_presets(self):
        b = ModelConfig.base(vocab_size=50000)
        assert (b.n_layers, b.hidden, b.ffn, b.heads) == (12, 768, 3072, 12)
        assert (b.max_text, b.max_regions) == (512, 100)
        l = ModelConfig.large(vocab_size=50000)
        assert (l.n_layers, l.hidden, l.ffn, l.heads) == (24, 1024, 4096, 16)

    def test_roundtrip_dict(self):
        cfg = tiny_config()
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestAssembly:
    def test_pair_layout_two_regions_three_interior_tokens(self):
        cfg = tiny_config(max_regions=2, max_text=6)
        regions = tiny_regions(2)
        ids = [CLS, 101, 102, 103, SEP]
        pack = assemble_pair(regions, ids, cfg)
        # [IMG] v1 v2 [CLS] w1 w2 w3 [SEP] then padding
        assert pack.token_ids[0] == IMG
        assert pack.real[: 3].all()
        assert list(pack.token_ids[3:8]) == ids
        assert pack.real[3:8].all()
        assert not pack.real[8:].any()
        assert pack.token_ids[8] == PAD

    def test_positions_restart_at_text(self):
        cfg = tiny_config()
        pack = assemble_single_text([CLS, 9, SEP], cfg)
        assert list(pack.pos_ids[: cfg.text_start]) == list(range(cfg.text_start))
        assert list(pack.pos_ids[cfg.text_start : cfg.text_start + 3]) == [0, 1, 2]
        assert list(pack.segment_ids[: cfg.text_start]) == [0] * cfg.text_start
        assert pack.segment_ids[cfg.text_start] == 1

    def test_mask_is_real_block_in_padding_false_matrix(self):
        cfg = tiny_config(max_regions=2, max_text=8)
        pack = assemble_pair(tiny_regions(1), [CLS, 42, SEP], cfg)
        # 5 real slots: IMG, v1, CLS, w1, SEP
        expected = np.zeros((cfg.n_slots, cfg.n_slots), dtype=bool)
        real = [0, 1, 3, 4, 5]
        for i in real:
            for j in real:
                expected[i, j] = True
        np.testing.assert_array_equal(pack.attn, expected)

    def test_single_text_region_columns_unreachable(self):
        cfg = tiny_config()
        pack = assemble_single_text([CLS, 7, 8, SEP], cfg)
        region_cols = np.arange(0, cfg.text_start)
        for row in np.flatnonzero(pack.real):
            assert not pack.attn[row, region_cols].any()

    def test_single_image_pseudo_text(self):
        cfg = tiny_config()
        pack = assemble_single_image(tiny_regions(2), cfg)
        assert pack.token_ids[cfg.text_start] == CLS
        assert pack.token_ids[cfg.text_start + 1] == SEP
        assert not pack.real[cfg.text_start :].any()
        assert pack.real[: 3].all()

    def test_overflow_rejected(self):
        cfg = tiny_config(max_regions=2)
        with pytest.raises(ContractError):
            assemble_pair(tiny_regions(3), [CLS, 1, SEP], cfg)
        with pytest.raises(ContractError):
            assemble_single_text([CLS] + [5] * 30 + [SEP], cfg)


class TestAttentionModes:
    def test_seq2seq_hand_enumerated_8_slots(self):
        cfg = tiny_config(max_regions=2, max_text=8)
        pack = assemble_pair(tiny_regions(2), [CLS, 11, 12, 13, SEP], cfg)
        # real slots: 0,1,2 (visual) and 3..7 (text); source = 5 real slots
        s2s = build_attention_mode(pack, SEQ2SEQ, source_len=5)
        expected = np.zeros((cfg.n_slots, cfg.n_slots), dtype=bool)
        src = [0, 1, 2, 3, 4]
        tgt = [5, 6, 7]
        for i in src:
            for j in src:
                expected[i, j] = True
        for rank, t in enumerate(tgt):
            for j in src:
                expected[t, j] = True
            for t2 in tgt[: rank + 1]:
                expected[t, t2] = True
        np.testing.assert_array_equal(s2s.attn, expected)

    def test_future_target_never_visible(self):
        cfg = tiny_config()
        pack = assemble_single_text([CLS, 1, 2, 3, 4, 5, SEP], cfg)
        s2s = build_attention_mode(pack, SEQ2SEQ, source_len=3)
        real = np.flatnonzero(s2s.real)
        tgt = real[3:]
        for a, slot_a in enumerate(tgt):
            for slot_b in tgt[a + 1 :]:
                assert not s2s.attn[slot_a, slot_b]

    def test_empty_target_reduces_to_bidirectional_over_source(self):
        cfg = tiny_config()
        pack = assemble_single_text([CLS, 5, 6, SEP], cfg)
        s2s = build_attention_mode(pack, SEQ2SEQ, source_len=4)
        np.testing.assert_array_equal(s2s.attn, pack.attn)

    def test_source_len_out_of_range(self):
        cfg = tiny_config()
        pack = assemble_single_text([CLS, 5, SEP], cfg)
        with pytest.raises(ContractError):
            build_attention_mode(pack, SEQ2SEQ, source_len=99)
        with pytest.raises(ContractError):
            build_attention_mode(pack, SEQ2SEQ, source_len=None)

    def test_mode_does_not_mutate_original(self):
        cfg = tiny_config()
        pack = assemble_single_text([CLS, 5, 6, 7, SEP], cfg)
        before = pack.attn.copy()
        build_attention_mode(pack, SEQ2SEQ, source_len=2)
        np.testing.assert_array_equal(pack.attn, before)


def reference_forward(batch, params, cfg):
    """Straight-line numpy transformer, no autodiff machinery shared with
    the implementation under test."""

    def p(name):
        return params[name].data

    def ln(x, g, b, eps=1e-5):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + eps) * g + b

    def masked_softmax(scores, mask):
        neg = np.where(mask, scores, -np.inf)
        m = neg.max(-1, keepdims=True)
        e = np.where(mask, np.exp(neg - np.where(np.isfinite(m), m, 0.0)), 0.0)
        z = e.sum(-1, keepdims=True)
        return np.divide(e, z, out=np.zeros_like(e), where=z > 0)

    def gelu(x):
        return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))

    geom_mask = (batch.segment_ids == 0).astype(np.float64)
    x = (
        p("tok_emb")[batch.token_ids] * batch.token_mask[..., None]
        + (batch.features @ p("feat_w") + p("feat_b")) * batch.feature_mask[..., None]
        + (batch.geometry @ p("geom_w") + p("geom_b")) * geom_mask[..., None]
        + p("pos_emb")[batch.pos_ids]
        + p("seg_emb")[batch.segment_ids]
    )
    x = ln(x, p("emb_ln_g"), p("emb_ln_b"))
    bsz, s, h = x.shape
    nh, dh = cfg.heads, cfg.hidden // cfg.heads
    for i in range(cfg.n_layers):
        def heads_of(side):
            y = x @ p(f"L{i}.attn_{side}_w") + p(f"L{i}.attn_{side}_b")
            return y.reshape(bsz, s, nh, dh).transpose(0, 2, 1, 3)

        q, k, v = heads_of("q"), heads_of("k"), heads_of("v")
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
        probs = masked_softmax(scores, batch.attn[:, None, :, :])
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(bsz, s, h)
        a = ctx @ p(f"L{i}.attn_o_w") + p(f"L{i}.attn_o_b")
        x = ln(x + a, p(f"L{i}.ln1_g"), p(f"L{i}.ln1_b"))
        f = gelu(x @ p(f"L{i}.ffn_in_w") + p(f"L{i}.ffn_in_b")) @ p(f"L{i}.ffn_out_w") + p(
            f"L{i}.ffn_out_b"
        )
        x = ln(x + f, p(f"L{i}.ln2_g"), p(f"L{i}.ln2_b"))
    return x


class TestForward:
    def test_matches_independent_reference_two_layers(self):
        cfg = tiny_config()
        params = init_params(cfg, RngState(0))
        packs = [
            assemble_pair(tiny_regions(2, seed=1), [CLS, 10, 11, 12, SEP], cfg),
            assemble_single_text([CLS, 20, 21, SEP], cfg),
            assemble_single_image(tiny_regions(3, seed=2), cfg),
        ]
        batch = collate(packs)
        enc = forward(batch, params, cfg)
        ref = reference_forward(batch, params, cfg)
        assert np.abs(enc.hidden.data - ref).max() < 1e-10

    def test_zero_layer_stack_outputs_embedding_stage(self):
        cfg = tiny_config(n_layers=0)
        params = init_params(cfg, RngState(1))
        pack = assemble_single_text([CLS, 42, SEP], cfg)
        enc = forward(pack, params, cfg)
        np.testing.assert_array_equal(enc.hidden.data, enc.embeddings.data)
        # and the embedding stage is the normalized sum of its five parts
        batch = collate([pack])
        manual = reference_forward(batch, params, cfg)  # 0 layers: embeddings only
        assert np.abs(enc.hidden.data - manual).max() < 1e-12

    def test_extraction_positions(self):
        cfg = tiny_config()
        params = init_params(cfg, RngState(2))
        pack = assemble_pair(tiny_regions(2), [CLS, 7, SEP], cfg)
        enc = forward(pack, params, cfg)
        np.testing.assert_array_equal(enc.h_img.data, enc.hidden.data[:, 0])
        np.testing.assert_array_equal(enc.h_cls.data, enc.hidden.data[:, cfg.text_start])

    def test_pseudo_token_perturbation_bitwise_invariant(self):
        cfg = tiny_config()
        params = init_params(cfg, RngState(3))
        pack = assemble_single_image(tiny_regions(3, seed=5), cfg)
        enc1 = forward(pack, params, cfg)
        altered = assemble_single_image(tiny_regions(3, seed=5), cfg)
        altered.token_ids[cfg.text_start :] = 77  # rewrite every pseudo token id
        enc2 = forward(altered, params, cfg)
        real = np.flatnonzero(pack.real)
        assert (enc1.hidden.data[:, real] == enc2.hidden.data[:, real]).all()

    def test_padding_row_perturbation_bitwise_invariant(self):
        cfg = tiny_config()
        params = init_params(cfg, RngState(4))
        pack = assemble_pair(tiny_regions(1, seed=6), [CLS, 9, 9, SEP], cfg)
        enc1 = forward(pack, params, cfg)
        altered = assemble_pair(tiny_regions(1, seed=6), [CLS, 9, 9, SEP], cfg)
        altered.token_ids[-2:] = 123  # padding text slots
        altered.features[2] = 40.0  # padding region slot
        enc2 = forward(altered, params, cfg)
        real = np.flatnonzero(pack.real)
        assert (enc1.hidden.data[:, real] == enc2.hidden.data[:, real]).all()

    def test_pseudo_embedding_gradients_exactly_zero(self):
        cfg = tiny_config()
        params = init_params(cfg, RngState(5))
        pack = assemble_single_text([CLS, 15, 16, SEP], cfg)
        enc = forward(pack, params, cfg)
        loss = T.tsum(enc.h_cls * enc.h_cls) + T.tsum(enc.hidden[:, cfg.text_start + 1] ** 2.0)
        loss.backward()
        pseudo = np.flatnonzero(~pack.real)
        assert (enc.embeddings.grad[:, pseudo, :] == 0.0).all()
        real = np.flatnonzero(pack.real)
        assert np.abs(enc.embeddings.grad[:, real, :]).sum() > 0

    def test_seq2seq_causality_hidden_invariance(self):
        cfg = tiny_config()
        params = init_params(cfg, RngState(6))
        ids = [CLS, 5, 6, SEP, CLS, 30, 31, SEP]
        pack = build_attention_mode(assemble_single_text(ids, cfg), SEQ2SEQ, source_len=4)
        enc1 = forward(pack, params, cfg)
        ids2 = list(ids)
        ids2[-2] = 99  # perturb a late target token
        pack2 = build_attention_mode(assemble_single_text(ids2, cfg), SEQ2SEQ, source_len=4)
        enc2 = forward(pack2, params, cfg)
        upto = cfg.text_start + 6  # slots strictly before the perturbed one
        real = [i for i in np.flatnonzero(pack.real) if i < upto]
        assert (enc1.hidden.data[:, real] == enc2.hidden.data[:, real]).all()

    def test_train_mode_needs_rng_for_dropout(self):
        cfg = tiny_config(dropout=0.1)
        params = init_params(cfg, RngState(7))
        pack = assemble_single_text([CLS, 4, SEP], cfg)
        with pytest.raises(ContractError):
            forward(pack, params, cfg, train=True)
        enc = forward(pack, params, cfg, train=True, rng=RngState(8))
        assert np.all(np.isfinite(enc.hidden.data))


class TestGreedyGeneration:
    def test_zero_budget_empty(self):
        cfg = tiny_config()
        params = init_params(cfg, RngState(9))
        assert generate_greedy(params, cfg, [CLS, 5, SEP], None, max_len=0) == []

    def test_banned_ids_never_emitted(self):
        cfg = tiny_config()
        params = init_params(cfg, RngState(10))
        out = generate_greedy(params, cfg, [CLS, 5, 6, SEP], None, max_len=6)
        assert PAD not in out and IMG not in out

    def test_pair_conditioned_generation_runs(self):
        cfg = tiny_config()
        params = init_params(cfg, RngState(11))
        out = generate_greedy(params, cfg, [CLS, 5, SEP], tiny_regions(2), max_len=4)
        assert len(out) <= 4
