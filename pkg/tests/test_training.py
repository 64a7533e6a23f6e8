import json

import numpy as np
import pytest

from vlpt.augment import GroupConfig
from vlpt.data import augment_dataset, build_pipelines, generate_corpus
from vlpt.errors import ConfigError, ContractError
from vlpt.model import ModelConfig, init_params
from vlpt.retrieval import MeanTokenEmbedder
from vlpt.rng import RngState
from vlpt.textprep import sample_seq2seq_split, tokenize
from vlpt.training import (
    BatchPlan,
    Trainer,
    TrainConfig,
    lr_at,
    mix_batches,
    probe_generation,
    probe_retrieval,
)


def small_model_config(vocab_size):
    return ModelConfig(
        vocab_size=vocab_size, n_layers=2, hidden=32, ffn=64, heads=4,
        max_text=28, max_regions=10, d_v=32, n_classes=16,
        dropout=0.0, attn_dropout=0.0,
    )


@pytest.fixture(scope="module")
def bundle():
    b = generate_corpus(n_pairs=8, n_images=8, n_texts=16, seed=5, vocab_size=330)
    embedder = MeanTokenEmbedder(b.vocab, np.random.default_rng(0).normal(size=(b.vocab.size, 16)))
    pipes = build_pipelines(b, embedder)
    augment_dataset(b, pipes, GroupConfig(2, 3, 2, 2, text_filter_k=50, text_rerank_k=8), seed=5)
    return b


def train_config(**kw):
    base = dict(seed=11, max_steps=40, warmup_steps=4, peak_lr=5e-4, batch_size=3,
                ratio=(1.0, 1.0, 2.0))
    base.update(kw)
    return TrainConfig(**base)


def strip_time(records):
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in records]


class TestSchedule:
    def test_endpoints(self):
        cfg = train_config(max_steps=100, warmup_steps=10, peak_lr=5e-5)
        assert lr_at(0, cfg) == 0.0
        assert lr_at(10, cfg) == 5e-5
        assert lr_at(100, cfg) == 0.0

    def test_halfway_decay_is_half_peak(self):
        cfg = train_config(max_steps=110, warmup_steps=10, peak_lr=5e-5)
        assert abs(lr_at(60, cfg) - 2.5e-5) < 1e-18

    def test_warmup_slope(self):
        cfg = train_config(max_steps=100, warmup_steps=10, peak_lr=1e-3)
        assert abs(lr_at(3, cfg) - 3e-4) < 1e-15

    def test_out_of_range(self):
        cfg = train_config(max_steps=10, warmup_steps=2)
        with pytest.raises(ContractError):
            lr_at(11, cfg)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            train_config(ratio=(0, 0, 0))
        with pytest.raises(ConfigError):
            train_config(warmup_steps=40, max_steps=40)
        with pytest.raises(ConfigError):
            train_config(schedule="cosine")


class TestMixing:
    STREAMS = {
        "image": [f"img/{i}" for i in range(10)],
        "text": [f"txt/{i}" for i in range(10)],
        "pair": [f"pair/{i}" for i in range(10)],
    }

    def test_fractions_match_ratio(self):
        cfg = train_config(ratio=(1.0, 1.0, 5.0), batch_size=10, max_steps=10**9)
        mixer = mix_batches(self.STREAMS, cfg, RngState(3))
        counts = {"image": 0, "text": 0, "pair": 0}
        n = 0
        for plan in mixer:
            for s in plan.samples:
                counts[s.kind] += 1
                n += 1
            if n >= 14000:
                break
        assert abs(counts["image"] / n - 1 / 7) < 0.02
        assert abs(counts["text"] / n - 1 / 7) < 0.02
        assert abs(counts["pair"] / n - 5 / 7) < 0.02

    def test_degenerate_ratio_pairs_only(self):
        cfg = train_config(ratio=(0.0, 0.0, 1.0), batch_size=5)
        mixer = mix_batches(self.STREAMS, cfg, RngState(1))
        for _ in range(5):
            plan = next(mixer)
            assert all(s.kind == "pair" for s in plan.samples)

    def test_epoch_cycling_covers_stream(self):
        cfg = train_config(ratio=(0.0, 0.0, 1.0), batch_size=5)
        mixer = mix_batches(self.STREAMS, cfg, RngState(2))
        seen = []
        for _ in range(4):
            seen.extend(s.sample_id for s in next(mixer).samples)
        assert set(seen[:10]) == set(self.STREAMS["pair"])  # first epoch is a permutation

    def test_identical_streams_for_identical_seed(self):
        cfg = train_config(batch_size=4)
        a = mix_batches(self.STREAMS, cfg, RngState(9))
        b = mix_batches(self.STREAMS, cfg, RngState(9))
        for _ in range(20):
            assert next(a) == next(b)

    def test_empty_stream_with_positive_ratio_rejected(self):
        cfg = train_config(ratio=(1.0, 0.0, 1.0))
        with pytest.raises(ConfigError):
            next(mix_batches({"image": [], "text": [], "pair": ["p"]}, cfg, RngState(0)))


class TestTrainStep:
    def test_images_only_batch_isolates_losses(self, bundle):
        cfg = train_config(ratio=(1.0, 0.0, 0.0))
        tr = Trainer(small_model_config(bundle.vocab.size), cfg, bundle)
        plan = next(mix_batches(tr.streams(), cfg, tr.rng))
        rec = tr.train_step(plan)
        assert rec["l_loss"] == 0.0 and rec["cmcl_loss"] == 0.0
        assert rec["v_loss"] > 0.0

    def test_zero_learning_rate_leaves_parameters(self, bundle):
        cfg = train_config()
        tr = Trainer(small_model_config(bundle.vocab.size), cfg, bundle)
        before = {k: p.data.copy() for k, p in tr.params.items()}
        plan = next(mix_batches(tr.streams(), cfg, tr.rng))
        assert plan.step == 0 and lr_at(0, cfg) == 0.0
        tr.train_step(plan)
        for k, p in tr.params.items():
            np.testing.assert_array_equal(p.data, before[k])

    def test_total_is_sum_of_components(self, bundle):
        cfg = train_config()
        tr = Trainer(small_model_config(bundle.vocab.size), cfg, bundle)
        for rec in tr.run(n_steps=5):
            assert abs(rec["total"] - (rec["v_loss"] + rec["l_loss"] + rec["cmcl_loss"])) < 1e-6

    def test_ten_step_determinism(self, bundle):
        cfg = train_config()
        mcfg = small_model_config(bundle.vocab.size)
        r1 = Trainer(mcfg, cfg, bundle).run(n_steps=10)
        r2 = Trainer(mcfg, cfg, bundle).run(n_steps=10)
        assert strip_time(r1) == strip_time(r2)

    def test_objective_toggles(self, bundle):
        mcfg = small_model_config(bundle.vocab.size)
        full = Trainer(mcfg, train_config(), bundle).run(n_steps=1)[0]
        for flag, zeroed in [
            ("visual_objective", "v_loss"),
            ("language_objective", "l_loss"),
            ("cmcl_objective", "cmcl_loss"),
        ]:
            cfg = train_config(**{flag: False})
            rec = Trainer(mcfg, cfg, bundle).run(n_steps=1)[0]
            assert rec[zeroed] == 0.0
            # the other two components are untouched at step 1
            for key in ("v_loss", "l_loss", "cmcl_loss"):
                if key != zeroed:
                    assert rec[key] == full[key], (flag, key)

    def test_checkpoint_resume_matches_uninterrupted(self, bundle, tmp_path):
        mcfg = small_model_config(bundle.vocab.size)
        cfg = train_config(max_steps=20)
        straight = Trainer(mcfg, cfg, bundle).run(n_steps=10)

        tr = Trainer(mcfg, cfg, bundle)
        first = tr.run(n_steps=6)
        ck = tmp_path / "mid.ckpt"
        tr.save(ck)
        resumed = Trainer.resume(ck, bundle)
        assert resumed.step == 6
        rest = resumed.run(n_steps=4)
        assert strip_time(first + rest) == strip_time(straight)

    def test_missing_groups_rejected_when_cmcl_on(self, bundle):
        import copy

        b2 = copy.copy(bundle)
        b2.groups = {}
        with pytest.raises(ConfigError):
            Trainer(small_model_config(bundle.vocab.size), train_config(), b2)


class TestProbes:
    def _pairs(self, bundle, mcfg):
        return [
            (r.regions, tokenize(bundle.vocab, r.caption, mcfg.max_text).ids)
            for r in bundle.pairs
        ]

    def test_k_at_least_n_gives_full_recall(self, bundle):
        mcfg = small_model_config(bundle.vocab.size)
        params = init_params(mcfg, RngState(0))
        out = probe_retrieval(params, mcfg, self._pairs(bundle, mcfg), k_list=(1, 8, 20))
        assert out["text_to_image"][8] == 1.0
        assert out["image_to_text"][20] == 1.0

    def test_chance_level_for_random_models(self, bundle):
        mcfg = small_model_config(bundle.vocab.size)
        pairs = self._pairs(bundle, mcfg)[:4]
        hits = []
        for seed in range(30):
            params = init_params(mcfg, RngState(seed))
            out = probe_retrieval(params, mcfg, pairs, k_list=(1,))
            hits.append(out["text_to_image"][1])
            hits.append(out["image_to_text"][1])
        mean = float(np.mean(hits))
        # expected R@1 = 1/4; 60 probe values of 4 queries each
        sigma = np.sqrt(0.25 * 0.75 / (60 * 4))
        assert abs(mean - 0.25) < 5 * sigma

    def test_score_matrix_matches_bruteforce(self, bundle):
        from vlpt.model import assemble_single_image, assemble_single_text, forward as fwd
        from vlpt import tensor as T

        mcfg = small_model_config(bundle.vocab.size)
        params = init_params(mcfg, RngState(1))
        pairs = self._pairs(bundle, mcfg)
        out = probe_retrieval(params, mcfg, pairs)
        for i, (regions, _) in enumerate(pairs):
            with T.no_grad():
                ev = fwd(assemble_single_image(regions, mcfg), params, mcfg).h_img.data[0]
            for j, (_, ids) in enumerate(pairs):
                with T.no_grad():
                    ew = fwd(assemble_single_text(ids, mcfg), params, mcfg).h_cls.data[0]
                want = ev @ ew / (np.linalg.norm(ev) * np.linalg.norm(ew))
                assert abs(out["scores"][i, j] - want) < 1e-10

    def test_needs_two_pairs(self, bundle):
        mcfg = small_model_config(bundle.vocab.size)
        params = init_params(mcfg, RngState(2))
        with pytest.raises(ContractError):
            probe_retrieval(params, mcfg, self._pairs(bundle, mcfg)[:1])

    def test_generation_probe_reports_fraction(self, bundle):
        mcfg = small_model_config(bundle.vocab.size)
        params = init_params(mcfg, RngState(3))
        items = []
        for r in bundle.pairs:
            seq = tokenize(bundle.vocab, r.caption, mcfg.max_text)
            if seq.interior_len < 4:
                continue
            items.append((r.regions, sample_seq2seq_split(seq, RngState(7).fork(r.id))))
            if len(items) == 3:
                break
        out = probe_generation(params, mcfg, items, max_len=8)
        assert 0.0 <= out["token_accuracy"] <= 1.0
        assert len(out["samples"]) == 3
