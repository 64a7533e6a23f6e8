"""The training loop: modality mixing, the joint loss step, the linear
warmup/decay schedule, retrieval and generation probes, and checkpoints.

Every logged number is fully determined by (seed, config, data): sampling
plans are derived from keyed rng forks, the optimizer runs in a fixed
parameter order, and save/resume replays the mixer bookkeeping so a resumed
run continues the exact trajectory. Wall-clock time is logged but carries
no determinism guarantee.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .bpe import Vocabulary
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DataBundle
from .errors import ConfigError, ContractError, NothingToPredict, NumericError, SequenceTooShort
from .model import (
    BIDIRECTIONAL,
    SEQ2SEQ,
    InputPack,
    ModelConfig,
    assemble_pair,
    assemble_single_image,
    assemble_single_text,
    build_attention_mode,
    collate,
    forward,
    generate_greedy,
    init_params,
    param_list,
    zero_grads,
)
from .objectives import (
    DEFAULT_TAU,
    GroupData,
    ScoringMode,
    bidirectional_loss,
    cmcl_loss,
    score_cmcl_groups,
    seq2seq_loss,
    visual_loss,
)
from .optim import adam_step
from .rng import RngState
from .scenes import apply_region_mask, sample_region_mask
from .textprep import (
    TokenSequence,
    apply_masking_plan,
    detect_phrases,
    sample_bidirectional_mask,
    sample_seq2seq_split,
    tokenize,
)

log = logging.getLogger(__name__)

IMAGE, TEXT, PAIR = "image", "text", "pair"


@dataclass
class TrainConfig:
    """Loop hyperparameters. `ratio` is images : texts : pairs; objective
    toggles drop loss terms without touching the input pipeline."""

    seed: int
    max_steps: int = 200
    warmup_steps: int = 20
    peak_lr: float = 1e-3
    schedule: str = "linear"
    batch_size: int = 4
    ratio: tuple = (1.0, 1.0, 5.0)
    visual_objective: bool = True
    language_objective: bool = True
    cmcl_objective: bool = True
    tau: float = DEFAULT_TAU
    group_counts: tuple = (3, 8, 4, 4)
    scoring_individual: bool = False
    fixed_plans: bool = False  # per-sample plans constant across steps (memorization runs)
    region_mask_rate: float = 0.15
    precision: str = "double"
    checkpoint_every: int = 0  # 0: final checkpoint only
    phrase_lexicon: tuple = ()

    def __post_init__(self):
        if len(self.ratio) != 3 or any(r < 0 for r in self.ratio) or sum(self.ratio) == 0:
            raise ConfigError("ratio must be three nonnegative weights, not all zero")
        if not 0 <= self.warmup_steps < self.max_steps:
            raise ConfigError("warmup_steps must lie in [0, max_steps)")
        if self.schedule != "linear":
            raise ConfigError(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratio"] = list(self.ratio)
        d["group_counts"] = list(self.group_counts)
        d["phrase_lexicon"] = list(self.phrase_lexicon)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for key in ("ratio", "group_counts", "phrase_lexicon"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup 0 -> peak over warmup_steps, then linear decay to 0 at
    max_steps."""
    if not 0 <= step <= config.max_steps:
        raise ContractError(f"step {step} outside [0, {config.max_steps}]")
    if config.warmup_steps > 0 and step <= config.warmup_steps:
        return config.peak_lr * step / config.warmup_steps
    return config.peak_lr * (config.max_steps - step) / (config.max_steps - config.warmup_steps)


@dataclass
class PlannedSample:
    kind: str
    sample_id: str
    objective: str  # visual | bidirectional | seq2seq


@dataclass
class BatchPlan:
    step: int
    samples: list[PlannedSample]


def mix_batches(streams: dict[str, list[str]], config: TrainConfig, rng: RngState):
    """Infinite BatchPlan generator: each slot draws its modality i.i.d.
    with probability proportional to `ratio`; streams cycle independently
    with a reshuffle every epoch. Language-objective coins are flipped here
    so a plan is fully determined before any model work."""
    weights = np.asarray(config.ratio, dtype=np.float64)
    kinds = [IMAGE, TEXT, PAIR]
    for kind, w in zip(kinds, weights):
        if w > 0 and not streams.get(kind):
            raise ConfigError(f"ratio selects {kind} samples but that stream is empty")
    probs = weights / weights.sum()
    mix_gen = rng.fork("mix").generator
    coin_gen = rng.fork("objective").generator
    order: dict[str, list[str]] = {}
    cursor: dict[str, int] = {}
    epoch: dict[str, int] = {k: 0 for k in kinds}

    def next_id(kind: str) -> str:
        if kind not in order or cursor[kind] >= len(order[kind]):
            ids = list(streams[kind])
            rng.fork("epoch", kind, epoch[kind]).generator.shuffle(ids)
            order[kind], cursor[kind] = ids, 0
            epoch[kind] += 1
        out = order[kind][cursor[kind]]
        cursor[kind] += 1
        return out

    step = 0
    while True:
        samples = []
        for _ in range(config.batch_size):
            kind = kinds[int(mix_gen.choice(3, p=probs))]
            sample_id = next_id(kind)
            if kind == IMAGE:
                objective = "visual"
            else:
                objective = "seq2seq" if coin_gen.random() < 0.5 else "bidirectional"
            samples.append(PlannedSample(kind=kind, sample_id=sample_id, objective=objective))
        yield BatchPlan(step=step, samples=samples)
        step += 1


class Trainer:
    """Owns the parameters and runs the mixing/step/checkpoint loop over a
    loaded DataBundle."""

    def __init__(
        self,
        model_config: ModelConfig,
        train_config: TrainConfig,
        bundle: DataBundle,
        params=None,
        start_step: int = 0,
    ):
        T.set_default_dtype(train_config.precision)
        self.mcfg = model_config
        self.cfg = train_config
        self.bundle = bundle
        self.rng = RngState(train_config.seed)
        self.params = params if params is not None else init_params(model_config, self.rng.fork("init"))
        self.step = start_step
        self._param_list = param_list(self.params)
        self._seq_cache: dict[str, TokenSequence] = {}
        self._group_cache: dict[str, GroupData] = {}
        if train_config.cmcl_objective:
            missing = [r.id for r in bundle.pairs if r.id not in bundle.groups]
            if missing:
                raise ConfigError(
                    f"cmcl objective needs prebuilt groups; missing for {missing[:3]}..."
                )

    # -- sample preparation ------------------------------------------------------

    def _sequence(self, text_key: str, text: str) -> TokenSequence:
        seq = self._seq_cache.get(text_key)
        if seq is None:
            seq = tokenize(self.bundle.vocab, text, self.mcfg.max_text)
            seq.phrase_spans = detect_phrases(seq, self.cfg.phrase_lexicon)
            self._seq_cache[text_key] = seq
        return seq

    def _plan_rng(self, purpose: str, sample_id: str, step: int) -> RngState:
        if self.cfg.fixed_plans:
            return self.rng.fork(purpose, sample_id)
        return self.rng.fork(purpose, sample_id, step)

    def _group_data(self, pair_id: str) -> GroupData:
        gd = self._group_cache.get(pair_id)
        if gd is not None:
            return gd
        group = self.bundle.groups[pair_id]
        enc = lambda text: self._sequence(f"g/{pair_id}/{text}", text).ids
        gd = GroupData(
            pair_id=pair_id,
            regions=self.bundle.scenes_by_id[pair_id],
            caption_ids=self._sequence(f"cap/{pair_id}", group.caption).ids,
            positive_ids=[enc(p) for p in group.positives],
            negative_ids=[enc(n) for n in group.negatives],
            retrieved_images=[self.bundle.scenes_by_id[i] for i in group.image_ids],
            retrieved_text_ids=[enc(self.bundle.texts_by_id[t]) for t in group.text_ids],
        )
        self._group_cache[pair_id] = gd
        return gd

    def _language_pack(self, seq: TokenSequence, sample: PlannedSample, step: int, regions=None):
        """Build the (masked or split) pack for a text-bearing sample.
        Returns (pack, masking_plan, split)."""
        visual_real = (1 + len(regions)) if regions is not None else 0

        def bidirectional():
            plan = sample_bidirectional_mask(
                seq, self._plan_rng("mask", sample.sample_id, step), self.bundle.vocab
            )
            ids = apply_masking_plan(seq.ids, plan)
            pack = (
                assemble_pair(regions, ids, self.mcfg, sample.sample_id)
                if regions is not None
                else assemble_single_text(ids, self.mcfg, sample.sample_id)
            )
            return pack, plan, None

        if sample.objective == "seq2seq":
            try:
                split = sample_seq2seq_split(seq, self._plan_rng("split", sample.sample_id, step))
            except SequenceTooShort:
                return bidirectional()
            ids = split.source_ids + split.target_ids
            if len(ids) > self.mcfg.max_text:  # split wrappers can overflow; fall back
                return bidirectional()
            pack = (
                assemble_pair(regions, ids, self.mcfg, sample.sample_id)
                if regions is not None
                else assemble_single_text(ids, self.mcfg, sample.sample_id)
            )
            pack = build_attention_mode(pack, SEQ2SEQ, visual_real + len(split.source_ids))
            return pack, None, split
        return bidirectional()

    # -- one optimization step -----------------------------------------------------

    def compute_losses(self, plan: BatchPlan) -> dict:
        """Assemble the batch and evaluate the three loss families. Pure in
        (plan, parameters): replaying the same plan gives the same values."""
        step = plan.step
        cfg, mcfg = self.cfg, self.mcfg
        packs: list[InputPack] = []
        vis_plans, lm_plans, s2s_splits = [], [], []
        groups: list[GroupData] = []

        for sample in plan.samples:
            if sample.kind == IMAGE:
                regions = self.bundle.scenes_by_id[sample.sample_id]
                rplan = sample_region_mask(
                    regions, self._plan_rng("regionmask", sample.sample_id, step), cfg.region_mask_rate
                )
                packs.append(assemble_single_image(apply_region_mask(regions, rplan), mcfg, sample.sample_id))
                vis_plans.append(rplan)
                lm_plans.append(None)
                s2s_splits.append(None)
            elif sample.kind == TEXT:
                seq = self._sequence(sample.sample_id, self.bundle.texts_by_id[sample.sample_id])
                pack, mplan, split = self._language_pack(seq, sample, step)
                packs.append(pack)
                vis_plans.append(None)
                lm_plans.append(mplan)
                s2s_splits.append(split)
            else:
                regions = self.bundle.scenes_by_id[sample.sample_id]
                rplan = sample_region_mask(
                    regions, self._plan_rng("regionmask", sample.sample_id, step), cfg.region_mask_rate
                )
                masked_regions = apply_region_mask(regions, rplan)
                caption = self.bundle.texts_by_id[f"cap/{sample.sample_id}"]
                seq = self._sequence(f"cap/{sample.sample_id}", caption)
                pack, mplan, split = self._language_pack(seq, sample, step, regions=masked_regions)
                packs.append(pack)
                vis_plans.append(rplan)
                lm_plans.append(mplan)
                s2s_splits.append(split)
                if cfg.cmcl_objective:
                    groups.append(self._group_data(sample.sample_id))

        train_mode = mcfg.dropout > 0 or mcfg.attn_dropout > 0
        enc = forward(
            collate(packs), self.params, mcfg,
            train=train_mode, rng=self.rng.fork("fwd", step) if train_mode else None,
        )

        zero = T.as_tensor(0.0)
        v_loss = (
            visual_loss(enc.hidden, vis_plans, self.params, mcfg) if cfg.visual_objective else zero
        )

        l_loss = zero
        if cfg.language_objective:
            parts = []
            n_bid = sum(len(p.positions) for p in lm_plans if p is not None)
            n_s2s = sum(max(len(s.target_ids) - 1, 0) for s in s2s_splits if s is not None)
            if n_bid:
                parts.append((bidirectional_loss(enc.hidden, lm_plans, self.params, mcfg), n_bid))
            if n_s2s:
                parts.append((seq2seq_loss(enc.hidden, s2s_splits, self.params, mcfg), n_s2s))
            if parts:
                total_n = sum(n for _, n in parts)
                l_loss = sum((loss * (n / total_n) for loss, n in parts), start=zero)

        c_loss = zero
        if cfg.cmcl_objective and groups:
            scored = score_cmcl_groups(
                groups, self.params, mcfg, tau=cfg.tau,
                mode=ScoringMode(individual=cfg.scoring_individual),
                train=train_mode, rng=self.rng.fork("fwd-cmcl", step) if train_mode else None,
            )
            c_loss = sum((cmcl_loss(s) for s in scored), start=zero) * (1.0 / len(scored))

        total = v_loss + l_loss + c_loss
        if not np.isfinite(total.item()):
            raise NumericError(
                f"non-finite loss at step {step}; batch sample ids: "
                f"{[s.sample_id for s in plan.samples]}"
            )
        return {"v_loss": v_loss, "l_loss": l_loss, "cmcl_loss": c_loss, "total": total}

    def train_step(self, plan: BatchPlan) -> dict:
        t0 = time.perf_counter()
        step = plan.step
        cfg = self.cfg
        losses = self.compute_losses(plan)
        total = losses["total"]
        zero_grads(self.params)
        total.backward()
        for p in self._param_list:  # parameters unreachable from this batch's loss
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        lr = lr_at(step, cfg)
        grad_norm = adam_step(self._param_list, lr, t=step + 1)
        return {
            "step": step,
            "lr": lr,
            "v_loss": losses["v_loss"].item(),
            "l_loss": losses["l_loss"].item(),
            "cmcl_loss": losses["cmcl_loss"].item(),
            "total": total.item(),
            "grad_norm": grad_norm,
            "wall_time": time.perf_counter() - t0,
        }

    # -- loop / checkpointing ----------------------------------------------------------

    def streams(self) -> dict[str, list[str]]:
        return {
            IMAGE: [r.id for r in self.bundle.images],
            TEXT: [i for i, _ in self.bundle.texts],
            PAIR: [r.id for r in self.bundle.pairs],
        }

    def run(self, n_steps: int | None = None, log_file=None, checkpoint_path=None, stop_check=None):
        """Run up to `n_steps` (default: through max_steps), resuming mixer
        state by replaying plans before self.step. Records go to `log_file`
        as JSON lines when given."""
        end = self.cfg.max_steps if n_steps is None else min(self.step + n_steps, self.cfg.max_steps)
        records = []
        mixer = mix_batches(self.streams(), self.cfg, self.rng)
        for plan in mixer:
            if plan.step < self.step:
                continue
            if plan.step >= end:
                break
            record = self.train_step(plan)
            self.step = plan.step + 1
            records.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
            if (
                checkpoint_path is not None
                and self.cfg.checkpoint_every
                and self.step % self.cfg.checkpoint_every == 0
            ):
                self.save(checkpoint_path)
            if stop_check is not None and stop_check(records):
                break
        if checkpoint_path is not None:
            self.save(checkpoint_path)
        return records

    def save(self, path) -> None:
        save_checkpoint(
            path,
            self.params,
            step=self.step,
            seed=self.cfg.seed,
            model_config=self.mcfg.to_dict(),
            extra={"train_config": self.cfg.to_dict()},
        )

    @classmethod
    def resume(cls, path, bundle: DataBundle, train_config: TrainConfig | None = None) -> "Trainer":
        ck = load_checkpoint(path)
        mcfg = ModelConfig.from_dict(ck.model_config)
        cfg = train_config or TrainConfig.from_dict(ck.extra["train_config"])
        if cfg.seed != ck.seed:
            raise ConfigError(f"checkpoint was trained with seed {ck.seed}, config says {cfg.seed}")
        return cls(mcfg, cfg, bundle, params=ck.build_parameters(), start_step=ck.step)


# -- probes --------------------------------------------------------------------------------


def encode_individually(params, mcfg: ModelConfig, pairs) -> tuple[np.ndarray, np.ndarray]:
    """(image, text) representation matrices for (regions, token_ids) pairs,
    each sample encoded alone."""
    img_packs = [assemble_single_image(r, mcfg) for r, _ in pairs]
    txt_packs = [assemble_single_text(ids, mcfg) for _, ids in pairs]
    with T.no_grad():
        h_img = forward(collate(img_packs), params, mcfg).h_img.data.copy()
        h_cls = forward(collate(txt_packs), params, mcfg).h_cls.data.copy()
    return h_img, h_cls


def probe_retrieval(params, mcfg: ModelConfig, pairs, k_list=(1, 5, 10)) -> dict:
    """Recall@K both directions over held pairs, ranking by individually
    encoded cosine similarity (ties broken by candidate index)."""
    if len(pairs) < 2:
        raise ContractError("retrieval probe needs at least 2 pairs")
    e_img, e_txt = encode_individually(params, mcfg, pairs)
    e_img = e_img / np.linalg.norm(e_img, axis=1, keepdims=True)
    e_txt = e_txt / np.linalg.norm(e_txt, axis=1, keepdims=True)
    scores = e_img @ e_txt.T  # [i, j] = sim(image_i, text_j)
    n = len(pairs)

    def recall(score_rows) -> dict:
        out = {}
        ranks = []
        for q in range(n):
            order = np.lexsort((np.arange(n), -score_rows[q]))
            ranks.append(int(np.flatnonzero(order == q)[0]))
        for k in k_list:
            out[int(k)] = float(np.mean([r < k for r in ranks]))
        return out

    return {
        "text_to_image": recall(scores.T),
        "image_to_text": recall(scores),
        "scores": scores,
    }


def probe_generation(params, mcfg: ModelConfig, items, max_len: int = 24) -> dict:
    """Greedy-regeneration accuracy for (regions, split) items: the fraction
    of target tokens (past the given [CLS]) reproduced at the right place."""
    total = matched = 0
    samples = []
    for regions, split in items:
        want = split.target_ids[1:]
        got = generate_greedy(params, mcfg, split.source_ids, regions, max_len=max(max_len, len(want)))
        m = sum(1 for a, b in zip(got, want) if a == b)
        matched += m
        total += len(want)
        samples.append({"want": want, "got": got})
    return {"token_accuracy": matched / total if total else 0.0, "samples": samples}
