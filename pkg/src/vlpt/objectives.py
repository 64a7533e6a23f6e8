"""Training objectives: cross-modal contrastive alignment, masked-region
reconstruction, and bidirectional / seq2seq language losses.

Per-position losses are mean-reduced so the three objective families stay on
comparable scales before being summed by the train step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, NothingToPredict, NumericError
from .model import (
    SEQ2SEQ,
    Batch,
    EncodedOutput,
    InputPack,
    ModelConfig,
    assemble_pair,
    assemble_single_image,
    assemble_single_text,
    collate,
    forward,
    lm_logits,
)
from .scenes import RegionMaskPlan, RegionSet
from .tensor import Tensor
from .textprep import MaskingPlan, Seq2SeqSplit

DEFAULT_TAU = 0.1

JOINT, INDIVIDUAL = "joint-encoded", "individually-encoded"


@dataclass
class SimilarityScore:
    value: float
    provenance: str  # JOINT or INDIVIDUAL


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity of two (N, H) tensors."""
    norms_a = T.sqrt(T.tsum(a * a, axis=-1))
    norms_b = T.sqrt(T.tsum(b * b, axis=-1))
    if np.any(norms_a.data == 0) or np.any(norms_b.data == 0):
        raise NumericError("cosine of a zero vector")
    return T.tsum(a * b, axis=-1) / (norms_a * norms_b)


def similarity(image_repr: Tensor, text_repr: Tensor) -> Tensor:
    """Plain cosine between the whole-image and whole-text vectors; no
    learned projection head."""
    if image_repr.shape != text_repr.shape:
        raise ContractError("similarity needs equal-dimension representations")
    return T.reshape(cosine_rows(T.reshape(image_repr, (1, -1)), T.reshape(text_repr, (1, -1))), ())


# -- contrastive loss -----------------------------------------------------------------


@dataclass
class CmclBatchScores:
    """Score families for one anchor pair. pos_p must be nonempty (the
    anchor itself counts as a positive pair); any family may be absent."""

    pos_p: Tensor | None
    pos_i: Tensor | None
    pos_t: Tensor | None
    neg_p: Tensor | None
    neg_i: Tensor | None
    neg_t: Tensor | None
    tau: float = DEFAULT_TAU

    def _gather(self, names) -> Tensor | None:
        present = [getattr(self, n) for n in names]
        present = [p for p in present if p is not None and p.data.size > 0]
        if not present:
            return None
        return T.concat([T.reshape(p, (-1,)) for p in present], axis=0)

    def all_pos(self) -> Tensor | None:
        return self._gather(("pos_p", "pos_i", "pos_t"))

    def all_neg(self) -> Tensor | None:
        return self._gather(("neg_p", "neg_i", "neg_t"))


def cmcl_loss(scores: CmclBatchScores) -> Tensor:
    """-log of the positive-mass share: softplus(lse(neg/tau) - lse(pos/tau)).

    Always >= 0; exactly 0 with no negatives; strictly decreasing in every
    positive score and increasing in every negative one."""
    if scores.tau <= 0:
        raise ContractError("temperature must be positive")
    pos = scores.all_pos()
    if pos is None:
        raise ContractError("cmcl_loss needs at least one positive score")
    neg = scores.all_neg()
    if neg is None:
        return T.as_tensor(0.0)
    lse_pos = T.logsumexp(pos * (1.0 / scores.tau))
    lse_neg = T.logsumexp(neg * (1.0 / scores.tau))
    return T.reshape(T.softplus(lse_neg - lse_pos), ())


# -- group scoring ----------------------------------------------------------------------


@dataclass
class GroupData:
    """A contrastive group resolved to model inputs: the anchor pair plus
    tokenized rewrites and retrieved neighbors."""

    pair_id: str
    regions: RegionSet
    caption_ids: list[int]
    positive_ids: list[list[int]]
    negative_ids: list[list[int]]
    retrieved_images: list[RegionSet]
    retrieved_text_ids: list[list[int]]


@dataclass
class ScoringMode:
    """Hybrid (default): rewritten pairs are joint-encoded, retrieved and
    in-batch singles individually encoded. individual=True encodes
    everything individually. peer_retrieved_negatives extends the in-batch
    negative pool beyond the (B-1) peer anchors to the peers' retrieved
    images/texts, so a retrieved single scored positively for one group is
    a negative for every other group."""

    individual: bool = False
    peer_retrieved_negatives: bool = True


def score_cmcl_groups(
    groups: list[GroupData],
    params,
    config: ModelConfig,
    tau: float = DEFAULT_TAU,
    mode: ScoringMode | None = None,
    train: bool = False,
    rng=None,
) -> list[CmclBatchScores]:
    """Score every group against its own augmentations and the other groups
    in the batch (whose anchors act as in-batch negatives). All packs run
    through one collated forward."""
    mode = mode or ScoringMode()
    packs: list[InputPack] = []

    def push(pack) -> int:
        packs.append(pack)
        return len(packs) - 1

    joint_idx: dict[tuple, int] = {}
    img_idx: dict[int, int] = {}
    txt_idx: dict[int, int] = {}
    ret_img_idx: dict[tuple, int] = {}
    ret_txt_idx: dict[tuple, int] = {}
    for gi, g in enumerate(groups):
        img_idx[gi] = push(assemble_single_image(g.regions, config, f"{g.pair_id}/img"))
        txt_idx[gi] = push(assemble_single_text(g.caption_ids, config, f"{g.pair_id}/txt"))
        if mode.individual:
            for pi, ids in enumerate(g.positive_ids):
                joint_idx[(gi, "pos", pi)] = push(assemble_single_text(ids, config))
            for ni, ids in enumerate(g.negative_ids):
                joint_idx[(gi, "neg", ni)] = push(assemble_single_text(ids, config))
        else:
            joint_idx[(gi, "anchor", 0)] = push(assemble_pair(g.regions, g.caption_ids, config))
            for pi, ids in enumerate(g.positive_ids):
                joint_idx[(gi, "pos", pi)] = push(assemble_pair(g.regions, ids, config))
            for ni, ids in enumerate(g.negative_ids):
                joint_idx[(gi, "neg", ni)] = push(assemble_pair(g.regions, ids, config))
        for ri, regions in enumerate(g.retrieved_images):
            ret_img_idx[(gi, ri)] = push(assemble_single_image(regions, config))
        for ti, ids in enumerate(g.retrieved_text_ids):
            ret_txt_idx[(gi, ti)] = push(assemble_single_text(ids, config))

    enc = forward(collate(packs), params, config, train=train, rng=rng)
    h_img, h_cls = enc.h_img, enc.h_cls

    def cos_at(img_rows: list[int], txt_rows: list[int]) -> Tensor | None:
        if not img_rows:
            return None
        return cosine_rows(h_img[np.array(img_rows)], h_cls[np.array(txt_rows)])

    out = []
    for gi, g in enumerate(groups):
        if mode.individual:
            pos_rows_img = [img_idx[gi]] + [img_idx[gi]] * len(g.positive_ids)
            pos_rows_txt = [txt_idx[gi]] + [
                joint_idx[(gi, "pos", pi)] for pi in range(len(g.positive_ids))
            ]
            neg_rows_img = [img_idx[gi]] * len(g.negative_ids)
            neg_rows_txt = [joint_idx[(gi, "neg", ni)] for ni in range(len(g.negative_ids))]
        else:
            anchor_rows = [joint_idx[(gi, "anchor", 0)]] + [
                joint_idx[(gi, "pos", pi)] for pi in range(len(g.positive_ids))
            ]
            pos_rows_img = pos_rows_txt = anchor_rows
            neg_rows = [joint_idx[(gi, "neg", ni)] for ni in range(len(g.negative_ids))]
            neg_rows_img = neg_rows_txt = neg_rows
        peers = [gj for gj in range(len(groups)) if gj != gi]
        ret_i = [ret_img_idx[(gi, ri)] for ri in range(len(g.retrieved_images))]
        ret_t = [ret_txt_idx[(gi, ti)] for ti in range(len(g.retrieved_text_ids))]
        neg_img_rows = [img_idx[gj] for gj in peers]
        neg_txt_rows = [txt_idx[gj] for gj in peers]
        if mode.peer_retrieved_negatives:
            for gj in peers:
                neg_img_rows += [
                    ret_img_idx[(gj, ri)] for ri in range(len(groups[gj].retrieved_images))
                ]
                neg_txt_rows += [
                    ret_txt_idx[(gj, ti)] for ti in range(len(groups[gj].retrieved_text_ids))
                ]
        out.append(
            CmclBatchScores(
                pos_p=cos_at(pos_rows_img, pos_rows_txt),
                pos_i=cos_at(ret_i, [txt_idx[gi]] * len(ret_i)),
                pos_t=cos_at([img_idx[gi]] * len(ret_t), ret_t),
                neg_p=cos_at(neg_rows_img, neg_rows_txt),
                neg_i=cos_at(neg_img_rows, [txt_idx[gi]] * len(neg_img_rows)),
                neg_t=cos_at([img_idx[gi]] * len(neg_txt_rows), neg_txt_rows),
                tau=tau,
            )
        )
    return out


def score_cmcl_group(
    group: GroupData,
    batch_peers: list[GroupData],
    params,
    config: ModelConfig,
    tau: float = DEFAULT_TAU,
    mode: ScoringMode | None = None,
) -> CmclBatchScores:
    """Score one group with the given peers supplying in-batch negatives."""
    return score_cmcl_groups([group] + list(batch_peers), params, config, tau, mode)[0]


# -- reconstruction losses ------------------------------------------------------------------


def visual_loss(
    hidden: Tensor,
    plans: list[RegionMaskPlan | None],
    params,
    config: ModelConfig,
) -> Tensor:
    """Feature regression + soft-label region classification, averaged over
    all masked regions in the batch. Empty plans cost exactly 0."""
    rows_b, rows_s, feat_targets, class_targets = [], [], [], []
    for bi, plan in enumerate(plans):
        if plan is None or plan.is_empty():
            continue
        for k, ridx in enumerate(plan.masked_indices):
            rows_b.append(bi)
            rows_s.append(1 + ridx)
            feat_targets.append(plan.feature_targets[k])
            class_targets.append(plan.class_targets[k])
    if not rows_b:
        return T.as_tensor(0.0)
    h = hidden[(np.array(rows_b), np.array(rows_s))]
    regr = T.matmul(h, params["vis_regr_w"]) + params["vis_regr_b"]
    diff = regr - Tensor._wrap(np.array(feat_targets))
    sq = T.tsum(diff * diff, axis=-1)
    logits = T.matmul(h, params["vis_cls_w"]) + params["vis_cls_b"]
    ce = -T.tsum(T.log_softmax(logits) * Tensor._wrap(np.array(class_targets)), axis=-1)
    return T.tmean(sq + ce)


def bidirectional_loss(
    hidden: Tensor,
    plans: list[MaskingPlan | None],
    params,
    config: ModelConfig,
) -> Tensor:
    """Mean negative log-likelihood of the original ids at masked positions
    (keep/random positions included)."""
    rows_b, rows_s, targets = [], [], []
    for bi, plan in enumerate(plans):
        if plan is None or not plan.positions:
            continue
        for pos, target in zip(plan.positions, plan.targets):
            rows_b.append(bi)
            rows_s.append(config.text_start + pos)
            targets.append(target)
    if not rows_b:
        raise NothingToPredict("no masked token positions in the batch")
    h = hidden[(np.array(rows_b), np.array(rows_s))]
    logp = T.log_softmax(lm_logits(h, params))
    picked = logp[(np.arange(len(targets)), np.array(targets))]
    return -T.tmean(picked)


def seq2seq_loss(
    hidden: Tensor,
    splits: list[Seq2SeqSplit | None],
    params,
    config: ModelConfig,
) -> Tensor:
    """Mean NLL of each target token given the source and the preceding
    target tokens. The pack text must be source_ids + target_ids under a
    seq2seq mask; the leading [CLS] of the target is given, everything
    after it (fragment wrappers included) is predicted."""
    rows_b, rows_s, targets = [], [], []
    for bi, split in enumerate(splits):
        if split is None:
            continue
        src_len = len(split.source_ids)
        t = split.target_ids
        for j in range(len(t) - 1):
            rows_b.append(bi)
            rows_s.append(config.text_start + src_len + j)
            targets.append(t[j + 1])
    if not rows_b:
        raise NothingToPredict("no seq2seq targets in the batch")
    h = hidden[(np.array(rows_b), np.array(rows_s))]
    logp = T.log_softmax(lm_logits(h, params))
    picked = logp[(np.arange(len(targets)), np.array(targets))]
    return -T.tmean(picked)
