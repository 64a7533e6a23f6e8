"""The unified transformer over joint region/token sequences.

Every sample, whatever its modality, is laid out as

    [IMG] v_1 .. v_R  [CLS] w_1 .. w_n [SEP]  (padded to fixed width)

with the missing modality filled by pseudo slots that are masked out of
attention in both directions. Masked softmax assigns pseudo columns
probability exactly 0, so real-slot outputs are bitwise independent of
pseudo content and pseudo embeddings receive exactly-zero gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .bpe import CLS, IMG, PAD, SEP
from .errors import ContractError, NumericError
from .rng import RngState, as_generator
from .scenes import RegionSet
from .tensor import Parameter, Tensor


@dataclass(frozen=True)
class ModelConfig:
    """Transformer shape. Desk-scale defaults; `base()`/`large()` give the
    full-scale presets."""

    vocab_size: int
    n_layers: int = 2
    hidden: int = 64
    ffn: int = 256
    heads: int = 4
    dropout: float = 0.1
    attn_dropout: float = 0.1
    max_text: int = 64
    max_regions: int = 10
    d_v: int = 32
    n_classes: int = 16

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ContractError("hidden size must divide evenly into heads")

    @classmethod
    def base(cls, vocab_size: int, **kw) -> "ModelConfig":
        defaults = dict(
            n_layers=12, hidden=768, ffn=3072, heads=12, max_text=512, max_regions=100,
            d_v=2048, n_classes=1600,
        )
        defaults.update(kw)
        return cls(vocab_size=vocab_size, **defaults)

    @classmethod
    def large(cls, vocab_size: int, **kw) -> "ModelConfig":
        defaults = dict(
            n_layers=24, hidden=1024, ffn=4096, heads=16, max_text=512, max_regions=100,
            d_v=2048, n_classes=1600,
        )
        defaults.update(kw)
        return cls(vocab_size=vocab_size, **defaults)

    @property
    def n_slots(self) -> int:
        return 1 + self.max_regions + self.max_text

    @property
    def text_start(self) -> int:
        """Layout position of [CLS]: right after the fixed-width region span."""
        return 1 + self.max_regions

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


FULL_BOX_GEOMETRY = np.array([0.0, 0.0, 1.0, 1.0, 1.0])

BIDIRECTIONAL, SEQ2SEQ = "bidirectional", "seq2seq"


@dataclass
class InputPack:
    """One model-ready sample: slot arrays plus the 2-D attention mask.

    `real` marks genuine content; everything else (padding and pseudo
    slots) can neither attend nor be attended to — their softmax rows are
    fully masked and come out as exact zeros.
    """

    token_ids: np.ndarray
    features: np.ndarray
    geometry: np.ndarray
    pos_ids: np.ndarray
    segment_ids: np.ndarray
    token_mask: np.ndarray
    feature_mask: np.ndarray
    real: np.ndarray
    attn: np.ndarray
    region_count: int
    text_len: int
    mode: str = BIDIRECTIONAL
    source_len: int | None = None  # real-slot count of the source, seq2seq only
    sample_id: str = ""
    kind: str = "pair"

    def text_slot(self, token_index: int, config: ModelConfig) -> int:
        return config.text_start + token_index

    def region_slot(self, region_index: int) -> int:
        return 1 + region_index


def _base_pack(config: ModelConfig) -> InputPack:
    s = config.n_slots
    token_ids = np.full(s, PAD, dtype=np.int64)
    token_ids[0] = IMG
    pos_ids = np.zeros(s, dtype=np.int64)
    pos_ids[: config.text_start] = np.arange(config.text_start)
    pos_ids[config.text_start :] = np.arange(config.max_text)  # positions restart at text
    segment_ids = np.zeros(s, dtype=np.int64)
    segment_ids[config.text_start :] = 1
    token_mask = np.zeros(s)
    token_mask[0] = 1.0
    token_mask[config.text_start :] = 1.0
    geometry = np.zeros((s, 5))
    geometry[0] = FULL_BOX_GEOMETRY
    return InputPack(
        token_ids=token_ids,
        features=np.zeros((s, config.d_v)),
        geometry=geometry,
        pos_ids=pos_ids,
        segment_ids=segment_ids,
        token_mask=token_mask,
        feature_mask=np.zeros(s),
        real=np.zeros(s, dtype=bool),
        attn=np.zeros((s, s), dtype=bool),
        region_count=0,
        text_len=0,
    )


def _finish_mask(pack: InputPack) -> InputPack:
    pack.attn = np.outer(pack.real, pack.real)
    pack.mode = BIDIRECTIONAL
    pack.source_len = None
    return pack


def _fill_regions(pack: InputPack, regions: RegionSet, config: ModelConfig, real: bool) -> None:
    t = len(regions)
    if t > config.max_regions:
        raise ContractError(
            f"{t} regions exceed the pack capacity {config.max_regions}; pre-truncate"
        )
    for i, box in enumerate(regions.boxes):
        pack.geometry[1 + i] = box.geometry()
    if t:
        pack.features[1 : 1 + t] = regions.features
        pack.feature_mask[1 : 1 + t] = 1.0
    pack.real[0] = real
    pack.real[1 : 1 + t] = real
    pack.region_count = t


def _fill_text(pack: InputPack, token_ids, config: ModelConfig, real: bool) -> None:
    n = len(token_ids)
    if n > config.max_text:
        raise ContractError(f"{n} tokens exceed the pack capacity {config.max_text}; pre-truncate")
    if n:
        pack.token_ids[config.text_start : config.text_start + n] = token_ids
        pack.real[config.text_start : config.text_start + n] = real
    pack.text_len = n


def assemble_pair(regions: RegionSet, token_ids, config: ModelConfig, sample_id: str = "") -> InputPack:
    """Joint layout with fully-visible attention among all real slots."""
    if len(token_ids) < 3:
        raise ContractError("pair captions must carry a nonempty token interior")
    pack = _base_pack(config)
    _fill_regions(pack, regions, config, real=True)
    _fill_text(pack, token_ids, config, real=True)
    pack.sample_id, pack.kind = sample_id, "pair"
    return _finish_mask(pack)


def assemble_single_text(token_ids, config: ModelConfig, sample_id: str = "") -> InputPack:
    """Text-only sample: the visual span is a pseudo [IMG] + zero features,
    masked out both directions."""
    pack = _base_pack(config)
    _fill_text(pack, token_ids, config, real=True)
    pack.sample_id, pack.kind = sample_id, "text"
    return _finish_mask(pack)


def assemble_single_image(regions: RegionSet, config: ModelConfig, sample_id: str = "") -> InputPack:
    """Image-only sample: the text span is a pseudo [CLS][SEP], masked out
    both directions."""
    pack = _base_pack(config)
    _fill_regions(pack, regions, config, real=True)
    _fill_text(pack, [CLS, SEP], config, real=False)
    pack.sample_id, pack.kind = sample_id, "image"
    return _finish_mask(pack)


def build_attention_mode(pack: InputPack, mode: str, source_len: int | None = None) -> InputPack:
    """Install the attention pattern for `mode`.

    bidirectional: all real slots mutually visible. seq2seq: the first
    `source_len` real slots (layout order; regions count as source) are
    mutually visible, each later real slot sees the source plus its own
    left context."""
    out = replace(
        pack,
        token_ids=pack.token_ids.copy(),
        features=pack.features.copy(),
        geometry=pack.geometry.copy(),
        pos_ids=pack.pos_ids.copy(),
        segment_ids=pack.segment_ids.copy(),
        token_mask=pack.token_mask.copy(),
        feature_mask=pack.feature_mask.copy(),
        real=pack.real.copy(),
        attn=pack.attn.copy(),
    )
    if mode == BIDIRECTIONAL:
        return _finish_mask(out)
    if mode != SEQ2SEQ:
        raise ContractError(f"unknown attention mode {mode!r}")
    positions = np.flatnonzero(out.real)
    if source_len is None or not 0 <= source_len <= len(positions):
        raise ContractError(
            f"seq2seq source_len {source_len!r} outside [0, {len(positions)}]"
        )
    src = positions[:source_len]
    tgt = positions[source_len:]
    attn = np.zeros((len(out.real), len(out.real)), dtype=bool)
    attn[np.ix_(src, src)] = True
    for j, t in enumerate(tgt):
        attn[t, src] = True
        attn[t, tgt[: j + 1]] = True
    out.attn = attn
    out.mode = SEQ2SEQ
    out.source_len = source_len
    return out


@dataclass
class Batch:
    token_ids: np.ndarray
    features: np.ndarray
    geometry: np.ndarray
    pos_ids: np.ndarray
    segment_ids: np.ndarray
    token_mask: np.ndarray
    feature_mask: np.ndarray
    attn: np.ndarray
    packs: list[InputPack] = field(default_factory=list)

    def __len__(self):
        return self.token_ids.shape[0]


def collate(packs: list[InputPack]) -> Batch:
    return Batch(
        token_ids=np.stack([p.token_ids for p in packs]),
        features=np.stack([p.features for p in packs]),
        geometry=np.stack([p.geometry for p in packs]),
        pos_ids=np.stack([p.pos_ids for p in packs]),
        segment_ids=np.stack([p.segment_ids for p in packs]),
        token_mask=np.stack([p.token_mask for p in packs]),
        feature_mask=np.stack([p.feature_mask for p in packs]),
        attn=np.stack([p.attn for p in packs]),
        packs=list(packs),
    )


# -- parameters ---------------------------------------------------------------------


def init_params(config: ModelConfig, rng) -> dict[str, Parameter]:
    gen = as_generator(rng)
    dtype = T.get_default_dtype()
    params: dict[str, Parameter] = {}

    def normal(name, *shape):
        params[name] = Parameter((gen.normal(size=shape) * 0.02), name=name, dtype=dtype)

    def ones(name, n):
        params[name] = Parameter(np.ones(n), name=name, dtype=dtype)

    def zeros(name, *shape):
        params[name] = Parameter(np.zeros(shape), name=name, dtype=dtype)

    normal("tok_emb", config.vocab_size, config.hidden)
    normal("pos_emb", max(config.max_text, config.max_regions + 1), config.hidden)
    normal("seg_emb", 2, config.hidden)
    normal("feat_w", config.d_v, config.hidden)
    zeros("feat_b", config.hidden)
    normal("geom_w", 5, config.hidden)
    zeros("geom_b", config.hidden)
    ones("emb_ln_g", config.hidden)
    zeros("emb_ln_b", config.hidden)
    for i in range(config.n_layers):
        for side in ("q", "k", "v", "o"):
            normal(f"L{i}.attn_{side}_w", config.hidden, config.hidden)
            zeros(f"L{i}.attn_{side}_b", config.hidden)
        ones(f"L{i}.ln1_g", config.hidden)
        zeros(f"L{i}.ln1_b", config.hidden)
        normal(f"L{i}.ffn_in_w", config.hidden, config.ffn)
        zeros(f"L{i}.ffn_in_b", config.ffn)
        normal(f"L{i}.ffn_out_w", config.ffn, config.hidden)
        zeros(f"L{i}.ffn_out_b", config.hidden)
        ones(f"L{i}.ln2_g", config.hidden)
        zeros(f"L{i}.ln2_b", config.hidden)
    zeros("lm_bias", config.vocab_size)
    normal("vis_regr_w", config.hidden, config.d_v)
    zeros("vis_regr_b", config.d_v)
    normal("vis_cls_w", config.hidden, config.n_classes)
    zeros("vis_cls_b", config.n_classes)
    return params


def param_list(params: dict[str, Parameter]) -> list[Parameter]:
    return [params[k] for k in sorted(params)]


def zero_grads(params: dict[str, Parameter]) -> None:
    for p in params.values():
        p.grad = None


# -- forward -------------------------------------------------------------------------


@dataclass
class EncodedOutput:
    """Per-slot hidden states plus the whole-image/whole-text vectors."""

    hidden: Tensor
    embeddings: Tensor
    config: ModelConfig

    @property
    def h_img(self) -> Tensor:
        return self.hidden[:, 0]

    @property
    def h_cls(self) -> Tensor:
        return self.hidden[:, self.config.text_start]


def _embed(batch: Batch, params, config: ModelConfig) -> Tensor:
    tok = params["tok_emb"][batch.token_ids] * Tensor._wrap(batch.token_mask[:, :, None])
    feat = (T.matmul(T.as_tensor(batch.features), params["feat_w"]) + params["feat_b"]) * Tensor._wrap(
        batch.feature_mask[:, :, None]
    )
    geom_mask = (batch.segment_ids == 0).astype(batch.features.dtype)
    geom = (T.matmul(T.as_tensor(batch.geometry), params["geom_w"]) + params["geom_b"]) * Tensor._wrap(
        geom_mask[:, :, None]
    )
    pos = params["pos_emb"][batch.pos_ids]
    seg = params["seg_emb"][batch.segment_ids]
    total = tok + feat + geom + pos + seg
    return T.layer_norm(total, params["emb_ln_g"], params["emb_ln_b"])


def _attention(x: Tensor, i: int, params, config: ModelConfig, attn_mask, train, gen):
    b, s, h = x.shape
    nh, dh = config.heads, config.hidden // config.heads

    def proj(side):
        y = T.matmul(x, params[f"L{i}.attn_{side}_w"]) + params[f"L{i}.attn_{side}_b"]
        return T.transpose(T.reshape(y, (b, s, nh, dh)), (0, 2, 1, 3))

    q, k, v = proj("q"), proj("k"), proj("v")
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    probs = T.softmax_masked(scores, mask=attn_mask[:, None, :, :])
    if train and config.attn_dropout > 0:
        probs = T.dropout(probs, config.attn_dropout, gen)
    ctx = T.matmul(probs, v)
    merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, s, h))
    return T.matmul(merged, params[f"L{i}.attn_o_w"]) + params[f"L{i}.attn_o_b"]


def forward(
    batch: Batch | InputPack,
    params: dict[str, Parameter],
    config: ModelConfig,
    train: bool = False,
    rng: RngState | None = None,
) -> EncodedOutput:
    """Post-LN transformer stack over a collated batch (or one pack).

    Deterministic with dropout disabled (train=False). Raises NumericError
    naming the layer if any activation goes non-finite."""
    if isinstance(batch, InputPack):
        batch = collate([batch])
    gen = as_generator(rng.fork("dropout") if isinstance(rng, RngState) else rng) if train and rng is not None else None
    if train and (config.dropout > 0 or config.attn_dropout > 0) and gen is None:
        raise ContractError("training forward with dropout needs an rng")

    x = _embed(batch, params, config)
    embeddings = x
    if train and config.dropout > 0:
        x = T.dropout(x, config.dropout, gen)
    for i in range(config.n_layers):
        a = _attention(x, i, params, config, batch.attn, train, gen)
        if train and config.dropout > 0:
            a = T.dropout(a, config.dropout, gen)
        x = T.layer_norm(x + a, params[f"L{i}.ln1_g"], params[f"L{i}.ln1_b"])
        f = T.matmul(T.gelu(T.matmul(x, params[f"L{i}.ffn_in_w"]) + params[f"L{i}.ffn_in_b"]),
                     params[f"L{i}.ffn_out_w"]) + params[f"L{i}.ffn_out_b"]
        if train and config.dropout > 0:
            f = T.dropout(f, config.dropout, gen)
        x = T.layer_norm(x + f, params[f"L{i}.ln2_g"], params[f"L{i}.ln2_b"])
        if not np.all(np.isfinite(x.data)):
            raise NumericError(f"non-finite activation after layer {i}")
    return EncodedOutput(hidden=x, embeddings=embeddings, config=config)


def lm_logits(hidden_rows: Tensor, params) -> Tensor:
    """Vocabulary logits for (N, hidden) rows; the projection is tied to the
    token embedding."""
    return T.matmul(hidden_rows, T.transpose(params["tok_emb"], (1, 0))) + params["lm_bias"]


GENERATION_BANNED = (PAD, IMG)  # never produced by greedy decoding


def generate_greedy(
    params: dict[str, Parameter],
    config: ModelConfig,
    source_ids,
    regions: RegionSet | None,
    max_len: int,
) -> list[int]:
    """Grow the target greedily under the seq2seq mask: argmax next token,
    stop at [SEP] or after max_len tokens. Returns generated ids (the seed
    [CLS] excluded, the terminal [SEP] included)."""
    source_ids = list(source_ids)
    target = [CLS]
    out: list[int] = []
    visual_real = (1 + len(regions)) if regions is not None else 0
    with T.no_grad():
        for _ in range(max_len):
            text_ids = source_ids + target
            if len(text_ids) > config.max_text:
                break
            if regions is not None:
                pack = assemble_pair(regions, text_ids, config)
            else:
                pack = assemble_single_text(text_ids, config)
            pack = build_attention_mode(pack, SEQ2SEQ, visual_real + len(source_ids))
            enc = forward(pack, params, config)
            slot = config.text_start + len(text_ids) - 1
            logits = lm_logits(enc.hidden[:, slot], params).data[0].copy()
            logits[list(GENERATION_BANNED)] = -np.inf
            nxt = int(np.argmax(logits))
            out.append(nxt)
            if nxt == SEP:
                break
            target.append(nxt)
    return out
