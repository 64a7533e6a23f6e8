"""Contrastive-group construction: sentence-level positives via round-trip
paraphrasing, word/phrase/sentence-level hard negatives via scene-graph
rewriting and TF-IDF caption mining, ranked by n-gram fluency.

The translator is an interface; the bundled DeterministicParaphraser stands
in for real round-trip machine translation so groups replay bit-identically
from their seed.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

from .errors import ConfigError, InputError
from .grammar import CaptionGrammar, SceneGraph
from .rng import RngState, as_generator
from .tfidf import term_counts, terms_of, tfidf_vector, cosine_sparse

log = logging.getLogger(__name__)

GROUP_PIPELINE_VERSION = 1

# group-size defaults at full scale; desk configs shrink proportionally
N_POSITIVES = 3
N_NEGATIVES = 100
N_RETRIEVED_IMAGES = 100
N_RETRIEVED_TEXTS = 100


# -- sentence-level positives -------------------------------------------------------


class DeterministicParaphraser:
    """Round-trip "translation" by per-pivot synonym tables and clause
    reordering. Same input and pivot always give the same output."""

    _RULES: dict[str, dict[str, str]] = {
        "zh": {"a": "one", "small": "tiny", "large": "big"},
        "fr": {"beside": "next to", "red": "crimson", "near": "close to"},
        "es": {"under": "beneath", "shiny": "gleaming", "on": "upon"},
        "de": {"wooden": "timber", "behind": "at the back of"},
        "ru": {"round": "circular", "green": "emerald", "above": "over"},
        "ja": {"blue": "azure", "cup": "mug", "car": "automobile"},
    }
    _REORDERING = frozenset({"de", "ja"})

    @property
    def pivots(self) -> tuple[str, ...]:
        return tuple(self._RULES)

    def round_trip(self, text: str, pivot: str) -> str:
        rules = self._RULES[pivot]
        words = text.split(" ")
        out = " ".join(rules.get(w, w) for w in words)
        if pivot in self._REORDERING:
            clauses = out.split(" and ")
            if len(clauses) > 1:
                out = " and ".join(reversed(clauses))
        return out


def back_translate(caption: str, translator, n_positives: int = N_POSITIVES) -> list[str]:
    """Round-trip the caption through pivot languages until n_positives
    distinct candidates exist; duplicates collapse and further pivots refill.

    Degenerate translators may yield candidates equal to the caption (kept,
    deduplicated) or fewer than requested (logged)."""
    candidates: list[str] = []
    rewritten: list[str] = []
    for pivot in translator.pivots:
        if len(rewritten) >= n_positives:
            break
        try:
            cand = translator.round_trip(caption, pivot)
        except Exception as e:  # translator failure: build with fewer, keep going
            log.warning("translator failed on pivot %s: %s", pivot, e)
            continue
        bucket = rewritten if cand != caption else candidates
        if cand not in rewritten and cand not in candidates:
            bucket.append(cand)
    out = (rewritten + candidates)[:n_positives]
    if len(out) < n_positives:
        log.info("back_translate produced %d/%d positives for %r", len(out), n_positives, caption)
    return out


# -- word/phrase-level rewriting --------------------------------------------------------


@dataclass
class RewriteVocabularies:
    """Object/attribute/relation vocabularies with corpus frequencies."""

    objects: dict[str, int] = field(default_factory=dict)
    attributes: dict[str, int] = field(default_factory=dict)
    relations: dict[str, int] = field(default_factory=dict)

    def validate(self) -> None:
        if not (self.objects and self.attributes and self.relations):
            raise ConfigError("rewrite vocabularies must be nonempty")


def build_rewrite_vocabularies(captions, grammar: CaptionGrammar) -> RewriteVocabularies:
    vocabs = RewriteVocabularies()
    for caption in captions:
        g = grammar.parse(caption)
        for o in g.objects:
            vocabs.objects[o] = vocabs.objects.get(o, 0) + 1
        for _, a in g.attributes:
            vocabs.attributes[a] = vocabs.attributes.get(a, 0) + 1
        for _, r, _ in g.relations:
            vocabs.relations[r] = vocabs.relations.get(r, 0) + 1
    vocabs.validate()
    return vocabs


def _replace_object(graph: SceneGraph, old: str, new: str) -> SceneGraph:
    return SceneGraph(
        objects=[new if o == old else o for o in graph.objects],
        attributes=[(new if o == old else o, a) for o, a in graph.attributes],
        relations=[
            (new if s == old else s, r, new if o == old else o) for s, r, o in graph.relations
        ],
    )


def rewrite_graph_nodes(
    graph: SceneGraph,
    vocabs: RewriteVocabularies,
    rng,
    n_candidates: int,
    grammar: CaptionGrammar,
) -> list[str]:
    """Captions re-rendered after replacing exactly one graph node with a
    different same-kind vocabulary entry. The node kind is drawn uniformly
    over the kinds present in the graph; candidates are distinct from the
    original and from each other."""
    gen = as_generator(rng)
    original = grammar.render(graph)
    kinds = []
    if graph.objects and len(vocabs.objects) > 1:
        kinds.append("object")
    if graph.attributes and len(vocabs.attributes) > 1:
        kinds.append("attribute")
    if graph.relations and len(vocabs.relations) > 1:
        kinds.append("relation")
    if not kinds:
        log.info("rewrite: no replaceable nodes for %r", original)
        return []

    obj_vocab = sorted(vocabs.objects)
    attr_vocab = sorted(vocabs.attributes)
    rel_vocab = sorted(vocabs.relations)

    out: list[str] = []
    seen = {original}
    attempts = 0
    while len(out) < n_candidates and attempts < 30 * n_candidates:
        attempts += 1
        kind = kinds[int(gen.integers(0, len(kinds)))]
        if kind == "object":
            old = graph.objects[int(gen.integers(0, len(graph.objects)))]
            pool = [o for o in obj_vocab if o not in graph.objects]
            if not pool:
                continue
            new = pool[int(gen.integers(0, len(pool)))]
            candidate = _replace_object(graph, old, new)
        elif kind == "attribute":
            k = int(gen.integers(0, len(graph.attributes)))
            owner, old = graph.attributes[k]
            pool = [a for a in attr_vocab if a != old]
            new = pool[int(gen.integers(0, len(pool)))]
            attributes = list(graph.attributes)
            attributes[k] = (owner, new)
            candidate = SceneGraph(list(graph.objects), attributes, list(graph.relations))
        else:
            k = int(gen.integers(0, len(graph.relations)))
            s, old, o = graph.relations[k]
            pool = [r for r in rel_vocab if r != old]
            new = pool[int(gen.integers(0, len(pool)))]
            relations = list(graph.relations)
            relations[k] = (s, new, o)
            candidate = SceneGraph(list(graph.objects), list(graph.attributes), relations)
        caption = grammar.render(candidate)
        if caption not in seen:
            seen.add(caption)
            out.append(caption)
    if len(out) < n_candidates:
        log.info("rewrite: only %d/%d candidates for %r", len(out), n_candidates, original)
    return out


# -- sentence-level hard negatives ----------------------------------------------------------


class HardNegativeMiner:
    """TF-IDF caption mining over an (image_id, caption) corpus."""

    def __init__(self, corpus):
        self.records = list(corpus)
        df: dict[str, int] = {}
        self._tokens = [terms_of(c) for _, c in self.records]
        for tokens in self._tokens:
            for term in set(tokens):
                df[term] = df.get(term, 0) + 1
        self.df = df
        self.n = len(self.records)
        self.vectors = [tfidf_vector(term_counts(t), df, self.n) for t in self._tokens]

    def mine(self, caption: str, k: int, exclude_image=None) -> list[str]:
        qvec = tfidf_vector(term_counts(terms_of(caption)), self.df, self.n)
        scored = []
        for idx, (image_id, text) in enumerate(self.records):
            if exclude_image is not None and image_id == exclude_image:
                continue
            scored.append((idx, cosine_sparse(qvec, self.vectors[idx])))
        if len(scored) < k:
            log.info("mining: corpus has only %d foreign captions (k=%d)", len(scored), k)
        scored.sort(key=lambda kv: (-kv[1], kv[0]))
        return [self.records[idx][1] for idx, _ in scored[:k]]


def mine_hard_negative_captions(caption: str, caption_corpus, k: int, exclude_image=None) -> list[str]:
    """One-shot convenience over HardNegativeMiner (corpus stats built here)."""
    return HardNegativeMiner(caption_corpus).mine(caption, k, exclude_image)


# -- fluency ranking ------------------------------------------------------------------------


class KneserNeyTrigram:
    """Interpolated Kneser-Ney trigram over word tokens.

    A small uniform mixing floor keeps the log-probability finite for any
    sequence, including unseen words.
    """

    BOS = "<s>"
    EOS = "</s>"

    def __init__(self, discount: float = 0.75, uniform_mix: float = 1e-3):
        self.discount = discount
        self.uniform_mix = uniform_mix
        self.tri: dict[tuple[str, str, str], int] = {}
        self.tri_ctx: dict[tuple[str, str], int] = {}
        self.tri_follow: dict[tuple[str, str], int] = {}
        self.cont2: dict[tuple[str, str], int] = {}
        self.cont2_ctx: dict[str, int] = {}
        self.cont2_follow: dict[str, int] = {}
        self.cont1: dict[str, int] = {}
        self.total_bigram_types = 0
        self.vocab: set[str] = set()

    def fit(self, token_lists) -> "KneserNeyTrigram":
        tri_types: set[tuple[str, str, str]] = set()
        for tokens in token_lists:
            seq = [self.BOS, self.BOS] + list(tokens) + [self.EOS]
            self.vocab.update(tokens)
            for i in range(2, len(seq)):
                key = (seq[i - 2], seq[i - 1], seq[i])
                self.tri[key] = self.tri.get(key, 0) + 1
                ctx = key[:2]
                self.tri_ctx[ctx] = self.tri_ctx.get(ctx, 0) + 1
                if key not in tri_types:
                    tri_types.add(key)
                    self.tri_follow[ctx] = self.tri_follow.get(ctx, 0) + 1
                    bi = (key[1], key[2])
                    if bi not in self.cont2:
                        self.cont2[bi] = 0
                        self.cont2_follow[key[1]] = self.cont2_follow.get(key[1], 0) + 1
                        if key[2] not in self.cont1:
                            self.cont1[key[2]] = 0
                        self.cont1[key[2]] += 1
                        self.total_bigram_types += 1
                    self.cont2[bi] += 1
                    self.cont2_ctx[key[1]] = self.cont2_ctx.get(key[1], 0) + 1
        return self

    def _p_unigram(self, w: str) -> float:
        if self.total_bigram_types == 0:
            return 0.0
        return self.cont1.get(w, 0) / self.total_bigram_types

    def _p_bigram(self, w2: str, w: str) -> float:
        ctx = self.cont2_ctx.get(w2, 0)
        if ctx == 0:
            return self._p_unigram(w)
        d = self.discount
        hi = max(self.cont2.get((w2, w), 0) - d, 0.0) / ctx
        lam = d * self.cont2_follow.get(w2, 0) / ctx
        return hi + lam * self._p_unigram(w)

    def _p_trigram(self, w1: str, w2: str, w: str) -> float:
        ctx = self.tri_ctx.get((w1, w2), 0)
        if ctx == 0:
            return self._p_bigram(w2, w)
        d = self.discount
        hi = max(self.tri.get((w1, w2, w), 0) - d, 0.0) / ctx
        lam = d * self.tri_follow.get((w1, w2), 0) / ctx
        return hi + lam * self._p_bigram(w2, w)

    def logprob(self, tokens) -> float:
        """Mean per-token log-probability (finite for any input)."""
        seq = [self.BOS, self.BOS] + list(tokens) + [self.EOS]
        u = self.uniform_mix
        floor_v = 1.0 / (len(self.vocab) + 1)
        total = 0.0
        n = 0
        for i in range(2, len(seq)):
            p = self._p_trigram(seq[i - 2], seq[i - 1], seq[i])
            total += math.log((1.0 - u) * p + u * floor_v)
            n += 1
        return total / max(n, 1)


def rank_by_fluency(candidates, fluency_model, keep: int) -> list[str]:
    """Candidates sorted by mean token log-probability (descending, stable),
    truncated to `keep`."""
    scored = [(fluency_model.logprob(terms_of(c)), c) for c in candidates]
    order = sorted(range(len(scored)), key=lambda i: -scored[i][0])
    return [scored[i][1] for i in order[:keep]]


# -- group assembly --------------------------------------------------------------------------


@dataclass
class GroupConfig:
    """How many of each augmentation a group carries."""

    n_positives: int = N_POSITIVES
    n_negatives: int = N_NEGATIVES
    n_images: int = N_RETRIEVED_IMAGES
    n_texts: int = N_RETRIEVED_TEXTS
    rewrite_factor: int = 2  # rewrite candidates = factor * n_negatives
    text_filter_k: int = 1000
    text_rerank_k: int = 100


@dataclass
class AugmentPipelines:
    """Everything group building needs, built once per corpus."""

    grammar: CaptionGrammar
    vocabs: RewriteVocabularies
    translator: object
    fluency: KneserNeyTrigram
    miner: HardNegativeMiner
    image_index: object
    text_index: object
    embedder: object


@dataclass
class CmclGroup:
    """One anchor pair with rewritten positives, hard negatives, and
    retrieved single-modal neighbors; replayable from its seed."""

    pair_id: str
    caption: str
    positives: list[str]
    negatives: list[str]
    image_ids: list[str]
    text_ids: list[str]
    seed: int = 0
    rng_key: list[int] = field(default_factory=list)
    pipeline_version: int = GROUP_PIPELINE_VERSION
    flags: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "CmclGroup":
        return cls(**json.loads(line))


def build_cmcl_group(
    pair_id: str,
    regions,
    caption: str,
    config: GroupConfig,
    pipes: AugmentPipelines,
    rng: RngState,
) -> CmclGroup:
    """Assemble one group: positives from the translator, negatives from the
    joint rewrite+mined pool ranked by fluency, and retrieved images/texts.

    Short sub-pipelines produce a smaller group with a flag rather than an
    error; the anchor caption and the positives never appear as negatives."""
    from .retrieval import retrieve_images, retrieve_texts

    flags: list[str] = []
    positives = (
        back_translate(caption, pipes.translator, config.n_positives)
        if config.n_positives > 0
        else []
    )
    if len(positives) < config.n_positives:
        flags.append("few_positives")

    negatives: list[str] = []
    if config.n_negatives > 0:
        graph = pipes.grammar.parse(caption)
        rewrites = rewrite_graph_nodes(
            graph, pipes.vocabs, rng.fork("rewrite"), config.rewrite_factor * config.n_negatives,
            pipes.grammar,
        )
        mined = pipes.miner.mine(caption, config.n_negatives, exclude_image=pair_id)
        banned = {caption, *positives}
        pool, seen = [], set()
        for cand in rewrites + mined:
            if cand not in banned and cand not in seen:
                seen.add(cand)
                pool.append(cand)
        negatives = rank_by_fluency(pool, pipes.fluency, config.n_negatives)
        if len(negatives) < config.n_negatives:
            flags.append("few_negatives")

    image_ids: list[str] = []
    if config.n_images > 0:
        query = pair_id if pair_id in getattr(pipes.image_index, "vectors", {}) else regions
        image_ids = retrieve_images(query, pipes.image_index, config.n_images)
        if len(image_ids) < config.n_images:
            flags.append("few_images")

    text_ids: list[str] = []
    if config.n_texts > 0:
        text_ids = retrieve_texts(
            caption,
            pipes.text_index,
            pipes.embedder,
            k_filter=config.text_filter_k,
            k_rerank=config.text_rerank_k,
            exclude_id=f"cap/{pair_id}",
        )[: config.n_texts]
        if len(text_ids) < config.n_texts:
            flags.append("few_texts")

    return CmclGroup(
        pair_id=pair_id,
        caption=caption,
        positives=positives,
        negatives=negatives,
        image_ids=image_ids,
        text_ids=text_ids,
        seed=rng.seed,
        rng_key=list(rng.key),
        flags=flags,
    )


GROUP_FILE_VERSION = "vlpt-groups 1"


def write_group_file(path, groups) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": GROUP_FILE_VERSION}) + "\n")
        for g in groups:
            fh.write(g.to_json() + "\n")


def read_group_file(path) -> list[CmclGroup]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        try:
            if json.loads(header).get("format") != GROUP_FILE_VERSION:
                raise InputError(f"{path}: unsupported group file version")
        except json.JSONDecodeError as e:
            raise InputError(f"{path}: not a group file") from e
        return [CmclGroup.from_json(line) for line in fh if line.strip()]
