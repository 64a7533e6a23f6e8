"""Synthetic corpus materialization and dataset loading.

A dataset directory holds pairs.jsonl / images.jsonl (scene records),
texts.txt (one sentence per line), and vocab.txt. CMCL groups live in a
separate groups.jsonl produced by the `augment` subcommand.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

from .augment import (
    AugmentPipelines,
    CmclGroup,
    DeterministicParaphraser,
    GroupConfig,
    HardNegativeMiner,
    KneserNeyTrigram,
    build_cmcl_group,
    build_rewrite_vocabularies,
    read_group_file,
    write_group_file,
)
from .bpe import Vocabulary, train_bpe
from .errors import ConfigError, EmptySceneError
from .rng import RngState
from .scenes import (
    SceneConfig,
    SceneRecord,
    default_scene_config,
    generate_synthetic_scene,
    read_scene_file,
    select_regions,
    write_scene_file,
)
from .tfidf import terms_of

log = logging.getLogger(__name__)

DEFAULT_VOCAB_SIZE = 400


@dataclass
class DataBundle:
    """Everything the trainer and probes read: pair/image/text streams,
    the vocabulary, and (optionally) prebuilt CMCL groups."""

    pairs: list[SceneRecord]
    images: list[SceneRecord]
    texts: list[tuple[str, str]]
    vocab: Vocabulary
    groups: dict[str, CmclGroup] = field(default_factory=dict)

    def __post_init__(self):
        self.scenes_by_id = {r.id: r.regions for r in self.pairs}
        self.scenes_by_id.update({r.id: r.regions for r in self.images})
        self.texts_by_id = dict(self.texts)
        self.texts_by_id.update({f"cap/{r.id}": r.caption for r in self.pairs})


def _make_scene(config: SceneConfig, rng: RngState, conf_threshold: float, max_boxes: int):
    """Generate and confidence-filter one scene, retrying the rare case
    where filtering empties it."""
    for attempt in range(8):
        scene, caption = generate_synthetic_scene(config, rng.fork(attempt))
        try:
            regions = select_regions(scene.regions, conf_threshold, max_boxes)
        except EmptySceneError:
            continue
        scene.regions = regions
        return scene, caption
    raise EmptySceneError("could not generate a scene surviving the confidence filter")


def generate_corpus(
    scene_config: SceneConfig | None = None,
    n_pairs: int = 32,
    n_images: int = 64,
    n_texts: int = 128,
    seed: int = 0,
    conf_threshold: float = 0.2,
    max_boxes: int = 10,
    vocab_size: int = DEFAULT_VOCAB_SIZE,
) -> DataBundle:
    """Materialize pair/image/text streams and train the vocabulary."""
    config = scene_config or default_scene_config()
    root = RngState(seed)
    pairs, images, texts = [], [], []
    for i in range(n_pairs):
        scene, caption = _make_scene(config, root.fork("pair", i), conf_threshold, max_boxes)
        pairs.append(SceneRecord(id=f"pair/{i:04d}", regions=scene.regions, caption=caption, graph=scene.graph))
    for i in range(n_images):
        scene, caption = _make_scene(config, root.fork("image", i), conf_threshold, max_boxes)
        images.append(SceneRecord(id=f"img/{i:04d}", regions=scene.regions, caption=caption, graph=scene.graph))
    gen = root.fork("texts").generator
    for i in range(n_texts):
        _, caption = generate_synthetic_scene(config, root.fork("text", i))
        lead = "there is " if gen.random() < 0.5 else ""
        texts.append((f"txt/{i:05d}", lead + caption))
    corpus_lines = [r.caption for r in pairs] + [t for _, t in texts]
    vocab = train_bpe(corpus_lines, vocab_size)
    return DataBundle(pairs=pairs, images=images, texts=texts, vocab=vocab)


def write_dataset(out_dir, bundle: DataBundle) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_scene_file(out / "pairs.jsonl", bundle.pairs)
    write_scene_file(out / "images.jsonl", bundle.images)
    with open(out / "texts.txt", "w", encoding="utf-8") as fh:
        for _, text in bundle.texts:
            fh.write(text + "\n")
    bundle.vocab.save(out / "vocab.txt")


def load_dataset(data_dir, groups_path=None) -> DataBundle:
    root = Path(data_dir)
    pairs = read_scene_file(root / "pairs.jsonl")
    images = read_scene_file(root / "images.jsonl")
    with open(root / "texts.txt", encoding="utf-8") as fh:
        texts = [(f"txt/{i:05d}", line.rstrip("\n")) for i, line in enumerate(fh) if line.strip()]
    vocab = Vocabulary.load(root / "vocab.txt")
    groups = {}
    if groups_path is not None:
        groups = {g.pair_id: g for g in read_group_file(groups_path)}
    return DataBundle(pairs=pairs, images=images, texts=texts, vocab=vocab, groups=groups)


def text_index_records(bundle: DataBundle, include_captions: bool = True) -> list[tuple[str, str]]:
    """Retrieval pool: corpus sentences plus (by default) all captions."""
    records = list(bundle.texts)
    if include_captions:
        records += [(f"cap/{r.id}", r.caption) for r in bundle.pairs]
    return records


def build_pipelines(
    bundle: DataBundle,
    embedder,
    scene_config: SceneConfig | None = None,
    include_captions_in_text_pool: bool = True,
) -> AugmentPipelines:
    """Assemble the augmentation pipelines over a loaded dataset."""
    from .retrieval import build_image_index, build_text_index

    config = scene_config or default_scene_config()
    grammar = config.grammar()
    captions = [r.caption for r in bundle.pairs]
    corpus_lines = captions + [t for _, t in bundle.texts]
    return AugmentPipelines(
        grammar=grammar,
        vocabs=build_rewrite_vocabularies(corpus_lines, grammar),
        translator=DeterministicParaphraser(),
        fluency=KneserNeyTrigram().fit([terms_of(c) for c in corpus_lines]),
        miner=HardNegativeMiner([(r.id, r.caption) for r in bundle.pairs]),
        image_index=build_image_index([(r.id, r.regions) for r in bundle.images]),
        text_index=build_text_index(
            text_index_records(bundle, include_captions_in_text_pool), embedder
        ),
        embedder=embedder,
    )


def augment_dataset(
    bundle: DataBundle,
    pipes: AugmentPipelines,
    group_config: GroupConfig,
    seed: int,
    out_path=None,
) -> dict[str, CmclGroup]:
    """Build one CMCL group per pair; optionally persist to a group file."""
    root = RngState(seed)
    groups = {}
    for rec in bundle.pairs:
        groups[rec.id] = build_cmcl_group(
            rec.id, rec.regions, rec.caption, group_config, pipes, root.fork("group", rec.id)
        )
    if out_path is not None:
        write_group_file(out_path, [groups[r.id] for r in bundle.pairs])
    bundle.groups = groups
    return groups
