"""Command-line surface.

Subcommands cover the whole pipeline in order:

    vlpt gen-data  --out data/ --seed 0          materialize a synthetic corpus
    vlpt index     --data data/ --seed 0         build image + text retrieval indexes
    vlpt augment   --data data/ --seed 0         build CMCL groups
    vlpt train     --data data/ --seed 0 ...     run the training loop
    vlpt probe     --checkpoint out/model.ckpt   recall@K + greedy generation
    vlpt export    --checkpoint out/model.ckpt   dump the checkpoint manifest

Model/train hyperparameters come from an optional JSON config file
({"model": {...}, "train": {...}}); every key is also exposed as a
same-named flag that overrides the file. --seed is mandatory for train.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .augment import GroupConfig
from .checkpoint import load_checkpoint
from .data import (
    augment_dataset,
    build_pipelines,
    generate_corpus,
    load_dataset,
    text_index_records,
    write_dataset,
)
from .model import ModelConfig, init_params
from .retrieval import (
    MeanTokenEmbedder,
    build_image_index,
    build_text_index,
    load_image_index,
    load_text_index,
    save_image_index,
    save_text_index,
)
from .rng import RngState
from .scenes import default_scene_config
from .textprep import sample_seq2seq_split, tokenize
from .training import Trainer, TrainConfig, probe_generation, probe_retrieval

MODEL_KEYS = [f.name for f in dataclasses.fields(ModelConfig) if f.name != "vocab_size"]
TRAIN_KEYS = [f.name for f in dataclasses.fields(TrainConfig) if f.name != "seed"]


def _flag_type(field):
    t = field.type
    if "bool" in str(t):
        return lambda s: s.lower() in ("1", "true", "yes", "on")
    if "int" in str(t):
        return int
    if "float" in str(t):
        return float
    if "tuple" in str(t):
        return lambda s: tuple(float(x) if "." in x else int(x) for x in s.split(","))
    return str


def _add_config_flags(parser):
    parser.add_argument("--config", type=Path, help="JSON file with model/train sections")
    for f in dataclasses.fields(ModelConfig):
        if f.name != "vocab_size":
            parser.add_argument(f"--{f.name}", type=_flag_type(f), default=None)
    for f in dataclasses.fields(TrainConfig):
        if f.name != "seed":
            parser.add_argument(f"--{f.name}", type=_flag_type(f), default=None, dest=f.name)


def _resolve_configs(args, vocab_size: int, seed: int):
    file_cfg = {"model": {}, "train": {}}
    if args.config:
        file_cfg.update(json.loads(Path(args.config).read_text()))
    model_kw = dict(file_cfg.get("model", {}))
    train_kw = dict(file_cfg.get("train", {}))
    for key in MODEL_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            model_kw[key] = val
    for key in TRAIN_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            train_kw[key] = val
    train_kw["seed"] = seed
    mcfg = ModelConfig(vocab_size=vocab_size, **model_kw)
    tcfg = TrainConfig.from_dict(train_kw)
    return mcfg, tcfg


def _embedder_for(args, bundle, mcfg) -> MeanTokenEmbedder:
    """The text-rerank embedder: the model's token-embedding table, either
    from a checkpoint or from the seeded initialization."""
    if getattr(args, "checkpoint", None):
        ck = load_checkpoint(args.checkpoint)
        table = ck.arrays["p/tok_emb"]
        tag = f"ckpt-step{ck.step}"
    else:
        params = init_params(mcfg, RngState(args.seed).fork("init"))
        table = params["tok_emb"].data
        tag = f"init-seed{args.seed}"
    return MeanTokenEmbedder(bundle.vocab, table, tag=tag)


def cmd_gen_data(args) -> int:
    bundle = generate_corpus(
        n_pairs=args.pairs,
        n_images=args.images,
        n_texts=args.texts,
        seed=args.seed,
        conf_threshold=args.conf_threshold,
        max_boxes=args.max_boxes,
        vocab_size=args.vocab_size,
    )
    write_dataset(args.out, bundle)
    print(
        f"wrote {len(bundle.pairs)} pairs, {len(bundle.images)} images, "
        f"{len(bundle.texts)} texts, vocab size {bundle.vocab.size} to {args.out}"
    )
    return 0


def cmd_index(args) -> int:
    bundle = load_dataset(args.data)
    mcfg, _ = _resolve_configs(args, bundle.vocab.size, args.seed)
    embedder = _embedder_for(args, bundle, mcfg)
    out = Path(args.out or args.data)
    out.mkdir(parents=True, exist_ok=True)
    image_index = build_image_index([(r.id, r.regions) for r in bundle.images])
    text_index = build_text_index(
        text_index_records(bundle, include_captions=not args.no_captions_in_text_pool), embedder
    )
    save_image_index(out / "image.idx", image_index)
    save_text_index(out / "text.idx", text_index)
    print(
        f"indexed {len(image_index.ids)} images and {len(text_index.ids)} texts "
        f"(embedder {embedder.tag}) into {out}"
    )
    return 0


def cmd_augment(args) -> int:
    bundle = load_dataset(args.data)
    mcfg, _ = _resolve_configs(args, bundle.vocab.size, args.seed)
    embedder = _embedder_for(args, bundle, mcfg)
    pipes = build_pipelines(bundle, embedder, include_captions_in_text_pool=not args.no_captions_in_text_pool)
    idx_dir = Path(args.indexes or args.data)
    if (idx_dir / "image.idx").exists():
        pipes.image_index = load_image_index(idx_dir / "image.idx")
        pipes.text_index = load_text_index(idx_dir / "text.idx")
        if pipes.text_index.embedder_tag != embedder.tag:
            print(
                f"warning: text index built with embedder {pipes.text_index.embedder_tag}, "
                f"queries use {embedder.tag}",
                file=sys.stderr,
            )
    group_config = GroupConfig(
        n_positives=args.positives,
        n_negatives=args.negatives,
        n_images=args.retrieved_images,
        n_texts=args.retrieved_texts,
        text_filter_k=args.text_filter_k,
        text_rerank_k=args.text_rerank_k,
    )
    out = Path(args.out or (Path(args.data) / "groups.jsonl"))
    groups = augment_dataset(bundle, pipes, group_config, seed=args.seed, out_path=out)
    flagged = sum(1 for g in groups.values() if g.flags)
    print(f"wrote {len(groups)} groups to {out} ({flagged} with shortfall flags)")
    return 0


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    groups_path = args.groups or (Path(args.data) / "groups.jsonl")
    bundle = load_dataset(args.data, groups_path=groups_path if Path(groups_path).exists() else None)
    mcfg, tcfg = _resolve_configs(args, bundle.vocab.size, args.seed)
    if args.resume:
        trainer = Trainer.resume(args.resume, bundle, train_config=tcfg)
    else:
        trainer = Trainer(mcfg, tcfg, bundle)
    ckpt = out / "model.ckpt"
    with open(out / "train_log.jsonl", "a", encoding="utf-8") as log_file:

        class Tee:
            def write(self, line):
                log_file.write(line)
                sys.stdout.write(line)

        records = trainer.run(log_file=Tee(), checkpoint_path=ckpt)
    print(f"trained to step {trainer.step}; checkpoint at {ckpt}", file=sys.stderr)
    return 0 if records or trainer.step else 1


def cmd_probe(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    mcfg = ModelConfig.from_dict(ck.model_config)
    bundle = load_dataset(args.data)
    params = ck.build_parameters()
    pairs = [
        (r.regions, tokenize(bundle.vocab, r.caption, mcfg.max_text).ids) for r in bundle.pairs
    ]
    k_list = tuple(int(k) for k in args.k.split(","))
    out = probe_retrieval(params, mcfg, pairs, k_list=k_list)
    report = {
        "step": ck.step,
        "pairs": len(pairs),
        "text_to_image": out["text_to_image"],
        "image_to_text": out["image_to_text"],
    }
    if args.generate:
        items = []
        for r in bundle.pairs[: args.generate]:
            seq = tokenize(bundle.vocab, r.caption, mcfg.max_text)
            if seq.interior_len >= 4:
                items.append((r.regions, sample_seq2seq_split(seq, RngState(args.seed).fork(r.id))))
        gen = probe_generation(params, mcfg, items)
        report["generation_token_accuracy"] = gen["token_accuracy"]
        report["generation_samples"] = [
            {"want": bundle.vocab.decode(s["want"]), "got": bundle.vocab.decode(s["got"])}
            for s in gen["samples"][:5]
        ]
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_export(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    manifest = {
        "step": ck.step,
        "seed": ck.seed,
        "model_config": ck.model_config,
        "extra": ck.extra,
        "arrays": {
            name: {"shape": list(arr.shape), "dtype": str(arr.dtype)}
            for name, arr in sorted(ck.arrays.items())
        },
        "parameter_count": int(
            sum(arr.size for name, arr in ck.arrays.items() if name.startswith("p/"))
        ),
    }
    text = json.dumps(manifest, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlpt", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="materialize a synthetic training corpus")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--pairs", type=int, default=32)
    p.add_argument("--images", type=int, default=64)
    p.add_argument("--texts", type=int, default=128)
    p.add_argument("--vocab-size", type=int, default=400)
    p.add_argument("--max-boxes", type=int, default=10)
    p.add_argument("--conf-threshold", type=float, default=0.2)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("index", help="build image/text retrieval indexes")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--no-captions-in-text-pool", action="store_true",
                   help="restrict text retrieval to the single-modal corpus")
    _add_config_flags(p)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("augment", help="build a CMCL group per pair")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--indexes", type=Path, default=None)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--positives", type=int, default=3)
    p.add_argument("--negatives", type=int, default=8)
    p.add_argument("--retrieved-images", type=int, default=4)
    p.add_argument("--retrieved-texts", type=int, default=4)
    p.add_argument("--text-filter-k", type=int, default=1000)
    p.add_argument("--text-rerank-k", type=int, default=100)
    p.add_argument("--no-captions-in-text-pool", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--groups", type=Path, default=None)
    p.add_argument("--resume", type=Path, default=None)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", help="recall@K retrieval + greedy generation probes")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=str, default="1,5,10")
    p.add_argument("--generate", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("export", help="dump a checkpoint manifest")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
