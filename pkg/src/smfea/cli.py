"""Command-line entry point for the full pipeline.

Exit codes: 0 success, 1 usage error, 2 runtime or data error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import corpus, engine, evaluation, referral, vocab as vocab_mod
from .config import TrainConfig, resolve_seed
from .errors import SmfeaError
from .treeenc import export_node_predictions


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="smfea", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen-synthetic", parents=[], help="generate a synthetic paired corpus")
    p.add_argument("--out", required=True, help="output directory for manifest and features")
    p.add_argument("--n-pairs", type=int, default=32, help="number of image-sentence pairs")
    p.add_argument("--n-fragment-types", type=int, default=10, help="distinct fragment labels")
    p.add_argument("--n-relation-types", type=int, default=5, help="distinct relation labels")
    p.add_argument("--regions", type=int, default=8, help="region rows per image (K)")
    p.add_argument("--d-region", type=int, default=64, help="region feature width")
    p.add_argument("--noise-sigma", type=float, default=0.1, help="feature noise scale")
    p.add_argument("--seed", type=int, default=0, help="generator seed")

    p = sub.add_parser("build-vocab", help="build word vocabulary and category dictionaries")
    p.add_argument("--manifest", required=True, help="manifest.jsonl to read")
    p.add_argument("--out", required=True, help="directory for the three JSON dictionaries")
    p.add_argument("--min-count", type=int, default=1, help="minimum token frequency")

    p = sub.add_parser("build-trees", help="rebuild referral trees from the sentences")
    p.add_argument("--manifest", required=True, help="manifest.jsonl to read")
    p.add_argument("--out", required=True, help="directory for the rewritten manifest")
    p.add_argument("--tagger", choices=("builtin", "file"), default="builtin",
                   help="POS tagger: built-in lexicon or a JSON lexicon file")
    p.add_argument("--lexicon", help="lexicon JSON path (required with --tagger file)")
    p.add_argument("--dicts", help="directory with category dictionaries to filter labels")

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--manifest", required=True, help="manifest.jsonl to train on")
    p.add_argument("--out", required=True, help="output directory for checkpoint and logs")
    p.add_argument("--config", help="flat JSON config file; flags override its values")
    p.add_argument("--vocab-dir", help="directory with prebuilt dictionaries (default: build here)")
    p.add_argument("--seed", type=int, help="random seed (SMFEA_SEED env overrides)")
    p.add_argument("--epochs", type=int, help="override max_epochs")
    p.add_argument("--batch-size", type=int, help="override batch_size")
    p.add_argument("--lr", type=float, help="override learning rate")
    p.add_argument("--beta-d", type=float, help="instance fusion weight")
    p.add_argument("--beta-t", type=float, help="tree fusion weight")
    p.add_argument("--beta-c", type=float, help="concept fusion weight")
    p.add_argument("--cell-variant", choices=("double_forget", "childsum"),
                   help="tree cell update rule")
    p.add_argument("--negatives", choices=("sum", "hardest"), help="triplet negative mode")
    p.add_argument("--precision", choices=("single", "double"), help="float precision")

    p = sub.add_parser("eval", help="score a manifest with a checkpoint and report R@K")
    p.add_argument("--manifest", required=True, help="manifest.jsonl to evaluate")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--vocab-dir", required=True, help="directory with the dictionaries")
    p.add_argument("--out", required=True, help="output directory for report.json")

    p = sub.add_parser("retrieve", help="rank candidates for one query id")
    p.add_argument("--manifest", required=True, help="manifest.jsonl holding the candidates")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--vocab-dir", required=True, help="directory with the dictionaries")
    p.add_argument("--query", required=True, help="image id or sentence id to query")
    p.add_argument("--k", type=int, default=5, help="number of results")
    p.add_argument("--out", help="optional directory for ranking.json")

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--component", choices=engine.GRADCHECK_COMPONENTS, default="end2end",
                   help="which probe to check")
    p.add_argument("--eps", type=float, default=1e-5, help="central difference step")
    p.add_argument("--seed", type=int, default=0, help="probe seed")

    p = sub.add_parser("export-trees", help="export per-node predictions as JSON")
    p.add_argument("--manifest", required=True, help="manifest.jsonl to annotate")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--vocab-dir", required=True, help="directory with the dictionaries")
    p.add_argument("--out", required=True, help="output directory for trees.json")

    return parser


def _load_corpus(manifest: str):
    return corpus.load_manifest(manifest)


def _load_vocab(vocab_dir: str):
    vocab = vocab_mod.WordVocab.load(Path(vocab_dir) / vocab_mod.WORD_VOCAB_FILE)
    dicts = vocab_mod.CategoryDicts.load(vocab_dir)
    return vocab, dicts


def _load_model(args):
    checkpoint = engine.load_checkpoint(args.checkpoint)
    return checkpoint.build_model()


def _cmd_gen_synthetic(args) -> int:
    spec = corpus.SyntheticSpec(
        n_pairs=args.n_pairs,
        n_fragment_types=args.n_fragment_types,
        n_relation_types=args.n_relation_types,
        regions_per_image=args.regions,
        d_region=args.d_region,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
    )
    manifest = corpus.gen_synthetic_dataset(spec, args.out)
    print(manifest)
    return 0


def _cmd_build_vocab(args) -> int:
    dataset = _load_corpus(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab = vocab_mod.build_word_vocab(dataset, min_count=args.min_count)
    dicts = vocab_mod.build_category_dicts(dataset)
    vocab.save(out / vocab_mod.WORD_VOCAB_FILE)
    dicts.save(out)
    print(f"vocab size {vocab.size()}, {dicts.n_fragment} fragment / "
          f"{dicts.n_relation} relation categories -> {out}")
    return 0


def _cmd_build_trees(args) -> int:
    if args.tagger == "file":
        if not args.lexicon:
            raise _UsageError("--tagger file requires --lexicon")
        tagger = referral.LexiconTagger.from_json(args.lexicon)
    else:
        tagger = referral.LexiconTagger()
    dicts = vocab_mod.CategoryDicts.load(args.dicts) if args.dicts else None
    dataset = _load_corpus(args.manifest)
    for sample in dataset:
        tagged = referral.whiten_sentence(sample.tokens, tagger)
        sample.tree = referral.build_referral_tree(tagged, dicts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = corpus.write_manifest(out / corpus.MANIFEST_NAME, dataset)
    print(manifest)
    return 0


def _cmd_train(args) -> int:
    overrides = {}
    for flag, key in (
        ("seed", "seed"),
        ("epochs", "max_epochs"),
        ("batch_size", "batch_size"),
        ("lr", "lr"),
        ("beta_d", "beta_d"),
        ("beta_t", "beta_t"),
        ("beta_c", "beta_c"),
        ("cell_variant", "cell_variant"),
        ("negatives", "negatives"),
        ("precision", "precision"),
    ):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    if args.config:
        config = TrainConfig.from_file(args.config, **overrides)
    else:
        config = TrainConfig(**overrides)
    config = resolve_seed(config)

    dataset = _load_corpus(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.vocab_dir:
        vocab, dicts = _load_vocab(args.vocab_dir)
    else:
        vocab = vocab_mod.build_word_vocab(dataset, min_count=config.min_count)
        dicts = vocab_mod.build_category_dicts(dataset)
    vocab.save(out / vocab_mod.WORD_VOCAB_FILE)
    dicts.save(out)

    result = engine.train(config, dataset, vocab, dicts, out_dir=out)
    last = result.loss_rows[-1] if result.loss_rows else None
    if last:
        print(f"trained {config.max_epochs} epochs, final total loss {last['total']:.4f}")
    print(result.checkpoint_path)
    return 0


def _cmd_eval(args) -> int:
    model = _load_model(args)
    vocab, dicts = _load_vocab(args.vocab_dir)
    dataset = _load_corpus(args.manifest)
    sim = evaluation.score_dataset(model, dataset, vocab, dicts)
    report = evaluation.eval_report(sim, evaluation.GroundTruth.from_dataset(dataset))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report, indent=1), encoding="utf-8")
    print(json.dumps(report, indent=1))
    return 0


def _cmd_retrieve(args) -> int:
    model = _load_model(args)
    vocab, dicts = _load_vocab(args.vocab_dir)
    dataset = _load_corpus(args.manifest)
    index = evaluation.build_index(model, dataset, vocab, dicts)
    ranking = evaluation.retrieve(args.query, index, args.k)
    payload = [{"id": rid, "score": score} for rid, score in ranking]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ranking.json").write_text(json.dumps(payload, indent=1), encoding="utf-8")
    print(json.dumps(payload, indent=1))
    return 0


def _cmd_gradcheck(args) -> int:
    report = engine.gradcheck(args.component, eps=args.eps, seed=args.seed)
    print(report)
    for name, error in sorted(report.block_errors.items(), key=lambda kv: -kv[1])[:5]:
        print(f"  {name}: {error:.3e}")
    return 0


def _cmd_export_trees(args) -> int:
    import torch

    model = _load_model(args)
    vocab, dicts = _load_vocab(args.vocab_dir)
    dataset = _load_corpus(args.manifest)
    from .model import collate

    records = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(dataset), 64):
            chunk = dataset[start : start + 64]
            batch = collate(chunk, vocab, dicts, model.config.dtype)
            outputs = model(batch)
            visual = export_node_predictions(outputs.visual_states, dicts)
            textual = export_node_predictions(outputs.textual_states, dicts)
            for sample, v_nodes, s_nodes in zip(chunk, visual, textual):
                records.append(
                    {"image_id": sample.image_id, "visual": v_nodes, "textual": s_nodes}
                )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "trees.json"
    path.write_text(json.dumps(records, indent=1), encoding="utf-8")
    print(path)
    return 0


_COMMANDS = {
    "gen-synthetic": _cmd_gen_synthetic,
    "build-vocab": _cmd_build_vocab,
    "build-trees": _cmd_build_trees,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "retrieve": _cmd_retrieve,
    "gradcheck": _cmd_gradcheck,
    "export-trees": _cmd_export_trees,
}


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    if args.command is None:
        parser.print_help()
        return 1
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (SmfeaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
