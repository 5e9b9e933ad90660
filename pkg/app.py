#!/usr/bin/env python3
"""
Accent-invariant character recognition with supervised contrastive pretraining.

Commands:
    gen-corpus         render the synthetic accented corpus
    train              run one training stage (pretrain or finetune)
    eval               decode a split and write per-accent WER
    export-embeddings  dump decoder states, PCA projection and cluster metrics
    matrix             run the mode x augmentation x shot comparison
"""

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

from augment import AUGMENTATIONS, AugmentConfig
from config import ExperimentConfigManager
from corpus import derive_seed, generate_corpus, load_corpus, manifest_hash, save_corpus
from decode_eval import evaluate_split, matrix_frame, render_matrix_table
from embed import cluster_metrics, export_embeddings, pca2, pca_figure, write_dump, write_pca_csv
from errors import EXIT_OK, AccentCLError, UsageError, exit_code_for
from model import init_params, load_checkpoint, save_checkpoint
from trainer import MODES, STAGES, combine_reports, run_experiment_matrix, split_holdout, train_stage, write_history

logger = logging.getLogger(__name__)

RESOLVED_CONFIG = "resolved_config.cfg"


def _manager(args: argparse.Namespace) -> ExperimentConfigManager:
    manager = ExperimentConfigManager(args.config)
    if args.workers:
        manager.update("corpus", "workers", args.workers)
        manager.update("decode", "workers", args.workers)
    return manager


def _run_dir(manager: ExperimentConfigManager, *parts: str) -> str:
    path = os.path.join(manager.output_dir, *parts)
    os.makedirs(path, exist_ok=True)
    manager.write_resolved(os.path.join(path, RESOLVED_CONFIG))
    return path


# ======================================================
# Commands
# ======================================================

def cmd_gen_corpus(args: argparse.Namespace) -> int:
    manager = _manager(args)
    corpus = generate_corpus(manager.corpus())
    out_dir = manager.corpus_dir
    manifest = save_corpus(corpus, out_dir)
    manager.write_resolved(os.path.join(out_dir, RESOLVED_CONFIG))
    print(f"manifest {manifest} sha256 {manifest_hash(manifest)}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    if args.stage == "finetune" and not args.init:
        raise UsageError("--stage finetune requires --init <pretrain checkpoint>")
    manager = _manager(args)
    model_cfg = manager.model()
    settings = manager.train()
    train_cfg = settings.stage_config(args.stage, args.mode)
    augment = manager.augment()
    if args.augmentation:
        augment = augment.for_augmentation(args.augmentation)
    elif args.stage == "finetune":
        augment = AugmentConfig().for_augmentation("none")
    corpus = load_corpus(manager.corpus_dir)

    init = args.init or init_params(model_cfg, derive_seed(settings.seed, "init"))
    params, history = train_stage(corpus, augment, train_cfg, init, model_cfg=model_cfg)

    out_dir = _run_dir(manager, "train", f"{args.stage}-{args.mode}")
    checkpoint = os.path.join(out_dir, "checkpoint.ckpt")
    ckpt_id = save_checkpoint(params, checkpoint)
    write_history(history, os.path.join(out_dir, "history.csv"))
    print(f"checkpoint {checkpoint} id {ckpt_id}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    manager = _manager(args)
    model_cfg = manager.model()
    decode_cfg = manager.decode()
    params = load_checkpoint(args.checkpoint, model_cfg)
    corpus = load_corpus(manager.corpus_dir)
    meta = {"mode": str(params.meta.get("mode", "")), "augmentation": args.augmentation_label,
            "shot": args.shot, "checkpoint": params.checkpoint_id, "split": args.split}

    if args.split == "validation":
        if args.shot == "full":
            raise UsageError("--shot full applies to the test split only")
        report = evaluate_split(corpus.utterances("validation"), params, decode_cfg, meta)
    else:
        holdout = manager.get("matrix", "holdout_per_accent")
        seed = manager.get("train", "seed")
        splits = {a: split_holdout(utts, holdout, seed, a) for a, utts in corpus.test.items()}
        if args.shot == "zero":
            report = evaluate_split([u for _, held in splits.values() for u in held], params, decode_cfg, meta)
        else:
            full_cfg = manager.train().stage_config("finetune", params.meta.get("mode", "proposed"), full_shot=True)
            per_accent = []
            for accent_id, (tune, held) in splits.items():
                adapted, _ = train_stage(corpus, AugmentConfig().for_augmentation("none"), full_cfg, params,
                                         train_utterances=tune, model_cfg=model_cfg)
                per_accent.append(evaluate_split(held, adapted, decode_cfg))
            report = combine_reports(per_accent, meta)

    out_dir = _run_dir(manager, "eval", f"{args.split}-{args.shot}-{params.checkpoint_id}")
    report.write_csv(os.path.join(out_dir, "wer.csv"))
    table = report.render_table()
    with open(os.path.join(out_dir, "wer.txt"), "w") as f:
        f.write(table + "\n")
    print(table)
    return EXIT_OK


def cmd_export_embeddings(args: argparse.Namespace) -> int:
    manager = _manager(args)
    params = load_checkpoint(args.checkpoint, manager.model())
    corpus = load_corpus(manager.corpus_dir)
    dump = export_embeddings(corpus.utterances(args.split), params, args.limit, args.seed)

    out_dir = _run_dir(manager, "embeddings", params.checkpoint_id)
    write_dump(dump, os.path.join(out_dir, "embeddings.csv"))
    projection = pca2(dump)
    write_pca_csv(projection.coords, dump, os.path.join(out_dir, "pca.csv"))
    metrics = cluster_metrics(dump)
    with open(os.path.join(out_dir, "cluster_metrics.json"), "w") as f:
        json.dump({"silhouette": metrics.silhouette, "cross_accent_similarity": metrics.cross_accent_similarity,
                   "intra_similarity": metrics.intra_similarity, "rows": metrics.n_rows,
                   "classes": metrics.n_classes, "checkpoint": dump.checkpoint_id}, f, indent=2, sort_keys=True)
    if args.plot:
        pca_figure(projection.coords, dump).write_html(os.path.join(out_dir, "pca.html"))
    print(f"silhouette {metrics.silhouette:.4f} cross-accent similarity {metrics.cross_accent_similarity:.4f}")
    return EXIT_OK


def cmd_matrix(args: argparse.Namespace) -> int:
    manager = _manager(args)
    if args.parallel:
        manager.update("matrix", "parallel", args.parallel)
    matrix_cfg = manager.matrix()
    corpus = load_corpus(manager.corpus_dir)
    out_dir = _run_dir(manager, "matrix")

    result = run_experiment_matrix(corpus, matrix_cfg, manager.model(), manager.augment(), manager.train(),
                                   manager.decode(), out_dir=os.path.join(out_dir, "cells"))
    frame = matrix_frame(result.reports)
    frame.to_csv(os.path.join(out_dir, "matrix.csv"), index=False, float_format="%.4f")
    table = render_matrix_table(frame)
    with open(os.path.join(out_dir, "matrix.txt"), "w") as f:
        f.write(table + "\n")
    with open(os.path.join(out_dir, "failures.json"), "w") as f:
        json.dump(result.failures, f, indent=2)
    print(table)
    if result.failures:
        logger.warning(f"Failed cells: {', '.join(f['cell'] for f in result.failures)}")
    return EXIT_OK


# ======================================================
# Entry point
# ======================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="app.py", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--log-level", default=os.getenv("ACCENT_CL_LOG_LEVEL", "INFO"),
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="experiment config file ([section] key = value)")
        p.add_argument("--workers", type=int, default=0, help="threads for corpus rendering and decoding")
        return p

    command("gen-corpus", "generate the synthetic corpus").set_defaults(func=cmd_gen_corpus)

    p = command("train", "run one training stage")
    p.add_argument("--stage", choices=STAGES, required=True)
    p.add_argument("--mode", choices=MODES, default="proposed")
    p.add_argument("--init", default=None, help="checkpoint to start from (required for finetune)")
    p.add_argument("--augmentation", choices=AUGMENTATIONS, default=None)
    p.set_defaults(func=cmd_train)

    p = command("eval", "evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["validation", "test"], default="test")
    p.add_argument("--shot", choices=["zero", "full"], default="zero")
    p.add_argument("--augmentation-label", default="", help="label recorded in the report header")
    p.set_defaults(func=cmd_eval)

    p = command("export-embeddings", "dump decoder representations and cluster metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "validation", "test"], default="train")
    p.add_argument("--limit", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--plot", action="store_true", help="also write an HTML scatter of the projection")
    p.set_defaults(func=cmd_export_embeddings)

    p = command("matrix", "run the full comparison matrix")
    p.add_argument("--parallel", type=int, default=0, help="matrix cells to run concurrently")
    p.set_defaults(func=cmd_matrix)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AccentCLError as e:
        logger.error(f"{args.command} failed: {e}")
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
