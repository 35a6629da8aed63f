"""The ``relvae`` command line: data generation, pretraining, few-shot
heads, evaluation, diagnostics, and the one-seed synthetic reproduction.

Exit codes: 0 success, 1 usage error, 2 runtime error. An INI-style
config file (sections named after subcommands, flat key=value entries)
can supply defaults; explicit flags override file values; unknown
sections or keys are usage errors.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import dataio, diagnostics, evaluation, fewshot
from .dataio import (DataError, SynthConfig, build_fewshot_split, load_embeddings,
                     load_scenes, load_split, rare_predicate_subset,
                     resolve_split_contexts, write_embeddings, write_scenes)
from .reproduce import ReproduceConfig, run_reproduction
from .trainer import (CheckpointError, TrainConfig, TrainingDivergedError,
                      build_model, load_checkpoint, pretrain, save_checkpoint)

__all__ = ["main"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exit code 1, not 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="relvae", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="INI config file with per-subcommand sections")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-scenes", type=int, default=60)
    p.add_argument("--image-size", type=int, default=64)

    p = sub.add_parser("pretrain", help="pretrain the cVAE on predicate-free contexts")
    p.add_argument("--scenes", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=10.0)
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--d-z", type=int, default=32)
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--backbone", choices=["conv", "precomputed"], default="conv")
    p.add_argument("--feature-dir", default="")

    p = sub.add_parser("fewshot", help="train a few-shot head and score scenes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--head", choices=["ffn", "knn1", "baseline-ls"], required=True)
    p.add_argument("--out", required=True, help="predictions.jsonl path")
    p.add_argument("--save-head", help="optional path to store the trained head")
    p.add_argument("--head-steps", type=int, default=500)
    p.add_argument("--head-hidden", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="Recall@k report for a trained head")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--head", required=True, help="head file from fewshot --save-head")
    p.add_argument("--scenes", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--rare-n", type=int, default=0,
                   help="also evaluate on the N least common predicates")
    p.add_argument("--out", required=True, help="report.json path")

    p = sub.add_parser("inspect", help="latent-space diagnostics")
    isub = p.add_subparsers(dest="inspect_command", metavar="WHAT", parser_class=_Parser)

    q = isub.add_parser("export-latents")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--scenes", required=True)
    q.add_argument("--embeddings", required=True)
    q.add_argument("--out", required=True, help="latents CSV path")

    q = isub.add_parser("project")
    q.add_argument("--latents", required=True, help="CSV from export-latents")
    q.add_argument("--method", choices=["pca", "external"], default="pca")
    q.add_argument("--out", required=True, help="TSV of 2D points (or raw features)")

    q = isub.add_parser("cross-recon")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--scenes", required=True)
    q.add_argument("--embeddings", required=True)
    q.add_argument("--source-image", required=True)
    q.add_argument("--subject", type=int, required=True)
    q.add_argument("--object", type=int, required=True)
    q.add_argument("--target-image", required=True)
    q.add_argument("--out-dir", required=True)
    q.add_argument("--overlay-id", default="cross")

    q = isub.add_parser("perturb")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--scenes", required=True)
    q.add_argument("--embeddings", required=True)
    q.add_argument("--image", required=True)
    q.add_argument("--subject", type=int, required=True)
    q.add_argument("--object", type=int, required=True)
    q.add_argument("--override", required=True, help="object bbox override as x1,y1,x2,y2")
    q.add_argument("--out", required=True, help="probe report JSON path")

    p = sub.add_parser("reproduce-synthetic",
                       help="full generate/pretrain/fewshot/eval chain from one seed")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-scenes", type=int, default=60)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--rare-n", type=int, default=3)
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)

    return parser


def _apply_config_file(parser: _Parser, argv: list[str]) -> None:
    """Fold INI config values in as subcommand defaults; flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    path = Path(known.config)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    ini = configparser.ConfigParser()
    ini.read(path)
    subactions = {}
    for action in parser._subparsers._group_actions:
        subactions.update(action.choices)
    for section in ini.sections():
        if section not in subactions:
            raise UsageError(f"config section [{section}] is not a known subcommand")
        sp = subactions[section]
        opt_by_key = {}
        for action in sp._actions:
            for opt in action.option_strings:
                if opt.startswith("--"):
                    opt_by_key[opt[2:]] = action
        defaults = {}
        for key, value in ini[section].items():
            if key not in opt_by_key:
                raise UsageError(f"unknown key {key!r} in config section [{section}]")
            action = opt_by_key[key]
            defaults[action.dest] = action.type(value) if action.type else value
        sp.set_defaults(**defaults)


def _write_predictions(preds: evaluation.PredictionSet, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, sid, oid in sorted(preds.pairs()):
            row = {"image_id": image_id, "subject_id": sid, "object_id": oid,
                   "scores": dict(sorted(preds.scores_for(image_id, sid, oid).items()))}
            fh.write(json.dumps(row) + "\n")


def _cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = SynthConfig(n_scenes=args.n_scenes, image_size=args.image_size)
    scenes, table = dataio.generate_synthetic_dataset(cfg, seed=args.seed)
    write_scenes(scenes, out / "scenes.jsonl")
    write_embeddings(table, out / "embeddings.tsv")
    print(f"wrote {len(scenes)} scenes to {out / 'scenes.jsonl'}")
    return 0


def _cmd_pretrain(args) -> int:
    scenes = load_scenes(args.scenes)
    table = load_embeddings(args.embeddings)
    cfg = TrainConfig(steps=args.steps, batch_size=args.batch_size,
                      learning_rate=args.learning_rate, seed=args.seed,
                      alpha=args.alpha, beta=args.beta, d_z=args.d_z,
                      eval_every=args.eval_every, backbone=args.backbone,
                      feature_dir=args.feature_dir)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt = pretrain(scenes, table, cfg, loss_csv=out.with_suffix(".loss.csv"))
    save_checkpoint(ckpt, out)
    print(f"checkpoint written to {out}")
    return 0


def _cmd_fewshot(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = build_model(ckpt)
    scenes = load_scenes(args.scenes)
    table = load_embeddings(args.embeddings)
    split = load_split(args.split)
    labeled = resolve_split_contexts(split, scenes)
    contexts = [c for c, _ in labeled]
    labels = [p for _, p in labeled]
    vocab = dataio.predicate_vocabulary(scenes)
    head_cfg = fewshot.HeadConfig(hidden=args.head_hidden, steps=args.head_steps,
                                  seed=args.seed)
    if args.head == "knn1":
        feats = fewshot.embed_contexts(model, contexts, table)
        head: object = fewshot.KNNIndex(np.stack([f.vector for f in feats]), labels, vocab)
    elif args.head == "ffn":
        feats = fewshot.embed_contexts(model, contexts, table)
        head = fewshot.train_head(np.stack([f.vector for f in feats]), labels, head_cfg,
                                  vocab=vocab, feature_kind="latent")
    else:
        x = np.stack([fewshot.baseline_features(c, table) for c in contexts])
        head = fewshot.train_head(x, labels, head_cfg, vocab=vocab,
                                  feature_kind="baseline-ls")
    preds = evaluation.score_contexts(model, head, scenes, table)
    _write_predictions(preds, args.out)
    if args.save_head:
        fewshot.save_head(head, args.save_head)
    print(f"predictions written to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = build_model(ckpt)
    head = fewshot.load_head(args.head)
    scenes = load_scenes(args.scenes)
    table = load_embeddings(args.embeddings)
    report = evaluation.evaluate(model, head, scenes, table, k=args.k)
    payload = report.to_dict()
    payload["accuracy"] = evaluation.pair_accuracy(
        evaluation.score_contexts(model, head, scenes, table), scenes)
    if args.rare_n:
        rare = rare_predicate_subset(scenes, args.rare_n)
        payload["rare"] = evaluation.evaluate(model, head, scenes, table, k=args.k,
                                              subset=rare).to_dict()
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"R@{args.k} = {report.recall_at_k:.4f} over {report.n_gt} triplets")
    return 0


def _find_context(scenes, image_id: str, subject_id: int, object_id: int):
    by_id = {s.image_id: s for s in scenes}
    if image_id not in by_id:
        raise DataError(f"scene {image_id!r} not found")
    s = by_id[image_id]
    return dataio.ContextInput(s, s.object_by_id(subject_id), s.object_by_id(object_id))


def _cmd_inspect(args) -> int:
    if args.inspect_command == "export-latents":
        model = build_model(load_checkpoint(args.ckpt))
        records = diagnostics.export_latents(model, load_scenes(args.scenes),
                                             load_embeddings(args.embeddings),
                                             out_csv=args.out)
        print(f"exported {len(records)} latent records to {args.out}")
        return 0
    if args.inspect_command == "project":
        with open(args.latents, "r", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise DataError(f"no latent rows in {args.latents}")
        zcols = sorted((c for c in rows[0] if c.startswith("z")), key=lambda c: int(c[1:]))
        feats = np.array([[float(r[c]) for c in zcols] for r in rows])
        diagnostics.project_2d(feats, method=args.method, out_path=args.out)
        print(f"wrote {args.method} output for {len(rows)} points to {args.out}")
        return 0
    if args.inspect_command == "cross-recon":
        model = build_model(load_checkpoint(args.ckpt))
        scenes = load_scenes(args.scenes)
        table = load_embeddings(args.embeddings)
        src = _find_context(scenes, args.source_image, args.subject, args.object)
        target = {s.image_id: s for s in scenes}.get(args.target_image)
        if target is None:
            raise DataError(f"target scene {args.target_image!r} not found")
        result = diagnostics.cross_reconstruct(model, src, target, table,
                                               out_dir=args.out_dir,
                                               overlay_id=args.overlay_id)
        print(f"decoded subject={result['subject_label'][0]!r} "
              f"object={result['object_label'][0]!r}; overlays in {args.out_dir}")
        return 0
    if args.inspect_command == "perturb":
        model = build_model(load_checkpoint(args.ckpt))
        scenes = load_scenes(args.scenes)
        table = load_embeddings(args.embeddings)
        ctx = _find_context(scenes, args.image, args.subject, args.object)
        try:
            coords = [float(v) for v in args.override.split(",")]
            if len(coords) != 4:
                raise ValueError
        except ValueError:
            raise UsageError("--override must be x1,y1,x2,y2") from None
        report = diagnostics.perturbed_probe(model, ctx, dataio.BBox(*coords), table)
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, sort_keys=True, indent=2)
            fh.write("\n")
        print(f"override mass {report['object_mass_in_override_box']:.4f} vs "
              f"original mass {report['object_mass_in_original_box']:.4f}")
        return 0
    raise UsageError("inspect needs one of: export-latents, project, cross-recon, perturb")


def _cmd_reproduce(args) -> int:
    if args.jobs != 1:
        raise UsageError("only --jobs 1 is supported; runs are single-process for determinism")
    cfg = ReproduceConfig(seed=args.seed, n_scenes=args.n_scenes, steps=args.steps,
                          rare_n=args.rare_n, eval_every=args.eval_every)
    report = run_reproduction(cfg, args.out)
    print(f"report written to {Path(args.out) / 'report.json'}")
    for row in report["rows"]:
        print(f"  head={row['head']:<12} k={row['k']}  R@50={row['r_at_50']:.4f}  "
              f"rare={row['r_at_50_rare']:.4f}  acc={row['accuracy']:.4f}")
    return 0


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "fewshot": _cmd_fewshot,
    "eval": _cmd_eval,
    "inspect": _cmd_inspect,
    "reproduce-synthetic": _cmd_reproduce,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = _build_parser()
    try:
        _apply_config_file(parser, argv)
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help and friends
            return int(exc.code or 0)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        handler = _HANDLERS[args.command]
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return handler(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, TrainingDivergedError, evaluation.EvalError,
            fewshot.HeadFileError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
