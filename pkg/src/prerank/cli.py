"""Command-line pipeline driver.

Each subcommand consumes declared artifacts, writes one primary artifact
plus a provenance manifest (content hashes of inputs, config, seed), and
refuses to overwrite outputs without --force. Exit codes: 2 for missing
or mismatched artifacts, 3 for validation failures, 4 for numeric
aborts.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .artifacts import (
    prepare_output,
    sha256_file,
    write_json,
    write_jsonl,
    write_manifest,
)
from .baseline import LinearModel, train_linear
from .config import PipelineConfig, load_config
from .corpus import Corpus, generate_corpus
from .dataset import DiscretizedCorpus, discretize_corpus, fit_corpus_schema
from .errors import ArtifactError, PrerankError
from .evaluate import (
    EvalReport,
    benchmark,
    evaluate,
    load_scorer,
    write_eval_table,
)
from .features import FeatureSchema
from .figures import gate_histogram_figure, loss_curves, recall_bars
from .model import DeepFmModel, init_model
from .pairs import PairSet, build_pairs
from .prune import finetune_after_prune, gate_histogram, harden, prune
from .train import TrainConfig, train


def _load_corpus(path: str) -> Corpus:
    return Corpus.load(path)


def _load_schema(path: str) -> FeatureSchema:
    return FeatureSchema.load(path)


def _table_for(corpus: Corpus, schema: FeatureSchema) -> DiscretizedCorpus:
    return discretize_corpus(corpus, schema)


def _check_pairs_source(pair_set: PairSet, corpus_path: str) -> None:
    if pair_set.source_corpus_hash is None:
        return
    actual = sha256_file(corpus_path)
    if pair_set.source_corpus_hash != actual:
        raise ArtifactError(
            f"pair set was built from a different corpus than "
            f"{corpus_path} (hash mismatch)"
        )


def _print(args, payload: dict, human: str) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(human)


def cmd_gen(args, cfg: PipelineConfig) -> None:
    corpus = generate_corpus(cfg.gen, seed=cfg.gen_seed)
    prepare_output(args.out, args.force)
    corpus.save(args.out)
    write_manifest(args.out, "gen", cfg.to_dict())
    _print(
        args,
        {
            "artifact": args.out,
            "queries": len(corpus.blocks),
            "candidates_per_query": cfg.gen.candidates_per_query,
        },
        f"wrote {args.out}: {len(corpus.blocks)} queries x "
        f"{cfg.gen.candidates_per_query} candidates",
    )


def cmd_fit_features(args, cfg: PipelineConfig) -> None:
    corpus = _load_corpus(args.corpus)
    schema = fit_corpus_schema(
        corpus,
        bucket_width=cfg.features.bucket_width,
        outlier_margin=cfg.features.outlier_margin,
    )
    prepare_output(args.out, args.force)
    schema.save(args.out)
    write_manifest(
        args.out,
        "fit-features",
        cfg.to_dict(),
        inputs={args.corpus: sha256_file(args.corpus)},
    )
    _print(
        args,
        {
            "artifact": args.out,
            "schema_hash": schema.content_hash(),
            "fields": schema.num_fields,
            "buckets_per_field": schema.buckets_per_field,
        },
        f"wrote {args.out}: {schema.num_fields} fields, "
        f"{schema.buckets_per_field} buckets each "
        f"(hash {schema.content_hash()[:12]})",
    )


def cmd_make_pairs(args, cfg: PipelineConfig) -> None:
    corpus = _load_corpus(args.corpus)
    pair_cfg = cfg.eval_pairs if args.role == "eval" else cfg.pairs
    corpus_hash = sha256_file(args.corpus)
    pair_set = build_pairs(
        corpus, pair_cfg, role=args.role, source_corpus_hash=corpus_hash
    )
    prepare_output(args.out, args.force)
    pair_set.save(args.out)
    write_manifest(
        args.out,
        "make-pairs",
        cfg.to_dict(),
        inputs={args.corpus: corpus_hash},
    )
    _print(
        args,
        {
            "artifact": args.out,
            "num_pairs": len(pair_set),
            "scheme": pair_cfg.scheme,
            "role": args.role,
        },
        f"wrote {args.out}: {len(pair_set)} {pair_cfg.scheme}-scheme "
        f"pairs from {args.role} queries",
    )


def _train_figures(args, result, model) -> list[str]:
    if args.no_figures:
        return []
    stem = args.out.rsplit(".", 1)[0]
    losses = stem + "_losses.png"
    gates = stem + "_gates.png"
    loss_curves(result.metrics, losses, force=args.force)
    gate_histogram_figure(
        [v for _, v in gate_histogram(model)], gates, force=args.force
    )
    return [losses, gates]


def cmd_train(args, cfg: PipelineConfig) -> None:
    corpus = _load_corpus(args.corpus)
    schema = _load_schema(args.schema)
    table = _table_for(corpus, schema)
    prepare_output(args.out, args.force)
    inputs = {
        args.corpus: sha256_file(args.corpus),
        args.schema: sha256_file(args.schema),
    }
    extra: list[str] = []

    if args.model_kind == "linear":
        model, trace = train_linear(table, cfg.baseline, schema)
        model.save(args.out)
        payload = {
            "artifact": args.out,
            "model_kind": "linear",
            "final_mse": trace[-1] if trace else None,
        }
        human = (
            f"wrote {args.out}: linear baseline, final mse "
            f"{trace[-1]:.5f}" if trace else f"wrote {args.out}"
        )
    else:
        if args.pairs is None:
            raise ArtifactError(
                "train --model-kind deepfm requires --pairs"
            )
        pair_set = PairSet.load(args.pairs)
        _check_pairs_source(pair_set, args.corpus)
        inputs[args.pairs] = sha256_file(args.pairs)
        model = init_model(
            schema,
            embedding_dim=cfg.model.embedding_dim,
            seed=cfg.model.seed,
            hidden=cfg.model.hidden,
            beta=cfg.model.beta,
        )
        metrics_path = args.out + ".metrics.jsonl"
        prepare_output(metrics_path, args.force)
        result = train(
            model, pair_set, table, cfg.train, metrics_path=metrics_path
        )
        result.model.save(args.out)
        extra.append(metrics_path)
        extra.extend(_train_figures(args, result, result.model))
        last = result.metrics[-1] if result.metrics else {}
        payload = {
            "artifact": args.out,
            "model_kind": "deepfm",
            "epochs": cfg.train.epochs,
            "final_total_loss": last.get("total"),
            "heldout_pair_accuracy": last.get("heldout_pair_accuracy"),
        }
        human = (
            f"wrote {args.out}: {cfg.train.epochs} epochs, final total "
            f"loss {last.get('total'):.5f}, held-out pair accuracy "
            f"{last.get('heldout_pair_accuracy')}"
            if last
            else f"wrote {args.out}"
        )
    write_manifest(
        args.out, "train", cfg.to_dict(), inputs=inputs, extra_outputs=extra
    )
    _print(args, payload, human)


def _audit_rows(table: DiscretizedCorpus, minimum: int = 1000):
    rng = np.random.default_rng(np.random.SeedSequence([0, 53]))
    total = len(table.item_ids)
    take = min(total, max(minimum, 2000))
    idx = rng.choice(total, size=take, replace=total < minimum)
    return table.buckets[np.sort(idx)]


def cmd_prune(args, cfg: PipelineConfig) -> None:
    corpus = _load_corpus(args.corpus)
    schema = _load_schema(args.schema)
    table = _table_for(corpus, schema)
    model = DeepFmModel.load(
        args.model, expected_schema_hash=schema.content_hash()
    )
    pruned, report = prune(
        model, cfg.prune.threshold, audit_buckets=_audit_rows(table)
    )
    prepare_output(args.out, args.force)
    pruned.save(args.out)
    report_path = args.out + ".report.json"
    prepare_output(report_path, args.force)
    write_json(
        report_path,
        {"kind": "prune_report", "version": 1, **report.to_dict()},
    )
    extra = [report_path]
    if not args.no_figures:
        gates_fig = args.out.rsplit(".", 1)[0] + "_gates.png"
        gate_histogram_figure(
            [v for _, v in gate_histogram(model)],
            gates_fig,
            force=args.force,
        )
        extra.append(gates_fig)
    write_manifest(
        args.out,
        "prune",
        cfg.to_dict(),
        inputs={
            args.model: sha256_file(args.model),
            args.corpus: sha256_file(args.corpus),
            args.schema: sha256_file(args.schema),
        },
        extra_outputs=extra,
    )
    _print(
        args,
        {"artifact": args.out, **report.to_dict()},
        f"wrote {args.out}: removed {report.pairs_removed}/"
        f"{report.pairs_total} pair gates and {report.fields_removed}/"
        f"{report.fields_total} field gates; multiplies "
        f"{report.multiply_count_before} -> {report.multiply_count_after}; "
        f"max score delta {report.max_score_delta:.5f} over "
        f"{report.audit_items} items",
    )


def cmd_finetune(args, cfg: PipelineConfig) -> None:
    corpus = _load_corpus(args.corpus)
    schema = _load_schema(args.schema)
    table = _table_for(corpus, schema)
    model = DeepFmModel.load(
        args.model, expected_schema_hash=schema.content_hash()
    )
    pair_set = PairSet.load(args.pairs)
    _check_pairs_source(pair_set, args.corpus)
    ft_config = TrainConfig(**{
        **cfg.train.to_dict(),
        "epochs": cfg.prune.finetune_epochs,
        "sparsity_weight": 0.0,
        "sparsity_warmup_epochs": 0,
    })
    result = finetune_after_prune(model, pair_set, table, ft_config)
    prepare_output(args.out, args.force)
    result.model.save(args.out)
    write_manifest(
        args.out,
        "finetune",
        cfg.to_dict(),
        inputs={
            args.model: sha256_file(args.model),
            args.corpus: sha256_file(args.corpus),
            args.schema: sha256_file(args.schema),
            args.pairs: sha256_file(args.pairs),
        },
    )
    last = result.metrics[-1] if result.metrics else {}
    _print(
        args,
        {
            "artifact": args.out,
            "epochs": ft_config.epochs,
            "heldout_pair_accuracy": last.get("heldout_pair_accuracy"),
        },
        f"wrote {args.out}: {ft_config.epochs} recovery epoch(s)",
    )


def cmd_eval(args, cfg: PipelineConfig) -> None:
    corpus = _load_corpus(args.corpus)
    schema = _load_schema(args.schema)
    table = _table_for(corpus, schema)
    model = load_scorer(args.model)
    if model.schema_hash != schema.content_hash():
        raise ArtifactError(
            f"model at {args.model} does not match schema at {args.schema}"
        )
    eval_pairs = build_pairs(corpus, cfg.eval_pairs, role=cfg.eval.role)
    reports = evaluate(model, table, cfg.eval, eval_pairs=eval_pairs)
    prepare_output(args.out, args.force)
    header = {
        "kind": "eval_report",
        "version": 1,
        "model": args.model,
        "config": cfg.eval.to_dict(),
    }
    write_jsonl(args.out, [header, *[r.to_dict() for r in reports]])
    table_path = args.out.rsplit(".", 1)[0] + ".csv"
    write_eval_table(reports, table_path, force=args.force)
    extra = [table_path]
    if not args.no_figures:
        fig_path = args.out.rsplit(".", 1)[0] + "_recall.png"
        smallest = min(cfg.eval.recall_ns)
        recall_bars(
            [
                (
                    args.model.rsplit("/", 1)[-1],
                    {
                        r.corpus_slice: r.recall_at[smallest]
                        for r in reports
                    },
                )
            ],
            smallest,
            fig_path,
            force=args.force,
        )
        extra.append(fig_path)
    write_manifest(
        args.out,
        "eval",
        cfg.to_dict(),
        inputs={
            args.model: sha256_file(args.model),
            args.corpus: sha256_file(args.corpus),
            args.schema: sha256_file(args.schema),
        },
        extra_outputs=extra,
    )
    lines = []
    for rep in reports:
        recs = ", ".join(
            f"recall@{n}={rep.recall_at[n]:.4f}"
            for n in sorted(rep.recall_at)
        )
        acc = (
            "n/a"
            if rep.pairwise_accuracy is None
            else f"{rep.pairwise_accuracy:.4f}"
        )
        lines.append(
            f"  {rep.corpus_slice:>8}: {recs}, pair accuracy {acc} "
            f"({rep.num_queries} queries)"
        )
    _print(
        args,
        {"artifact": args.out, "reports": [r.to_dict() for r in reports]},
        f"wrote {args.out}\n" + "\n".join(lines),
    )


def cmd_bench(args, cfg: PipelineConfig) -> None:
    corpus = _load_corpus(args.corpus)
    schema = _load_schema(args.schema)
    table = _table_for(corpus, schema)
    model = load_scorer(args.model)
    if model.schema_hash != schema.content_hash():
        raise ArtifactError(
            f"model at {args.model} does not match schema at {args.schema}"
        )
    items = table.buckets[: cfg.bench.max_items]
    result = benchmark(model, items, repetitions=cfg.bench.repetitions)
    prepare_output(args.out, args.force)
    write_json(
        args.out,
        {
            "kind": "bench_report",
            "version": 1,
            "model": args.model,
            "items": int(len(items)),
            "repetitions": cfg.bench.repetitions,
            **result.to_dict(),
        },
    )
    write_manifest(
        args.out,
        "bench",
        cfg.to_dict(),
        inputs={
            args.model: sha256_file(args.model),
            args.corpus: sha256_file(args.corpus),
            args.schema: sha256_file(args.schema),
        },
    )
    _print(
        args,
        {"artifact": args.out, **result.to_dict()},
        f"wrote {args.out}: median {result.mean_latency_us:.2f} us/item "
        f"over {cfg.bench.repetitions} runs, "
        f"{result.multiply_count} multiplies/item",
    )


def cmd_compare(args, cfg: PipelineConfig) -> None:
    corpus = _load_corpus(args.corpus)
    schema = _load_schema(args.schema)
    table = _table_for(corpus, schema)
    eval_pairs = build_pairs(corpus, cfg.eval_pairs, role=cfg.eval.role)
    rows = []
    for model_path in args.models:
        model = load_scorer(model_path)
        if model.schema_hash != schema.content_hash():
            raise ArtifactError(
                f"model at {model_path} does not match schema at "
                f"{args.schema}"
            )
        reports = evaluate(model, table, cfg.eval, eval_pairs=eval_pairs)
        rows.append((model_path, reports))

    ns = sorted(cfg.eval.recall_ns)
    prepare_output(args.out, args.force)
    import csv as _csv

    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(
            ["model", "slice"]
            + [f"recall_at_{n}" for n in ns]
            + ["pairwise_accuracy", "multiply_count"]
        )
        for model_path, reports in rows:
            for rep in reports:
                writer.writerow(
                    [model_path, rep.corpus_slice]
                    + [f"{rep.recall_at[n]:.6f}" for n in ns]
                    + [
                        ""
                        if rep.pairwise_accuracy is None
                        else f"{rep.pairwise_accuracy:.6f}",
                        rep.multiply_count,
                    ]
                )
    write_manifest(
        args.out,
        "compare",
        cfg.to_dict(),
        inputs={
            **{p: sha256_file(p) for p in args.models},
            args.corpus: sha256_file(args.corpus),
            args.schema: sha256_file(args.schema),
        },
    )
    if not args.no_figures:
        fig_path = args.out.rsplit(".", 1)[0] + "_recall.png"
        smallest = ns[0]
        recall_bars(
            [
                (
                    path.rsplit("/", 1)[-1],
                    {
                        r.corpus_slice: r.recall_at[smallest]
                        for r in reports
                    },
                )
                for path, reports in rows
            ],
            smallest,
            fig_path,
            force=args.force,
        )

    name_w = max(len(p) for p, _ in rows)
    header = (
        f"{'model':<{name_w}}  {'slice':>8}  "
        + "  ".join(f"{'r@' + str(n):>8}" for n in ns)
        + f"  {'pair acc':>8}  {'mults':>7}"
    )
    lines = [header, "-" * len(header)]
    for model_path, reports in rows:
        for rep in reports:
            acc = (
                "     n/a"
                if rep.pairwise_accuracy is None
                else f"{rep.pairwise_accuracy:8.4f}"
            )
            lines.append(
                f"{model_path:<{name_w}}  {rep.corpus_slice:>8}  "
                + "  ".join(f"{rep.recall_at[n]:8.4f}" for n in ns)
                + f"  {acc}  {rep.multiply_count:7d}"
            )
    _print(
        args,
        {
            "artifact": args.out,
            "rows": [
                {"model": p, "reports": [r.to_dict() for r in reports]}
                for p, reports in rows
            ],
        },
        "\n".join(lines),
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prerank",
        description=(
            "Desk-scale pre-ranking pipeline: synthetic cascade corpus, "
            "gated DeepFM training, gate-driven pruning, recall and "
            "efficiency evaluation."
        ),
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument(
            "--config",
            default=None,
            help="pipeline config JSON (default: $PRERANK_CONFIG or "
            "built-in defaults)",
        )
        p.add_argument(
            "--force",
            action="store_true",
            help="overwrite existing outputs",
        )
        p.add_argument(
            "--json",
            action="store_true",
            help="machine-readable stdout",
        )
        p.add_argument(
            "--no-figures",
            action="store_true",
            help="skip figure rendering",
        )

    p = sub.add_parser("gen", help="generate the synthetic corpus")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("fit-features", help="fit the feature schema")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_features)

    p = sub.add_parser("make-pairs", help="build ordered training pairs")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--role", choices=("train", "eval"), default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_pairs)

    p = sub.add_parser("train", help="train a scorer")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--pairs", default=None)
    p.add_argument(
        "--model-kind", choices=("deepfm", "linear"), default="deepfm"
    )
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prune", help="prune gates below the threshold")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser(
        "finetune", help="recovery epoch(s) on a pruned model"
    )
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="recall and accuracy report")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="latency microbenchmark")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser(
        "compare", help="side-by-side table for several models"
    )
    common(p)
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        args.func(args, cfg)
    except PrerankError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
