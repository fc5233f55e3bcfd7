"""Command-line interface.

Commands:
    ragmark ingest            build chunk + index snapshot from the corpus
    ragmark run               evaluate the dataset across configurations
    ragmark report            recompute reports from records files only
    ragmark dataset validate  structural checks on a dataset file
    ragmark dataset draft     LLM-draft QA candidates for human review

All commands read `--config` (a single JSON document); flags override config
values, and RAGMARK_*_URL environment variables override endpoint URLs from
both. `run` exits 0 even when individual records fail (failures are data);
nonzero exits are reserved for infrastructure problems.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import (
    RunConfig,
    apply_config_side_effects,
    build_configurations,
    build_ports,
    load_config,
)
from .corpus import chunk_corpus, load_corpus
from .dataset import draft_qa_candidates, load_dataset, save_pairs, validate_dataset
from .evaluation import build_report, load_records, run_evaluation, write_report
from .indexing import build_indexes, load_snapshot, save_snapshot
from .modelgw import GatewayError

logger = logging.getLogger(__name__)


def _load_run_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config)
    for flag, attr in (
        ("corpus_dir", "corpus_dir"),
        ("dataset", "dataset_path"),
        ("output_dir", "output_dir"),
        ("snapshot", "index_snapshot_path"),
        ("workers", "workers"),
        ("seed", "seed"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(config, attr, value)
    apply_config_side_effects(config)
    return config


def cmd_ingest(args: argparse.Namespace) -> int:
    config = _load_run_config(args)
    documents = load_corpus(config.corpus_dir)
    chunks = chunk_corpus(documents, chunk_size=config.chunk_size, overlap=config.overlap)
    ports = build_ports(config)
    preflight = getattr(ports.embedder, "preflight", None)
    if preflight:
        preflight()
    vector, keyword = build_indexes(chunks, ports.embedder)
    config.snapshot_path.parent.mkdir(parents=True, exist_ok=True)
    save_snapshot(config.snapshot_path, chunks, vector, keyword)
    print(
        f"ingested {len(documents)} documents into {len(chunks)} chunks "
        f"(embedding dim {vector.dimension}, {len(keyword.postings)} terms)"
    )
    print(f"snapshot: {config.snapshot_path}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    config = _load_run_config(args)
    pairs = load_dataset(config.dataset_path, allow_drafts=config.allow_drafts)
    bundle = load_snapshot(config.snapshot_path)
    configurations = build_configurations(config)
    ports = build_ports(config)
    ports.preflight()

    records_path = config.records_path
    records_path.parent.mkdir(parents=True, exist_ok=True)
    if records_path.exists() and records_path.stat().st_size:
        if args.overwrite:
            records_path.unlink()
        elif not args.resume:
            print(
                f"error: {records_path} already has records; pass --resume to continue "
                "or --overwrite to start over",
                file=sys.stderr,
            )
            return 1

    records, report = run_evaluation(
        pairs,
        configurations,
        bundle,
        ports,
        records_path,
        workers=config.workers,
        match_threshold=config.match_threshold,
        observation_char_budget=config.observation_char_budget,
        answer_blend=config.answer_blend,
    )
    paths = write_report(report, config.output_dir)
    _print_report_summary(report)
    print(f"records: {records_path}")
    print("reports: " + " ".join(str(p) for p in paths.values()))
    return 0


def _fmt(value: float | None) -> str:
    return "-" if value is None else f"{value:.3f}"


def _print_report_summary(report: dict) -> None:
    header = f"{'configuration':<28} {'records':>7} {'scored':>6} {'errors':>6} {'pass_rate':>9} {'mean':>6}"
    print(header)
    for cid, row in sorted(report["configurations"].items()):
        print(
            f"{cid:<28} {row['records']:>7} {row['scored']:>6} {row['errors']:>6} "
            f"{_fmt(row['pass_rate']):>9} {_fmt(row['aggregate_mean']):>6}"
        )
    totals = report["totals"]
    print(
        f"total: {totals['records']} records, {totals['scored']} scored, "
        f"{totals['errors']} errors, pass rate {_fmt(totals['pass_rate'])}"
    )


def cmd_report(args: argparse.Namespace) -> int:
    records_paths = [Path(p) for p in args.records]
    for path in records_paths:
        if not path.exists():
            print(f"error: records file not found: {path}", file=sys.stderr)
            return 1
    if len(records_paths) == 1:
        records = load_records(records_paths[0])
        out_dir = Path(args.out_dir) if args.out_dir else records_paths[0].parent
    else:
        if not args.out_dir:
            print("error: --out-dir is required when comparing multiple records files", file=sys.stderr)
            return 1
        out_dir = Path(args.out_dir)
        records = []
        labels_seen: set[str] = set()
        for i, path in enumerate(records_paths, start=1):
            label = path.parent.name or f"run{i}"
            while label in labels_seen:
                label = f"{label}#{i}"
            labels_seen.add(label)
            for record in load_records(path):
                merged = dict(record)
                merged["configuration_id"] = f"{label}:{record['configuration_id']}"
                records.append(merged)
    if not records:
        print("error: no parseable records found", file=sys.stderr)
        return 1
    report = build_report(records)
    paths = write_report(report, out_dir)
    _print_report_summary(report)
    print("reports: " + " ".join(str(p) for p in paths.values()))
    return 0


def cmd_dataset_validate(args: argparse.Namespace) -> int:
    report = validate_dataset(args.path)
    for message in report.errors:
        print(f"error: {message}", file=sys.stderr)
    for message in report.warnings:
        print(f"warning: {message}", file=sys.stderr)
    if report.accepted:
        print(f"accepted: {len(report.pairs)} QA pairs, {len(report.warnings)} warning(s)")
        return 0
    print(f"rejected: {len(report.errors)} error(s)", file=sys.stderr)
    return 1


def cmd_dataset_draft(args: argparse.Namespace) -> int:
    config = _load_run_config(args)
    documents = load_corpus(config.corpus_dir)
    ports = build_ports(config)
    preflight = getattr(ports.generator, "preflight", None)
    if preflight:
        preflight()
    drafts = draft_qa_candidates(
        documents, ports.generator, per_doc_count=args.per_doc, include_pairs=args.pairs
    )
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_pairs(drafts, out_path)
    print(f"drafted {len(drafts)} candidate pairs to {out_path}")
    print("drafts carry draft=true and need human review before evaluation")
    return 0


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default="ragmark.json", help="run config JSON (default: ragmark.json)")
    parser.add_argument("--corpus-dir", dest="corpus_dir", help="override corpus directory")
    parser.add_argument("--dataset", help="override dataset path")
    parser.add_argument("--output-dir", dest="output_dir", help="override output directory")
    parser.add_argument("--snapshot", help="override index snapshot path")
    parser.add_argument("--seed", type=int, help="override mock-backend seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ragmark",
        description="Benchmark retrieval strategies and agent profiles over a document corpus.",
    )
    parser.add_argument("--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="chunk the corpus and build the index snapshot")
    _add_config_flags(p_ingest)
    p_ingest.set_defaults(func=cmd_ingest)

    p_run = sub.add_parser("run", help="evaluate the dataset across all configurations")
    _add_config_flags(p_run)
    p_run.add_argument("--workers", type=int, help="override worker count")
    p_run.add_argument("--resume", action="store_true", help="continue an interrupted run")
    p_run.add_argument("--overwrite", action="store_true", help="discard existing records and rerun")
    p_run.set_defaults(func=cmd_run)

    p_report = sub.add_parser("report", help="recompute reports from records files")
    p_report.add_argument("records", nargs="+", help="one or more records.jsonl paths")
    p_report.add_argument("--out-dir", dest="out_dir", help="directory for report files")
    p_report.set_defaults(func=cmd_report)

    p_dataset = sub.add_parser("dataset", help="dataset utilities")
    dataset_sub = p_dataset.add_subparsers(dest="dataset_command", required=True)

    p_validate = dataset_sub.add_parser("validate", help="structurally validate a dataset file")
    p_validate.add_argument("path", help="dataset JSONL path")
    p_validate.set_defaults(func=cmd_dataset_validate)

    p_draft = dataset_sub.add_parser("draft", help="LLM-draft QA candidates for review")
    _add_config_flags(p_draft)
    p_draft.add_argument("--out", required=True, help="output JSONL path for drafts")
    p_draft.add_argument("--per-doc", dest="per_doc", type=int, default=3, help="pairs per document")
    p_draft.add_argument("--pairs", action="store_true", help="also draft from document pairs")
    p_draft.set_defaults(func=cmd_dataset_draft)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("interrupted; completed records were kept", file=sys.stderr)
        return 130
    except (FileNotFoundError, ValueError, GatewayError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
