"""Command-line entry point wiring the whole pipeline.

Subcommands: partition, align, stats, ppl, assess {build,serve,export},
export-trainset. Exit codes: 0 success, 1 usage error, 2 data error,
3 backend error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

from . import assess as assess_mod
from .align import (
    AlignSettings,
    ChecksumMismatch,
    RoundOutcome,
    align_corpus,
    compute_stats,
    config_hash,
    report_text,
)
from .backends import (
    BackendDescriptor,
    BackendFailure,
    RetryPolicy,
    SamplingConfig,
    build_backend,
)
from .corpus import (
    InstructionRecord,
    MalformedInput,
    classify_format,
    parse_dataset,
    parse_tag_map,
    serialize_dataset,
)
from .ppl import SplitSpec, corpus_gap_report
from .prompts import PromptForge, RewriteVariant

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_BACKEND = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ── shared helpers ───────────────────────────────────────────────────────────

def _load_records(paths: List[str]) -> List[InstructionRecord]:
    records: List[InstructionRecord] = []
    seen = set()
    for raw_path in paths:
        path = Path(raw_path)
        tag = path.stem  # filename rule for records without an explicit source
        for rec in parse_dataset(path.read_bytes(), default_source_tag=tag):
            if rec.id in seen:
                raise MalformedInput(f"duplicate id {rec.id!r} across input files")
            seen.add(rec.id)
            records.append(rec)
    return records


def _load_tag_map(path: Optional[str]):
    if path is None:
        return {}
    return parse_tag_map(Path(path).read_text(encoding="utf-8"))


def _read_config(path: Optional[str]) -> Dict[str, str]:
    """Flatten a 'key = value' config file with section headers into section.key."""
    if path is None:
        return {}
    parser = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    flat = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            flat[f"{section}.{key}"] = value
    return flat


def _resolve(cli_value, config: Dict[str, str], key: str, default, cast=str):
    # precedence: CLI flag > config file > built-in default
    if cli_value is not None:
        return cli_value
    if key in config:
        return cast(config[key])
    return default


def _make_backend(args, config: Dict[str, str]):
    kind = _resolve(args.backend, config, "backend.kind", "reference")
    model_name = _resolve(args.model_name, config, "backend.model_name", "")
    retries = int(_resolve(getattr(args, "max_attempts", None), config, "backend.max_attempts", 3))
    backoff = float(_resolve(getattr(args, "base_backoff", None), config, "backend.base_backoff", 0.5))
    if kind == "reference":
        descriptor = BackendDescriptor("reference", model_name or "reference")
        model_path = getattr(args, "reference_model", None)
        return build_backend(descriptor, Path(model_path) if model_path else None)
    # anything else is treated as a remote endpoint URL
    endpoint = kind if kind.startswith("http") else _resolve(
        None, config, "backend.endpoint", None
    )
    if not endpoint:
        raise MalformedInput("remote backend requires --backend <url>")
    descriptor = BackendDescriptor(
        "remote", model_name or "model", endpoint,
        RetryPolicy(max_attempts=retries, base_backoff=backoff),
    )
    return build_backend(descriptor)


def _sampling(args, config: Dict[str, str]) -> SamplingConfig:
    profile = _resolve(getattr(args, "profile", None), config, "sampling.profile", "default")
    base = (
        SamplingConfig.rewrite_low_temp()
        if profile == "low-temp"
        else SamplingConfig.rewrite_default()
    )
    return SamplingConfig(
        temperature=float(_resolve(args.temperature, config, "sampling.temperature", base.temperature)),
        top_p=float(_resolve(args.top_p, config, "sampling.top_p", base.top_p)),
        top_k=int(_resolve(args.top_k, config, "sampling.top_k", base.top_k)),
        max_length=int(_resolve(args.max_length, config, "sampling.max_length", base.max_length)),
    )


def _provenance(backend, seed: int, digest: str) -> dict:
    return {
        "config_hash": digest,
        "prompt_assets": PromptForge().asset_digests(),
        "backend": getattr(backend, "name", "?"),
        "seed": seed,
    }


def _write_json(path: Path, obj: dict) -> None:
    Path(path).write_text(
        json.dumps(obj, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )


def _load_outcomes(path: str) -> List[RoundOutcome]:
    outcomes = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "record_id" not in obj:
                continue  # checkpoint header line
            outcomes.append(RoundOutcome.from_json_obj(obj))
    return outcomes


# ── subcommands ──────────────────────────────────────────────────────────────

def cmd_partition(args) -> int:
    records = _load_records(args.input)
    tag_map = _load_tag_map(args.tag_map)

    per_class: Dict[str, List[InstructionRecord]] = {}
    per_tag: Dict[str, int] = {}
    summary = {"soft": 0, "hard": 0, "text_only": 0}
    for rec in records:
        cls = classify_format(rec, tag_map)
        name = cls.kind if cls.subtype is None else cls.subtype.value
        per_class.setdefault(name, []).append(rec)
        per_tag[rec.source_tag] = per_tag.get(rec.source_tag, 0) + 1
        summary[cls.kind] += 1

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, recs in per_class.items():
        (out_dir / f"{name}.json").write_text(
            serialize_dataset(recs, compact=args.compact), encoding="utf-8"
        )
    with (out_dir / "counts.tsv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t")
        writer.writerow(["kind", "name", "records"])
        for kind in ("soft", "hard", "text_only"):
            writer.writerow(["class", kind, summary[kind]])
        for name in sorted(per_class):
            writer.writerow(["subtype", name, len(per_class[name])])
        for tag in sorted(per_tag):
            writer.writerow(["source_tag", tag, per_tag[tag]])
    _write_json(out_dir / "counts.json", {
        "total": len(records),
        "classes": summary,
        "subtypes": {name: len(recs) for name, recs in per_class.items()},
        "source_tags": per_tag,
    })
    if not args.no_fig:
        from .figures import render_partition_figure
        render_partition_figure(
            {name: len(recs) for name, recs in sorted(per_class.items())},
            out_dir / "partition.png",
        )
    print(
        f"partitioned {len(records)} records: soft={summary['soft']} "
        f"hard={summary['hard']} text_only={summary['text_only']}"
    )
    return EXIT_OK


def cmd_align(args, config: Dict[str, str]) -> int:
    records = _load_records(args.input)
    tag_map = _load_tag_map(args.tag_map)
    backend = _make_backend(args, config)
    settings = AlignSettings(
        rewrite_cfg=_sampling(args, config),
        variant=RewriteVariant(args.variant),
        concurrency=int(_resolve(args.concurrency, config, "align.concurrency", 4)),
        strict_sensitive_case=args.strict_sensitive_case,
        run_id=args.run_id,
    )
    aligned, report = align_corpus(
        records, backend, tag_map, settings,
        checkpoint_path=Path(args.checkpoint) if args.checkpoint else None,
    )
    digest = config_hash(settings, backend.name, tag_map, records)
    prov = _provenance(backend, args.seed, digest)

    out = Path(args.out)
    out.write_text(serialize_dataset(aligned, compact=args.compact), encoding="utf-8")
    _write_json(Path(str(out) + ".provenance.json"), prov)

    report_path = Path(args.report) if args.report else Path(str(out) + ".report.json")
    _write_json(report_path, {"provenance": prov, "report": report.to_json_obj()})
    report_path.with_suffix(".txt").write_text(report_text(report), encoding="utf-8")
    if not args.no_fig:
        from .figures import render_alignment_figure
        render_alignment_figure(report, report_path.with_suffix(".png"))
    print(report_text(report), end="")
    if (
        report.total_rounds > 0
        and report.histograms.get("rewrite_backend_error", 0) == report.total_rounds
    ):
        # every round failed at the transport layer: the backend is unusable
        print("backend error: no round could be processed", file=sys.stderr)
        return EXIT_BACKEND
    return EXIT_OK


def cmd_stats(args) -> int:
    outcomes = _load_outcomes(args.outcomes)
    report = compute_stats(outcomes)
    obj = report.to_json_obj()
    if args.out:
        _write_json(Path(args.out), obj)
        if not args.no_fig:
            from .figures import render_alignment_figure
            render_alignment_figure(report, Path(args.out).with_suffix(".png"))
    print(report_text(report), end="")
    return EXIT_OK


def cmd_ppl(args, config: Dict[str, str]) -> int:
    records = _load_records(args.input)
    tag_map = _load_tag_map(args.tag_map) if args.tag_map else None
    backend = _make_backend(args, config)
    report = corpus_gap_report(
        records, backend, SplitSpec(args.eval_count or len(records)), tag_map
    )
    digest = hashlib.sha256(
        json.dumps({"eval_count": report.eval_count, "backend": backend.name},
                   sort_keys=True).encode()
    ).hexdigest()
    obj = {"provenance": _provenance(backend, args.seed, digest)}
    obj.update(report.to_json_obj())
    out = Path(args.out)
    _write_json(out, obj)
    with out.with_suffix(".csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["record_id", "round_index", "ppl"])
        for (rid, ri), value in report.per_round_ppl:
            writer.writerow([rid, ri, f"{value:.9f}"])
    if not args.no_fig:
        from .figures import render_ppl_figure
        render_ppl_figure(report, out.with_suffix(".png"))
    print(f"corpus_ppl={report.corpus_ppl:.6f} tokens={report.token_total}")
    return EXIT_OK


def cmd_export_trainset(args) -> int:
    original = _load_records([args.original])
    replacements: Dict[str, InstructionRecord] = {}
    for path in args.aligned:
        for rec in parse_dataset(Path(path).read_bytes()):
            replacements[rec.id] = rec
    merged = [replacements.get(rec.id, rec) for rec in original]
    Path(args.out).write_text(
        serialize_dataset(merged, compact=args.compact), encoding="utf-8"
    )
    print(f"exported {len(merged)} records ({len(replacements)} aligned)")
    return EXIT_OK


def cmd_assess_build(args) -> int:
    llm_pool = json.loads(Path(args.llm_pool).read_text(encoding="utf-8"))
    dataset_pool = json.loads(Path(args.dataset_pool).read_text(encoding="utf-8"))
    outcomes = _load_outcomes(args.outcomes)
    session = assess_mod.build_session(
        llm_pool, dataset_pool, outcomes,
        seed=args.seed,
        session_id=args.session_id,
        anchor_count=args.anchors,
        eval_count=args.samples,
    )
    session.save(Path(args.out))
    print(f"session {session.session_id}: {len(session.eval_samples)} samples -> {args.out}")
    return EXIT_OK


def cmd_assess_serve(args) -> int:
    import uvicorn

    app = assess_mod.create_app(Path(args.session))
    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


def cmd_assess_export(args) -> int:
    session = assess_mod.AssessmentSession.load(Path(args.session))
    result = assess_mod.aggregate(session, allow_partial=args.partial)
    _write_json(Path(args.out), result.to_json_obj())
    print(json.dumps(result.percentages))
    return EXIT_OK


# ── parser ───────────────────────────────────────────────────────────────────

def _add_backend_args(p: _Parser) -> None:
    p.add_argument("--backend", help="'reference' or a remote endpoint URL")
    p.add_argument("--model-name", dest="model_name")
    p.add_argument("--reference-model", dest="reference_model",
                   help="table file for the reference backend")
    p.add_argument("--max-attempts", dest="max_attempts", type=int)
    p.add_argument("--base-backoff", dest="base_backoff", type=float)


def _add_sampling_args(p: _Parser) -> None:
    p.add_argument("--profile", choices=["default", "low-temp"])
    p.add_argument("--temperature", type=float)
    p.add_argument("--top-p", dest="top_p", type=float)
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--max-length", dest="max_length", type=int)


def build_parser() -> _Parser:
    parser = _Parser(prog="manner-align")
    parser.add_argument("--config", help="key = value config file with section headers")
    parser.add_argument("--seed", type=int, default=0)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("partition", help="classify records and emit per-class files")
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--tag-map", dest="tag_map")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--compact", action="store_true")
    p.add_argument("--no-fig", action="store_true")

    p = sub.add_parser("align", help="run rewrite/review alignment over a corpus")
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--tag-map", dest="tag_map")
    _add_backend_args(p)
    _add_sampling_args(p)
    p.add_argument("--variant", choices=[v.value for v in RewriteVariant], default="no1")
    p.add_argument("--concurrency", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--run-id", dest="run_id", default="run")
    p.add_argument("--strict-sensitive-case", action="store_true")
    p.add_argument("--compact", action="store_true")
    p.add_argument("--no-fig", action="store_true")

    p = sub.add_parser("stats", help="aggregate an outcome log into a report")
    p.add_argument("--outcomes", required=True)
    p.add_argument("--out")
    p.add_argument("--no-fig", action="store_true")

    p = sub.add_parser("ppl", help="perplexity gap report over an evaluation split")
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--tag-map", dest="tag_map")
    _add_backend_args(p)
    p.add_argument("--eval-count", dest="eval_count", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--no-fig", action="store_true")

    p = sub.add_parser("export-trainset", help="merge aligned records into the original order")
    p.add_argument("--original", required=True)
    p.add_argument("--aligned", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--compact", action="store_true")

    assess = sub.add_parser("assess", help="blind human assessment sessions")
    assess_sub = assess.add_subparsers(dest="assess_command")

    p = assess_sub.add_parser("build")
    p.add_argument("--llm-pool", dest="llm_pool", required=True,
                   help="JSON array of model-style anchor texts")
    p.add_argument("--dataset-pool", dest="dataset_pool", required=True,
                   help="JSON array of dataset-style anchor texts")
    p.add_argument("--outcomes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--session-id", dest="session_id", default="session")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--anchors", type=int, default=20)
    p.add_argument("--samples", type=int, default=100)

    p = assess_sub.add_parser("serve")
    p.add_argument("--session", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8009)

    p = assess_sub.add_parser("export")
    p.add_argument("--session", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--partial", action="store_true")

    return parser


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return EXIT_USAGE
    config = _read_config(args.config)
    try:
        if args.command == "partition":
            return cmd_partition(args)
        if args.command == "align":
            return cmd_align(args, config)
        if args.command == "stats":
            return cmd_stats(args)
        if args.command == "ppl":
            return cmd_ppl(args, config)
        if args.command == "export-trainset":
            return cmd_export_trainset(args)
        if args.command == "assess":
            if args.assess_command == "build":
                return cmd_assess_build(args)
            if args.assess_command == "serve":
                return cmd_assess_serve(args)
            if args.assess_command == "export":
                return cmd_assess_export(args)
            print("usage: manner-align assess {build,serve,export} ...", file=sys.stderr)
            return EXIT_USAGE
    except BackendFailure as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (MalformedInput, ChecksumMismatch, assess_mod.InsufficientPool,
            FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_USAGE


def main() -> None:
    raise SystemExit(run())


if __name__ == "__main__":
    main()
