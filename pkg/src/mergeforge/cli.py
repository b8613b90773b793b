"""Command-line entry point: validate, merge, evolve, curate, define, judge, report.

Exit codes: 0 success, 1 validation or diagnostic failure, 2 usage
error, 3 I/O or endpoint failure. stdout carries exactly one JSON line
of machine-readable results per successful run; all diagnostics go to
stderr. No subcommand writes outside the output paths it was given.
API keys come only from the MERGEFORGE_API_KEY environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys

from . import evolve as evo
from . import harness, reporting, vocab
from .driver import run_recipe
from .merging import MergeError
from .recipes import RecipeError, parse_recipe, serialize_recipe, validate_recipe
from .tensorstore import CheckpointFormatError, CheckpointReader

__all__ = ["main"]

EXIT_OK = 0
EXIT_DIAGNOSTIC = 1
EXIT_USAGE = 2
EXIT_IO = 3


class _Usage(Exception):
    """Flag values that make no sense (reported as usage errors, exit 2)."""


def _err(message: str) -> None:
    print(message, file=sys.stderr)


def _emit(summary: dict) -> None:
    print(json.dumps(summary, ensure_ascii=False))


def _read_bytes(path: str) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def _load_recipe_file(path: str):
    return parse_recipe(_read_bytes(path))


# ---------------------------------------------------------------------------
# subcommands


def _cmd_validate(args) -> int:
    recipe = _load_recipe_file(args.recipe)
    diagnostics = validate_recipe(recipe, CheckpointReader)
    for d in diagnostics:
        _err(d)
    _emit(
        {
            "ok": not diagnostics,
            "recipe": args.recipe,
            "method": recipe.method,
            "inputs": len(recipe.input_paths()),
            "diagnostics": len(diagnostics),
        }
    )
    return EXIT_OK if not diagnostics else EXIT_DIAGNOSTIC


def _cmd_merge(args) -> int:
    recipe = _load_recipe_file(args.recipe)
    summary = run_recipe(recipe, threads=args.threads)
    _emit(summary)
    return EXIT_OK


def _cmd_evolve(args) -> int:
    template = _load_recipe_file(args.template)
    space = evo.parse_space(_read_bytes(args.space))
    if args.budget < evo.MU + evo.LAMBDA:
        raise _Usage(
            f"--budget {args.budget} is below the minimum {evo.MU + evo.LAMBDA} "
            "(one full generation)"
        )
    if args.concurrency < 1:
        raise _Usage(f"--concurrency {args.concurrency} must be >= 1")
    # Surface space-to-template mapping problems (unknown weight index,
    # out-of-range substitutions) before any fitness evaluation runs; the
    # box corners bound every value mutation clamping can reach.
    lo, hi = space.bounds()
    for corner in (lo, hi):
        evo.candidate_to_recipe(evo.Candidate(corner), template, space)
    os.makedirs(args.out_dir, exist_ok=True)
    candidates_dir = os.path.join(args.out_dir, "candidates")
    fitness = evo.make_command_evaluator(
        args.fitness_cmd, template, space, candidates_dir, timeout=args.eval_timeout
    )
    log_path = os.path.join(args.out_dir, "evolve_log.csv")
    try:
        best, log = evo.evolve(
            space, fitness, budget=args.budget, seed=args.seed, concurrency=args.concurrency
        )
    except evo.EvolveAbort as e:
        with open(log_path, "w", encoding="utf-8", newline="") as f:
            f.write(evo.log_to_csv(e.log))
        _err(f"evolution aborted: {e}")
        _err(f"partial log written to {log_path}")
        return EXIT_IO
    best_recipe = evo.candidate_to_recipe(best, template, space)
    best_path = os.path.join(args.out_dir, "best.json")
    with open(best_path, "w", encoding="utf-8") as f:
        f.write(serialize_recipe(best_recipe))
    with open(log_path, "w", encoding="utf-8", newline="") as f:
        f.write(evo.log_to_csv(log))
    _emit(
        {
            "best_fitness": best.fitness,
            "best": {d.name: float(v) for d, v in zip(space.dims, best.x)},
            "generations": len(log.generations),
            "evaluations": evo.MU + evo.LAMBDA * len(log.generations),
            "best_recipe": best_path,
            "log": log_path,
        }
    )
    return EXIT_OK


def _cmd_curate(args) -> int:
    if args.max_freq < 0:
        raise _Usage(f"--max-freq {args.max_freq} must be >= 0")
    terms = vocab.read_terms_csv(args.terms)
    freq = vocab.count_corpus_file(args.corpus)
    kept = vocab.curate(terms, freq, max_freq=args.max_freq)
    vocab.write_terms_csv(kept, args.out)
    _emit(
        {
            "terms_in": len(terms),
            "terms_kept": len(kept),
            "corpus_tokens": freq.total_tokens,
            "out": args.out,
        }
    )
    return EXIT_OK


def _endpoint_from_args(base_url: str, model: str, args) -> harness.EndpointConfig:
    return harness.EndpointConfig.from_env(
        base_url,
        model,
        max_tokens=args.max_tokens,
        temperature=args.temperature,
        concurrency_limit=args.concurrency,
        timeout=args.timeout,
    )


def _cmd_define(args) -> int:
    endpoint = _endpoint_from_args(args.endpoint, args.model, args)
    terms = vocab.read_terms_csv(args.terms)
    records = harness.generate_definitions(
        endpoint, terms, language=args.language, is_reference=args.reference
    )
    harness.write_jsonl(records, args.out)
    failed = sum(1 for r in records if r.error)
    for r in records:
        if r.error:
            _err(f"{r.term_en}: {r.error}")
    _emit({"records": len(records), "failed": failed, "out": args.out})
    if records and failed == len(records):
        _err("every definition request failed")
        return EXIT_IO
    return EXIT_OK


def _cmd_judge(args) -> int:
    judge = _endpoint_from_args(args.judge_endpoint, args.judge_model, args)
    definitions = harness.read_definitions_jsonl(args.definitions)
    references = {
        r.term_en: r for r in harness.read_definitions_jsonl(args.references) if r.is_reference
    }
    if not references:
        raise harness.HarnessError(
            f"{args.references}: no reference records (is_reference true) found"
        )
    candidates = [r for r in definitions if not r.is_reference and not r.error]
    skipped = sum(1 for r in definitions if r.is_reference or r.error)
    for r in definitions:
        if not r.is_reference and r.error:
            _err(f"skipping {r.term_en}: generation previously failed ({r.error})")
    valid, invalid = harness.judge_definitions(judge, candidates, references)
    harness.write_jsonl(valid, args.out)
    if args.invalid_out:
        harness.write_jsonl(invalid, args.invalid_out)
    for bad in invalid:
        _err(f"invalid judge output for {bad['term_en']}: {bad['error']}")
    _emit(
        {
            "scored": len(valid),
            "invalid": len(invalid),
            "skipped": skipped,
            "out": args.out,
        }
    )
    if candidates and not valid:
        _err("no candidate received a valid score")
        return EXIT_IO
    return EXIT_OK


def _safe_filename(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", name)


def _cmd_report(args) -> int:
    records = []
    for path in args.scores:
        records.extend(harness.read_scores_jsonl(path))
    by_model: dict[str, dict[str, list[int]]] = {}
    for rec in records:
        by_model.setdefault(rec.model_id, {}).setdefault(rec.judge_id, []).append(rec.score)
    judges = None
    if args.judges:
        judges = [j for j in args.judges.split(",") if j]
    stats_by_model = {
        model: {judge: reporting.compute_stats(scores) for judge, scores in per_judge.items()}
        for model, per_judge in by_model.items()
    }
    table = reporting.report_table(stats_by_model, judges)
    with open(args.out, "w", encoding="utf-8", newline="") as f:
        f.write(table)
    written = [args.out]
    if args.hist_dir:
        os.makedirs(args.hist_dir, exist_ok=True)
        for model, per_judge in stats_by_model.items():
            for judge, stats in per_judge.items():
                path = os.path.join(
                    args.hist_dir, f"{_safe_filename(model)}__{_safe_filename(judge)}.csv"
                )
                reporting.emit_histogram(stats, path)
                written.append(path)
    if args.stats_csv:
        with open(args.stats_csv, "w", encoding="utf-8", newline="") as f:
            f.write(reporting.stats_csv(stats_by_model, judges))
        written.append(args.stats_csv)
    _emit(
        {
            "records": len(records),
            "models": len(stats_by_model),
            "judges": sorted({j for p in by_model.values() for j in p}),
            "out": args.out,
            "files": written,
        }
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mergeforge",
        description="Checkpoint merging, merge-parameter search, and definition-judging pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a recipe and its referenced checkpoints")
    p.add_argument("--recipe", required=True)
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("merge", help="run a merge recipe file-to-file")
    p.add_argument("--recipe", required=True)
    p.add_argument("--threads", type=int, default=1, help="tensor workers (output-invariant)")
    p.set_defaults(func=_cmd_merge)

    p = sub.add_parser("evolve", help="search merge hyperparameters against a fitness command")
    p.add_argument("--template", required=True, help="recipe file providing fixed fields")
    p.add_argument("--space", required=True, help='JSON {"dims": [{name, lower, upper}]}')
    p.add_argument("--budget", type=int, required=True, help="total candidate evaluations")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fitness-cmd", required=True, help="command run per candidate recipe")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--concurrency", type=int, default=1, help="parallel fitness evaluations")
    p.add_argument("--eval-timeout", type=float, default=None, help="seconds per evaluation")
    p.set_defaults(func=_cmd_evolve)

    p = sub.add_parser("curate", help="filter a term list down to rare nouns/adjectives")
    p.add_argument("--terms", required=True, help="CSV with header term_en,pos[,term_ja]")
    p.add_argument("--corpus", required=True, help="plain-text frequency corpus")
    p.add_argument("--max-freq", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_curate)

    p = sub.add_parser("define", help="generate term definitions via a chat endpoint")
    p.add_argument("--endpoint", required=True, help="base URL")
    p.add_argument("--model", required=True)
    p.add_argument("--terms", required=True)
    p.add_argument("--language", required=True, choices=("en", "ja"))
    p.add_argument("--out", required=True, help="definitions JSONL")
    p.add_argument("--reference", action="store_true", help="mark records as references")
    p.add_argument("--max-tokens", type=int, default=256)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--timeout", type=float, default=30.0)
    p.set_defaults(func=_cmd_define)

    p = sub.add_parser("judge", help="score definitions against references via a judge endpoint")
    p.add_argument("--judge-endpoint", required=True, help="base URL")
    p.add_argument("--judge-model", required=True)
    p.add_argument("--definitions", required=True, help="candidate definitions JSONL")
    p.add_argument("--references", required=True, help="reference definitions JSONL")
    p.add_argument("--out", required=True, help="valid scores JSONL")
    p.add_argument("--invalid-out", default=None, help="unparseable judgements JSONL")
    p.add_argument("--max-tokens", type=int, default=256)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--timeout", type=float, default=30.0)
    p.set_defaults(func=_cmd_judge)

    p = sub.add_parser("report", help="render score statistics as a Markdown table")
    p.add_argument("--scores", action="append", required=True, help="scores JSONL (repeatable)")
    p.add_argument("--out", required=True, help="Markdown table path")
    p.add_argument("--hist-dir", default=None, help="write per-(model, judge) histogram CSVs")
    p.add_argument("--stats-csv", default=None, help="write full-precision statistics CSV")
    p.add_argument("--judges", default=None, help="comma-separated judge column order")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except _Usage as e:
        _err(str(e))
        return EXIT_USAGE
    except (
        RecipeError,
        MergeError,
        CheckpointFormatError,
        vocab.VocabError,
        harness.HarnessError,
        reporting.ReportError,
        evo.EvolveError,
        ValueError,
    ) as e:
        _err(str(e))
        return EXIT_DIAGNOSTIC
    except (OSError, harness.EndpointError) as e:
        _err(str(e))
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
