"""Command-line interface: run, refine, eval, inspect."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import AblationFlags, load_config
from .errors import PipelineError
from .pipeline import apply_refinement, harvest_failures, rescore_run, run_pipeline


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plansql",
        description="Planner-first question-to-SQL pipeline with execution voting",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the pipeline over one split")
    run.add_argument("--config", required=True, help="YAML run config")
    run.add_argument("--split", default=None, help="split to score (default from config)")
    run.add_argument("--out", default=None, help="run directory for reports and transcripts")
    run.add_argument("--mock-script", default=None, help="override the mock script path")
    run.add_argument("--prompt-snapshot", default=None, help="prompt snapshot directory")
    run.add_argument("--zh-mode", choices=["direct", "translate"], default=None)
    run.add_argument("--parallelism", type=int, default=None)
    run.add_argument("--no-planner", action="store_true",
                     help="bypass planning; question goes straight to the SQL stage")
    run.add_argument("--no-guidelines", action="store_true",
                     help="assemble the planner prompt without guidelines")
    run.add_argument("--no-icl", action="store_true",
                     help="omit in-context examples from the SQL prompt")
    run.add_argument("--single-plan", action="store_true",
                     help="one plan per query (disables majority voting)")

    refine = sub.add_parser("refine", help="one prompt-refinement iteration")
    refine.add_argument("--config", required=True)
    refine.add_argument("--run", required=True, help="run directory of a heldout-split run")
    refine.add_argument("--out", required=True, help="refinement workspace directory")
    refine.add_argument("--max-clusters", type=int, default=2)
    refine.add_argument("--apply", action="store_true",
                        help="second phase: read the edited cluster file, distill, snapshot")

    evaluate = sub.add_parser("eval", help="rescore the final SQL of an existing run")
    evaluate.add_argument("--config", required=True)
    evaluate.add_argument("--run", required=True)

    inspect = sub.add_parser("inspect", help="print one query's full trail")
    inspect.add_argument("--run", required=True)
    inspect.add_argument("--query", required=True)
    return parser


def _config_from_args(args) -> "RunConfig":
    flags = AblationFlags(
        no_planner=getattr(args, "no_planner", False),
        no_guidelines=getattr(args, "no_guidelines", False),
        no_icl=getattr(args, "no_icl", False),
        single_plan=getattr(args, "single_plan", False),
    )
    return load_config(
        args.config,
        split=getattr(args, "split", None),
        out_dir=Path(args.out).resolve() if getattr(args, "out", None) else None,
        mock_script=Path(args.mock_script).resolve() if getattr(args, "mock_script", None) else None,
        prompt_snapshot=Path(args.prompt_snapshot).resolve()
        if getattr(args, "prompt_snapshot", None) else None,
        zh_mode=getattr(args, "zh_mode", None),
        parallelism=getattr(args, "parallelism", None),
        flags=flags,
    )


def cmd_run(args) -> int:
    config = _config_from_args(args)
    run_pipeline(config)
    return 0


def cmd_refine(args) -> int:
    config = _config_from_args(args)
    if args.apply:
        result = apply_refinement(config, args.run, args.out)
        print(f"distilled {len(result.new_guidelines)} guideline(s); "
              f"snapshot at {result.snapshot_dir}")
        return 0
    result = harvest_failures(config, args.run, args.out, args.max_clusters)
    if not result.cases:
        print("no failures in the heldout run; nothing to refine")
        return 0
    print(f"wrote {len(result.clusters)} cluster(s) covering {len(result.cases)} "
          f"failure(s) to {result.clusters_path}")
    print("edit the file (labels, notes, membership), then re-run with --apply")
    return 0


def cmd_eval(args) -> int:
    config = _config_from_args(args)
    rescore_run(config, args.run)
    return 0


def cmd_inspect(args) -> int:
    run_dir = Path(args.run)
    document = json.loads((run_dir / "report.json").read_text(encoding="utf-8"))
    record = next(
        (q for q in document["queries"] if q["query_id"] == args.query), None
    )
    if record is None:
        print(f"query {args.query!r} not in {run_dir / 'report.json'}", file=sys.stderr)
        return 1
    print(f"query {record['query_id']} ({record['language']}, db={record['db_id']})")
    print(f"question: {record['question']}")
    print(f"gold SQL: {record['gold_sql']}")
    verdict = record["verdict"]
    print(
        f"verdict: valid={verdict['valid']} executed_ok={verdict['executed_ok']} "
        f"exec_match={verdict['exec_match']} decision={verdict['decision']}"
    )
    print(f"final SQL: {verdict['final_sql']}")
    print("vote entries:")
    for entry in record["vote"]["entries"]:
        digest = (entry["digest"] or "")[:12]
        print(
            f"  plan {entry['plan_index']}: status={entry['status']} "
            f"valid={entry['valid']} digest={digest} sql={entry['sql']!r}"
        )
    transcript_path = run_dir / "transcripts" / f"{args.query}.json"
    if transcript_path.is_file():
        entries = json.loads(transcript_path.read_text(encoding="utf-8"))
        print(f"transcript ({len(entries)} calls):")
        for entry in entries:
            meta = entry.get("meta", {})
            stage = meta.get("stage", "?")
            index = meta.get("plan_index")
            suffix = f"[{index}]" if index is not None else ""
            first_line = entry["response_text"].strip().splitlines()[:1]
            print(f"  {stage}{suffix}: {first_line[0] if first_line else ''}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "run": cmd_run,
        "refine": cmd_refine,
        "eval": cmd_eval,
        "inspect": cmd_inspect,
    }
    try:
        return handlers[args.command](args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
