"""Per-query pipeline orchestration and the refinement iteration.

For each query: retrieve schema, plan (unless bypassed), compile SQL per
plan, execute under the sandbox, vote on result fingerprints, judge against
gold, then aggregate into a run report. Per-query errors become failed
verdicts; they never abort the run.
"""

from __future__ import annotations

import json
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .config import RunConfig
from .dataset import DatabaseCatalog, NlQuery, Split, load_split
from .errors import ConfigError, PipelineError
from .evaluation import EvalReport, GoldRunner, QueryVerdict, aggregate, judge
from .executor import Database, ExecutionOutcome, check_validity, execute, fingerprint
from .gateway import LlmGateway, MockScript
from .guidelines import Guideline, GuidelineLibrary, format_guideline, seed_library
from .metaprompt import (
    cluster_failures,
    collect_failures,
    distill_guidelines,
    load_cluster_file,
    merge_into_prompt,
    write_cluster_file,
)
from .planner import (
    Plan,
    assemble_planner_prompt,
    default_base_instructions,
    default_entity_linking_block,
    generate_plans,
)
from .report import QueryRecord, format_summary_table, write_run_report
from .retrieval import IclExample, index_schema, make_embedder, retrieve_icl, retrieve_schema
from .sql_agent import SqlCandidate, assemble_sql_prompt, generate_sql
from .voting import VoteEntry, VoteRecord, vote


@dataclass
class PromptBundle:
    base: str
    guidelines: tuple[Guideline, ...]
    entity_block: str
    snapshot_meta: dict | None


def load_prompt_bundle(config: RunConfig) -> PromptBundle:
    """Resolve prompt inputs from a snapshot directory or the built-in seeds."""
    if config.prompt_snapshot:
        snapshot = Path(config.prompt_snapshot)
        base = (snapshot / "base.txt").read_text(encoding="utf-8").strip()
        entity_block = (snapshot / "entity_linking.txt").read_text(encoding="utf-8").strip()
        library = GuidelineLibrary(snapshot / "guidelines").load()
        meta_path = snapshot / "metadata.json"
        meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.is_file() else None
    else:
        base = default_base_instructions()
        entity_block = default_entity_linking_block()
        library = seed_library()
        meta = None
    merged = merge_into_prompt(library, base)
    return PromptBundle(
        base=merged.base_instructions,
        guidelines=merged.guidelines,
        entity_block=entity_block,
        snapshot_meta=meta,
    )


def build_gateway(config: RunConfig) -> LlmGateway:
    if config.gateway_backend == "mock":
        return LlmGateway(backend="mock", script=MockScript.from_yaml(config.mock_script))
    return LlmGateway(
        backend="live", endpoint=config.endpoint, credential_env=config.credential_env
    )


def _icl_pools(config: RunConfig, catalog: DatabaseCatalog) -> dict[str, list[IclExample]]:
    if config.flags.no_icl or not config.sql_agent.icl_enabled:
        return {}
    train_path = config.splits.get("train")
    if not train_path:
        return {}
    train = load_split(train_path, "train", known_db_ids=set(catalog.db_ids()))
    pools: dict[str, list[IclExample]] = {}
    for query in train.queries:
        if query.gold_sql:
            pools.setdefault(query.language, []).append(
                IclExample(question=query.text, gold_sql=query.gold_sql,
                           language=query.language)
            )
    return pools


def _failed_record(query: NlQuery, error: str) -> QueryRecord:
    """Per-query errors degrade to a failed verdict instead of aborting the run."""
    candidate = SqlCandidate(sql="", plan_index=0, query_id=query.id, error=error)
    outcome = ExecutionOutcome(status="syntax_error", error_message=error)
    entry = VoteEntry(plan_index=0, candidate=candidate, outcome=outcome, valid=False)
    record = QueryRecord(
        query_id=query.id,
        language=query.language,
        db_id=query.db_id,
        question=query.text,
        gold_sql=query.gold_sql or "",
        gold_digest="",
        verdict=QueryVerdict(
            query_id=query.id, final_sql="", valid=False, executed_ok=False,
            exec_match=False, decision="fallback_first", language=query.language,
        ),
        vote=VoteRecord(query_id=query.id, entries=(entry,), winner_index=0,
                        decision="fallback_first"),
    )
    record.extras["pipeline_error"] = error
    return record


def run_pipeline(config: RunConfig) -> EvalReport:
    """Run the full pipeline over the configured split and write the run dir."""
    config.validate_files()
    catalog = DatabaseCatalog(config.databases_dir)
    split = load_split(
        config.splits[config.split], config.split, known_db_ids=set(catalog.db_ids())
    )
    if not split.queries:
        raise ConfigError(f"split {config.split!r} is empty")

    bundle = load_prompt_bundle(config)
    meta = bundle.snapshot_meta or {}
    if meta.get("source_split") == config.split:
        raise ConfigError(
            f"prompt snapshot was distilled from split {config.split!r}; "
            "scoring that split with it would leak the refinement set"
        )
    guidelines = () if config.flags.no_guidelines else bundle.guidelines

    gateway = build_gateway(config)
    embedder = make_embedder(config.embedder_backend, **config.embedder_options)
    indexes = {
        db_id: index_schema(catalog.schema(db_id), embedder)
        for db_id in sorted({q.db_id for q in split.queries})
    }
    pools = _icl_pools(config, catalog)
    gold_runner = GoldRunner(catalog, config.timeout_ms)

    def process(query: NlQuery) -> QueryRecord:
        try:
            return _process_query(
                query, config, catalog, indexes, pools, guidelines, bundle,
                gateway, gold_runner,
            )
        except PipelineError as exc:
            print(f"[warn] query {query.id}: {exc}", file=sys.stderr)
            return _failed_record(query, str(exc))

    if config.parallelism > 1:
        with ThreadPoolExecutor(max_workers=config.parallelism) as executor_pool:
            records = list(executor_pool.map(process, split.queries))
    else:
        records = [process(q) for q in split.queries]
    records.sort(key=lambda r: r.query_id)

    report = aggregate(
        [r.verdict for r in records],
        {
            "split": config.split,
            "model_name": config.model_name,
            "ablation_flags": config.ablation_dict(),
        },
    )
    if config.out_dir:
        _write_run_dir(config, gateway, report, records, bundle, guidelines)
    print(format_summary_table(report))
    return report


def _process_query(query, config, catalog, indexes, pools, guidelines, bundle,
                   gateway, gold_runner) -> QueryRecord:
    if not query.gold_sql:
        raise PipelineError(f"query {query.id!r} has no gold SQL; split cannot be scored")
    db = Database(catalog.db_path(query.db_id))
    elements = retrieve_schema(indexes[query.db_id], query.text, config.retrieval.schema_top_k)
    icl = []
    pool = pools.get(query.language, [])
    if pool:
        icl = retrieve_icl(pool, query.text, config.retrieval.icl_top_m)
    meta = {"query_id": query.id}

    plans: list[Plan | None]
    if config.flags.no_planner:
        plans = [None]
    else:
        prompt = assemble_planner_prompt(
            bundle.base, guidelines, elements, entity_linking_block=bundle.entity_block
        )
        plans = list(
            generate_plans(
                query, prompt, config.planner, gateway,
                model_name=config.model_name, meta=meta,
            )
        )

    _, order_sensitive, gold_digest = gold_runner.result(query.db_id, query.gold_sql, query.id)

    entries = []
    for plan in plans:
        sql_prompt = assemble_sql_prompt(
            plan, elements, icl, question=query.text if plan is None else None
        )
        candidate = generate_sql(
            plan, sql_prompt, config.sql_agent, gateway,
            query_id=query.id, model_name=config.model_name, meta=meta,
        )
        outcome = execute(candidate.sql, db, config.timeout_ms)
        entries.append(
            VoteEntry(
                plan_index=candidate.plan_index,
                candidate=candidate,
                outcome=outcome,
                fingerprint=fingerprint(outcome, order_sensitive)
                if outcome.status == "ok" else None,
                valid=check_validity(candidate.sql, db),
            )
        )
    record_vote = vote(query.id, entries)
    winner = record_vote.winner
    verdict = judge(
        winner.candidate, query.gold_sql, db,
        language=query.language, decision=record_vote.decision,
        gold_runner=gold_runner, db_id=query.db_id,
        final_outcome=winner.outcome, timeout_ms=config.timeout_ms,
    )
    return QueryRecord(
        query_id=query.id,
        language=query.language,
        db_id=query.db_id,
        question=query.text,
        gold_sql=query.gold_sql,
        gold_digest=gold_digest,
        verdict=verdict,
        vote=record_vote,
        predicted_digest=winner.fingerprint.digest if winner.fingerprint else None,
    )


def _write_run_dir(config, gateway, report, records, bundle, guidelines) -> None:
    run_dir = Path(config.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps(config.to_snapshot(), ensure_ascii=False, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    prompt_dir = run_dir / "prompt"
    prompt_dir.mkdir(exist_ok=True)
    (prompt_dir / "base.txt").write_text(bundle.base + "\n", encoding="utf-8")
    (prompt_dir / "entity_linking.txt").write_text(bundle.entity_block + "\n", encoding="utf-8")
    guideline_dir = prompt_dir / "guidelines"
    if guideline_dir.exists():
        shutil.rmtree(guideline_dir)
    guideline_dir.mkdir()
    for guideline in guidelines:
        (guideline_dir / f"{guideline.id}.txt").write_text(
            format_guideline(guideline), encoding="utf-8"
        )
    transcript_dir = run_dir / "transcripts"
    transcript_dir.mkdir(exist_ok=True)
    for record in records:
        entries = [e.to_dict() for e in gateway.entries_for(record.query_id)]
        (transcript_dir / f"{record.query_id}.json").write_text(
            json.dumps(entries, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )
    write_run_report(run_dir, report, records)


@dataclass
class RefineResult:
    cases: list
    clusters: list
    new_guidelines: list[Guideline]
    snapshot_dir: Path | None
    clusters_path: Path | None


def harvest_failures(config: RunConfig, heldout_run_dir, out_dir,
                     max_clusters: int = 2) -> RefineResult:
    """Phase one of a refinement iteration: collect, cluster, emit the review file."""
    heldout_run_dir = Path(heldout_run_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_doc = json.loads((heldout_run_dir / "report.json").read_text(encoding="utf-8"))
    cases = collect_failures(report_doc, heldout_run_dir)
    if not cases:
        return RefineResult(cases=[], clusters=[], new_guidelines=[],
                            snapshot_dir=None, clusters_path=None)
    embedder = make_embedder(config.embedder_backend, **config.embedder_options)
    clusters = cluster_failures(cases, embedder, max_clusters)
    clusters_path = out_dir / "clusters.yaml"
    write_cluster_file(clusters, clusters_path)
    return RefineResult(cases=cases, clusters=clusters, new_guidelines=[],
                        snapshot_dir=None, clusters_path=clusters_path)


def apply_refinement(config: RunConfig, heldout_run_dir, out_dir) -> RefineResult:
    """Phase two: reload the (edited) clusters, distill, merge, snapshot."""
    heldout_run_dir = Path(heldout_run_dir)
    out_dir = Path(out_dir)
    report_doc = json.loads((heldout_run_dir / "report.json").read_text(encoding="utf-8"))
    cases = collect_failures(report_doc, heldout_run_dir)
    clusters_path = out_dir / "clusters.yaml"
    clusters = load_cluster_file(clusters_path, cases)

    bundle = load_prompt_bundle(config)
    existing = list(bundle.guidelines)
    existing_ids = {g.id for g in existing}
    gateway = build_gateway(config)
    new_guidelines: list[Guideline] = []
    for cluster in clusters:
        distilled = distill_guidelines(
            cluster, cases, gateway, model_name=config.model_name,
            existing_ids=existing_ids | {g.id for g in new_guidelines},
        )
        new_guidelines.extend(distilled)

    snapshot_dir = out_dir / "snapshot"
    if snapshot_dir.exists():
        shutil.rmtree(snapshot_dir)
    snapshot_dir.mkdir(parents=True)
    (snapshot_dir / "base.txt").write_text(bundle.base + "\n", encoding="utf-8")
    (snapshot_dir / "entity_linking.txt").write_text(
        bundle.entity_block + "\n", encoding="utf-8"
    )
    library = GuidelineLibrary(snapshot_dir / "guidelines")
    library.copy_from(existing)
    library.copy_from(new_guidelines)
    parent_meta = bundle.snapshot_meta or {}
    metadata = {
        "source_split": report_doc.get("split"),
        "iteration": int(parent_meta.get("iteration", 0)) + 1,
        "parent": str(config.prompt_snapshot) if config.prompt_snapshot else None,
    }
    (snapshot_dir / "metadata.json").write_text(
        json.dumps(metadata, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    # sanity: the merged library must still assemble into a valid prompt
    merged = merge_into_prompt(library.load(), bundle.base)
    assemble_planner_prompt(merged.base_instructions, merged.guidelines, [],
                            entity_linking_block=bundle.entity_block)
    return RefineResult(cases=cases, clusters=clusters, new_guidelines=new_guidelines,
                        snapshot_dir=snapshot_dir, clusters_path=clusters_path)


def run_refine_iteration(config: RunConfig, heldout_run_dir, out_dir,
                         max_clusters: int = 2, edit_hook=None) -> RefineResult:
    """One full refinement iteration with an optional human-edit hook.

    ``edit_hook`` receives the cluster file path between harvest and apply;
    command-line use splits the phases instead so a person can edit the file.
    """
    harvested = harvest_failures(config, heldout_run_dir, out_dir, max_clusters)
    if not harvested.cases:
        return harvested
    if edit_hook is not None:
        edit_hook(harvested.clusters_path)
    return apply_refinement(config, heldout_run_dir, out_dir)


def rescore_run(config: RunConfig, run_dir) -> EvalReport:
    """Re-judge the final SQL of an existing run (the ``eval`` command)."""
    run_dir = Path(run_dir)
    document = json.loads((run_dir / "report.json").read_text(encoding="utf-8"))
    catalog = DatabaseCatalog(config.databases_dir)
    gold_runner = GoldRunner(catalog, config.timeout_ms)
    verdicts = []
    for record in document["queries"]:
        db = Database(catalog.db_path(record["db_id"]))
        final = SqlCandidate(
            sql=record["verdict"]["final_sql"],
            plan_index=record["vote"]["winner_index"],
            query_id=record["query_id"],
        )
        verdicts.append(
            judge(
                final, record["gold_sql"], db,
                language=record["language"], decision=record["verdict"]["decision"],
                gold_runner=gold_runner, db_id=record["db_id"],
                timeout_ms=config.timeout_ms,
            )
        )
    report = aggregate(
        verdicts,
        {
            "split": document.get("split", "?"),
            "model_name": document.get("model_name", "?"),
            "ablation_flags": document.get("ablation_flags", {}),
        },
    )
    print(format_summary_table(report))
    return report
