"""Run report emission: canonical JSON, delimited verdicts, summary figure.

The JSON document is canonical: keys sorted, no timing or other volatile
fields, so identical runs produce byte-identical reports. Wall-clock data
stays in the transcripts, where mock latencies are pinned to zero.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")  # render to files only, never to a display
import matplotlib.pyplot as plt

from .evaluation import EvalReport, QueryVerdict
from .voting import VoteRecord

_FLAG_LABELS = {
    "no_guidelines": "w/o guidelines",
    "no_planner": "w/o planner agent",
    "no_icl": "w/o ICL examples",
    "single_plan": "w/o majority voting",
}


@dataclass
class QueryRecord:
    """Everything the report keeps for one query, including the vote trail."""

    query_id: str
    language: str
    db_id: str
    question: str
    gold_sql: str
    gold_digest: str
    verdict: QueryVerdict
    vote: VoteRecord
    predicted_digest: str | None = None
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        entries = []
        for entry in self.vote.entries:
            entries.append(
                {
                    "plan_index": entry.plan_index,
                    "sql": entry.candidate.sql,
                    "generation_error": entry.candidate.error,
                    "status": entry.outcome.status,
                    "error_message": entry.outcome.error_message,
                    "row_count": len(entry.outcome.rows) if entry.outcome.rows is not None else None,
                    "digest": entry.fingerprint.digest if entry.fingerprint else None,
                    "valid": entry.valid,
                }
            )
        return {
            "query_id": self.query_id,
            "language": self.language,
            "db_id": self.db_id,
            "question": self.question,
            "gold_sql": self.gold_sql,
            "gold_digest": self.gold_digest,
            "predicted_digest": self.predicted_digest,
            "verdict": {
                "final_sql": self.verdict.final_sql,
                "valid": self.verdict.valid,
                "executed_ok": self.verdict.executed_ok,
                "exec_match": self.verdict.exec_match,
                "decision": self.verdict.decision,
            },
            "vote": {
                "winner_index": self.vote.winner_index,
                "decision": self.vote.decision,
                "entries": entries,
            },
        }


def report_document(report: EvalReport, records) -> dict:
    return {
        "split": report.split,
        "model_name": report.model_name,
        "ablation_flags": dict(report.ablation_flags),
        "va_percent": report.va_percent,
        "ex_percent": report.ex_percent,
        "per_language": {
            language: {"va_percent": va, "ex_percent": ex}
            for language, va, ex in report.per_language
        },
        "queries": [r.to_dict() for r in sorted(records, key=lambda r: r.query_id)],
    }


def write_report_json(document: dict, path) -> None:
    text = json.dumps(document, ensure_ascii=False, sort_keys=True, indent=2) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def write_verdicts_csv(report: EvalReport, records, path) -> None:
    by_id = {r.query_id: r for r in records}
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(
        ["query_id", "language", "db_id", "decision", "valid", "executed_ok",
         "exec_match", "final_sql"]
    )
    for verdict in sorted(report.verdicts, key=lambda v: v.query_id):
        record = by_id.get(verdict.query_id)
        writer.writerow(
            [
                verdict.query_id,
                verdict.language,
                record.db_id if record else "",
                verdict.decision,
                int(verdict.valid),
                int(verdict.executed_ok),
                int(verdict.exec_match),
                verdict.final_sql,
            ]
        )
    Path(path).write_text(buffer.getvalue(), encoding="utf-8")


def variant_label(report: EvalReport) -> str:
    flags = dict(report.ablation_flags)
    labels = [
        label for flag, label in _FLAG_LABELS.items() if flags.get(flag)
    ]
    return " + ".join(labels) if labels else "default"


def format_summary_table(report: EvalReport) -> str:
    """Compact fixed-width table: one row per variant and language."""
    rows = [(variant_label(report), report.ex_percent, report.va_percent)]
    rows.extend(
        (f"  {language}", ex, va) for language, va, ex in report.per_language
    )
    width = max(28, max(len(name) for name, _, _ in rows) + 2)
    lines = [
        f"run summary (split={report.split}, model={report.model_name}, "
        f"queries={len(report.verdicts)})",
        f"{'variant'.ljust(width)}{'EX (%)':>8}{'VA (%)':>9}",
    ]
    for name, ex, va in rows:
        lines.append(f"{name.ljust(width)}{ex:8.2f}{va:9.2f}")
    return "\n".join(lines)


def render_summary_figure(report: EvalReport, path) -> None:
    """Bar chart of VA/EX (overall and per language) plus vote decisions."""
    groups = ["overall"] + [language for language, _, _ in report.per_language]
    va_values = [report.va_percent] + [va for _, va, _ in report.per_language]
    ex_values = [report.ex_percent] + [ex for _, _, ex in report.per_language]

    decisions: dict[str, int] = {}
    for verdict in report.verdicts:
        decisions[verdict.decision] = decisions.get(verdict.decision, 0) + 1

    fig, (ax_scores, ax_votes) = plt.subplots(1, 2, figsize=(9, 3.5))
    positions = range(len(groups))
    width = 0.38
    ax_scores.bar([p - width / 2 for p in positions], va_values, width, label="VA")
    ax_scores.bar([p + width / 2 for p in positions], ex_values, width, label="EX")
    ax_scores.set_xticks(list(positions))
    ax_scores.set_xticklabels(groups)
    ax_scores.set_ylim(0, 105)
    ax_scores.set_ylabel("percent")
    ax_scores.set_title(f"{variant_label(report)} on {report.split}")
    ax_scores.legend(loc="lower right")

    names = sorted(decisions)
    ax_votes.bar(range(len(names)), [decisions[n] for n in names], color="#777777")
    ax_votes.set_xticks(range(len(names)))
    ax_votes.set_xticklabels(names, rotation=20, ha="right")
    ax_votes.set_ylabel("queries")
    ax_votes.set_title("vote decisions")

    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_run_report(run_dir, report: EvalReport, records) -> dict:
    """Emit report.json, verdicts.csv, and summary.png into the run directory."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    document = report_document(report, records)
    write_report_json(document, run_dir / "report.json")
    write_verdicts_csv(report, records, run_dir / "verdicts.csv")
    render_summary_figure(report, run_dir / "summary.png")
    return document
