"""Run scoring: per-query verdicts, validity/accuracy percentages, breakdowns.

Validity means the statement prepared against the schema; execution accuracy
means the candidate's result fingerprint equals the gold fingerprint under
the order-sensitivity rule derived from the gold SQL. Both the prepare-based
and the execution-based validity notions are recoverable from the verdicts.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

from .dataset import DatabaseCatalog
from .errors import DatasetIntegrityError
from .executor import Database, ExecutionOutcome, check_validity, execute, fingerprint
from .sql_agent import SqlCandidate

_ORDER_BY_RE = re.compile(r"\border\s+by\b", re.IGNORECASE)


@dataclass(frozen=True)
class QueryVerdict:
    query_id: str
    final_sql: str
    valid: bool
    executed_ok: bool
    exec_match: bool
    decision: str
    language: str

    def __post_init__(self):
        if self.exec_match and not self.executed_ok:
            raise ValueError("exec_match requires executed_ok")


@dataclass(frozen=True)
class EvalReport:
    split: str
    model_name: str
    ablation_flags: tuple[tuple[str, object], ...]  # sorted (flag, value) pairs
    va_percent: float
    ex_percent: float
    per_language: tuple  # sorted (language, va, ex) triples
    verdicts: tuple[QueryVerdict, ...]


def strip_sql_literals(sql: str) -> str:
    """Blank out string literals, quoted identifiers, and comments."""
    out = []
    i = 0
    length = len(sql)
    while i < length:
        ch = sql[i]
        if ch in ("'", '"', "`"):
            quote = ch
            i += 1
            while i < length:
                if sql[i] == quote:
                    if quote == "'" and i + 1 < length and sql[i + 1] == "'":
                        i += 2  # escaped quote inside literal
                        continue
                    i += 1
                    break
                i += 1
            out.append(" ")
            continue
        if ch == "[":
            end = sql.find("]", i)
            i = length if end == -1 else end + 1
            out.append(" ")
            continue
        if ch == "-" and sql.startswith("--", i):
            end = sql.find("\n", i)
            i = length if end == -1 else end
            continue
        if ch == "/" and sql.startswith("/*", i):
            end = sql.find("*/", i)
            i = length if end == -1 else end + 2
            out.append(" ")
            continue
        out.append(ch)
        i += 1
    return "".join(out)


def has_top_level_order_by(sql: str) -> bool:
    """True iff ORDER BY appears at paren depth 0 outside literals/comments."""
    cleaned = strip_sql_literals(sql)
    depth = 0
    for match in re.finditer(r"[()]|\border\s+by\b", cleaned, re.IGNORECASE):
        token = match.group(0)
        if token == "(":
            depth += 1
        elif token == ")":
            depth = max(0, depth - 1)
        elif depth == 0:
            return True
    return False


class GoldRunner:
    """Executes gold SQL once per (db content, statement) and caches the outcome."""

    def __init__(self, catalog: DatabaseCatalog, timeout_ms: int = 30_000):
        self.catalog = catalog
        self.timeout_ms = timeout_ms
        self._cache: dict[tuple[str, str], tuple[ExecutionOutcome, bool, str]] = {}

    def result(self, db_id: str, gold_sql: str, query_id: str = "?") -> tuple[ExecutionOutcome, bool, str]:
        """Returns (outcome, order_sensitive, digest) for the gold statement."""
        key = (self.catalog.content_hash(db_id), gold_sql)
        if key not in self._cache:
            db = Database(self.catalog.db_path(db_id))
            outcome = execute(gold_sql, db, self.timeout_ms)
            if outcome.status != "ok":
                raise DatasetIntegrityError(
                    f"gold SQL for query {query_id!r} failed on {db_id!r}: "
                    f"{outcome.status}: {outcome.error_message}"
                )
            order_sensitive = has_top_level_order_by(gold_sql)
            digest = fingerprint(outcome, order_sensitive).digest
            self._cache[key] = (outcome, order_sensitive, digest)
        return self._cache[key]


def judge(final: SqlCandidate, gold_sql: str, db: Database, *, language: str,
          decision: str, gold_runner: GoldRunner | None = None, db_id: str | None = None,
          final_outcome: ExecutionOutcome | None = None,
          timeout_ms: int = 30_000) -> QueryVerdict:
    """Score one final candidate against its gold statement.

    The order-sensitivity of the comparison comes from the gold SQL: a
    top-level ORDER BY makes row order significant, otherwise results compare
    as multisets. ``final_outcome`` lets the caller reuse the execution from
    the voting stage instead of re-running the candidate.
    """
    if gold_runner is not None:
        if db_id is None:
            raise ValueError("db_id is required when using a gold runner")
        gold_outcome, order_sensitive, gold_digest = gold_runner.result(
            db_id, gold_sql, final.query_id
        )
    else:
        gold_outcome = execute(gold_sql, db, timeout_ms)
        if gold_outcome.status != "ok":
            raise DatasetIntegrityError(
                f"gold SQL for query {final.query_id!r} failed: "
                f"{gold_outcome.status}: {gold_outcome.error_message}"
            )
        order_sensitive = has_top_level_order_by(gold_sql)
        gold_digest = fingerprint(gold_outcome, order_sensitive).digest

    valid = check_validity(final.sql, db)
    outcome = final_outcome if final_outcome is not None else execute(final.sql, db, timeout_ms)
    executed_ok = outcome.status == "ok"
    exec_match = (
        executed_ok and fingerprint(outcome, order_sensitive).digest == gold_digest
    )
    return QueryVerdict(
        query_id=final.query_id,
        final_sql=final.sql,
        valid=valid,
        executed_ok=executed_ok,
        exec_match=exec_match,
        decision=decision,
        language=language,
    )


def percent(count: int, total: int) -> float:
    """Percentage rounded half-up to 2 decimals."""
    if total == 0:
        raise ValueError("total must be positive")
    value = Decimal(count) * 100 / Decimal(total)
    return float(value.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def aggregate(verdicts, meta: dict) -> EvalReport:
    """Fold verdicts into a report with overall and per-language VA/EX."""
    verdicts = tuple(verdicts)
    if not verdicts:
        raise ValueError("aggregate requires at least one verdict")
    va = percent(sum(v.valid for v in verdicts), len(verdicts))
    ex = percent(sum(v.exec_match for v in verdicts), len(verdicts))
    per_language = []
    for language in sorted({v.language for v in verdicts}):
        subset = [v for v in verdicts if v.language == language]
        per_language.append(
            (
                language,
                percent(sum(v.valid for v in subset), len(subset)),
                percent(sum(v.exec_match for v in subset), len(subset)),
            )
        )
    flags = meta.get("ablation_flags", {})
    return EvalReport(
        split=meta.get("split", "?"),
        model_name=meta.get("model_name", "?"),
        ablation_flags=tuple(sorted(flags.items())),
        va_percent=va,
        ex_percent=ex,
        per_language=tuple(per_language),
        verdicts=verdicts,
    )
