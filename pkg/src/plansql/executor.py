"""Sandboxed SQL execution with canonical result normalization.

Every execution runs on a fresh read-only connection, so candidate SQL can
never modify a database file. Results are normalized into tagged values whose
canonical serialization backs both voting and gold comparison.
"""

from __future__ import annotations

import hashlib
import json
import math
import sqlite3
import time
from dataclasses import dataclass
from pathlib import Path
from urllib.parse import quote

DEFAULT_TIMEOUT_MS = 30_000

# How many VM instructions between timeout checks.
_PROGRESS_INTERVAL = 200

# Value tags, in the order used for cross-type sorting.
TAG_NULL = "null"
TAG_INTEGER = "integer"
TAG_DECIMAL = "decimal"
TAG_TEXT = "text"
TAG_BLOB = "blob"

# A normalized value is (tag, rendered); rendering is locale-independent.
NormalizedValue = tuple


@dataclass(frozen=True)
class ExecutionOutcome:
    status: str  # ok | syntax_error | runtime_error | timeout
    rows: tuple | None = None
    error_message: str = ""
    elapsed_ms: int = 0

    def __post_init__(self):
        if (self.status == "ok") != (self.rows is not None):
            raise ValueError("rows must be present exactly when status is ok")


@dataclass(frozen=True)
class ResultFingerprint:
    digest: str


class Database:
    """Handle on a SQLite file; opens read-only connections on demand."""

    def __init__(self, path):
        self.path = Path(path)

    def connect(self) -> sqlite3.Connection:
        uri = f"file:{quote(str(self.path))}?mode=ro"
        conn = sqlite3.connect(uri, uri=True)
        conn.execute("PRAGMA query_only = ON")
        return conn

    def content_hash(self) -> str:
        return hashlib.sha256(self.path.read_bytes()).hexdigest()


def normalize_value(value) -> NormalizedValue:
    """Map an engine value onto the canonical tagged form.

    Floats render with 6 fractional digits and trimmed trailing zeros, so that
    0.5 and 0.5000000 (and any two floats closer than the rendering grain)
    collapse to the same value.
    """
    if value is None:
        return (TAG_NULL, "")
    if isinstance(value, bool):  # sqlite never returns bool, but be safe
        return (TAG_INTEGER, str(int(value)))
    if isinstance(value, int):
        return (TAG_INTEGER, str(value))
    if isinstance(value, float):
        return (TAG_DECIMAL, _render_decimal(value))
    if isinstance(value, bytes):
        return (TAG_BLOB, value.hex())
    return (TAG_TEXT, str(value))


def _render_decimal(value: float) -> str:
    if math.isnan(value):
        return "NaN"
    if math.isinf(value):
        return "Infinity" if value > 0 else "-Infinity"
    rendered = f"{value:.6f}".rstrip("0").rstrip(".")
    if rendered in ("", "-0", "-"):
        rendered = "0"
    return rendered


def normalize_rows(raw_rows) -> tuple:
    return tuple(tuple(normalize_value(v) for v in row) for row in raw_rows)


def prepare_error(sql: str, db: Database) -> str | None:
    """Compile a statement without running it; None means it prepared cleanly.

    Preparation covers syntax and name resolution, which is the engine-level
    notion of a syntactically valid statement.
    """
    if not sql or not sql.strip():
        return "empty statement"
    conn = db.connect()
    try:
        probe = sql if sql.lstrip().lower().startswith("explain") else f"EXPLAIN {sql}"
        conn.execute(probe)
        return None
    except (sqlite3.Error, sqlite3.Warning) as exc:
        return str(exc)
    finally:
        conn.close()


def check_validity(sql: str, db: Database) -> bool:
    """True iff the statement compiles against the database schema."""
    return prepare_error(sql, db) is None


def execute(sql: str, db: Database, timeout_ms: int = DEFAULT_TIMEOUT_MS) -> ExecutionOutcome:
    """Run one statement in the read-only sandbox and normalize its rows.

    Never raises for bad SQL: failures come back classified as syntax_error
    (did not prepare), runtime_error (prepared but failed, e.g. attempted
    writes), or timeout.
    """
    if timeout_ms < 1:
        raise ValueError("timeout_ms must be >= 1")
    start = time.monotonic()

    def elapsed_ms() -> int:
        return int((time.monotonic() - start) * 1000)

    message = prepare_error(sql, db)
    if message is not None:
        return ExecutionOutcome(
            status="syntax_error", error_message=message, elapsed_ms=elapsed_ms()
        )

    conn = db.connect()
    deadline = start + timeout_ms / 1000.0
    timed_out = []

    def on_progress():
        if time.monotonic() > deadline:
            timed_out.append(True)
            return 1
        return 0

    conn.set_progress_handler(on_progress, _PROGRESS_INTERVAL)
    try:
        cursor = conn.execute(sql)
        raw_rows = cursor.fetchall()
        return ExecutionOutcome(
            status="ok", rows=normalize_rows(raw_rows), elapsed_ms=elapsed_ms()
        )
    except (sqlite3.Error, sqlite3.Warning) as exc:
        status = "timeout" if timed_out else "runtime_error"
        return ExecutionOutcome(
            status=status, error_message=str(exc), elapsed_ms=elapsed_ms()
        )
    finally:
        conn.set_progress_handler(None, 0)
        conn.close()


def canonical_serialization(outcome: ExecutionOutcome, order_sensitive: bool) -> str:
    """Serialize an ok outcome so that byte equality defines result identity.

    Without order sensitivity, rows sort under the total lexicographic order
    of their (tag, rendered) values, turning the result into a multiset.
    """
    if outcome.status != "ok":
        raise ValueError("can only serialize an ok outcome")
    rows = outcome.rows
    if not order_sensitive:
        rows = tuple(sorted(rows))
    payload = [[list(value) for value in row] for row in rows]
    return json.dumps(payload, ensure_ascii=False, separators=(",", ":"))


def fingerprint(outcome: ExecutionOutcome, order_sensitive: bool) -> ResultFingerprint:
    """Digest of the canonical serialization; the unit of voting and matching."""
    serialized = canonical_serialization(outcome, order_sensitive)
    return ResultFingerprint(hashlib.sha256(serialized.encode("utf-8")).hexdigest())
