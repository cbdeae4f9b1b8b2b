"""Dataset ingestion: question splits, database catalogs, schema introspection.

Splits are line-delimited UTF-8 records with keys {id, question, lang, db_id,
sql}; databases are single-file SQLite databases laid out as
``<databases_dir>/<db_id>/<db_id>.sqlite``.
"""

from __future__ import annotations

import hashlib
import json
import sqlite3
from dataclasses import dataclass, field
from pathlib import Path
from urllib.parse import quote

from .errors import DatasetError

LANGUAGES = ("en", "zh")
SPLIT_NAMES = ("train", "dev", "heldout", "test")

# Per-column cap on sampled values; keeps rendered schema blocks small.
SAMPLE_VALUE_CAP = 3


@dataclass(frozen=True)
class NlQuery:
    """One benchmark question."""

    id: str
    text: str
    language: str
    db_id: str
    gold_sql: str | None = None

    def __post_init__(self):
        if not self.id:
            raise DatasetError("query id must be non-empty")
        if not self.text:
            raise DatasetError(f"query {self.id!r}: text must be non-empty")
        if self.language not in LANGUAGES:
            raise DatasetError(
                f"query {self.id!r}: unknown language {self.language!r} "
                f"(expected one of {LANGUAGES})"
            )
        if not self.db_id:
            raise DatasetError(f"query {self.id!r}: db_id must be non-empty")


@dataclass(frozen=True)
class ColumnDef:
    name: str
    declared_type: str
    sample_values: tuple = ()


@dataclass(frozen=True)
class TableDef:
    name: str
    columns: tuple[ColumnDef, ...]
    primary_key: tuple[str, ...] = ()
    # (local column, foreign table, foreign column)
    foreign_keys: tuple[tuple[str, str, str], ...] = ()

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise DatasetError(f"table {self.name!r}: duplicate column names")
        missing = set(self.primary_key) - set(names)
        if missing:
            raise DatasetError(
                f"table {self.name!r}: primary key references unknown columns {sorted(missing)}"
            )


@dataclass(frozen=True)
class DatabaseSchema:
    db_id: str
    tables: tuple[TableDef, ...]

    def __post_init__(self):
        names = [t.name for t in self.tables]
        if len(set(names)) != len(names):
            raise DatasetError(f"db {self.db_id!r}: duplicate table names")
        by_name = {t.name: t for t in self.tables}
        for table in self.tables:
            for local, ftable, fcol in table.foreign_keys:
                target = by_name.get(ftable)
                if target is None or fcol not in {c.name for c in target.columns}:
                    raise DatasetError(
                        f"db {self.db_id!r}: foreign key {table.name}.{local} -> "
                        f"{ftable}.{fcol} references a missing table/column"
                    )

    def table(self, name: str) -> TableDef:
        for t in self.tables:
            if t.name == name:
                return t
        raise KeyError(name)


@dataclass(frozen=True)
class Split:
    name: str
    queries: tuple[NlQuery, ...]

    def __post_init__(self):
        if self.name not in SPLIT_NAMES:
            raise DatasetError(f"unknown split name {self.name!r}")


def load_split(path, split_name: str, known_db_ids=None) -> Split:
    """Load a line-delimited split file.

    Args:
        path: split file, one JSON record per line with keys
            {id, question, lang, db_id, sql?}.
        split_name: one of train/dev/heldout/test.
        known_db_ids: optional collection of valid database ids; when given,
            every record's db_id must resolve into it.

    Raises:
        DatasetError: malformed record (with its line number), duplicate id,
            or unknown db_id.
    """
    path = Path(path)
    queries: list[NlQuery] = []
    seen: set[str] = set()
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed record: {exc}") from exc
            if not isinstance(record, dict):
                raise DatasetError(f"{path}:{lineno}: record is not an object")
            try:
                query = NlQuery(
                    id=str(record["id"]),
                    text=record["question"],
                    language=record["lang"],
                    db_id=record["db_id"],
                    gold_sql=record.get("sql"),
                )
            except KeyError as exc:
                raise DatasetError(f"{path}:{lineno}: missing field {exc}") from exc
            except DatasetError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from exc
            if query.id in seen:
                raise DatasetError(f"{path}:{lineno}: duplicate id {query.id!r}")
            if known_db_ids is not None and query.db_id not in known_db_ids:
                raise DatasetError(
                    f"{path}:{lineno}: query {query.id!r} references unknown db {query.db_id!r}"
                )
            seen.add(query.id)
            queries.append(query)
    return Split(name=split_name, queries=tuple(queries))


def save_split(split: Split, path) -> None:
    """Write a split back in the same line-delimited format (round-trips load_split)."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        for q in split.queries:
            record = {"id": q.id, "question": q.text, "lang": q.language, "db_id": q.db_id}
            if q.gold_sql is not None:
                record["sql"] = q.gold_sql
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")


def _read_only_connect(db_path: Path) -> sqlite3.Connection:
    uri = f"file:{quote(str(db_path))}?mode=ro"
    conn = sqlite3.connect(uri, uri=True)
    conn.execute("PRAGMA query_only = ON")
    return conn


def introspect_schema(db_path) -> DatabaseSchema:
    """Build a DatabaseSchema from a SQLite file.

    Tables come back in creation order; sample_values hold the first
    SAMPLE_VALUE_CAP distinct non-null values in storage order, which makes
    introspection deterministic for a fixed file.
    """
    db_path = Path(db_path)
    db_id = db_path.stem
    try:
        conn = _read_only_connect(db_path)
    except sqlite3.Error as exc:
        raise DatasetError(f"cannot open database {db_path}: {exc}") from exc
    try:
        try:
            rows = conn.execute(
                "SELECT name FROM sqlite_master WHERE type = 'table' "
                "AND name NOT LIKE 'sqlite_%'"
            ).fetchall()
        except sqlite3.Error as exc:
            raise DatasetError(f"cannot read schema of {db_path}: {exc}") from exc
        table_names = [r[0] for r in rows]
        if not table_names:
            raise DatasetError(f"database {db_path} contains no user tables")
        tables = []
        for name in table_names:
            info = conn.execute(f'PRAGMA table_info("{name}")').fetchall()
            # table_info rows: (cid, name, type, notnull, dflt_value, pk)
            columns = tuple(
                ColumnDef(
                    name=col[1],
                    declared_type=col[2] or "",
                    sample_values=_sample_values(conn, name, col[1]),
                )
                for col in info
            )
            pk = tuple(col[1] for col in sorted(info, key=lambda c: c[5]) if col[5] > 0)
            fks = []
            fk_rows = conn.execute(f'PRAGMA foreign_key_list("{name}")').fetchall()
            for fk in fk_rows:
                # rows: (id, seq, table, from, to, on_update, on_delete, match)
                local, ftable, fcol = fk[3], fk[2], fk[4]
                if fcol is None:
                    # FK declared against the foreign table's implicit primary key
                    target = conn.execute(f'PRAGMA table_info("{ftable}")').fetchall()
                    pk_cols = [c[1] for c in sorted(target, key=lambda c: c[5]) if c[5] > 0]
                    fcol = pk_cols[0] if pk_cols else local
                fks.append((local, ftable, fcol))
            tables.append(
                TableDef(name=name, columns=columns, primary_key=pk, foreign_keys=tuple(fks))
            )
        return DatabaseSchema(db_id=db_id, tables=tuple(tables))
    finally:
        conn.close()


def _sample_values(conn: sqlite3.Connection, table: str, column: str) -> tuple:
    seen: list = []
    cursor = conn.execute(f'SELECT "{column}" FROM "{table}"')
    for (value,) in cursor:
        if value is None or value in seen:
            continue
        seen.append(value)
        if len(seen) >= SAMPLE_VALUE_CAP:
            break
    return tuple(seen)


@dataclass
class DatabaseCatalog:
    """Resolves db_id -> file path and caches schemas and content hashes."""

    databases_dir: Path
    _schemas: dict = field(default_factory=dict, repr=False)
    _hashes: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.databases_dir = Path(self.databases_dir)
        if not self.databases_dir.is_dir():
            raise DatasetError(f"databases directory not found: {self.databases_dir}")

    def db_path(self, db_id: str) -> Path:
        path = self.databases_dir / db_id / f"{db_id}.sqlite"
        if not path.is_file():
            raise DatasetError(f"no database file for {db_id!r} at {path}")
        return path

    def db_ids(self) -> list[str]:
        ids = []
        for child in sorted(self.databases_dir.iterdir()):
            if child.is_dir() and (child / f"{child.name}.sqlite").is_file():
                ids.append(child.name)
        return ids

    def schema(self, db_id: str) -> DatabaseSchema:
        if db_id not in self._schemas:
            self._schemas[db_id] = introspect_schema(self.db_path(db_id))
        return self._schemas[db_id]

    def content_hash(self, db_id: str) -> str:
        if db_id not in self._hashes:
            digest = hashlib.sha256(self.db_path(db_id).read_bytes()).hexdigest()
            self._hashes[db_id] = digest
        return self._hashes[db_id]
