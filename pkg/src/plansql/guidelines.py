"""Guideline records and the file-backed guideline library.

A library is a directory of structured text files, one per guideline:
header fields (id, category, trigger, provenance, source_cluster), a ``---``
separator, then the body verbatim. Deleting a guideline requires an explicit
tombstone marker so library history stays auditable.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .errors import DatasetError

CATEGORIES = (
    "arithmetic_aggregation",
    "hypothetical_counterfactual",
    "temporal",
    "entity_linking",
    "other",
)
PROVENANCES = ("seed_appendix", "distilled", "human")


@dataclass(frozen=True)
class Guideline:
    id: str
    category: str
    trigger: str
    body: str
    provenance: str
    source_cluster: str | None = None
    tombstone: bool = False

    def __post_init__(self):
        if not self.id:
            raise ValueError("guideline id must be non-empty")
        if self.category not in CATEGORIES:
            raise ValueError(f"guideline {self.id!r}: unknown category {self.category!r}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"guideline {self.id!r}: unknown provenance {self.provenance!r}")
        if not self.body.strip():
            raise ValueError(f"guideline {self.id!r}: body must be non-empty")


def format_guideline(guideline: Guideline) -> str:
    lines = [
        f"id: {guideline.id}",
        f"category: {guideline.category}",
        f"trigger: {guideline.trigger}",
        f"provenance: {guideline.provenance}",
    ]
    if guideline.source_cluster:
        lines.append(f"source_cluster: {guideline.source_cluster}")
    if guideline.tombstone:
        lines.append("tombstone: true")
    lines.append("---")
    return "\n".join(lines) + "\n" + guideline.body.rstrip("\n") + "\n"


def parse_guideline(text: str, origin: str = "<string>") -> Guideline:
    if "\n---" not in text and not text.startswith("---"):
        raise DatasetError(f"guideline {origin}: missing '---' separator")
    header_text, _, body = text.partition("---")
    fields = {}
    for line in header_text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise DatasetError(f"guideline {origin}: bad header line {line!r}")
        fields[key.strip()] = value.strip()
    try:
        return Guideline(
            id=fields["id"],
            category=fields["category"],
            trigger=fields.get("trigger", ""),
            body=body.lstrip("\n").rstrip() + "\n",
            provenance=fields.get("provenance", "human"),
            source_cluster=fields.get("source_cluster") or None,
            tombstone=fields.get("tombstone", "").lower() == "true",
        )
    except KeyError as exc:
        raise DatasetError(f"guideline {origin}: missing header field {exc}") from exc
    except ValueError as exc:
        raise DatasetError(f"guideline {origin}: {exc}") from exc


def seed_library() -> list[Guideline]:
    """The guidelines shipped with the package (provenance seed_appendix)."""
    root = resources.files("plansql").joinpath("seed_guidelines")
    guidelines = []
    for entry in sorted(root.iterdir(), key=lambda e: e.name):
        if entry.name.endswith(".txt"):
            guidelines.append(parse_guideline(entry.read_text(encoding="utf-8"), entry.name))
    return guidelines


class GuidelineLibrary:
    """Directory-backed guideline store; iterations add or edit, never drop."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def load(self, include_tombstoned: bool = False) -> list[Guideline]:
        guidelines = []
        seen = set()
        for path in sorted(self.directory.glob("*.txt")):
            guideline = parse_guideline(path.read_text(encoding="utf-8"), str(path))
            if guideline.id in seen:
                raise DatasetError(f"guideline library: duplicate id {guideline.id!r}")
            seen.add(guideline.id)
            if guideline.tombstone and not include_tombstoned:
                continue
            guidelines.append(guideline)
        return sorted(guidelines, key=lambda g: g.id)

    def add(self, guideline: Guideline) -> Path:
        path = self.directory / f"{guideline.id}.txt"
        path.write_text(format_guideline(guideline), encoding="utf-8")
        return path

    def tombstone(self, guideline_id: str) -> None:
        path = self.directory / f"{guideline_id}.txt"
        if not path.is_file():
            raise DatasetError(f"cannot tombstone unknown guideline {guideline_id!r}")
        guideline = parse_guideline(path.read_text(encoding="utf-8"), str(path))
        self.add(
            Guideline(
                id=guideline.id,
                category=guideline.category,
                trigger=guideline.trigger,
                body=guideline.body,
                provenance=guideline.provenance,
                source_cluster=guideline.source_cluster,
                tombstone=True,
            )
        )

    def copy_from(self, guidelines) -> None:
        for guideline in guidelines:
            self.add(guideline)
