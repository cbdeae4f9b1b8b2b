"""Feedback-guided prompt refinement: harvest failures, cluster them with a
human in the loop, distill corrective guidelines, merge them into the planner
prompt inputs.

Human input happens through a file round-trip: clusters are written to an
editable file, a person moves members and rewrites labels, and the loop
reloads and revalidates the partition before distilling.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import yaml

from .errors import ClusterValidationError, CollectionError, DistillationError, PromptAssemblyError
from .gateway import ChatRequest, LlmGateway
from .guidelines import CATEGORIES, Guideline
from .retrieval import LexicalEmbedder
from .templates import fill, load_template

FAILURE_KINDS = ("invalid", "wrong_result", "execution_error")

_GUIDELINE_BLOCK_RE = re.compile(r"^\[GUIDELINE\]\s*$", re.MULTILINE)


@dataclass(frozen=True)
class FailureCase:
    query_id: str
    question: str
    plan_text: str
    predicted_sql: str
    gold_sql: str
    predicted_result_digest: str
    gold_result_digest: str
    failure_kind: str

    def __post_init__(self):
        if self.failure_kind not in FAILURE_KINDS:
            raise ValueError(f"unknown failure kind {self.failure_kind!r}")

    @property
    def embedding_text(self) -> str:
        return f"{self.question} {self.gold_sql} {self.predicted_sql}"


@dataclass
class FailureCluster:
    cluster_id: str
    label: str
    member_ids: list[str]
    notes: str = ""


def classify_failure(verdict: dict) -> str:
    if not verdict["valid"]:
        return "invalid"
    if not verdict["executed_ok"]:
        return "execution_error"
    return "wrong_result"


def collect_failures(report_doc: dict, run_dir) -> list[FailureCase]:
    """One FailureCase per non-matching verdict in a held-out run.

    Plan text is recovered from the winning candidate's transcript entry;
    a missing transcript is an error naming the query, not a silent skip.
    """
    run_dir = Path(run_dir)
    if report_doc.get("split") != "heldout":
        raise CollectionError(
            f"failure harvesting expects a heldout-split report, got "
            f"{report_doc.get('split')!r}"
        )
    cases = []
    for record in report_doc["queries"]:
        verdict = record["verdict"]
        if verdict["exec_match"]:
            continue
        query_id = record["query_id"]
        transcript_path = run_dir / "transcripts" / f"{query_id}.json"
        if not transcript_path.is_file():
            raise CollectionError(f"query {query_id!r}: transcript file missing")
        entries = json.loads(transcript_path.read_text(encoding="utf-8"))
        winner_index = record["vote"]["winner_index"]
        plan_text = None
        for entry in entries:
            meta = entry.get("meta", {})
            if meta.get("stage") == "plan" and meta.get("plan_index") == winner_index:
                plan_text = entry["response_text"]
                break
        if plan_text is None:
            raise CollectionError(
                f"query {query_id!r}: no plan transcript for winning index {winner_index}"
            )
        cases.append(
            FailureCase(
                query_id=query_id,
                question=record["question"],
                plan_text=plan_text,
                predicted_sql=verdict["final_sql"],
                gold_sql=record["gold_sql"],
                predicted_result_digest=record.get("predicted_digest") or "",
                gold_result_digest=record["gold_digest"],
                failure_kind=classify_failure(verdict),
            )
        )
    return cases


def _pairwise_similarities(cases, embedder) -> list[list[float]]:
    space = embedder.build([case.embedding_text for case in cases])
    vectors = space.vectors
    n = len(vectors)
    sims = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            if i == j:
                sims[i][j] = 1.0
                continue
            a, b = vectors[i], vectors[j]
            small, large = (a, b) if len(a) <= len(b) else (b, a)
            sims[i][j] = sum(w * large[g] for g, w in small.items() if g in large)
    return sims


def cluster_failures(cases, embedder=None, max_clusters: int = 2) -> list[FailureCluster]:
    """Average-linkage agglomerative grouping until at most max_clusters remain.

    Deterministic: merge ties resolve toward the pair whose smallest member
    query id sorts first, and final cluster ids follow member order.
    """
    if not cases:
        raise ValueError("cluster_failures requires at least one case")
    if max_clusters < 1:
        raise ValueError("max_clusters must be >= 1")
    embedder = embedder or LexicalEmbedder()
    sims = _pairwise_similarities(cases, embedder)
    clusters: list[list[int]] = [[i] for i in range(len(cases))]

    def average_linkage(a: list[int], b: list[int]) -> float:
        total = sum(sims[i][j] for i in a for j in b)
        return total / (len(a) * len(b))

    while len(clusters) > max_clusters:
        best = None
        for x in range(len(clusters)):
            for y in range(x + 1, len(clusters)):
                score = average_linkage(clusters[x], clusters[y])
                tie_key = tuple(sorted(
                    min(cases[i].query_id for i in clusters[z]) for z in (x, y)
                ))
                candidate = (-score, tie_key, x, y)
                if best is None or candidate < best:
                    best = candidate
        _, _, x, y = best
        clusters[x] = sorted(clusters[x] + clusters[y])
        del clusters[y]

    clusters.sort(key=lambda members: min(cases[i].query_id for i in members))
    out = []
    for n, members in enumerate(clusters, start=1):
        kinds = sorted({cases[i].failure_kind for i in members})
        head = cases[min(members, key=lambda i: cases[i].query_id)].question
        out.append(
            FailureCluster(
                cluster_id=f"c{n}",
                label=f"{'/'.join(kinds)}: {head[:60]}",
                member_ids=sorted(cases[i].query_id for i in members),
            )
        )
    return out


def write_cluster_file(clusters, path) -> None:
    """Emit the human-editable review file (labels, notes, membership)."""
    payload = {
        "clusters": [
            {
                "cluster_id": c.cluster_id,
                "label": c.label,
                "notes": c.notes,
                "members": list(c.member_ids),
            }
            for c in clusters
        ]
    }
    Path(path).write_text(
        yaml.safe_dump(payload, allow_unicode=True, sort_keys=False), encoding="utf-8"
    )


def load_cluster_file(path, cases) -> list[FailureCluster]:
    """Reload a (possibly human-edited) cluster file and revalidate the partition."""
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict) or "clusters" not in raw:
        raise ClusterValidationError(f"{path}: expected a top-level 'clusters' list")
    clusters = []
    for item in raw["clusters"]:
        clusters.append(
            FailureCluster(
                cluster_id=str(item["cluster_id"]),
                label=str(item.get("label", "")),
                member_ids=[str(m) for m in item.get("members", [])],
                notes=str(item.get("notes", "") or ""),
            )
        )
    case_ids = {case.query_id for case in cases}
    seen: dict[str, str] = {}
    duplicated = []
    unknown = []
    for cluster in clusters:
        for member in cluster.member_ids:
            if member not in case_ids:
                unknown.append(member)
            elif member in seen:
                duplicated.append(member)
            else:
                seen[member] = cluster.cluster_id
    orphaned = sorted(case_ids - set(seen))
    if duplicated or unknown or orphaned:
        raise ClusterValidationError(
            f"{path}: cluster file does not partition the failure set "
            f"(orphaned={orphaned}, duplicated={sorted(set(duplicated))}, "
            f"unknown={sorted(set(unknown))})"
        )
    return clusters


def render_cases_section(cluster: FailureCluster, cases) -> str:
    by_id = {case.query_id: case for case in cases}
    parts = []
    for member in cluster.member_ids:
        case = by_id[member]
        parts.append(
            f"- id: {case.query_id}\n"
            f"  kind: {case.failure_kind}\n"
            f"  question: {case.question}\n"
            f"  plan: {case.plan_text.strip()}\n"
            f"  predicted: {case.predicted_sql}\n"
            f"  gold: {case.gold_sql}"
        )
    return "\n".join(parts)


def parse_guideline_blocks(text: str) -> list[dict]:
    blocks = []
    markers = list(_GUIDELINE_BLOCK_RE.finditer(text))
    for i, marker in enumerate(markers):
        end = markers[i + 1].start() if i + 1 < len(markers) else len(text)
        chunk = text[marker.end():end]
        fields = {"category": "other", "trigger": "", "body": ""}
        body_lines: list[str] = []
        in_body = False
        for line in chunk.splitlines():
            if in_body:
                body_lines.append(line)
                continue
            stripped = line.strip()
            if stripped.lower().startswith("category:"):
                fields["category"] = stripped.split(":", 1)[1].strip()
            elif stripped.lower().startswith("trigger:"):
                fields["trigger"] = stripped.split(":", 1)[1].strip()
            elif stripped.lower().startswith("body:"):
                remainder = stripped.split(":", 1)[1].strip()
                if remainder:
                    body_lines.append(remainder)
                in_body = True
        fields["body"] = "\n".join(body_lines).strip()
        if fields["body"]:
            blocks.append(fields)
    return blocks


def distill_guidelines(cluster: FailureCluster, cases, gateway: LlmGateway, *,
                       model_name: str, existing_ids=()) -> list[Guideline]:
    """Ask the model to turn one cluster into corrective guidelines.

    A completion with no parseable guideline block raises DistillationError;
    at that point a human writes the guideline by hand instead.
    """
    if not cluster.member_ids:
        raise ValueError("cannot distill an empty cluster")
    sections = load_template("distill_prompt.txt")
    request = ChatRequest(
        system_prompt=fill(sections["system"]),
        user_message=fill(
            sections["user"],
            label=cluster.label,
            notes=cluster.notes or "(none)",
            cases=render_cases_section(cluster, cases),
        ),
        temperature=0.0,
        model_name=model_name,
    )
    response = gateway.complete(request, meta={"stage": "distill", "cluster_id": cluster.cluster_id})
    blocks = parse_guideline_blocks(response.text)
    if not blocks:
        raise DistillationError(
            f"cluster {cluster.cluster_id!r}: completion contained no guideline block"
        )
    taken = set(existing_ids)
    guidelines = []
    for block in blocks:
        category = block["category"] if block["category"] in CATEGORIES else "other"
        seq = 1
        while f"{category}-{cluster.cluster_id}-{seq}" in taken:
            seq += 1
        guideline_id = f"{category}-{cluster.cluster_id}-{seq}"
        taken.add(guideline_id)
        guidelines.append(
            Guideline(
                id=guideline_id,
                category=category,
                trigger=block["trigger"],
                body=block["body"] + "\n",
                provenance="distilled",
                source_cluster=cluster.cluster_id,
            )
        )
    return guidelines


@dataclass(frozen=True)
class PromptInputs:
    """What merge produces; feeds planner.assemble_planner_prompt directly."""

    base_instructions: str
    guidelines: tuple[Guideline, ...]


def merge_into_prompt(library, base_template: str) -> PromptInputs:
    """Order guidelines by (category, id) and drop exact duplicate bodies.

    Merging is idempotent: merging the merged output changes nothing.
    """
    ids = [g.id for g in library]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise PromptAssemblyError(f"guideline library has duplicate ids: {dupes}")
    active = [g for g in library if not g.tombstone]
    by_id = sorted(active, key=lambda g: g.id)
    seen_bodies: set[str] = set()
    kept = []
    for guideline in by_id:
        if guideline.body in seen_bodies:
            continue
        seen_bodies.add(guideline.body)
        kept.append(guideline)
    ordered = tuple(sorted(kept, key=lambda g: (g.category, g.id)))
    return PromptInputs(base_instructions=base_template, guidelines=ordered)
