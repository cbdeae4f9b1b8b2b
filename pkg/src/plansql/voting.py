"""Majority voting over execution-result fingerprints.

Only candidates that executed cleanly vote; failed candidates fall back first
to the smallest-index candidate whose SQL at least prepared, then to the
first candidate outright. All tie-breaks favor the smallest plan_index so the
decision is reproducible across runs.
"""

from __future__ import annotations

from dataclasses import dataclass

from .executor import ExecutionOutcome, ResultFingerprint
from .sql_agent import SqlCandidate


@dataclass(frozen=True)
class VoteEntry:
    plan_index: int
    candidate: SqlCandidate
    outcome: ExecutionOutcome
    fingerprint: ResultFingerprint | None = None
    valid: bool = False  # prepare-success, precomputed by the caller

    def __post_init__(self):
        if (self.outcome.status == "ok") != (self.fingerprint is not None):
            raise ValueError("fingerprint must be present exactly for ok outcomes")


@dataclass(frozen=True)
class VoteRecord:
    query_id: str
    entries: tuple[VoteEntry, ...]
    winner_index: int  # plan_index of the winning entry
    decision: str  # majority | tie_broken | fallback_valid | fallback_first

    @property
    def winner(self) -> VoteEntry:
        for entry in self.entries:
            if entry.plan_index == self.winner_index:
                return entry
        raise ValueError(f"winner_index {self.winner_index} not among entries")


def vote(query_id: str, entries) -> VoteRecord:
    """Pick the winning candidate among one query's vote entries."""
    entries = tuple(entries)
    if not entries:
        raise ValueError("vote requires at least one entry")

    ok_entries = [e for e in entries if e.outcome.status == "ok"]
    if ok_entries:
        classes: dict[str, list[VoteEntry]] = {}
        for entry in ok_entries:
            classes.setdefault(entry.fingerprint.digest, []).append(entry)
        best_size = max(len(members) for members in classes.values())
        tied = [members for members in classes.values() if len(members) == best_size]
        winning_class = min(tied, key=lambda members: min(e.plan_index for e in members))
        winner = min(winning_class, key=lambda e: e.plan_index)
        decision = "tie_broken" if len(tied) > 1 else "majority"
        return VoteRecord(
            query_id=query_id, entries=entries,
            winner_index=winner.plan_index, decision=decision,
        )

    valid_entries = [e for e in entries if e.valid]
    if valid_entries:
        winner = min(valid_entries, key=lambda e: e.plan_index)
        return VoteRecord(
            query_id=query_id, entries=entries,
            winner_index=winner.plan_index, decision="fallback_valid",
        )

    winner = min(entries, key=lambda e: e.plan_index)
    return VoteRecord(
        query_id=query_id, entries=entries,
        winner_index=winner.plan_index, decision="fallback_first",
    )
