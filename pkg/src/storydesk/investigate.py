"""Cross-source claim analysis within a story.

Detectors compare how different sources assert the same claim over time
and report four pattern kinds: convergence (independent sources agree),
divergence (sources disagree on a value), delayed confirmation (agreement
arrives after a configured minimum delay), and narrative shift (embedding
drift between consecutive time windows of a story's members).

Detectors are pure functions of (claim history, config, now).  Claims are
always examined in the canonical order (asserted_at, claim_id), so
permuting same-timestamp arrivals never changes the emitted signal set.
Value comparison is exact on normalized strings; fuzzy alignment is out of
scope.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .embed import balanced_centroid, cosine
from .errors import ConfigError
from .model import Claim


class SignalKind(str, Enum):
    CONVERGENCE = "Convergence"
    DIVERGENCE = "Divergence"
    DELAYED_CONFIRMATION = "DelayedConfirmation"
    NARRATIVE_SHIFT = "NarrativeShift"


_KIND_RANK = {kind.value: rank for rank, kind in enumerate(SignalKind)}


@dataclass(frozen=True, slots=True)
class InvestigateConfig:
    confirm_delay_min: float = 21600.0  # seconds before agreement counts as delayed
    shift_window: float = 86400.0       # narrative-shift window width, seconds
    shift_threshold: float = 0.70       # emit a shift when window cosine drops below
    min_window_members: int = 3         # members required in each window

    def __post_init__(self):
        if self.confirm_delay_min < 0:
            raise ConfigError("investigate.confirm_delay_min must be >= 0")
        if not 0.0 < self.shift_threshold < 1.0:
            raise ConfigError("investigate.shift_threshold must be in (0, 1)")
        if self.shift_window <= 0:
            raise ConfigError("investigate.shift_window must be positive")
        if self.min_window_members < 1:
            raise ConfigError("investigate.min_window_members must be >= 1")


@dataclass(frozen=True, slots=True)
class ClaimKey:
    subject_sig: str    # sorted subject entities joined by "|"
    predicate_sig: str


@dataclass(frozen=True, slots=True)
class ClaimRecord:
    key: ClaimKey
    value: str
    source_id: str
    article_id: int
    claim_id: int
    asserted_at: int


@dataclass(frozen=True, slots=True)
class Signal:
    kind: SignalKind
    story_id: int
    key: ClaimKey | None
    detail: dict
    detected_at: int

    def identity(self) -> tuple:
        """Stable store key: one signal per (kind, story, key, value-set)."""
        if self.kind is SignalKind.NARRATIVE_SHIFT:
            return (self.kind.value, self.story_id)
        if self.kind is SignalKind.DIVERGENCE:
            return (self.kind.value, self.story_id, self.key.subject_sig, self.key.predicate_sig)
        return (self.kind.value, self.story_id, self.key.subject_sig,
                self.key.predicate_sig, self.detail["value"])

    def sort_key(self) -> tuple:
        key = self.key or ClaimKey("", "")
        return (self.detected_at, _KIND_RANK[self.kind.value],
                key.subject_sig, key.predicate_sig, self.detail.get("value", ""))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "story_id": self.story_id,
            "key": None if self.key is None else {
                "subject_sig": self.key.subject_sig,
                "predicate_sig": self.key.predicate_sig,
            },
            "detail": self.detail,
            "detected_at": self.detected_at,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Signal":
        key = obj["key"]
        return cls(
            kind=SignalKind(obj["kind"]),
            story_id=obj["story_id"],
            key=None if key is None else ClaimKey(key["subject_sig"], key["predicate_sig"]),
            detail=obj["detail"],
            detected_at=obj["detected_at"],
        )


def claim_key_of(claim: Claim) -> ClaimKey:
    """Canonical key: equal iff equal sorted subject sets and predicates."""
    return ClaimKey("|".join(claim.subject_entities), claim.predicate)


def claim_record_of(claim: Claim, source_id: str) -> ClaimRecord:
    return ClaimRecord(
        key=claim_key_of(claim),
        value=claim.value,
        source_id=source_id,
        article_id=claim.article_id,
        claim_id=claim.claim_id,
        asserted_at=claim.asserted_at,
    )


def _canonical(claims: list[ClaimRecord]) -> list[ClaimRecord]:
    return sorted(claims, key=lambda c: (c.asserted_at, c.claim_id))


def _source_listing(first_seen: dict[str, int]) -> list[dict]:
    return [
        {"source_id": s, "asserted_at": at}
        for s, at in sorted(first_seen.items(), key=lambda kv: (kv[1], kv[0]))
    ]


def detect_convergence(story_id: int, claims: list[ClaimRecord]) -> list[Signal]:
    """One signal per (key, value) asserted by two or more distinct sources."""
    groups: dict[tuple[ClaimKey, str], list[ClaimRecord]] = defaultdict(list)
    for record in _canonical(claims):
        groups[(record.key, record.value)].append(record)
    signals = []
    for (key, value), records in groups.items():
        first_seen: dict[str, int] = {}
        detected_at = None
        for record in records:
            if record.source_id not in first_seen:
                first_seen[record.source_id] = record.asserted_at
                if len(first_seen) == 2:
                    detected_at = record.asserted_at
        if detected_at is None:
            continue
        signals.append(Signal(
            kind=SignalKind.CONVERGENCE,
            story_id=story_id,
            key=key,
            detail={"value": value, "sources": _source_listing(first_seen)},
            detected_at=detected_at,
        ))
    return sorted(signals, key=Signal.sort_key)


def detect_divergence(story_id: int, claims: list[ClaimRecord]) -> list[Signal]:
    """One signal per key with conflicting values from distinct sources."""
    by_key: dict[ClaimKey, list[ClaimRecord]] = defaultdict(list)
    for record in _canonical(claims):
        by_key[record.key].append(record)
    signals = []
    for key, records in by_key.items():
        detected_at = None
        seen: list[ClaimRecord] = []
        for record in records:
            if detected_at is None and any(
                p.value != record.value and p.source_id != record.source_id for p in seen
            ):
                detected_at = record.asserted_at
            seen.append(record)
        if detected_at is None:
            continue
        values: dict[str, dict[str, int]] = defaultdict(dict)
        for record in records:
            if record.source_id not in values[record.value]:
                values[record.value][record.source_id] = record.asserted_at
        detail = {
            "values": [
                {"value": v, "sources": _source_listing(first_seen)}
                for v, first_seen in sorted(values.items())
            ]
        }
        signals.append(Signal(
            kind=SignalKind.DIVERGENCE,
            story_id=story_id,
            key=key,
            detail=detail,
            detected_at=detected_at,
        ))
    return sorted(signals, key=Signal.sort_key)


def detect_delayed_confirmation(story_id: int, claims: list[ClaimRecord],
                                cfg: InvestigateConfig) -> list[Signal]:
    """Agreement whose first cross-source echo arrives after the delay floor.

    The boundary is inclusive: a gap of exactly confirm_delay_min counts.
    """
    groups: dict[tuple[ClaimKey, str], list[ClaimRecord]] = defaultdict(list)
    for record in _canonical(claims):
        groups[(record.key, record.value)].append(record)
    signals = []
    for (key, value), records in groups.items():
        first = records[0]
        confirm = next((r for r in records if r.source_id != first.source_id), None)
        if confirm is None:
            continue
        gap = confirm.asserted_at - first.asserted_at
        if gap < cfg.confirm_delay_min:
            continue
        signals.append(Signal(
            kind=SignalKind.DELAYED_CONFIRMATION,
            story_id=story_id,
            key=key,
            detail={
                "value": value,
                "first": {"source_id": first.source_id, "asserted_at": first.asserted_at},
                "confirmation": {"source_id": confirm.source_id, "asserted_at": confirm.asserted_at},
                "gap": gap,
            },
            detected_at=confirm.asserted_at,
        ))
    return sorted(signals, key=Signal.sort_key)


def detect_narrative_shift(story_id: int, members: list[tuple[int, int, str]],
                           vec_lookup, now: int, cfg: InvestigateConfig) -> Signal | None:
    """Embedding drift between the two most recent windows of a story.

    ``members`` holds (published_at, article_id, source_id) tuples;
    ``vec_lookup`` maps an article id to its embedding.  Emits a signal when
    both windows hold at least min_window_members and the cosine between
    their source-balanced centroids falls below the threshold.
    """
    w = cfg.shift_window
    recent = [(p, a, s) for p, a, s in members if now - w < p <= now]
    earlier = [(p, a, s) for p, a, s in members if now - 2 * w < p <= now - w]
    if len(recent) < cfg.min_window_members or len(earlier) < cfg.min_window_members:
        return None
    c1 = balanced_centroid(np.stack([vec_lookup(a) for _, a, _ in earlier]),
                           [s for _, _, s in earlier])
    c2 = balanced_centroid(np.stack([vec_lookup(a) for _, a, _ in recent]),
                           [s for _, _, s in recent])
    drift = cosine(c1, c2)
    if drift >= cfg.shift_threshold:
        return None
    return Signal(
        kind=SignalKind.NARRATIVE_SHIFT,
        story_id=story_id,
        key=None,
        detail={
            "window_earlier": {"start": int(now - 2 * w), "end": int(now - w),
                               "member_ids": sorted(a for _, a, _ in earlier)},
            "window_recent": {"start": int(now - w), "end": int(now),
                              "member_ids": sorted(a for _, a, _ in recent)},
            "cosine": drift,
        },
        detected_at=now,
    )


def detect_claim_signals(story_id: int, claims: list[ClaimRecord],
                         cfg: InvestigateConfig) -> list[Signal]:
    """All claim-based signals for one story's history, canonically ordered."""
    signals = (
        detect_convergence(story_id, claims)
        + detect_divergence(story_id, claims)
        + detect_delayed_confirmation(story_id, claims, cfg)
    )
    return sorted(signals, key=Signal.sort_key)


class SignalStore:
    """Current signal per identity; emits once and revises as support grows."""

    def __init__(self):
        self.by_identity: dict[tuple, Signal] = {}

    def diff(self, fresh: list[Signal]) -> tuple[list[Signal], list[Signal]]:
        """Split detector output into (newly emitted, revised); no mutation."""
        emitted, revised = [], []
        for signal in fresh:
            previous = self.by_identity.get(signal.identity())
            if previous is None:
                emitted.append(signal)
            elif previous != signal:
                revised.append(signal)
        return emitted, revised

    def merge(self, fresh: list[Signal]) -> tuple[list[Signal], list[Signal]]:
        """Fold detector output in; returns (newly emitted, revised)."""
        emitted, revised = self.diff(fresh)
        for signal in emitted + revised:
            self.by_identity[signal.identity()] = signal
        return emitted, revised

    def apply(self, signal: Signal) -> None:
        """Set a signal directly (event replay path)."""
        self.by_identity[signal.identity()] = signal

    def listing(self, kind: SignalKind | None = None) -> list[Signal]:
        signals = [
            s for s in self.by_identity.values()
            if kind is None or s.kind is kind
        ]
        return sorted(signals, key=Signal.sort_key)

    def to_list(self) -> list[dict]:
        return [s.to_dict() for s in self.listing()]

    @classmethod
    def from_list(cls, items: list[dict]) -> "SignalStore":
        store = cls()
        for item in items:
            store.apply(Signal.from_dict(item))
        return store
