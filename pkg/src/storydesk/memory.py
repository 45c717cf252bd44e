"""Event-sourced persistence: append-only log, snapshots, deterministic replay.

State directory layout::

    events.jsonl            append-only decision log, one JSON object per line
    snapshots/NNNNNNNN.snap canonical snapshot at log position NNNNNNNN
    effective.cfg           flat key-value copy of the run configuration
    LOCK                    exclusive writer lock (pid inside)

All files are UTF-8 with LF line endings.  The log records decisions
(assignments, instantiations, expiries, signals), never derived state;
derived state is always recomputable, so replaying the log reproduces the
exact state that wrote it.  Snapshots are canonical serializations: map
keys sorted, floats rendered shortest round-trip, so equal states produce
byte-identical snapshots, digested with SHA-256.

A torn final line (no terminating newline, or unparseable) is treated as
an interrupted write and ignored by readers; a writer truncates it before
appending.  Any earlier damage is a hard CorruptLog error.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engine as eng
from .errors import StorydeskError
from .investigate import ClaimRecord, Signal, SignalStore, claim_record_of
from .model import article_from_dict, article_to_dict

FORMAT_VERSION = 1

EVENT_KINDS = (
    "ArticleIngested",
    "ArticleRejected",
    "AssignedToPending",
    "AssignedToStory",
    "PendingCreated",
    "StoryInstantiated",
    "StoryUpdated",
    "PendingExpired",
    "SignalEmitted",
    "SignalRevised",
)

LOG_NAME = "events.jsonl"
SNAP_DIR = "snapshots"
LOCK_NAME = "LOCK"
CONFIG_NAME = "effective.cfg"


class StorageError(StorydeskError):
    pass


class SequenceGapError(StorageError):
    pass


class CorruptLogError(StorageError):
    pass


class LockHeldError(StorageError):
    pass


def canonical_json_line(obj) -> bytes:
    """One canonical JSON line: sorted keys, compact, UTF-8, trailing LF."""
    return (
        json.dumps(obj, sort_keys=True, ensure_ascii=False,
                   separators=(",", ":"), allow_nan=False) + "\n"
    ).encode("utf-8")


@dataclass(frozen=True, slots=True)
class Event:
    seq: int
    kind: str
    at: int
    payload: dict

    def to_line(self) -> bytes:
        return canonical_json_line(
            {"at": self.at, "kind": self.kind, "payload": self.payload, "seq": self.seq}
        )

    @classmethod
    def from_obj(cls, obj: dict) -> "Event":
        return cls(seq=obj["seq"], kind=obj["kind"], at=obj["at"], payload=obj["payload"])


class EventLog:
    """Append-only JSON Lines log with gapless sequence numbers."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._handle = None
        self.last_seq = 0

    def open_for_append(self) -> None:
        """Scan the existing log, drop any torn tail, and position for appends."""
        valid_bytes = 0
        self.last_seq = 0
        if self.path.exists():
            for event, end in self._scan():
                self.last_seq = event.seq
                valid_bytes = end
            if self.path.stat().st_size != valid_bytes:
                with open(self.path, "r+b") as fh:
                    fh.truncate(valid_bytes)
        self._handle = open(self.path, "ab")

    def append(self, event: Event) -> None:
        if self._handle is None:
            raise StorageError("log not open for append")
        if event.seq != self.last_seq + 1:
            raise SequenceGapError(
                f"event seq {event.seq} after {self.last_seq}; log must be gapless"
            )
        try:
            self._handle.write(event.to_line())
        except OSError as exc:
            raise StorageError(f"log append failed: {exc}") from exc
        self.last_seq = event.seq

    def flush(self) -> None:
        if self._handle is not None:
            self._handle.flush()

    def sync(self) -> None:
        if self._handle is not None:
            self._handle.flush()
            os.fsync(self._handle.fileno())

    def close(self) -> None:
        if self._handle is not None:
            self.sync()
            self._handle.close()
            self._handle = None

    def _scan(self):
        """Yield (event, byte offset after its line) for every complete event."""
        offset = 0
        expected = 1
        with open(self.path, "rb") as fh:
            data = fh.read()
        while offset < len(data):
            newline = data.find(b"\n", offset)
            if newline < 0:
                return  # unterminated tail: torn write, ignore
            line = data[offset : newline]
            end = newline + 1
            try:
                obj = json.loads(line.decode("utf-8"))
                event = Event.from_obj(obj)
            except (ValueError, KeyError, UnicodeDecodeError) as exc:
                if data.find(b"\n", end) < 0 and end >= len(data):
                    return  # damaged final line: treat as torn
                raise CorruptLogError(f"unparseable event at byte {offset}: {exc}") from exc
            if event.seq != expected:
                raise CorruptLogError(f"sequence gap: expected {expected}, found {event.seq}")
            yield event, end
            offset = end
            expected += 1

    def iter_events(self):
        if not self.path.exists():
            return
        for event, _ in self._scan():
            yield event


class StateLock:
    """Exclusive writer lock for a state directory (pid file, stale-safe)."""

    def __init__(self, state_dir: Path):
        self.path = Path(state_dir) / LOCK_NAME
        self._held = False

    def acquire(self) -> None:
        for attempt in (0, 1):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                if attempt == 0 and self._is_stale():
                    self.path.unlink(missing_ok=True)
                    continue
                raise LockHeldError(f"state directory locked by {self.path.read_text().strip()!r}")
            with os.fdopen(fd, "w") as fh:
                fh.write(str(os.getpid()))
            self._held = True
            return

    def _is_stale(self) -> bool:
        try:
            pid = int(self.path.read_text().strip())
        except (OSError, ValueError):
            return False
        try:
            os.kill(pid, 0)
        except ProcessLookupError:
            return True
        except PermissionError:
            return False
        return False

    def release(self) -> None:
        if self._held:
            self.path.unlink(missing_ok=True)
            self._held = False

    def __enter__(self):
        self.acquire()
        return self

    def __exit__(self, *exc):
        self.release()


@dataclass
class DeskState:
    """Engine state plus the claim and signal stores, as one replayable unit."""

    engine: eng.EngineState
    signals: SignalStore = field(default_factory=SignalStore)
    claims_by_story: dict[int, list[ClaimRecord]] = field(default_factory=dict)

    @classmethod
    def fresh(cls, dim: int) -> "DeskState":
        return cls(engine=eng.EngineState(dim=dim))


def gather_claim_records(state: eng.EngineState, target) -> list[ClaimRecord]:
    """Claim records of a target's members, in canonical member order."""
    records = []
    for article_id in target.member_ids:
        article = state.articles[article_id]
        records.extend(claim_record_of(c, article.source_id) for c in article.claims)
    return records


def state_to_dict(desk: DeskState, include_vectors: bool = False) -> dict:
    """Canonical plain-dict form of the full state.

    Derived quantities (centroids, entity profiles, source sets, arrival
    clocks per target) are omitted: they are recomputed on load, which keeps
    the digest surface to inputs and decisions only.  Embedding vectors are
    stored only when they cannot be recomputed (external embedder mode).
    """
    state = desk.engine
    articles = []
    for article_id in sorted(state.articles):
        entry = article_to_dict(state.articles[article_id])
        if include_vectors:
            entry["vec"] = [float(x) for x in state.vec_of(article_id)]
        articles.append(entry)
    return {
        "articles": articles,
        "clock": state.clock,
        "next_ids": {
            "article": state.next_article_id,
            "claim": state.next_claim_id,
            "cluster": state.next_cluster_id,
            "story": state.next_story_id,
        },
        "pending": [
            {"cluster_id": cid, "member_ids": list(state.pending[cid].member_ids)}
            for cid in sorted(state.pending)
        ],
        "stories": [
            {
                "story_id": sid,
                "instantiated_at": state.stories[sid].instantiated_at,
                "member_ids": list(state.stories[sid].member_ids),
            }
            for sid in sorted(state.stories)
        ],
        "seen_external_ids": sorted(state.seen_external_ids),
        "signals": desk.signals.to_list(),
    }


def _rebuild_target(state: eng.EngineState, target, member_ids: list[int]) -> None:
    keyed = sorted((state.articles[a].published_at, a) for a in member_ids)
    target.member_keys = list(keyed)
    target.member_ids = [a for _, a in keyed]
    last = 0
    for _, article_id in keyed:
        article = state.articles[article_id]
        target.source_set.add(article.source_id)
        target.entity_profile.update(article.entities)
        last = max(last, article.published_at)
    target.last_time = last
    target.centroid = eng.balanced_centroid(
        state.member_matrix(target), state.member_sources(target)
    )


def state_from_dict(obj: dict, dim: int, embedder) -> DeskState:
    """Rebuild live state from its canonical dict form.

    ``embedder`` recomputes article vectors unless the dict carries them.
    """
    state = eng.EngineState(dim=dim)
    pending_vecs = []
    for entry in obj["articles"]:
        article = article_from_dict(entry)
        vec = entry.get("vec")
        if vec is not None:
            state.articles[article.id] = article
            state.vec_rows[article.id] = state.vecs.add(np.asarray(vec, dtype=np.float32))
        else:
            state.articles[article.id] = article
            pending_vecs.append(article)
    if pending_vecs:
        vectors = embedder.embed_texts([a.embed_text for a in pending_vecs])
        for article, vec in zip(pending_vecs, vectors):
            state.vec_rows[article.id] = state.vecs.add(vec)

    for item in obj["pending"]:
        cluster = eng.create_pending(state, item["cluster_id"])
        _rebuild_target(state, cluster, item["member_ids"])
        state.index.add(eng.KIND_PENDING, cluster.cluster_id, cluster.centroid,
                        cluster.last_arrival, cluster.entity_profile.keys())
    for item in obj["stories"]:
        story = eng.Story(story_id=item["story_id"], created_at=0,
                          instantiated_at=item["instantiated_at"])
        _rebuild_target(state, story, item["member_ids"])
        story.created_at = story.member_keys[0][0]
        state.stories[story.story_id] = story
        state.index.add(eng.KIND_STORY, story.story_id, story.centroid,
                        story.last_updated, story.entity_profile.keys())

    ids = obj["next_ids"]
    state.next_article_id = ids["article"]
    state.next_claim_id = ids["claim"]
    state.next_cluster_id = ids["cluster"]
    state.next_story_id = ids["story"]
    state.clock = obj["clock"]
    state.seen_external_ids = set(obj["seen_external_ids"])

    desk = DeskState(engine=state, signals=SignalStore.from_list(obj["signals"]))
    for story_id, story in state.stories.items():
        desk.claims_by_story[story_id] = gather_claim_records(state, story)
    return desk


def state_digest(state_dict: dict) -> tuple[bytes, str]:
    """Canonical state bytes and their SHA-256 hex digest."""
    data = canonical_json_line(state_dict)
    return data, hashlib.sha256(data).hexdigest()


@dataclass(frozen=True, slots=True)
class SnapshotInfo:
    path: Path
    last_seq: int
    digest: str


def snapshot_dir(state_dir: Path) -> Path:
    return Path(state_dir) / SNAP_DIR


def write_snapshot(state_dir: Path, state_dict: dict, config_dict: dict,
                   last_seq: int) -> SnapshotInfo:
    """Write a canonical snapshot file for an acknowledged log position."""
    _, digest = state_digest(state_dict)
    doc = {
        "config": config_dict,
        "digest": digest,
        "format_version": FORMAT_VERSION,
        "last_seq": last_seq,
        "state": state_dict,
    }
    directory = snapshot_dir(state_dir)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{last_seq:08d}.snap"
    tmp = path.with_suffix(".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(canonical_json_line(doc))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"snapshot write failed: {exc}") from exc
    return SnapshotInfo(path=path, last_seq=last_seq, digest=digest)


def load_snapshot(path: Path) -> dict:
    """Parse and digest-verify one snapshot file."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CorruptLogError(f"snapshot unreadable: {exc}") from exc
    if not isinstance(doc, dict) or "state" not in doc or "digest" not in doc:
        raise CorruptLogError(f"snapshot {path} missing required fields")
    if doc.get("format_version") != FORMAT_VERSION:
        raise CorruptLogError(
            f"snapshot {path} has format_version {doc.get('format_version')},"
            f" expected {FORMAT_VERSION}"
        )
    _, digest = state_digest(doc["state"])
    if digest != doc["digest"]:
        raise CorruptLogError(f"snapshot {path} digest mismatch")
    return doc


def latest_snapshot(state_dir: Path) -> dict | None:
    directory = snapshot_dir(state_dir)
    if not directory.is_dir():
        return None
    candidates = sorted(directory.glob("*.snap"))
    if not candidates:
        return None
    return load_snapshot(candidates[-1])


def apply_event(desk: DeskState, event: Event, embedder, vec: np.ndarray | None = None) -> None:
    """Apply one decision event to live state.

    The same function drives both live processing and replay; the live path
    passes the already-computed embedding as ``vec``.
    """
    state = desk.engine
    kind = event.kind
    payload = event.payload
    if kind == "ArticleIngested":
        article = article_from_dict(payload["article"])
        if vec is not None:
            arr = vec
        elif payload["article"].get("vec") is not None:
            arr = np.asarray(payload["article"]["vec"], dtype=np.float32)
        else:
            arr = embedder.embed_texts([article.embed_text])[0]
        eng.register_article(state, article, arr)
    elif kind == "ArticleRejected":
        pass
    elif kind == "PendingCreated":
        eng.create_pending(state, payload["cluster_id"])
    elif kind == "AssignedToPending":
        eng.add_to_pending(state, payload["cluster_id"], payload["article_id"])
    elif kind == "AssignedToStory":
        story_id = payload["story_id"]
        eng.add_to_story(state, story_id, payload["article_id"])
        article = state.articles[payload["article_id"]]
        if article.claims:
            desk.claims_by_story.setdefault(story_id, []).extend(
                claim_record_of(c, article.source_id) for c in article.claims
            )
    elif kind == "StoryUpdated":
        pass
    elif kind == "StoryInstantiated":
        story = eng.instantiate_story(
            state, payload["cluster_id"], payload["story_id"], payload["instantiated_at"]
        )
        desk.claims_by_story[story.story_id] = gather_claim_records(state, story)
    elif kind == "PendingExpired":
        eng.remove_pending(state, payload["cluster_id"])
    elif kind in ("SignalEmitted", "SignalRevised"):
        desk.signals.apply(Signal.from_dict(payload["signal"]))
    else:
        raise CorruptLogError(f"unknown event kind {kind!r} at seq {event.seq}")


def replay(state_dir: Path, dim: int, embedder, use_snapshot: bool = True) -> tuple[DeskState, int]:
    """Rebuild state from the log, optionally fast-forwarding from a snapshot.

    Returns (state, last applied seq).  Never consults wall-clock time or
    external services: vectors come from the log or the deterministic
    embedder.
    """
    state_dir = Path(state_dir)
    log = EventLog(state_dir / LOG_NAME)
    desk = DeskState.fresh(dim)
    start_seq = 0
    if use_snapshot:
        doc = latest_snapshot(state_dir)
        if doc is not None:
            desk = state_from_dict(doc["state"], dim, embedder)
            start_seq = doc["last_seq"]
    last = start_seq
    for event in log.iter_events():
        if event.seq <= start_seq:
            continue
        if event.seq != last + 1:
            raise CorruptLogError(f"log resumes at {event.seq}, snapshot covers {start_seq}")
        apply_event(desk, event, embedder)
        last = event.seq
    return desk, last
