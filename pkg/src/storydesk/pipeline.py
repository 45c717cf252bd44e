"""Deterministic orchestration: parse, validate, enrich, assign, investigate, persist.

Every state mutation goes through a decision event that is appended to the
log before it is applied, so the observable event log fully determines the
resulting state and the live path and the replay path execute the same
code.  Arrival order is file order; the engine clock is the maximum
published_at seen, and temporal reasoning always uses published_at, never
wall-clock time.  Pending-cluster expiry runs after each accepted arrival
with that arrival's published_at as "now".

Claim detectors run incrementally on each claim-bearing arrival, scoped to
the affected story; pending clusters emit no signals.  The narrative-shift
detector runs on every arrival that lands in a story.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from . import engine as eng
from . import memory as mem
from .config import PipelineConfig, make_embedder, parse_config_text, render_config
from .embed import EmbedError
from .errors import ConfigError
from .investigate import detect_claim_signals, detect_narrative_shift
from .model import (
    RawArticle,
    ValidationError,
    article_to_dict,
    parse_jsonl_record,
    validate_article,
)


@dataclass(frozen=True, slots=True)
class RunSummary:
    accepted: int
    rejected: int
    last_seq: int
    digest: str
    stories: int
    pending: int
    snapshot_path: Path


class Pipeline:
    """Single-writer processor bound to one state directory."""

    def __init__(self, cfg: PipelineConfig, state_dir: Path):
        self.cfg = cfg
        self.state_dir = Path(state_dir)
        self.embedder = make_embedder(cfg)
        self.desk = mem.DeskState.fresh(cfg.embed.dim)
        self.log = mem.EventLog(self.state_dir / mem.LOG_NAME)
        self._lock = mem.StateLock(self.state_dir)

    # -- lifecycle ---------------------------------------------------------

    def open(self) -> None:
        """Lock the state directory and load prior state from disk."""
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self._lock.acquire()
        try:
            self._pin_config()
            self.desk, last = mem.replay(self.state_dir, self.cfg.embed.dim, self.embedder)
            self.log.open_for_append()
            if self.log.last_seq != last:
                raise mem.CorruptLogError(
                    f"log scan ends at seq {self.log.last_seq} but replay applied {last}"
                )
        except BaseException:
            self._lock.release()
            raise

    def close(self) -> None:
        self.log.close()
        self._lock.release()

    def _pin_config(self) -> None:
        """First run pins the effective config; later runs must match it."""
        path = self.state_dir / mem.CONFIG_NAME
        rendered = render_config(self.cfg)
        if path.exists():
            existing = parse_config_text(path.read_text(encoding="utf-8"))
            if existing.to_dict() != self.cfg.to_dict():
                raise ConfigError(
                    "state directory was created with a different configuration; "
                    "replay determinism requires one config per state directory"
                )
        else:
            path.write_text(rendered, encoding="utf-8")

    # -- processing --------------------------------------------------------

    def _emit(self, kind: str, at: int, payload: dict, vec=None) -> mem.Event:
        """Write-ahead one event, then apply it to live state."""
        event = mem.Event(seq=self.log.last_seq + 1, kind=kind, at=at, payload=payload)
        self.log.append(event)
        mem.apply_event(self.desk, event, self.embedder, vec=vec)
        return event

    def _reject(self, reason: str, external_id: str | None, detail: str) -> list[mem.Event]:
        at = self.desk.engine.clock
        payload = {"reason": reason, "external_id": external_id, "detail": detail}
        return [self._emit("ArticleRejected", at, payload)]

    def process_one(self, raw: RawArticle) -> list[mem.Event]:
        """Run one arrival through validate, embed, assign, investigate.

        Returns the events produced; a rejected article yields exactly one
        ArticleRejected event and leaves state unchanged.
        """
        state = self.desk.engine
        try:
            article = validate_article(raw, state.next_article_id, state.next_claim_id)
        except ValidationError as exc:
            return self._reject(exc.reason, raw.external_id or None, str(exc))
        if article.external_id in state.seen_external_ids:
            return self._reject("duplicate_external_id", article.external_id,
                                f"external_id {article.external_id!r} already ingested")
        try:
            vec = self.embedder.embed_texts([article.embed_text])[0]
        except EmbedError as exc:
            return self._reject("embed_failed", article.external_id, str(exc))

        events = []
        at = max(state.clock, article.published_at)
        ingest_payload = article_to_dict(article)
        if self.cfg.stores_vectors:
            ingest_payload["vec"] = [float(x) for x in vec]
        events.append(self._emit("ArticleIngested", at, {"article": ingest_payload}, vec=vec))

        best = eng.best_candidate(state, vec, article.entities, article.published_at, self.cfg.match)
        story_id = None
        if best is not None and best[2] >= self.cfg.match.theta_join:
            kind, target_id, score = best
            if kind == eng.KIND_STORY:
                story_id = target_id
                novelty = eng.novelty_score(vec, state.stories[target_id], state)
                events.append(self._emit("AssignedToStory", at, {
                    "article_id": article.id, "story_id": target_id,
                    "score": score, "novelty": novelty,
                }))
                events.append(self._emit("StoryUpdated", at, {
                    "story_id": target_id, "article_id": article.id,
                }))
            else:
                events.append(self._emit("AssignedToPending", at, {
                    "article_id": article.id, "cluster_id": target_id, "score": score,
                }))
                verdict = eng.check_instantiation(state.pending[target_id], state, self.cfg.match)
                if verdict.instantiate:
                    story_id = state.next_story_id
                    events.append(self._emit("StoryInstantiated", at, {
                        "cluster_id": target_id, "story_id": story_id,
                        "instantiated_at": article.published_at,
                        "coherence": verdict.coherence,
                    }))
        else:
            cluster_id = state.next_cluster_id
            events.append(self._emit("PendingCreated", at, {"cluster_id": cluster_id}))
            events.append(self._emit("AssignedToPending", at, {
                "article_id": article.id, "cluster_id": cluster_id, "score": None,
            }))

        if story_id is not None:
            events.extend(self._investigate(story_id, at))

        for cluster_id in eng.pending_to_expire(state, article.published_at, self.cfg.match):
            events.append(self._emit("PendingExpired", at, {"cluster_id": cluster_id}))
        eng.compact_index_if_needed(state)
        return events

    def _investigate(self, story_id: int, at: int) -> list[mem.Event]:
        """Run detectors for one story and emit signal events for changes."""
        state = self.desk.engine
        story = state.stories[story_id]
        fresh = []
        claims = self.desk.claims_by_story.get(story_id, ())
        if claims:
            fresh.extend(detect_claim_signals(story_id, list(claims), self.cfg.investigate))
        members = [
            (published, article_id, state.articles[article_id].source_id)
            for published, article_id in story.member_keys
        ]
        shift = detect_narrative_shift(story_id, members, state.vec_of, state.clock,
                                       self.cfg.investigate)
        if shift is not None:
            fresh.append(shift)
        emitted, revised = self.desk.signals.diff(fresh)
        events = []
        for signal in emitted:
            events.append(self._emit("SignalEmitted", at, {"signal": signal.to_dict()}))
        for signal in revised:
            events.append(self._emit("SignalRevised", at, {"signal": signal.to_dict()}))
        return events

    def snapshot(self) -> mem.SnapshotInfo:
        state_dict = mem.state_to_dict(self.desk, include_vectors=self.cfg.stores_vectors)
        self.log.sync()
        return mem.write_snapshot(
            self.state_dir, state_dict, self.cfg.to_dict(), self.log.last_seq
        )


def iter_jsonl(path: Path):
    """Yield non-comment, non-blank lines of a JSONL file as bytes."""
    with open(path, "rb") as fh:
        for line in fh:
            stripped = line.strip()
            if not stripped or stripped.startswith(b"#"):
                continue
            yield stripped


def run_stream(input_path: Path, cfg: PipelineConfig, state_dir: Path) -> RunSummary:
    """Process a whole input file in order and write a final snapshot.

    Running the same file twice from scratch produces byte-identical logs
    and snapshot digests; a run split across a resume point matches an
    uninterrupted run.
    """
    pipeline = Pipeline(cfg, state_dir)
    pipeline.open()
    accepted = rejected = 0
    try:
        for line in iter_jsonl(input_path):
            try:
                raw = parse_jsonl_record(line)
            except ValidationError as exc:
                pipeline._reject(exc.reason, None, str(exc))
                rejected += 1
                pipeline.log.flush()
                continue
            events = pipeline.process_one(raw)
            if events and events[0].kind == "ArticleRejected":
                rejected += 1
            else:
                accepted += 1
            pipeline.log.flush()
        info = pipeline.snapshot()
    finally:
        pipeline.close()
    state = pipeline.desk.engine
    return RunSummary(
        accepted=accepted,
        rejected=rejected,
        last_seq=info.last_seq,
        digest=info.digest,
        stories=len(state.stories),
        pending=len(state.pending),
        snapshot_path=info.path,
    )
