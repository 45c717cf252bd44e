"""The story engine: online assignment of articles to persistent stories.

Arriving articles are scored against every live story and pending cluster
on a weighted blend of semantic similarity, temporal proximity, and entity
overlap.  An article joins the best-scoring target above the join
threshold, otherwise it seeds a new pending cluster.  Pending clusters are
promoted to stories once they accumulate enough articles, enough distinct
sources, and sufficient embedding coherence; promotion retroactively
carries every earlier member into the story.  Stories are never deleted;
idle pending clusters expire.

All state transitions are deterministic functions of (arrival order,
config).  The single-writer contract applies: exactly one logical thread
applies arrivals, in total order.
"""

from __future__ import annotations

import math
from bisect import bisect_left
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .embed import balanced_centroid, cosine_against, mean_pairwise_cosine
from .errors import ConfigError
from .model import Article, DuplicateArticleError

KIND_STORY = 0
KIND_PENDING = 1


@dataclass(frozen=True, slots=True)
class MatchConfig:
    alpha: float = 0.60       # weight of semantic similarity
    beta: float = 0.25        # weight of temporal proximity
    gamma: float = 0.15       # weight of entity overlap
    tau: float = 86400.0      # temporal decay constant, seconds
    theta_join: float = 0.55  # join threshold on combined score
    min_articles: int = 5     # instantiation article count
    min_sources: int = 5      # instantiation distinct-source count
    min_coherence: float = 0.55   # minimum mean pairwise cosine
    pending_ttl: float = 259200.0  # idle seconds before a pending cluster expires

    def __post_init__(self):
        if abs(self.alpha + self.beta + self.gamma - 1.0) > 1e-9:
            raise ConfigError("match weights must sum to 1.0")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("match weights must be non-negative")
        if not 0.0 < self.theta_join < 1.0:
            raise ConfigError("match.theta_join must be in (0, 1)")
        if self.min_articles < 2:
            raise ConfigError("match.min_articles must be >= 2")
        if self.min_sources < 1:
            raise ConfigError("match.min_sources must be >= 1")
        if self.tau <= 0:
            raise ConfigError("match.tau must be positive")
        if self.pending_ttl < 0:
            raise ConfigError("match.pending_ttl must be non-negative")


@dataclass(slots=True)
class PendingCluster:
    cluster_id: int
    member_ids: list[int] = field(default_factory=list)
    member_keys: list[tuple[int, int]] = field(default_factory=list)
    source_set: set[str] = field(default_factory=set)
    entity_profile: Counter = field(default_factory=Counter)
    last_arrival: int = 0
    centroid: np.ndarray | None = None

    @property
    def last_time(self) -> int:
        return self.last_arrival

    @last_time.setter
    def last_time(self, value: int) -> None:
        self.last_arrival = value


@dataclass(slots=True)
class Story:
    story_id: int
    created_at: int
    instantiated_at: int
    member_ids: list[int] = field(default_factory=list)
    member_keys: list[tuple[int, int]] = field(default_factory=list)
    source_set: set[str] = field(default_factory=set)
    entity_profile: Counter = field(default_factory=Counter)
    last_updated: int = 0
    centroid: np.ndarray | None = None

    @property
    def last_time(self) -> int:
        return self.last_updated

    @last_time.setter
    def last_time(self, value: int) -> None:
        self.last_updated = value


class _VecStore:
    """Append-only float32 matrix of article embeddings."""

    def __init__(self, dim: int, capacity: int = 1024):
        self.dim = dim
        self._rows = 0
        self._data = np.zeros((capacity, dim), dtype=np.float32)

    def add(self, vec: np.ndarray) -> int:
        if self._rows == self._data.shape[0]:
            grown = np.zeros((self._data.shape[0] * 2, self.dim), dtype=np.float32)
            grown[: self._rows] = self._data
            self._data = grown
        self._data[self._rows] = vec
        self._rows += 1
        return self._rows - 1

    def get(self, row: int) -> np.ndarray:
        return self._data[row]

    def take(self, rows: list[int]) -> np.ndarray:
        return self._data[rows]


class _CandidateIndex:
    """Dense arrays of live targets for batched match scoring.

    Derived state only; rebuilt from EngineState after snapshot load.
    """

    def __init__(self, dim: int, capacity: int = 64):
        self.dim = dim
        self.used = 0
        self.dead = 0
        self.matrix = np.zeros((capacity, dim), dtype=np.float32)
        self.kinds = np.zeros(capacity, dtype=np.int8)
        self.ids = np.zeros(capacity, dtype=np.int64)
        self.last = np.zeros(capacity, dtype=np.int64)
        self.support = np.zeros(capacity, dtype=np.int64)
        self.alive = np.zeros(capacity, dtype=bool)
        self.slot_of: dict[tuple[int, int], int] = {}
        self.postings: dict[str, set[int]] = {}

    def _grow(self):
        cap = self.matrix.shape[0] * 2
        for name in ("kinds", "ids", "last", "support", "alive"):
            old = getattr(self, name)
            new = np.zeros(cap, dtype=old.dtype)
            new[: self.used] = old[: self.used]
            setattr(self, name, new)
        m = np.zeros((cap, self.dim), dtype=np.float32)
        m[: self.used] = self.matrix[: self.used]
        self.matrix = m

    def add(self, kind: int, target_id: int, centroid: np.ndarray, last: int, entities) -> None:
        if self.used == self.matrix.shape[0]:
            self._grow()
        slot = self.used
        self.used += 1
        self.matrix[slot] = centroid
        self.kinds[slot] = kind
        self.ids[slot] = target_id
        self.last[slot] = last
        self.alive[slot] = True
        self.slot_of[(kind, target_id)] = slot
        distinct = set(entities)
        self.support[slot] = len(distinct)
        for e in distinct:
            self.postings.setdefault(e, set()).add(slot)

    def update(self, kind: int, target_id: int, centroid: np.ndarray, last: int, new_entities) -> None:
        slot = self.slot_of[(kind, target_id)]
        self.matrix[slot] = centroid
        self.last[slot] = last
        for e in new_entities:
            bucket = self.postings.setdefault(e, set())
            if slot not in bucket:
                bucket.add(slot)
                self.support[slot] += 1

    def remove(self, kind: int, target_id: int, entities) -> None:
        slot = self.slot_of.pop((kind, target_id))
        self.alive[slot] = False
        self.dead += 1
        for e in set(entities):
            bucket = self.postings.get(e)
            if bucket is not None:
                bucket.discard(slot)
                if not bucket:
                    del self.postings[e]

    def rebuild(self, state: EngineState) -> None:
        self.__init__(self.dim, max(64, len(state.stories) + len(state.pending)))
        for story in state.stories.values():
            self.add(KIND_STORY, story.story_id, story.centroid, story.last_updated,
                     story.entity_profile.keys())
        for cluster in state.pending.values():
            self.add(KIND_PENDING, cluster.cluster_id, cluster.centroid,
                     cluster.last_arrival, cluster.entity_profile.keys())

    def overlaps_for(self, entities: tuple[str, ...]) -> np.ndarray:
        """Jaccard overlap of an entity set against every live target."""
        out = np.zeros(self.used, dtype=np.float64)
        if not entities:
            return out
        hits: dict[int, int] = {}
        for e in entities:
            for slot in self.postings.get(e, ()):
                hits[slot] = hits.get(slot, 0) + 1
        n = len(entities)
        for slot, h in hits.items():
            out[slot] = h / (n + self.support[slot] - h)
        return out


def combined_scores(cos: np.ndarray, deltas: np.ndarray, overlaps: np.ndarray,
                    cfg: MatchConfig) -> np.ndarray:
    """The match scoring formula, vectorized; the single shared kernel."""
    return cfg.alpha * cos + cfg.beta * np.exp(-deltas / cfg.tau) + cfg.gamma * overlaps


@dataclass(slots=True)
class EngineState:
    """All live editorial state: stories, pending clusters, member articles."""

    dim: int
    stories: dict[int, Story] = field(default_factory=dict)
    pending: dict[int, PendingCluster] = field(default_factory=dict)
    articles: dict[int, Article] = field(default_factory=dict)
    vec_rows: dict[int, int] = field(default_factory=dict)
    vecs: _VecStore = None  # type: ignore[assignment]
    index: _CandidateIndex = None  # type: ignore[assignment]
    next_article_id: int = 1
    next_claim_id: int = 1
    next_cluster_id: int = 1
    next_story_id: int = 1
    clock: int = 0
    seen_external_ids: set[str] = field(default_factory=set)

    def __post_init__(self):
        if self.vecs is None:
            self.vecs = _VecStore(self.dim)
        if self.index is None:
            self.index = _CandidateIndex(self.dim)

    def vec_of(self, article_id: int) -> np.ndarray:
        return self.vecs.get(self.vec_rows[article_id])

    def member_matrix(self, target) -> np.ndarray:
        return self.vecs.take([self.vec_rows[a] for a in target.member_ids])

    def member_sources(self, target) -> list[str]:
        return [self.articles[a].source_id for a in target.member_ids]


@dataclass(frozen=True, slots=True)
class AssignmentDecision:
    kind: str                 # "story", "pending", or "new"
    target_id: int
    score: float | None
    novelty: float | None = None
    instantiated_story_id: int | None = None
    instantiated_at: int | None = None
    coherence: float | None = None


@dataclass(frozen=True, slots=True)
class InstantiationVerdict:
    instantiate: bool
    coherence: float | None
    reason: str


def temporal_proximity(delta_t: float, tau: float) -> float:
    """exp(-delta_t / tau) for non-negative delta_t."""
    if tau <= 0:
        raise ConfigError("tau must be positive")
    return math.exp(-delta_t / tau)


def entity_overlap(a, profile) -> float:
    """Jaccard similarity between entity set ``a`` and a profile's support.

    Both empty yields 0.0: absence of evidence must not manufacture
    alignment.
    """
    sa = set(a)
    sb = set(profile.keys()) if isinstance(profile, Counter) else set(profile)
    if not sa and not sb:
        return 0.0
    union = len(sa | sb)
    if union == 0:
        return 0.0
    return len(sa & sb) / union


def match_score(vec: np.ndarray, entities: tuple[str, ...], target, now: int,
                cfg: MatchConfig) -> float:
    """Combined match score of one article against one story or cluster.

    Routed through the same vectorized kernel as batch assignment so that
    single and batched evaluation agree bit for bit.
    """
    cos = cosine_against(target.centroid[None, :], vec)
    deltas = np.array([abs(now - target.last_time)], dtype=np.float64)
    overlaps = np.array([entity_overlap(entities, target.entity_profile)], dtype=np.float64)
    return float(combined_scores(cos, deltas, overlaps, cfg)[0])


def _insert_member(target, article: Article) -> None:
    key = (article.published_at, article.id)
    pos = bisect_left(target.member_keys, key)
    target.member_keys.insert(pos, key)
    target.member_ids.insert(pos, article.id)


def update_centroid(state: EngineState, target, article: Article) -> None:
    """Fold an accepted article into a target's derived editorial memory.

    Recomputes the source-balanced centroid from scratch over the stored
    member embeddings: the mean of per-source mean embeddings, so a source
    contributing ten articles moves the centroid no more than a source
    contributing one.
    """
    target.source_set.add(article.source_id)
    target.entity_profile.update(article.entities)
    target.last_time = max(target.last_time, article.published_at)
    target.centroid = balanced_centroid(state.member_matrix(target), state.member_sources(target))


def check_instantiation(cluster: PendingCluster, state: EngineState,
                        cfg: MatchConfig) -> InstantiationVerdict:
    """Decide whether a pending cluster crosses the story threshold."""
    if len(cluster.member_ids) < cfg.min_articles:
        return InstantiationVerdict(False, None, "article_count")
    if len(cluster.source_set) < cfg.min_sources:
        return InstantiationVerdict(False, None, "source_count")
    coherence = mean_pairwise_cosine(state.member_matrix(cluster))
    if coherence < cfg.min_coherence:
        return InstantiationVerdict(False, coherence, "coherence")
    return InstantiationVerdict(True, coherence, "ok")


def instantiate_story(state: EngineState, cluster_id: int, story_id: int,
                      arrival_time: int) -> Story:
    """Promote a pending cluster to a story, carrying all members over."""
    cluster = state.pending.pop(cluster_id)
    story = Story(
        story_id=story_id,
        created_at=cluster.member_keys[0][0],
        instantiated_at=arrival_time,
        member_ids=cluster.member_ids,
        member_keys=cluster.member_keys,
        source_set=cluster.source_set,
        entity_profile=cluster.entity_profile,
        last_updated=cluster.last_arrival,
        centroid=cluster.centroid,
    )
    state.stories[story.story_id] = story
    state.next_story_id = max(state.next_story_id, story_id + 1)
    state.index.remove(KIND_PENDING, cluster_id, cluster.entity_profile.keys())
    state.index.add(KIND_STORY, story.story_id, story.centroid, story.last_updated,
                    story.entity_profile.keys())
    return story


def register_article(state: EngineState, article: Article, vec: np.ndarray) -> None:
    """Record an ingested article and its embedding in live state."""
    if article.id in state.articles:
        raise DuplicateArticleError(f"article id {article.id} already registered")
    state.articles[article.id] = article
    state.vec_rows[article.id] = state.vecs.add(vec)
    state.next_article_id = max(state.next_article_id, article.id + 1)
    for claim in article.claims:
        state.next_claim_id = max(state.next_claim_id, claim.claim_id + 1)
    state.seen_external_ids.add(article.external_id)
    state.clock = max(state.clock, article.published_at)


def create_pending(state: EngineState, cluster_id: int) -> PendingCluster:
    cluster = PendingCluster(cluster_id=cluster_id)
    state.pending[cluster_id] = cluster
    state.next_cluster_id = max(state.next_cluster_id, cluster_id + 1)
    return cluster


def add_to_pending(state: EngineState, cluster_id: int, article_id: int) -> PendingCluster:
    cluster = state.pending[cluster_id]
    article = state.articles[article_id]
    fresh = not cluster.member_ids
    if fresh:
        cluster.last_arrival = article.published_at
    _insert_member(cluster, article)
    update_centroid(state, cluster, article)
    if fresh:
        state.index.add(KIND_PENDING, cluster_id, cluster.centroid,
                        cluster.last_arrival, cluster.entity_profile.keys())
    else:
        state.index.update(KIND_PENDING, cluster_id, cluster.centroid,
                           cluster.last_arrival, article.entities)
    return cluster


def add_to_story(state: EngineState, story_id: int, article_id: int) -> Story:
    story = state.stories[story_id]
    article = state.articles[article_id]
    _insert_member(story, article)
    update_centroid(state, story, article)
    state.index.update(KIND_STORY, story_id, story.centroid, story.last_updated,
                       article.entities)
    return story


def novelty_score(vec: np.ndarray, story: Story, state: EngineState) -> float:
    """1 minus the best cosine against any existing member, clamped to [0, 1]."""
    best = float(cosine_against(state.member_matrix(story), vec).max())
    return max(0.0, min(1.0, 1.0 - best))


def best_candidate(state: EngineState, vec: np.ndarray, entities: tuple[str, ...],
                   now: int, cfg: MatchConfig) -> tuple[int, int, float] | None:
    """Best-scoring live target as (kind, target_id, score); None if no targets.

    Stories and pending clusters compete in a single candidate pool.  Ties
    on the best score break toward stories over pending clusters, then
    toward the lowest target id.
    """
    index = state.index
    if not index.slot_of:
        return None
    n = index.used
    cos = cosine_against(index.matrix[:n], vec)
    deltas = np.abs(now - index.last[:n]).astype(np.float64)
    overlaps = index.overlaps_for(entities)
    scores = combined_scores(cos, deltas, overlaps, cfg)
    scores[~index.alive[:n]] = -np.inf
    order = np.lexsort((index.ids[:n], index.kinds[:n], -scores))
    best_slot = int(order[0])
    if scores[best_slot] == -np.inf:
        return None
    return int(index.kinds[best_slot]), int(index.ids[best_slot]), float(scores[best_slot])


def assign_article(state: EngineState, article: Article, vec: np.ndarray,
                   cfg: MatchConfig) -> AssignmentDecision:
    """Assign one arriving article to the best target or a new cluster."""
    register_article(state, article, vec)
    best = best_candidate(state, vec, article.entities, article.published_at, cfg)

    if best is not None and best[2] >= cfg.theta_join:
        kind, target_id, score = best
        if kind == KIND_STORY:
            novelty = novelty_score(vec, state.stories[target_id], state)
            add_to_story(state, target_id, article.id)
            return AssignmentDecision("story", target_id, score, novelty=novelty)
        cluster = add_to_pending(state, target_id, article.id)
        verdict = check_instantiation(cluster, state, cfg)
        if verdict.instantiate:
            story = instantiate_story(state, target_id, state.next_story_id,
                                      article.published_at)
            return AssignmentDecision(
                "pending", target_id, score,
                instantiated_story_id=story.story_id,
                instantiated_at=story.instantiated_at,
                coherence=verdict.coherence,
            )
        return AssignmentDecision("pending", target_id, score)

    cluster_id = state.next_cluster_id
    create_pending(state, cluster_id)
    add_to_pending(state, cluster_id, article.id)
    return AssignmentDecision("new", cluster_id, None)


def remove_pending(state: EngineState, cluster_id: int) -> None:
    """Drop one pending cluster; its articles leave live state."""
    cluster = state.pending.pop(cluster_id)
    state.index.remove(KIND_PENDING, cluster_id, cluster.entity_profile.keys())
    for article_id in cluster.member_ids:
        del state.articles[article_id]
        del state.vec_rows[article_id]


def pending_to_expire(state: EngineState, now: int, cfg: MatchConfig) -> list[int]:
    """Ids of pending clusters idle longer than the TTL, ascending."""
    return sorted(
        cid for cid, c in state.pending.items()
        if now - c.last_arrival > cfg.pending_ttl
    )


def compact_index_if_needed(state: EngineState) -> None:
    if state.index.dead > max(64, len(state.index.slot_of)):
        state.index.rebuild(state)


def expire_pending(state: EngineState, now: int, cfg: MatchConfig) -> list[int]:
    """Drop pending clusters idle longer than the TTL; returns their ids.

    Their articles remain in the event log but leave live state.
    Instantiated stories never expire.
    """
    expired = pending_to_expire(state, now, cfg)
    for cid in expired:
        remove_pending(state, cid)
    compact_index_if_needed(state)
    return expired


def rank_stories(state: EngineState, now: int, cfg: MatchConfig) -> list[tuple[int, float]]:
    """Importance ranking: source count x log article volume x recency decay."""
    ranked = []
    for story in state.stories.values():
        score = (
            len(story.source_set)
            * math.log(1 + len(story.member_ids))
            * math.exp(-(now - story.last_updated) / cfg.tau)
        )
        ranked.append((story.story_id, score))
    ranked.sort(key=lambda pair: (-pair[1], pair[0]))
    return ranked
