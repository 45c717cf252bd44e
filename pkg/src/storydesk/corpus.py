"""Synthetic ground-truth corpora and clustering-quality metrics.

The generator emits ingest-format JSON Lines plus a total truth labeling.
Each truth story draws its text from a private token vocabulary mixed with
shared filler words, so the character n-gram embedder separates stories
lexically without any learned model.  Arrival times follow a sparse-then-
burst profile; sources rotate through a per-story schedule that repeats
across days.  Everything is a deterministic function of the spec and seed.
"""

from __future__ import annotations

import json
import math
import random
from collections import Counter, defaultdict
from dataclasses import dataclass
from datetime import datetime, timezone

from .errors import StorydeskError

NOISE_LABEL = "NOISE"


class InvalidSpecError(StorydeskError):
    pass


class UniverseMismatchError(StorydeskError):
    pass


_FILLER = (
    "the", "of", "after", "report", "officials", "said", "on", "over",
    "amid", "during", "new", "latest", "as", "from", "with", "update",
)

_CONSONANTS = "bcdfghjklmnpqrstvwz"
_VOWELS = "aeiou"


@dataclass(frozen=True)
class CorpusSpec:
    n_stories: int
    articles_per_story: int | tuple[int, int] = 10
    n_sources: int = 10
    noise_fraction: float = 0.0
    vocab_per_story: int = 12
    time_span: int = 14 * 86400
    burstiness: float = 1.0
    seed: int = 0
    claim_pairs_agree: int = 1
    claim_pairs_disagree: int = 1

    def __post_init__(self):
        if self.n_stories < 1:
            raise InvalidSpecError("n_stories must be >= 1")
        if self.n_sources < 1:
            raise InvalidSpecError("n_sources must be >= 1")
        if not 0.0 <= self.noise_fraction <= 1.0:
            raise InvalidSpecError("noise_fraction must be in [0, 1]")
        if self.vocab_per_story < 8:
            raise InvalidSpecError("vocab_per_story must be >= 8")
        if self.time_span <= 0:
            raise InvalidSpecError("time_span must be positive")
        if self.burstiness < 0:
            raise InvalidSpecError("burstiness must be >= 0")
        lo, hi = self.article_range
        if lo < 1 or hi < lo:
            raise InvalidSpecError("articles_per_story must be >= 1 (or a valid range)")

    @property
    def article_range(self) -> tuple[int, int]:
        if isinstance(self.articles_per_story, int):
            return self.articles_per_story, self.articles_per_story
        lo, hi = self.articles_per_story
        return int(lo), int(hi)

    @classmethod
    def from_dict(cls, obj: dict) -> "CorpusSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise InvalidSpecError(f"unknown corpus spec keys: {sorted(unknown)}")
        if "articles_per_story" in obj and isinstance(obj["articles_per_story"], list):
            obj = dict(obj, articles_per_story=tuple(obj["articles_per_story"]))
        try:
            return cls(**obj)
        except TypeError as exc:
            raise InvalidSpecError(str(exc)) from exc


def _fresh_word(rng: random.Random, taken: set[str]) -> str:
    while True:
        n = rng.randint(2, 4)
        word = "".join(rng.choice(_CONSONANTS) + rng.choice(_VOWELS) for _ in range(n))
        if word not in taken and word not in _FILLER:
            taken.add(word)
            return word


def _text(rng: random.Random, vocab: list[str], n_tokens: int, topic_frac: float) -> str:
    tokens = [
        rng.choice(vocab) if rng.random() < topic_frac else rng.choice(_FILLER)
        for _ in range(n_tokens)
    ]
    return " ".join(tokens)


def _record(external_id, source_id, title, body, published_at, fetched_lag,
            entities, claims) -> dict:
    rec = {
        "external_id": external_id,
        "source_id": source_id,
        "title": title,
        "body": body,
        "published_at": published_at,
        "fetched_at": published_at + fetched_lag,
    }
    if entities:
        rec["entities"] = entities
    if claims:
        rec["claims"] = claims
    return rec


def generate_corpus(spec: CorpusSpec) -> tuple[str, dict[str, object]]:
    """Emit (ingest JSONL text, truth labeling) for a synthetic corpus.

    Deterministic given the seed: identical specs produce byte-identical
    output.  Truth labels are story indexes (0-based) or ``"NOISE"``.
    """
    rng = random.Random(spec.seed)
    taken: set[str] = set()
    records: list[dict] = []
    truth: dict[str, object] = {}

    lo, hi = spec.article_range
    sources = [f"src{n:03d}" for n in range(1, spec.n_sources + 1)]
    n_story_articles = 0

    for story_index in range(spec.n_stories):
        vocab = [_fresh_word(rng, taken) for _ in range(spec.vocab_per_story)]
        entities = vocab[:3]
        n_articles = rng.randint(lo, hi)
        if spec.noise_fraction == 1.0:
            n_story_articles += n_articles
            continue
        n_story_articles += n_articles

        pool = sources[:]
        rng.shuffle(pool)
        phase = rng.randrange(len(pool))

        story_span = max(3600, int(spec.time_span * rng.uniform(0.08, 0.3)))
        start = rng.randrange(max(1, spec.time_span - story_span))
        exponent = 1.0 / (1.0 + spec.burstiness)
        arrivals = []
        for j in range(n_articles):
            u = (j + 1) / (n_articles + 1)
            offset = int(story_span * (u ** exponent))
            arrivals.append(start + offset + rng.randint(0, 900))
        arrivals.sort()

        members = []
        for j, published in enumerate(arrivals):
            external_id = f"s{story_index:03d}-a{j:03d}"
            source = pool[(phase + j) % len(pool)]
            title = _text(rng, vocab, rng.randint(5, 8), 0.75)
            body = _text(rng, vocab, rng.randint(22, 34), 0.7)
            members.append({
                "external_id": external_id,
                "source_id": source,
                "title": title,
                "body": body,
                "published_at": published,
                "fetched_lag": rng.randint(30, 600),
                "entities": sorted(rng.sample(entities, k=min(2, len(entities)))),
                "claims": [],
            })
            truth[external_id] = story_index

        subject = [entities[0]]
        for pair_index in range(spec.claim_pairs_agree):
            a, b = _claim_pair(rng, members)
            predicate = vocab[3 + pair_index % (len(vocab) - 3)]
            value = vocab[-1 - pair_index % (len(vocab) - 3)]
            for m in (a, b):
                m["claims"].append({
                    "subject_entities": subject,
                    "predicate": predicate,
                    "value": value,
                })
        for pair_index in range(spec.claim_pairs_disagree):
            a, b = _claim_pair(rng, members)
            predicate = vocab[4 + pair_index % (len(vocab) - 4)] + " count"
            a["claims"].append({
                "subject_entities": subject,
                "predicate": predicate,
                "value": str(10 + pair_index),
            })
            b["claims"].append({
                "subject_entities": subject,
                "predicate": predicate,
                "value": str(20 + pair_index),
            })

        for m in members:
            records.append(_record(
                m["external_id"], m["source_id"], m["title"], m["body"],
                m["published_at"], m["fetched_lag"], m["entities"], m["claims"],
            ))

    if spec.noise_fraction >= 1.0:
        n_noise = n_story_articles
    else:
        n_noise = round(n_story_articles * spec.noise_fraction / (1.0 - spec.noise_fraction))
    for k in range(n_noise):
        vocab = [_fresh_word(rng, taken) for _ in range(6)]
        external_id = f"noise-{k:04d}"
        published = rng.randrange(spec.time_span)
        records.append(_record(
            external_id,
            rng.choice(sources),
            _text(rng, vocab, rng.randint(5, 8), 0.85),
            _text(rng, vocab, rng.randint(18, 28), 0.8),
            published,
            rng.randint(30, 600),
            sorted(rng.sample(vocab, k=2)),
            [],
        ))
        truth[external_id] = NOISE_LABEL

    records.sort(key=lambda r: (r["published_at"], r["external_id"]))
    lines = [json.dumps(r, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
             for r in records]
    return "\n".join(lines) + ("\n" if lines else ""), truth


def _claim_pair(rng: random.Random, members: list[dict]) -> tuple[dict, dict]:
    """Two members from distinct sources (falls back to any two, then one pair)."""
    if len(members) < 2:
        return members[0], members[0]
    for _ in range(32):
        a, b = rng.sample(members, k=2)
        if a["source_id"] != b["source_id"]:
            return tuple(sorted((a, b), key=lambda m: m["published_at"]))  # type: ignore[return-value]
    a, b = rng.sample(members, k=2)
    return tuple(sorted((a, b), key=lambda m: m["published_at"]))  # type: ignore[return-value]


def _day(day_index: int, hour: float) -> int:
    base = int(datetime(2026, 1, 18, tzinfo=timezone.utc).timestamp())
    return base + day_index * 86400 + int(hour * 3600)


_T1_TOPIC = "meridian bay oil spill"
_T1_ENTITIES = ["harbor authority", "meridian bay"]


def _t1_record(external_id, source, day_index, hour, title, body, claims=()) -> dict:
    return _record(
        external_id, source, title, body, _day(day_index, hour), 120,
        _T1_ENTITIES, list(claims),
    )


def table1_corpus() -> tuple[str, dict[str, object]]:
    """The fixed three-day replay corpus: daily counts 3/3/7, sources 3/3/5.

    The source schedule is day one {S1,S2,S3}, day two {S2,S3,S4}, day three
    {S1,S4,S5,S6,S7} plus two repeats from day-three sources, so the
    cumulative union is exactly seven sources.  Planted claims exercise one
    convergence, one divergence, and one seven-hour delayed confirmation.
    """
    k_status = {"subject_entities": ["meridian bay"], "predicate": "spill status"}
    k_casualty = {"subject_entities": ["meridian bay"], "predicate": "casualty count"}
    k_rescue = {"subject_entities": ["harbor rescue"], "predicate": "operation state"}

    rows = [
        # day 1: sources S1, S2, S3
        ("t1-01", "S1", 0, 9.0,
         f"{_T1_TOPIC} reported near harbor",
         f"crews responded to the {_T1_TOPIC} as containment booms were deployed across meridian bay harbor waters",
         [dict(k_status, value="contained"), dict(k_casualty, value="12")]),
        ("t1-02", "S2", 0, 11.5,
         f"{_T1_TOPIC} prompts harbor response",
         f"the {_T1_TOPIC} spread along the coastal harbor while cleanup crews deployed containment booms near meridian bay",
         [dict(k_status, value="contained")]),
        ("t1-03", "S3", 0, 15.0,
         f"cleanup crews battle {_T1_TOPIC}",
         f"officials said the {_T1_TOPIC} reached coastal waters and cleanup crews worked the harbor through the night",
         [dict(k_casualty, value="15")]),
        # day 2: sources S2, S3, S4
        ("t1-04", "S3", 1, 9.0,
         f"{_T1_TOPIC} cleanup continues in harbor",
         f"cleanup of the {_T1_TOPIC} continued as harbor rescue teams searched meridian bay coastal waters",
         [dict(k_rescue, value="underway")]),
        ("t1-05", "S2", 1, 10.0,
         f"harbor crews extend {_T1_TOPIC} containment",
         f"containment booms around the {_T1_TOPIC} were extended and cleanup crews remained across the harbor",
         []),
        ("t1-06", "S4", 1, 16.0,
         f"{_T1_TOPIC} rescue operation expands",
         f"the {_T1_TOPIC} rescue operation expanded as harbor crews and cleanup teams covered meridian bay",
         [dict(k_rescue, value="underway")]),
        # day 3: sources S5, S1, S4, S6, S7 (+ repeats S6, S7)
        ("t1-07", "S5", 2, 8.0,
         f"{_T1_TOPIC} draws national attention",
         f"national coverage of the {_T1_TOPIC} grew while cleanup crews held containment lines across the harbor",
         []),
        ("t1-08", "S1", 2, 9.5,
         f"{_T1_TOPIC} containment holding",
         f"officials said {_T1_TOPIC} containment held overnight as cleanup crews patrolled meridian bay harbor",
         []),
        ("t1-09", "S4", 2, 11.0,
         f"crews reinforce {_T1_TOPIC} booms",
         f"cleanup crews reinforced containment booms around the {_T1_TOPIC} near the coastal harbor",
         []),
        ("t1-10", "S6", 2, 13.0,
         f"{_T1_TOPIC} cleanup reaches coastal towns",
         f"the {_T1_TOPIC} cleanup reached nearby coastal towns as harbor crews extended containment booms",
         []),
        ("t1-11", "S7", 2, 15.0,
         f"volunteers join {_T1_TOPIC} cleanup",
         f"volunteers joined cleanup crews working the {_T1_TOPIC} along meridian bay harbor waters",
         []),
        ("t1-12", "S6", 2, 17.5,
         f"{_T1_TOPIC} response enters third day",
         f"the {_T1_TOPIC} response entered a third day with cleanup crews and containment booms across the harbor",
         []),
        ("t1-13", "S7", 2, 19.0,
         f"officials assess {_T1_TOPIC} damage",
         f"officials assessed damage from the {_T1_TOPIC} while harbor cleanup crews continued across meridian bay",
         []),
    ]
    records = [_t1_record(*row) for row in rows]
    lines = [json.dumps(r, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
             for r in records]
    truth = {r["external_id"]: 0 for r in records}
    return "\n".join(lines) + "\n", truth


def table1_day_bounds(day_index: int) -> tuple[int, int]:
    """[start, end) Unix seconds of a simulated replay day (0-based)."""
    return _day(day_index, 0.0), _day(day_index + 1, 0.0)


def write_truth_file(truth: dict[str, object], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for external_id in sorted(truth):
            fh.write(json.dumps(
                {"external_id": external_id, "label": truth[external_id]},
                sort_keys=True, ensure_ascii=False, separators=(",", ":")) + "\n")


def read_truth_file(path) -> dict[str, object]:
    truth: dict[str, object] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            obj = json.loads(line)
            truth[obj["external_id"]] = obj["label"]
    return truth


def _check_universe(predicted: dict, truth: dict) -> None:
    if set(predicted) != set(truth):
        only_pred = sorted(set(predicted) - set(truth))[:3]
        only_truth = sorted(set(truth) - set(predicted))[:3]
        raise UniverseMismatchError(
            f"labelings cover different articles (pred-only {only_pred}, truth-only {only_truth})"
        )


def eval_ari(predicted: dict, truth: dict) -> float:
    """Adjusted Rand Index via the contingency-table formula, in [-1, 1]."""
    _check_universe(predicted, truth)
    n = len(truth)
    if n < 2:
        return 1.0
    contingency = Counter((truth[item], predicted[item]) for item in truth)
    truth_sizes = Counter(truth.values())
    pred_sizes = Counter(predicted.values())
    sum_comb = sum(math.comb(c, 2) for c in contingency.values())
    a_comb = sum(math.comb(c, 2) for c in truth_sizes.values())
    b_comb = sum(math.comb(c, 2) for c in pred_sizes.values())
    total = math.comb(n, 2)
    expected = a_comb * b_comb / total
    max_index = (a_comb + b_comb) / 2
    if max_index == expected:
        return 1.0
    return (sum_comb - expected) / (max_index - expected)


def eval_bcubed(predicted: dict, truth: dict) -> tuple[float, float, float]:
    """Per-item B-cubed precision, recall, and F1, each in [0, 1]."""
    _check_universe(predicted, truth)
    if not truth:
        return 1.0, 1.0, 1.0
    truth_groups: dict = defaultdict(set)
    pred_groups: dict = defaultdict(set)
    for item in truth:
        truth_groups[truth[item]].add(item)
        pred_groups[predicted[item]].add(item)
    precision = recall = 0.0
    for item in truth:
        t_cluster = truth_groups[truth[item]]
        p_cluster = pred_groups[predicted[item]]
        overlap = len(t_cluster & p_cluster)
        precision += overlap / len(p_cluster)
        recall += overlap / len(t_cluster)
    n = len(truth)
    precision /= n
    recall /= n
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1
