"""Domain types, validation, and text normalization for incoming articles.

The ingest format is UTF-8 JSON Lines, one article object per line.
Required keys: ``external_id``, ``source_id``, ``title``, ``body``,
``published_at``, ``fetched_at`` (integers, Unix seconds).  Optional keys:
``url``, ``language``, ``entities`` (array of strings), ``claims`` (array of
objects with ``subject_entities``, ``predicate``, ``value``, and optional
``asserted_at``).  Unknown keys are ignored.  Lines starting with ``#`` are
comments and are skipped by the stream reader, not by this module.
"""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass, field

from .errors import StorydeskError


class ValidationError(StorydeskError):
    """An article failed validation; carries a machine-readable reason code."""

    reason = "invalid"


class MalformedRecordError(ValidationError):
    reason = "malformed_record"


class EmptyTitleError(ValidationError):
    reason = "empty_title"


class TimestampOrderError(ValidationError):
    reason = "timestamp_order"


class MissingSourceError(ValidationError):
    reason = "missing_source"


class DuplicateArticleError(ValidationError):
    reason = "duplicate_external_id"


@dataclass(frozen=True, slots=True)
class RawClaim:
    subject_entities: tuple[str, ...]
    predicate: str
    value: str
    asserted_at: int | None = None


@dataclass(frozen=True, slots=True)
class RawArticle:
    """A decoded ingest record, prior to validation and normalization."""

    external_id: str
    source_id: str
    title: str
    body: str
    published_at: int
    fetched_at: int
    url: str = ""
    language: str = ""
    entities: tuple[str, ...] = ()
    claims: tuple[RawClaim, ...] = ()


@dataclass(frozen=True, slots=True)
class Claim:
    """A structured assertion carried by an article.

    ``subject_entities`` is sorted and deduplicated, all text fields are
    normalized, and ``asserted_at`` defaults to the article's publish time.
    """

    claim_id: int
    article_id: int
    subject_entities: tuple[str, ...]
    predicate: str
    value: str
    asserted_at: int


@dataclass(frozen=True, slots=True)
class Article:
    """A validated, normalized article with an engine-assigned id.

    Ids are assigned by the pipeline in ingest order, strictly increasing.
    """

    id: int
    external_id: str
    source_id: str
    norm_title: str
    norm_body: str
    published_at: int
    fetched_at: int
    entities: tuple[str, ...]
    claims: tuple[Claim, ...] = ()

    @property
    def embed_text(self) -> str:
        """Normalized text used for the article's embedding."""
        if self.norm_body:
            return self.norm_title + " " + self.norm_body
        return self.norm_title


def normalize_text(text: str) -> str:
    """Casefold, compose to NFC, and collapse whitespace runs to one space.

    Total and idempotent; empty input yields the empty string.
    """
    return " ".join(unicodedata.normalize("NFC", text.casefold()).split())


def _normalize_entities(entities) -> tuple[str, ...]:
    seen = {normalize_text(e) for e in entities}
    seen.discard("")
    return tuple(sorted(seen))


def validate_article(raw: RawArticle, next_id: int, first_claim_id: int = 1) -> Article:
    """Validate and normalize a raw article, assigning ``next_id``.

    Claim ids are assigned sequentially starting at ``first_claim_id``.
    Raises a ValidationError subclass on any rule violation; never returns
    a partially-built Article.
    """
    if not raw.external_id:
        raise MalformedRecordError("external_id must be non-empty")
    if not raw.source_id:
        raise MissingSourceError("source_id must be non-empty")
    if raw.published_at > raw.fetched_at:
        raise TimestampOrderError(
            f"published_at {raw.published_at} > fetched_at {raw.fetched_at}"
        )
    norm_title = normalize_text(raw.title)
    if not norm_title:
        raise EmptyTitleError("title normalizes to empty")

    claims = []
    for offset, rc in enumerate(raw.claims):
        subjects = _normalize_entities(rc.subject_entities)
        if not subjects:
            raise MalformedRecordError("claim subject_entities empty after normalization")
        predicate = normalize_text(rc.predicate)
        if not predicate:
            raise MalformedRecordError("claim predicate empty after normalization")
        asserted_at = raw.published_at if rc.asserted_at is None else rc.asserted_at
        if asserted_at < 0:
            raise MalformedRecordError(f"claim asserted_at {asserted_at} < 0")
        claims.append(
            Claim(
                claim_id=first_claim_id + offset,
                article_id=next_id,
                subject_entities=subjects,
                predicate=predicate,
                value=normalize_text(rc.value),
                asserted_at=asserted_at,
            )
        )

    return Article(
        id=next_id,
        external_id=raw.external_id,
        source_id=raw.source_id,
        norm_title=norm_title,
        norm_body=normalize_text(raw.body),
        published_at=raw.published_at,
        fetched_at=raw.fetched_at,
        entities=_normalize_entities(raw.entities),
        claims=tuple(claims),
    )


def article_to_dict(article: Article) -> dict:
    """Plain-dict form of a validated article, for events and snapshots."""
    return {
        "id": article.id,
        "external_id": article.external_id,
        "source_id": article.source_id,
        "norm_title": article.norm_title,
        "norm_body": article.norm_body,
        "published_at": article.published_at,
        "fetched_at": article.fetched_at,
        "entities": list(article.entities),
        "claims": [
            {
                "claim_id": c.claim_id,
                "article_id": c.article_id,
                "subject_entities": list(c.subject_entities),
                "predicate": c.predicate,
                "value": c.value,
                "asserted_at": c.asserted_at,
            }
            for c in article.claims
        ],
    }


def article_from_dict(obj: dict) -> Article:
    return Article(
        id=obj["id"],
        external_id=obj["external_id"],
        source_id=obj["source_id"],
        norm_title=obj["norm_title"],
        norm_body=obj["norm_body"],
        published_at=obj["published_at"],
        fetched_at=obj["fetched_at"],
        entities=tuple(obj["entities"]),
        claims=tuple(
            Claim(
                claim_id=c["claim_id"],
                article_id=c["article_id"],
                subject_entities=tuple(c["subject_entities"]),
                predicate=c["predicate"],
                value=c["value"],
                asserted_at=c["asserted_at"],
            )
            for c in obj["claims"]
        ),
    )


def _want_str(obj: dict, key: str) -> str:
    value = obj.get(key)
    if not isinstance(value, str):
        raise MalformedRecordError(f"field {key!r} missing or not a string")
    return value

def _want_int(obj: dict, key: str) -> int:
    value = obj.get(key)
    # bool is an int subclass; reject it explicitly
    if not isinstance(value, int) or isinstance(value, bool):
        raise MalformedRecordError(f"field {key!r} missing or not an integer")
    return value


def _opt_str(obj: dict, key: str) -> str:
    value = obj.get(key, "")
    if not isinstance(value, str):
        raise MalformedRecordError(f"field {key!r} must be a string")
    return value


def _parse_claims(obj: dict) -> tuple[RawClaim, ...]:
    raw = obj.get("claims", [])
    if not isinstance(raw, list):
        raise MalformedRecordError("field 'claims' must be an array")
    claims = []
    for item in raw:
        if not isinstance(item, dict):
            raise MalformedRecordError("claim entries must be objects")
        subjects = item.get("subject_entities")
        if not isinstance(subjects, list) or not all(isinstance(s, str) for s in subjects):
            raise MalformedRecordError("claim 'subject_entities' missing or not an array of strings")
        asserted_at = item.get("asserted_at")
        if asserted_at is not None and (not isinstance(asserted_at, int) or isinstance(asserted_at, bool)):
            raise MalformedRecordError("claim 'asserted_at' must be an integer")
        claims.append(
            RawClaim(
                subject_entities=tuple(subjects),
                predicate=_want_str(item, "predicate"),
                value=_want_str(item, "value"),
                asserted_at=asserted_at,
            )
        )
    return tuple(claims)


def parse_jsonl_record(line: bytes | str) -> RawArticle:
    """Decode one ingest line into a RawArticle.

    Unknown fields are ignored.  Raises MalformedRecordError on syntax
    errors, missing required fields, or wrong scalar types.
    """
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedRecordError(f"invalid UTF-8: {exc}") from exc
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedRecordError(f"invalid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise MalformedRecordError("record is not a JSON object")

    entities = obj.get("entities", [])
    if not isinstance(entities, list) or not all(isinstance(e, str) for e in entities):
        raise MalformedRecordError("field 'entities' must be an array of strings")

    return RawArticle(
        external_id=_want_str(obj, "external_id"),
        source_id=_want_str(obj, "source_id"),
        title=_want_str(obj, "title"),
        body=_want_str(obj, "body"),
        published_at=_want_int(obj, "published_at"),
        fetched_at=_want_int(obj, "fetched_at"),
        url=_opt_str(obj, "url"),
        language=_opt_str(obj, "language"),
        entities=tuple(entities),
        claims=_parse_claims(obj),
    )


def serialize_raw_article(raw: RawArticle) -> str:
    """Encode a RawArticle as one ingest line (no trailing newline).

    Optional fields at their default values are omitted, so
    parse(serialize(parse(x))) == parse(x) for every valid record.
    """
    obj: dict = {
        "external_id": raw.external_id,
        "source_id": raw.source_id,
        "title": raw.title,
        "body": raw.body,
        "published_at": raw.published_at,
        "fetched_at": raw.fetched_at,
    }
    if raw.url:
        obj["url"] = raw.url
    if raw.language:
        obj["language"] = raw.language
    if raw.entities:
        obj["entities"] = list(raw.entities)
    if raw.claims:
        claims = []
        for c in raw.claims:
            item: dict = {
                "subject_entities": list(c.subject_entities),
                "predicate": c.predicate,
                "value": c.value,
            }
            if c.asserted_at is not None:
                item["asserted_at"] = c.asserted_at
            claims.append(item)
        obj["claims"] = claims
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
