"""Deterministic vector representations for similarity and clustering.

Articles are embedded by signed feature hashing of overlapping character
n-grams.  The hash is a frozen constant of the file-format contract:

* each n-gram is hashed as 64-bit FNV-1a over its Unicode code points
  (offset basis XORed with ``HASH_SEED``, prime ``0x100000001B3``),
* followed by the 64-bit avalanche finalizer ``fmix64`` (xorshift/multiply
  constants ``0xFF51AFD7ED558CCD`` / ``0xC4CEB9FE1A85EC53``),
* bucket = hash mod dim, sign = +1 if bit 63 is clear else -1,
* the bucket histogram is L2-normalized and stored as float32.

Replay across builds must reproduce identical vectors, so none of the
constants above may change without a snapshot format-version bump.

An external embedding service can replace the hash embedder (see
``ExternalEmbedder``): the engine POSTs ``{"texts": [...], "dim": N}`` and
expects ``{"vectors": [[...], ...]}`` in input order; returned vectors are
re-normalized and rejected on wrong arity or dimension.  Nothing in this
package requires the external service.
"""

from __future__ import annotations

import json
import urllib.request
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, StorydeskError

HASH_SEED = 0x9E3779B97F4A7C15

_FNV_OFFSET = np.uint64(0xCBF29CE484222325) ^ np.uint64(HASH_SEED)
_FNV_PRIME = np.uint64(0x100000001B3)
_FMIX_C1 = np.uint64(0xFF51AFD7ED558CCD)
_FMIX_C2 = np.uint64(0xC4CEB9FE1A85EC53)
_SHIFT33 = np.uint64(33)


class EmbedError(StorydeskError):
    pass


class EmptyTextError(EmbedError):
    pass


class AllZeroError(EmbedError):
    pass


class DimensionMismatchError(EmbedError):
    pass


class EmbedServiceError(EmbedError):
    """External embedding service returned an unusable response."""


@dataclass(frozen=True, slots=True)
class EmbedConfig:
    dim: int = 256
    ngram: int = 3

    def __post_init__(self):
        if self.dim < 8:
            raise ConfigError(f"embed.dim must be >= 8, got {self.dim}")
        if self.ngram < 1:
            raise ConfigError(f"embed.ngram must be >= 1, got {self.ngram}")


def _ngram_hashes(text: str, n: int) -> np.ndarray:
    """64-bit hashes of all overlapping n-grams of ``text``, in order."""
    cps = np.frombuffer(text.encode("utf-32-le"), dtype=np.uint32).astype(np.uint64)
    if cps.size < n:
        return np.empty(0, dtype=np.uint64)
    windows = np.lib.stride_tricks.sliding_window_view(cps, n)
    h = np.full(windows.shape[0], _FNV_OFFSET, dtype=np.uint64)
    for j in range(n):
        h = (h ^ windows[:, j]) * _FNV_PRIME
    h ^= h >> _SHIFT33
    h = h * _FMIX_C1
    h ^= h >> _SHIFT33
    h = h * _FMIX_C2
    h ^= h >> _SHIFT33
    return h


def hash_embed(text: str, cfg: EmbedConfig = EmbedConfig()) -> np.ndarray:
    """Embed normalized text as a unit-norm float32 vector of cfg.dim.

    Deterministic: equal text and config always produce the identical bit
    pattern.  Raises EmptyTextError on empty input and AllZeroError when the
    text yields no features (shorter than the n-gram width) or the signed
    counts cancel exactly.
    """
    if not text:
        raise EmptyTextError("cannot embed empty text")
    hashes = _ngram_hashes(text, cfg.ngram)
    if hashes.size == 0:
        raise AllZeroError(f"text shorter than ngram width {cfg.ngram}")
    buckets = (hashes % np.uint64(cfg.dim)).astype(np.intp)
    signs = 1.0 - 2.0 * (hashes >> np.uint64(63)).astype(np.float64)
    vec = np.bincount(buckets, weights=signs, minlength=cfg.dim)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise AllZeroError("all feature signs cancelled")
    return (vec / norm).astype(np.float32)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Dot product of two unit vectors, clamped to [-1, 1] against rounding."""
    if a.shape != b.shape:
        raise DimensionMismatchError(f"vector dims differ: {a.shape} vs {b.shape}")
    dot = float(np.dot(a.astype(np.float64), b.astype(np.float64)))
    return max(-1.0, min(1.0, dot))


def cosine_against(matrix: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Cosines of unit vector ``v`` against each unit row of ``matrix``.

    Shared kernel for batched scoring; returns float64.
    """
    if matrix.shape[1] != v.shape[0]:
        raise DimensionMismatchError(f"matrix dim {matrix.shape[1]} vs vector {v.shape[0]}")
    return np.clip((matrix @ v).astype(np.float64), -1.0, 1.0)


def mean_pairwise_cosine(matrix: np.ndarray) -> float:
    """Mean cosine over all unordered pairs of unit rows; 1.0 for one row."""
    k = matrix.shape[0]
    if k < 2:
        return 1.0
    gram = np.clip((matrix @ matrix.T).astype(np.float64), -1.0, 1.0)
    total = float(gram.sum() - np.trace(gram)) / 2.0
    return total / (k * (k - 1) / 2)


def balanced_centroid(matrix: np.ndarray, sources: list[str]) -> np.ndarray:
    """Unit-norm mean of per-source mean embeddings (float32).

    Row i of ``matrix`` is the embedding of a member from ``sources[i]``;
    rows must be in the members' canonical order.  Each distinct source
    contributes one averaged vector, so per-source article volume does not
    change its weight.
    """
    order = sorted(set(sources))
    index = {s: i for i, s in enumerate(order)}
    codes = np.array([index[s] for s in sources], dtype=np.intp)
    sums = np.zeros((len(order), matrix.shape[1]), dtype=np.float64)
    np.add.at(sums, codes, matrix.astype(np.float64))
    counts = np.bincount(codes, minlength=len(order)).astype(np.float64)
    means = sums / counts[:, None]
    centroid = means.mean(axis=0)
    norm = float(np.linalg.norm(centroid))
    if norm == 0.0:
        raise AllZeroError("centroid of given members is the zero vector")
    return (centroid / norm).astype(np.float32)


class HashEmbedder:
    """Default deterministic embedder backed by hash_embed."""

    def __init__(self, cfg: EmbedConfig = EmbedConfig()):
        self.cfg = cfg

    def embed_texts(self, texts: list[str]) -> list[np.ndarray]:
        return [hash_embed(t, self.cfg) for t in texts]


def validate_embed_response(payload, n_texts: int, dim: int) -> list[np.ndarray]:
    """Check an external embedder response and re-normalize its vectors.

    Rejects wrong arity, wrong dimension, non-numeric entries, non-finite
    values, and zero vectors.
    """
    if not isinstance(payload, dict) or "vectors" not in payload:
        raise EmbedServiceError("response missing 'vectors'")
    vectors = payload["vectors"]
    if not isinstance(vectors, list) or len(vectors) != n_texts:
        raise EmbedServiceError(
            f"expected {n_texts} vectors, got {len(vectors) if isinstance(vectors, list) else 'non-list'}"
        )
    out = []
    for i, row in enumerate(vectors):
        if not isinstance(row, list) or len(row) != dim:
            raise EmbedServiceError(f"vector {i} has wrong dimension")
        try:
            arr = np.asarray(row, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise EmbedServiceError(f"vector {i} is not numeric: {exc}") from exc
        if not np.all(np.isfinite(arr)):
            raise EmbedServiceError(f"vector {i} contains non-finite values")
        norm = float(np.linalg.norm(arr))
        if norm == 0.0:
            raise EmbedServiceError(f"vector {i} is the zero vector")
        out.append((arr / norm).astype(np.float32))
    return out


class ExternalEmbedder:
    """Client for the optional HTTP embedding service (live mode only)."""

    def __init__(self, url: str, cfg: EmbedConfig = EmbedConfig(), timeout: float = 30.0):
        self.url = url
        self.cfg = cfg
        self.timeout = timeout

    def embed_texts(self, texts: list[str]) -> list[np.ndarray]:
        body = json.dumps({"texts": texts, "dim": self.cfg.dim}).encode("utf-8")
        request = urllib.request.Request(
            self.url, data=body, headers={"Content-Type": "application/json"}
        )
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as response:
                payload = json.loads(response.read().decode("utf-8"))
        except (OSError, ValueError) as exc:
            raise EmbedServiceError(f"embed service call failed: {exc}") from exc
        return validate_embed_response(payload, len(texts), self.cfg.dim)
