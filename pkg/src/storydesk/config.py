"""Flat key-value run configuration.

Config files hold one ``section.key = value`` pair per line; blank lines
and lines starting with ``#`` are ignored.  Unknown keys are an error;
absent keys take their defaults.  The effective configuration is embedded
in every snapshot, and a copy is written to the state directory so a run
interrupted before its first snapshot can still be replayed.

Example::

    match.alpha = 0.6
    match.theta_join = 0.55
    embed.dim = 256
    investigate.confirm_delay_min = 21600
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .embed import EmbedConfig, ExternalEmbedder, HashEmbedder
from .engine import MatchConfig
from .errors import ConfigError
from .investigate import InvestigateConfig

EMBED_MODES = ("hash", "external")

_SCHEMA: dict[str, type] = {
    "embed.dim": int,
    "embed.ngram": int,
    "embed.mode": str,
    "embed.url": str,
    "match.alpha": float,
    "match.beta": float,
    "match.gamma": float,
    "match.tau": float,
    "match.theta_join": float,
    "match.min_articles": int,
    "match.min_sources": int,
    "match.min_coherence": float,
    "match.pending_ttl": float,
    "investigate.confirm_delay_min": float,
    "investigate.shift_window": float,
    "investigate.shift_threshold": float,
    "investigate.min_window_members": int,
}


@dataclass(frozen=True)
class PipelineConfig:
    embed: EmbedConfig = EmbedConfig()
    match: MatchConfig = MatchConfig()
    investigate: InvestigateConfig = InvestigateConfig()
    embed_mode: str = "hash"
    embed_url: str = ""
    state_dir: Path | None = None

    def __post_init__(self):
        if self.embed_mode not in EMBED_MODES:
            raise ConfigError(f"embed.mode must be one of {EMBED_MODES}, got {self.embed_mode!r}")
        if self.embed_mode == "external" and not self.embed_url:
            raise ConfigError("embed.mode = external requires embed.url")

    @property
    def stores_vectors(self) -> bool:
        """External-mode vectors cannot be recomputed, so they are persisted."""
        return self.embed_mode == "external"

    def to_dict(self) -> dict:
        return {
            "embed": {
                "dim": self.embed.dim,
                "ngram": self.embed.ngram,
                "mode": self.embed_mode,
                "url": self.embed_url,
            },
            "match": {
                "alpha": self.match.alpha,
                "beta": self.match.beta,
                "gamma": self.match.gamma,
                "tau": self.match.tau,
                "theta_join": self.match.theta_join,
                "min_articles": self.match.min_articles,
                "min_sources": self.match.min_sources,
                "min_coherence": self.match.min_coherence,
                "pending_ttl": self.match.pending_ttl,
            },
            "investigate": {
                "confirm_delay_min": self.investigate.confirm_delay_min,
                "shift_window": self.investigate.shift_window,
                "shift_threshold": self.investigate.shift_threshold,
                "min_window_members": self.investigate.min_window_members,
            },
        }

    @classmethod
    def from_dict(cls, obj: dict, state_dir: Path | None = None) -> "PipelineConfig":
        embed = obj.get("embed", {})
        match = obj.get("match", {})
        inv = obj.get("investigate", {})
        return cls(
            embed=EmbedConfig(dim=embed.get("dim", 256), ngram=embed.get("ngram", 3)),
            match=MatchConfig(**{k: v for k, v in match.items()}),
            investigate=InvestigateConfig(**{k: v for k, v in inv.items()}),
            embed_mode=embed.get("mode", "hash"),
            embed_url=embed.get("url", ""),
            state_dir=state_dir,
        )


def parse_config_text(text: str, state_dir: Path | None = None) -> PipelineConfig:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        converter = _SCHEMA[key]
        try:
            values[key] = converter(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc

    def section(prefix: str) -> dict:
        return {
            key.split(".", 1)[1]: val
            for key, val in values.items()
            if key.startswith(prefix + ".") and key.split(".", 1)[1] not in ("mode", "url")
        }

    return PipelineConfig(
        embed=EmbedConfig(**section("embed")),
        match=MatchConfig(**section("match")),
        investigate=InvestigateConfig(**section("investigate")),
        embed_mode=str(values.get("embed.mode", "hash")),
        embed_url=str(values.get("embed.url", "")),
        state_dir=state_dir,
    )


def parse_config_file(path: Path, state_dir: Path | None = None) -> PipelineConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text, state_dir)


def render_config(cfg: PipelineConfig) -> str:
    """Flat key-value rendering; parse_config_text round-trips it."""
    doc = cfg.to_dict()
    lines = []
    for section_name in ("embed", "match", "investigate"):
        for key, value in doc[section_name].items():
            if section_name == "embed" and key == "url" and not value:
                continue
            lines.append(f"{section_name}.{key} = {value}")
    return "\n".join(lines) + "\n"


def make_embedder(cfg: PipelineConfig):
    if cfg.embed_mode == "external":
        return ExternalEmbedder(cfg.embed_url, cfg.embed)
    return HashEmbedder(cfg.embed)
