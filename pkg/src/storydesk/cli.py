"""Operator command line: ingest, replay, stories, signals, corpus tools, eval.

Machine-readable output is JSON on stdout (one object, or JSON Lines for
lists); human diagnostics go to stderr.  Exit status: 0 success, 1 input
errors only (some rejections), 2 fatal, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import corpus, engine, memory
from .config import PipelineConfig, make_embedder, parse_config_file, parse_config_text
from .errors import StorydeskError
from .investigate import SignalKind
from .pipeline import run_stream

USAGE_ERROR = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def _print(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True, ensure_ascii=False) + "\n")


def _load_config(config_path: str | None, state_dir: Path | None) -> PipelineConfig:
    if config_path is not None:
        return parse_config_file(Path(config_path), state_dir)
    if state_dir is not None:
        pinned = Path(state_dir) / memory.CONFIG_NAME
        if pinned.exists():
            return parse_config_text(pinned.read_text(encoding="utf-8"), state_dir)
    return PipelineConfig(state_dir=state_dir)


def _load_desk(state_dir: Path, use_snapshot: bool = True):
    cfg = _load_config(None, state_dir)
    from .config import make_embedder

    desk, last = memory.replay(state_dir, cfg.embed.dim, make_embedder(cfg),
                               use_snapshot=use_snapshot)
    return cfg, desk, last


def _cmd_ingest(args) -> int:
    state_dir = Path(args.state)
    cfg = _load_config(args.config, state_dir)
    summary = run_stream(Path(args.input), cfg, state_dir)
    _print({
        "accepted": summary.accepted,
        "rejected": summary.rejected,
        "last_seq": summary.last_seq,
        "digest": summary.digest,
        "stories": summary.stories,
        "pending": summary.pending,
    })
    return 1 if summary.rejected else 0


def _cmd_replay(args) -> int:
    state_dir = Path(args.state)
    cfg, desk, last = _load_desk(state_dir, use_snapshot=False)
    state_dict = memory.state_to_dict(desk, include_vectors=cfg.stores_vectors)
    _, digest = memory.state_digest(state_dict)
    snapshot = memory.latest_snapshot(state_dir)
    verified = None
    if snapshot is not None and snapshot["last_seq"] == last:
        if snapshot["digest"] != digest:
            raise memory.CorruptLogError(
                f"replay digest {digest} disagrees with snapshot {snapshot['digest']}"
            )
        verified = True
    _print({"last_seq": last, "digest": digest, "snapshot_verified": verified})
    return 0


def _cmd_stories(args) -> int:
    state_dir = Path(args.state)
    if args.stories_cmd == "labels":
        for external_id, label in labels_from_log(state_dir):
            _print({"external_id": external_id, "label": label})
        return 0
    cfg, desk, _ = _load_desk(state_dir)
    state = desk.engine
    if args.stories_cmd == "list":
        ranked = engine.rank_stories(state, state.clock, cfg.match)
        if args.top is not None:
            ranked = ranked[: args.top]
        for story_id, rank in ranked:
            story = state.stories[story_id]
            _print({
                "story_id": story_id,
                "rank": rank,
                "articles": len(story.member_ids),
                "sources": len(story.source_set),
                "created_at": story.created_at,
                "instantiated_at": story.instantiated_at,
                "last_updated": story.last_updated,
            })
        return 0
    story = state.stories.get(args.id)
    if story is None:
        raise StorydeskError(f"no story with id {args.id}")
    _print({
        "story_id": story.story_id,
        "created_at": story.created_at,
        "instantiated_at": story.instantiated_at,
        "last_updated": story.last_updated,
        "sources": sorted(story.source_set),
        "entities": sorted(story.entity_profile.keys()),
        "members": [
            {
                "id": article_id,
                "external_id": state.articles[article_id].external_id,
                "source_id": state.articles[article_id].source_id,
                "published_at": state.articles[article_id].published_at,
                "title": state.articles[article_id].norm_title,
            }
            for article_id in story.member_ids
        ],
    })
    return 0


def labels_from_log(state_dir: Path):
    """Total predicted labeling from the event log, including expired articles.

    Labels are ``s<story_id>`` for story members, ``p<cluster_id>`` for live
    pending members, and ``x<cluster_id>`` for members of expired clusters.
    """
    log = memory.EventLog(Path(state_dir) / memory.LOG_NAME)
    external_of: dict[int, str] = {}
    label_of: dict[int, str] = {}
    cluster_members: dict[int, list[int]] = {}
    story_of_cluster: dict[int, int] = {}
    for event in log.iter_events():
        kind = event.kind
        payload = event.payload
        if kind == "ArticleIngested":
            external_of[payload["article"]["id"]] = payload["article"]["external_id"]
        elif kind == "AssignedToPending":
            cluster_members.setdefault(payload["cluster_id"], []).append(payload["article_id"])
            label_of[payload["article_id"]] = f"p{payload['cluster_id']}"
        elif kind == "AssignedToStory":
            label_of[payload["article_id"]] = f"s{payload['story_id']}"
        elif kind == "StoryInstantiated":
            story_of_cluster[payload["cluster_id"]] = payload["story_id"]
            for article_id in cluster_members.get(payload["cluster_id"], ()):
                label_of[article_id] = f"s{payload['story_id']}"
        elif kind == "PendingExpired":
            for article_id in cluster_members.get(payload["cluster_id"], ()):
                label_of[article_id] = f"x{payload['cluster_id']}"
    return sorted(
        (external_of[article_id], label)
        for article_id, label in label_of.items()
    )


def _cmd_signals(args) -> int:
    _, desk, _ = _load_desk(Path(args.state))
    kind = SignalKind(args.kind) if args.kind else None
    for signal in desk.signals.listing(kind):
        _print(signal.to_dict())
    return 0


def _cmd_gen_corpus(args) -> int:
    spec_obj = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    spec_obj["seed"] = args.seed
    spec = corpus.CorpusSpec.from_dict(spec_obj)
    text, truth = corpus.generate_corpus(spec)
    Path(args.out).write_text(text, encoding="utf-8")
    corpus.write_truth_file(truth, args.truth)
    labels = list(truth.values())
    _print({
        "articles": len(truth),
        "stories": len({l for l in labels if l != corpus.NOISE_LABEL}),
        "noise": sum(1 for l in labels if l == corpus.NOISE_LABEL),
    })
    return 0


def _cmd_table1(args) -> int:
    text, truth = corpus.table1_corpus()
    Path(args.out).write_text(text, encoding="utf-8")
    corpus.write_truth_file(truth, args.truth)
    sources = {json.loads(line)["source_id"] for line in text.splitlines()}
    _print({"articles": len(truth), "sources": len(sources)})
    return 0


def _cmd_eval(args) -> int:
    predicted = corpus.read_truth_file(args.pred)
    truth = corpus.read_truth_file(args.truth)
    if args.exclude_noise:
        keep = {k for k, v in truth.items() if v != corpus.NOISE_LABEL}
        truth = {k: v for k, v in truth.items() if k in keep}
        predicted = {k: v for k, v in predicted.items() if k in keep}
    out = {}
    if args.metric in ("ari", "all"):
        out["ari"] = corpus.eval_ari(predicted, truth)
    if args.metric in ("bcubed", "all"):
        precision, recall, f1 = corpus.eval_bcubed(predicted, truth)
        out["bcubed_precision"] = precision
        out["bcubed_recall"] = recall
        out["bcubed_f1"] = f1
    _print(out)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="storydesk", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("ingest", help="process an article file into a state directory")
    p.add_argument("--input", required=True)
    p.add_argument("--state", required=True)
    p.add_argument("--config")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("replay", help="rebuild state from the log and verify the digest")
    p.add_argument("--state", required=True)
    p.set_defaults(func=_cmd_replay)

    p = sub.add_parser("stories", help="inspect stories")
    stories_sub = p.add_subparsers(dest="stories_cmd", required=True)
    q = stories_sub.add_parser("list", help="rank stories by importance")
    q.add_argument("--state", required=True)
    q.add_argument("--top", type=int)
    q.set_defaults(func=_cmd_stories)
    q = stories_sub.add_parser("show", help="show one story")
    q.add_argument("--state", required=True)
    q.add_argument("--id", type=int, required=True)
    q.set_defaults(func=_cmd_stories)
    q = stories_sub.add_parser("labels", help="emit the predicted labeling for eval")
    q.add_argument("--state", required=True)
    q.set_defaults(func=_cmd_stories)

    p = sub.add_parser("signals", help="list investigation signals")
    p.add_argument("--state", required=True)
    p.add_argument("--kind", choices=[k.value for k in SignalKind])
    p.set_defaults(func=_cmd_signals)

    p = sub.add_parser("gen-corpus", help="generate a synthetic corpus with ground truth")
    p.add_argument("--spec", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--truth", required=True)
    p.set_defaults(func=_cmd_gen_corpus)

    p = sub.add_parser("table1", help="emit the fixed three-day replay corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--truth", required=True)
    p.set_defaults(func=_cmd_table1)

    p = sub.add_parser("eval", help="score a predicted labeling against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--metric", choices=["ari", "bcubed", "all"], default="all")
    p.add_argument("--exclude-noise", action="store_true")
    p.set_defaults(func=_cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (memory.CorruptLogError, memory.StorageError) as exc:
        print(f"storydesk: fatal: {exc}", file=sys.stderr)
        return 2
    except StorydeskError as exc:
        print(f"storydesk: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"storydesk: i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
