"""Command-line harness: dataset building, candidates, training data,
evaluation, scoring, statistics, overlays.

Every command takes ``--out DIR``, writes its files there plus a
``manifest.json`` carrying the config hash, seeds, and versions, and is
idempotent: identical inputs and seeds give byte-identical outputs (no
timestamps are written). Exit code 0 covers completed runs even when the
model misbehaved (that is scored); nonzero means infrastructure trouble.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import __version__
from .annotate import (
    AnnotatedRecord,
    AnnotatorConfig,
    SourceQuestion,
    annotate_record,
)
from .augment import (
    AugmentConfig,
    emit_phase1,
    emit_phase2,
    permute_candidates,
    save_training_samples,
)
from .capture import SessionConfig, load_snapshot_dir, save_snapshot, snapshot_batch
from .chains import ModelOutput, emit_chain, parse_chain
from .client import (
    DEFAULT_TEMPLATE,
    TEMPLATE_VERSION,
    EndpointConfig,
    extract_chain_text,
    infer,
)
from .dataset import (
    CandidateDocument,
    CandidateSet,
    DocumentPool,
    build_candidate_set,
    compute_stats,
    load_candidate_sets,
    load_pool,
    load_records,
    save_candidate_sets,
    save_pool,
    save_records,
    validate_dataset,
)
from .errors import ConfigError, EvichainError, MissingSnapshotError, SchemaError
from .metrics import MatchConfig, aggregate, render_summary, score_example
from .overlay import render_overlays


def _read_jsonl(path: str | Path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if line:
                yield lineno, json.loads(line)


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, config: dict, seeds: dict | None = None) -> None:
    payload = {
        "command": command,
        "config": config,
        "seeds": seeds or {},
        "template_version": TEMPLATE_VERSION,
        "tool_version": __version__,
    }
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    manifest = dict(payload, config_hash=hashlib.sha256(canonical.encode("utf-8")).hexdigest())
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _match_config(args) -> MatchConfig:
    return MatchConfig(
        iou_threshold=args.iou_threshold,
        center_rule_enabled=not args.no_center_rule,
        threshold_inclusive=not args.iou_exclusive,
    )


def _add_match_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--iou-threshold", type=float, default=0.3,
                        help="IoU threshold for box matches (default 0.3)")
    parser.add_argument("--no-center-rule", action="store_true",
                        help="disable the center-inside fallback rule")
    parser.add_argument("--iou-exclusive", action="store_true",
                        help="require IoU strictly above the threshold")


def _add_candidate_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--candidates", default=None,
                        help="stored candidate-set file; built on the fly when omitted")
    parser.add_argument("--k", type=int, default=5, help="candidate set size (default 5)")
    parser.add_argument("--seed", default="0", help="base seed for sampling")
    parser.add_argument("--policy", default="global-pool",
                        choices=["global-pool", "same-group"])


def _record_seed(base_seed: str, question_id: str) -> str:
    return f"{base_seed}:{question_id}"


def _resolve_candsets(args, records, pool: DocumentPool) -> dict[str, CandidateSet]:
    if args.candidates:
        candsets = load_candidate_sets(args.candidates, records)
        missing = [r.question_id for r in records if r.question_id not in candsets]
        if missing:
            raise ConfigError(
                f"candidate file lacks entries for: {', '.join(missing[:5])}"
            )
        return candsets
    return {
        r.question_id: build_candidate_set(
            r, pool, k=args.k, seed=_record_seed(args.seed, r.question_id),
            policy=args.policy,
        )
        for r in records
    }


def _load_dataset(path: str) -> list:
    records = load_records(path)
    if not records:
        raise ConfigError(f"dataset {path} holds no records")
    return records


# ---------------------------------------------------------------------------
# commands


def cmd_candidates(args) -> int:
    records = _load_dataset(args.dataset)
    pool = load_pool(args.pool)
    out = _out_dir(args)
    candsets = [
        build_candidate_set(
            r, pool, k=args.k, seed=_record_seed(args.seed, r.question_id),
            policy=args.policy,
        )
        for r in records
    ]
    save_candidate_sets(candsets, out / "candidates.jsonl")
    _write_manifest(
        out, "candidates",
        {"dataset": args.dataset, "pool": args.pool, "k": args.k, "policy": args.policy},
        seeds={"base": args.seed},
    )
    print(f"wrote {len(candsets)} candidate sets to {out / 'candidates.jsonl'}")
    return 0


def _load_raw_questions(path: str) -> list[tuple[SourceQuestion, list[tuple[str, str]]]]:
    rows = []
    for lineno, d in _read_jsonl(path):
        answers = d.get("gold_answers")
        if answers is None and "answer" in d:
            answers = [d["answer"]]
        if not answers:
            raise SchemaError(f"line {lineno}.gold_answers", "missing answers")
        facts = [(f[0], f[1]) for f in d.get("supporting_facts", [])]
        rows.append(
            (
                SourceQuestion(
                    question_id=d["question_id"],
                    question=d["question"],
                    gold_answers=tuple(answers),
                    question_type=d.get("question_type", "compositional"),
                    entity_chain_key=d.get("entity_chain_key", ""),
                ),
                facts,
            )
        )
    return rows


def cmd_build(args) -> int:
    out = _out_dir(args)
    snapshots_dir = Path(args.snapshots)
    if args.capture_manifest:
        if not args.webdriver_url:
            raise ConfigError("--capture-manifest requires --webdriver-url")
        targets = [(d["doc_id"], d["url"]) for _, d in _read_jsonl(args.capture_manifest)]
        session_cfg = SessionConfig(
            endpoint_url=args.webdriver_url,
            viewport_width=args.viewport_width,
            settle_delay=args.settle_delay,
        )
        snaps, failures = snapshot_batch(targets, args.concurrency, session_cfg)
        snapshots_dir.mkdir(parents=True, exist_ok=True)
        for snap in snaps:
            save_snapshot(snap, snapshots_dir)
        for url, reason in failures:
            print(f"capture failed: {url}: {reason}", file=sys.stderr)

    snapshots = load_snapshot_dir(snapshots_dir)
    if not snapshots:
        raise ConfigError(f"no snapshots found under {snapshots_dir}")
    pool = DocumentPool(
        documents={
            doc_id: CandidateDocument(
                doc_id=doc_id,
                image_path=str(snapshots_dir / f"{_snapshot_stem(snapshots_dir, doc_id)}.png"),
                width=snap.width,
                height=snap.height,
            )
            for doc_id, snap in snapshots.items()
        }
    )
    cfg = AnnotatorConfig(
        min_overlap_score=args.min_overlap_score, min_token_count=args.min_token_count
    )
    accepted = []
    reject_rows = []
    for source, facts in _load_raw_questions(args.questions):
        try:
            result = annotate_record(source, snapshots, facts, cfg)
        except MissingSnapshotError as exc:
            reject_rows.append(
                {"question_id": source.question_id, "doc_id": None,
                 "sentence": None, "reason": f"missing-snapshot: {exc}"}
            )
            continue
        if isinstance(result, AnnotatedRecord):
            accepted.append(result.record)
        else:
            reject_rows.append(
                {"question_id": result.question_id, "doc_id": result.doc_id,
                 "sentence": result.sentence, "reason": result.reason}
            )
    valid, invalid = validate_dataset(accepted, pool)
    for record, codes in invalid:
        reject_rows.append(
            {"question_id": record.question_id, "doc_id": None,
             "sentence": None, "reason": ",".join(codes)}
        )
    save_records(valid, out / "dataset.jsonl")
    save_pool(pool, out / "pool.jsonl")
    _write_jsonl(out / "rejects.jsonl", reject_rows)
    _write_manifest(
        out, "build",
        {"questions": args.questions, "snapshots": str(snapshots_dir),
         "min_overlap_score": args.min_overlap_score,
         "min_token_count": args.min_token_count},
    )
    print(f"accepted {len(valid)} records, rejected {len(reject_rows)}")
    return 0


def _snapshot_stem(directory: Path, doc_id: str) -> str:
    # save_snapshot sanitizes names; recover the stem the same way
    from .capture import _safe_name

    return _safe_name(doc_id)


def _augment_config(args) -> AugmentConfig | None:
    resolutions = ()
    if args.resolutions:
        resolutions = tuple(int(s) for s in str(args.resolutions).split(",") if s)
    if not args.augment and not resolutions:
        return None
    if args.augment:
        return AugmentConfig(
            max_crop_fraction=args.max_crop,
            max_translate_fraction=args.max_translate,
            scale_range=(args.scale_min, args.scale_max),
            aspect_jitter=args.aspect_jitter,
            resolutions=resolutions,
        )
    return AugmentConfig(
        max_crop_fraction=0.0, max_translate_fraction=0.0,
        scale_range=(1.0, 1.0), aspect_jitter=0.0, resolutions=resolutions,
    )


def cmd_emit_training(args) -> int:
    records = _load_dataset(args.dataset)
    pool = load_pool(args.pool)
    out = _out_dir(args)
    image_paths = pool.image_paths()
    cfg = _augment_config(args)
    images_dir = out / "images"
    if cfg is not None:
        images_dir.mkdir(exist_ok=True)
    samples = []
    if args.phase == 1:
        for record in records:
            samples.extend(
                emit_phase1(record, image_paths, seed=args.seed, cfg=cfg,
                            out_dir=images_dir if cfg is not None else None)
            )
    else:
        candsets = _resolve_candsets(args, records, pool)
        permuted_sets = []
        for record in records:
            candset = candsets[record.question_id]
            sample = emit_phase2(
                record, candset, image_paths, seed=args.seed, cfg=cfg,
                out_dir=images_dir if cfg is not None else None,
            )
            if args.permute:
                sample, candset = _permute_sample(
                    sample, candset, _record_seed(f"{args.seed}:permute", record.question_id)
                )
            permuted_sets.append(candset)
            samples.append(sample)
        if args.permute:
            save_candidate_sets(permuted_sets, out / "candidates_permuted.jsonl")
    save_training_samples(samples, out / "samples.jsonl")
    _write_manifest(
        out, "emit-training",
        {"dataset": args.dataset, "pool": args.pool, "phase": args.phase,
         "augment": bool(args.augment), "resolutions": args.resolutions or "",
         "permute": bool(getattr(args, "permute", False))},
        seeds={"base": str(args.seed)},
    )
    print(f"wrote {len(samples)} phase-{args.phase} samples to {out / 'samples.jsonl'}")
    return 0


def _permute_sample(sample, candset: CandidateSet, seed: str):
    output = parse_chain(sample.target)
    permuted_set, new_chain = permute_candidates(candset, output.chain, seed)
    doc_to_path = {
        doc: path
        for (_, doc), (_, path) in zip(candset.ordered, sample.image_refs)
    }
    refs = tuple((label, doc_to_path[doc]) for label, doc in permuted_set.ordered)
    target = emit_chain(ModelOutput(answer=output.answer, chain=new_chain))
    new_sample = replace(
        sample,
        image_refs=refs,
        target=target,
        provenance=dict(sample.provenance, permute_seed=seed),
    )
    return new_sample, permuted_set


def _score_run(records, candsets, outputs, match_cfg):
    scores = [
        score_example(r, candsets[r.question_id], outputs.get(r.question_id), match_cfg)
        for r in records
    ]
    report = aggregate(scores, records, match_cfg)
    return scores, report


def _write_scoring_outputs(out: Path, scores, report) -> None:
    _write_jsonl(out / "scores.jsonl", (s.to_dict() for s in scores))
    (out / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (out / "summary.txt").write_text(render_summary(report), encoding="utf-8")


def cmd_evaluate(args) -> int:
    records = _load_dataset(args.dataset)
    pool = load_pool(args.pool)
    out = _out_dir(args)
    candsets = _resolve_candsets(args, records, pool)
    image_paths = pool.image_paths()
    endpoint = EndpointConfig(
        base_url=args.endpoint,
        model_name=args.model,
        auth_token_env_name=args.auth_env,
        timeout=args.timeout,
        max_retries=args.max_retries,
        retry_backoff_base=args.backoff,
        max_output_tokens=args.max_output_tokens,
    )
    with ThreadPoolExecutor(max_workers=args.concurrency) as pool_exec:
        futures = {
            record.question_id: pool_exec.submit(
                infer, record, candsets[record.question_id], image_paths, endpoint,
                DEFAULT_TEMPLATE,
            )
            for record in records
        }
        results = {qid: fut.result() for qid, fut in futures.items()}
    match_cfg = _match_config(args)
    outputs = {qid: res.output for qid, res in results.items()}
    scores, report = _score_run(records, candsets, outputs, match_cfg)
    _write_jsonl(
        out / "predictions.jsonl",
        (
            {
                "question_id": r.question_id,
                "raw_text": results[r.question_id].raw_text,
                "attempts": results[r.question_id].attempts,
                "failure_reason": results[r.question_id].failure_reason,
            }
            for r in records
        ),
    )
    _write_scoring_outputs(out, scores, report)
    if not args.candidates:
        save_candidate_sets(
            [candsets[r.question_id] for r in records], out / "candidates.jsonl"
        )
    _write_manifest(
        out, "evaluate",
        {"dataset": args.dataset, "pool": args.pool, "endpoint": args.endpoint,
         "model": args.model, "k": args.k, "policy": args.policy,
         "candidates": args.candidates or "", "concurrency": args.concurrency,
         "match": match_cfg.to_dict()},
        seeds={"base": args.seed},
    )
    print(render_summary(report))
    return 0


def cmd_score(args) -> int:
    records = _load_dataset(args.dataset)
    pool = load_pool(args.pool) if args.pool else None
    out = _out_dir(args)
    if args.candidates:
        candsets = load_candidate_sets(args.candidates, records)
        missing = [r.question_id for r in records if r.question_id not in candsets]
        if missing:
            raise ConfigError(f"candidate file lacks entries for: {', '.join(missing[:5])}")
    else:
        if pool is None:
            raise ConfigError("score needs --candidates or --pool to rebuild sets")
        candsets = {
            r.question_id: build_candidate_set(
                r, pool, k=args.k, seed=_record_seed(args.seed, r.question_id),
                policy=args.policy,
            )
            for r in records
        }
    known = {r.question_id for r in records}
    raw_by_id: dict[str, str] = {}
    for lineno, row in _read_jsonl(args.predictions):
        qid = row.get("question_id")
        if qid not in known:
            print(f"prediction line {lineno}: unknown question_id {qid!r}", file=sys.stderr)
            continue
        raw_by_id[qid] = row.get("raw_text", "")
    outputs: dict[str, ModelOutput | None] = {}
    for record in records:
        raw = raw_by_id.get(record.question_id)
        output = None
        if raw is not None:
            text = extract_chain_text(raw)
            if text is not None:
                output = parse_chain(text)
        outputs[record.question_id] = output
    match_cfg = _match_config(args)
    scores, report = _score_run(records, candsets, outputs, match_cfg)
    _write_scoring_outputs(out, scores, report)
    _write_manifest(
        out, "score",
        {"dataset": args.dataset, "predictions": args.predictions,
         "candidates": args.candidates or "", "match": match_cfg.to_dict()},
        seeds={"base": args.seed},
    )
    print(render_summary(report))
    return 0


def cmd_stats(args) -> int:
    records = _load_dataset(args.dataset)
    out = _out_dir(args)
    stats = compute_stats(records)
    (out / "stats.json").write_text(
        json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    _write_manifest(out, "stats", {"dataset": args.dataset})
    d = stats.to_dict()
    print(f"questions            {d['question_count']}")
    print(f"avg question tokens  {d['avg_question_tokens']:.2f}")
    print(f"avg answer tokens    {d['avg_answer_tokens']:.2f}")
    print(f"unique screenshots   {d['unique_screenshots']}")
    print(f"total boxes          {d['total_boxes']}")
    print(f"avg boxes/question   {d['avg_boxes']:.2f}")
    hops = "  ".join(f"{k}-hop {v:.1%}" for k, v in sorted(d["hop_distribution"].items()))
    types = "  ".join(f"{k} {v:.1%}" for k, v in sorted(d["type_distribution"].items()))
    print(f"hop distribution     {hops}")
    print(f"type distribution    {types}")
    return 0


def cmd_overlay(args) -> int:
    records = _load_dataset(args.dataset)
    pool = load_pool(args.pool)
    out = _out_dir(args)
    candsets = _resolve_candsets(args, records, pool)
    raw_by_id = {
        row.get("question_id"): row.get("raw_text", "")
        for _, row in _read_jsonl(args.predictions)
    }
    wanted = set(args.question_id) if args.question_id else set(raw_by_id)
    image_paths = pool.image_paths()
    index_lines: list[str] = []
    rendered = 0
    for record in records:
        if record.question_id not in wanted:
            continue
        raw = raw_by_id.get(record.question_id)
        output = None
        if raw is not None:
            text = extract_chain_text(raw)
            if text is not None:
                output = parse_chain(text)
        _, lines = render_overlays(
            record, candsets[record.question_id], output, image_paths, out
        )
        index_lines.extend(lines)
        rendered += 1
    (out / "index.txt").write_text("\n".join(index_lines) + "\n", encoding="utf-8")
    _write_manifest(
        out, "overlay",
        {"dataset": args.dataset, "pool": args.pool,
         "predictions": args.predictions,
         "question_id": sorted(args.question_id) if args.question_id else []},
        seeds={"base": args.seed},
    )
    print(f"rendered overlays for {rendered} questions into {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> tuple[argparse.ArgumentParser, list[argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="evichain",
        description="Evidence-chain QA toolkit: datasets, candidates, training data, "
                    "evaluation, scoring, statistics, overlays.",
    )
    parser.add_argument("--config", default=None,
                        help="JSON config file; CLI flags override its values")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    children: list[argparse.ArgumentParser] = []

    p = sub.add_parser("build", help="annotate raw questions into a boxed dataset")
    p.add_argument("--questions", required=True, help="raw questions JSONL")
    p.add_argument("--snapshots", required=True, help="snapshot directory (PNG + sidecar)")
    p.add_argument("--capture-manifest", default=None,
                   help="JSONL of {doc_id, url} pages to capture first")
    p.add_argument("--webdriver-url", default=None, help="WebDriver endpoint for capture")
    p.add_argument("--viewport-width", type=int, default=1920)
    p.add_argument("--settle-delay", type=float, default=0.5)
    p.add_argument("--concurrency", type=int, default=2)
    p.add_argument("--min-overlap-score", type=float, default=0.75)
    p.add_argument("--min-token-count", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build)
    children.append(p)

    p = sub.add_parser("candidates", help="build per-question candidate sets")
    p.add_argument("--dataset", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", default="0")
    p.add_argument("--policy", default="global-pool", choices=["global-pool", "same-group"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_candidates)
    children.append(p)

    p = sub.add_parser("emit-training", help="emit phase-1/phase-2 training samples")
    p.add_argument("--dataset", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--phase", type=int, choices=[1, 2], required=True)
    _add_candidate_flags(p)
    p.add_argument("--augment", action="store_true", help="enable random affine augmentation")
    p.add_argument("--max-crop", type=float, default=0.08)
    p.add_argument("--max-translate", type=float, default=0.05)
    p.add_argument("--scale-min", type=float, default=0.9)
    p.add_argument("--scale-max", type=float, default=1.1)
    p.add_argument("--aspect-jitter", type=float, default=0.05)
    p.add_argument("--resolutions", default="",
                   help="comma-separated longest-side targets, e.g. 512,1024,1536")
    p.add_argument("--permute", action="store_true",
                   help="phase 2: permute candidate order and relabel the target")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_emit_training)
    children.append(p)

    p = sub.add_parser("evaluate", help="query an endpoint and score the run")
    p.add_argument("--dataset", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--endpoint", required=True, help="chat-completions URL, POSTed verbatim")
    p.add_argument("--model", required=True)
    p.add_argument("--auth-env", default="COE_API_TOKEN",
                   help="environment variable holding the bearer token")
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--timeout", type=float, default=120.0)
    p.add_argument("--max-retries", type=int, default=3)
    p.add_argument("--backoff", type=float, default=0.5)
    p.add_argument("--max-output-tokens", type=int, default=1024)
    _add_candidate_flags(p)
    _add_match_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    children.append(p)

    p = sub.add_parser("score", help="re-score stored predictions")
    p.add_argument("--dataset", required=True)
    p.add_argument("--pool", default=None, help="needed only to rebuild candidate sets")
    p.add_argument("--predictions", required=True)
    _add_candidate_flags(p)
    _add_match_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)
    children.append(p)

    p = sub.add_parser("stats", help="dataset statistics")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)
    children.append(p)

    p = sub.add_parser("overlay", help="draw gold vs predicted evidence boxes")
    p.add_argument("--dataset", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--question-id", action="append", default=None,
                   help="restrict to specific question ids (repeatable)")
    _add_candidate_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_overlay)
    children.append(p)

    return parser, children


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser, children = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if known.config:
        try:
            file_cfg = json.loads(Path(known.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            print(f"error: cannot read config {known.config}: {exc}", file=sys.stderr)
            return 2
        if not isinstance(file_cfg, dict):
            print(f"error: config {known.config} must hold a JSON object", file=sys.stderr)
            return 2
        defaults = {key.replace("-", "_"): value for key, value in file_cfg.items()}
        for child in children:
            child.set_defaults(**defaults)
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except EvichainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
