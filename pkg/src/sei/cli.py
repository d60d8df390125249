"""Command-line interface: one subcommand per pipeline operation plus `run`.

Exit codes: 0 success, 2 validation error, 3 IO error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import (
    CorpusFilterConfig,
    filter_corpus,
    load_corpus,
    save_corpus,
)
from .errors import StageError, ToolkitError, ValidationError
from .gradcheck import central_difference, relative_error, sample_flat_indices
from .indications import NormalizerConfig, normalize_indication
from .losses import (
    AlignmentBatch,
    global_alignment_loss,
    local_alignment_loss,
    total_alignment_loss_grad,
)
from .pipeline import (
    PipelineConfig,
    fuse_demo_result,
    load_config,
    m_gt_key,
    parse_m_gt,
    read_entity_sets,
    read_generated,
    read_label_csv,
    run_pipeline,
    score_from_files,
)
from .retrieval import load_index, top_k
from .see import see_extract

M_GT_FLAG_CHOICES = ("60", "80", "90", "100", "cpl")


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    path.write_text(
        "".join(json.dumps(row, sort_keys=True) + "\n" for row in rows), encoding="utf-8"
    )


def _cmd_filter(args) -> int:
    if args.filter_config:
        raw = json.loads(Path(args.filter_config).read_text(encoding="utf-8"))
        cfg = CorpusFilterConfig(
            min_tokens=int(raw.get("min_tokens", 3)),
            junk_patterns=tuple(raw.get("junk_patterns", ())),
        )
    else:
        cfg = CorpusFilterConfig(min_tokens=args.min_tokens, junk_patterns=tuple(args.junk))
    records = load_corpus(args.corpus)
    kept, dropped = filter_corpus(records, cfg)
    save_corpus(kept, args.out)
    if args.dropped:
        _write_jsonl(
            Path(args.dropped),
            [{"study_id": rec.study_id, "reason": reason} for rec, reason in dropped],
        )
    print(f"kept {len(kept)} of {len(records)} records ({len(dropped)} dropped)")
    return 0


def _cmd_see_extract(args) -> int:
    records = load_corpus(args.corpus)
    rows = [
        {"study_id": rec.study_id, "factual_sequence": see_extract(rec).rendered}
        for rec in records
    ]
    _write_jsonl(Path(args.out), rows)
    print(f"extracted {len(rows)} factual sequences")
    return 0


def _cmd_normalize(args) -> int:
    records = load_corpus(args.corpus)
    cfg = NormalizerConfig()
    normalized = [
        replace(rec, indication=normalize_indication(rec.indication, cfg)) for rec in records
    ]
    save_corpus(normalized, args.out)
    print(f"normalized {len(normalized)} records")
    return 0


def _cmd_index(args) -> int:
    from .corpus import StudyRecord, ReportDocument, load_embeddings
    from .retrieval import build_index, save_index

    embeddings = load_embeddings(args.embeddings)
    records = [
        StudyRecord(
            study_id=sid,
            report=ReportDocument.from_text(sid, ""),
            entities=(),
            embedding=vec,
        )
        for sid, vec in embeddings.items()
    ]
    index = build_index(records, normalize=not args.no_normalize)
    save_index(index, args.out)
    print(f"indexed {index.n} embeddings of dimension {index.dim}")
    return 0


def _cmd_retrieve(args) -> int:
    index = load_index(args.index)
    row = index.row_of(args.query_id)
    if row is None:
        raise ValidationError(f"study {args.query_id!r} is not in the index")
    result = top_k(index, index.matrix[row], args.k, exclude_id=args.query_id)
    for rank, (sid, score) in enumerate(result.hits, 1):
        print(f"{rank}\t{sid}\t{score:.6f}")
    return 0


def _cmd_attach_shc(args) -> int:
    from .corpus import attach_embeddings, load_embeddings
    from .retrieval import attach_shc

    records = load_corpus(args.corpus)
    records = attach_embeddings(records, load_embeddings(args.embeddings))
    index = load_index(args.index)
    sequences = None
    if args.sequences:
        sequences = {
            row["study_id"]: row["factual_sequence"]
            for row in (json.loads(line) for line in Path(args.sequences).read_text().splitlines() if line)
        }
    attached = attach_shc(records, index, args.k, sequences=sequences)
    rows = [
        {
            "study_id": rec.study_id,
            "cases": [
                {"study_id": c.study_id, "score": c.score, "factual_sequence": c.factual_sequence}
                for c in cases
            ],
        }
        for rec, cases in attached
    ]
    _write_jsonl(Path(args.out), rows)
    print(f"attached top-{args.k} cases for {len(rows)} records")
    return 0


def _cmd_fuse_demo(args) -> int:
    result = fuse_demo_result(
        d=args.d,
        n_heads=args.heads,
        seed=args.seed,
        s_image=args.si,
        s_shc=args.sh,
        s_indication=args.sn,
        with_shc=not args.no_shc,
        with_indication=not args.no_indication,
    )
    print(f"branch: {result['branch']}")
    print(f"checksum: sha256:{result['checksum']}")
    print(f"output_sum: {result['output_sum']:.12e}")
    print(f"max_fd_rel_error: {result['max_fd_rel_error']:.3e}")
    return 0


def _cmd_align_demo(args) -> int:
    rng = np.random.default_rng(args.seed)
    batch = AlignmentBatch(
        image_feats=rng.standard_normal((args.b, args.d)),
        text_feats=rng.standard_normal((args.b, args.d)),
        image_locals=rng.standard_normal((args.b, 3, args.d)),
        text_locals=rng.standard_normal((args.b, 3, args.d)),
        temperature=args.tau,
    )
    loss_i2t = global_alignment_loss(batch, "image_to_text")
    loss_t2i = global_alignment_loss(batch, "text_to_image")
    loss_local = local_alignment_loss(batch)
    total, grads = total_alignment_loss_grad(batch)

    def rebuild() -> float:
        fresh = AlignmentBatch(
            image_feats=batch.image_feats,
            text_feats=batch.text_feats,
            image_locals=batch.image_locals,
            text_locals=batch.text_locals,
            temperature=batch.temperature,
        )
        return (
            global_alignment_loss(fresh, "image_to_text")
            + global_alignment_loss(fresh, "text_to_image")
            + local_alignment_loss(fresh)
        )

    max_err = 0.0
    for name in ("image_feats", "text_feats", "image_locals", "text_locals"):
        array = getattr(batch, name)
        for flat_index in sample_flat_indices(rng, array.size, 6):
            numeric = central_difference(rebuild, array, flat_index)
            analytic = float(grads[name].reshape(-1)[flat_index])
            max_err = max(max_err, relative_error(analytic, numeric))
    print(f"global_image_to_text: {loss_i2t:.6f}")
    print(f"global_text_to_image: {loss_t2i:.6f}")
    print(f"local: {loss_local:.6f}")
    print(f"total: {total:.6f}")
    print(f"max_fd_rel_error: {max_err:.3e}")
    return 0


def _cmd_score(args) -> int:
    records = load_corpus(args.ref)
    generated = read_generated(Path(args.gen))
    labels = read_label_csv(Path(args.labels)) if args.labels else None
    entities = read_entity_sets(Path(args.entities)) if args.entities else None
    m_gt = parse_m_gt(args.mgt)
    scores = score_from_files(records, generated, labels, entities, (m_gt,))
    report = scores[m_gt_key(m_gt)]
    if args.out:
        Path(args.out).write_text(
            json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
    print(json.dumps(report, sort_keys=True, indent=2))
    return 0


def _cmd_run(args) -> int:
    overrides = {
        "corpus": args.corpus,
        "embeddings": args.embeddings,
        "out_dir": args.out_dir,
        "generated": args.generated,
        "k": args.k,
        "seed": args.seed,
        "jobs": args.jobs,
    }
    cfg = load_config(args.config, overrides)
    manifest = run_pipeline(cfg)
    print(f"pipeline complete; manifest at {manifest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sei",
        description="Structural entity sequences, similar-case retrieval, fusion math, and scoring.",
    )
    parser.add_argument("--version", action="version", version=f"sei {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("filter", help="drop empty or junk reports")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dropped", help="optional JSONL of dropped ids and reasons")
    p.add_argument("--min-tokens", type=int, default=3)
    p.add_argument("--junk", action="append", default=[], help="junk substring (repeatable)")
    p.add_argument(
        "--filter-config", help="JSON file with min_tokens and junk_patterns (overrides flags)"
    )
    p.set_defaults(handler=_cmd_filter)

    p = sub.add_parser("see-extract", help="emit factual entity sequences")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_see_extract)

    p = sub.add_parser("normalize", help="normalize indication fields")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_normalize)

    p = sub.add_parser("index", help="build a binary embedding index")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-normalize", action="store_true", help="index raw, unnormalized rows")
    p.set_defaults(handler=_cmd_index)

    p = sub.add_parser("retrieve", help="query the index by stored study id")
    p.add_argument("--index", required=True)
    p.add_argument("--query-id", required=True)
    p.add_argument("--k", type=int, default=5)
    p.set_defaults(handler=_cmd_retrieve)

    p = sub.add_parser("attach-shc", help="attach top-k similar cases to each record")
    p.add_argument("--corpus", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--sequences", help="precomputed factual sequences JSONL")
    p.set_defaults(handler=_cmd_attach_shc)

    p = sub.add_parser("fuse-demo", help="run the fusion network on seeded features")
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--si", type=int, default=4)
    p.add_argument("--sh", type=int, default=6)
    p.add_argument("--sn", type=int, default=3)
    p.add_argument("--no-indication", action="store_true")
    p.add_argument("--no-shc", action="store_true")
    p.set_defaults(handler=_cmd_fuse_demo)

    p = sub.add_parser("align-demo", help="evaluate alignment losses on seeded features")
    p.add_argument("--b", type=int, default=4)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--seed", type=int, default=3)
    p.add_argument("--tau", type=float, default=0.07)
    p.set_defaults(handler=_cmd_align_demo)

    p = sub.add_parser("score", help="score generated reports against a reference corpus")
    p.add_argument("--gen", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--labels", help="generated-side label CSV (study_id,l1..l14)")
    p.add_argument("--entities", help="generated-side entities JSONL")
    p.add_argument("--mgt", choices=M_GT_FLAG_CHOICES, default="cpl")
    p.add_argument("--out")
    p.set_defaults(handler=_cmd_score)

    p = sub.add_parser("run", help="run the full pipeline from a config file")
    p.add_argument("--config")
    p.add_argument("--corpus")
    p.add_argument("--embeddings")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--generated")
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.set_defaults(handler=_cmd_run)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3 if isinstance(exc.cause, OSError) else 2
    except ToolkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def entrypoint() -> None:
    raise SystemExit(main())
