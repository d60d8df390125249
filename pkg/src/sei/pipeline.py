"""Pipeline orchestration: configuration, stage functions, run manifests.

``run_pipeline`` executes the stages

    filter -> see-extract -> normalize -> index -> attach-shc -> fuse-demo -> score

in order.  Every stage reads only files and writes one artifact, so deleting
an intermediate and rerunning regenerates it; a manifest records input and
artifact hashes plus the effective configuration.  Runs are deterministic:
identical inputs and config reproduce byte-identical artifacts.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import __version__
from .corpus import (
    CorpusFilterConfig,
    EntityLabel,
    StudyRecord,
    attach_embeddings,
    filter_corpus,
    load_corpus,
    load_embeddings,
    save_corpus,
    tokenize,
)
from .errors import CorpusError, StageError, ToolkitError, ValidationError
from .fusion import FeatureSet, fuse, fuse_backward, fusion_objective, init_params
from .gradcheck import central_difference, relative_error, sample_flat_indices
from .indications import NormalizerConfig, normalize_indication
from .metrics import EvalPair, score_corpus
from .retrieval import attach_shc, build_index, load_index, save_index
from .see import see_extract

__all__ = [
    "PipelineConfig",
    "load_config",
    "run_pipeline",
    "parallel_map",
    "fuse_demo_result",
    "parse_m_gt",
    "m_gt_key",
    "read_generated",
    "read_label_csv",
    "read_entity_sets",
    "score_from_files",
    "sha256_file",
    "STAGE_ORDER",
]

STAGE_ORDER = ("filter", "see-extract", "normalize", "index", "attach-shc", "fuse-demo", "score")

_ARTIFACTS = {
    "filter": "filtered.jsonl",
    "see-extract": "sequences.jsonl",
    "normalize": "normalized.jsonl",
    "index": "index.bin",
    "attach-shc": "shc.jsonl",
    "fuse-demo": "fusion.json",
    "score": "scores.json",
}


def parallel_map(fn: Callable, items: Iterable, jobs: int = 1) -> list:
    """Order-preserving map, threaded when jobs > 1."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def parse_m_gt(value) -> float:
    """Accept 60/80/90/100 (int or str) or "cpl"/infinity for complete references."""
    if isinstance(value, str):
        if value.lower() in ("cpl", "inf", "complete"):
            return math.inf
        try:
            value = int(value)
        except ValueError:
            raise ValidationError(f"invalid m_gt value {value!r}") from None
    if value == math.inf:
        return math.inf
    ivalue = int(value)
    if ivalue < 0:
        raise ValidationError(f"m_gt must be >= 0, got {value}")
    return float(ivalue)


def m_gt_key(m_gt: float) -> str:
    return "cpl" if m_gt == math.inf else str(int(m_gt))


@dataclass
class PipelineConfig:
    """Effective configuration for one run; flags > file > defaults."""

    corpus: Path
    embeddings: Path
    out_dir: Path
    generated: Path | None = None
    generated_labels: Path | None = None
    generated_entities: Path | None = None
    k: int = 1
    m_gt: tuple[float, ...] = (math.inf,)
    filter: CorpusFilterConfig = field(default_factory=CorpusFilterConfig)
    normalizer: NormalizerConfig = field(default_factory=NormalizerConfig)
    fusion_d: int = 8
    fusion_heads: int = 2
    fusion_si: int = 4
    fusion_sh: int = 6
    fusion_sn: int = 3
    tau: float = 0.07
    seed: int = 7
    index_normalize: bool = True
    jobs: int = 1

    def __post_init__(self):
        if self.k < 0:
            raise ValidationError(f"k must be >= 0, got {self.k}")
        if self.jobs < 1:
            raise ValidationError(f"jobs must be >= 1, got {self.jobs}")
        allowed = (60.0, 80.0, 90.0, 100.0, math.inf)
        for value in self.m_gt:
            if value not in allowed:
                raise ValidationError(
                    f"m_gt must be one of 60, 80, 90, 100, or cpl; got {value}"
                )

    def echo(self) -> dict:
        """JSON-able snapshot of the effective configuration for the manifest."""
        return {
            "paths": {
                "corpus": str(self.corpus),
                "embeddings": str(self.embeddings),
                "out_dir": str(self.out_dir),
                "generated": str(self.generated) if self.generated else None,
                "generated_labels": str(self.generated_labels) if self.generated_labels else None,
                "generated_entities": str(self.generated_entities)
                if self.generated_entities
                else None,
            },
            "k": self.k,
            "m_gt": [m_gt_key(m) for m in self.m_gt],
            "filter": {
                "min_tokens": self.filter.min_tokens,
                "junk_patterns": list(self.filter.junk_patterns),
            },
            "normalizer": {
                "illegal_chars": sorted(self.normalizer.illegal_chars),
                "invalid_words": list(self.normalizer.invalid_words),
                "male_terms": sorted(self.normalizer.male_terms),
                "female_terms": sorted(self.normalizer.female_terms),
            },
            "fusion": {
                "d": self.fusion_d,
                "heads": self.fusion_heads,
                "si": self.fusion_si,
                "sh": self.fusion_sh,
                "sn": self.fusion_sn,
            },
            "tau": self.tau,
            "seed": self.seed,
            "index_normalize": self.index_normalize,
            "jobs": self.jobs,
        }


def load_config(path: str | Path | None, overrides: dict | None = None) -> PipelineConfig:
    """Build a PipelineConfig from an optional JSON file plus override values."""
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{path}: invalid JSON ({exc.msg})") from None
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    paths = dict(raw.get("paths", {}))
    for key in ("corpus", "embeddings", "out_dir", "generated", "generated_labels", "generated_entities"):
        if key in overrides:
            paths[key] = overrides.pop(key)

    def path_of(key: str, required: bool) -> Path | None:
        value = paths.get(key)
        if value is None:
            if required:
                raise ValidationError(f"config is missing required path {key!r}")
            return None
        return Path(value)

    filter_raw = dict(raw.get("filter", {}))
    normalizer_raw = dict(raw.get("normalizer", {}))
    fusion_raw = dict(raw.get("fusion", {}))
    cfg_filter = CorpusFilterConfig(
        min_tokens=int(overrides.pop("min_tokens", filter_raw.get("min_tokens", 3))),
        junk_patterns=tuple(overrides.pop("junk_patterns", filter_raw.get("junk_patterns", ()))),
    )
    norm_kwargs = {}
    if "illegal_chars" in normalizer_raw:
        norm_kwargs["illegal_chars"] = frozenset(normalizer_raw["illegal_chars"])
    if "invalid_words" in normalizer_raw:
        norm_kwargs["invalid_words"] = tuple(normalizer_raw["invalid_words"])
    if "male_terms" in normalizer_raw:
        norm_kwargs["male_terms"] = frozenset(normalizer_raw["male_terms"])
    if "female_terms" in normalizer_raw:
        norm_kwargs["female_terms"] = frozenset(normalizer_raw["female_terms"])
    m_gt_raw = overrides.pop("m_gt", raw.get("m_gt", ["cpl"]))
    return PipelineConfig(
        corpus=path_of("corpus", required=True),
        embeddings=path_of("embeddings", required=True),
        out_dir=path_of("out_dir", required=True),
        generated=path_of("generated", required=False),
        generated_labels=path_of("generated_labels", required=False),
        generated_entities=path_of("generated_entities", required=False),
        k=int(overrides.pop("k", raw.get("k", 1))),
        m_gt=tuple(parse_m_gt(m) for m in m_gt_raw),
        filter=cfg_filter,
        normalizer=NormalizerConfig(**norm_kwargs),
        fusion_d=int(overrides.pop("fusion_d", fusion_raw.get("d", 8))),
        fusion_heads=int(overrides.pop("fusion_heads", fusion_raw.get("heads", 2))),
        fusion_si=int(overrides.pop("fusion_si", fusion_raw.get("si", 4))),
        fusion_sh=int(overrides.pop("fusion_sh", fusion_raw.get("sh", 6))),
        fusion_sn=int(overrides.pop("fusion_sn", fusion_raw.get("sn", 3))),
        tau=float(overrides.pop("tau", raw.get("tau", 0.07))),
        seed=int(overrides.pop("seed", raw.get("seed", 7))),
        index_normalize=bool(overrides.pop("index_normalize", raw.get("index_normalize", True))),
        jobs=int(overrides.pop("jobs", raw.get("jobs", 1))),
    )


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump_jsonl(path: Path, objects: Iterable[dict]) -> None:
    lines = [json.dumps(obj, sort_keys=True) for obj in objects]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def _dump_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _load_jsonl(path: Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None
    return rows


# ---------------------------------------------------------------------------
# Stage implementations (file in, file out)
# ---------------------------------------------------------------------------


def _stage_filter(cfg: PipelineConfig) -> Path:
    records = load_corpus(cfg.corpus)
    kept, _dropped = filter_corpus(records, cfg.filter)
    out = cfg.out_dir / _ARTIFACTS["filter"]
    save_corpus(kept, out)
    return out


def _stage_see(cfg: PipelineConfig) -> Path:
    records = load_corpus(cfg.out_dir / _ARTIFACTS["filter"])
    rows = parallel_map(
        lambda rec: {"study_id": rec.study_id, "factual_sequence": see_extract(rec).rendered},
        records,
        cfg.jobs,
    )
    out = cfg.out_dir / _ARTIFACTS["see-extract"]
    _dump_jsonl(out, rows)
    return out


def _stage_normalize(cfg: PipelineConfig) -> Path:
    from dataclasses import replace

    records = load_corpus(cfg.out_dir / _ARTIFACTS["filter"])
    normalized = [
        replace(rec, indication=normalize_indication(rec.indication, cfg.normalizer))
        for rec in records
    ]
    out = cfg.out_dir / _ARTIFACTS["normalize"]
    save_corpus(normalized, out)
    return out


def _load_indexed_records(cfg: PipelineConfig) -> list[StudyRecord]:
    records = load_corpus(cfg.out_dir / _ARTIFACTS["normalize"])
    embeddings = load_embeddings(cfg.embeddings)
    return attach_embeddings(records, embeddings)


def _stage_index(cfg: PipelineConfig) -> Path:
    records = _load_indexed_records(cfg)
    index = build_index(records, normalize=cfg.index_normalize)
    out = cfg.out_dir / _ARTIFACTS["index"]
    save_index(index, out)
    return out


def _stage_attach(cfg: PipelineConfig) -> Path:
    records = _load_indexed_records(cfg)
    index = load_index(cfg.out_dir / _ARTIFACTS["index"])
    sequences = {
        row["study_id"]: row["factual_sequence"]
        for row in _load_jsonl(cfg.out_dir / _ARTIFACTS["see-extract"])
    }
    attached = attach_shc(records, index, cfg.k, sequences=sequences)
    rows = [
        {
            "study_id": rec.study_id,
            "cases": [
                {
                    "study_id": case.study_id,
                    "score": case.score,
                    "factual_sequence": case.factual_sequence,
                }
                for case in cases
            ],
        }
        for rec, cases in attached
    ]
    out = cfg.out_dir / _ARTIFACTS["attach-shc"]
    _dump_jsonl(out, rows)
    return out


def fuse_demo_result(
    d: int,
    n_heads: int,
    seed: int,
    s_image: int,
    s_shc: int,
    s_indication: int,
    with_shc: bool,
    with_indication: bool,
    fd_samples: int = 12,
) -> dict:
    """Run the fusion network on seeded random features and spot-check gradients.

    Returns the branch taken, a checksum of the fused output, and the largest
    relative error between analytic and finite-difference gradients over a
    sampled parameter subset.
    """
    rng = np.random.default_rng(seed)
    params = init_params(d, n_heads, seed)
    features = FeatureSet(
        image=rng.standard_normal((s_image, d)),
        shc=rng.standard_normal((s_shc, d)) if with_shc else None,
        indication=rng.standard_normal((s_indication, d)) if with_indication else None,
    )
    output = fuse(features, params)
    upstream = rng.standard_normal(output.fused.shape)
    grads = fuse_backward(features, params, upstream)
    active = {"integrate"}
    if output.branch_taken in ("full", "no_indication"):
        active.add("img_enrich")
    if output.branch_taken == "full":
        active.add("ind_enrich")
    max_err = 0.0
    checked = 0
    for layer_name, layer in params.layers().items():
        if layer_name not in active:
            continue
        grad_layer = grads.layers()[layer_name]
        for array_name, array in layer.arrays().items():
            for flat_index in sample_flat_indices(rng, array.size, max(1, fd_samples // 8)):
                numeric = central_difference(
                    lambda: fusion_objective(features, params, upstream), array, flat_index
                )
                analytic = float(grad_layer.arrays()[array_name].reshape(-1)[flat_index])
                max_err = max(max_err, relative_error(analytic, numeric))
                checked += 1
    checksum = hashlib.sha256(np.ascontiguousarray(output.fused).tobytes()).hexdigest()
    return {
        "branch": output.branch_taken,
        "checksum": checksum,
        "output_sum": float(output.fused.sum()),
        "max_fd_rel_error": max_err,
        "gradients_checked": checked,
        "d": d,
        "n_heads": n_heads,
        "seed": seed,
    }


def _stage_fuse_demo(cfg: PipelineConfig) -> Path:
    records = load_corpus(cfg.out_dir / _ARTIFACTS["normalize"])
    has_indication = any(rec.indication for rec in records) and cfg.fusion_sn > 0
    result = fuse_demo_result(
        d=cfg.fusion_d,
        n_heads=cfg.fusion_heads,
        seed=cfg.seed,
        s_image=cfg.fusion_si,
        s_shc=cfg.fusion_sh,
        s_indication=cfg.fusion_sn,
        with_shc=cfg.k > 0,
        with_indication=has_indication,
    )
    out = cfg.out_dir / _ARTIFACTS["fuse-demo"]
    _dump_json(out, result)
    return out


def read_generated(path: Path) -> dict[str, str]:
    """Read generated reports: JSONL of {"study_id", "text"}."""
    out: dict[str, str] = {}
    for lineno, row in enumerate(_load_jsonl(path), 1):
        if "study_id" not in row or "text" not in row:
            raise CorpusError(f"{path}: line {lineno}: expected fields 'study_id' and 'text'")
        sid = str(row["study_id"])
        if sid in out:
            raise CorpusError(f"{path}: line {lineno}: duplicate study_id {sid!r}")
        out[sid] = str(row["text"])
    return out


def read_label_csv(path: Path) -> dict[str, tuple[int, ...]]:
    """Read a label CSV with header study_id,l1..l14."""
    out: dict[str, tuple[int, ...]] = {}
    with open(path, encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or header[0] != "study_id" or len(header) != 15:
            raise CorpusError(f"{path}: expected header study_id,l1..l14")
        for lineno, row in enumerate(reader, 2):
            if len(row) != 15:
                raise CorpusError(f"{path}: line {lineno}: expected 15 columns, got {len(row)}")
            sid = row[0]
            if sid in out:
                raise CorpusError(f"{path}: line {lineno}: duplicate study_id {sid!r}")
            try:
                vec = tuple(int(v) for v in row[1:])
            except ValueError:
                raise CorpusError(f"{path}: line {lineno}: labels must be integers") from None
            if any(v not in (0, 1) for v in vec):
                raise CorpusError(f"{path}: line {lineno}: labels must be 0 or 1")
            out[sid] = vec
    return out


def read_entity_sets(path: Path) -> dict[str, set[tuple[str, str]]]:
    """Read generated-side entities: JSONL of {"study_id", "entities": [{"tokens","label"}]}."""
    out: dict[str, set[tuple[str, str]]] = {}
    for lineno, row in enumerate(_load_jsonl(path), 1):
        if "study_id" not in row or "entities" not in row:
            raise CorpusError(f"{path}: line {lineno}: expected fields 'study_id' and 'entities'")
        sid = str(row["study_id"])
        entries = set()
        for ent in row["entities"]:
            if "tokens" not in ent or "label" not in ent:
                raise CorpusError(f"{path}: line {lineno}: entity missing 'tokens' or 'label'")
            label = EntityLabel.parse(str(ent["label"]))
            entries.add((str(ent["tokens"]).lower(), label.value))
        out[sid] = entries
    return out


def score_from_files(
    reference_records: list[StudyRecord],
    generated: dict[str, str],
    generated_labels: dict[str, tuple[int, ...]] | None,
    generated_entities: dict[str, set[tuple[str, str]]] | None,
    m_gt_values: tuple[float, ...],
) -> dict[str, dict[str, float]]:
    """Score generated reports against reference records per truncation setting.

    The reference side supplies gold labels (labels14) and reference entity
    sets; the generated side supplies text plus optional label vectors and
    entity sets keyed by study_id.
    """
    by_id = {rec.study_id: rec for rec in reference_records}
    unknown = [sid for sid in generated if sid not in by_id]
    if unknown:
        raise ValidationError(f"generated study_id {unknown[0]!r} is not in the reference corpus")
    scored = [rec for rec in reference_records if rec.study_id in generated]
    if not scored:
        raise ValidationError("no generated reports match the reference corpus")
    pairs = [
        EvalPair(
            generated=tuple(tokenize(generated[rec.study_id])),
            reference=rec.report.tokens,
        )
        for rec in scored
    ]
    labels = None
    if generated_labels is not None:
        labels = []
        for rec in scored:
            if rec.study_id not in generated_labels:
                raise ValidationError(f"study {rec.study_id!r} has no generated label vector")
            if rec.labels14 is None:
                raise ValidationError(f"study {rec.study_id!r} has no gold labels14 in the corpus")
            labels.append((generated_labels[rec.study_id], rec.labels14))
    entities = None
    if generated_entities is not None:
        entities = []
        for rec in scored:
            if rec.study_id not in generated_entities:
                raise ValidationError(f"study {rec.study_id!r} has no generated entity set")
            ref_set = {(e.tokens.lower(), e.label.value) for e in rec.entities}
            entities.append((generated_entities[rec.study_id], ref_set))
    return {
        m_gt_key(m): score_corpus(pairs, labels=labels, entities=entities, m_gt=m)
        for m in m_gt_values
    }


def _stage_score(cfg: PipelineConfig) -> Path:
    if cfg.generated is None:
        raise ValidationError("score stage requires paths.generated in the config")
    records = load_corpus(cfg.out_dir / _ARTIFACTS["normalize"])
    generated = read_generated(cfg.generated)
    labels = read_label_csv(cfg.generated_labels) if cfg.generated_labels else None
    entities = read_entity_sets(cfg.generated_entities) if cfg.generated_entities else None
    scores = score_from_files(records, generated, labels, entities, cfg.m_gt)
    out = cfg.out_dir / _ARTIFACTS["score"]
    _dump_json(out, scores)
    return out


_STAGE_FUNCS: dict[str, Callable[[PipelineConfig], Path]] = {
    "filter": _stage_filter,
    "see-extract": _stage_see,
    "normalize": _stage_normalize,
    "index": _stage_index,
    "attach-shc": _stage_attach,
    "fuse-demo": _stage_fuse_demo,
    "score": _stage_score,
}


def _manifest_path(cfg: PipelineConfig) -> Path:
    return cfg.out_dir / "run_manifest.json"


def run_pipeline(cfg: PipelineConfig) -> Path:
    """Run all stages; returns the manifest path.

    On a stage failure the manifest is still written, flagged failed with
    the completed stages listed, and a StageError is raised.
    """
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    inputs = {}
    for name, path in (
        ("corpus", cfg.corpus),
        ("embeddings", cfg.embeddings),
        ("generated", cfg.generated),
        ("generated_labels", cfg.generated_labels),
        ("generated_entities", cfg.generated_entities),
    ):
        if path is not None:
            if not Path(path).exists():
                raise ValidationError(f"input file {path} does not exist")
            inputs[name] = {"path": str(path), "sha256": sha256_file(path)}
    manifest: dict = {
        "tool": "sei",
        "version": __version__,
        "config": cfg.echo(),
        "inputs": inputs,
        "stages": [],
        "status": "ok",
    }
    for stage in STAGE_ORDER:
        try:
            artifact = _STAGE_FUNCS[stage](cfg)
        except (ToolkitError, OSError) as exc:
            manifest["status"] = "failed"
            manifest["failed_stage"] = stage
            _dump_json(_manifest_path(cfg), manifest)
            raise StageError(stage, exc) from exc
        manifest["stages"].append(
            {
                "name": stage,
                "artifacts": [
                    {"path": artifact.name, "sha256": sha256_file(artifact)}
                ],
            }
        )
    _dump_json(_manifest_path(cfg), manifest)
    return _manifest_path(cfg)
