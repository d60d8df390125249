"""Exact top-K dot-product retrieval over dense study embeddings.

Scores are plain dot products (cosine once rows and query are unit length,
which is the default).  Two implementations share one contract:
``top_k_naive`` scans and fully sorts, while ``top_k`` walks the matrix in
blocks and keeps a bounded best-K candidate set.  Both order ties by row
insertion order, so results are reproducible bit for bit.

Indexes serialize to a small binary format: magic "SEIX", u32 version,
u32 n, u32 d, u8 normalized flag, length-prefixed UTF-8 ids, then the
row-major little-endian float32 matrix.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import StudyRecord
from .errors import CorpusError, ValidationError
from .see import see_extract

__all__ = [
    "EmbeddingIndex",
    "RetrievalResult",
    "SimilarCase",
    "build_index",
    "top_k",
    "top_k_naive",
    "attach_shc",
    "save_index",
    "load_index",
]

_MAGIC = b"SEIX"
_VERSION = 1
_BLOCK_ROWS = 4096


@dataclass
class EmbeddingIndex:
    """Immutable id-addressed dense-vector store."""

    dim: int
    ids: tuple[str, ...]
    matrix: np.ndarray  # (n, dim) float64
    normalized: bool
    _row_of: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.matrix.shape != (len(self.ids), self.dim):
            raise ValidationError(
                f"index matrix shape {self.matrix.shape} does not match "
                f"{len(self.ids)} ids of dimension {self.dim}"
            )
        self._row_of = {}
        for row, sid in enumerate(self.ids):
            if sid in self._row_of:
                raise ValidationError(f"duplicate study_id {sid!r} in index")
            self._row_of[sid] = row
        if self.normalized:
            norms = np.linalg.norm(self.matrix, axis=1)
            if not np.allclose(norms, 1.0, atol=1e-6):
                raise ValidationError("index flagged normalized but rows are not unit length")
        self.matrix.setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.ids)

    def row_of(self, study_id: str) -> int | None:
        return self._row_of.get(study_id)


@dataclass(frozen=True)
class RetrievalResult:
    """Top-K hits for one query, scores non-increasing, query excluded."""

    query_id: str | None
    hits: tuple[tuple[str, float], ...]


@dataclass(frozen=True)
class SimilarCase:
    """One retrieved historical case: id, score, and its factual sequence."""

    study_id: str
    score: float
    factual_sequence: str


def build_index(records: Sequence[StudyRecord], normalize: bool = True) -> EmbeddingIndex:
    """Build an index over exactly the given records.

    Every record must carry an embedding of one shared dimension; rows are
    L2-normalized iff ``normalize``.
    """
    if not records:
        raise ValidationError("cannot build an index from zero records")
    dim: int | None = None
    rows = []
    ids = []
    for rec in records:
        if rec.embedding is None:
            raise ValidationError(f"study {rec.study_id!r} has no embedding")
        if dim is None:
            dim = len(rec.embedding)
        elif len(rec.embedding) != dim:
            raise ValidationError(
                f"study {rec.study_id!r} has embedding dimension {len(rec.embedding)} "
                f"but the index dimension is {dim}"
            )
        ids.append(rec.study_id)
        rows.append(rec.embedding)
    matrix = np.asarray(rows, dtype=np.float64)
    if normalize:
        norms = np.linalg.norm(matrix, axis=1)
        zero = np.nonzero(norms == 0.0)[0]
        if zero.size:
            raise ValidationError(
                f"study {ids[int(zero[0])]!r} has a zero-norm embedding; cannot normalize"
            )
        matrix = matrix / norms[:, None]
    return EmbeddingIndex(dim=int(dim), ids=tuple(ids), matrix=matrix, normalized=normalize)


def _prepare_query(index: EmbeddingIndex, query: np.ndarray) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != index.dim:
        raise ValidationError(
            f"query has dimension {q.shape[0] if q.ndim == 1 else q.shape} "
            f"but the index dimension is {index.dim}"
        )
    if index.normalized:
        norm = float(np.linalg.norm(q))
        if norm == 0.0:
            raise ValidationError("cannot normalize a zero-norm query")
        q = q / norm
    return q


def _result(index: EmbeddingIndex, rows: np.ndarray, scores: np.ndarray, query_id) -> RetrievalResult:
    hits = tuple((index.ids[int(r)], float(s)) for r, s in zip(rows, scores))
    return RetrievalResult(query_id=query_id, hits=hits)


def top_k(
    index: EmbeddingIndex,
    query: np.ndarray,
    k: int,
    exclude_id: str | None = None,
) -> RetrievalResult:
    """Exact top-k by dot product with a blocked, bounded candidate merge.

    Scores come from one matrix-vector product (so they are bit-identical to
    the naive scan's); selection then walks the score vector in blocks and
    keeps at most k candidates, never sorting more than a block at a time.
    Ties break toward the earlier row; ``exclude_id`` never appears; asking
    for more hits than candidates returns all of them.
    """
    if k < 0:
        raise ValidationError(f"k must be >= 0, got {k}")
    q = _prepare_query(index, query)
    if k == 0:
        return RetrievalResult(query_id=exclude_id, hits=())
    all_scores = index.matrix @ q
    skip = index.row_of(exclude_id) if exclude_id is not None else None
    best_rows = np.empty(0, dtype=np.int64)
    best_scores = np.empty(0, dtype=np.float64)
    for start in range(0, index.n, _BLOCK_ROWS):
        stop = min(start + _BLOCK_ROWS, index.n)
        scores = all_scores[start:stop]
        rows = np.arange(start, stop, dtype=np.int64)
        if skip is not None and start <= skip < stop:
            keep = rows != skip
            rows = rows[keep]
            scores = scores[keep]
        cand_rows = np.concatenate([best_rows, rows])
        cand_scores = np.concatenate([best_scores, scores])
        order = np.lexsort((cand_rows, -cand_scores))[:k]
        best_rows = cand_rows[order]
        best_scores = cand_scores[order]
    return _result(index, best_rows, best_scores, exclude_id)


def top_k_naive(
    index: EmbeddingIndex,
    query: np.ndarray,
    k: int,
    exclude_id: str | None = None,
) -> RetrievalResult:
    """Reference implementation: full scan, full sort.  Same contract as top_k."""
    if k < 0:
        raise ValidationError(f"k must be >= 0, got {k}")
    q = _prepare_query(index, query)
    scores = index.matrix @ q
    rows = np.arange(index.n, dtype=np.int64)
    skip = index.row_of(exclude_id) if exclude_id is not None else None
    if skip is not None:
        keep = rows != skip
        rows = rows[keep]
        scores = scores[keep]
    order = np.lexsort((rows, -scores))[:k]
    return _result(index, rows[order], scores[order], exclude_id)


def attach_shc(
    records: Sequence[StudyRecord],
    index: EmbeddingIndex,
    k: int,
    sequences: Mapping[str, str] | None = None,
) -> list[tuple[StudyRecord, tuple[SimilarCase, ...]]]:
    """Pair each record with its top-k similar *other* studies.

    Every record must be present in the index (its own id is excluded from
    its results).  ``sequences`` maps study_id to a rendered factual
    sequence; when omitted it is computed from the records themselves.
    """
    if sequences is None:
        sequences = {rec.study_id: see_extract(rec).rendered for rec in records}
    out = []
    for rec in records:
        if rec.embedding is None:
            raise ValidationError(f"study {rec.study_id!r} has no embedding")
        if index.row_of(rec.study_id) is None:
            raise ValidationError(f"study {rec.study_id!r} is not indexed")
        result = top_k(index, np.asarray(rec.embedding, dtype=np.float64), k, exclude_id=rec.study_id)
        cases = tuple(
            SimilarCase(study_id=sid, score=score, factual_sequence=sequences[sid])
            for sid, score in result.hits
        )
        out.append((rec, cases))
    return out


def save_index(index: EmbeddingIndex, path: str | Path) -> None:
    """Write the binary index format described in the module docstring."""
    parts = [struct.pack("<4sIIIB", _MAGIC, _VERSION, index.n, index.dim, int(index.normalized))]
    for sid in index.ids:
        raw = sid.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    parts.append(np.ascontiguousarray(index.matrix, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_index(path: str | Path) -> EmbeddingIndex:
    """Read an index written by save_index; the matrix loads as float64."""
    blob = Path(path).read_bytes()
    header_size = struct.calcsize("<4sIIIB")
    if len(blob) < header_size:
        raise CorpusError(f"{path}: index file truncated")
    magic, version, n, dim, normalized = struct.unpack_from("<4sIIIB", blob, 0)
    if magic != _MAGIC:
        raise CorpusError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
    if version != _VERSION:
        raise CorpusError(f"{path}: unsupported index version {version}")
    offset = header_size
    ids = []
    for _ in range(n):
        if offset + 4 > len(blob):
            raise CorpusError(f"{path}: index file truncated in id table")
        (length,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if offset + length > len(blob):
            raise CorpusError(f"{path}: index file truncated in id table")
        ids.append(blob[offset : offset + length].decode("utf-8"))
        offset += length
    expected = n * dim * 4
    if len(blob) - offset != expected:
        raise CorpusError(
            f"{path}: matrix payload is {len(blob) - offset} bytes, expected {expected}"
        )
    matrix = np.frombuffer(blob, dtype="<f4", count=n * dim, offset=offset)
    matrix = matrix.reshape(n, dim).astype(np.float64)
    return EmbeddingIndex(dim=dim, ids=tuple(ids), matrix=matrix, normalized=bool(normalized))
