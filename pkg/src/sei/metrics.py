"""Report evaluation: BLEU, ROUGE-L, micro-F1 label scoring, entity F1.

References may be truncated to a target length while generated reports stay
untouched, so corpora can be scored both against concise excerpts and
against complete reference reports.  BLEU is corpus-level and unsmoothed;
ROUGE-L is a per-pair LCS F-measure (beta = 1.2) averaged over pairs.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import ValidationError

__all__ = [
    "LABELS14",
    "CX5_INDICES",
    "EvalPair",
    "truncate_reference",
    "corpus_bleu",
    "rouge_l",
    "micro_f1",
    "entity_f1",
    "score_corpus",
    "M_GT_CHOICES",
]

# CheXbert condition order; the five-label subset follows common usage.
LABELS14 = (
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Opacity",
    "Lung Lesion",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
    "No Finding",
)
CX5_INDICES = (1, 4, 5, 7, 9)  # Cardiomegaly, Edema, Consolidation, Atelectasis, Pleural Effusion

M_GT_CHOICES = (60, 80, 90, 100, math.inf)


@dataclass(frozen=True)
class EvalPair:
    """One generated/reference token-list pair; truncation hits the reference only."""

    generated: tuple[str, ...]
    reference: tuple[str, ...]
    reference_truncated_at: float = math.inf

    def __post_init__(self):
        object.__setattr__(self, "generated", tuple(self.generated))
        object.__setattr__(self, "reference", tuple(self.reference))


def truncate_reference(tokens: Sequence[str], m_gt: float) -> tuple[str, ...]:
    """First min(m_gt, len) tokens; infinity means the complete reference."""
    toks = tuple(tokens)
    if m_gt == math.inf:
        return toks
    if m_gt < 0 or m_gt != int(m_gt):
        raise ValidationError(f"m_gt must be a non-negative integer or infinity, got {m_gt}")
    return toks[: int(m_gt)]


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(pairs: Sequence[EvalPair], n: int) -> float:
    """Corpus-level BLEU-n: clipped precision geometric mean times brevity penalty.

    Uniform weights 1/n and no smoothing, so any empty n-gram precision
    zeroes the score.  An empty generated corpus scores 0.
    """
    if not pairs:
        raise ValidationError("corpus_bleu requires at least one pair")
    if n < 1:
        raise ValidationError(f"n-gram order must be >= 1, got {n}")
    clipped = [0] * n
    totals = [0] * n
    gen_len = 0
    ref_len = 0
    for pair in pairs:
        gen_len += len(pair.generated)
        ref_len += len(pair.reference)
        for order in range(1, n + 1):
            gen_counts = _ngram_counts(pair.generated, order)
            ref_counts = _ngram_counts(pair.reference, order)
            clipped[order - 1] += sum(min(c, ref_counts[g]) for g, c in gen_counts.items())
            totals[order - 1] += sum(gen_counts.values())
    if gen_len == 0:
        return 0.0
    if any(t == 0 for t in totals) or any(c == 0 for c in clipped):
        return 0.0
    log_precision = sum(math.log(c / t) for c, t in zip(clipped, totals)) / n
    brevity = 1.0 if gen_len > ref_len else math.exp(1.0 - ref_len / gen_len)
    return brevity * math.exp(log_precision)


def _lcs_len(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for tok_a in a:
        cur = [0] * (len(b) + 1)
        for j, tok_b in enumerate(b, 1):
            if tok_a == tok_b:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(pairs: Sequence[EvalPair], beta: float = 1.2) -> float:
    """Mean per-pair LCS F-measure; a pair with an empty reference scores 0."""
    if not pairs:
        raise ValidationError("rouge_l requires at least one pair")
    beta_sq = beta * beta
    scores = []
    for pair in pairs:
        if not pair.reference or not pair.generated:
            scores.append(0.0)
            continue
        lcs = _lcs_len(pair.generated, pair.reference)
        if lcs == 0:
            scores.append(0.0)
            continue
        precision = lcs / len(pair.generated)
        recall = lcs / len(pair.reference)
        scores.append((1 + beta_sq) * recall * precision / (recall + beta_sq * precision))
    return sum(scores) / len(scores)


def _validate_label_vector(vec: Sequence[int], what: str) -> tuple[int, ...]:
    values = tuple(int(v) for v in vec)
    if len(values) != 14:
        raise ValidationError(f"{what} has {len(values)} entries, expected 14")
    if any(v not in (0, 1) for v in values):
        raise ValidationError(f"{what} entries must be 0 or 1")
    return values


def micro_f1(
    pred: Sequence[Sequence[int]],
    gold: Sequence[Sequence[int]],
    subset: Sequence[int] | None = None,
) -> float:
    """Micro-averaged F1 over the selected label positions (all 14 by default).

    F1 = 2TP / (2TP + FP + FN), or 0 when that denominator is 0.
    """
    if len(pred) != len(gold):
        raise ValidationError(f"pred has {len(pred)} studies but gold has {len(gold)}")
    positions = tuple(range(14)) if subset is None else tuple(subset)
    if any(p < 0 or p >= 14 for p in positions):
        raise ValidationError(f"label subset {positions} out of range")
    tp = fp = fn = 0
    for row, (p_vec, g_vec) in enumerate(zip(pred, gold)):
        p = _validate_label_vector(p_vec, f"pred row {row}")
        g = _validate_label_vector(g_vec, f"gold row {row}")
        for pos in positions:
            if p[pos] and g[pos]:
                tp += 1
            elif p[pos]:
                fp += 1
            elif g[pos]:
                fn += 1
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def _entity_key(entry) -> tuple[str, str]:
    text, label = entry
    label_str = getattr(label, "value", label)
    return (str(text).lower(), str(label_str))


def entity_f1(gen_entities: Iterable, ref_entities: Iterable) -> float:
    """Exact-match F1 on (lowercased text, label) pairs.

    Both sides empty count as perfect vacuous agreement (1.0); exactly one
    empty side scores 0.
    """
    gen = {_entity_key(e) for e in gen_entities}
    ref = {_entity_key(e) for e in ref_entities}
    if not gen and not ref:
        return 1.0
    if not gen or not ref:
        return 0.0
    tp = len(gen & ref)
    if tp == 0:
        return 0.0
    precision = tp / len(gen)
    recall = tp / len(ref)
    return 2 * precision * recall / (precision + recall)


def score_corpus(
    pairs: Sequence[EvalPair],
    labels: Sequence[tuple[Sequence[int], Sequence[int]]] | None = None,
    entities: Sequence[tuple[Iterable, Iterable]] | None = None,
    m_gt: float = math.inf,
) -> dict[str, float]:
    """Score a corpus at one reference-truncation setting.

    ``labels`` holds (predicted, gold) 14-label vectors per study and
    ``entities`` holds (generated, reference) entity sets; metrics whose
    inputs are absent are omitted from the report, never zeroed.
    """
    if not pairs:
        raise ValidationError("score_corpus requires at least one pair")
    if labels is not None and len(labels) != len(pairs):
        raise ValidationError(f"{len(labels)} label rows for {len(pairs)} pairs")
    if entities is not None and len(entities) != len(pairs):
        raise ValidationError(f"{len(entities)} entity rows for {len(pairs)} pairs")
    truncated = [
        EvalPair(
            generated=pair.generated,
            reference=truncate_reference(pair.reference, m_gt),
            reference_truncated_at=m_gt,
        )
        for pair in pairs
    ]
    report = {
        "BL-2": corpus_bleu(truncated, 2),
        "BL-4": corpus_bleu(truncated, 4),
        "R_L": rouge_l(truncated),
    }
    if labels is not None:
        pred = [row[0] for row in labels]
        gold = [row[1] for row in labels]
        report["CX14"] = micro_f1(pred, gold)
        report["CX5"] = micro_f1(pred, gold, subset=CX5_INDICES)
    if entities is not None:
        report["RG-F1"] = sum(entity_f1(gen, ref) for gen, ref in entities) / len(entities)
    return report
