"""Reconstruction probing.

For a tokenized sentence, each probe condition masks every position except
(at most) one source token and reads the model's log probability of the
original token at every other content position. Log odds ratios between
two conditions measure how much the extra information in the augmented
condition helps reconstruction.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConditionError, FormatError, LengthError
from .model import CapturedStates, WeightSet, batch_target_log_probs, forward_injected, forward_plain
from .tokenizer import MASK_ID, TokenizedSentence


class ProbeCondition(str, Enum):
    FULLY_CONTEXTUALIZED = "FullyContextualized"
    STATIC_PLUS_POS = "StaticPlusPos"
    STATIC_MINUS_POS = "StaticMinusPos"
    ALL_MASK_PLUS_POS = "AllMaskPlusPos"
    ALL_MASK_MINUS_POS = "AllMaskMinusPos"

    @property
    def has_source(self):
        return self not in (ProbeCondition.ALL_MASK_PLUS_POS, ProbeCondition.ALL_MASK_MINUS_POS)

    @property
    def use_positions(self):
        return self not in (ProbeCondition.STATIC_MINUS_POS, ProbeCondition.ALL_MASK_MINUS_POS)


ALL_CONDITIONS = tuple(ProbeCondition)
_CONDITION_ORDER = {c: i for i, c in enumerate(ALL_CONDITIONS)}


@dataclass(frozen=True)
class ProbeRecord:
    sentence_id: str
    condition: ProbeCondition
    source: int | None
    recon: int
    log_p: float
    log_1mp: float

    def sort_key(self):
        return (self.sentence_id, _CONDITION_ORDER[self.condition],
                -1 if self.source is None else self.source, self.recon)


@dataclass(frozen=True)
class ComparisonSpec:
    base: ProbeCondition
    augmented: ProbeCondition
    description: str = ""

    @property
    def name(self):
        return f"{self.base.value}->{self.augmented.value}"


C = ProbeCondition
COMPARISONS = (
    ComparisonSpec(C.ALL_MASK_MINUS_POS, C.ALL_MASK_PLUS_POS,
                   "Effect of positional information without lexical information beyond the lexical prior."),
    ComparisonSpec(C.ALL_MASK_MINUS_POS, C.STATIC_MINUS_POS,
                   "Effect of static lexical information without positional information."),
    ComparisonSpec(C.ALL_MASK_PLUS_POS, C.STATIC_PLUS_POS,
                   "Effect of static lexical information with positional information."),
    ComparisonSpec(C.STATIC_MINUS_POS, C.STATIC_PLUS_POS,
                   "Effect of positional information given the static source token."),
    ComparisonSpec(C.STATIC_PLUS_POS, C.FULLY_CONTEXTUALIZED,
                   "Effect of contextualization through the layers, beyond the input layer."),
    ComparisonSpec(C.ALL_MASK_MINUS_POS, C.FULLY_CONTEXTUALIZED,
                   "Overall change from the lexical prior to the fully contextualized source."),
)
del C


def comparison_by_name(name: str) -> ComparisonSpec:
    for spec in COMPARISONS:
        if spec.name == name:
            return spec
    raise ConditionError(f"unknown comparison {name!r}; expected one of {[c.name for c in COMPARISONS]}")


@dataclass
class ProbeInput:
    ids: np.ndarray
    use_positions: bool
    captured: CapturedStates | None = None
    source: int | None = None


def _check_source(sentence, condition, source):
    if condition.has_source:
        if source is None:
            raise ConditionError(f"{condition.value} requires a source position")
        if not 0 <= source < len(sentence) or sentence.word_of[source] is None:
            raise ConditionError(f"source {source} is not a content position")
    elif source is not None:
        raise ConditionError(f"{condition.value} takes no source position")


def build_probe_input(sentence: TokenizedSentence, condition: ProbeCondition, source=None,
                      weights: WeightSet | None = None, captured: CapturedStates | None = None) -> ProbeInput:
    """Input ids, positional flag and (for full contextualization) the captured
    states of the unmasked sentence. Special tokens are masked like the rest."""
    condition = ProbeCondition(condition)
    _check_source(sentence, condition, source)
    ids = np.full(len(sentence), MASK_ID, dtype=np.int64)
    if condition.has_source:
        ids[source] = sentence.ids[source]
    if condition is ProbeCondition.FULLY_CONTEXTUALIZED and captured is None:
        if weights is None:
            raise ConditionError("FullyContextualized needs weights or captured states")
        captured = forward_plain(weights, np.asarray(sentence.ids))[1]
    if condition is not ProbeCondition.FULLY_CONTEXTUALIZED:
        captured = None
    return ProbeInput(ids, condition.use_positions, captured, source)


def _source_batch(sentence, positions):
    ids = np.full((len(positions), len(sentence)), MASK_ID, dtype=np.int64)
    orig = np.asarray(sentence.ids)
    ids[np.arange(len(positions)), positions] = orig[positions]
    return ids


def target_ranks(logits, tokens):
    """1-based rank of each target among its row's logits; ties go to the lower id."""
    sel = np.take_along_axis(logits, tokens[..., None], axis=-1)
    ids = np.arange(logits.shape[-1])
    better = (logits > sel) | ((logits == sel) & (ids < tokens[..., None]))
    return better.sum(axis=-1) + 1


def probe_sentence(sentence_id: str, sentence: TokenizedSentence, weights: WeightSet,
                   conditions=ALL_CONDITIONS, with_ranks=False):
    """Records for every requested condition; optionally also the FullyContextualized
    ranks as (source, recon, rank) triples."""
    conditions = [ProbeCondition(c) for c in conditions]
    if len(sentence) > weights.config.max_positions:
        raise LengthError(f"sentence {sentence_id}: {len(sentence)} tokens > max_positions")
    pos = np.array(sentence.content_positions, dtype=np.int64)
    orig = np.asarray(sentence.ids, dtype=np.int64)
    m = len(pos)
    records, ranks = [], []
    if m == 0:
        return (records, ranks) if with_ranks else records

    # ordered (source, recon) pairs over content positions
    si, ri = np.nonzero(~np.eye(m, dtype=bool))
    batch_ids = _source_batch(sentence, pos)
    captured = None
    for cond in conditions:
        if cond.has_source:
            if m < 2:
                continue
            if cond is ProbeCondition.FULLY_CONTEXTUALIZED:
                if captured is None:
                    captured = forward_plain(weights, orig)[1]
                logits = forward_injected(weights, batch_ids, pos, captured).logits
            else:
                logits = forward_plain(weights, batch_ids, cond.use_positions)[0].logits
            tokens = orig[pos[ri]]
            lp, l1mp = batch_target_log_probs(logits, (si, pos[ri]), tokens)
            records.extend(
                ProbeRecord(sentence_id, cond, int(pos[a]), int(pos[b]), float(x), float(y))
                for a, b, x, y in zip(si, ri, lp, l1mp)
            )
            if with_ranks and cond is ProbeCondition.FULLY_CONTEXTUALIZED:
                rk = target_ranks(logits[si, pos[ri]], tokens)
                ranks.extend((int(pos[a]), int(pos[b]), int(r)) for a, b, r in zip(si, ri, rk))
        else:
            ids = np.full(len(sentence), MASK_ID, dtype=np.int64)
            logits = forward_plain(weights, ids, cond.use_positions)[0].logits
            lp, l1mp = batch_target_log_probs(logits, pos, orig[pos])
            records.extend(
                ProbeRecord(sentence_id, cond, None, int(p), float(x), float(y))
                for p, x, y in zip(pos, lp, l1mp)
            )
    return (records, ranks) if with_ranks else records


def collect_records(sentence_id, sentence, weights, conditions=ALL_CONDITIONS):
    return probe_sentence(sentence_id, sentence, weights, conditions)


def probe_corpus(items, weights, conditions=ALL_CONDITIONS, jobs=1):
    """Probe ``(sentence_id, TokenizedSentence)`` items, ``jobs`` sentences at a time.

    Returns (records sorted by (sentence, condition, source, recon), ranks
    dict keyed by (sentence, source, recon)).
    """
    items = list(items)

    def work(item):
        sid, sent = item
        return sid, probe_sentence(sid, sent, weights, conditions, with_ranks=True)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, items))
    else:
        results = [work(it) for it in items]
    records, ranks = [], {}
    for sid, (recs, rks) in results:
        records.extend(recs)
        for s, r, k in rks:
            ranks[(sid, s, r)] = k
    records.sort(key=ProbeRecord.sort_key)
    return records, ranks


def lor(p_rec, q_rec) -> float:
    """Log odds ratio of augmented (log p, log 1-p) over base (log q, log 1-q)."""
    (lp, l1p), (lq, l1q) = p_rec, q_rec
    return (lp - l1p) - (lq - l1q)


@dataclass
class ComparisonResult:
    spec: ComparisonSpec
    rows: list  # [((sentence_id, source, recon), lor)]
    skipped: int


def run_comparison(records, spec: ComparisonSpec) -> ComparisonResult:
    """Join augmented against base records per (sentence, source, recon).

    All-mask records have no source: as a base they serve every source of
    their recon position; as the augmented side they are expanded over all
    sources of the sentence so source-keyed breakdowns still apply.
    """
    base, aug = spec.base, spec.augmented
    base_idx, aug_recs = {}, []
    recon_positions = {}
    for r in records:
        if r.condition is base:
            key = (r.sentence_id, r.source, r.recon) if base.has_source else (r.sentence_id, r.recon)
            base_idx[key] = (r.log_p, r.log_1mp)
        if r.condition is aug:
            aug_recs.append(r)
            recon_positions.setdefault(r.sentence_id, set()).add(r.recon)

    rows, skipped = [], 0
    for r in aug_recs:
        if aug.has_source:
            pairs = [(r.source, r.recon)]
        else:
            pairs = [(s, r.recon) for s in sorted(recon_positions[r.sentence_id]) if s != r.recon]
        for s, rec in pairs:
            bkey = (r.sentence_id, s, rec) if base.has_source else (r.sentence_id, rec)
            q = base_idx.get(bkey)
            if q is None:
                skipped += 1
                continue
            rows.append(((r.sentence_id, s, rec), lor((r.log_p, r.log_1mp), q)))
    rows.sort(key=lambda kv: kv[0])
    return ComparisonResult(spec, rows, skipped)


RECORD_HEADER = ["sentence_id", "condition", "source_idx", "recon_idx", "log_p", "log_1mp"]


def write_records(records, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_HEADER)
        for r in sorted(records, key=ProbeRecord.sort_key):
            w.writerow([r.sentence_id, r.condition.value, "" if r.source is None else r.source,
                        r.recon, format(r.log_p, ".17g"), format(r.log_1mp, ".17g")])


def read_records(path):
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != RECORD_HEADER:
            raise FormatError(f"{path}: expected header {','.join(RECORD_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                sid, cond, src, rec, lp, l1 = row
                out.append(ProbeRecord(sid, ProbeCondition(cond), int(src) if src else None,
                                       int(rec), float(lp), float(l1)))
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from None
    return out


def complement_ok(record, tol=1e-12):
    return abs(math.exp(record.log_p) + math.exp(record.log_1mp) - 1.0) <= tol
