"""Group log odds ratios by syntactic annotation, with bootstrap CIs."""
from __future__ import annotations

import logging
import zlib
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from .syntax import (
    DepSentence,
    FunctionalDirection,
    RelationCategory,
    arc_between,
    classify_relation,
    functional_direction,
    linear_distance,
    structural_distance,
)
from .tokenizer import TokenizedSentence

log = logging.getLogger(__name__)

LINEAR_CAP = 16
STRUCTURAL_CAP = 9
N_BOOT = 1000


class Dimension(str, Enum):
    RELATION = "RelationCategory"
    DEPREL = "DeprelLabel"
    FUNCTIONAL = "FunctionalRelation"
    LINEAR = "LinearDistance"
    STRUCTURAL = "StructuralDistance"


@dataclass(frozen=True)
class Annotation:
    relation: RelationCategory
    deprel: str  # arc label, "subword", or "none"
    functional: str  # "<label>:<direction>" or "NotFunctional"
    linear: int
    structural: int | None


def annotate_pair(sentence: TokenizedSentence, parse: DepSentence, source, recon, table) -> Annotation:
    word_of = sentence.word_of
    rel = classify_relation(source, recon, word_of, parse)
    ws, wr = word_of[source], word_of[recon]
    if ws == wr:
        deprel, struct = "subword", None
    else:
        arc = arc_between(ws, wr, parse)
        deprel = arc[0] if arc else "none"
        struct = structural_distance(source, recon, word_of, parse)
    direction, label = functional_direction(source, recon, word_of, parse, table)
    functional = (f"{label}:{direction.value}" if direction is not FunctionalDirection.NOT_FUNCTIONAL
                  else direction.value)
    return Annotation(rel, deprel, functional, linear_distance(source, recon), struct)


def annotate_corpus(tokenized: dict, parses: dict, table, pairs) -> dict:
    """Annotations for (sentence_id, source, recon) keys."""
    return {k: annotate_pair(tokenized[k[0]], parses[k[0]], k[1], k[2], table) for k in pairs}


def linear_bucket(d):
    return str(d) if d < LINEAR_CAP else f"{LINEAR_CAP}+"


def structural_bucket(d):
    if d is None:
        return "undefined"
    return str(d) if d < STRUCTURAL_CAP else f"{STRUCTURAL_CAP}+"


def group_value(ann: Annotation, dimension: Dimension, include_direct=False) -> str:
    """Group label of one annotated pair. ``include_direct`` folds direct
    head/dependent arcs into the ancestor categories."""
    dimension = Dimension(dimension)
    if dimension is Dimension.RELATION:
        rel = ann.relation
        if include_direct:
            rel = {RelationCategory.SOURCE_IS_HEAD: RelationCategory.SOURCE_IS_ANCESTOR,
                   RelationCategory.RECON_IS_HEAD: RelationCategory.RECON_IS_ANCESTOR}.get(rel, rel)
        return rel.value
    if dimension is Dimension.DEPREL:
        return ann.deprel
    if dimension is Dimension.FUNCTIONAL:
        return ann.functional
    if dimension is Dimension.LINEAR:
        return linear_bucket(ann.linear)
    return structural_bucket(ann.structural)


def _order_key(dimension, value):
    if dimension is Dimension.RELATION:
        return (0, [c.value for c in RelationCategory].index(value), value)
    if dimension in (Dimension.LINEAR, Dimension.STRUCTURAL):
        if value == "undefined":
            return (2, 0, value)
        return (0, int(value.rstrip("+")), value)
    tail = value in ("none", "subword", FunctionalDirection.NOT_FUNCTIONAL.value)
    return (1 if tail else 0, 0, value)


def expected_groups(dimension):
    """Groups that always appear in reports for a dimension, even if empty."""
    if dimension is Dimension.RELATION:
        return [c.value for c in RelationCategory]
    if dimension is Dimension.LINEAR:
        return [linear_bucket(d) for d in range(1, LINEAR_CAP + 1)]
    if dimension is Dimension.STRUCTURAL:
        return [structural_bucket(d) for d in range(1, STRUCTURAL_CAP + 1)] + ["undefined"]
    return []


@dataclass(frozen=True)
class GroupStat:
    dimension: str
    key: str
    comparison: str
    count: int
    mean: float
    ci_low: float
    ci_high: float

    def to_dict(self):
        return asdict(self)


def bootstrap_ci(values, n_boot=N_BOOT, seed=0, level=0.95, chunk=100):
    """Percentile bootstrap CI of the mean; widened if needed to contain the mean."""
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    mean = float(values.mean())
    rng = np.random.default_rng(seed)
    means = np.empty(n_boot)
    step = max(1, min(chunk, 5_000_000 // max(n, 1)))
    for start in range(0, n_boot, step):
        k = min(step, n_boot - start)
        idx = rng.integers(0, n, size=(k, n))
        means[start:start + k] = values[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    return mean, min(float(lo), mean), max(float(hi), mean)


def _group_seed(seed, *parts):
    return [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32("|".join(parts).encode("utf-8"))]


def aggregate(rows, annotations, dimension, comparison: str, include_direct=False,
              n_boot=N_BOOT, seed=0) -> list[GroupStat]:
    """Mean LOR and bootstrap CI per group. ``rows`` is [(key, lor)], keys
    matching ``annotations``."""
    dimension = Dimension(dimension)
    groups: dict[str, list[float]] = {}
    for key, value in rows:
        ann = annotations.get(key)
        if ann is None:
            raise KeyError(f"no syntactic annotation for pair {key}")
        groups.setdefault(group_value(ann, dimension, include_direct), []).append(value)
    empty = [g for g in expected_groups(dimension) if g not in groups]
    if include_direct and dimension is Dimension.RELATION:
        empty = [g for g in empty if g not in (RelationCategory.SOURCE_IS_HEAD.value,
                                               RelationCategory.RECON_IS_HEAD.value)]
    if empty:
        log.info("%s/%s: %d empty group(s) omitted: %s", comparison, dimension.value, len(empty), ", ".join(empty))
    stats = []
    for g in sorted(groups, key=lambda v: _order_key(dimension, v)):
        mean, lo, hi = bootstrap_ci(groups[g], n_boot, _group_seed(seed, dimension.value, g, comparison))
        stats.append(GroupStat(dimension.value, g, comparison, len(groups[g]), mean, lo, hi))
    return stats


def top_k_hit_rate(ranks, k=10) -> float:
    """Fraction of pairs whose true recon token ranks within the top ``k``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ranks = np.asarray(list(ranks), dtype=np.int64)
    if ranks.size == 0:
        return float("nan")
    return float((ranks <= k).mean())


def extreme_pairs(rows, direction="helpful", n=100, tokenized=None, parses=None):
    """Top-``n`` pairs by signed LOR (descending for helpful, ascending for harmful)."""
    if direction not in ("helpful", "harmful"):
        raise ValueError("direction must be 'helpful' or 'harmful'")
    sign = -1.0 if direction == "helpful" else 1.0
    ranked = sorted(rows, key=lambda kv: (sign * kv[1], kv[0]))[: max(n, 0)]
    out = []
    for (sid, s, r), value in ranked:
        item = {"sentence_id": sid, "source_idx": s, "recon_idx": r, "lor": value}
        if tokenized is not None and sid in tokenized:
            item["source"] = tokenized[sid].pieces[s]
            item["recon"] = tokenized[sid].pieces[r]
        if parses is not None and sid in parses:
            item["sentence"] = parses[sid].text
        out.append(item)
    return out
