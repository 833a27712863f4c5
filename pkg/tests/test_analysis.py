import numpy as np
import pytest

from reconprobe.analysis import (
    Annotation,
    Dimension,
    aggregate,
    annotate_corpus,
    bootstrap_ci,
    extreme_pairs,
    group_value,
    top_k_hit_rate,
)
from reconprobe.probe import ProbeCondition, probe_corpus, run_comparison, COMPARISONS
from reconprobe.syntax import FunctionalRelationTable, RelationCategory
from reconprobe.tokenizer import tokenize

R = RelationCategory


def _ann(rel, linear=1, structural=1, deprel="none", functional="NotFunctional"):
    return Annotation(rel, deprel, functional, linear, structural)


def test_single_group_mean_and_count():
    rows = [(("s", 1, i), v) for i, v in enumerate([0.5, 1.5, -1.0, 3.0], start=2)]
    anns = {k: _ann(R.NO_RELATION, structural=None) for k, _ in rows}
    (stat,) = aggregate(rows, anns, Dimension.RELATION, "c")
    assert stat.key == "NoRelation" and stat.count == 4
    assert stat.mean == pytest.approx(1.0, abs=1e-15)
    assert stat.ci_low <= stat.mean <= stat.ci_high


def test_bootstrap_deterministic_and_seed_sensitive():
    vals = np.random.default_rng(0).normal(size=300)
    assert bootstrap_ci(vals, 1000, 5) == bootstrap_ci(vals, 1000, 5)
    assert bootstrap_ci(vals, 1000, 5) != bootstrap_ci(vals, 1000, 6)
    # chunking does not change the resamples
    assert bootstrap_ci(vals, 1000, 5, chunk=7) == bootstrap_ci(vals, 1000, 5)


def test_bootstrap_single_value():
    assert bootstrap_ci([2.5], 1000, 0) == (2.5, 2.5, 2.5)


def test_synthetic_head_pairs_separate():
    rng = np.random.default_rng(0)
    rows, anns = [], {}
    for i in range(400):
        k = ("s", i, i + 1)
        head = i % 2 == 0
        rows.append((k, (1.0 if head else 0.0) + rng.normal(0, 0.05)))
        anns[k] = _ann(R.SOURCE_IS_HEAD if head else R.NO_RELATION, structural=1 if head else None)
    stats = {s.key: s for s in aggregate(rows, anns, Dimension.RELATION, "c")}
    head, none = stats["SourceIsHead"], stats["NoRelation"]
    assert head.mean == pytest.approx(1.0, abs=0.02)
    assert none.mean == pytest.approx(0.0, abs=0.02)
    assert head.ci_low > none.ci_high


def test_include_direct_folds_heads_into_ancestors():
    a = _ann(R.RECON_IS_HEAD)
    assert group_value(a, Dimension.RELATION) == "ReconIsHead"
    assert group_value(a, Dimension.RELATION, include_direct=True) == "ReconIsAncestor"
    assert group_value(_ann(R.SUBWORD, structural=None), Dimension.STRUCTURAL) == "undefined"
    assert group_value(_ann(R.NO_RELATION, linear=40, structural=None), Dimension.LINEAR) == "16+"
    assert group_value(_ann(R.SOURCE_IS_ANCESTOR, structural=12), Dimension.STRUCTURAL) == "9+"


def test_missing_annotation_is_error():
    with pytest.raises(KeyError):
        aggregate([(("s", 1, 2), 0.0)], {}, Dimension.RELATION, "c")


def test_partitions_exhaustive_on_real_records(toy_model, toy_corpus, vocab):
    tok = {s.sent_id: tokenize(s.forms, vocab) for s in toy_corpus[:20]}
    parses = {s.sent_id: s for s in toy_corpus[:20]}
    recs, _ = probe_corpus(tok.items(), toy_model)
    table = FunctionalRelationTable.default()
    for spec in COMPARISONS:
        res = run_comparison(recs, spec)
        anns = annotate_corpus(tok, parses, table, [k for k, _ in res.rows])
        for dim in Dimension:
            for include in (False, True):
                stats = aggregate(res.rows, anns, dim, spec.name, include, n_boot=50)
                assert sum(s.count for s in stats) == len(res.rows)
                assert len({s.key for s in stats}) == len(stats)


def test_top_k():
    assert top_k_hit_rate([1, 4, 12], 10) == pytest.approx(2 / 3)
    ranks = np.random.default_rng(0).integers(1, 50, size=200)
    rates = [top_k_hit_rate(ranks, k) for k in range(1, 51)]
    assert rates == sorted(rates) and rates[-1] == 1.0
    with pytest.raises(ValueError):
        top_k_hit_rate(ranks, 0)


def test_top_k_on_model(toy_model, vocab):
    t = tokenize("the dog chased Buddy".split(), vocab)
    _, ranks = probe_corpus([("a", t)], toy_model, [ProbeCondition.FULLY_CONTEXTUALIZED])
    assert top_k_hit_rate(ranks.values(), len(vocab)) == 1.0


def test_top_k_dominant_logit_is_hit():
    from reconprobe.probe import target_ranks

    logits = np.zeros((1, 9))
    logits[0, 6] = 50.0
    assert top_k_hit_rate(target_ranks(logits, np.array([6])), 1) == 1.0


def test_extreme_pairs():
    rows = [(("a", 1, 2), 0.5), (("a", 2, 1), 10.0), (("b", 1, 3), -4.0)]
    assert extreme_pairs(rows, "helpful", 0) == []
    assert extreme_pairs(rows, "helpful", 1)[0]["lor"] == 10.0
    assert extreme_pairs(rows, "harmful", 1)[0]["sentence_id"] == "b"
    assert len(extreme_pairs(rows, "helpful", 100)) == 3
    ties = [(("b", 1, 2), 1.0), (("a", 3, 1), 1.0), (("a", 1, 3), 1.0)]
    keys = [(p["sentence_id"], p["source_idx"], p["recon_idx"]) for p in extreme_pairs(ties)]
    assert keys == sorted(k for k, _ in ties)


def test_extreme_pairs_context(vocab):
    from reconprobe.selftest import example_parse

    t = tokenize(example_parse().forms, vocab)
    (item,) = extreme_pairs([(("ex1", 3, 5), 2.0)], "helpful", 5, {"ex1": t}, {"ex1": example_parse()})
    assert item["source"] == "chased" and item["recon"] == "cat"
    assert item["sentence"] == "Buddy chased the cat"
