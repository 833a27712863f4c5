"""End-to-end invariant checks on a throwaway 2-layer model."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from . import nn
from .corpus import Grammar, sample_corpus
from .model import (
    ModelConfig,
    forward_injected,
    forward_plain,
    forward_graph,
    init_weights,
    load_weights,
    masked_cross_entropy,
    mlm_loss_and_grads,
    save_weights,
)
from .probe import ALL_CONDITIONS, ProbeCondition, probe_sentence, lor, run_comparison, COMPARISONS
from .syntax import DepSentence, RelationCategory, Word, classify_relation, structural_distance
from .tokenizer import MASK_ID, default_vocab, tokenize
from .trainer import TrainConfig, train


def gradient_check(weights, ids, targets, flags, eps=1e-5):
    """Worst per-parameter relative error (norm-wise, denominator floored at 1e-5)."""
    weights.zero_grad()
    mlm_loss_and_grads(weights, ids, targets, flags)

    def loss():
        return masked_cross_entropy(forward_graph(weights, ids).logits, targets, flags)[0]

    worst = 0.0
    for p in weights:
        flat = p.value.reshape(-1)
        num = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss()
            flat[i] = orig - eps
            down = loss()
            flat[i] = orig
            num[i] = (up - down) / (2 * eps)
        ana = p.grad.reshape(-1)
        denom = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-5)
        worst = max(worst, float(np.linalg.norm(ana - num) / denom))
    weights.zero_grad()
    return worst


def example_parse():
    return DepSentence("ex1", (
        Word("Buddy", 2, "nsubj"), Word("chased", 0, "root"),
        Word("the", 4, "det"), Word("cat", 2, "dobj"),
    ))


def run_selftest(workdir, seed=0, report=print) -> bool:
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    vocab = default_vocab()
    results = []

    def check(name, ok, detail=""):
        results.append(bool(ok))
        report(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" ({detail})" if detail else ""))

    rows = rng.uniform(-50, 50, size=(1000, 17))
    check("softmax rows sum to 1", np.abs(nn.softmax_rows(rows).sum(axis=1) - 1).max() < 1e-12)

    gcfg = ModelConfig(n_layers=2, n_heads=2, hidden=8, ff_dim=16, vocab_size=13, max_positions=6)
    gw = init_weights(gcfg, rng, std=0.3)
    ids = rng.integers(0, 13, size=(2, 5))
    err = gradient_check(gw, ids, rng.integers(0, 13, size=(2, 5)), rng.random((2, 5)) < 0.5)
    check("gradient matches finite differences", err < 1e-4, f"max rel err {err:.2e}")

    grammar = Grammar.default()
    corpus = sample_corpus(grammar, 32, seed)
    toks = [tokenize(s.forms, vocab) for s in corpus]
    cfg = ModelConfig(n_layers=2, n_heads=2, hidden=16, ff_dim=32, vocab_size=len(vocab), max_positions=24)
    w, _ = train(init_weights(cfg, rng), [t.ids for t in toks], TrainConfig(steps=20, batch_size=8, seed=seed))

    diffs = []
    for t in toks:
        out, cap = forward_plain(w, t.ids)
        diffs.append(max(np.abs(forward_injected(w, t.ids, p, cap).logits - out.logits).max()
                         for p in t.content_positions))
    check("injection no-op", max(diffs) < 1e-12, f"max diff {max(diffs):.1e}")

    ref = forward_plain(w, [MASK_ID], use_positions=False)[0].log_probs[0]
    dev = max(np.abs(forward_plain(w, [MASK_ID] * n, use_positions=False)[0].log_probs - ref).max()
              for n in range(1, 11))
    check("lexical prior invariant across positions and lengths", dev < 1e-9, f"max diff {dev:.1e}")

    t = toks[0]
    src = t.content_positions[0]
    ids = np.full(len(t), MASK_ID)
    ids[src] = t.ids[src]
    lp = forward_plain(w, ids, use_positions=False)[0].log_probs
    masked = [i for i in range(len(t)) if i != src]
    dev = np.abs(lp[masked] - lp[masked[0]]).max()
    check("static -position masked outputs exchangeable", dev < 1e-9, f"max diff {dev:.1e}")

    recs = probe_sentence("t0", t, w, ALL_CONDITIONS)
    m = len(t.content_positions)
    counts_ok = all(
        sum(r.condition is c for r in recs) == (m * (m - 1) if c.has_source else m) for c in ALL_CONDITIONS
    )
    check("record counts n(n-1) / n", counts_ok)
    comp = {c.name: dict(run_comparison(recs, c).rows) for c in COMPARISONS}
    a = comp["AllMaskMinusPos->FullyContextualized"]
    b = comp["StaticPlusPos->FullyContextualized"]
    base_mid = {k: lor(*pair) for k, pair in _static_vs_prior(recs).items()}
    chain = max(abs(base_mid[k] + b[k] - a[k]) for k in a)
    check("LOR telescoping", chain < 1e-9, f"max gap {chain:.1e}")
    check("LOR(0.9, 0.1) = ln 81",
          abs(lor((math.log(0.9), math.log(0.1)), (math.log(0.1), math.log(0.9))) - math.log(81)) < 1e-12)

    parse = example_parse()
    tk = tokenize(parse.forms, vocab)
    pos = {p: i for i, p in enumerate(tk.pieces)}
    wo = tk.word_of
    cases = [
        (classify_relation(pos["chased"], pos["cat"], wo, parse), RelationCategory.SOURCE_IS_HEAD),
        (classify_relation(pos["chased"], pos["the"], wo, parse), RelationCategory.SOURCE_IS_ANCESTOR),
        (classify_relation(pos["Bud"], pos["##dy"], wo, parse), RelationCategory.SUBWORD),
        (classify_relation(pos["Bud"], pos["the"], wo, parse), RelationCategory.NO_RELATION),
        (structural_distance(pos["the"], pos["chased"], wo, parse), 2),
    ]
    check("syntax worked examples", all(got == want for got, want in cases))

    path = workdir / "selftest.rpw"
    save_weights(w, path)
    back = load_weights(path)
    check("weight container round trip",
          all(np.array_equal(p.value, back.params[p.name].value) for p in w))
    path.unlink()
    return all(results)


def _static_vs_prior(records):
    """(augmented, base) log-prob pairs keyed by pair for AllMaskMinusPos -> StaticPlusPos."""
    prior = {(r.sentence_id, r.recon): (r.log_p, r.log_1mp)
             for r in records if r.condition is ProbeCondition.ALL_MASK_MINUS_POS}
    return {(r.sentence_id, r.source, r.recon): ((r.log_p, r.log_1mp), prior[(r.sentence_id, r.recon)])
            for r in records if r.condition is ProbeCondition.STATIC_PLUS_POS}
