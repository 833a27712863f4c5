"""Seeded PCFG sampler producing sentences with gold dependency trees.

Each rule names its head child and gives arc labels for the other
children; a constituent's lexical head is its head child's lexical head,
and every non-head child's lexical head attaches to it.

Randomness comes from numpy's PCG64 generator seeded with the run seed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .syntax import DepSentence, Word, to_conllu
from .tokenizer import UNK, Vocab, split_word


@dataclass(frozen=True)
class Rule:
    lhs: str
    rhs: tuple[str, ...]
    prob: float
    head: int
    labels: tuple[str | None, ...]


class Grammar:
    def __init__(self, start, rules, lexicon, upos=None, max_depth=12):
        self.start = start
        self.max_depth = int(max_depth)
        self.rules: dict[str, list[Rule]] = {}
        for r in rules:
            self.rules.setdefault(r.lhs, []).append(r)
        self.lexicon = {pos: dict(words) for pos, words in lexicon.items()}
        self.upos = dict(upos or {})
        self._validate()
        self._rule_cum = {k: np.cumsum([r.prob for r in rs]) for k, rs in self.rules.items()}
        self._lex_words = {k: list(v) for k, v in self.lexicon.items()}
        self._lex_cum = {k: np.cumsum(list(v.values())) for k, v in self.lexicon.items()}

    def _validate(self):
        if self.start not in self.rules:
            raise ConfigError(f"start symbol {self.start!r} has no rules")
        for lhs, rs in self.rules.items():
            if lhs in self.lexicon:
                raise ConfigError(f"{lhs!r} is both a nonterminal and a part of speech")
            total = sum(r.prob for r in rs)
            if abs(total - 1.0) > 1e-9:
                raise ConfigError(f"rule probabilities for {lhs!r} sum to {total}")
            for r in rs:
                if not 0 <= r.head < len(r.rhs) or len(r.labels) != len(r.rhs):
                    raise ConfigError(f"rule {lhs} -> {' '.join(r.rhs)}: bad head/labels")
                for i, (sym, lab) in enumerate(zip(r.rhs, r.labels)):
                    if sym not in self.rules and sym not in self.lexicon:
                        raise ConfigError(f"undefined symbol {sym!r} in rule for {lhs!r}")
                    if (lab is None) != (i == r.head):
                        raise ConfigError(f"rule {lhs} -> {' '.join(r.rhs)}: label required on exactly the non-head children")
        for pos, words in self.lexicon.items():
            total = sum(words.values())
            if abs(total - 1.0) > 1e-9:
                raise ConfigError(f"lexicon probabilities for {pos!r} sum to {total}")

    @classmethod
    def from_dict(cls, d):
        rules = [Rule(r["lhs"], tuple(r["rhs"]), float(r["prob"]), int(r["head"]), tuple(r["labels"]))
                 for r in d["rules"]]
        return cls(d["start"], rules, d["lexicon"], d.get("upos"), d.get("max_depth", 12))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def default(cls):
        with resources.files("reconprobe.data").joinpath("grammar.json").open(encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @property
    def labels(self):
        return {lab for rs in self.rules.values() for r in rs for lab in r.labels if lab} | {"root"}

    def words(self):
        return {w for ws in self.lexicon.values() for w in ws}


class _DepthOverflow(Exception):
    pass


def _pick(cum, rng):
    return min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), len(cum) - 1)


def _expand(grammar, sym, rng, depth):
    """Returns (tokens [(form, upos)], head index, arcs [(dep, head, label)]) for ``sym``."""
    if depth > grammar.max_depth:
        raise _DepthOverflow
    if sym in grammar.lexicon:
        word = grammar._lex_words[sym][_pick(grammar._lex_cum[sym], rng)]
        return [(word, grammar.upos.get(sym, sym))], 0, []
    rule = grammar.rules[sym][_pick(grammar._rule_cum[sym], rng)]
    tokens, arcs, heads = [], [], []
    for child in rule.rhs:
        toks, h, sub = _expand(grammar, child, rng, depth + 1)
        off = len(tokens)
        tokens.extend(toks)
        arcs.extend((d + off, hh + off, lab) for d, hh, lab in sub)
        heads.append(h + off)
    head = heads[rule.head]
    for i, lab in enumerate(rule.labels):
        if i != rule.head:
            arcs.append((heads[i], head, lab))
    return tokens, head, arcs


def sample_sentence(grammar: Grammar, rng, sent_id: str) -> DepSentence:
    while True:
        try:
            tokens, root, arcs = _expand(grammar, grammar.start, rng, 0)
            break
        except _DepthOverflow:
            continue
    heads = {d: (h, lab) for d, h, lab in arcs}
    words = []
    for i, (form, upos) in enumerate(tokens):
        h, lab = heads.get(i, (-1, "root"))
        words.append(Word(form, h + 1, lab, upos))
    return DepSentence(sent_id, tuple(words))


def sample_corpus(grammar: Grammar, count: int, seed: int) -> list[DepSentence]:
    rng = np.random.default_rng(seed)
    width = max(6, len(str(count)))
    return [sample_sentence(grammar, rng, f"s{i:0{width}d}") for i in range(1, count + 1)]


def write_corpus(sentences, out_dir, stem="corpus"):
    out_dir = Path(out_dir)
    txt = out_dir / f"{stem}.txt"
    conllu = out_dir / f"{stem}.conllu"
    txt.write_text("".join(s.text + "\n" for s in sentences), encoding="utf-8")
    conllu.write_text(to_conllu(sentences), encoding="utf-8")
    return txt, conllu


def uncovered_words(grammar: Grammar, vocab: Vocab):
    """Lexicon words that would tokenize to [UNK] under ``vocab``."""
    return sorted(w for w in grammar.words() if UNK in split_word(w, vocab))
