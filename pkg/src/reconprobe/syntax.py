"""Dependency parses and the pairwise syntactic measurements used to
break down probing results: relation category, arc label, functional
relation direction, linear and structural distance."""
from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path

from .errors import ConfigError, DomainError, ParseError


@dataclass(frozen=True)
class Word:
    form: str
    head: int  # 1-based, 0 = root
    deprel: str
    upos: str = "_"


@dataclass(frozen=True)
class DepSentence:
    sent_id: str
    words: tuple[Word, ...]

    def __post_init__(self):
        err = tree_error(self.words)
        if err is not None:
            raise ParseError(f"sentence {self.sent_id}: {err[1]}")

    @property
    def forms(self):
        return [w.form for w in self.words]

    @property
    def text(self):
        return " ".join(self.forms)

    def head_of(self, w):
        """0-based head of 0-based word ``w``; None for the root."""
        h = self.words[w].head
        return None if h == 0 else h - 1

    def ancestors(self, w):
        """0-based ancestors of ``w``, nearest first."""
        out = []
        h = self.head_of(w)
        while h is not None:
            out.append(h)
            h = self.head_of(h)
        return out


def tree_error(words):
    """Return (word index, message) for the first tree violation, else None."""
    n = len(words)
    roots = [i for i, w in enumerate(words) if w.head == 0]
    for i, w in enumerate(words):
        if not 0 <= w.head <= n:
            return i, f"word {i + 1}: head {w.head} out of range 0..{n}"
        if w.head == i + 1:
            return i, f"word {i + 1}: self-loop"
    if n and len(roots) != 1:
        return (roots[1] if roots else 0), f"expected exactly one root, found {len(roots)}"
    for i in range(n):
        seen = set()
        j = i
        while words[j].head != 0:
            if j in seen:
                return i, f"word {i + 1}: cycle in heads"
            seen.add(j)
            j = words[j].head - 1
    return None


def parse_conllu(text: str) -> list[DepSentence]:
    sentences = []
    rows, row_lines, sent_id = [], [], None

    def flush():
        nonlocal rows, row_lines, sent_id
        if rows:
            sid = sent_id if sent_id is not None else f"sent{len(sentences) + 1}"
            err = tree_error(rows)
            if err is not None:
                raise ParseError(err[1], line=row_lines[err[0]])
            sentences.append(DepSentence(sid, tuple(rows)))
        rows, row_lines, sent_id = [], [], None

    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.rstrip("\r")
        if not line.strip():
            flush()
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("sent_id") and "=" in body:
                sent_id = body.split("=", 1)[1].strip()
            continue
        cols = line.split("\t")
        if len(cols) != 10:
            raise ParseError(f"expected 10 tab-separated columns, got {len(cols)}", line=lineno)
        if "-" in cols[0] or "." in cols[0]:
            continue  # multiword ranges and empty nodes
        try:
            wid = int(cols[0])
        except ValueError:
            raise ParseError(f"non-integer ID {cols[0]!r}", line=lineno) from None
        if wid != len(rows) + 1:
            raise ParseError(f"ID {wid} out of sequence (expected {len(rows) + 1})", line=lineno)
        try:
            head = int(cols[6])
        except ValueError:
            raise ParseError(f"non-integer HEAD {cols[6]!r}", line=lineno) from None
        rows.append(Word(cols[1], head, cols[7], cols[3]))
        row_lines.append(lineno)
    flush()
    return sentences


def read_conllu(path) -> list[DepSentence]:
    return parse_conllu(Path(path).read_text(encoding="utf-8"))


def to_conllu(sentences) -> str:
    out = []
    for s in sentences:
        out.append(f"# sent_id = {s.sent_id}")
        out.append(f"# text = {s.text}")
        for i, w in enumerate(s.words, start=1):
            out.append("\t".join([str(i), w.form, "_", w.upos, "_", "_", str(w.head), w.deprel, "_", "_"]))
        out.append("")
    return "\n".join(out) + ("\n" if out else "")


class RelationCategory(str, Enum):
    SUBWORD = "Subword"
    SOURCE_IS_HEAD = "SourceIsHead"
    RECON_IS_HEAD = "ReconIsHead"
    SOURCE_IS_ANCESTOR = "SourceIsAncestor"
    RECON_IS_ANCESTOR = "ReconIsAncestor"
    NO_RELATION = "NoRelation"


class FunctionalDirection(str, Enum):
    FW_IS_SOURCE = "FWisSource"
    FW_IS_RECON = "FWisRecon"
    NOT_FUNCTIONAL = "NotFunctional"


def _words(source, recon, word_of):
    ws, wr = word_of[source], word_of[recon]
    if ws is None or wr is None:
        raise DomainError(f"special-token position in pair ({source}, {recon})")
    return ws, wr


def classify_relation(source, recon, word_of, parse: DepSentence) -> RelationCategory:
    ws, wr = _words(source, recon, word_of)
    if ws == wr:
        return RelationCategory.SUBWORD
    if parse.head_of(wr) == ws:
        return RelationCategory.SOURCE_IS_HEAD
    if parse.head_of(ws) == wr:
        return RelationCategory.RECON_IS_HEAD
    if ws in parse.ancestors(wr):
        return RelationCategory.SOURCE_IS_ANCESTOR
    if wr in parse.ancestors(ws):
        return RelationCategory.RECON_IS_ANCESTOR
    return RelationCategory.NO_RELATION


def linear_distance(i, j):
    if i == j:
        raise DomainError("linear distance of a position to itself")
    return abs(i - j)


def structural_distance(source, recon, word_of, parse: DepSentence):
    """Arc count on the ancestor path between the two words, or None."""
    ws, wr = _words(source, recon, word_of)
    if ws == wr:
        raise DomainError("subwords of one word have no structural distance")
    up = parse.ancestors(wr)
    if ws in up:
        return up.index(ws) + 1
    up = parse.ancestors(ws)
    if wr in up:
        return up.index(wr) + 1
    return None


def arc_between(ws, wr, parse: DepSentence):
    """(label, head word, dependent word) if one arc joins the words, else None."""
    if ws != wr:
        if parse.head_of(wr) == ws:
            return parse.words[wr].deprel, ws, wr
        if parse.head_of(ws) == wr:
            return parse.words[ws].deprel, wr, ws
    return None


class FunctionalRelationTable(dict):
    """deprel label -> side of the arc the function word sits on ("head" | "dependent")."""

    def __init__(self, rows):
        super().__init__()
        for label, side in dict(rows).items():
            if side not in ("head", "dependent"):
                raise ConfigError(f"functional table: {label!r} side must be 'head' or 'dependent', got {side!r}")
            self[label] = side

    @classmethod
    def load(cls, path):
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def default(cls):
        with resources.files("reconprobe.data").joinpath("functional_relations.json").open(encoding="utf-8") as fh:
            return cls(json.load(fh))


def functional_direction(source, recon, word_of, parse: DepSentence, table) -> tuple[FunctionalDirection, str | None]:
    """Which side of a functional arc (if any) the source sits on; also returns the label."""
    ws, wr = _words(source, recon, word_of)
    arc = arc_between(ws, wr, parse)
    if arc is None or arc[0] not in table:
        return FunctionalDirection.NOT_FUNCTIONAL, None
    label, head, dep = arc
    fw = head if table[label] == "head" else dep
    direction = FunctionalDirection.FW_IS_SOURCE if fw == ws else FunctionalDirection.FW_IS_RECON
    return direction, label
