"""Weighted commonsense triple store with top-k related-entity lookup."""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field
from typing import Iterable

DEFAULT_STOPLIST = frozenset(
    """a an the is are was were be been being am of to in on at by for with from
    and or but not no it its this that these those he she they we you i me him
    her them his their our your my do does did has have had will would can could
    should what why who whom which where when how there here as if then so""".split()
)


def normalize_concept(text: str) -> str:
    """Lowercase, trim, and collapse internal whitespace to single spaces."""
    return " ".join(text.strip().lower().split())


@dataclass(frozen=True)
class Fact:
    head: str
    relation: str
    tail: str
    weight: float

    def __post_init__(self):
        if not self.head or not self.tail:
            raise ValueError("fact endpoints must be non-empty")
        if self.head != normalize_concept(self.head) or self.tail != normalize_concept(self.tail):
            raise ValueError(f"fact endpoints must be normalized: {self.head!r}, {self.tail!r}")
        if not (self.weight >= 0 and math.isfinite(self.weight)):
            raise ValueError(f"fact weight must be finite and non-negative, got {self.weight}")


@dataclass
class LoadReport:
    accepted: int = 0
    rejected: int = 0
    errors: list[tuple[int, str]] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "accepted": self.accepted,
            "rejected": self.rejected,
            "errors": [{"line": n, "reason": r} for n, r in self.errors],
        }


class KnowledgeBase:
    """Immutable fact list plus a per-concept posting index.

    Each posting is ``(fact_id, matched_head)``; ``matched_head`` is True when
    the concept is the fact's head, so the returned entity is the tail.
    Postings are sorted by descending weight, ties by ascending
    (other endpoint, relation).
    """

    def __init__(self, facts: Iterable[Fact] = (), report: LoadReport | None = None):
        self.facts: tuple[Fact, ...] = tuple(facts)
        self.report = report if report is not None else LoadReport(accepted=len(self.facts))
        index: dict[str, list[tuple[int, bool]]] = {}
        for fid, f in enumerate(self.facts):
            index.setdefault(f.head, []).append((fid, True))
            if f.tail != f.head:
                index.setdefault(f.tail, []).append((fid, False))
        for postings in index.values():
            postings.sort(key=self._posting_key)
        self.index = {c: tuple(p) for c, p in index.items()}

    def _posting_key(self, posting):
        fid, matched_head = posting
        f = self.facts[fid]
        other = f.tail if matched_head else f.head
        return (-f.weight, other, f.relation)

    def __len__(self):
        return len(self.facts)

    def postings(self, concept: str) -> tuple[tuple[int, bool], ...]:
        return self.index.get(normalize_concept(concept), ())

    def query(self, token: str, k: int, stoplist: Iterable[str] | None = DEFAULT_STOPLIST):
        return query_entities(self, token, k, stoplist)


def _parse_line(line: str) -> Fact:
    parts = line.split("\t")
    if len(parts) != 4:
        raise ValueError(f"expected 4 tab-separated fields, got {len(parts)}")
    head, relation, tail = normalize_concept(parts[0]), parts[1].strip(), normalize_concept(parts[2])
    if not head or not tail or not relation:
        raise ValueError("empty head, relation or tail")
    try:
        weight = float(parts[3])
    except ValueError:
        raise ValueError(f"unparseable weight {parts[3].strip()!r}") from None
    if not math.isfinite(weight):
        raise ValueError(f"non-finite weight {parts[3].strip()!r}")
    if weight < 0:
        raise ValueError(f"negative weight {weight}")
    return Fact(head, relation, tail, weight)


def ingest_kb(source) -> KnowledgeBase:
    """Build a KnowledgeBase from a TSV stream, path, or string iterable.

    Lines are ``head<TAB>relation<TAB>tail<TAB>weight``; blank lines and
    ``#`` comments are skipped. Malformed lines are rejected and recorded in
    ``kb.report`` rather than raising.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as fh:
            return ingest_kb(fh)
    facts = []
    report = LoadReport()
    for lineno, raw in enumerate(source, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            facts.append(_parse_line(line))
        except ValueError as exc:
            report.rejected += 1
            report.errors.append((lineno, str(exc)))
    report.accepted = len(facts)
    return KnowledgeBase(facts, report)


def kb_from_text(text: str) -> KnowledgeBase:
    return ingest_kb(io.StringIO(text))


def write_kb(kb: KnowledgeBase, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in kb.facts:
            fh.write(f"{f.head}\t{f.relation}\t{f.tail}\t{f.weight!r}\n")


def load_stoplist(path) -> frozenset[str]:
    with open(path, encoding="utf-8") as fh:
        return frozenset(
            normalize_concept(line) for line in fh if line.strip() and not line.startswith("#")
        )


def query_entities(kb: KnowledgeBase, token: str, k: int, stoplist=DEFAULT_STOPLIST):
    """Top-``k`` entities related to ``token`` as ``(entity, weight)`` pairs.

    The returned entity is whichever fact endpoint the token did not match.
    Duplicate entities keep their first (highest-weight) occurrence.
    """
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    token = normalize_concept(token)
    if k == 0 or not token or (stoplist and token in stoplist):
        return []
    out: list[tuple[str, float]] = []
    seen = set()
    for fid, matched_head in kb.index.get(token, ()):
        f = kb.facts[fid]
        entity = f.tail if matched_head else f.head
        if entity in seen:
            continue
        seen.add(entity)
        out.append((entity, f.weight))
        if len(out) == k:
            break
    return out
