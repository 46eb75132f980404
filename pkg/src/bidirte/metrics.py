"""Micro precision/recall/F1 under Partial and Exact match, with category breakdowns."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .corpus import COUNT_BUCKETS, Example, Overlap, SpanTriple

STANDARDS = ("partial", "exact")


def _key(t: SpanTriple, standard: str):
    if standard == "exact":
        return (t.subj_start, t.subj_end, t.relation, t.obj_start, t.obj_end)
    if standard == "partial":
        return (t.subj_start, t.relation, t.obj_start)
    raise ValueError(f"unknown match standard {standard!r}")


def match_triple(pred: SpanTriple, gold: SpanTriple, standard: str = "exact") -> bool:
    """Exact: spans and relation equal. Partial: relation and both entity heads equal."""
    return _key(pred, standard) == _key(gold, standard)


def count_correct(pred: Iterable[SpanTriple], gold: Iterable[SpanTriple], standard: str = "exact") -> int:
    """Matched predictions in one sentence; each gold triple absorbs at most one."""
    p = Counter(_key(t, standard) for t in pred)
    g = Counter(_key(t, standard) for t in gold)
    return sum(min(n, g[k]) for k, n in p.items())


def prf(correct: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    precision = correct / n_pred if n_pred else 0.0
    recall = correct / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def micro_prf(preds: Sequence[Iterable[SpanTriple]], golds: Sequence[Iterable[SpanTriple]],
              standard: str = "exact") -> tuple[float, float, float]:
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} prediction sets for {len(golds)} gold sets")
    correct = n_pred = n_gold = 0
    for p, g in zip(preds, golds):
        p, g = set(p), set(g)
        correct += count_correct(p, g, standard)
        n_pred += len(p)
        n_gold += len(g)
    return prf(correct, n_pred, n_gold)


@dataclass
class Score:
    correct: int = 0
    predicted: int = 0
    gold: int = 0
    support: int = 0

    def update(self, correct: int, predicted: int, gold: int) -> None:
        self.correct += correct
        self.predicted += predicted
        self.gold += gold
        self.support += 1

    @property
    def prf(self) -> tuple[float, float, float]:
        return prf(self.correct, self.predicted, self.gold)

    @property
    def f1(self) -> float:
        return self.prf[2]

    def to_dict(self) -> dict:
        p, r, f = self.prf
        return {"precision": p, "recall": r, "f1": f, "correct": self.correct,
                "predicted": self.predicted, "gold": self.gold, "support": self.support}


@dataclass
class EvalReport:
    standard: str
    overall: Score = field(default_factory=Score)
    by_overlap: dict = field(default_factory=dict)
    by_count: dict = field(default_factory=dict)

    def support(self, category: str) -> int:
        row = self.by_overlap.get(category) or self.by_count.get(category)
        return row.support if row else 0

    def to_dict(self) -> dict:
        return {
            "standard": self.standard,
            "overall": self.overall.to_dict(),
            "by_overlap": {k: v.to_dict() for k, v in self.by_overlap.items()},
            "by_count": {k: v.to_dict() for k, v in self.by_count.items()},
        }


def report(preds: Sequence[Iterable[SpanTriple]], corpus: Sequence[Example], standard: str = "exact") -> EvalReport:
    """Overall micro scores plus per-overlap-class and per-triple-count rows.

    A sentence flagged both SEO and EPO counts towards both rows; rows
    without any sentence are left out.
    """
    if len(preds) != len(corpus):
        raise ValueError(f"{len(preds)} prediction sets for {len(corpus)} sentences")
    rep = EvalReport(standard)
    overlap = {k.value: Score() for k in Overlap}
    counts = {b: Score() for b in COUNT_BUCKETS}
    for p, ex in zip(preds, corpus):
        p, g = set(p), set(ex.triples)
        c = count_correct(p, g, standard)
        rep.overall.update(c, len(p), len(g))
        for flag in ex.overlap:
            overlap[Overlap(flag).value].update(c, len(p), len(g))
        if ex.bucket is not None:
            counts[ex.bucket].update(c, len(p), len(g))
    rep.by_overlap = {k: v for k, v in overlap.items() if v.support}
    rep.by_count = {k: v for k, v in counts.items() if v.support}
    return rep


def render_table(rep: EvalReport, title: str = "model") -> str:
    """Plain-text table: overall Prec./Rec./F1, then F1 per category (in %)."""
    p, r, f = rep.overall.prf
    lines = [f"{'Model':<16}{'Prec.':>8}{'Rec.':>8}{'F1':>8}   ({rep.standard} match)",
             f"{title:<16}{100 * p:>8.1f}{100 * r:>8.1f}{100 * f:>8.1f}", ""]
    cols = [k.value for k in Overlap] + [f"N={b}" if b != "5+" else "N>=5" for b in COUNT_BUCKETS]
    rows = [rep.by_overlap.get(k.value) for k in Overlap] + [rep.by_count.get(b) for b in COUNT_BUCKETS]
    lines.append(f"{'':<16}" + "".join(f"{c:>8}" for c in cols))
    lines.append(f"{'F1':<16}" + "".join(f"{100 * s.f1:>8.1f}" if s else f"{'-':>8}" for s in rows))
    lines.append(f"{'support':<16}" + "".join(f"{s.support if s else 0:>8}" for s in rows))
    return "\n".join(lines)
