"""Dataset ingestion, token alignment, overlap classification and gold tag tensors.

Datasets use the common ``{"text": ..., "triple_list": [[subj, rel, obj], ...]}``
layout, either one JSON object per line or a single top-level array.
"""
from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

Tokenizer = Callable[[str], "list[tuple[str, int, int]]"]

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class DataError(ValueError):
    """Raised for malformed dataset files."""


def regex_tokenize(text: str) -> list[tuple[str, int, int]]:
    """Split into word runs and single punctuation marks, with char offsets."""
    return [(m.group(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def whitespace_tokenize(text: str) -> list[tuple[str, int, int]]:
    return [(m.group(), m.start(), m.end()) for m in re.finditer(r"\S+", text)]


TOKENIZERS: dict[str, Tokenizer] = {
    "regex": regex_tokenize,
    "whitespace": whitespace_tokenize,
}


class SpanTriple(NamedTuple):
    """Token-level triple; spans are inclusive on both ends."""

    subj_start: int
    subj_end: int
    relation: int
    obj_start: int
    obj_end: int

    @property
    def subject(self) -> tuple[int, int]:
        return (self.subj_start, self.subj_end)

    @property
    def object(self) -> tuple[int, int]:
        return (self.obj_start, self.obj_end)


class Overlap(str, Enum):
    NORMAL = "Normal"
    SEO = "SEO"
    EPO = "EPO"


COUNT_BUCKETS = ("1", "2", "3", "4", "5+")


def count_bucket(n: int) -> str | None:
    if n <= 0:
        return None
    return COUNT_BUCKETS[min(n, 5) - 1]


@dataclass(frozen=True)
class RawExample:
    text: str
    triples: tuple[tuple[str, str, str], ...]


class RelationVocab:
    """Bijective relation label <-> id map, ids assigned in sorted label order."""

    def __init__(self, labels: Iterable[str] = ()):
        self.labels: list[str] = sorted(set(labels))
        self._ids = {label: i for i, label in enumerate(self.labels)}

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label: str) -> bool:
        return label in self._ids

    def __eq__(self, other: object) -> bool:
        return isinstance(other, RelationVocab) and self.labels == other.labels

    def __repr__(self) -> str:
        return f"RelationVocab({len(self)} relations)"

    def id(self, label: str) -> int:
        try:
            return self._ids[label]
        except KeyError:
            raise KeyError(f"unknown relation label {label!r}") from None

    def label(self, idx: int) -> str:
        return self.labels[idx]

    def to_list(self) -> list[str]:
        return list(self.labels)


@dataclass
class Example:
    tokens: list[str]
    token_offsets: list[tuple[int, int]]
    triples: list[SpanTriple]
    text: str = ""
    uid: int = 0
    overlap: frozenset = frozenset()
    bucket: str | None = None

    def __post_init__(self):
        n = len(self.tokens)
        for t in self.triples:
            if not (0 <= t.subj_start <= t.subj_end < n and 0 <= t.obj_start <= t.obj_end < n):
                raise ValueError(f"triple {t} outside token range [0, {n})")
        if self.triples and not self.overlap:
            self.overlap = classify_overlap(self.triples)
        self.bucket = count_bucket(len(self.triples))

    def __len__(self) -> int:
        return len(self.tokens)

    def span_text(self, span: tuple[int, int]) -> str:
        if self.text and self.token_offsets:
            return self.text[self.token_offsets[span[0]][0]:self.token_offsets[span[1]][1]]
        return " ".join(self.tokens[span[0]:span[1] + 1])

    def subjects(self) -> list[tuple[int, int]]:
        return sorted({t.subject for t in self.triples})

    def objects(self) -> list[tuple[int, int]]:
        return sorted({t.object for t in self.triples})

    def entities(self) -> list[tuple[int, int]]:
        return sorted({t.subject for t in self.triples} | {t.object for t in self.triples})


@dataclass
class LoadStats:
    records: int = 0
    skipped_missing_entity: int = 0
    skipped_malformed: int = 0
    dropped_triples: int = 0
    truncated_sentences: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# --------------------------------------------------------------------------
# loading


def _parse_records(text: str, path: str, strict: bool, stats: LoadStats) -> list[tuple[int, dict]]:
    stripped = text.lstrip()
    if not stripped:
        return []
    if stripped.startswith("["):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}:{e.lineno}: invalid JSON array ({e.msg})") from e
        return [(i + 1, rec) for i, rec in enumerate(data)]
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append((lineno, json.loads(line)))
        except json.JSONDecodeError as e:
            if strict:
                raise DataError(f"{path}:{lineno}: malformed record ({e.msg})") from e
            logger.warning("%s:%d: malformed record skipped", path, lineno)
            stats.skipped_malformed += 1
    return out


def _to_raw(rec: object, where: str) -> RawExample:
    if not isinstance(rec, dict) or "text" not in rec:
        raise DataError(f"{where}: record has no 'text' field")
    triples = rec.get("triple_list", rec.get("triples"))
    if triples is None:
        raise DataError(f"{where}: record has no 'triple_list' field")
    text = rec["text"]
    if not isinstance(text, str) or not text:
        raise DataError(f"{where}: 'text' must be a non-empty string")
    parsed = []
    for t in triples:
        if len(t) != 3 or not all(isinstance(x, str) for x in t):
            raise DataError(f"{where}: triple {t!r} is not [subject, relation, object]")
        parsed.append(tuple(t))
    return RawExample(text=text, triples=tuple(parsed))


def load_dataset(path, match_standard: str = "exact", strict: bool = True,
                 stats: LoadStats | None = None) -> tuple[list[RawExample], RelationVocab]:
    """Read a benchmark file.

    Records whose subject or object string is not a substring of the text are
    skipped and counted in ``stats.skipped_missing_entity``. With
    ``strict=False`` undecodable JSON lines are skipped instead of raising.
    ``match_standard`` is accepted for symmetry with the evaluation side; both
    standards share the same file layout.
    """
    if match_standard not in ("partial", "exact"):
        raise ValueError(f"match_standard must be 'partial' or 'exact', got {match_standard!r}")
    stats = stats if stats is not None else LoadStats()
    path = str(path)
    text = Path(path).read_text(encoding="utf-8")
    examples = []
    labels = set()
    for lineno, rec in _parse_records(text, path, strict, stats):
        stats.records += 1
        raw = _to_raw(rec, f"{path}:{lineno}")
        if any(s not in raw.text or o not in raw.text for s, _, o in raw.triples):
            logger.warning("%s:%d: entity not found in text, record skipped", path, lineno)
            stats.skipped_missing_entity += 1
            continue
        labels.update(r for _, r, _ in raw.triples)
        examples.append(raw)
    return examples, RelationVocab(labels)


# --------------------------------------------------------------------------
# alignment


def _locate(text: str, entity: str, starts: dict[int, int], ends: dict[int, int]) -> tuple[int, int] | None:
    """Char offset of the first occurrence, preferring token-aligned matches."""
    first = text.find(entity)
    if first < 0:
        return None
    pos = first
    while pos >= 0:
        if pos in starts and pos + len(entity) in ends:
            return pos, pos + len(entity)
        pos = text.find(entity, pos + 1)
    return first, first + len(entity)


def _char_to_token_span(c0: int, c1: int, offsets: Sequence[tuple[int, int]]) -> tuple[int, int] | None:
    first = last = None
    for i, (a, b) in enumerate(offsets):
        if b > c0 and a < c1:
            if first is None:
                first = i
            last = i
    if first is None:
        return None
    return first, last


def tokenize_align(raw: RawExample, tokenizer: Tokenizer, max_len: int, vocab: RelationVocab,
                   uid: int = 0, stats: LoadStats | None = None) -> Example:
    """Tokenize ``raw`` and ground every triple to inclusive token spans.

    Entities are grounded at their first character occurrence (token-aligned
    occurrences win over ones inside a longer word). Sentences longer than
    ``max_len`` are truncated and triples that no longer fit are dropped.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    toks = tokenizer(raw.text)
    if len(toks) > max_len:
        toks = toks[:max_len]
        if stats is not None:
            stats.truncated_sentences += 1
    tokens = [t for t, _, _ in toks]
    offsets = [(a, b) for _, a, b in toks]
    starts = {a: i for i, (a, _) in enumerate(offsets)}
    ends = {b: i for i, (_, b) in enumerate(offsets)}
    limit = offsets[-1][1] if offsets else 0

    triples = []
    seen = set()
    for subj, rel, obj in raw.triples:
        spans = []
        for ent in (subj, obj):
            loc = _locate(raw.text, ent, starts, ends)
            span = None
            if loc is not None and loc[1] <= limit:
                span = _char_to_token_span(loc[0], loc[1], offsets)
            spans.append(span)
        if spans[0] is None or spans[1] is None:
            logger.warning("triple (%s, %s, %s) dropped: outside the first %d tokens", subj, rel, obj, max_len)
            if stats is not None:
                stats.dropped_triples += 1
            continue
        t = SpanTriple(spans[0][0], spans[0][1], vocab.id(rel), spans[1][0], spans[1][1])
        if t not in seen:
            seen.add(t)
            triples.append(t)
    return Example(tokens=tokens, token_offsets=offsets, triples=triples, text=raw.text, uid=uid)


# --------------------------------------------------------------------------
# overlap classes


def classify_overlap(triples: Sequence) -> frozenset:
    """Overlap flags for a sentence's triples.

    ``triples`` holds anything indexable as (subject, relation, object) or a
    ``SpanTriple``. EPO: an ordered (subject, object) pair carries two or more
    relations. SEO: an entity is shared between distinct pairs (or a triple
    relates an entity to itself). Normal: neither.
    """
    if not triples:
        raise ValueError("overlap class is undefined for a sentence with no triples")
    pairs = []
    for t in triples:
        if isinstance(t, SpanTriple):
            pairs.append((t.subject, t.object))
        else:
            pairs.append((t[0], t[2]))
    flags = set()
    if len(set(pairs)) != len(pairs):
        flags.add(Overlap.EPO)
    distinct = set(pairs)
    entities = {e for p in distinct for e in p}
    if len(entities) != 2 * len(distinct):
        flags.add(Overlap.SEO)
    if not flags:
        flags.add(Overlap.NORMAL)
    return frozenset(flags)


def corpus_stats(raws: Sequence[RawExample]) -> dict:
    """Sentence/triple counts plus overlap and triple-count breakdowns on raw strings."""
    overlap = Counter()
    buckets = Counter()
    n_triples = 0
    for raw in raws:
        n_triples += len(raw.triples)
        if not raw.triples:
            continue
        for flag in classify_overlap(raw.triples):
            overlap[flag.value] += 1
        buckets[count_bucket(len(raw.triples))] += 1
    return {
        "sentences": len(raws),
        "triples": n_triples,
        "overlap": {k.value: overlap.get(k.value, 0) for k in Overlap},
        "triple_count": {b: buckets.get(b, 0) for b in COUNT_BUCKETS},
    }


# --------------------------------------------------------------------------
# gold tensors


@dataclass
class TagTensors:
    """Binary supervision for one sentence.

    ``rel_obj_*`` is keyed by gold subject span (one r x l grid each);
    ``rel_sub_*`` by gold object span.
    """

    sub_start: np.ndarray
    sub_end: np.ndarray
    obj_start: np.ndarray
    obj_end: np.ndarray
    rel_labels: np.ndarray
    subjects: list[tuple[int, int]] = field(default_factory=list)
    rel_obj_start: np.ndarray = None
    rel_obj_end: np.ndarray = None
    objects: list[tuple[int, int]] = field(default_factory=list)
    rel_sub_start: np.ndarray = None
    rel_sub_end: np.ndarray = None


def build_gold_tensors(example: Example, vocab: RelationVocab) -> TagTensors:
    n, r = len(example), len(vocab)
    sub_start = np.zeros(n, dtype=np.float32)
    sub_end = np.zeros(n, dtype=np.float32)
    obj_start = np.zeros(n, dtype=np.float32)
    obj_end = np.zeros(n, dtype=np.float32)
    rel = np.zeros(r, dtype=np.float32)
    subjects = example.subjects()
    objects = example.objects()
    s_idx = {s: i for i, s in enumerate(subjects)}
    o_idx = {o: i for i, o in enumerate(objects)}
    ro_start = np.zeros((len(subjects), r, n), dtype=np.float32)
    ro_end = np.zeros_like(ro_start)
    rs_start = np.zeros((len(objects), r, n), dtype=np.float32)
    rs_end = np.zeros_like(rs_start)
    for t in example.triples:
        if not 0 <= t.relation < r:
            raise ValueError(f"relation id {t.relation} outside vocabulary of size {r}")
        sub_start[t.subj_start] = sub_end[t.subj_end] = 1
        obj_start[t.obj_start] = obj_end[t.obj_end] = 1
        rel[t.relation] = 1
        i = s_idx[t.subject]
        ro_start[i, t.relation, t.obj_start] = ro_end[i, t.relation, t.obj_end] = 1
        j = o_idx[t.object]
        rs_start[j, t.relation, t.subj_start] = rs_end[j, t.relation, t.subj_end] = 1
    return TagTensors(sub_start, sub_end, obj_start, obj_end, rel,
                      subjects, ro_start, ro_end, objects, rs_start, rs_end)


# --------------------------------------------------------------------------
# prepared corpus files


def example_to_record(ex: Example, vocab: RelationVocab) -> dict:
    return {
        "id": ex.uid,
        "text": ex.text,
        "tokens": ex.tokens,
        "offsets": [list(o) for o in ex.token_offsets],
        "triples": [[t.subj_start, t.subj_end, vocab.label(t.relation), t.obj_start, t.obj_end]
                    for t in ex.triples],
    }


def read_prepared(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: malformed record ({e.msg})") from e
            if "meta" in rec:
                continue
            records.append(rec)
    return records


def prepared_labels(records: Iterable[dict]) -> set[str]:
    return {t[2] for rec in records for t in rec["triples"]}


def examples_from_records(records: Iterable[dict], vocab: RelationVocab) -> list[Example]:
    out = []
    for rec in records:
        triples = []
        for s0, s1, label, o0, o1 in rec["triples"]:
            if label not in vocab:
                raise DataError(f"record {rec.get('id')}: relation {label!r} not in vocabulary")
            triples.append(SpanTriple(s0, s1, vocab.id(label), o0, o1))
        out.append(Example(tokens=list(rec["tokens"]),
                           token_offsets=[tuple(o) for o in rec.get("offsets", [])],
                           triples=triples, text=rec.get("text", ""), uid=rec.get("id", len(out))))
    return out


def prepare(path, tokenizer: Tokenizer = regex_tokenize, max_len: int = 100,
            match_standard: str = "exact", strict: bool = False) -> tuple[list[Example], RelationVocab, dict]:
    """Load, align and summarise one dataset file."""
    stats = LoadStats()
    raws, vocab = load_dataset(path, match_standard, strict=strict, stats=stats)
    examples = [tokenize_align(raw, tokenizer, max_len, vocab, uid=i, stats=stats)
                for i, raw in enumerate(raws)]
    report = corpus_stats(raws)
    report["load"] = stats.to_dict()
    report["aligned_triples"] = sum(len(e.triples) for e in examples)
    return examples, vocab, report
