"""Template-generated toy corpora with Normal, SEO and EPO sentences.

Entity names never nest inside one another, so gold spans are recoverable
from start/end tags alone. Within a sentence a relation never links two
different subjects to two different objects: the relation-specific taggers
shift every token's logit by the same subject-dependent amount, so such
chains cannot be separated by them.
"""
from __future__ import annotations

import json
import random
from pathlib import Path

from .corpus import RawExample

PEOPLE = ["Tom", "Anna", "Maria Lopez", "Kenji", "Oluwaseun", "Priya Nair", "Lars", "Chloe Martin",
          "Diego", "Fatima", "Ivan Petrov", "Mei Ling"]
CITIES = ["New York", "London", "Paris", "Tokyo", "Lagos", "Mumbai", "Oslo", "Lima", "Cairo",
          "Toronto", "Seoul", "Madrid"]
COUNTRIES = ["England", "France", "Japan", "Nigeria", "India", "Norway", "Peru", "Egypt",
             "Canada", "Korea", "Spain", "Chile"]
ORGS = ["Acme Corp", "Globex", "Initech", "Umbrella Labs", "Stark Industries", "Wayne Holdings"]
YEARS = [str(y) for y in range(1950, 2021, 3)]

OVERLAP_PAIR = [
    {"text": "Tom was born in New York at 2000 .",
     "triple_list": [["Tom", "birth_place", "New York"], ["Tom", "birth_date", "2000"]]},
    {"text": "London is the capital of England .",
     "triple_list": [["London", "capital_of", "England"], ["London", "belong_to", "England"]]},
]


def _pick(rng: random.Random, pool, k=1):
    return rng.sample(pool, k) if k > 1 else rng.choice(pool)


def _normal_lives(rng):
    p, c = _pick(rng, PEOPLE), _pick(rng, CITIES)
    return f"{p} lives in {c} .", [[p, "lives_in", c]]


def _normal_two(rng):
    p1, p2 = _pick(rng, PEOPLE, 2)
    o, c = _pick(rng, ORGS), _pick(rng, CITIES)
    return f"{p1} works for {o} while {p2} lives in {c} .", [[p1, "works_for", o], [p2, "lives_in", c]]


def _seo_birth(rng):
    p, c, y = _pick(rng, PEOPLE), _pick(rng, CITIES), _pick(rng, YEARS)
    return f"{p} was born in {c} at {y} .", [[p, "birth_place", c], [p, "birth_date", y]]


def _seo_shared_city(rng):
    p1, p2 = _pick(rng, PEOPLE, 2)
    c = _pick(rng, CITIES)
    return f"{p1} and {p2} live in {c} .", [[p1, "lives_in", c], [p2, "lives_in", c]]


def _epo_capital(rng):
    c, k = _pick(rng, CITIES), _pick(rng, COUNTRIES)
    return f"{c} is the capital of {k} .", [[c, "capital_of", k], [c, "located_in", k]]


def _mixed(rng):
    p, o = _pick(rng, PEOPLE), _pick(rng, ORGS)
    c, k = _pick(rng, CITIES), _pick(rng, COUNTRIES)
    return (f"{p} works for {o} , based in {c} , the capital of {k} .",
            [[p, "works_for", o], [o, "based_in", c], [c, "capital_of", k], [c, "located_in", k]])


def _many(rng):
    p, o = _pick(rng, PEOPLE), _pick(rng, ORGS)
    c1, c2 = _pick(rng, CITIES, 2)
    y = _pick(rng, YEARS)
    return (f"{p} , born in {c1} at {y} , works for {o} and lives in {c2} .",
            [[p, "birth_place", c1], [p, "birth_date", y], [p, "works_for", o], [p, "lives_in", c2],
             [o, "located_in", c2]])


TEMPLATES = [_normal_lives, _normal_two, _seo_birth, _seo_shared_city, _epo_capital, _mixed, _many]


def make_records(n: int, seed: int = 0) -> list[dict]:
    """``n`` records cycling through every template (so each pattern occurs)."""
    rng = random.Random(seed)
    out = []
    for i in range(n):
        text, triples = TEMPLATES[i % len(TEMPLATES)](rng)
        out.append({"text": text, "triple_list": triples})
    return out


def make_corpus(n: int, seed: int = 0) -> list[RawExample]:
    return [RawExample(r["text"], tuple(tuple(t) for t in r["triple_list"])) for r in make_records(n, seed)]


def write_jsonl(records, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
    return path
