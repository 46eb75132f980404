"""Three-stage inference and two-direction union."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from . import _kernels
from .corpus import Example, SpanTriple, TagTensors
from .model import BidirectionalTagger


@dataclass
class DecodeConfig:
    theta_span: float = 0.5
    theta_rel: float = 0.5
    relation_filter: bool = True

    def __post_init__(self):
        for name in ("theta_span", "theta_rel"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")


@dataclass
class Prediction:
    triples: set = field(default_factory=set)
    provenance: dict = field(default_factory=dict)

    def add(self, triple: SpanTriple, source: str) -> None:
        prev = self.provenance.get(triple)
        self.triples.add(triple)
        self.provenance[triple] = source if prev in (None, source) else "both"

    def by_source(self, source: str) -> set:
        return {t for t, p in self.provenance.items() if p in (source, "both")}


def pair_spans(p_start, p_end, theta: float = 0.5) -> list[tuple[int, int]]:
    """Pair each start (left to right) with the nearest unused end at or after it."""
    return [tuple(x) for x in _kernels.pair_spans_array(p_start, p_end, theta).tolist()]


def decode_grids(start_grid, end_grid, theta: float = 0.5, row_mask=None) -> list[tuple[int, tuple[int, int]]]:
    return [(k, (s, e)) for k, s, e in _kernels.decode_grid_array(start_grid, end_grid, theta, row_mask).tolist()]


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)


def _collect(pred: Prediction, spans, starts, ends, theta, row_mask, direction: str) -> None:
    for span, gs, ge in zip(spans, starts, ends):
        for k, s, e in _kernels.decode_grid_array(gs, ge, theta, row_mask).tolist():
            if direction == "s2o":
                pred.add(SpanTriple(span[0], span[1], k, s, e), "s2o")
            else:
                pred.add(SpanTriple(s, e, k, span[0], span[1]), "o2s")


def decode_tensors(tags: TagTensors, config: DecodeConfig | None = None,
                   directions: Sequence[str] = ("s2o", "o2s")) -> Prediction:
    """Run the decoding stages over given tag probabilities (e.g. gold bits).

    Conditioned grids are looked up by span; a span without a grid yields
    nothing.
    """
    config = config or DecodeConfig()
    pred = Prediction()
    rel = _as_numpy(tags.rel_labels)
    row_mask = rel >= config.theta_rel if config.relation_filter else np.ones(len(rel), dtype=bool)
    if "s2o" in directions:
        spans = pair_spans(_as_numpy(tags.sub_start), _as_numpy(tags.sub_end), config.theta_span)
        lookup = {s: i for i, s in enumerate(tags.subjects)}
        spans = [s for s in spans if s in lookup]
        _collect(pred, spans, [_as_numpy(tags.rel_obj_start[lookup[s]]) for s in spans],
                 [_as_numpy(tags.rel_obj_end[lookup[s]]) for s in spans],
                 config.theta_span, row_mask, "s2o")
    if "o2s" in directions:
        spans = pair_spans(_as_numpy(tags.obj_start), _as_numpy(tags.obj_end), config.theta_span)
        lookup = {s: i for i, s in enumerate(tags.objects)}
        spans = [s for s in spans if s in lookup]
        _collect(pred, spans, [_as_numpy(tags.rel_sub_start[lookup[s]]) for s in spans],
                 [_as_numpy(tags.rel_sub_end[lookup[s]]) for s in spans],
                 config.theta_span, row_mask, "o2s")
    return pred


@torch.no_grad()
def infer_batch(examples: Sequence, model: BidirectionalTagger, config: DecodeConfig | None = None,
                directions: Iterable[str] | None = None) -> list[Prediction]:
    """Predict triples for a batch of examples (or token lists).

    ``directions`` restricts decoding to a subset of the model's enabled
    directions.
    """
    config = config or DecodeConfig()
    enabled = model.config.directions
    directions = tuple(d for d in (directions or enabled) if d in enabled)
    batch_tokens = [ex.tokens if isinstance(ex, Example) else list(ex) for ex in examples]
    was_training = model.training
    model.eval()
    try:
        h, mask = model.encode(batch_tokens)
        n = len(batch_tokens)
        p_rel = model.predict_relations(h, mask) if model.config.relation_prediction else None
        cond = model.relation_condition(p_rel, None, n, h)
        if p_rel is not None and config.relation_filter:
            row_masks = (p_rel >= config.theta_rel).cpu().numpy()
        else:
            row_masks = np.ones((n, model.num_relations), dtype=bool)
        preds = [Prediction() for _ in range(n)]
        stages = {
            "s2o": (model.tag_subjects, model.tag_objects_given_subject),
            "o2s": (model.tag_objects, model.tag_subjects_given_object),
        }
        for direction in directions:
            tagger, conditioned = stages[direction]
            p_start, p_end = (_as_numpy(p) for p in tagger(h, mask))
            ex_idx, spans = [], []
            for b in range(n):
                for span in pair_spans(p_start[b], p_end[b], config.theta_span):
                    ex_idx.append(b)
                    spans.append(span)
            grids = conditioned(h, mask, ex_idx, spans, cond)
            starts, ends = _as_numpy(grids.start), _as_numpy(grids.end)
            for i, (b, span) in enumerate(zip(ex_idx, spans)):
                length = len(batch_tokens[b])
                _collect(preds[b], [span], starts[i:i + 1, :, :length], ends[i:i + 1, :, :length],
                         config.theta_span, row_masks[b], direction)
    finally:
        model.train(was_training)
    return preds


def infer(example, model: BidirectionalTagger, config: DecodeConfig | None = None,
          directions: Iterable[str] | None = None) -> Prediction:
    return infer_batch([example], model, config, directions)[0]


def predict_corpus(examples: Sequence, model: BidirectionalTagger, config: DecodeConfig | None = None,
                   batch_size: int = 32, directions: Iterable[str] | None = None) -> list[Prediction]:
    out = []
    for i in range(0, len(examples), batch_size):
        out.extend(infer_batch(examples[i:i + batch_size], model, config, directions))
    return out
