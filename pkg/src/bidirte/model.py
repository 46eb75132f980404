"""Bidirectional cascade tagger.

Shared encoder output ``h`` is projected into subject-, object- and
relation-specific token features. The s2o direction tags subjects, then for
each subject tags objects under every relation; o2s mirrors it. The
relation-specific tagger of one direction reads the entity features of the
other direction's first-stage tagger, plus the conditioned span's mean
encoding and the relation probability vector.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import nn

from .corpus import TagTensors
from .encoder import RepresentationProvider, span_pool_matrix


@dataclass
class ModelConfig:
    s2o: bool = True
    o2s: bool = True
    relation_prediction: bool = True
    teacher_forcing: bool = True

    def __post_init__(self):
        if not (self.s2o or self.o2s):
            raise ValueError("at least one extraction direction must be enabled")

    @property
    def directions(self) -> tuple[str, ...]:
        return tuple(d for d, on in (("s2o", self.s2o), ("o2s", self.o2s)) if on)


@dataclass
class ConditionedGrids:
    """Relation-specific tags for a set of conditioning spans across a batch."""

    start: torch.Tensor  # (S, r, L)
    end: torch.Tensor  # (S, r, L)
    example: list[int] = field(default_factory=list)
    spans: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class ForwardOutputs:
    mask: torch.Tensor
    p_sub_start: torch.Tensor = None
    p_sub_end: torch.Tensor = None
    p_obj_start: torch.Tensor = None
    p_obj_end: torch.Tensor = None
    p_rel: torch.Tensor = None
    rel_obj: ConditionedGrids = None  # conditioned on subjects
    rel_sub: ConditionedGrids = None  # conditioned on objects
    h: torch.Tensor = None


class _TokenHead(nn.Module):
    def __init__(self, d: int, out: int):
        super().__init__()
        self.start = nn.Linear(d, out)
        self.end = nn.Linear(d, out)


class BidirectionalTagger(nn.Module):
    def __init__(self, encoder: RepresentationProvider, num_relations: int, config: ModelConfig | None = None):
        super().__init__()
        self.encoder = encoder
        self.config = config or ModelConfig()
        d, r = encoder.hidden_size, num_relations
        self.num_relations = r
        self.proj_sub = nn.Linear(d, d)
        self.proj_obj = nn.Linear(d, d)
        self.proj_rel = nn.Linear(d, d)
        self.sub_tagger = _TokenHead(d, 1)
        self.obj_tagger = _TokenHead(d, 1)
        self.rel_head = nn.Linear(d, r)
        self.fuse_obj = nn.Linear(d + r, d)
        self.rel_obj_tagger = _TokenHead(d, r)
        self.fuse_sub = nn.Linear(d + r, d)
        self.rel_sub_tagger = _TokenHead(d, r)

    # ------------------------------------------------------------------
    # stage 2: unconditional heads

    @staticmethod
    def _tag(head: _TokenHead, feats: torch.Tensor, mask: torch.Tensor):
        m = mask.to(feats.dtype)
        p_start = torch.sigmoid(head.start(feats)).squeeze(-1) * m
        p_end = torch.sigmoid(head.end(feats)).squeeze(-1) * m
        return p_start, p_end

    def tag_subjects(self, h: torch.Tensor, mask: torch.Tensor):
        """Start/end probabilities per token, zero at padding."""
        return self._tag(self.sub_tagger, self.proj_sub(h), mask)

    def tag_objects(self, h: torch.Tensor, mask: torch.Tensor):
        return self._tag(self.obj_tagger, self.proj_obj(h), mask)

    def predict_relations(self, h: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Multi-label relation probabilities from the mean-pooled relation features."""
        m = mask.to(h.dtype)
        n = m.sum(-1, keepdim=True)
        if (n == 0).any():
            raise ValueError("relation prediction needs at least one non-padding token")
        pooled = (self.proj_rel(h) * m[..., None]).sum(-2) / n
        return torch.sigmoid(self.rel_head(pooled))

    # ------------------------------------------------------------------
    # stage 3: relation-specific taggers

    def _conditioned(self, feats, h, mask, example: Sequence[int], spans: Sequence[tuple[int, int]],
                     p_rel: torch.Tensor, fuse: nn.Linear, head: _TokenHead) -> ConditionedGrids:
        r, length = self.num_relations, h.shape[-2]
        if len(spans) == 0:
            empty = h.new_zeros(0, r, length)
            return ConditionedGrids(empty, empty.clone(), [], [])
        idx = torch.as_tensor(list(example), dtype=torch.long, device=h.device)
        pool = span_pool_matrix(spans, length, dtype=h.dtype).to(h.device)  # (S, L)
        v = torch.einsum("sl,sld->sd", pool, h[idx])  # mean encoding of each span
        x = feats[idx] + v[:, None, :]  # (S, L, d)
        rel = p_rel[idx][:, None, :].expand(-1, length, -1)
        fused = fuse(torch.cat([x, rel], dim=-1))
        m = mask[idx].to(h.dtype)[:, :, None]
        start = (torch.sigmoid(head.start(fused)) * m).transpose(1, 2)
        end = (torch.sigmoid(head.end(fused)) * m).transpose(1, 2)
        return ConditionedGrids(start, end, list(example), list(spans))

    def tag_objects_given_subject(self, h, mask, example, spans, p_rel) -> ConditionedGrids:
        """(S, r, L) object start/end grids, one per conditioning subject span."""
        return self._conditioned(self.proj_obj(h), h, mask, example, spans, p_rel,
                                 self.fuse_obj, self.rel_obj_tagger)

    def tag_subjects_given_object(self, h, mask, example, spans, p_rel) -> ConditionedGrids:
        return self._conditioned(self.proj_sub(h), h, mask, example, spans, p_rel,
                                 self.fuse_sub, self.rel_sub_tagger)

    # ------------------------------------------------------------------

    def relation_condition(self, p_rel: torch.Tensor | None, gold: torch.Tensor | None, batch: int,
                           like: torch.Tensor) -> torch.Tensor:
        """The relation vector concatenated into the relation-specific taggers."""
        if not self.config.relation_prediction:
            return like.new_zeros(batch, self.num_relations)
        if gold is not None and self.config.teacher_forcing:
            return gold.to(like.dtype)
        return p_rel

    def forward_training(self, h: torch.Tensor, mask: torch.Tensor, gold: Sequence[TagTensors]) -> ForwardOutputs:
        """All heads, with relation-specific taggers conditioned on gold spans."""
        out = ForwardOutputs(mask=mask, h=h)
        if self.config.relation_prediction:
            out.p_rel = self.predict_relations(h, mask)
        gold_rel = torch.stack([torch.as_tensor(g.rel_labels) for g in gold]).to(h.device)
        cond = self.relation_condition(out.p_rel, gold_rel, len(gold), h)
        if self.config.s2o:
            out.p_sub_start, out.p_sub_end = self.tag_subjects(h, mask)
            ex = [b for b, g in enumerate(gold) for _ in g.subjects]
            spans = [s for g in gold for s in g.subjects]
            out.rel_obj = self.tag_objects_given_subject(h, mask, ex, spans, cond)
        if self.config.o2s:
            out.p_obj_start, out.p_obj_end = self.tag_objects(h, mask)
            ex = [b for b, g in enumerate(gold) for _ in g.objects]
            spans = [o for g in gold for o in g.objects]
            out.rel_sub = self.tag_subjects_given_object(h, mask, ex, spans, cond)
        return out

    def encode(self, batch_tokens: Sequence[Sequence[str]]):
        return self.encoder(batch_tokens)
