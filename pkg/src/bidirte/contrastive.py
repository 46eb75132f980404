"""Multi-positive supervised contrastive loss with a similarity-cap penalty.

An anchor is a gold subject (or, for the object-to-subject direction, a gold
object). Its positives are the entities it is related to; every other entity
in the batch is a negative. Each sentence is encoded twice under different
dropout masks, so every entity appears once per view.

For one anchor with cosine similarities ``s`` to its candidates:

    L1 = -1/|P| * log( sum_P exp(s/tau) / sum_A exp(s/tau) )
    L2 = [ -(mean_P s - beta) * 1/|N| * log( sum_N exp(s/tau) / sum_A exp(s/tau) ) ]_+
    Lc = sum over anchors of (omega1 * L1 + omega2 * L2)

with ``A = P + N``. ``L2`` is zero when ``N`` is empty.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F

from .corpus import Example
from .encoder import span_pool_matrix

DIRECTIONS = ("s2o", "o2s")


@dataclass
class ContrastiveConfig:
    tau: float = 0.1
    beta: float = 0.85
    omega1: float = 1.0
    omega2: float = 1.0
    enabled: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not -1 < self.beta <= 1:
            raise ValueError("beta must lie in (-1, 1]")
        if self.omega1 < 0 or self.omega2 < 0:
            raise ValueError("omega1/omega2 must be non-negative")


@dataclass
class ContrastiveGroup:
    anchor: torch.Tensor  # (d,)
    positives: torch.Tensor  # (P, d)
    negatives: torch.Tensor  # (N, d)
    anchor_key: tuple = None
    positive_keys: list = field(default_factory=list)
    negative_keys: list = field(default_factory=list)


def _cos(anchor: torch.Tensor, others: torch.Tensor) -> torch.Tensor:
    if others.shape[0] == 0:
        return anchor.new_zeros(0)
    if (anchor.norm() == 0).item() or (others.norm(dim=-1) == 0).any().item():
        raise ValueError("cosine similarity is undefined for a zero vector")
    return F.cosine_similarity(anchor[None], others, dim=-1, eps=0.0)


def loss_l1(group: ContrastiveGroup, tau: float) -> torch.Tensor:
    n_pos = group.positives.shape[0]
    if n_pos < 1:
        raise ValueError("a contrastive group needs at least one positive")
    s_pos = _cos(group.anchor, group.positives) / tau
    s_neg = _cos(group.anchor, group.negatives) / tau
    log_ratio = torch.logsumexp(s_pos, 0) - torch.logsumexp(torch.cat([s_pos, s_neg]), 0)
    return -log_ratio / n_pos


def loss_l2(group: ContrastiveGroup, tau: float, beta: float) -> torch.Tensor:
    n_pos, n_neg = group.positives.shape[0], group.negatives.shape[0]
    if n_pos < 1:
        raise ValueError("a contrastive group needs at least one positive")
    if n_neg == 0:
        return group.anchor.new_zeros(())
    cos_pos = _cos(group.anchor, group.positives)
    s_pos = cos_pos / tau
    s_neg = _cos(group.anchor, group.negatives) / tau
    log_ratio = torch.logsumexp(s_neg, 0) - torch.logsumexp(torch.cat([s_pos, s_neg]), 0)
    return torch.clamp(-(cos_pos.mean() - beta) * log_ratio / n_neg, min=0.0)


def loss_lc(groups: Sequence[ContrastiveGroup], config: ContrastiveConfig) -> torch.Tensor:
    total = None
    for g in groups:
        term = config.omega1 * loss_l1(g, config.tau) + config.omega2 * loss_l2(g, config.tau, config.beta)
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total


# --------------------------------------------------------------------------
# batch assembly


@dataclass
class GroupBatch:
    """All groups of a batch as index masks over one entity table.

    ``keys[m] = (example index, view, span)`` names row ``m`` of ``table``.
    """

    table: torch.Tensor  # (M, d)
    keys: list
    anchor: torch.Tensor  # (G,) long
    pos_mask: torch.Tensor  # (G, M) bool
    neg_mask: torch.Tensor  # (G, M) bool
    direction: list

    def __len__(self) -> int:
        return int(self.anchor.shape[0])

    def groups(self) -> list[ContrastiveGroup]:
        out = []
        for g in range(len(self)):
            pos = self.pos_mask[g].nonzero().flatten().tolist()
            neg = self.neg_mask[g].nonzero().flatten().tolist()
            a = int(self.anchor[g])
            out.append(ContrastiveGroup(self.table[a], self.table[pos], self.table[neg], self.keys[a],
                                        [self.keys[i] for i in pos], [self.keys[i] for i in neg]))
        return out


def build_groups(examples: Sequence[Example], views: Sequence[Sequence[torch.Tensor]],
                 directions: Sequence[str] = DIRECTIONS) -> GroupBatch:
    """Assemble anchors, positives and negatives for a batch.

    ``views[b]`` holds one or more ``(l, d)`` encodings of ``examples[b]``.
    One group is emitted per (gold anchor, view) with at least one positive.
    """
    rows, keys = [], []
    index = {}
    for b, ex in enumerate(examples):
        ents = ex.entities()
        if not ents:
            continue
        for v, h in enumerate(views[b]):
            pooled = span_pool_matrix(ents, h.shape[0], dtype=h.dtype).to(h.device) @ h
            for span, vec in zip(ents, pooled):
                index[(b, v, span)] = len(keys)
                keys.append((b, v, span))
                rows.append(vec)
    d = views[0][0].shape[-1] if views and views[0] else 0
    table = torch.stack(rows) if rows else torch.zeros(0, d)
    m = len(keys)

    anchors, pos_rows, neg_rows, dirs = [], [], [], []
    for direction in directions:
        if direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {direction!r}")
        for b, ex in enumerate(examples):
            related: dict[tuple, set] = {}
            for t in ex.triples:
                a, p = (t.subject, t.object) if direction == "s2o" else (t.object, t.subject)
                if p != a:
                    related.setdefault(a, set()).add(p)
            for a_span in sorted(related):
                partners = related[a_span]
                for v in range(len(views[b])):
                    pos = torch.zeros(m, dtype=torch.bool)
                    neg = torch.ones(m, dtype=torch.bool)
                    for i, (bb, _, span) in enumerate(keys):
                        if bb == b and span == a_span:
                            neg[i] = False
                        elif bb == b and span in partners:
                            pos[i] = True
                            neg[i] = False
                    anchors.append(index[(b, v, a_span)])
                    pos_rows.append(pos)
                    neg_rows.append(neg)
                    dirs.append(direction)
    if anchors:
        anchor = torch.tensor(anchors, dtype=torch.long)
        pos_mask, neg_mask = torch.stack(pos_rows), torch.stack(neg_rows)
    else:
        anchor = torch.zeros(0, dtype=torch.long)
        pos_mask = neg_mask = torch.zeros(0, m, dtype=torch.bool)
    return GroupBatch(table, keys, anchor, pos_mask, neg_mask, dirs)


def batch_loss(batch: GroupBatch, config: ContrastiveConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Vectorised ``(sum_i omega1 * L1_i, sum_i omega2 * L2_i)`` for a ``GroupBatch``."""
    if len(batch) == 0:
        z = batch.table.new_zeros(()) if batch.table.numel() else torch.zeros(())
        return z, z
    norms = batch.table.norm(dim=-1)
    if (norms == 0).any():
        raise ValueError("cosine similarity is undefined for a zero vector")
    unit = batch.table / norms[:, None]
    cos = unit[batch.anchor] @ unit.T  # (G, M)
    logits = cos / config.tau
    neg_inf = torch.finfo(logits.dtype).min
    all_mask = batch.pos_mask | batch.neg_mask
    lse_p = torch.logsumexp(logits.masked_fill(~batch.pos_mask, neg_inf), dim=1)
    lse_a = torch.logsumexp(logits.masked_fill(~all_mask, neg_inf), dim=1)
    lse_n = torch.logsumexp(logits.masked_fill(~batch.neg_mask, neg_inf), dim=1)
    n_pos = batch.pos_mask.sum(1).to(logits.dtype)
    n_neg = batch.neg_mask.sum(1).to(logits.dtype)
    l1 = -(lse_p - lse_a) / n_pos
    mean_pos = (cos * batch.pos_mask).sum(1) / n_pos
    has_neg = n_neg > 0
    lse_n = torch.where(has_neg, lse_n, lse_a)
    l2_raw = -(mean_pos - config.beta) * (lse_n - lse_a) / n_neg.clamp(min=1)
    l2 = torch.where(has_neg, torch.clamp(l2_raw, min=0.0), torch.zeros_like(l2_raw))
    return config.omega1 * l1.sum(), config.omega2 * l2.sum()
