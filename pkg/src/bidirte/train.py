"""Multi-task objective, optimisation schedule, early stopping and checkpoints."""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import pickle
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .config import RunConfig
from .contrastive import build_groups, batch_loss, GroupBatch
from .corpus import Example, RelationVocab, TagTensors, build_gold_tensors
from .decode import predict_corpus
from .encoder import TinyEncoder, WordVocab, PretrainedEncoder, build_encoder
from .metrics import micro_prf
from .model import BidirectionalTagger, ConditionedGrids, ForwardOutputs, ModelConfig

logger = logging.getLogger(__name__)

EPS = 1e-7
CHECKPOINT_FORMAT = "bidirte-checkpoint/1"


class TrainingDiverged(RuntimeError):
    """Non-finite loss; ``dump`` describes the offending batch."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


# --------------------------------------------------------------------------
# losses


def bce(p: torch.Tensor, y: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Elementwise binary cross-entropy with ``p`` clamped to [eps, 1 - eps]."""
    p = torch.as_tensor(p, dtype=torch.get_default_dtype()) if not isinstance(p, torch.Tensor) else p
    y = torch.as_tensor(y, dtype=p.dtype)
    p = p.clamp(eps, 1 - eps)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p))


def head_loss(p: torch.Tensor, y: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean BCE over the valid positions of each row, averaged over rows.

    Works for ``(l,)`` vectors, ``(B, l)`` batches and ``(S, r, l)`` grids
    (where each grid is averaged over relations and tokens).
    """
    p = torch.as_tensor(p)
    y = torch.as_tensor(y, dtype=p.dtype)
    if p.shape != y.shape:
        raise ValueError(f"prediction shape {tuple(p.shape)} != gold shape {tuple(y.shape)}")
    if p.numel() == 0:
        return p.new_zeros(())
    if mask is None:
        mask = torch.ones(p.shape[0], p.shape[-1], dtype=torch.bool) if p.dim() > 1 else torch.ones_like(p, dtype=torch.bool)
    m = mask.to(p.dtype)
    if p.dim() == 3:
        m = m[:, None, :].expand_as(p)
    if p.dim() == 1:
        return (bce(p, y) * m).sum() / m.sum()
    dims = tuple(range(1, p.dim()))
    per_row = (bce(p, y) * m).sum(dims) / m.sum(dims)
    return per_row.mean()


LOSS_NAMES = ("sub_head", "sub_tail", "obj_head", "obj_tail", "rel",
              "rel_obj_head", "rel_obj_tail", "rel_sub_head", "rel_sub_tail")


@dataclass
class LossBreakdown:
    sub_head: torch.Tensor
    sub_tail: torch.Tensor
    obj_head: torch.Tensor
    obj_tail: torch.Tensor
    rel: torch.Tensor
    rel_obj_head: torch.Tensor
    rel_obj_tail: torch.Tensor
    rel_sub_head: torch.Tensor
    rel_sub_tail: torch.Tensor
    contrastive_l1: torch.Tensor
    contrastive_l2: torch.Tensor

    @property
    def contrastive(self) -> torch.Tensor:
        return self.contrastive_l1 + self.contrastive_l2

    @property
    def bce_total(self) -> torch.Tensor:
        return sum(getattr(self, n) for n in LOSS_NAMES)

    @property
    def total(self) -> torch.Tensor:
        return self.bce_total + self.contrastive

    def to_dict(self) -> dict:
        out = {n: float(getattr(self, n).detach()) for n in LOSS_NAMES}
        out["contrastive_l1"] = float(self.contrastive_l1.detach())
        out["contrastive_l2"] = float(self.contrastive_l2.detach())
        out["contrastive"] = float(self.contrastive.detach())
        out["total"] = float(self.total.detach())
        return out


def _pad(vectors: Sequence[np.ndarray], width: int) -> torch.Tensor:
    out = torch.zeros(len(vectors), width)
    for i, v in enumerate(vectors):
        out[i, :len(v)] = torch.as_tensor(v)
    return out


def _stack_grids(grids: Sequence[np.ndarray], width: int, r: int) -> torch.Tensor:
    mats = [g for grid in grids for g in grid]
    out = torch.zeros(len(mats), r, width)
    for i, g in enumerate(mats):
        out[i, :, :g.shape[-1]] = torch.as_tensor(g)
    return out


def _grid_loss(grids: ConditionedGrids | None, gold: torch.Tensor, mask: torch.Tensor, part: str, zero):
    if grids is None or grids.start.shape[0] == 0:
        return zero
    m = mask[torch.as_tensor(grids.example, dtype=torch.long)]
    pred = grids.start if part == "start" else grids.end
    return head_loss(pred, gold.to(pred.dtype), m)


def total_loss(outputs: ForwardOutputs, gold: Sequence[TagTensors], groups: GroupBatch | None,
               config: RunConfig) -> LossBreakdown:
    """Unweighted sum of the nine tagging BCE terms plus the contrastive term.

    Disabled heads (ablations) contribute exact zeros.
    """
    mask = outputs.mask
    width = mask.shape[1]
    ref = outputs.h if outputs.h is not None else outputs.p_rel
    zero = ref.new_zeros(())
    r = next((g.rel_labels.shape[0] for g in gold), 0)
    parts = {n: zero for n in LOSS_NAMES}
    if outputs.p_sub_start is not None:
        parts["sub_head"] = head_loss(outputs.p_sub_start, _pad([g.sub_start for g in gold], width), mask)
        parts["sub_tail"] = head_loss(outputs.p_sub_end, _pad([g.sub_end for g in gold], width), mask)
        parts["rel_obj_head"] = _grid_loss(outputs.rel_obj, _stack_grids([g.rel_obj_start for g in gold], width, r), mask, "start", zero)
        parts["rel_obj_tail"] = _grid_loss(outputs.rel_obj, _stack_grids([g.rel_obj_end for g in gold], width, r), mask, "end", zero)
    if outputs.p_obj_start is not None:
        parts["obj_head"] = head_loss(outputs.p_obj_start, _pad([g.obj_start for g in gold], width), mask)
        parts["obj_tail"] = head_loss(outputs.p_obj_end, _pad([g.obj_end for g in gold], width), mask)
        parts["rel_sub_head"] = _grid_loss(outputs.rel_sub, _stack_grids([g.rel_sub_start for g in gold], width, r), mask, "start", zero)
        parts["rel_sub_tail"] = _grid_loss(outputs.rel_sub, _stack_grids([g.rel_sub_end for g in gold], width, r), mask, "end", zero)
    if outputs.p_rel is not None:
        y = torch.stack([torch.as_tensor(g.rel_labels) for g in gold]).to(outputs.p_rel.dtype)
        parts["rel"] = bce(outputs.p_rel, y).mean(-1).mean()
    l1 = l2 = zero
    if groups is not None and config.contrastive.enabled:
        l1, l2 = batch_loss(groups, config.contrastive)
    return LossBreakdown(**parts, contrastive_l1=l1, contrastive_l2=l2)


# --------------------------------------------------------------------------
# schedule / stopping


def warmup_lr(step: int, total_steps: int, peak: float, warmup_fraction: float = 0.25) -> float:
    """Linear ramp to ``peak`` over the first ``warmup_fraction`` of steps, constant afterwards."""
    warm = warmup_fraction * total_steps
    if warm <= 0:
        return peak
    return peak * min(1.0, step / warm)


class EarlyStopping:
    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = -math.inf
        self.bad = 0
        self.evaluations = 0

    def update(self, score: float) -> bool:
        """Record a validation score; returns True when training should stop."""
        self.evaluations += 1
        if score > self.best:
            self.best = score
            self.bad = 0
            return False
        self.bad += 1
        return self.bad >= self.patience


# --------------------------------------------------------------------------
# model construction / checkpoints


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def build_model(config: RunConfig, vocab: RelationVocab, examples: Sequence[Example] = ()) -> BidirectionalTagger:
    enc = config.encoder
    if enc.backend == "tiny":
        words = WordVocab(t for ex in examples for t in ex.tokens)
        encoder = TinyEncoder(words, enc.hidden_size, enc.num_layers, enc.num_heads,
                              config.max_len, config.train.dropout)
    else:
        encoder = PretrainedEncoder(enc.name, config.max_len, config.train.dropout)
    return BidirectionalTagger(encoder, len(vocab), dataclasses.replace(config.model))


def save_checkpoint(path, model: BidirectionalTagger, vocab: RelationVocab, config: RunConfig,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "encoder": model.encoder.config(),
        "relations": vocab.to_list(),
        "model_config": dataclasses.asdict(model.config),
        "run_config": config.to_flat(),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }, path)
    return path


def load_checkpoint(path) -> tuple[BidirectionalTagger, RelationVocab, RunConfig]:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except (pickle.UnpicklingError, RuntimeError, EOFError) as e:
        raise ValueError(f"{path} is not a readable checkpoint: {e}") from e
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    vocab = RelationVocab(blob["relations"])
    encoder = build_encoder(blob["encoder"])
    model = BidirectionalTagger(encoder, len(vocab), ModelConfig(**blob["model_config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, vocab, RunConfig.from_flat(blob["run_config"])


# --------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    model: BidirectionalTagger
    best_f1: float
    best_epoch: int
    epochs_run: int
    history: list = field(default_factory=list)
    checkpoint: Path | None = None


def train_step(model: BidirectionalTagger, batch: Sequence[Example], gold: Sequence[TagTensors],
               config: RunConfig) -> LossBreakdown:
    """Forward both dropout views and assemble the loss (no optimiser step)."""
    tokens = [ex.tokens for ex in batch]
    h_a, mask = model.encode(tokens)
    out = model.forward_training(h_a, mask, gold)
    groups = None
    if config.contrastive.enabled:
        h_b, _ = model.encode(tokens)
        views = [[h_a[b, :len(ex)], h_b[b, :len(ex)]] for b, ex in enumerate(batch)]
        groups = build_groups(batch, views, model.config.directions)
    return total_loss(out, gold, groups, config)


def evaluate(model: BidirectionalTagger, examples: Sequence[Example], config: RunConfig) -> tuple[float, float, float]:
    preds = predict_corpus(examples, model, config.decode)
    return micro_prf([p.triples for p in preds], [ex.triples for ex in examples], config.match_standard)


def train_loop(train: Sequence[Example], valid: Sequence[Example], vocab: RelationVocab, config: RunConfig,
               out_dir=None, model: BidirectionalTagger | None = None,
               on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train with Adam, linear warmup, validation-F1 model selection and early stopping.

    Writes ``train_log.jsonl`` and ``best.pt`` to ``out_dir`` when given. The
    best weights are loaded back into the returned model.
    """
    seed_everything(config.seed)
    if model is None:
        model = build_model(config, vocab, list(train) + list(valid))
    tc = config.train
    gold = [build_gold_tensors(ex, vocab) for ex in train]
    steps_per_epoch = math.ceil(len(train) / tc.batch_size)
    total_steps = steps_per_epoch * tc.max_epochs
    optimizer = torch.optim.Adam(model.parameters(), lr=tc.lr)
    stopper = EarlyStopping(tc.patience)
    rng = random.Random(config.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train_log.jsonl", "w")
        log_file.write(json.dumps({"meta": {"run_config": config.to_flat(), "seed": config.seed}}) + "\n")

    best_state, best_epoch, step, history = None, 0, 0, []
    epoch = 0
    try:
        for epoch in range(1, tc.max_epochs + 1):
            model.train()
            order = list(range(len(train)))
            rng.shuffle(order)
            sums: dict[str, float] = {}
            for i in range(0, len(order), tc.batch_size):
                idx = order[i:i + tc.batch_size]
                step += 1
                lr = warmup_lr(step, total_steps, tc.lr, tc.warmup_fraction)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                breakdown = train_step(model, [train[j] for j in idx], [gold[j] for j in idx], config)
                loss = breakdown.total
                if not torch.isfinite(loss):
                    dump = {"epoch": epoch, "step": step, "batch": [train[j].uid for j in idx],
                            "tokens": [train[j].tokens for j in idx], "losses": breakdown.to_dict()}
                    if out_dir is not None:
                        (out_dir / "diverged_batch.json").write_text(json.dumps(dump, indent=2))
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}", dump)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                for k, v in breakdown.to_dict().items():
                    sums[k] = sums.get(k, 0.0) + v
            record = {"epoch": epoch, "step": step, "lr": lr,
                      **{k: v / steps_per_epoch for k, v in sums.items()}}
            stop = False
            if epoch % tc.eval_every == 0 or epoch == tc.max_epochs:
                p, r, f1 = evaluate(model, valid, config)
                record.update(valid_precision=p, valid_recall=r, valid_f1=f1)
                improved = f1 > stopper.best
                stop = stopper.update(f1)
                if improved:
                    best_state = copy.deepcopy(model.state_dict())
                    best_epoch = epoch
                    if out_dir is not None:
                        save_checkpoint(out_dir / "best.pt", model, vocab, config, {"epoch": epoch, "valid_f1": f1})
                if tc.target_f1 is not None and f1 >= tc.target_f1:
                    stop = True
            history.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            if on_epoch is not None:
                on_epoch(record)
            logger.info("epoch %d loss %.4f valid_f1 %s", epoch, record.get("total", float("nan")),
                        record.get("valid_f1"))
            if stop:
                break
    finally:
        if log_file is not None:
            log_file.close()
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, max(stopper.best, 0.0), best_epoch, epoch, history,
                       out_dir / "best.pt" if out_dir is not None and best_state is not None else None)
