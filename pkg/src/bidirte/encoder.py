"""Token representation providers.

Every provider maps a batch of word-token lists to an ``(B, L, d)`` tensor of
word-level vectors plus a ``(B, L)`` padding mask. ``TinyEncoder`` is a small
randomly initialised transformer for desk-scale runs; ``PretrainedEncoder``
wraps a Hugging Face checkpoint and pools sub-words back to words.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import torch
from torch import nn

PAD, UNK = "[PAD]", "[UNK]"


@dataclass
class TokenReps:
    h: torch.Tensor  # (l, d)
    attention_mask: torch.Tensor  # (l,)

    def __len__(self) -> int:
        return self.h.shape[0]


@dataclass
class DualViews:
    h_a: torch.Tensor
    h_b: torch.Tensor
    attention_mask: torch.Tensor


class WordVocab:
    def __init__(self, tokens: Iterable[str] = (), min_count: int = 1):
        counts = Counter(tokens)
        self.itos = [PAD, UNK] + sorted(t for t, c in counts.items() if c >= min_count and t not in (PAD, UNK))
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "WordVocab":
        v = cls()
        v.itos = list(itos)
        v.stoi = {t: i for i, t in enumerate(v.itos)}
        return v

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        unk = self.stoi[UNK]
        return [self.stoi.get(t, unk) for t in tokens]


class RepresentationProvider(nn.Module):
    """Base class: ``forward(batch_tokens) -> (h, mask)``."""

    hidden_size: int
    max_len: int

    def _check(self, batch_tokens: Sequence[Sequence[str]]):
        for toks in batch_tokens:
            if len(toks) == 0:
                raise ValueError("cannot encode an empty token sequence")
            if len(toks) > self.max_len:
                raise ValueError(f"sequence of {len(toks)} tokens exceeds max_len={self.max_len}")

    def set_dropout(self, p: float) -> None:
        for m in self.modules():
            if isinstance(m, nn.Dropout):
                m.p = p
            elif isinstance(m, nn.MultiheadAttention):
                m.dropout = p
        if hasattr(self, "dropout_p"):
            self.dropout_p = p

    def encode(self, tokens: Sequence[str]) -> TokenReps:
        """Inference-mode encoding of one sentence; deterministic."""
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                h, mask = self([tokens])
        finally:
            self.train(was_training)
        return TokenReps(h[0], mask[0])

    def encode_dual(self, tokens: Sequence[str], seed: int | None = None) -> DualViews:
        """Two passes under independent dropout masks."""
        was_training = self.training
        self.train()
        try:
            with torch.random.fork_rng(enabled=seed is not None):
                if seed is not None:
                    torch.manual_seed(seed)
                h_a, mask = self([tokens])
                h_b, _ = self([tokens])
        finally:
            self.train(was_training)
        return DualViews(h_a[0], h_b[0], mask[0])

    def config(self) -> dict:
        raise NotImplementedError


class TinyEncoder(RepresentationProvider):
    def __init__(self, vocab: WordVocab, hidden_size: int = 64, num_layers: int = 2, num_heads: int = 4,
                 max_len: int = 100, dropout: float = 0.1):
        super().__init__()
        self.vocab = vocab
        self.hidden_size = hidden_size
        self.max_len = max_len
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.dropout_p = dropout
        self.tok = nn.Embedding(len(vocab), hidden_size, padding_idx=0)
        self.pos = nn.Embedding(max_len, hidden_size)
        self.norm = nn.LayerNorm(hidden_size)
        self.drop = nn.Dropout(dropout)
        layer = nn.TransformerEncoderLayer(hidden_size, num_heads, 4 * hidden_size, dropout=dropout,
                                           batch_first=True, activation="gelu")
        self.layers = nn.TransformerEncoder(layer, num_layers, enable_nested_tensor=False)

    def ids(self, batch_tokens: Sequence[Sequence[str]]) -> tuple[torch.Tensor, torch.Tensor]:
        width = max(len(t) for t in batch_tokens)
        ids = torch.zeros(len(batch_tokens), width, dtype=torch.long)
        mask = torch.zeros(len(batch_tokens), width, dtype=torch.bool)
        for i, toks in enumerate(batch_tokens):
            ids[i, :len(toks)] = torch.tensor(self.vocab.encode(toks), dtype=torch.long)
            mask[i, :len(toks)] = True
        return ids, mask

    def forward_ids(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        pos = torch.arange(ids.shape[1], device=ids.device)
        x = self.drop(self.norm(self.tok(ids) + self.pos(pos)[None]))
        h = self.layers(x, src_key_padding_mask=~mask)
        return h * mask[..., None]

    def forward(self, batch_tokens: Sequence[Sequence[str]]) -> tuple[torch.Tensor, torch.Tensor]:
        self._check(batch_tokens)
        ids, mask = self.ids(batch_tokens)
        return self.forward_ids(ids, mask), mask

    def config(self) -> dict:
        return {"backend": "tiny", "hidden_size": self.hidden_size, "num_layers": self.num_layers,
                "num_heads": self.num_heads, "max_len": self.max_len, "dropout": self.dropout_p,
                "vocab": self.vocab.itos}


class PretrainedEncoder(RepresentationProvider):
    """Hugging Face encoder; each word is represented by its first sub-word."""

    def __init__(self, name_or_path: str, max_len: int = 100, dropout: float = 0.1,
                 model=None, tokenizer=None):
        super().__init__()
        from transformers import AutoModel, AutoTokenizer

        self.name = name_or_path
        self.max_len = max_len
        self.tokenizer = tokenizer if tokenizer is not None else AutoTokenizer.from_pretrained(name_or_path)
        if model is None:
            model = AutoModel.from_pretrained(name_or_path, hidden_dropout_prob=dropout,
                                              attention_probs_dropout_prob=dropout)
        self.model = model
        self.hidden_size = model.config.hidden_size
        self.dropout_p = dropout

    def forward(self, batch_tokens: Sequence[Sequence[str]]) -> tuple[torch.Tensor, torch.Tensor]:
        self._check(batch_tokens)
        enc = self.tokenizer([list(t) for t in batch_tokens], is_split_into_words=True,
                             return_tensors="pt", padding=True, truncation=True)
        out = self.model(input_ids=enc["input_ids"], attention_mask=enc["attention_mask"]).last_hidden_state
        width = max(len(t) for t in batch_tokens)
        index = torch.zeros(len(batch_tokens), width, dtype=torch.long)
        mask = torch.zeros(len(batch_tokens), width, dtype=torch.bool)
        for b in range(len(batch_tokens)):
            seen = set()
            for pos, w in enumerate(enc.word_ids(b)):
                if w is not None and w not in seen:
                    seen.add(w)
                    index[b, w] = pos
                    mask[b, w] = True
        h = torch.gather(out, 1, index[..., None].expand(-1, -1, out.shape[-1]))
        return h * mask[..., None], mask

    def config(self) -> dict:
        return {"backend": "pretrained", "name": self.name, "max_len": self.max_len, "dropout": self.dropout_p}


def build_encoder(cfg: dict) -> RepresentationProvider:
    if cfg["backend"] == "tiny":
        return TinyEncoder(WordVocab.from_list(cfg["vocab"]), cfg["hidden_size"], cfg["num_layers"],
                           cfg["num_heads"], cfg["max_len"], cfg["dropout"])
    if cfg["backend"] == "pretrained":
        return PretrainedEncoder(cfg["name"], cfg["max_len"], cfg["dropout"])
    raise ValueError(f"unknown encoder backend {cfg['backend']!r}")


def span_embed(reps, span: tuple[int, int]) -> torch.Tensor:
    """Mean of the token vectors over the inclusive ``span``."""
    h = reps.h if isinstance(reps, TokenReps) else reps
    start, end = span
    if start > end:
        raise ValueError(f"inverted span {span}")
    if start < 0 or end >= h.shape[0]:
        raise ValueError(f"span {span} outside [0, {h.shape[0]})")
    return h[start:end + 1].mean(dim=0)


def span_pool_matrix(spans: Sequence[tuple[int, int]], length: int, dtype=torch.float32) -> torch.Tensor:
    """(S, length) averaging weights so that ``M @ h`` gives one span mean per row."""
    m = torch.zeros(len(spans), length, dtype=dtype)
    for i, (s, e) in enumerate(spans):
        if s > e or s < 0 or e >= length:
            raise ValueError(f"span {(s, e)} invalid for length {length}")
        m[i, s:e + 1] = 1.0 / (e - s + 1)
    return m
