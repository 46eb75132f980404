"""Bidirectional cascade tagging with supervised contrastive pre-shaping for relation triple extraction."""
from .corpus import (Example, Overlap, RawExample, RelationVocab, SpanTriple, TagTensors, build_gold_tensors,
                     classify_overlap, load_dataset, tokenize_align)
from .contrastive import ContrastiveConfig, ContrastiveGroup, build_groups, loss_l1, loss_l2, loss_lc
from .decode import DecodeConfig, Prediction, decode_grids, infer, pair_spans
from .metrics import EvalReport, match_triple, micro_prf, report
from .model import BidirectionalTagger, ModelConfig

__version__ = "0.1.0"
