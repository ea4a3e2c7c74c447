"""Commonsense-knowledge injection for a visual-linguistic transformer, in numpy."""

from .config import Config
from .data import Instance, load_jsonl, make_synthetic, write_jsonl
from .embedding import EmbedTables, Vocab, embed, geo_embed
from .encoder import Encoder, mask_attention
from .kb import Fact, KnowledgeBase, ingest_kb, query_entities
from .model import Model
from .pipeline import EnrichedSequence, Region, VisibleMatrix, assemble, strip_injected, tokenize
from .task import ScoreVector, evaluate, predict, score_pair, train

__all__ = [
    "Config", "Instance", "load_jsonl", "make_synthetic", "write_jsonl",
    "EmbedTables", "Vocab", "embed", "geo_embed", "Encoder", "mask_attention",
    "Fact", "KnowledgeBase", "ingest_kb", "query_entities", "Model",
    "EnrichedSequence", "Region", "VisibleMatrix", "assemble", "strip_injected", "tokenize",
    "ScoreVector", "evaluate", "predict", "score_pair", "train",
]
