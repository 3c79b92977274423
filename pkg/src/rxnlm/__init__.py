"""Reaction language modelling: tokenizer, SMILES canonicalizer, mask-filling
transformer, decoding, task heads with LoRA, and an MCTS retrosynthesis planner."""

__version__ = "0.1.0"

from .vocab import SmilesTokenizer, Vocabulary, decode, default_vocabulary, encode, load_vocabulary, tokenize
from .smiles import MolecularGraph, SmilesSyntaxError, canonical_smiles, canonicalize, is_valid_smiles, parse_smiles
from .corpus import ReactionRecord, load_corpus, masked_examples, parse_reaction, split_dataset
from .model import ModelConfig, Seq2SeqTransformer
from .decoding import beam_search, exhaustive_search, top_k_sample, top_p_sample
from .metrics import auc, mae, r_squared, rmse, syntax_error_rate, top_k_accuracy
from .training import ReactionLM, gradient_check
from .heads import TaskHeadClassifier, TaskHeadRegressor, apply_lora
from .planner import PlannerConfig, RetroModels, RouteReport, ToyChemistry, plan
from .introspection import EmbeddingPCA, export_attention, pca_project, token_distance

__all__ = [
    "EmbeddingPCA", "ModelConfig", "MolecularGraph", "PlannerConfig", "ReactionLM", "ReactionRecord",
    "RetroModels", "RouteReport", "Seq2SeqTransformer", "SmilesSyntaxError", "SmilesTokenizer",
    "TaskHeadClassifier", "TaskHeadRegressor", "ToyChemistry", "Vocabulary", "apply_lora", "auc",
    "beam_search", "canonical_smiles", "canonicalize", "decode", "default_vocabulary", "encode",
    "exhaustive_search", "export_attention", "gradient_check", "is_valid_smiles", "load_corpus",
    "load_vocabulary", "mae", "masked_examples", "parse_reaction", "parse_smiles", "pca_project", "plan",
    "r_squared", "rmse", "split_dataset", "syntax_error_rate", "token_distance", "tokenize",
    "top_k_accuracy", "top_k_sample", "top_p_sample",
]
