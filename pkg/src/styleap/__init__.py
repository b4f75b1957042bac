"""Retrieval-based style activation prompting for stylized machine translation."""

from .corpus import ParallelPair, Sentence, StyledCorpus, TokenizerModel, train_tokenizer
from .datastore import Datastore, build, build_ivf
from .embedder import HashingEmbedder, LearnedEmbedder, get_provider
from .errors import StyleAPError
from .evaluation import StyleClassifier, corpus_bleu, transfer_ratio
from .pipeline import StyleAPPipeline, StyledRequest, StyledResult, translate_styled, translate_tagged
from .prompt_builder import MixConfig, PromptedPair, build_dataset, build_training_pair, select_prompt_inference
from .translator import ModelConfig, TrainConfig, TranslationModel

__version__ = "0.1.0"

__all__ = [
    "Datastore", "HashingEmbedder", "LearnedEmbedder", "MixConfig", "ModelConfig", "ParallelPair",
    "PromptedPair", "Sentence", "StyleAPError", "StyleAPPipeline", "StyleClassifier", "StyledCorpus",
    "StyledRequest", "StyledResult", "TokenizerModel", "TrainConfig", "TranslationModel", "build",
    "build_dataset", "build_ivf", "build_training_pair", "corpus_bleu", "get_provider",
    "select_prompt_inference", "train_tokenizer", "transfer_ratio", "translate_styled", "translate_tagged",
]
