"""Unsupervised tagging and dependency parsing over word embeddings.

A volume-preserving coupling flow maps observed embeddings to a latent space
where a structured prior (a Markov chain or a DMV) generates per-tag diagonal
Gaussians. Inference is exact and the likelihood is trained end to end.
"""
from .data_io import Corpus, DataError, EmbeddingTable, Sentence, load_corpus, load_embeddings
from .flow import Flow, forward_apply, init_flow, inverse_apply
from .joint import DMV, MARKOV, GaussianEmissions, JointModel, corpus_log_likelihood, sample_corpus
from .optim import Checkpoint, CheckpointError, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "CheckpointError", "Corpus", "DMV", "DataError", "EmbeddingTable", "Flow", "GaussianEmissions",
    "JointModel", "MARKOV", "Sentence", "TrainConfig", "corpus_log_likelihood", "forward_apply", "init_flow",
    "inverse_apply", "load_checkpoint", "load_corpus", "load_embeddings", "sample_corpus", "save_checkpoint", "train",
]
