"""Intersectional two-sided fairness for matrix-factorization recommenders."""
from .data import (DataError, InteractionDataset, SplitDataset, generate_toy, load_dataset,
                   sample_negative, split_dataset)
from .evaluate import FairnessReport, UtilityMatrix, evaluate, fairness_report
from .model import EmbeddingTable, bpr_loss_and_grad, init_embeddings
from .train import TrainConfig, train

__version__ = "0.1.0"
