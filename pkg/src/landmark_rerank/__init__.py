"""Exact k-NN retrieval with label-aware two-stage re-ranking."""

from .embedding_store import EmbeddingSet, LabelTable, load_embeddings, merge_multiscale, \
    save_embeddings
from .knn import NeighborList, search, search_reference
from .rerank import RankedList, RerankContext, insert_step, rerank, sort_step
from .soft_voting import Prediction, PredictionTable, mark_known, predict_index, vote

__version__ = "0.1.0"
