"""Retrieval scoring, R@K / rSum metrics, and the query runtime."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .corpus import Dataset
from .errors import ConfigurationError, InputError, NumericError
from .model import SmfeaModel, collate
from .vocab import CategoryDicts, WordVocab

DEFAULT_KS = (1, 5, 10)
DIRECTIONS = ("i2t", "t2i")


@dataclass
class SimilarityMatrix:
    """Dense image x sentence cosine scores with their id lists."""

    scores: np.ndarray  # (n_images, n_sentences)
    image_ids: list[str]
    sentence_ids: list[str]

    def __post_init__(self):
        n_img, n_sent = self.scores.shape
        if n_img != len(self.image_ids) or n_sent != len(self.sentence_ids):
            raise InputError("score matrix shape does not match the id lists")
        if len(set(self.image_ids)) != n_img or len(set(self.sentence_ids)) != n_sent:
            raise InputError("row/column ids must be unique")
        if not np.isfinite(self.scores).all():
            raise NumericError("non-finite similarity scores")


@dataclass
class GroundTruth:
    """Relevance multimaps for both retrieval directions."""

    i2t: dict[str, set[str]] = field(default_factory=dict)
    t2i: dict[str, set[str]] = field(default_factory=dict)

    @classmethod
    def from_pairs(cls, pairs: list[tuple[str, str]]) -> "GroundTruth":
        gt = cls()
        for image_id, sentence_id in pairs:
            gt.i2t.setdefault(image_id, set()).add(sentence_id)
            gt.t2i.setdefault(sentence_id, set()).add(image_id)
        return gt

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "GroundTruth":
        return cls.from_pairs([(s.image_id, s.sentence_id) for s in dataset])


def score_all(
    image_embeddings: np.ndarray,
    sentence_embeddings: np.ndarray,
    image_ids: list[str],
    sentence_ids: list[str],
) -> SimilarityMatrix:
    """Pairwise cosine similarity between fused image and sentence embeddings."""
    a = np.asarray(image_embeddings, dtype=np.float64)
    b = np.asarray(sentence_embeddings, dtype=np.float64)
    norms_a = np.linalg.norm(a, axis=1, keepdims=True)
    norms_b = np.linalg.norm(b, axis=1, keepdims=True)
    if (norms_a == 0).any() or (norms_b == 0).any():
        raise NumericError("cosine similarity of a zero vector is undefined")
    scores = (a / norms_a) @ (b / norms_b).T
    return SimilarityMatrix(scores=scores, image_ids=list(image_ids), sentence_ids=list(sentence_ids))


def encode_dataset(
    model: SmfeaModel, dataset: Dataset, vocab: WordVocab, dicts: CategoryDicts,
    batch_size: int = 64,
) -> tuple[np.ndarray, np.ndarray, list[str], list[str]]:
    """Fused embeddings for every image and sentence in the dataset."""
    images, sentences = [], []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            batch = collate(dataset[start : start + batch_size], vocab, dicts, model.config.dtype)
            _, _, v_fused, _ = model.embed_images(batch.regions, batch.region_mask)
            _, _, s_fused, _ = model.embed_sentences(batch.token_ids, batch.lengths)
            images.append(v_fused.numpy())
            sentences.append(s_fused.numpy())
    image_ids = [s.image_id for s in dataset]
    sentence_ids = [s.sentence_id for s in dataset]
    return np.concatenate(images), np.concatenate(sentences), image_ids, sentence_ids


def score_dataset(
    model: SmfeaModel, dataset: Dataset, vocab: WordVocab, dicts: CategoryDicts
) -> SimilarityMatrix:
    return score_all(*encode_dataset(model, dataset, vocab, dicts))


def _ranked_candidates(scores: np.ndarray, ids: list[str]) -> list[str]:
    # descending score; ties broken by ascending id
    order = sorted(range(len(ids)), key=lambda j: (-scores[j], ids[j]))
    return [ids[j] for j in order]


def recall_at_k(
    sim: SimilarityMatrix, k: int, direction: str, ground_truth: GroundTruth
) -> float:
    """Fraction of queries whose top-k candidates contain a relevant id."""
    if direction not in DIRECTIONS:
        raise ConfigurationError(f"direction must be one of {DIRECTIONS}")
    if direction == "i2t":
        queries, candidates = sim.image_ids, sim.sentence_ids
        rows, relevant = sim.scores, ground_truth.i2t
    else:
        queries, candidates = sim.sentence_ids, sim.image_ids
        rows, relevant = sim.scores.T, ground_truth.t2i
    if k < 1 or k > len(candidates):
        raise ConfigurationError(f"k={k} outside 1..{len(candidates)} candidates")
    hits = 0
    for i, query in enumerate(queries):
        targets = relevant.get(query)
        if not targets:
            raise InputError(f"query {query!r} has no relevant ids in the ground truth")
        top = _ranked_candidates(rows[i], candidates)[:k]
        hits += any(candidate in targets for candidate in top)
    return hits / len(queries)


def rsum(sim: SimilarityMatrix, ground_truth: GroundTruth, ks=DEFAULT_KS) -> float:
    """100 x the sum of R@K over both directions; 600 is a perfect score."""
    return 100.0 * sum(
        recall_at_k(sim, k, direction, ground_truth)
        for direction in DIRECTIONS
        for k in ks
    )


def eval_report(sim: SimilarityMatrix, ground_truth: GroundTruth) -> dict:
    """The six recalls plus rSum, keyed for the JSON report."""
    report = {
        f"r{k}_{direction}": recall_at_k(sim, k, direction, ground_truth)
        for direction in DIRECTIONS
        for k in DEFAULT_KS
    }
    report["rsum"] = 100.0 * sum(report.values())
    return report


@dataclass
class RetrievalIndex:
    """A scored corpus ready to answer ranking queries by id."""

    sim: SimilarityMatrix

    def query_direction(self, query_id: str) -> str:
        if query_id in set(self.sim.image_ids):
            return "i2t"
        if query_id in set(self.sim.sentence_ids):
            return "t2i"
        raise InputError(f"unknown query id {query_id!r}")


def build_index(
    model: SmfeaModel, dataset: Dataset, vocab: WordVocab, dicts: CategoryDicts
) -> RetrievalIndex:
    return RetrievalIndex(sim=score_dataset(model, dataset, vocab, dicts))


def retrieve(query_id: str, index: RetrievalIndex, topk: int) -> list[tuple[str, float]]:
    """Top-k candidates for one query, deterministic tie-break by ascending id."""
    direction = index.query_direction(query_id)
    sim = index.sim
    if direction == "i2t":
        row = sim.scores[sim.image_ids.index(query_id)]
        candidates = sim.sentence_ids
    else:
        row = sim.scores.T[sim.sentence_ids.index(query_id)]
        candidates = sim.image_ids
    if topk < 1 or topk > len(candidates):
        raise ConfigurationError(f"topk={topk} outside 1..{len(candidates)} candidates")
    ranked = _ranked_candidates(row, candidates)[:topk]
    lookup = {candidate: row[j] for j, candidate in enumerate(candidates)}
    return [(candidate, float(lookup[candidate])) for candidate in ranked]


def node_accuracy(
    model: SmfeaModel, dataset: Dataset, vocab: WordVocab, dicts: CategoryDicts,
    batch_size: int = 64,
) -> float:
    """Fraction of correct node predictions over samples, nodes, and modalities."""
    correct = total = 0
    model.eval()
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            batch = collate(dataset[start : start + batch_size], vocab, dicts, model.config.dtype)
            outputs = model(batch)
            for states in (outputs.visual_states, outputs.textual_states):
                frag_pred = states.fragment_probs.argmax(dim=-1)
                rel_pred = states.relation_probs.argmax(dim=-1)
                correct += int((frag_pred == batch.fragment_targets).sum())
                correct += int((rel_pred == batch.relation_targets).sum())
                total += frag_pred.numel() + rel_pred.numel()
    return correct / total
