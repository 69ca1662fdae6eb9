"""Structured multi-modal feature embedding and alignment, desk scale."""

from .config import TrainConfig
from .corpus import (
    Sample,
    SyntheticSpec,
    gen_synthetic_dataset,
    load_manifest,
    read_region_features,
    synth_samples,
    write_manifest,
    write_region_features,
)
from .engine import gradcheck, load_checkpoint, save_checkpoint, train
from .evaluation import GroundTruth, recall_at_k, retrieve, rsum, score_all
from .model import SmfeaModel, collate
from .objective import FusionWeights, LossBreakdown, joint_loss, triplet_loss
from .referral import LexiconTagger, ReferralTree, build_referral_tree, whiten_sentence
from .treeenc import TreeEncoder, TreeNodeStates
from .vocab import CategoryDicts, WordVocab, build_category_dicts, build_word_vocab

__version__ = "0.1.0"

__all__ = [
    "CategoryDicts",
    "FusionWeights",
    "GroundTruth",
    "LexiconTagger",
    "LossBreakdown",
    "ReferralTree",
    "Sample",
    "SmfeaModel",
    "SyntheticSpec",
    "TrainConfig",
    "TreeEncoder",
    "TreeNodeStates",
    "WordVocab",
    "build_category_dicts",
    "build_referral_tree",
    "build_word_vocab",
    "collate",
    "gen_synthetic_dataset",
    "gradcheck",
    "joint_loss",
    "load_checkpoint",
    "load_manifest",
    "read_region_features",
    "recall_at_k",
    "retrieve",
    "rsum",
    "save_checkpoint",
    "score_all",
    "synth_samples",
    "train",
    "triplet_loss",
    "whiten_sentence",
    "write_manifest",
    "write_region_features",
    "__version__",
]
