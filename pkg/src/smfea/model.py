"""Full model: both modality pipelines plus batch collation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import TrainConfig
from .corpus import Dataset
from .encoders import RegionPooling, SentenceEncoder
from .errors import ConfigurationError
from .objective import fuse
from .treeenc import TreeEncoder, TreeNodeStates
from .vocab import PAD_ID, CategoryDicts, WordVocab


@dataclass
class Batch:
    """Collated tensors for one mini-batch."""

    image_ids: list[str]
    sentence_ids: list[str]
    regions: torch.Tensor  # (B, K, d_region)
    region_mask: torch.Tensor  # (B, K) bool
    token_ids: torch.Tensor  # (B, N) long
    lengths: torch.Tensor  # (B,) long
    fragment_targets: torch.Tensor  # (B, 4) long
    relation_targets: torch.Tensor  # (B, 3) long

    def __len__(self) -> int:
        return len(self.image_ids)


def collate(
    samples: Dataset,
    vocab: WordVocab,
    dicts: CategoryDicts,
    dtype: torch.dtype = torch.float32,
) -> Batch:
    """Pad and encode a list of samples into one batch."""
    max_regions = max(s.features.shape[0] for s in samples)
    max_tokens = max(len(s.tokens) for s in samples)
    d_region = samples[0].features.shape[1]

    regions = torch.zeros(len(samples), max_regions, d_region, dtype=dtype)
    region_mask = torch.zeros(len(samples), max_regions, dtype=torch.bool)
    token_ids = torch.full((len(samples), max_tokens), PAD_ID, dtype=torch.long)
    lengths = torch.zeros(len(samples), dtype=torch.long)
    fragment_targets = torch.zeros(len(samples), 4, dtype=torch.long)
    relation_targets = torch.zeros(len(samples), 3, dtype=torch.long)

    for b, sample in enumerate(samples):
        k = sample.features.shape[0]
        regions[b, :k] = torch.as_tensor(np.asarray(sample.features), dtype=dtype)
        region_mask[b, :k] = True
        ids = vocab.encode(sample.tokens)
        token_ids[b, : len(ids)] = torch.tensor(ids, dtype=torch.long)
        lengths[b] = len(ids)
        leaf_ids, relation_ids = dicts.encode_tree(sample.tree)
        fragment_targets[b] = torch.tensor(leaf_ids, dtype=torch.long)
        relation_targets[b] = torch.tensor(relation_ids, dtype=torch.long)

    return Batch(
        image_ids=[s.image_id for s in samples],
        sentence_ids=[s.sentence_id for s in samples],
        regions=regions,
        region_mask=region_mask,
        token_ids=token_ids,
        lengths=lengths,
        fragment_targets=fragment_targets,
        relation_targets=relation_targets,
    )


@dataclass
class ModelOutputs:
    """Everything the objective and the metrics need from one forward pass."""

    visual_instance: torch.Tensor
    textual_instance: torch.Tensor
    visual_states: TreeNodeStates
    textual_states: TreeNodeStates
    visual_fused: torch.Tensor
    textual_fused: torch.Tensor
    region_attention: torch.Tensor
    word_attention: torch.Tensor


class SmfeaModel(nn.Module):
    """Two instance encoders, two tree encoders with shared labels, weighted fusion."""

    def __init__(
        self,
        config: TrainConfig,
        vocab_size: int,
        n_fragment_labels: int,
        n_relation_labels: int,
    ):
        super().__init__()
        self.config = config
        self.meta = {
            "vocab_size": vocab_size,
            "n_fragment_labels": n_fragment_labels,
            "n_relation_labels": n_relation_labels,
        }
        dtype = config.dtype
        self.region_pool = RegionPooling(
            config.d_region, config.d_embed, config.temperature, dtype=dtype
        )
        self.sentence_encoder = SentenceEncoder(
            vocab_size, config.word_dim, config.d_embed, config.temperature, dtype=dtype
        )
        tree_args = dict(
            d_embed=config.d_embed,
            d_node=config.d_node,
            n_fragment_labels=n_fragment_labels,
            n_relation_labels=n_relation_labels,
            cell_variant=config.cell_variant,
            dtype=dtype,
        )
        self.visual_tree = TreeEncoder(**tree_args)
        self.textual_tree = TreeEncoder(**tree_args)

    def embed_images(
        self, regions: torch.Tensor, mask: torch.Tensor | None = None,
        concepts: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, TreeNodeStates, torch.Tensor, torch.Tensor]:
        """Returns (instance, tree states, fused, attention weights)."""
        instance, attention = self.region_pool(regions, mask)
        states, tree_emb = self.visual_tree(instance)
        fused = fuse(instance, tree_emb, self.config.fusion_weights, concepts)
        return instance, states, fused, attention

    def embed_sentences(
        self, token_ids: torch.Tensor, lengths: torch.Tensor,
        concepts: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, TreeNodeStates, torch.Tensor, torch.Tensor]:
        """Returns (instance, tree states, fused, attention weights)."""
        _, instance, attention = self.sentence_encoder(token_ids, lengths)
        states, tree_emb = self.textual_tree(instance)
        fused = fuse(instance, tree_emb, self.config.fusion_weights, concepts)
        return instance, states, fused, attention

    def forward(self, batch: Batch, concepts: tuple | None = None) -> ModelOutputs:
        if self.config.beta_c > 0 and concepts is None:
            raise ConfigurationError(
                "beta_c > 0 requires concept vectors for both modalities"
            )
        visual_concepts, textual_concepts = concepts if concepts else (None, None)
        v_instance, v_states, v_fused, v_attn = self.embed_images(
            batch.regions, batch.region_mask, visual_concepts
        )
        s_instance, s_states, s_fused, s_attn = self.embed_sentences(
            batch.token_ids, batch.lengths, textual_concepts
        )
        return ModelOutputs(
            visual_instance=v_instance,
            textual_instance=s_instance,
            visual_states=v_states,
            textual_states=s_states,
            visual_fused=v_fused,
            textual_fused=s_fused,
            region_attention=v_attn,
            word_attention=s_attn,
        )
