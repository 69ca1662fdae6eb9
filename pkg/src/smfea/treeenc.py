"""Fixed-topology context-aware tree encoder shared by both modalities.

The encoder maps one instance-level embedding into seven node inputs, runs a
tree-LSTM over the fixed 7-node topology (leaves 1,3,5,7 first, then nodes
2 and 6, then the root 4), classifies every node against the fragment or
relation dictionary, and reads the node hidden states back out as a single
structured embedding.

Two cell variants are provided. ``double_forget`` (default) applies the
parent's own forget gate on top of the child-gated cell sum:
``c_t = i_t*u_t + f_t * sum_k(f_k * c_k)``. ``childsum`` is the standard
child-sum cell with one forget gate per child and no outer gate.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import torch
import torch.nn as nn

from .errors import ConfigurationError, NumericError
from .referral import LEAF_NODES, RELATION_NODES, node_kind

CELL_VARIANTS = ("double_forget", "childsum")

# slot = node index - 1; states are stored as (B, 7, d) in node-index order
LEAF_SLOTS = tuple(i - 1 for i in LEAF_NODES)
RELATION_SLOTS = tuple(i - 1 for i in RELATION_NODES)
# parents in evaluation order, with their children's slots
PARENT_STEPS = ((1, (0, 2)), (5, (4, 6)), (3, (1, 5)))


@dataclass
class TreeNodeStates:
    """Per-node tensors for one batch, in node-index order along dim 1."""

    inputs: torch.Tensor  # (B, 7, d_node)
    cell: torch.Tensor  # (B, 7, d_node)
    hidden: torch.Tensor  # (B, 7, d_node)
    fragment_probs: torch.Tensor | None = None  # (B, 4, C_e) for nodes 1,3,5,7
    relation_probs: torch.Tensor | None = None  # (B, 3, C_r) for nodes 2,4,6


class TreeEncoder(nn.Module):
    """Parse an instance embedding into seven classified, context-aware nodes."""

    def __init__(
        self,
        d_embed: int,
        d_node: int,
        n_fragment_labels: int,
        n_relation_labels: int,
        cell_variant: str = "double_forget",
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if cell_variant not in CELL_VARIANTS:
            raise ConfigurationError(
                f"cell_variant must be one of {CELL_VARIANTS}, got {cell_variant!r}"
            )
        self.cell_variant = cell_variant
        self.input_maps = nn.ModuleList(nn.Linear(d_embed, d_node) for _ in range(7))
        self.w_input = nn.Linear(d_node, d_node)
        self.w_forget = nn.Linear(d_node, d_node)
        self.w_output = nn.Linear(d_node, d_node)
        self.w_update = nn.Linear(d_node, d_node)
        self.u_input = nn.Linear(d_node, d_node, bias=False)
        self.u_forget = nn.Linear(d_node, d_node, bias=False)
        self.u_output = nn.Linear(d_node, d_node, bias=False)
        self.u_update = nn.Linear(d_node, d_node, bias=False)
        self.fragment_head = nn.Linear(d_node, n_fragment_labels)
        self.relation_head = nn.Linear(d_node, n_relation_labels)
        self.readouts = nn.ModuleList(nn.Linear(d_node, d_embed) for _ in range(7))
        self.to(dtype)

    def map_node_inputs(self, instance: torch.Tensor) -> torch.Tensor:
        """Seven linear views of the instance embedding: (B, D) -> (B, 7, d_node)."""
        return torch.stack([m(instance) for m in self.input_maps], dim=1)

    def _gates(self, x: torch.Tensor, h_tilde: torch.Tensor):
        i = torch.sigmoid(self.w_input(x) + self.u_input(h_tilde))
        f = torch.sigmoid(self.w_forget(x) + self.u_forget(h_tilde))
        o = torch.sigmoid(self.w_output(x) + self.u_output(h_tilde))
        u = torch.tanh(self.w_update(x) + self.u_update(h_tilde))
        return i, f, o, u

    @staticmethod
    def _check_finite(hidden: torch.Tensor, node_index: int) -> None:
        if not torch.isfinite(hidden).all():
            raise NumericError(f"non-finite hidden state at tree node {node_index}")

    def tree_forward(self, inputs: torch.Tensor) -> TreeNodeStates:
        """Run the cell bottom-up over (B, 7, d_node) node inputs."""
        cell = [None] * 7
        hidden = [None] * 7
        forget = [None] * 7

        # leaves have no children: the forget path vanishes and c = i * u
        leaf_x = inputs[:, LEAF_SLOTS]
        i, f, o, u = self._gates(leaf_x, torch.zeros_like(leaf_x))
        leaf_c = i * u
        leaf_h = o * torch.tanh(leaf_c)
        for pos, slot in enumerate(LEAF_SLOTS):
            cell[slot] = leaf_c[:, pos]
            hidden[slot] = leaf_h[:, pos]
            forget[slot] = f[:, pos]
            self._check_finite(hidden[slot], slot + 1)

        for slot, child_slots in PARENT_STEPS:
            x = inputs[:, slot]
            h_tilde = sum(hidden[k] for k in child_slots)
            i, f, o, u = self._gates(x, h_tilde)
            if self.cell_variant == "double_forget":
                child_term = sum(forget[k] * cell[k] for k in child_slots)
                c = i * u + f * child_term
            else:
                # one forget gate per child, driven by that child's hidden state
                child_term = sum(
                    torch.sigmoid(self.w_forget(x) + self.u_forget(hidden[k])) * cell[k]
                    for k in child_slots
                )
                c = i * u + child_term
            cell[slot] = c
            hidden[slot] = o * torch.tanh(c)
            forget[slot] = f
            self._check_finite(hidden[slot], slot + 1)

        return TreeNodeStates(
            inputs=inputs, cell=torch.stack(cell, dim=1), hidden=torch.stack(hidden, dim=1)
        )

    def classify_nodes(self, states: TreeNodeStates) -> TreeNodeStates:
        """Attach per-node category distributions (softmax over each dictionary)."""
        fragment_probs = torch.softmax(
            self.fragment_head(states.hidden[:, LEAF_SLOTS]), dim=-1
        )
        relation_probs = torch.softmax(
            self.relation_head(states.hidden[:, RELATION_SLOTS]), dim=-1
        )
        return replace(states, fragment_probs=fragment_probs, relation_probs=relation_probs)

    def tree_embedding(self, states: TreeNodeStates) -> torch.Tensor:
        """Sum of the per-node readouts: (B, 7, d_node) hiddens -> (B, d_embed)."""
        return sum(self.readouts[slot](states.hidden[:, slot]) for slot in range(7))

    def forward(self, instance: torch.Tensor) -> tuple[TreeNodeStates, torch.Tensor]:
        states = self.classify_nodes(self.tree_forward(self.map_node_inputs(instance)))
        return states, self.tree_embedding(states)


def export_node_predictions(states: TreeNodeStates, dicts) -> list[list[dict]]:
    """Top-1 label and probability per node, one record list per batch item."""
    if states.fragment_probs is None or states.relation_probs is None:
        raise ConfigurationError("states carry no distributions; run classify_nodes first")
    batch = states.hidden.shape[0]
    fragment_probs = states.fragment_probs.detach()
    relation_probs = states.relation_probs.detach()
    records = []
    for b in range(batch):
        nodes = {}
        for pos, node in enumerate(LEAF_NODES):
            prob, label = fragment_probs[b, pos].max(dim=-1)
            nodes[node] = (dicts.fragment_labels[int(label)], float(prob))
        for pos, node in enumerate(RELATION_NODES):
            prob, label = relation_probs[b, pos].max(dim=-1)
            nodes[node] = (dicts.relation_labels[int(label)], float(prob))
        records.append(
            [
                {
                    "node": node,
                    "kind": node_kind(node),
                    "top1_label": nodes[node][0],
                    "prob": nodes[node][1],
                }
                for node in range(1, 8)
            ]
        )
    return records
