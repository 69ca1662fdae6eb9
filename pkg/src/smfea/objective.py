"""Fusion, cosine similarity, and the three training losses."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigurationError, InputError, NumericError, ShapeError
from .treeenc import TreeNodeStates

EPS_LOG = 1e-12
NORMALIZATION_TOL = 1e-4
NEGATIVE_MODES = ("sum", "hardest")


@dataclass(frozen=True)
class FusionWeights:
    """Mixing weights for the instance, tree, and concept embeddings."""

    beta_d: float = 0.6
    beta_t: float = 0.4
    beta_c: float = 0.0

    def __post_init__(self):
        betas = (self.beta_d, self.beta_t, self.beta_c)
        if any(b < 0 for b in betas):
            raise ConfigurationError(f"fusion weights must be nonnegative, got {betas}")
        if not any(b > 0 for b in betas):
            raise ConfigurationError("at least one fusion weight must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term loss values; total is their plain sum."""

    rank: float
    ce: float
    kl: float
    total: float


def fuse(
    instance: torch.Tensor,
    tree: torch.Tensor,
    weights: FusionWeights,
    concept: torch.Tensor | None = None,
) -> torch.Tensor:
    """Weighted sum of the available representations."""
    if concept is None:
        if weights.beta_c > 0:
            raise ConfigurationError(
                "beta_c > 0 but no concept representation was provided"
            )
        return weights.beta_d * instance + weights.beta_t * tree
    return weights.beta_d * instance + weights.beta_t * tree + weights.beta_c * concept


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine of two vectors; rejects zero vectors."""
    na, nb = torch.linalg.vector_norm(a), torch.linalg.vector_norm(b)
    if float(na.detach()) == 0.0 or float(nb.detach()) == 0.0:
        raise NumericError("cosine similarity of a zero vector is undefined")
    return (a * b).sum() / (na * nb)


def similarity_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarities between rows of (N, D) and (M, D)."""
    na = torch.linalg.vector_norm(a, dim=1, keepdim=True)
    nb = torch.linalg.vector_norm(b, dim=1, keepdim=True)
    if float(na.detach().min()) == 0.0 or float(nb.detach().min()) == 0.0:
        raise NumericError("cosine similarity of a zero vector is undefined")
    return (a / na) @ (b / nb).T


def triplet_loss(
    sim: torch.Tensor, margin: float = 0.2, negatives: str = "sum"
) -> torch.Tensor:
    """Bidirectional hinge ranking loss over an in-batch similarity matrix.

    The diagonal holds matched-pair similarities. ``sum`` accumulates the
    hinge over every in-batch negative in both directions; ``hardest`` keeps
    only the worst violation per query and direction.
    """
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {tuple(sim.shape)}")
    if negatives not in NEGATIVE_MODES:
        raise ConfigurationError(f"negatives must be one of {NEGATIVE_MODES}")
    b = sim.shape[0]
    matched = sim.diagonal()
    off_diag = ~torch.eye(b, dtype=torch.bool, device=sim.device)
    # rows: fixed image, negative sentences; columns: fixed sentence, negative images
    cost_sent = (margin - matched[:, None] + sim).clamp(min=0) * off_diag
    cost_img = (margin - matched[None, :] + sim).clamp(min=0) * off_diag
    if negatives == "hardest":
        return cost_sent.max(dim=1).values.sum() + cost_img.max(dim=0).values.sum()
    return cost_sent.sum() + cost_img.sum()


def _gather_log_probs(probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    if int(targets.min()) < 0 or int(targets.max()) >= probs.shape[-1]:
        raise InputError(
            f"label id out of range 0..{probs.shape[-1] - 1}: {int(targets.max())}"
        )
    picked = probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return torch.log(picked.clamp(min=EPS_LOG))


def node_ce_loss(
    visual: TreeNodeStates,
    textual: TreeNodeStates,
    fragment_targets: torch.Tensor,
    relation_targets: torch.Tensor,
) -> torch.Tensor:
    """Cross-entropy of both modalities' node predictions against the shared labels.

    Targets come from the referral tree: (B, 4) fragment ids for the leaves
    and (B, 3) relation ids for nodes 2, 4, 6. Sums over nodes, modalities,
    and the batch.
    """
    total = torch.zeros((), dtype=visual.hidden.dtype, device=visual.hidden.device)
    for states in (visual, textual):
        if states.fragment_probs is None or states.relation_probs is None:
            raise InputError("node distributions missing; run classify_nodes first")
        total = total - _gather_log_probs(states.fragment_probs, fragment_targets).sum()
        total = total - _gather_log_probs(states.relation_probs, relation_targets).sum()
    return total


def _check_normalized(probs: torch.Tensor, name: str) -> None:
    sums = probs.detach().sum(dim=-1)
    if not torch.isfinite(sums).all() or float((sums - 1).abs().max()) > NORMALIZATION_TOL:
        raise InputError(f"{name} distributions are not normalized")


def kl_alignment(visual: TreeNodeStates, textual: TreeNodeStates) -> torch.Tensor:
    """Sum over nodes of KL(visual distribution || textual distribution).

    Zero-probability visual entries contribute nothing; textual probabilities
    are clamped at 1e-12 before the log. Sums over the batch.
    """
    total = torch.zeros((), dtype=visual.hidden.dtype, device=visual.hidden.device)
    for p, q, name in (
        (visual.fragment_probs, textual.fragment_probs, "fragment"),
        (visual.relation_probs, textual.relation_probs, "relation"),
    ):
        if p is None or q is None:
            raise InputError("node distributions missing; run classify_nodes first")
        if p.shape != q.shape:
            raise InputError(f"{name} distributions disagree in shape")
        _check_normalized(p, name)
        _check_normalized(q, name)
        ratio = torch.log(p.clamp(min=EPS_LOG)) - torch.log(q.clamp(min=EPS_LOG))
        total = total + torch.where(p > 0, p * ratio, torch.zeros_like(p)).sum()
    return total


def joint_loss(
    sim: torch.Tensor,
    visual: TreeNodeStates,
    textual: TreeNodeStates,
    fragment_targets: torch.Tensor,
    relation_targets: torch.Tensor,
    margin: float = 0.2,
    negatives: str = "sum",
    rank_weight: float = 1.0,
    ce_weight: float = 1.0,
    kl_weight: float = 1.0,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Ranking + node classification + distribution alignment.

    Returns the differentiable total and a float breakdown of the weighted
    contributions (so the breakdown always sums to the total). The per-term
    weights default to 1 and exist for ablations only.
    """
    rank = rank_weight * triplet_loss(sim, margin=margin, negatives=negatives)
    ce = ce_weight * node_ce_loss(visual, textual, fragment_targets, relation_targets)
    kl = kl_weight * kl_alignment(visual, textual)
    total = rank + ce + kl
    breakdown = LossBreakdown(
        rank=float(rank.detach()),
        ce=float(ce.detach()),
        kl=float(kl.detach()),
        total=float(total.detach()),
    )
    return total, breakdown
