import math

import numpy as np
import pytest
import torch

from smfea.errors import ConfigurationError, InputError, NumericError, ShapeError
from smfea.objective import (
    FusionWeights,
    LossBreakdown,
    cosine_similarity,
    fuse,
    joint_loss,
    kl_alignment,
    node_ce_loss,
    similarity_matrix,
    triplet_loss,
)
from smfea.treeenc import TreeNodeStates
from tests.oracles import ce_loss_oracle, kl_oracle, triplet_loss_oracle


def random_states(b=2, ce=5, cr=4, seed=0, probs=None):
    g = torch.Generator().manual_seed(seed)
    zeros = torch.zeros(b, 7, 3, dtype=torch.float64)
    if probs is None:
        frag = torch.softmax(torch.randn(b, 4, ce, generator=g, dtype=torch.float64), dim=-1)
        rel = torch.softmax(torch.randn(b, 3, cr, generator=g, dtype=torch.float64), dim=-1)
    else:
        frag, rel = probs
    return TreeNodeStates(
        inputs=zeros, cell=zeros, hidden=zeros, fragment_probs=frag, relation_probs=rel
    )


# -- fusion -------------------------------------------------------------------


def test_fusion_weights_validate():
    with pytest.raises(ConfigurationError):
        FusionWeights(-0.1, 0.5, 0.0)
    with pytest.raises(ConfigurationError):
        FusionWeights(0.0, 0.0, 0.0)


def test_fuse_identity_on_instance_only():
    d = torch.randn(3, 8, dtype=torch.float64)
    t = torch.randn(3, 8, dtype=torch.float64)
    fused = fuse(d, t, FusionWeights(1.0, 0.0, 0.0))
    assert torch.equal(fused, d)


def test_fuse_common_vector_with_default_paper_weights():
    u = torch.randn(2, 6, dtype=torch.float64)
    fused = fuse(u, u, FusionWeights(0.6, 0.2, 0.2), concept=u)
    assert torch.allclose(fused, u, atol=1e-12)


def test_fuse_without_concept_requires_zero_beta_c():
    d = torch.randn(1, 4)
    with pytest.raises(ConfigurationError):
        fuse(d, d, FusionWeights(0.6, 0.2, 0.2), concept=None)
    # the concept-disabled default works without a concept vector
    fused = fuse(d, d, FusionWeights(0.6, 0.4, 0.0))
    assert torch.allclose(fused, d)


def test_fuse_weighted_sum():
    d = torch.tensor([[1.0, 0.0]])
    t = torch.tensor([[0.0, 1.0]])
    c = torch.tensor([[1.0, 1.0]])
    fused = fuse(d, t, FusionWeights(0.6, 0.2, 0.2), concept=c)
    assert torch.allclose(fused, torch.tensor([[0.8, 0.4]]))


# -- cosine --------------------------------------------------------------------


def test_cosine_self_is_one():
    u = torch.randn(9, dtype=torch.float64)
    assert float(cosine_similarity(u, u)) == pytest.approx(1.0, abs=1e-12)


def test_cosine_orthogonal_is_zero():
    a = torch.tensor([1.0, 0.0])
    b = torch.tensor([0.0, 1.0])
    assert float(cosine_similarity(a, b)) == pytest.approx(0.0, abs=1e-12)


def test_cosine_matches_formula_oracle():
    rng = np.random.default_rng(5)
    for _ in range(20):
        a, b = rng.standard_normal(7), rng.standard_normal(7)
        expected = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
        got = float(cosine_similarity(torch.tensor(a), torch.tensor(b)))
        assert got == pytest.approx(expected, abs=1e-6)


def test_cosine_rejects_zero_vector():
    with pytest.raises(NumericError):
        cosine_similarity(torch.zeros(3), torch.ones(3))
    with pytest.raises(NumericError):
        similarity_matrix(torch.zeros(2, 3), torch.ones(2, 3))


def test_cosine_symmetry():
    a, b = torch.randn(5, dtype=torch.float64), torch.randn(5, dtype=torch.float64)
    assert float(cosine_similarity(a, b)) == pytest.approx(
        float(cosine_similarity(b, a)), abs=1e-12
    )


# -- triplet ranking -----------------------------------------------------------


def test_triplet_zero_on_separated_batch():
    sim = torch.full((4, 4), -1.0, dtype=torch.float64)
    sim.fill_diagonal_(1.0)
    assert float(triplet_loss(sim, margin=0.2)) == 0.0


def test_triplet_tie_case_analytic():
    # B=2 with every similarity equal: 2 negatives x 2 directions, each hinge = margin
    sim = torch.full((2, 2), 0.37, dtype=torch.float64)
    assert float(triplet_loss(sim, margin=0.2)) == pytest.approx(0.8, abs=1e-12)


def test_triplet_matches_bruteforce_oracle():
    rng = np.random.default_rng(11)
    for _ in range(25):
        sim = rng.uniform(-1, 1, size=(4, 4))
        expected = triplet_loss_oracle(sim, margin=0.2)
        got = float(triplet_loss(torch.tensor(sim), margin=0.2))
        assert got == pytest.approx(expected, abs=1e-10)


def test_triplet_hardest_matches_bruteforce_oracle():
    rng = np.random.default_rng(13)
    for _ in range(25):
        sim = rng.uniform(-1, 1, size=(5, 5))
        expected = triplet_loss_oracle(sim, margin=0.2, hardest=True)
        got = float(triplet_loss(torch.tensor(sim), margin=0.2, negatives="hardest"))
        assert got == pytest.approx(expected, abs=1e-10)


def test_triplet_rejects_non_square():
    with pytest.raises(ShapeError):
        triplet_loss(torch.zeros(2, 3))


def test_triplet_invariant_to_embedding_scale():
    g = torch.Generator().manual_seed(4)
    a = torch.randn(4, 6, generator=g, dtype=torch.float64)
    b = torch.randn(4, 6, generator=g, dtype=torch.float64)
    base = float(triplet_loss(similarity_matrix(a, b)))
    scaled = float(triplet_loss(similarity_matrix(3.7 * a, 0.2 * b)))
    assert scaled == pytest.approx(base, abs=1e-10)


# -- node classification loss ----------------------------------------------------


def test_ce_zero_for_one_hot_correct_predictions():
    frag = torch.zeros(1, 4, 5, dtype=torch.float64)
    rel = torch.zeros(1, 3, 4, dtype=torch.float64)
    frag_targets = torch.tensor([[0, 1, 2, 3]])
    rel_targets = torch.tensor([[0, 1, 2]])
    for pos in range(4):
        frag[0, pos, frag_targets[0, pos]] = 1.0
    for pos in range(3):
        rel[0, pos, rel_targets[0, pos]] = 1.0
    states = random_states(b=1, probs=(frag, rel))
    loss = node_ce_loss(states, states, frag_targets, rel_targets)
    assert float(loss) == pytest.approx(0.0, abs=1e-9)


def test_ce_uniform_predictions_analytic():
    c = 11
    frag = torch.full((1, 4, c), 1 / c, dtype=torch.float64)
    rel = torch.full((1, 3, c), 1 / c, dtype=torch.float64)
    states = random_states(b=1, probs=(frag, rel))
    loss = node_ce_loss(states, states, torch.zeros(1, 4, dtype=torch.long),
                        torch.zeros(1, 3, dtype=torch.long))
    # 7 nodes x 2 modalities, each contributing ln C
    assert float(loss) == pytest.approx(14 * math.log(c), rel=1e-9)


def test_ce_matches_loop_oracle():
    for seed in range(5):
        visual = random_states(b=3, seed=seed)
        textual = random_states(b=3, seed=seed + 100)
        g = torch.Generator().manual_seed(seed)
        frag_targets = torch.randint(0, 5, (3, 4), generator=g)
        rel_targets = torch.randint(0, 4, (3, 3), generator=g)
        expected = ce_loss_oracle(
            [visual.fragment_probs, visual.relation_probs,
             textual.fragment_probs, textual.relation_probs],
            [frag_targets, rel_targets, frag_targets, rel_targets],
        )
        got = float(node_ce_loss(visual, textual, frag_targets, rel_targets))
        assert got == pytest.approx(expected, abs=1e-6)


def test_ce_rejects_out_of_range_label():
    states = random_states(b=1)
    with pytest.raises(InputError):
        node_ce_loss(states, states, torch.tensor([[0, 1, 9, 0]]), torch.tensor([[0, 0, 0]]))


# -- KL alignment -----------------------------------------------------------------


def test_kl_identity_is_zero():
    states = random_states(b=2, seed=3)
    assert float(kl_alignment(states, states)) == pytest.approx(0.0, abs=1e-9)


def test_kl_single_node_analytic():
    frag_p = torch.full((1, 4, 2), 0.5, dtype=torch.float64)
    frag_q = frag_p.clone()
    frag_p[0, 0] = torch.tensor([1.0, 0.0])  # one node diverges
    rel = torch.full((1, 3, 2), 0.5, dtype=torch.float64)
    p = random_states(b=1, probs=(frag_p, rel))
    q = random_states(b=1, probs=(frag_q, rel.clone()))
    assert float(kl_alignment(p, q)) == pytest.approx(math.log(2), rel=1e-9)


def test_kl_matches_loop_oracle():
    for seed in range(5):
        p = random_states(b=2, seed=seed)
        q = random_states(b=2, seed=seed + 50)
        expected = kl_oracle(
            [p.fragment_probs, p.relation_probs], [q.fragment_probs, q.relation_probs]
        )
        got = float(kl_alignment(p, q))
        assert got == pytest.approx(expected, abs=1e-6)


def test_kl_nonnegative_on_random_pairs():
    for seed in range(200):
        p = random_states(b=1, seed=seed)
        q = random_states(b=1, seed=seed + 7919)
        assert float(kl_alignment(p, q)) >= -1e-6


def test_kl_rejects_unnormalized():
    p = random_states(b=1)
    broken_frag = p.fragment_probs * 1.5
    q = random_states(b=1, probs=(broken_frag, p.relation_probs))
    with pytest.raises(InputError):
        kl_alignment(q, p)


# -- joint loss --------------------------------------------------------------------


def test_joint_zero_when_all_terms_vanish():
    sim = torch.full((2, 2), -1.0, dtype=torch.float64)
    sim.fill_diagonal_(1.0)
    frag = torch.zeros(2, 4, 5, dtype=torch.float64)
    rel = torch.zeros(2, 3, 4, dtype=torch.float64)
    frag[..., 0] = 1.0
    rel[..., 0] = 1.0
    states = random_states(b=2, probs=(frag, rel))
    total, breakdown = joint_loss(
        sim, states, states,
        torch.zeros(2, 4, dtype=torch.long), torch.zeros(2, 3, dtype=torch.long),
    )
    assert float(total) == pytest.approx(0.0, abs=1e-9)
    assert breakdown.total == pytest.approx(0.0, abs=1e-9)


def test_joint_recomposes_from_parts():
    g = torch.Generator().manual_seed(9)
    sim = torch.rand(3, 3, generator=g, dtype=torch.float64)
    visual = random_states(b=3, seed=1)
    textual = random_states(b=3, seed=2)
    frag_targets = torch.randint(0, 5, (3, 4), generator=g)
    rel_targets = torch.randint(0, 4, (3, 3), generator=g)
    total, breakdown = joint_loss(sim, visual, textual, frag_targets, rel_targets)
    rank = float(triplet_loss(sim, margin=0.2))
    ce = float(node_ce_loss(visual, textual, frag_targets, rel_targets))
    kl = float(kl_alignment(visual, textual))
    assert float(total) == pytest.approx(rank + ce + kl, rel=1e-12)
    assert breakdown.total == pytest.approx(breakdown.rank + breakdown.ce + breakdown.kl,
                                            rel=1e-12)


def test_joint_weights_disable_tree_terms():
    g = torch.Generator().manual_seed(10)
    sim = torch.rand(3, 3, generator=g, dtype=torch.float64)
    visual = random_states(b=3, seed=4)
    textual = random_states(b=3, seed=5)
    frag_targets = torch.randint(0, 5, (3, 4), generator=g)
    rel_targets = torch.randint(0, 4, (3, 3), generator=g)
    total, breakdown = joint_loss(
        sim, visual, textual, frag_targets, rel_targets, ce_weight=0.0, kl_weight=0.0
    )
    assert breakdown.ce == 0.0 and breakdown.kl == 0.0
    assert float(total) == pytest.approx(float(triplet_loss(sim, margin=0.2)), rel=1e-12)


def test_breakdown_is_differentiable_path():
    a = torch.randn(3, 6, dtype=torch.float64, requires_grad=True)
    b = torch.randn(3, 6, dtype=torch.float64, requires_grad=True)
    visual = random_states(b=3, seed=6)
    textual = random_states(b=3, seed=7)
    total, _ = joint_loss(
        similarity_matrix(a, b), visual, textual,
        torch.zeros(3, 4, dtype=torch.long), torch.zeros(3, 3, dtype=torch.long),
    )
    total.backward()
    assert a.grad is not None and torch.isfinite(a.grad).all()
