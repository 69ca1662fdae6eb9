import numpy as np
import pytest
import torch

from smfea.errors import ConfigurationError, NumericError
from smfea.treeenc import (
    LEAF_SLOTS,
    RELATION_SLOTS,
    TreeEncoder,
    export_node_predictions,
)
from smfea.vocab import CategoryDicts
from tests.oracles import tree_forward_oracle


def make_encoder(d_embed=10, d_node=4, n_frag=5, n_rel=4, variant="double_forget", seed=0):
    torch.manual_seed(seed)
    return TreeEncoder(d_embed, d_node, n_frag, n_rel, cell_variant=variant, dtype=torch.float64)


def numpy_params(encoder):
    return {name: p.detach().numpy().copy() for name, p in encoder.named_parameters()}


def test_unknown_variant_rejected():
    with pytest.raises(ConfigurationError):
        TreeEncoder(4, 4, 3, 3, cell_variant="mystery")


# -- node input mapping ----------------------------------------------------------


def test_identity_input_maps_reproduce_instance():
    encoder = make_encoder(d_embed=6, d_node=6)
    with torch.no_grad():
        for linear in encoder.input_maps:
            linear.weight.copy_(torch.eye(6, dtype=torch.float64))
            linear.bias.zero_()
    instance = torch.randn(3, 6, dtype=torch.float64)
    inputs = encoder.map_node_inputs(instance)
    for slot in range(7):
        assert torch.equal(inputs[:, slot], instance)


def test_input_maps_match_matmul_oracle():
    encoder = make_encoder()
    instance = torch.randn(2, 10, dtype=torch.float64)
    inputs = encoder.map_node_inputs(instance).detach().numpy()
    x = instance.numpy()
    for slot in range(7):
        w = encoder.input_maps[slot].weight.detach().numpy()
        b = encoder.input_maps[slot].bias.detach().numpy()
        np.testing.assert_allclose(inputs[:, slot], x @ w.T + b, atol=1e-12)


def test_zero_instance_gives_biases():
    encoder = make_encoder()
    inputs = encoder.map_node_inputs(torch.zeros(1, 10, dtype=torch.float64))
    for slot in range(7):
        assert torch.allclose(
            inputs[0, slot], encoder.input_maps[slot].bias, atol=1e-12
        )


# -- tree cell --------------------------------------------------------------------


def test_leaf_cell_has_no_forget_term():
    encoder = make_encoder()
    inputs = torch.randn(2, 7, 4, dtype=torch.float64)
    states = encoder.tree_forward(inputs)
    # recompute i * u for the leaves with zero child context
    for slot in LEAF_SLOTS:
        x = inputs[:, slot]
        i = torch.sigmoid(encoder.w_input(x))
        u = torch.tanh(encoder.w_update(x))
        assert torch.allclose(states.cell[:, slot], i * u, atol=1e-12)


def test_all_zero_parameters_give_zero_hidden_states():
    encoder = make_encoder()
    with torch.no_grad():
        for p in encoder.parameters():
            p.zero_()
    states = encoder.tree_forward(torch.randn(2, 7, 4, dtype=torch.float64))
    assert torch.all(states.hidden == 0)
    assert torch.all(states.cell == 0)


@pytest.mark.parametrize("variant", ["double_forget", "childsum"])
def test_tree_forward_matches_transcription_oracle(variant):
    for seed in range(5):
        encoder = make_encoder(variant=variant, seed=seed)
        params = numpy_params(encoder)
        inputs = torch.randn(3, 7, 4, dtype=torch.float64)
        states = encoder.tree_forward(inputs)
        for b in range(3):
            cell, hidden = tree_forward_oracle(params, inputs[b].numpy(), variant)
            for node in range(1, 8):
                np.testing.assert_allclose(
                    states.hidden[b, node - 1].detach().numpy(), hidden[node], atol=1e-12
                )
                np.testing.assert_allclose(
                    states.cell[b, node - 1].detach().numpy(), cell[node], atol=1e-12
                )


def test_variants_differ_on_parents_only():
    inputs = torch.randn(1, 7, 4, dtype=torch.float64)
    a = make_encoder(variant="double_forget", seed=3)
    b = make_encoder(variant="childsum", seed=3)
    states_a = a.tree_forward(inputs)
    states_b = b.tree_forward(inputs)
    for slot in LEAF_SLOTS:
        assert torch.equal(states_a.hidden[:, slot], states_b.hidden[:, slot])
    for slot in RELATION_SLOTS:
        assert not torch.allclose(states_a.hidden[:, slot], states_b.hidden[:, slot])


def test_dependency_cones():
    encoder = make_encoder()
    inputs = torch.randn(1, 7, 4, dtype=torch.float64)
    base = encoder.tree_forward(inputs)
    poked = inputs.clone()
    poked[0, 4] += 1.0  # node 5's input
    after = encoder.tree_forward(poked)
    # nodes 1, 2, 3 live outside node 5's cone and must be bitwise unchanged
    for slot in (0, 1, 2):
        assert torch.equal(base.hidden[:, slot], after.hidden[:, slot])
    # node 5, its parent 6, and the root 4 all depend on the poked input
    for slot in (4, 5, 3):
        assert not torch.equal(base.hidden[:, slot], after.hidden[:, slot])


def test_root_depends_on_every_input():
    encoder = make_encoder()
    inputs = torch.randn(1, 7, 4, dtype=torch.float64)
    base = encoder.tree_forward(inputs).hidden[:, 3]
    for slot in range(7):
        poked = inputs.clone()
        poked[0, slot] += 0.5
        assert not torch.equal(encoder.tree_forward(poked).hidden[:, 3], base)


def test_non_finite_intermediate_names_node():
    encoder = make_encoder()
    inputs = torch.randn(1, 7, 4, dtype=torch.float64)
    inputs[0, 2] = float("inf")  # node 3
    with pytest.raises(NumericError, match="node 3"):
        encoder.tree_forward(inputs)


# -- classification ----------------------------------------------------------------


def test_zero_hidden_and_bias_give_uniform_distributions():
    encoder = make_encoder(n_frag=5, n_rel=4)
    with torch.no_grad():
        encoder.fragment_head.bias.zero_()
        encoder.relation_head.bias.zero_()
    states = encoder.tree_forward(torch.randn(2, 7, 4, dtype=torch.float64))
    states.hidden = torch.zeros_like(states.hidden)
    states = encoder.classify_nodes(states)
    assert torch.allclose(states.fragment_probs, torch.full((2, 4, 5), 0.2, dtype=torch.float64))
    assert torch.allclose(states.relation_probs, torch.full((2, 3, 4), 0.25, dtype=torch.float64))


def test_distributions_normalized():
    encoder = make_encoder()
    states = encoder.classify_nodes(
        encoder.tree_forward(torch.randn(4, 7, 4, dtype=torch.float64))
    )
    ones4 = torch.ones(4, 4, dtype=torch.float64)
    ones3 = torch.ones(4, 3, dtype=torch.float64)
    assert torch.allclose(states.fragment_probs.sum(dim=-1), ones4, atol=1e-6)
    assert torch.allclose(states.relation_probs.sum(dim=-1), ones3, atol=1e-6)
    assert torch.all(states.fragment_probs >= 0)


def test_argmax_matches_logit_bruteforce():
    encoder = make_encoder()
    hidden = torch.randn(3, 7, 4, dtype=torch.float64)
    states = encoder.tree_forward(torch.randn(3, 7, 4, dtype=torch.float64))
    states.hidden = hidden
    states = encoder.classify_nodes(states)
    frag_logits = encoder.fragment_head(hidden[:, LEAF_SLOTS]).detach().numpy()
    rel_logits = encoder.relation_head(hidden[:, RELATION_SLOTS]).detach().numpy()
    for b in range(3):
        for pos in range(4):
            best = max(range(frag_logits.shape[-1]), key=lambda c: frag_logits[b, pos, c])
            assert int(states.fragment_probs[b, pos].argmax()) == best
        for pos in range(3):
            best = max(range(rel_logits.shape[-1]), key=lambda c: rel_logits[b, pos, c])
            assert int(states.relation_probs[b, pos].argmax()) == best


# -- readout ------------------------------------------------------------------------


def test_zero_hiddens_read_out_to_bias_sum():
    encoder = make_encoder()
    states = encoder.tree_forward(torch.randn(1, 7, 4, dtype=torch.float64))
    states.hidden = torch.zeros_like(states.hidden)
    expected = sum(linear.bias for linear in encoder.readouts)
    assert torch.allclose(encoder.tree_embedding(states)[0], expected, atol=1e-12)


def test_single_active_node_is_linear():
    encoder = make_encoder()
    with torch.no_grad():
        for linear in encoder.readouts:
            linear.bias.zero_()
    states = encoder.tree_forward(torch.randn(1, 7, 4, dtype=torch.float64))
    hidden = torch.zeros_like(states.hidden)
    hidden[0, 5] = torch.randn(4, dtype=torch.float64)
    states.hidden = hidden
    expected = encoder.readouts[5](hidden[0, 5])
    assert torch.allclose(encoder.tree_embedding(states)[0], expected, atol=1e-12)


def test_tree_embedding_matches_algebra_oracle():
    encoder = make_encoder()
    states = encoder.tree_forward(torch.randn(2, 7, 4, dtype=torch.float64))
    out = encoder.tree_embedding(states).detach().numpy()
    h = states.hidden.detach().numpy()
    expected = np.zeros_like(out)
    for slot in range(7):
        w = encoder.readouts[slot].weight.detach().numpy()
        b = encoder.readouts[slot].bias.detach().numpy()
        expected += h[:, slot] @ w.T + b
    np.testing.assert_allclose(out, expected, atol=1e-12)


# -- cross-modal wiring ---------------------------------------------------------------


def test_two_encoders_share_topology_but_not_parameters():
    a = make_encoder(seed=1)
    b = make_encoder(seed=2)
    names_a = [n for n, _ in a.named_parameters()]
    names_b = [n for n, _ in b.named_parameters()]
    assert names_a == names_b
    assert any(
        not torch.equal(pa, pb)
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters())
    )


def test_export_node_predictions_shape():
    encoder = make_encoder(n_frag=3, n_rel=3)
    dicts = CategoryDicts(
        fragment={"Null": 0, "dog": 1, "ball": 2},
        relation={"Null": 0, "play": 1, "on": 2},
    )
    states = encoder.classify_nodes(
        encoder.tree_forward(torch.randn(2, 7, 4, dtype=torch.float64))
    )
    records = export_node_predictions(states, dicts)
    assert len(records) == 2 and len(records[0]) == 7
    assert records[0][0]["node"] == 1 and records[0][0]["kind"] == "fragment"
    assert records[0][3]["kind"] == "relation"
    assert 0 <= records[0][0]["prob"] <= 1
    assert records[0][0]["top1_label"] in dicts.fragment
