import math

import pytest
import torch
from torch.func import functional_call

from mtdaflow.backbone import ShapeContractError
from mtdaflow.heads import (
    DegenerateBatchError,
    EdgeNet,
    GraphHead,
    MLPHead,
    NodeNet,
    build_edge_targets,
    edge_forward,
    mlp_forward,
    node_forward,
    normalize_affinity,
)


def test_mlp_zero_weights_give_uniform_softmax():
    head = MLPHead(8, 5)
    torch.nn.init.zeros_(head.fc.weight)
    torch.nn.init.zeros_(head.fc.bias)
    p = torch.softmax(mlp_forward(head, torch.randn(4, 8)), dim=1)
    assert torch.allclose(p, torch.full((4, 5), 0.2))


def test_mlp_shape_and_row_permutation():
    head = MLPHead(16, 65)
    x = torch.randn(64, 16)
    out = head(x)
    assert out.shape == (64, 65)
    perm = torch.randperm(64)
    assert torch.allclose(head(x[perm]), out[perm])


def test_mlp_rejects_wrong_width():
    with pytest.raises(ShapeContractError):
        MLPHead(16, 3)(torch.randn(2, 8))


def test_edge_matrix_is_symmetric_in_unit_interval():
    torch.manual_seed(0)
    edge = EdgeNet(16)
    aff = edge_forward(edge, torch.randn(64, 16))
    assert aff.shape == (64, 64)
    assert bool(((aff > 0) & (aff < 1)).all())
    assert (aff - aff.T).abs().max() <= 1e-6


def test_equal_features_score_like_zero_input():
    edge = EdgeNet(8)
    f = torch.randn(1, 8)
    scores = edge.scores(torch.cat([f, f, torch.randn(1, 8)]))
    zero = edge.net(torch.zeros(8)).squeeze()
    assert torch.allclose(scores[0, 1], zero)
    assert torch.allclose(scores[0, 0], zero)


def test_edge_needs_two_samples():
    with pytest.raises(DegenerateBatchError):
        EdgeNet(8)(torch.randn(1, 8))


def test_normalized_rows_sum_to_one():
    aff = torch.rand(10, 10)
    rows = normalize_affinity(aff).sum(dim=1)
    assert torch.allclose(rows, torch.ones(10), atol=1e-6)


def test_identity_affinity_self_aggregates():
    node = NodeNet(4, 3)
    f = torch.randn(5, 4)
    agg = node.aggregate(f, torch.zeros(5, 5))
    assert torch.allclose(agg, torch.cat([f, f], dim=1))


def test_uniform_affinity_averages():
    node = NodeNet(4, 3)
    f = torch.randn(5, 4)
    agg = node.aggregate(f, torch.ones(5, 5))
    assert torch.allclose(agg[:, 4:], f.mean(dim=0, keepdim=True).expand(5, 4), atol=1e-6)


def test_node_rejects_mismatched_affinity():
    with pytest.raises(ShapeContractError):
        node_forward(NodeNet(4, 3), torch.randn(5, 4), torch.ones(4, 4))


def test_graph_head_widths():
    head = GraphHead(256, 7)
    aff, logits = head(torch.randn(6, 256))
    assert aff.shape == (6, 6)
    assert logits.shape == (6, 7)
    assert head.node.net[0].in_features == 512


def test_node_gradient_matches_finite_differences():
    torch.manual_seed(0)
    node = NodeNet(4, 3).double()
    feats = torch.randn(5, 4, dtype=torch.float64)
    aff = torch.rand(5, 5, dtype=torch.float64)
    names = [n for n, _ in node.named_parameters()]

    def fn(*params):
        return functional_call(node, dict(zip(names, params)), (feats, aff)).pow(2).sum()

    params = tuple(p.detach().clone().requires_grad_(True) for p in node.parameters())
    assert torch.autograd.gradcheck(fn, params, eps=1e-6, atol=1e-6, rtol=1e-3)


def test_edge_targets_examples():
    t = build_edge_targets([0, 1, 0])
    assert t.values.tolist() == [[1, 0, 1], [0, 1, 0], [1, 0, 1]]
    assert build_edge_targets([4, 4, 4]).values.sum() == 9
    assert build_edge_targets(torch.tensor([2, 0, 1, 2, 0])).values.sum() == 9


def test_edge_targets_match_brute_force():
    g = torch.Generator().manual_seed(0)
    for _ in range(200):
        n = int(torch.randint(2, 12, (1,), generator=g))
        n_c = int(torch.randint(1, 6, (1,), generator=g))
        labels = torch.randint(0, n_c, (n,), generator=g)
        values = build_edge_targets(labels).values
        brute = [[1.0 if labels[i] == labels[j] else 0.0 for j in range(n)] for i in range(n)]
        assert values.tolist() == brute
        assert torch.equal(values, values.T)
        assert bool((values.diagonal() == 1).all())


@pytest.mark.parametrize("labels", [[0, None, 1], torch.tensor([0, -1, 1])])
def test_edge_targets_reject_absent_labels(labels):
    with pytest.raises(ShapeContractError):
        build_edge_targets(labels)


def test_edge_scores_zero_final_layer_gives_half():
    edge = EdgeNet(8)
    torch.nn.init.zeros_(edge.net[-1].weight)
    torch.nn.init.zeros_(edge.net[-1].bias)
    assert torch.allclose(edge(torch.randn(3, 8)), torch.full((3, 3), 0.5))
    assert math.isclose(0.5, float(edge(torch.randn(2, 8))[0, 1]))
