import math
import warnings

import pytest
import torch

from mtdaflow.backbone import ShapeContractError
from mtdaflow.config import HyperParams
from mtdaflow.data import MinibatchSampler, sample_minibatch
from mtdaflow.heads import EdgeTargets, build_edge_targets
from mtdaflow.ledger import PseudoSourceLedger
from mtdaflow.losses import (
    METRIC_COLUMNS,
    LossReport,
    MetricsLog,
    NonFiniteLossError,
    bce_edge,
    build_finetune_optimizer,
    build_optimizers,
    ce_mlp,
    ce_node,
    combine_and_step,
    finetune_step,
    step_discriminator,
    step_graph,
)
from mtdaflow.model import group_hashes


def _batch(registry, hp, domain_id=1):
    ledger = PseudoSourceLedger(registry)
    domain = registry.domain(domain_id)
    return sample_minibatch(ledger, domain, hp, MinibatchSampler(len(ledger), len(domain), 0, 1, domain_id))


def test_ce_values():
    ones = torch.ones(1, dtype=torch.bool)
    assert math.isclose(float(ce_mlp(torch.tensor([[2.0, 0.0]]), torch.tensor([0]), ones)), math.log(1 + math.exp(-2)), rel_tol=1e-5)
    uniform = ce_mlp(torch.zeros(3, 4), torch.tensor([0, 1, 2]), torch.ones(3, dtype=torch.bool))
    assert math.isclose(float(uniform), math.log(4), rel_tol=1e-6)
    assert math.isclose(float(ce_node(torch.zeros(2, 65), torch.tensor([3, 64]), torch.ones(2, dtype=torch.bool))), math.log(65), rel_tol=1e-6)


def test_ce_mlp_and_ce_node_agree():
    logits = torch.randn(6, 4)
    labels = torch.tensor([0, 1, 2, 3, -1, -1])
    mask = torch.tensor([True] * 4 + [False] * 2)
    assert torch.equal(ce_mlp(logits, labels, mask), ce_node(logits, labels, mask))


def test_ce_masks_target_rows():
    logits = torch.randn(4, 3, requires_grad=True)
    mask = torch.tensor([True, True, False, False])
    ce_node(logits, torch.tensor([0, 1, -1, -1]), mask).backward()
    assert torch.equal(logits.grad[2:], torch.zeros(2, 3))


def test_ce_empty_mask():
    with pytest.raises(ShapeContractError):
        ce_mlp(torch.zeros(2, 3), torch.zeros(2, dtype=torch.long), torch.zeros(2, dtype=torch.bool))


def test_bce_edge_hand_case():
    aff = torch.full((3, 3), 0.6)
    loss = bce_edge(aff, build_edge_targets([0, 1, 0]))
    expected = (2 * -math.log(0.6) + 4 * -math.log(0.4)) / 6
    assert math.isclose(float(loss), expected, rel_tol=1e-6)
    assert abs(expected - 0.7811) < 1e-4


def test_bce_edge_half_is_ln2_and_limit():
    targets = build_edge_targets([0, 1, 1, 2])
    assert math.isclose(float(bce_edge(torch.full((4, 4), 0.5), targets)), math.log(2), rel_tol=1e-6)
    assert float(bce_edge(targets.values.clone(), targets)) < 1e-6


def test_bce_edge_matches_pair_loop():
    g = torch.Generator().manual_seed(1)
    for _ in range(20):
        aff = torch.rand(5, 5, generator=g, dtype=torch.float64)
        labels = torch.randint(0, 3, (5,), generator=g)
        targets = build_edge_targets(labels)
        total, count = 0.0, 0
        for i in range(5):
            for j in range(5):
                if i == j:
                    continue
                p = min(max(float(aff[i, j]), 1e-7), 1 - 1e-7)
                t = float(targets.values[i, j])
                total += -(t * math.log(p) + (1 - t) * math.log(1 - p))
                count += 1
        assert abs(float(bce_edge(aff, targets)) - total / count) < 1e-8


def test_bce_edge_mask_and_shape():
    with pytest.raises(ShapeContractError):
        bce_edge(torch.rand(3, 3), build_edge_targets([0, 1]))
    empty = EdgeTargets(torch.ones(2, 2), torch.zeros(2, 2, dtype=torch.bool))
    with pytest.raises(ShapeContractError):
        bce_edge(torch.rand(2, 2), empty)


def test_losses_are_finite_and_non_negative():
    torch.manual_seed(0)
    for _ in range(10):
        labels = torch.randint(0, 4, (6,))
        mask = torch.ones(6, dtype=torch.bool)
        assert float(ce_mlp(torch.randn(6, 4) * 50, labels, mask)) >= 0
        assert float(bce_edge(torch.rand(6, 6).round(), build_edge_targets(labels))) >= 0


def test_discriminator_phase_touches_only_psi(model, registry, hp):
    opts = build_optimizers(model, hp)
    batch = _batch(registry, hp)
    before = group_hashes(model)
    feats = model.extractor(batch.images)
    step_discriminator(model, feats, batch.domain_flags, 1.0, opts.psi)
    after = group_hashes(model)
    assert after["psi"] != before["psi"]
    for name in ("theta", "phi", "phi_prime"):
        assert after[name] == before[name]


def test_graph_phase_touches_only_theta_and_phi_prime(model, registry, hp):
    opts = build_optimizers(model, hp)
    batch = _batch(registry, hp)
    before = group_hashes(model)
    step_graph(model, batch.images, batch, hp, opts.gnn)
    after = group_hashes(model)
    assert after["theta"] != before["theta"]
    assert after["phi_prime"] != before["phi_prime"]
    assert after["phi"] == before["phi"]
    assert after["psi"] == before["psi"]


def test_zero_graph_weights_leave_phi_prime(model, registry):
    hp = HyperParams(B_s=8, B_t=4, lambda_edge=0.0, lambda_node=0.0)
    opts = build_optimizers(model, hp)
    before = group_hashes(model)
    report = combine_and_step(model, _batch(registry, hp), hp, opts, 0.5)
    after = group_hashes(model)
    assert after["phi_prime"] == before["phi_prime"]
    assert after["theta"] != before["theta"]
    assert report.weighted_gnn == 0.0


def test_zero_adversarial_weight_leaves_psi(model, registry, hp):
    opts = build_optimizers(model, hp)
    before = group_hashes(model)
    report = combine_and_step(model, _batch(registry, hp), hp, opts, 0.0)
    assert group_hashes(model)["psi"] == before["psi"]
    assert report.lambda_adv == 0.0


def test_one_iteration_is_reproducible(registry, spec, hp):
    from mtdaflow.model import ModelBundle

    hashes = []
    for _ in range(2):
        torch.manual_seed(3)
        m = ModelBundle.build(spec, registry.n_c, 3, 16)
        combine_and_step(m, _batch(registry, hp), hp, build_optimizers(m, hp), 0.4)
        hashes.append(group_hashes(m))
    assert hashes[0] == hashes[1]


def test_non_finite_loss_aborts(model, registry, hp):
    batch = _batch(registry, hp)
    batch.ledger_images = torch.full_like(batch.ledger_images, float("nan"))
    with pytest.raises(NonFiniteLossError) as exc:
        combine_and_step(model, batch, hp, build_optimizers(model, hp), 0.0, iteration=17)
    assert exc.value.snapshot["iteration"] == 17
    assert exc.value.snapshot["phase"] == "classifier"


def test_metrics_csv(tmp_path):
    path = tmp_path / "metrics.csv"
    log = MetricsLog(str(path))
    log.append(1, 1, "shift1", LossReport(1.0, 0.5, 0.25, 0.7, 0.575, 0.1))
    log.append(2, 1, "shift1", LossReport(0.9, 0.5, 0.25, 0.7, 0.575, 0.2))
    log.close()
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0].split(",") == list(METRIC_COLUMNS)
    assert lines[2].startswith("2,1,shift1,0.900000")
    assert log.rows == 2


def test_step_reports_are_plain_floats_without_grad_warnings(model, registry, hp):
    images, labels = PseudoSourceLedger(registry).tensors()
    with warnings.catch_warnings():
        warnings.filterwarnings("error", message=".*requires_grad.*")
        tuned = finetune_step(model, images[:12], labels[:12], hp, build_finetune_optimizer(model, hp), 1)
        adapted = combine_and_step(model, _batch(registry, hp), hp, build_optimizers(model, hp), 0.5, 2)
    for report in (tuned, adapted):
        assert all(type(v) is float for v in report.as_dict().values())
