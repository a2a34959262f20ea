import logging

import torch

from mtdaflow.data import DatasetRegistry, DomainDataset
from mtdaflow.evaluate import (
    EvalReport,
    accuracy,
    audit_ledger,
    confusion_matrix,
    correct_pseudo_samples,
    evaluate,
    mean_or_none,
    predict,
)
from mtdaflow.ledger import PseudoSourceLedger


def test_accuracy():
    preds = torch.tensor([0, 1, 2, 1])
    assert accuracy(preds, torch.tensor([0, 1, 1, 1])) == 0.75
    assert accuracy(preds, None) is None
    assert accuracy(preds, torch.full((4,), -1)) is None
    assert accuracy(preds, torch.tensor([0, -1, -1, 0])) == 0.5


def test_accuracy_is_an_exact_fraction():
    truth = torch.tensor([0] * 15 + [1] * 15)
    assert accuracy(torch.zeros(30, dtype=torch.long), truth) == 0.5
    preds = torch.tensor([0] * 10 + [1] * 20)
    assert accuracy(preds, truth) == 25 / 30
    assert mean_or_none([15 / 30, 15 / 30]) == 0.5


def test_unweighted_average():
    assert mean_or_none([0.5, 1.0, None]) == 0.75
    assert mean_or_none([None]) is None


def test_confusion_matrix_counts_known_rows():
    m = confusion_matrix(torch.tensor([0, 1, 1, 2]), torch.tensor([0, 1, 2, -1]), 3)
    assert m == [[1, 0, 0], [0, 1, 0], [0, 1, 0]]
    assert sum(map(sum, m)) == 3


def test_predict_is_batch_size_independent(model, registry):
    images = registry.domain(3).images
    full = predict(model, images, batch_size=256)
    assert torch.equal(predict(model, images, batch_size=1), full)
    assert torch.equal(predict(model, images, batch_size=7), full)
    assert predict(model, images[:1], batch_size=1).shape == (1,)


def test_evaluate_report(model, registry):
    report = evaluate(model, registry, PseudoSourceLedger(registry), batch_size=16)
    assert list(report.per_domain_accuracy) == ["shift1", "shift2", "shift3"]
    values = list(report.per_domain_accuracy.values())
    assert abs(report.average_target_accuracy - sum(values) / 3) < 1e-9
    assert sum(map(sum, report.confusion)) == 90
    assert report.ledger_audit == {}


def test_audit_all_correct(registry):
    ledger = PseudoSourceLedger(registry)
    truth = registry.domain(2).hidden_truth()
    for i in range(5):
        ledger.add(2, i, int(truth[i]), 0.9, 1, 0, 0.7)
    ledger.add(2, 5, (int(truth[5]) + 1) % 3, 0.9, 2, 0, 0.7)
    audit = audit_ledger(ledger)
    assert audit == {"1/shift2": {"correct": 5, "incorrect": 0}, "2/shift2": {"correct": 0, "incorrect": 1}}
    assert correct_pseudo_samples(audit) == {"shift2": 5}


def test_audit_without_truth_warns(registry, caplog):
    blind = DomainDataset("blind", 1, registry.domain(1).images)
    reg = DatasetRegistry(registry.source, (blind,), registry.class_names)
    ledger = PseudoSourceLedger(reg)
    ledger.add(1, 0, 0, 0.9, 1, 0, 0.7)
    with caplog.at_level(logging.WARNING, logger="mtdaflow.evaluate"):
        assert audit_ledger(ledger) == {}
    assert "hidden ground truth missing" in caplog.text


def test_eval_report_files(tmp_path):
    report = EvalReport({"a": 0.5, "b": None}, 0.5)
    report.write_json(str(tmp_path / "r.json"))
    report.write_csv(str(tmp_path / "r.csv"))
    rows = (tmp_path / "r.csv").read_text(encoding="utf-8").splitlines()
    assert rows == ["domain,accuracy", "a,0.500000", "b,", "average,0.500000"]
