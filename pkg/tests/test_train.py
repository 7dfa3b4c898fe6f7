import dataclasses

import numpy as np
import pytest

from llmm.cohort import NEGATIVE, labeled
from llmm.errors import ConfigError, DataError
from llmm.metrics import auprc, auroc
from llmm.train import (
    TrainConfig,
    class_weights,
    evaluate,
    labeled_targets,
    read_probabilities,
    report_from_probs,
    train,
)

from helpers import TINY, small_cohort


def _cfg(**kw):
    base = dict(mode="fusion", epochs=3, batch_size=16, seed=4, lr=3e-3, model=dict(TINY))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def cohort():
    recs = labeled(small_cohort(120, seed=9))
    return recs[:90], recs[90:]


@pytest.fixture(scope="module")
def result(cohort):
    return train(cohort[0], cohort[1], _cfg())


def test_validation_loss_decreases(result):
    assert result.initial_val_loss is not None
    assert min(r["val_loss"] for r in result.history) < result.initial_val_loss
    assert [r["epoch"] for r in result.history] == list(range(1, len(result.history) + 1))


def test_same_seed_same_history(cohort, result):
    again = train(cohort[0], cohort[1], _cfg())
    assert again.history == result.history
    for k, v in result.model.param_arrays().items():
        assert np.array_equal(again.model.param_arrays()[k], v)


def test_inverse_frequency_needs_every_class(cohort):
    negatives = [r for r in cohort[0] if r.label_binary == NEGATIVE]
    with pytest.raises(ConfigError):
        train(negatives, None, _cfg(epochs=1))
    # other schemes do not divide by the class count
    train(negatives[:10], None, _cfg(epochs=1, class_weighting="none"))


def test_class_weights():
    assert class_weights(np.array([0, 1, 0, 1]), 2, "inverse_frequency").tolist() == [1.0, 1.0]
    assert class_weights(np.array([0, 0, 0, 1]), 2, "inverse_frequency").tolist() == [4 / 6, 2.0]
    assert class_weights(np.array([0, 0]), 2, "none").tolist() == [1.0, 1.0]


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(class_weighting="smote")


def test_no_labeled_records(cohort):
    unlabeled = [dataclasses.replace(r, label_binary="unlabeled") for r in cohort[0][:5]]
    with pytest.raises(DataError):
        train(unlabeled, None, _cfg(epochs=1))


def test_sampling_schemes_run(cohort):
    for scheme in ("oversample", "undersample"):
        res = train(cohort[0][:40], None, _cfg(epochs=1, class_weighting=scheme, mode="labs_only"))
        assert len(res.history) == 1 and "val_loss" not in res.history[0]


def test_early_stopping_restores_best_epoch(cohort):
    res = train(cohort[0], cohort[1], _cfg(epochs=8, patience=1, lr=0.05, mode="labs_only"))
    losses = [r["val_loss"] for r in res.history]
    assert res.best_epoch == 1 + int(np.argmin(losses))
    assert len(res.history) <= res.best_epoch + 1


def test_evaluate_report_shape(cohort, result):
    ev = evaluate(result.model, cohort[1])
    rep = ev.report
    _, targets = labeled_targets(cohort[1], "binary")
    assert rep.n == len(targets)
    assert [sum(row) for row in rep.confusion] == np.bincount(targets, minlength=2).tolist()
    assert rep.class_counts == np.bincount(targets, minlength=2).tolist()
    for k in ("accuracy", "precision", "recall", "f1", "auroc", "auprc"):
        assert 0.0 <= getattr(rep, k) <= 1.0
    assert evaluate(result.model, cohort[1]).report == rep


def test_evaluate_replays_from_probability_dump(cohort, result, tmp_path):
    ev = evaluate(result.model, cohort[1])
    path = tmp_path / "probs.jsonl"
    ev.write_probabilities(path)
    probs, targets = read_probabilities(path)
    assert np.array_equal(probs, ev.probs) and np.array_equal(targets, ev.targets)
    # independent recomputation from the dumped numbers
    y = targets == 1
    assert ev.report.auroc == auroc(probs[:, 1], y)
    assert ev.report.auprc == auprc(probs[:, 1], y)
    pred = probs.argmax(axis=1)
    assert ev.report.accuracy == pytest.approx(np.mean(pred == targets), abs=1e-15)
    assert report_from_probs(probs, targets, "binary", "fusion") == ev.report


def test_argmax_ties_go_to_lowest_class():
    probs = np.array([[0.5, 0.5], [0.2, 0.8]])
    rep = report_from_probs(probs, np.array([0, 1]), "binary", "fusion")
    assert rep.accuracy == 1.0


def test_multiclass_training_and_macro_report():
    recs = labeled(small_cohort(60, seed=2), "multiclass")
    res = train(recs[:45], recs[45:], _cfg(epochs=1, task="multiclass", mode="labs_only",
                                           class_weighting="none"))
    rep = evaluate(res.model, recs[45:]).report
    assert rep.averaging == "macro" and len(rep.class_names) == 5
