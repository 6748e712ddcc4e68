import math

import numpy as np
import pytest

from src import evaluate
from src.evaluate import ProbeConfig
from src.metrics import accuracy, binomial_stderr, caption_metrics, mean_caption_metrics
from src.scoring import HEURISTIC


def test_caption_metrics_examples():
    assert caption_metrics([5, 6, 7], [5, 6, 7]) == {'exact': 1.0, 'f1': 1.0}
    assert caption_metrics([4, 4], [5, 6]) == {'exact': 0.0, 'f1': 0.0}
    one_off = caption_metrics([4, 5, 6, 9], [4, 5, 6, 7])
    assert one_off['exact'] == 0.0
    assert one_off['f1'] == pytest.approx(0.75)
    assert caption_metrics([], [4])['f1'] == 0.0
    with pytest.raises(ValueError):
        caption_metrics([4], [])
    assert math.isnan(mean_caption_metrics([])['f1'])


def test_accuracy_helpers():
    assert accuracy([1, 2, 3], [1, 0, 3]) == pytest.approx(2 / 3)
    assert math.isnan(accuracy([], []))
    assert binomial_stderr(0.5, 100) == pytest.approx(0.05)


def test_probe_separates_one_hot_features():
    labels = np.tile(np.arange(4), 10)
    features = np.eye(4)[labels]
    config = ProbeConfig(epochs=30, batch_size=8, lr=1.0)
    result = evaluate.linear_probe_features(features, labels, features, labels, 4, config)
    assert result.accuracy == 1.0 and result.train_accuracy == 1.0
    assert (result.num_train, result.num_test) == (40, 40)


def test_probe_rejects_single_class():
    with pytest.raises(ValueError, match='two classes'):
        evaluate.train_probe(np.ones((5, 3)), np.zeros(5, dtype=int), 4, ProbeConfig())


def test_probe_is_seeded():
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((30, 5)), rng.integers(0, 3, size=30)
    a = evaluate.train_probe(x, y, 3, ProbeConfig(epochs=2, seed=1))
    b = evaluate.train_probe(x, y, 3, ProbeConfig(epochs=2, seed=1))
    np.testing.assert_array_equal(a[0], b[0])


def test_linear_probe_on_encoder_features(model, corpus):
    result = evaluate.linear_probe(model, corpus, ProbeConfig(epochs=2))
    assert result.num_train + result.num_test == len(corpus)
    assert 0.0 <= result.accuracy <= 1.0
    features = evaluate.extract_features(model, corpus.arrays()['images'], batch_size=16)
    assert features.shape == (len(corpus), model.encoder_cfg.dim)


def test_random_matching_is_near_chance(vocab, records):
    result = evaluate.compositionality_eval(None, records, vocab, evaluate.RANDOM_METHOD, seed=3)
    decisions = list(result.decisions.values())
    assert len(decisions) >= 2 * len(records)
    assert abs(np.mean(np.asarray(decisions) == 0) - 0.5) < 0.2
    again = evaluate.compositionality_eval(None, records, vocab, evaluate.RANDOM_METHOD, seed=3)
    assert again.decisions == result.decisions


def test_matching_with_scorer(model, vocab, records):
    result = evaluate.compositionality_eval(model, records, vocab, HEURISTIC, limit=3)
    assert {kind for _, kind in result.decisions} <= set(result.accuracy)
    assert all(0.0 <= acc <= 1.0 for acc in result.accuracy.values())
    assert {index for index, _ in result.decisions} == {r.index for r in records[:3]}


def test_masked_accuracy_structure(model, causal_model, vocab, corpus):
    out = evaluate.masked_accuracy(model, corpus, vocab, t_grid=(0.5, 1.0), seed=0, batch_size=16)
    assert list(out) == [0.5, 1.0]
    for accs in out.values():
        assert set(accs) == {'visual', 'ablated'}
        assert all(0.0 <= v <= 1.0 for v in accs.values())
    with pytest.raises(ValueError):
        evaluate.masked_accuracy(causal_model, corpus, vocab)


def test_decision_agreement():
    a = {(0, 'swap'): 0, (0, 'replace'): 1, (1, 'swap'): 0}
    b = {(0, 'swap'): 0, (0, 'replace'): 0, (2, 'swap'): 1}
    assert evaluate.decision_agreement(a, b) == pytest.approx(0.5)
    assert math.isnan(evaluate.decision_agreement(a, {}))


def test_generation_metrics_range(model, vocab, records):
    scores = evaluate.generation_metrics(model, records, vocab, limit=2)
    assert set(scores) == {'exact', 'f1'}
    assert 0.0 <= scores['f1'] <= 1.0


def test_evaluate_report(model, vocab, corpus):
    report = evaluate.evaluate(model, corpus, vocab, HEURISTIC, ProbeConfig(epochs=1), limit=2, t_grid=(1.0,))
    tasks = {task for task, _, _ in report.rows()}
    assert tasks == {'probe', 'matching', 'masked_accuracy', 'caption'}
    assert ('masked_accuracy', 't=1.0:visual') in {(task, key) for task, key, _ in report.rows()}
    assert 'probe accuracy' in report.summary()
