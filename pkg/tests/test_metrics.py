import numpy as np
import pytest

from replay_prompt.metrics import accuracy, auroc_macro, classification_metrics, f1_macro


def brute_accuracy(y, p):
    return sum(1 for a, b in zip(y, p) if a == b) / len(y)


def brute_f1_macro(y, p, C):
    scores = []
    for c in range(C):
        tp = sum(1 for a, b in zip(y, p) if a == c and b == c)
        fp = sum(1 for a, b in zip(y, p) if a != c and b == c)
        fn = sum(1 for a, b in zip(y, p) if a == c and b != c)
        scores.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return sum(scores) / C


def brute_auroc(y, s):
    per = []
    for c in range(s.shape[1]):
        pos = [s[i, c] for i in range(len(y)) if y[i] == c]
        neg = [s[i, c] for i in range(len(y)) if y[i] != c]
        if not pos or not neg:
            continue
        wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
        per.append(wins / (len(pos) * len(neg)))
    return sum(per) / len(per)


def test_metrics_match_brute_force_on_random_sets():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n, C = int(rng.integers(5, 40)), int(rng.integers(2, 5))
        y = rng.integers(0, C, size=n)
        # coarse scores so ties occur
        logits = np.round(rng.normal(size=(n, C)), 1)
        p = logits.argmax(1)
        assert accuracy(y, p) == brute_accuracy(y, p)
        assert f1_macro(y, p, C) == pytest.approx(brute_f1_macro(y, p, C), abs=1e-15)
        if len(set(y.tolist())) > 1:
            assert abs(auroc_macro(y, logits) - brute_auroc(y, logits)) <= 1e-9


def test_perfect_predictor():
    y = np.array([0, 1, 2, 3, 0, 1, 2, 3])
    logits = np.eye(4)[y] * 5
    m = classification_metrics(y, logits)
    assert m == {"accuracy": 1.0, "f1_macro": 1.0, "auroc": 1.0}


def test_constant_predictor_on_balanced_four_classes():
    y = np.repeat(np.arange(4), 25)
    p = np.zeros(100, dtype=int)
    assert accuracy(y, p) == 0.25
    assert f1_macro(y, p, 4) == pytest.approx(0.1, abs=1e-15)


def test_random_scores_give_chance_auroc():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 4, size=2000)
    assert abs(auroc_macro(y, rng.random((2000, 4))) - 0.5) <= 0.03


def test_accuracy_rejects_mismatched_input():
    with pytest.raises(ValueError):
        accuracy([0, 1], [0])
