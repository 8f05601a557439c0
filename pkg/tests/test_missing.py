import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from replay_prompt.data import Dataset
from replay_prompt.missing import (MissingPattern, Scenario, apply_pattern, apply_placeholder,
                                   placeholder, round_half_up, sample_missing_pattern,
                                   verify_missing_statistics)


def test_multi_full_budget_splits_evenly_over_two_modalities():
    p = sample_missing_pattern(100, Scenario.multi([0, 1], 1.0), np.random.default_rng(0), 2)
    assert p.missing_counts().tolist() == [50, 50]
    assert verify_missing_statistics(p).tolist() == [0.5, 0.5]
    assert not p.mask.all(axis=1).any()


def test_single_seventy_percent():
    p = sample_missing_pattern(100, Scenario.single(0, 0.7), np.random.default_rng(0), 2)
    assert p.missing_counts().tolist() == [70, 0]


def test_zero_rate_is_complete():
    for sc in (Scenario.single(1, 0.0), Scenario.multi([0, 1], 0.0), Scenario.complete()):
        p = sample_missing_pattern(50, sc, np.random.default_rng(0), 2)
        assert not p.mask.any()
        assert verify_missing_statistics(p).tolist() == [0.0, 0.0]


def test_same_seed_same_pattern():
    sc = Scenario.multi([0, 2], 0.55)
    a = sample_missing_pattern(77, sc, np.random.default_rng(4), 3)
    b = sample_missing_pattern(77, sc, np.random.default_rng(4), 3)
    assert np.array_equal(a.mask, b.mask)


@settings(max_examples=60)
@given(n=st.integers(1, 400), rate=st.floats(0, 1), k=st.integers(2, 3),
       single=st.booleans(), seed=st.integers(0, 2**31 - 1))
def test_counts_are_exact_and_sets_disjoint(n, rate, k, single, seed):
    rng = np.random.default_rng(seed)
    if single:
        sc = Scenario.single(k - 1, rate)
        mods = [k - 1]
    else:
        mods = list(range(k))
        sc = Scenario.multi(mods, rate)
    p = sample_missing_pattern(n, sc, rng, k)
    rates = verify_missing_statistics(p)
    per_mod = rate / len(mods)
    for m in range(k):
        want = per_mod if m in mods else 0.0
        assert abs(rates[m] - want) <= 1 / n + 1e-12
    assert p.missing_counts().sum() == round_half_up(rate * n)
    assert (p.mask.sum(axis=1) <= 1).all()
    # tally oracle
    for m in range(k):
        assert p.missing_counts()[m] == sum(1 for i in range(n) if p.mask[i, m])


def test_invalid_scenarios():
    with pytest.raises(ValueError):
        Scenario.single(0, 1.2)
    with pytest.raises(ValueError):
        Scenario.multi([], 0.5)
    with pytest.raises(ValueError):
        sample_missing_pattern(10, Scenario.single(3, 0.5), np.random.default_rng(0), 2)


def test_round_half_up():
    assert [round_half_up(x) for x in (0.5, 1.5, 2.5, 2.49)] == [1, 2, 3, 2]


def test_scenario_parse_and_label():
    kinds = ("image", "text")
    sc = Scenario.parse("multi:image,text:0.7", kinds)
    assert sc == Scenario.multi([0, 1], 0.7)
    assert sc.label(kinds) == "multi:image,text:0.7"
    assert Scenario.parse("single:1:0.5", kinds) == Scenario.single(1, 0.5)
    assert Scenario.parse("complete", kinds).kind == "complete"
    for bad in ("single:video:0.5", "multi:image", "half:image:0.2", "single:image,text:0.3"):
        with pytest.raises(ValueError):
            Scenario.parse(bad, kinds)


def test_placeholder_contents():
    assert np.array_equal(placeholder("image", 4, 3), np.ones((4, 3)))
    assert np.array_equal(placeholder("audio", 4, 3), np.zeros((4, 3)))
    text = placeholder("text", 4, 3)
    assert text.sum() == 2 and text[0, 0] == 1 and text[1, 1] == 1
    for kind in ("image", "text", "audio"):
        assert placeholder(kind, 5, 6).tobytes() == placeholder(kind, 5, 6).tobytes()
    with pytest.raises(KeyError, match="video"):
        placeholder("video", 4, 3)


def test_apply_placeholder_per_sample():
    rng = np.random.default_rng(0)
    sample = [rng.normal(size=(4, 3)) for _ in range(3)]
    kinds = ("image", "text", "audio")
    same = apply_placeholder(sample, [False] * 3, kinds)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(same, sample))
    out = apply_placeholder(sample, [True, False, True], kinds)
    assert np.array_equal(out[0], np.ones((4, 3)))
    assert out[1].tobytes() == sample[1].tobytes()
    assert np.array_equal(out[2], np.zeros((4, 3)))
    twice = apply_placeholder(out, [True, False, True], kinds)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(twice, out))


def test_apply_pattern_on_dataset():
    rng = np.random.default_rng(1)
    ds = Dataset([rng.normal(size=(10, 4, 3)) for _ in range(2)], np.arange(10) % 2, ("image", "text"))
    p = sample_missing_pattern(10, Scenario.multi([0, 1], 0.6), np.random.default_rng(2), 2)
    out = apply_pattern(ds, p)
    for m in range(2):
        for i in range(10):
            if p.mask[i, m]:
                assert np.array_equal(out.features[m][i], placeholder(ds.kinds[m], 4, 3))
            else:
                assert out.features[m][i].tobytes() == ds.features[m][i].tobytes()
    with pytest.raises(ValueError):
        apply_pattern(ds.subset(np.arange(5)), p)


def test_jsonl_export():
    p = MissingPattern(np.array([[True, False], [False, False]]), Scenario.single(0, 0.5))
    lines = p.to_jsonl(("image", "text")).splitlines()
    assert [json.loads(line) for line in lines] == [
        {"sample": 0, "missing": {"image": True, "text": False}},
        {"sample": 1, "missing": {"image": False, "text": False}},
    ]
