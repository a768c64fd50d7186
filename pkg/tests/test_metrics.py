import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from odormix.dataset import RawRecord, pad_to, unify
from odormix.metrics import (
    NoScorableClass, Skipped, auroc_binary, auroc_macro, auroc_pairs_oracle, evaluate_predictions, render_table,
)


def test_binary_examples():
    assert auroc_binary(np.array([0.9, 0.8, 0.2, 0.1]), np.array([1, 1, 0, 0])) == 1.0
    assert auroc_binary(np.full(5, 0.3), np.array([1, 0, 1, 0, 0])) == 0.5
    assert isinstance(auroc_binary(np.ones(3), np.zeros(3)), Skipped)
    assert isinstance(auroc_binary(np.ones(3), np.ones(3)), Skipped)


def test_rank_formula_equals_pair_oracle_n200():
    rng = np.random.default_rng(0)
    scores = rng.random(200)
    labels = rng.random(200) < 0.3
    assert auroc_binary(scores, labels) == auroc_pairs_oracle(scores, labels)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 80), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_oracle_equivalence_with_ties(n, levels, seed):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, levels, n).astype(float)
    labels = rng.random(n) < 0.5
    a, b = auroc_binary(scores, labels), auroc_pairs_oracle(scores, labels)
    assert a == b
    if isinstance(a, float):
        assert auroc_binary(np.log1p(scores) * 3 - 1, labels) == a


def test_macro_examples():
    preds = np.array([[0.9, 0.5], [0.1, 0.5], [0.8, 0.5], [0.2, 0.5]])
    labels = np.array([[1, 1], [0, 0], [1, 0], [0, 1]])
    assert auroc_macro(preds, labels).mean == pytest.approx(0.75)
    labels2 = np.array([[0, 1], [0, 0], [0, 1], [0, 0]])
    preds2 = np.array([[0.1, 0.9], [0.1, 0.2], [0.1, 0.3], [0.1, 0.4]])
    res = auroc_macro(preds2, labels2)
    assert res.skipped == 1 and res.mean == pytest.approx(0.75)
    flat = auroc_macro(np.full((4, 2), 0.4), labels)
    assert flat.mean == 0.5


def test_macro_no_scorable_class():
    with pytest.raises(NoScorableClass):
        auroc_macro(np.ones((3, 2)), np.zeros((3, 2)))


def _samples():
    space = unify(["a", "b", "c"], ["a", "b"])
    singles = [pad_to(space, RawRecord(i, (f"C{'C' * i}",), np.array(y, np.int8)), ["a", "b", "c"], "singles", f"s{i}")
               for i, y in enumerate([[1, 0, 1], [0, 1, 0], [1, 1, 0], [0, 0, 1]])]
    pairs = [pad_to(space, RawRecord(i, ("CO", f"N{'C' * i}"), np.array(y, np.int8)), ["a", "b"], "pairs", f"p{i}")
             for i, y in enumerate([[1, 0], [0, 1], [1, 1], [0, 0]])]
    return space, singles + pairs


def test_evaluate_predictions_perfect_scores():
    space, samples = _samples()
    Y = np.array([s.labels for s in samples], dtype=float)
    rep = evaluate_predictions(Y, samples, space)
    assert rep.auroc_combined == 1.0 and rep.auroc_singles == 1.0 and rep.auroc_pairs == 1.0
    assert rep.n_samples == {"singles": 4, "pairs": 4}


def test_pairs_slice_uses_only_pair_labels():
    space, samples = _samples()
    Y = np.array([s.labels for s in samples], dtype=float)
    preds = Y.copy()
    preds[4:, space.index["c"]] = np.array([0.9, 0.1, 0.5, 0.2])
    assert evaluate_predictions(preds, samples, space).auroc_pairs == 1.0


def test_table_column_order():
    space, samples = _samples()
    rep = evaluate_predictions(np.array([s.labels for s in samples], dtype=float), samples, space)
    header = render_table([("m", rep)]).splitlines()[0].split()
    assert header == ["Model", "Combined", "Singles", "Pairs"]
