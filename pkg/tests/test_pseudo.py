import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from odormix.dataset import ORIG, PADDED, PSEUDO, RawRecord, pad_to, unify
from odormix.pseudo import (
    P78, P152, ClassRates, EmptyDataset, EmptyPredictions, IndexSetMismatch, augment, augment_arrays,
    class_rates, density_report, fit_thresholds, missing_index_set, target_count, tie_mass,
)


def test_class_rates():
    labels = np.array([[1, 0, 1], [0, 0, 1], [0, 0, 1], [0, 0, 1]])
    r = class_rates(labels)
    assert np.array_equal(r.gamma, [0.25, 0.0, 1.0]) and r.n == 4
    with pytest.raises(EmptyDataset):
        class_rates(np.zeros((0, 3)))


def test_fit_thresholds_examples():
    col = np.array([[0.9], [0.8], [0.2], [0.1]])
    th = fit_thresholds(col, ClassRates(np.array([0.25]), 4))
    assert th.k[0] == 1 and th.tau[0] == 0.9
    assert np.array_equal(th.select(col)[:, 0], [True, False, False, False])
    th0 = fit_thresholds(col, ClassRates(np.array([0.0]), 4))
    assert th0.tau[0] == np.inf and not th0.select(col).any()
    th1 = fit_thresholds(col, ClassRates(np.array([1.0]), 4))
    assert th1.tau[0] == 0.1 and th1.select(col).all()


def test_target_count_rounds_half_up():
    assert target_count(0.25, 10) == 3
    assert target_count(0.24, 10) == 2
    assert target_count(0.0, 10) == 0


def test_fit_thresholds_errors():
    with pytest.raises(EmptyPredictions):
        fit_thresholds(np.zeros((0, 2)), ClassRates(np.zeros(2), 1))
    with pytest.raises(IndexSetMismatch):
        fit_thresholds(np.zeros((3, 2)), ClassRates(np.zeros(3), 1))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 60), st.floats(0, 1), st.integers(0, 2**31 - 1), st.booleans())
def test_selected_fraction_is_closest_achievable(m, gamma, seed, ties):
    rng = np.random.default_rng(seed)
    preds = rng.random((m, 1))
    if ties:
        preds = np.round(preds, 1)
    th = fit_thresholds(preds, ClassRates(np.array([gamma]), 1))
    frac = th.select(preds).mean()
    assert gamma - 1 / m - 1e-12 <= frac <= gamma + 1 / m + tie_mass(preds, th)[0] + 1e-12
    if not ties:
        # over every cutoff count j, the rule's k is a closest one to gamma * m
        best = min(abs(j / m - gamma) for j in range(m + 1))
        assert abs(th.k[0] / m - gamma) <= best + 1e-12
        assert th.select(preds).sum() == th.k[0]


def _pairs_fixture():
    space = unify(["floral", "fruity", "rose", "green"], ["floral", "fruity"])
    recs = [RawRecord(2, ("OC1COC(Cc2ccccc2)OC1", "OCc1ccccc1"), np.array([1, 1], np.int8)),
            RawRecord(3, ("CCO", "CCN"), np.array([0, 0], np.int8))]
    samples = [pad_to(space, r, ["floral", "fruity"], "pairs", f"p{i}") for i, r in enumerate(recs)]
    return space, samples


def test_p152_gains_rose_for_known_blend():
    space, samples = _pairs_fixture()
    rose, green = space.index["rose"], space.index["green"]
    preds = np.full((2, 4), 0.1)
    preds[0, rose] = 0.8
    order = space.names
    gamma = np.zeros(4)
    gamma[rose] = 0.5
    th = fit_thresholds(preds, ClassRates(gamma, 1))
    missing = missing_index_set(space.mask("pairs"))
    assert set(missing) == {rose, green}
    out = augment(samples, preds, th, P152, missing)
    got = {order[i] for i in np.flatnonzero(out[0].labels)}
    assert got == {"floral", "fruity", "rose"}
    assert out[0].provenance[rose] == PSEUDO and out[0].provenance[space.index["floral"]] == ORIG


def test_p78_with_zero_rates_keeps_labels():
    space, samples = _pairs_fixture()
    preds = np.random.default_rng(0).random((2, 4))
    th = fit_thresholds(preds, ClassRates(np.zeros(4), 1))
    out = augment(samples, preds, th, P78, missing_index_set(space.mask("pairs")))
    for a, b in zip(samples, out):
        assert np.array_equal(a.labels, b.labels)


def test_p152_only_adds_positives():
    rng = np.random.default_rng(1)
    labels = (rng.random((30, 6)) < 0.3).astype(np.int8)
    prov = np.full((30, 6), ORIG, dtype=object)
    prov[:, 4:] = PADDED
    preds = rng.random((30, 6))
    th = fit_thresholds(preds, ClassRates(rng.random(6), 1))
    new78, prov78 = augment_arrays(labels, prov, preds, th, P78, [4, 5])
    new152, prov152 = augment_arrays(labels, prov, preds, th, P152, [4, 5])
    assert np.array_equal(new78[:, :4], labels[:, :4])
    assert np.all(new152[:, :4] >= labels[:, :4])
    assert np.array_equal(new78[:, 4:], new152[:, 4:])
    assert np.all(prov78[:, 4:] == PSEUDO)
    changed = new152[:, :4] != labels[:, :4]
    assert np.all(prov152[:, :4][changed] == PSEUDO)


def test_augment_index_errors():
    labels = np.zeros((2, 3), np.int8)
    prov = np.full((2, 3), ORIG, dtype=object)
    th = fit_thresholds(np.zeros((2, 3)), ClassRates(np.zeros(3), 1))
    with pytest.raises(IndexSetMismatch):
        augment_arrays(labels, prov, np.zeros((2, 3)), th, P78, [3])
    with pytest.raises(IndexSetMismatch):
        augment_arrays(labels, prov, np.zeros((2, 2)), th, P78, [0])


def test_density_report():
    space, samples = _pairs_fixture()
    samples[1].labels[:] = 0
    samples[1].labels[[0, 1, 2]] = 1
    samples[0].labels[:] = 0
    samples[0].labels[0] = 1
    rep = density_report(samples)
    assert rep == {"pairs": 2.0}
    assert "singles" not in rep


def test_density_approaches_sum_of_rates():
    # dense source rates, sparse target: after augmenting every column, density ~ sum(gamma)
    rng = np.random.default_rng(7)
    L, m = 12, 4000
    gamma = rng.uniform(0.05, 0.5, L)
    scores = rng.random((m, L))
    truth = (scores < gamma).astype(np.int8)
    sparse = truth * (rng.random((m, L)) > 0.7)
    prov = np.full((m, L), ORIG, dtype=object)
    th = fit_thresholds(1 - scores, ClassRates(gamma, m))
    new, _ = augment_arrays(sparse, prov, 1 - scores, th, P152, [])
    assert abs(new.sum(axis=1).mean() - gamma.sum()) / gamma.sum() < 0.10
