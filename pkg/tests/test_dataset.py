import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from odormix import dataset as ds
from odormix.dataset import (
    PADDED, FoldCountMismatch, FormatError, RawRecord, UnknownLabelName, build_dataset, iterative_stratification,
    load_csv, pad_to, stratified_kfold, synchronize, unify,
)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_load_singles_and_pairs(tmp_path):
    s = load_csv(write(tmp_path / "s.csv", "smiles,a,b,c\nCCO,1,0,1\n"), "singles")
    assert s.labels == ["a", "b", "c"] and np.array_equal(s.records[0].labels, [1, 0, 1])
    p = load_csv(write(tmp_path / "p.csv", "smiles_a,smiles_b,a,b\nCCO,OCc1ccccc1,0,1\n"), "pairs")
    assert p.records[0].molecules == ("CCO", "OCc1ccccc1") and not p.has_fold


def test_rejects_and_header_errors(tmp_path):
    res = load_csv(write(tmp_path / "s.csv", "smiles,a\nC1CC,1\nCCO,2\nCCO\nCCN,0\n"), "singles")
    assert [r for r, _ in res.rejects] == [2, 3, 4]
    assert "UnpairedRingBond" in res.rejects[0][1]
    assert len(res.records) == 1
    with pytest.raises(FormatError):
        load_csv(write(tmp_path / "bad.csv", "mol,a\nCCO,1\n"), "singles")
    with pytest.raises(FormatError):
        load_csv(write(tmp_path / "empty.csv", ""), "pairs")


def test_quoted_names_and_stereo_normalized(tmp_path):
    res = load_csv(write(tmp_path / "s.csv", 'smiles,"Fruity, sweet",b\nC[C@H](N)O,1,0\n'), "singles")
    assert res.labels[0] == "Fruity, sweet"
    assert res.records[0].molecules == ("C[CH](N)O",)


def test_unify_examples():
    sp = unify(["a", "b"], ["c"])
    assert sp.names == ["a", "b", "c"]
    assert list(sp.mask("singles")) == [True, True, False] and list(sp.mask("pairs")) == [False, False, True]
    same = unify(["x", "y"], ["Y ", "x"])
    assert same.names == ["x", "y"] and same.mask("singles").all() and same.mask("pairs").all()
    with pytest.raises(UnknownLabelName):
        sp.indices(["zzz"])


def test_planted_152_union():
    shared = [f"shared {i}" for i in range(60)]
    s_names = shared + [f"single {i}" for i in range(78)]
    p_names = shared + [f"pair {i}" for i in range(14)]
    sp = unify(s_names, p_names)
    assert len(s_names) == 138 and len(p_names) == 74 and len(sp) == 152


def test_pad_to():
    sp = unify(["a", "b", "c"], ["b"])
    pair = pad_to(sp, RawRecord(2, ("CCO", "CCN"), np.array([1], np.int8)), ["b"], "pairs", "p0")
    assert list(pair.labels) == [0, 1, 0] and list(pair.provenance) == [PADDED, "orig", PADDED]
    single = pad_to(sp, RawRecord(2, ("CCO",), np.zeros(3, np.int8)), ["a", "b", "c"], "singles", "s0")
    assert single.known_mask.all() and single.n_positive == 0


def test_build_dataset_dedupes_first_wins():
    sp_s = ds.LoadResult(["a"], [RawRecord(2, ("CCO",), np.array([1], np.int8)),
                                 RawRecord(3, ("CCO",), np.array([0], np.int8))], [])
    sp_p = ds.LoadResult(["a"], [RawRecord(2, ("CCO", "CCN"), np.array([1], np.int8)),
                                 RawRecord(3, ("CCN", "CCO"), np.array([0], np.int8))], [])
    d = build_dataset(sp_s, sp_p)
    assert d.report["duplicates"] == {"singles": 1, "pairs": 1}
    assert [s.labels[0] for s in d.samples] == [1, 1]


def test_singles_only_dataset_warns(caplog):
    d = build_dataset(ds.LoadResult(["a"], [RawRecord(2, ("CCO",), np.array([1], np.int8))], []), None)
    assert len(d) == 1 and "singles only" in caplog.text


def test_samples_csv_roundtrip(tmp_path):
    sp = unify(["a", "b"], ["b"])
    samples = [pad_to(sp, RawRecord(2, ("CCO", "CCN"), np.array([1], np.int8)), ["b"], "pairs", "p0"),
               pad_to(sp, RawRecord(3, ("CO",), np.array([0, 1], np.int8)), ["a", "b"], "singles", "s0")]
    ds.write_samples_csv(tmp_path / "x.csv", sp, samples)
    back = ds.read_samples_csv(tmp_path / "x.csv", sp)
    for a, b in zip(samples, back):
        assert a.id == b.id and a.molecules == b.molecules
        assert np.array_equal(a.labels, b.labels) and np.array_equal(a.known_mask, b.known_mask)


def _spread(Y, folds, k):
    counts = np.array([[Y[folds == f, c].sum() for f in range(k)] for c in range(Y.shape[1])])
    return (counts.max(axis=1) - counts.min(axis=1)).max()


def test_stratification_examples():
    Y = np.array([[1]] * 5 + [[0]] * 5, dtype=bool)
    f = iterative_stratification(Y, 5, seed=0)
    for k in range(5):
        assert Y[f == k].sum() == 1 and (f == k).sum() == 2
    Y3 = np.array([[1]] * 3 + [[0]] * 7, dtype=bool)
    a = iterative_stratification(Y3, 5, seed=1)
    assert np.array_equal(a, iterative_stratification(Y3, 5, seed=1))
    assert _spread(Y3, a, 5) <= 1


@settings(max_examples=30, deadline=None)
@given(st.integers(50, 400), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_stratification_spread_at_most_one(n, L, seed):
    rng = np.random.default_rng(seed)
    Y = rng.random((n, L)) < rng.uniform(0.02, 0.6, L)
    f = iterative_stratification(Y, 5, seed)
    assert set(np.unique(f)) <= set(range(5)) and len(f) == n
    assert _spread(Y, f, 5) <= 1


def test_infeasible_instance_still_returns_a_partition():
    # exhaustive search shows no 5-fold assignment of this matrix reaches spread 1
    rng = np.random.default_rng(0)
    Y = rng.random((10, 8)) < rng.uniform(0.02, 0.6, 8)
    f = iterative_stratification(Y, 5, seed=0)
    assert sorted(np.unique(f)) == [0, 1, 2, 3, 4]
    assert _spread(Y, f, 5) == 2


def test_predefined_folds_respected():
    sp = unify(["a"], ["a"])
    samples = [pad_to(sp, RawRecord(i, ("C", "N"), np.array([i % 2], np.int8), fold=(i * 3) % 5), ["a"],
                      "pairs", f"p{i}") for i in range(10)]
    plan = stratified_kfold(samples, 5)
    assert all(plan.folds[s.id] == s.fold for s in samples)
    with pytest.raises(FoldCountMismatch):
        stratified_kfold(samples, 2)


def test_pairs_fold_column(tmp_path):
    res = load_csv(write(tmp_path / "p.csv", "smiles_a,smiles_b,fold,a\nCCO,CCN,3,1\n"), "pairs")
    assert res.has_fold and res.records[0].fold == 3


def _plan(prefix, n, k=5):
    return ds.FoldPlan(k, {f"{prefix}{i}": i % k for i in range(n)})


def test_synchronize_union_and_roles():
    folds = synchronize(_plan("s", 50), _plan("p", 600))
    assert len(folds) == 5
    for f in folds:
        assert f.sizes == {"train": 390, "val": 130, "test": 130}
        assert not (set(f.train) & set(f.val)) and not (set(f.val) & set(f.test))
        assert len(set(f.train) | set(f.val) | set(f.test)) == 650
    with pytest.raises(FoldCountMismatch):
        synchronize(_plan("s", 10, 5), _plan("p", 10, 4))


def test_folds_csv_roundtrip(tmp_path):
    plan = _plan("s", 12)
    ds.write_folds_csv(tmp_path / "f.csv", plan)
    back = ds.read_folds_csv(tmp_path / "f.csv", 5)
    assert back.folds == plan.folds and back.k == 5
