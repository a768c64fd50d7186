import pytest

from odormix import dataset as ds, synthetic
from odormix.trainer import TrainConfig

SMALL_DIMS = dict(d_e=16, d_p=8, d_h=8, heads=2, n_buckets=32, batch_size=16, lr=3e-3)


def small_config(**kw) -> TrainConfig:
    return TrainConfig(**{**SMALL_DIMS, "max_epochs": 3, "patience": 2, **kw})


@pytest.fixture(scope="session")
def tiny():
    cfg = synthetic.SyntheticConfig(n_molecules=40, n_pairs=60, n_labels=8, n_pair_labels=6,
                                    n_agonism=1, n_antagonism=1, seed=3)
    data = synthetic.generate(cfg)
    dataset = ds.build_dataset(data.singles_result(), data.pairs_result())
    plans = [ds.stratified_kfold(dataset.by_source(s), 5, 0) for s in ds.SOURCES]
    fold = ds.synchronize(*plans)[0]
    return data, dataset, plans, fold


_VERDICTS: list[tuple[int, bool, str]] = []


@pytest.fixture
def verdict():
    """Record one acceptance line; the assert stays in the test."""

    def record(number: int, passed: bool, detail: str) -> bool:
        _VERDICTS.append((number, bool(passed), detail))
        print(f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(_VERDICTS):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")
