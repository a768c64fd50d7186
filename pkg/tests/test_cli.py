import json
import time

import numpy as np
import pytest

from odormix import numerics as nx
from odormix.cli import InsufficientSamples, main, project_2d, read_config, train_config, ConfigError

SMOKE_CFG = """# smoke settings
lr = 3e-3
max_epochs = 2
patience = 2
d_e = 16
d_p = 8
d_h = 8
heads = 2
n_buckets = 32
batch_size = 16
"""


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "fx")]) == 0
    assert main(["prepare", "--singles", str(root / "fx/singles.csv"), "--pairs", str(root / "fx/pairs.csv"),
                 "--out", str(root / "prep")]) == 0
    (root / "run.cfg").write_text(SMOKE_CFG)
    return root


def test_prepare_outputs(prepared):
    report = json.loads((prepared / "prep/prepare_report.json").read_text())
    assert report["samples_per_source"] == {"singles": 30, "pairs": 20}
    assert report["union_size"] == 20
    for name in ("label_space.json", "samples.csv", "folds.csv", "rejects.csv"):
        assert (prepared / "prep" / name).exists()


def test_prepare_planted_vocab(tmp_path, capsys):
    shared = [f"s{i}" for i in range(60)]
    s_names = shared + [f"x{i}" for i in range(78)]
    p_names = shared + [f"y{i}" for i in range(14)]
    rng = np.random.default_rng(0)
    rows = ["smiles," + ",".join(s_names)]
    rows += ["C" * (i + 1) + "," + ",".join(str(v) for v in rng.integers(0, 2, 138)) for i in range(10)]
    (tmp_path / "s.csv").write_text("\n".join(rows) + "\n")
    rows = ["smiles_a,smiles_b," + ",".join(p_names)]
    rows += [f"{'C' * (i + 1)},O{'C' * i}," + ",".join(str(v) for v in rng.integers(0, 2, 74)) for i in range(10)]
    (tmp_path / "p.csv").write_text("\n".join(rows) + "\n")
    assert main(["prepare", "--singles", str(tmp_path / "s.csv"), "--pairs", str(tmp_path / "p.csv"),
                 "--out", str(tmp_path / "o")]) == 0
    assert "152 labels" in capsys.readouterr().out
    report = json.loads((tmp_path / "o/prepare_report.json").read_text())
    assert report["overlap"] == 60


def test_prepare_empty_pairs_and_duplicates(tmp_path, caplog):
    (tmp_path / "s.csv").write_text("smiles,a\nCCO,1\nCCO,0\nCCN,0\nCO,1\nCCCC,0\nCS,1\n")
    (tmp_path / "p.csv").write_text("")
    assert main(["prepare", "--singles", str(tmp_path / "s.csv"), "--pairs", str(tmp_path / "p.csv"),
                 "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o/prepare_report.json").read_text())
    assert report["duplicates"]["singles"] == 1 and report["samples_per_source"]["pairs"] == 0
    assert "empty" in caplog.text


def test_prepare_format_error_exit_code(tmp_path):
    (tmp_path / "s.csv").write_text("molecule,a\nCCO,1\n")
    assert main(["prepare", "--singles", str(tmp_path / "s.csv"), "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "r.csv").write_text("smiles,a\nC1CC,1\n" + "".join(f"{'C' * i},1\n" for i in range(1, 7)))
    assert main(["prepare", "--singles", str(tmp_path / "r.csv"), "--out", str(tmp_path / "o2"), "--strict"]) == 2
    assert main(["prepare", "--singles", str(tmp_path / "r.csv"), "--out", str(tmp_path / "o3")]) == 0
    assert "UnpairedRingBond" in (tmp_path / "o3/rejects.csv").read_text()


def test_pipeline_smoke_under_a_minute(prepared):
    started = time.perf_counter()
    code = main(["pipeline", "--config", str(prepared / "run.cfg"), "--data", str(prepared / "prep"),
                 "--teacher", str(prepared / "fx/teacher.tsv"), "--out", str(prepared / "run"), "--rotations", "0"])
    assert code == 0
    assert time.perf_counter() - started < 60
    assert (prepared / "run/config.txt").read_text() == SMOKE_CFG
    assert (prepared / "run/fold_0/checkpoint_p152.json").exists()


def test_ablation_flags(prepared):
    out = prepared / "abl"
    assert main(["train", "--config", str(prepared / "run.cfg"), "--data", str(prepared / "prep"),
                 "--ablation", "pna", "--no-kd", "--out", str(out)]) == 0
    ck = json.loads((out / "checkpoint.json").read_text())
    assert ck["aggregator"] == "pna"
    assert ck["meta"]["train_config"]["kd"] is False
    assert "kd = false" in (out / "config.effective.txt").read_text()


def test_train_without_teacher_is_a_config_error(prepared):
    assert main(["train", "--config", str(prepared / "run.cfg"), "--data", str(prepared / "prep"),
                 "--out", str(prepared / "noteacher")]) == 2


def test_missing_path_fails_before_compute(prepared, tmp_path):
    code = main(["train", "--config", str(prepared / "run.cfg"), "--data", str(prepared / "prep"),
                 "--teacher", str(tmp_path / "nope.tsv"), "--out", str(tmp_path / "o")])
    assert code == 2
    assert not (tmp_path / "o").exists()


def test_evaluate_project_embed_pseudo(prepared, capsys):
    ck = prepared / "run/fold_0/checkpoint_initial.json"
    assert main(["evaluate", "--checkpoint", str(ck), "--data", str(prepared / "prep"),
                 "--out", str(prepared / "ev")]) == 0
    header = capsys.readouterr().out.splitlines()[0].split()
    assert header == ["Model", "Combined", "Singles", "Pairs"]
    rep = json.loads((prepared / "ev/eval_report.json").read_text())
    assert 0.0 <= rep["auroc_combined"] <= 1.0
    assert main(["project", "--checkpoint", str(ck), "--data", str(prepared / "prep"),
                 "--out", str(prepared / "proj.csv")]) == 0
    lines = (prepared / "proj.csv").read_text().splitlines()
    assert lines[0] == "id,source,x,y" and len(lines) == 51
    assert main(["embed", "--checkpoint", str(ck), "--data", str(prepared / "prep"),
                 "--out", str(prepared / "emb.tsv")]) == 0
    assert (prepared / "emb.tsv").read_text().startswith("d_e\t16\n")
    assert main(["pseudo-label", "--checkpoint", str(ck), "--data", str(prepared / "prep"),
                 "--out", str(prepared / "pl")]) == 0
    th = json.loads((prepared / "pl/thresholds.json").read_text())
    assert th["density"]["p152"] >= th["density"]["original"]


def test_evaluate_label_mismatch_exit_3(prepared, tmp_path):
    (tmp_path / "s.csv").write_text("smiles,q\n" + "".join(f"{'C' * i},{i % 2}\n" for i in range(1, 8)))
    assert main(["prepare", "--singles", str(tmp_path / "s.csv"), "--out", str(tmp_path / "other")]) == 0
    ck = prepared / "run/fold_0/checkpoint_initial.json"
    assert main(["evaluate", "--checkpoint", str(ck), "--data", str(tmp_path / "other")]) == 3


def test_random_checkpoint_is_near_chance(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "fx"), "--n-molecules", "400", "--n-pairs", "600"]) == 0
    assert main(["prepare", "--singles", str(tmp_path / "fx/singles.csv"), "--pairs", str(tmp_path / "fx/pairs.csv"),
                 "--out", str(tmp_path / "prep")]) == 0
    assert main(["train", "--data", str(tmp_path / "prep"), "--out", str(tmp_path / "rnd"), "--lr", "1e-12",
                 "--max-epochs", "1", "--kd", "false", "--d-e", "32", "--d-p", "16", "--d-h", "16"]) == 0
    assert main(["evaluate", "--checkpoint", str(tmp_path / "rnd/checkpoint.json"), "--data", str(tmp_path / "prep"),
                 "--split", "all", "--out", str(tmp_path / "ev")]) == 0
    rep = json.loads((tmp_path / "ev/eval_report.json").read_text())
    for key in ("auroc_combined", "auroc_singles", "auroc_pairs"):
        assert abs(rep[key] - 0.5) < 0.05, (key, rep[key])


def test_selfcheck_and_negative_control(capsys):
    assert main(["selfcheck"]) == 0
    first = capsys.readouterr().out
    assert all(line.startswith("PASS") for line in first.splitlines())
    assert main(["selfcheck"]) == 0
    assert capsys.readouterr().out == first
    assert main(["selfcheck", "--corrupt-grad", "sigmoid"]) == 1
    assert "FAIL gradients" in capsys.readouterr().out
    assert not nx._CORRUPTED


def test_project_2d_properties():
    with pytest.raises(InsufficientSamples):
        project_2d(np.ones((2, 4)))
    assert not project_2d(np.ones((5, 4))).any()
    rng = np.random.default_rng(0)
    Z = rng.standard_normal((200, 6)) * np.array([5.0, 3.0, 1.0, 0.5, 0.2, 0.1])
    xy = project_2d(Z)
    assert xy[:, 0].var() >= xy[:, 1].var()
    ref = np.linalg.eigvalsh(np.cov(Z.T))[::-1][:2]
    assert np.allclose(xy.var(axis=0, ddof=1), ref, rtol=1e-6)


def test_config_parsing(tmp_path):
    (tmp_path / "c.cfg").write_text("lr = 0.01\nkd = off\naggregator = pna\n")
    cfg = train_config(read_config(tmp_path / "c.cfg"))
    assert cfg.lr == 0.01 and cfg.kd is False and cfg.aggregator == "pna"
    (tmp_path / "bad.cfg").write_text("learning_rate = 1\n")
    with pytest.raises(ConfigError):
        read_config(tmp_path / "bad.cfg")
    with pytest.raises(ConfigError):
        train_config({"lr": "-1"})
