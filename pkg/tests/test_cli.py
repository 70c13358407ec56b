import json

import numpy as np
import pytest

from pspindex.cli import main, read_config
from pspindex.errors import UsageError
from pspindex.vecstore import load_fvecs, read_ivecs

BUILD = ["--K", "24", "--L", "48", "--R", "12", "--S", "3", "--c", "4", "--m", "64"]


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--kind", "gaussian", "--n", "1500", "--d", "8", "--queries", "30",
                 "--out", str(d / "base.fvecs"), "--query-out", str(d / "q.fvecs")]) == 0
    assert main(["gt", "--base", str(d / "base.fvecs"), "--query", str(d / "q.fvecs"), "--k", "10",
                 "--out", str(d / "gt.ivecs")]) == 0
    assert main(["build", "--base", str(d / "base.fvecs"), "--out", str(d / "idx.psp"), *BUILD]) == 0
    return d


def test_pipeline_files(work):
    assert load_fvecs(work / "base.fvecs").count == 1500
    assert read_ivecs(work / "gt.ivecs").shape == (30, 10)
    assert (work / "idx.psp").read_bytes()[:4] == b"PSP1"


def test_build_is_deterministic(work):
    assert main(["build", "--base", str(work / "base.fvecs"), "--out", str(work / "again.psp"), *BUILD]) == 0
    assert (work / "again.psp").read_bytes() == (work / "idx.psp").read_bytes()


def test_search_csv(work):
    out = work / "res.csv"
    assert main(["search", "--index", str(work / "idx.psp"), "--query", str(work / "q.fvecs"),
                 "--k", "10", "--ls", "40", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "query_id,rank,base_id,score,dc,wall_ns"
    assert len(lines) == 1 + 30 * 10


def test_eval_and_inspect(work, capsys):
    assert main(["eval", "--index", str(work / "idx.psp"), "--query", str(work / "q.fvecs"),
                 "--gt", str(work / "gt.ivecs"), "--k", "10", "--ls", "10,40,160", "--brute",
                 "--plot-data", "--out-dir", str(work / "ev")]) == 0
    rep = json.loads((work / "ev" / "report.json").read_text())
    assert [r["l_s"] for r in rep["rows"][:3]] == [10, 40, 160]
    assert rep["rows"][-1]["recall"] == 1.0
    capsys.readouterr()
    assert main(["inspect", "--index", str(work / "idx.psp")]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["n"] == 1500 and info["degree_mean"] <= 15


def test_train_aet_and_rules(work, capsys):
    out = work / "aet.psp"
    assert main(["train-aet", "--index-in", str(work / "idx.psp"), "--index-out", str(out), "--k", "10",
                 "--ls", "40", "--max-queries", "100"]) == 0
    capsys.readouterr()
    assert main(["aet", "export-rules", "--index", str(out)]) == 0
    text = capsys.readouterr().out.strip()
    assert text.endswith("continue;")
    assert main(["search", "--index", str(out), "--query", str(work / "q.fvecs"), "--k", "10",
                 "--ls", "40", "--aet", "on", "--out", str(work / "aet.csv")]) == 0


def test_theory_commands(work, capsys):
    assert main(["theory", "qs", "--d", "4", "--trials", "100000", "--out", str(work / "qs.csv")]) == 0
    summ = json.loads((work / "qs.json").read_text())
    assert summ["matches_mc_4sigma2"] and summ["mc_monotone"]
    assert main(["theory", "mu-bar", "--base", str(work / "base.fvecs"), "--query", str(work / "q.fvecs"),
                 "--out", str(work / "mu.csv")]) == 0
    assert json.loads((work / "mu.json").read_text())["all_grid_ok"]
    assert main(["theory", "kmips-overlap", "--base", str(work / "base.fvecs"), "--query",
                 str(work / "q.fvecs"), "--k", "10", "--points", "5"]) == 0
    assert main(["theory", "overlap", "--base", str(work / "base.fvecs"), "--query", str(work / "q.fvecs"),
                 "--max-queries", "5", "--k", "10", "--ls", "40", "--mus", "1,1000"]) == 0
    assert main(["theory", "hop-scaling", "--sizes", "500,1000", "--d", "4", "--queries", "10",
                 "--K", "16", "--L", "32", "--R", "8", "--S", "0"]) == 0


class TestExitCodes:
    def test_usage(self, capsys):
        assert main(["build"]) == 2
        assert main(["nope"]) == 2

    def test_missing_file_is_data_error(self, tmp_path, capsys):
        assert main(["build", "--base", str(tmp_path / "missing.fvecs"), "--out", str(tmp_path / "x")]) == 3
        err = capsys.readouterr().err.strip()
        assert err.startswith("error:") and "\n" not in err

    def test_truncated_index(self, work, tmp_path, capsys):
        bad = tmp_path / "bad.psp"
        bad.write_bytes((work / "idx.psp").read_bytes()[:100])
        assert main(["inspect", "--index", str(bad)]) == 3
        err = capsys.readouterr().err
        assert err.startswith("error:") and ("truncated" in err or "past end" in err)

    def test_bad_magic(self, tmp_path):
        bad = tmp_path / "bad.psp"
        bad.write_bytes(b"NOPE" + b"\0" * 40)
        assert main(["inspect", "--index", str(bad)]) == 3

    def test_invalid_param(self, work):
        assert main(["build", "--base", str(work / "base.fvecs"), "--out", str(work / "z.psp"),
                     "--L", "4", "--R", "8"]) == 2

    def test_dim_mismatch(self, work, tmp_path):
        assert main(["synth", "--n", "5", "--d", "3", "--out", str(tmp_path / "q3.fvecs")]) == 0
        assert main(["search", "--index", str(work / "idx.psp"), "--query", str(tmp_path / "q3.fvecs")]) == 3

    def test_aet_missing(self, work):
        assert main(["search", "--index", str(work / "idx.psp"), "--query", str(work / "q.fvecs"),
                     "--k", "10", "--aet", "on"]) == 2

    def test_train_aet_needs_output(self, work):
        assert main(["train-aet", "--base", str(work / "base.fvecs")]) == 2


class TestConfig:
    def test_config_supplies_required_flags(self, work, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"# build settings\nbase = {work / 'base.fvecs'}\nout = {tmp_path / 'c.psp'}\n"
                       "K=24\nL=48\nR=12\nS=3\nc=4\nm=64\n")
        assert main(["--config", str(cfg), "build"]) == 0
        assert (tmp_path / "c.psp").read_bytes() == (work / "idx.psp").read_bytes()

    def test_flag_beats_config(self, work, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"base={work / 'base.fvecs'}\nout={tmp_path / 'c.psp'}\nK=24\nL=48\nR=12\nS=3\nc=4\nm=64\n")
        assert main(["--config", str(cfg), "build", "--R", "6"]) == 0
        capsys.readouterr()
        assert main(["inspect", "--index", str(tmp_path / "c.psp")]) == 0
        assert json.loads(capsys.readouterr().out)["degree_cap"] == 9

    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("colour=blue\n")
        assert main(["--config", str(cfg), "build"]) == 2
        assert "unknown config key" in capsys.readouterr().err

    def test_bad_value_rejected(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("K=many\n")
        assert main(["--config", str(cfg), "build"]) == 2

    def test_read_config_syntax(self, tmp_path):
        cfg = tmp_path / "x.cfg"
        cfg.write_text("no equals here\n")
        with pytest.raises(UsageError):
            read_config(cfg)
        cfg.write_text("norm-tail = 0.3  # trailing comment\n")
        assert read_config(cfg) == {"norm_tail": "0.3"}
