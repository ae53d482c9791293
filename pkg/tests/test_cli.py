import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from mireg.cli import main


def _run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("b") / "s1"
    assert _run("synth", "--instances", 1, "--seed", 3, "--spacing", 0.05, "--out", out) == 0
    return out


class TestSynth:
    def test_instance_count(self, tmp_path):
        assert _run("synth", "--instances", 6, "--seed", 7, "--spacing", 0.05, "--out", tmp_path / "s7") == 0
        ann = json.loads((tmp_path / "s7" / "annotation.json").read_text())
        assert len(ann["instance_transforms"]) == 6
        assert ann["seed"] == 7 and ann["config"]["instances"] == 6
        assert (tmp_path / "s7" / "scene.ply").is_file() and (tmp_path / "s7" / "model.ply").is_file()

    def test_byte_identical_rerun(self, tmp_path):
        for name in ("a", "b"):
            _run("synth", "--instances", 3, "--seed", 5, "--noise", 0.005, "--outliers", 0.2,
                 "--spacing", 0.05, "--out", tmp_path / name)
        for f in ("annotation.json", "scene.ply", "model.ply"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_zero_instances(self, tmp_path, capsys):
        assert _run("synth", "--instances", 0, "--out", tmp_path / "x") == 2
        assert "instances" in capsys.readouterr().err

    def test_bad_outlier_fraction(self, tmp_path):
        assert _run("synth", "--outliers", 1.0, "--out", tmp_path / "x") == 2


class TestRegister:
    def test_oracle_single_instance(self, bundle, tmp_path):
        assert _run("register", bundle, "--out", tmp_path / "r") == 0
        res = json.loads((tmp_path / "r" / "results.json").read_text())
        ann = json.loads((bundle / "annotation.json").read_text())
        assert len(res["instances"]) == 1
        got, want = res["instances"][0], ann["instance_transforms"][0]
        assert np.abs(np.subtract(got["rotation"], want["rotation"])).max() < 1e-6
        assert np.abs(np.subtract(got["translation"], want["translation"])).max() < 1e-6
        assert res["config"]["features.mode"] == "oracle"
        header = (tmp_path / "r" / "correspondences.csv").read_text().splitlines()[0]
        assert header == "source_idx,target_idx,score,level,candidate_id"
        assert "runtime_seconds" in json.loads((tmp_path / "r" / "timing.json").read_text())

    def test_seeded_weights_identical(self, bundle, tmp_path):
        for name in ("a", "b"):
            assert _run("register", bundle, "--mode", "seeded-weights", "--seed", 7, "--out", tmp_path / name) == 0
        for f in ("results.json", "correspondences.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_plane_without_normals(self, bundle, tmp_path, capsys):
        assert _run("register", bundle, "--strategy", "point-to-plane", "--out", tmp_path / "r") == 2
        assert "normals" in capsys.readouterr().err

    def test_missing_weights(self, bundle, tmp_path):
        assert _run("register", bundle, "--mode", "weights-file", "--weights", tmp_path / "no.json",
                    "--out", tmp_path / "r") == 2

    def test_missing_bundle(self, tmp_path):
        assert _run("register", tmp_path / "nothing", "--out", tmp_path / "r") == 2

    def test_config_file_and_flag_precedence(self, bundle, tmp_path):
        (tmp_path / "c.yaml").write_text("filter.theta: 0.7\nrun.seed: 3\n")
        assert _run("register", bundle, "--config", tmp_path / "c.yaml", "--seed", 9, "--out", tmp_path / "r") == 0
        echo = json.loads((tmp_path / "r" / "results.json").read_text())["config"]
        assert echo["filter.theta"] == 0.7 and echo["run.seed"] == 9

    def test_bad_config(self, bundle, tmp_path):
        (tmp_path / "c.yaml").write_text("filter.thta: 0.7\n")
        assert _run("register", bundle, "--config", tmp_path / "c.yaml", "--out", tmp_path / "r") == 2


class TestBaseline:
    def test_clean_single_instance(self, bundle, tmp_path):
        for name in ("a", "b"):
            assert _run("baseline", bundle, "--out", tmp_path / name) == 0
        res = json.loads((tmp_path / "a" / "results.json").read_text())
        assert len(res["instances"]) == 1
        assert (tmp_path / "a" / "results.json").read_bytes() == (tmp_path / "b" / "results.json").read_bytes()


class TestEval:
    def test_gt_against_itself(self, bundle, tmp_path, capsys):
        ann = bundle / "annotation.json"
        assert _run("eval", ann, ann, "--out", tmp_path / "e") == 0
        rep = json.loads((tmp_path / "e" / "report.json").read_text())
        assert (rep["mr"], rep["mp"], rep["mf"]) == (1.0, 1.0, 1.0)
        assert "MR=1.0000" in capsys.readouterr().out

    def test_empty_predictions(self, bundle, tmp_path):
        (tmp_path / "res.json").write_text(json.dumps({"instances": []}))
        assert _run("eval", tmp_path / "res.json", bundle / "annotation.json", "--out", tmp_path / "e") == 0
        rep = json.loads((tmp_path / "e" / "report.json").read_text())
        assert (rep["mr"], rep["mp"], rep["mf"]) == (0.0, 0.0, 0.0)

    def test_counts_file(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"per_pair": [{"M_suc": 3, "M_gt": 4, "M_pred": 5}]}))
        assert _run("eval", "--counts", tmp_path / "c.json", "--out", tmp_path / "e") == 0
        rep = json.loads((tmp_path / "e" / "report.json").read_text())
        assert rep["mr"] == pytest.approx(0.75, abs=1e-9)
        assert rep["mp"] == pytest.approx(0.6, abs=1e-9)
        rows = list(csv.DictReader(open(tmp_path / "e" / "report.csv")))
        assert rows[0]["M_suc"] == "3"

    def test_schema_mismatch(self, bundle, tmp_path):
        (tmp_path / "bad.json").write_text(json.dumps({"what": 1}))
        assert _run("eval", tmp_path / "bad.json", bundle / "annotation.json", "--out", tmp_path / "e") == 2
        assert _run("eval", bundle / "annotation.json", tmp_path / "bad.json", "--out", tmp_path / "e") == 2

    def test_poor_results_still_exit_zero(self, bundle, tmp_path):
        res = {"instances": [{"rotation": np.eye(3).ravel().tolist(), "translation": [99.0, 0, 0], "overlap": 0.0}]}
        (tmp_path / "res.json").write_text(json.dumps(res))
        assert _run("eval", tmp_path / "res.json", bundle / "annotation.json", "--out", tmp_path / "e") == 0


SUITE = """\
suite.seeds: [0, 1, 2]
suite.instances: [1, 2]
suite.spacing: 0.05
"""


class TestBench:
    def test_grid_rows(self, tmp_path):
        (tmp_path / "suite.yaml").write_text(SUITE)
        assert _run("bench", "--config", tmp_path / "suite.yaml", "--out", tmp_path / "b") == 0
        cells = list(csv.DictReader(open(tmp_path / "b" / "cells.csv")))
        assert len(cells) == 6
        assert all(c["status"] == "ok" for c in cells)
        summary = list(csv.DictReader(open(tmp_path / "b" / "summary.csv")))
        assert [s["instances"] for s in summary] == ["1", "2"]
        assert all(float(s["MR"]) == 1.0 for s in summary)

    def test_deterministic_per_suite_seed(self, tmp_path):
        (tmp_path / "suite.yaml").write_text(SUITE)
        for name, workers in (("a", 1), ("b", 2)):
            assert _run("bench", "--config", tmp_path / "suite.yaml", "--seed", 4, "--workers", workers,
                        "--out", tmp_path / name) == 0
        for f in ("cells.csv", "summary.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_cell_failure_is_recorded(self, tmp_path):
        (tmp_path / "suite.yaml").write_text(SUITE + "suite.outlier_fraction: 1.5\n")
        assert _run("bench", "--config", tmp_path / "suite.yaml", "--out", tmp_path / "b") == 0
        cells = list(csv.DictReader(open(tmp_path / "b" / "cells.csv")))
        assert len(cells) == 6 and all(c["status"].startswith("error: ValueError") for c in cells)
        summary = list(csv.DictReader(open(tmp_path / "b" / "summary.csv")))
        assert [s["failed"] for s in summary] == ["3", "3"]

    def test_unknown_suite_key(self, tmp_path):
        (tmp_path / "suite.yaml").write_text("suite.sedes: [1]\n")
        assert _run("bench", "--config", tmp_path / "suite.yaml", "--out", tmp_path / "b") == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mireg", "synth", "--instances", "0", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 2
