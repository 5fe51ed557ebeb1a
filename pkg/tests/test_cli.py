import csv
import json

import numpy as np
import pytest

from distdyn.cli import main
from distdyn.cohort import TRAJECTORY_COLUMNS
from distdyn.core import deserialize_model
from distdyn.ingest import synthetic_cohort, write_cgm_csv

from oracles import synthetic_arm_weights

FAST = """
[fit]
K = 3
outer_iterations = 2
kmeans_restarts = 2

[ode]
hidden = [8]
epochs = 40
"""


@pytest.fixture
def fast_config(tmp_path):
    p = tmp_path / "fast.toml"
    p.write_text(FAST)
    return str(p)


def run(capsys, *argv):
    code = main(list(argv))
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def report(out):
    return json.loads(out)


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_trajectories(path, w0, w1, times):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        for arm, block in (("A", w0), ("B", w1)):
            for p, subj in enumerate(block):
                for j, t in enumerate(times):
                    for k, v in enumerate(subj[j]):
                        w.writerow([arm, f"{arm}{p}", j, repr(float(t)), k, repr(float(v))])
    return path


class TestSimulate:
    def test_smoke_and_determinism(self, tmp_path, capsys, fast_config):
        outs = []
        for name in ("a", "b"):
            code, out, _ = run(capsys, "simulate", "--smoke", "--config", fast_config,
                               "--seed", "3", "--out", str(tmp_path / name))
            assert code == 0 and report(out)["failed_rows"] == 0
            outs.append((tmp_path / name / "benchmark.csv").read_bytes())
        assert outs[0] == outs[1]
        bench = rows(tmp_path / "a" / "benchmark.csv")
        assert {r["replicate"] for r in bench} == {"0", "1"}
        assert {r["method"] for r in bench} == {"mmd", "ode", "kde"}
        assert (tmp_path / "a" / "summary.csv").is_file()
        assert "seed = 3" in (tmp_path / "a" / "config_echo.toml").read_text()

    def test_invalid_sample_size(self, tmp_path, capsys):
        code, _, err = run(capsys, "simulate", "--sample-sizes", "1", "--out", str(tmp_path))
        assert code == 2 and "sample_sizes" in json.loads(err)["message"]


class TestFit:
    def test_dgp_fit_outputs(self, tmp_path, capsys, fast_config):
        code, out, _ = run(capsys, "fit", "--dgp", "60", "--config", fast_config,
                           "--out", str(tmp_path))
        assert code == 0
        rep = report(out)
        model = deserialize_model((tmp_path / "model.json").read_bytes())
        assert model.dictionary.size == 3 and model.ode is not None
        traj = rows(tmp_path / "trajectories.csv")
        assert len(traj) == 200 * 3
        assert rows(tmp_path / "objective_trace.csv")[0].keys() == {"outer_iter", "total_objective"}
        assert rep["grid_points"] == 11
        for name in ("weights.csv", "ode_loss.csv", "config_echo.toml"):
            assert (tmp_path / name).is_file()

    def test_K_too_large(self, tmp_path, capsys):
        code, _, err = run(capsys, "fit", "--dgp", "5", "--K", "10000", "--out", str(tmp_path))
        assert code == 2 and json.loads(err)["field"] == "fit.K"

    def test_needs_one_source(self, tmp_path, capsys):
        code, _, _ = run(capsys, "fit", "--out", str(tmp_path))
        assert code == 2

    def test_missing_dataset(self, tmp_path, capsys):
        code, _, _ = run(capsys, "fit", "--dataset", str(tmp_path / "none.json"),
                         "--out", str(tmp_path))
        assert code == 2

    def test_bad_config_value(self, tmp_path, capsys):
        p = tmp_path / "bad.toml"
        p.write_text("[fit]\nlearning_rate = -1\n")
        code, _, _ = run(capsys, "fit", "--dgp", "20", "--config", str(p), "--out", str(tmp_path))
        assert code == 2


class TestCgmPipeline:
    def test_ingest_fit_test(self, tmp_path, capsys, fast_config):
        csv_path = write_cgm_csv(synthetic_cohort(n_subjects=6, weeks=3, seed=2),
                                 tmp_path / "cgm.csv")
        code, out, _ = run(capsys, "ingest", "--input", str(csv_path), "--mode", "univariate",
                           "--out", str(tmp_path / "ing"))
        assert code == 0 and report(out)["audit_ok"] and report(out)["kept_subjects"] == 6
        code, out, _ = run(capsys, "fit", "--cohort", str(tmp_path / "ing" / "cohort"),
                           "--config", fast_config, "--out", str(tmp_path / "fit"))
        assert code == 0 and report(out)["subjects"] == 6
        code, out, _ = run(capsys, "test", "--trajectories",
                           str(tmp_path / "fit" / "trajectories.csv"), "--B", "200",
                           "--out", str(tmp_path / "test"))
        assert code == 0
        assert len(rows(tmp_path / "test" / "inference.csv")) == report(out)["cells"]
        assert rows(tmp_path / "test" / "quantiles.csv")[0].keys() == {
            "arm", "component", "time", "prob", "value"}

    def test_eval_density(self, tmp_path, capsys, fast_config):
        run(capsys, "fit", "--dgp", "40", "--config", fast_config, "--out", str(tmp_path))
        code, out, _ = run(capsys, "eval-density", "--model", str(tmp_path / "model.json"),
                           "--time", "0", "0.5", "--grid", "-5:25:31", "--out", str(tmp_path))
        assert code == 0
        dens = rows(tmp_path / "density.csv")
        assert len(dens) == 62 and all(float(r["density"]) >= 0 for r in dens)
        code, _, _ = run(capsys, "eval-density", "--model", str(tmp_path / "model.json"),
                         "--time", "2.0", "--grid", "0:1:3", "--out", str(tmp_path))
        assert code == 2


class TestInferenceCommand:
    def test_null_and_shift(self, tmp_path, capsys):
        times = np.linspace(0, 1, 21)
        rng = np.random.default_rng(0)
        null = write_trajectories(tmp_path / "null.csv", synthetic_arm_weights(rng, 30, m=21),
                                  synthetic_arm_weights(rng, 30, m=21), times)
        code, out, _ = run(capsys, "test", "--trajectories", str(null), "--B", "500",
                           "--out", str(tmp_path / "n1"))
        assert code == 0 and report(out)["within_null_band"]
        run(capsys, "test", "--trajectories", str(null), "--B", "500", "--out", str(tmp_path / "n2"))
        assert (tmp_path / "n1" / "inference.csv").read_bytes() == \
            (tmp_path / "n2" / "inference.csv").read_bytes()

        shifted = write_trajectories(tmp_path / "shift.csv", synthetic_arm_weights(rng, 30, m=21),
                                     synthetic_arm_weights(rng, 30, m=21, shift=0.6), times)
        code, _, _ = run(capsys, "test", "--trajectories", str(shifted), "--B", "500",
                         "--out", str(tmp_path / "s"))
        res = rows(tmp_path / "s" / "inference.csv")
        late0 = [float(r["p_value"]) for r in res if r["component"] == "0" and float(r["time"]) > 0.5]
        assert code == 0 and np.mean(np.array(late0) < 0.05) > 0.5

    def test_mismatched_arms(self, tmp_path, capsys):
        p = tmp_path / "bad.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRAJECTORY_COLUMNS)
            w.writerows([["A", "a", 0, 0.0, 0, 1.0], ["A", "a", 1, 1.0, 0, 1.0],
                         ["B", "b", 0, 0.0, 0, 0.5], ["B", "b", 0, 0.0, 1, 0.5],
                         ["B", "b", 1, 1.0, 0, 0.5], ["B", "b", 1, 1.0, 1, 0.5]])
        code, _, err = run(capsys, "test", "--trajectories", str(p), "--B", "100",
                           "--out", str(tmp_path))
        assert code == 2 and "K" in json.loads(err)["message"]

    def test_B_too_small(self, tmp_path, capsys):
        code, _, _ = run(capsys, "test", "--trajectories", "x.csv", "--B", "5",
                         "--out", str(tmp_path))
        assert code == 2
