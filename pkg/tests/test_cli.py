import json

import numpy as np
import pytest

from ptmlearn import cli, dataio

BASE_CONFIG = {
    "grid": {"rows": 8, "cols": 8},
    "model": "translate2",
    "lambda_domain": {"lows": [-1.5, -1.5], "highs": [1.5, 1.5]},
    "gamma_domain": {"lows": [0.0, -2.0, -2.0, 0.8, 0.8], "highs": [3.14, 2.0, 2.0, 2.0, 2.0]},
    "atoms_per_class": [1],
    "images_per_class": 3,
    "seed": 5,
    "max_atoms": 2,
    "error_tol": 0.0,
    "coarse_points": 3,
    "projection_points": 3,
    "solver": {"max_iters": 6, "vertex_budget": 3},
}


def run_cli(capsys, *argv):
    rc = cli.main(list(argv))
    out = capsys.readouterr()
    payload = json.loads(out.out) if out.out.strip() else None
    return rc, payload, out.err


def write_config(path, **overrides):
    cfg = dict(BASE_CONFIG)
    cfg.update(overrides)
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def single_dataset(workdir):
    cfgfile = write_config(workdir / "synth.json")
    rc = cli.main(["synth", "--config", cfgfile, "--out-dir", str(workdir / "data")])
    assert rc == 0
    return workdir / "data" / "dataset.json"


@pytest.fixture(scope="module")
def multi_dataset(workdir):
    cfgfile = write_config(workdir / "synth2.json", atoms_per_class=[1, 1], seed=9)
    rc = cli.main(["synth", "--config", cfgfile, "--out-dir", str(workdir / "data2")])
    assert rc == 0
    return workdir / "data2" / "dataset.json"


@pytest.fixture(scope="module")
def learned(workdir, single_dataset):
    cfgfile = write_config(workdir / "learn.json")
    rc = cli.main(["learn", str(single_dataset), "--config", cfgfile,
                   "--out-dir", str(workdir / "fit")])
    assert rc == 0
    return workdir / "fit"


@pytest.fixture(scope="module")
def learned_multi(workdir, multi_dataset):
    cfgfile = write_config(workdir / "learnm.json", alpha_start=0.2, alpha_end=1.0)
    rc = cli.main(["learn-multi", str(multi_dataset), "--config", cfgfile,
                   "--out-dir", str(workdir / "fitm")])
    assert rc == 0
    return workdir / "fitm"


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        rc, _, _ = run_cli(capsys, "frobnicate")
        assert rc == 1

    def test_missing_argument(self, capsys):
        rc, _, _ = run_cli(capsys, "learn")
        assert rc == 1

    def test_missing_file(self, capsys):
        rc, _, _ = run_cli(capsys, "learn", "/nonexistent/dataset.json")
        assert rc == 2

    def test_malformed_image(self, tmp_path, capsys, workdir, learned):
        bad = tmp_path / "bad.pgm"
        bad.write_bytes(b"not a pgm at all")
        rc, _, _ = run_cli(capsys, "project", str(learned / "model.json"), str(bad))
        assert rc == 2


class TestSynth:
    def test_output_and_determinism(self, capsys, workdir):
        cfgfile = write_config(workdir / "det.json")
        rc1, out1, _ = run_cli(capsys, "synth", "--config", cfgfile, "--out-dir", str(workdir / "d1"))
        rc2, out2, _ = run_cli(capsys, "synth", "--config", cfgfile, "--out-dir", str(workdir / "d2"))
        assert rc1 == rc2 == 0
        assert out1["images"] == 3
        assert out1["classes"] == 1
        assert out1["snr_db"] is None
        b1 = (workdir / "d1" / "dataset.json").read_bytes()
        b2 = (workdir / "d2" / "dataset.json").read_bytes()
        assert b1 == b2

    def test_seed_flag_changes_data(self, capsys, workdir):
        cfgfile = write_config(workdir / "seedflag.json")
        run_cli(capsys, "synth", "--config", cfgfile, "--out-dir", str(workdir / "s1"))
        rc, _, _ = run_cli(capsys, "synth", "--config", cfgfile, "--seed", "99",
                           "--out-dir", str(workdir / "s2"))
        assert rc == 0
        assert (workdir / "s1" / "dataset.json").read_bytes() != (workdir / "s2" / "dataset.json").read_bytes()

    def test_noise_reports_snr(self, capsys, workdir):
        cfgfile = write_config(workdir / "noisy.json", noise_variance=1e-4)
        rc, out, _ = run_cli(capsys, "synth", "--config", cfgfile, "--out-dir", str(workdir / "dn"))
        assert rc == 0
        assert out["snr_db"] > 0.0


class TestLearn:
    def test_outputs(self, learned, capsys, single_dataset, workdir):
        cfgfile = write_config(workdir / "learn_again.json")
        rc, out, err = run_cli(capsys, "learn", str(single_dataset), "--config", cfgfile,
                               "--out-dir", str(workdir / "fit_again"))
        assert rc == 0
        assert out["atoms"] <= 2
        assert 0.0 <= out["normalized_error"] <= 1.0
        assert out["stop_reason"]
        assert "resolved config" in err
        model = dataio.load_model(workdir / "fit_again" / "model.json")
        assert model.class_count == 1
        csv = (workdir / "fit_again" / "error.csv").read_text()
        assert csv.startswith("atoms,normalized_error\n0,1.0\n")

    def test_max_atoms_flag_overrides_config(self, capsys, single_dataset, workdir):
        cfgfile = write_config(workdir / "cap.json")
        rc, out, _ = run_cli(capsys, "learn", str(single_dataset), "--config", cfgfile,
                             "--max-atoms", "1", "--out-dir", str(workdir / "fit1"))
        assert rc == 0
        assert out["atoms"] <= 1

    def test_rerun_is_byte_identical(self, capsys, single_dataset, workdir):
        cfgfile = write_config(workdir / "rr.json")
        run_cli(capsys, "learn", str(single_dataset), "--config", cfgfile, "--out-dir", str(workdir / "r1"))
        run_cli(capsys, "learn", str(single_dataset), "--config", cfgfile, "--out-dir", str(workdir / "r2"))
        assert (workdir / "r1" / "model.json").read_bytes() == (workdir / "r2" / "model.json").read_bytes()
        assert (workdir / "r1" / "error.csv").read_bytes() == (workdir / "r2" / "error.csv").read_bytes()

    def test_rejects_multiclass_dataset(self, capsys, multi_dataset, workdir):
        cfgfile = write_config(workdir / "wrong.json")
        rc, _, _ = run_cli(capsys, "learn", str(multi_dataset), "--config", cfgfile,
                           "--out-dir", str(workdir / "never"))
        assert rc == 2


class TestLearnMulti:
    def test_outputs(self, learned_multi):
        model = dataio.load_model(learned_multi / "model.json")
        assert model.class_count == 2
        err = (learned_multi / "error.csv").read_text()
        assert err.startswith("atoms,normalized_error\n0,1.0\n")
        mis = (learned_multi / "misclassification.csv").read_text()
        assert mis.startswith("atoms,misclassification_pct\n")

    def test_requires_labels(self, capsys, single_dataset, workdir):
        cfgfile = write_config(workdir / "nolab.json")
        rc, _, _ = run_cli(capsys, "learn-multi", str(single_dataset), "--config", cfgfile,
                           "--out-dir", str(workdir / "never2"))
        assert rc == 2


class TestProject:
    def test_manifest_entry(self, capsys, learned, single_dataset):
        rc, out, _ = run_cli(capsys, "project", str(learned / "model.json"),
                             str(single_dataset), "--index", "1")
        assert rc == 0
        assert out["class"] == 0
        assert set(out["params"]) == {"tx", "ty"}
        assert len(out["distances"]) == 1
        assert out["distance"] == out["distances"][0]

    def test_index_out_of_range(self, capsys, learned, single_dataset):
        rc, _, _ = run_cli(capsys, "project", str(learned / "model.json"),
                           str(single_dataset), "--index", "12")
        assert rc == 2

    def test_grid_mismatch(self, capsys, learned, workdir):
        cfgfile = write_config(workdir / "big.json", grid={"rows": 16, "cols": 16})
        run_cli(capsys, "synth", "--config", cfgfile, "--out-dir", str(workdir / "big"))
        rc, _, _ = run_cli(capsys, "project", str(learned / "model.json"),
                           str(workdir / "big" / "dataset.json"))
        assert rc == 2


class TestClassify:
    def test_labels_and_accuracy(self, capsys, learned_multi, multi_dataset):
        rc, out, _ = run_cli(capsys, "classify", str(learned_multi / "model.json"), str(multi_dataset))
        assert rc == 0
        assert len(out["labels"]) == 6
        assert out["outliers"] == 0
        assert out["misclassification_pct"] is not None

    def test_zero_threshold_rejects_everything(self, capsys, learned_multi, multi_dataset):
        rc, out, _ = run_cli(capsys, "classify", str(learned_multi / "model.json"),
                             str(multi_dataset), "--threshold", "0.0")
        assert rc == 0
        assert out["outliers"] == 6
        assert set(out["labels"]) == {"outlier"}

    def test_huge_threshold_rejects_nothing(self, capsys, learned_multi, multi_dataset):
        rc, out, _ = run_cli(capsys, "classify", str(learned_multi / "model.json"),
                             str(multi_dataset), "--threshold", "1e9")
        assert rc == 0
        assert out["outliers"] == 0
