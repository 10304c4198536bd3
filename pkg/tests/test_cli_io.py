"""CSV ingestion, model serialization, and the command-line surface."""

import json
import os

import numpy as np
import pytest
from click.testing import CliRunner

from coverlvm import io as cio
from coverlvm.cli import main
from coverlvm.errors import CsvFormatError, ModelFormatError
from coverlvm.estimator import FitOptions, fit, predict_expected
from coverlvm.families import logistic
from coverlvm.model import CovariateMatrix, ModelSpec, ResponseMatrix


class TestCoverCsv:
    def test_basic_parse(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("site,a,b\ns1,0,0.5\ns2,1,0.25\n")
        data = cio.read_cover_csv(p)
        assert data.values.tolist() == [[0.0, 0.5], [1.0, 0.25]]
        assert data.mask.all()
        assert data.species_names == ("a", "b")
        assert data.site_names == ("s1", "s2")

    def test_out_of_range_cites_coordinates(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("site,a,b\ns1,0.2,1.2\n")
        with pytest.raises(CsvFormatError) as err:
            cio.read_cover_csv(p)
        assert "row 2" in str(err.value) and "'b'" in str(err.value)

    def test_empty_cell_masked(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("site,a,b\ns1,0.2,\ns2,0.1,0.3\n")
        data = cio.read_cover_csv(p)
        assert not data.mask[0, 1]
        assert data.mask.sum() == 3
        assert data.species_names == ("a", "b")

    def test_ragged_row_rejected(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("site,a,b\ns1,0.2\n")
        with pytest.raises(CsvFormatError) as err:
            cio.read_cover_csv(p)
        assert "row 2" in str(err.value)

    def test_duplicate_site_rejected(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("site,a\ns1,0.2\ns1,0.4\n")
        with pytest.raises(CsvFormatError):
            cio.read_cover_csv(p)

    def test_ordinal_labels(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("site,a\ns1,1\ns2,3\n")
        data = cio.read_cover_csv(p, ordinal=True)
        assert data.ordinal and data.values.max() == 3.0
        p2 = tmp_path / "c2.csv"
        p2.write_text("site,a\ns1,1.5\n")
        with pytest.raises(CsvFormatError):
            cio.read_cover_csv(p2, ordinal=True)

    def test_covariates_must_be_complete(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("site,x\ns1,\n")
        with pytest.raises(CsvFormatError):
            cio.read_covariates_csv(p)

    def test_long_format(self, tmp_path):
        p = tmp_path / "long.csv"
        p.write_text("site,species,value\ns1,a,0.2\ns1,b,0.0\ns2,a,0.7\n")
        data = cio.read_long_csv(p)
        assert data.species_names == ("a", "b")
        assert data.site_names == ("s1", "s2")
        assert not data.mask[1, 1]  # (s2, b) never listed
        assert data.values[1, 0] == 0.7

    def test_long_format_duplicate_cell(self, tmp_path):
        p = tmp_path / "long.csv"
        p.write_text("site,species,value\ns1,a,0.2\ns1,a,0.3\ns1,b,0.1\n")
        with pytest.raises(CsvFormatError):
            cio.read_long_csv(p)


def small_model(seed=0, pooled=False, family="hurdle-beta"):
    rng = np.random.default_rng(seed)
    vals = rng.uniform(0, 1, size=(12, 5))
    vals[rng.uniform(size=vals.shape) < 0.3] = 0.0
    vals[rng.uniform(size=vals.shape) < 0.05] = 1.0
    data = ResponseMatrix(values=vals)
    cov = CovariateMatrix(values=rng.normal(size=(12, 1)), names=("x1",))
    spec = ModelSpec(family=family, latent_dim=1, pooled_precision=pooled)
    model = fit(data, cov, spec, FitOptions(n_restarts=1, max_iterations=80))
    return model, data, cov


class TestModelSerialization:
    def test_round_trip_predictions_identical(self, tmp_path):
        model, data, cov = small_model()
        path = tmp_path / "m.json"
        cio.write_model(model, path)
        again = cio.read_model(path)
        idx = np.arange(12)
        a = predict_expected(model, cov, idx)
        b = predict_expected(again, cov, idx)
        assert np.max(np.abs(a - b)) < 1e-12
        assert again.spec == model.spec
        assert again.species_names == model.species_names

    def test_truncated_file_rejected(self, tmp_path):
        model, *_ = small_model()
        path = tmp_path / "m.json"
        cio.write_model(model, path)
        text = path.read_text()
        path.write_text(text[: len(text) // 2])
        with pytest.raises(ModelFormatError):
            cio.read_model(path)

    def test_version_mismatch(self, tmp_path):
        model, *_ = small_model()
        path = tmp_path / "m.json"
        cio.write_model(model, path)
        doc = json.loads(path.read_text())
        doc["format_version"] = "9.0"
        path.write_text(json.dumps(doc))
        with pytest.raises(ModelFormatError) as err:
            cio.read_model(path)
        assert "migration" in str(err.value)

    def test_pooled_precision_round_trips(self, tmp_path):
        model, *_ = small_model(pooled=True)
        path = tmp_path / "m.json"
        cio.write_model(model, path)
        again = cio.read_model(path)
        assert again.spec.pooled_precision
        assert again.params.log_precisions.size == 1

    def test_ordinal_model_round_trips(self, tmp_path):
        rng = np.random.default_rng(5)
        vals = rng.integers(1, 4, size=(10, 3)).astype(float)
        vals[:3] = np.array([[1, 1, 1], [2, 2, 2], [3, 3, 3]])
        data = ResponseMatrix(values=vals, ordinal=True)
        spec = ModelSpec(family="cumulative-logit", latent_dim=1)
        model = fit(data, None, spec, FitOptions(n_restarts=1, max_iterations=60))
        path = tmp_path / "m.json"
        cio.write_model(model, path)
        again = cio.read_model(path)
        assert isinstance(again.params.cutoffs, tuple)
        for a, b in zip(model.params.cutoffs, again.params.cutoffs):
            assert np.array_equal(np.asarray(a), np.asarray(b))


def _write_panel(tmp_path, seed=1, n=20, m=8):
    rng = np.random.default_rng(seed)
    vals = rng.uniform(0, 1, size=(n, m))
    vals[rng.uniform(size=vals.shape) < 0.35] = 0.0
    vals[rng.uniform(size=vals.shape) < 0.05] = 1.0
    data = ResponseMatrix(values=vals)
    path = tmp_path / "cover.csv"
    cio.write_matrix_csv(path, data.values, data.site_names, data.species_names)
    return path, data


class TestCli:
    def test_fit_writes_reloadable_model(self, tmp_path):
        panel, _ = _write_panel(tmp_path)
        runner = CliRunner()
        out = tmp_path / "out"
        res = runner.invoke(main, ["--seed", "1", "--out-dir", str(out), "fit",
                                   "--data", str(panel), "--family", "hurdle-beta",
                                   "--latent-dim", "2", "--restarts", "1",
                                   "--max-iter", "60"])
        assert res.exit_code == 0, res.output
        model = cio.read_model(out / "model.json")
        assert model.spec.family == "hurdle-beta"
        assert (out / "ordination.csv").exists()
        assert (out / "ordination.svg").exists()
        assert (out / "fit_config.json").exists()

    def test_unknown_family_is_usage_error(self, tmp_path):
        panel, _ = _write_panel(tmp_path)
        res = CliRunner().invoke(main, ["fit", "--data", str(panel),
                                        "--family", "gamma"])
        assert res.exit_code == 2

    def test_missing_file_is_usage_error(self, tmp_path):
        res = CliRunner().invoke(main, ["fit", "--data", str(tmp_path / "nope.csv"),
                                        "--family", "bernoulli"])
        assert res.exit_code == 2

    def test_runtime_failure_is_exit_one(self, tmp_path):
        # ordinal label file fed to a beta family: validation error at runtime
        p = tmp_path / "bad.csv"
        p.write_text("site,a\ns1,0.5\ns2,2.0\n")
        res = CliRunner().invoke(main, ["--out-dir", str(tmp_path), "fit", "--data",
                                        str(p), "--family", "beta-shifted"])
        assert res.exit_code == 1
        assert "Error" in res.output

    def test_evaluate_perfect_predictions(self, tmp_path):
        panel, data = _write_panel(tmp_path)
        out = tmp_path / "ev"
        res = CliRunner().invoke(main, ["--out-dir", str(out), "evaluate",
                                        "--predictions", str(panel),
                                        "--observed", str(panel), "--groups", "2"])
        assert res.exit_code == 0, res.output
        rows = (out / "metrics_species.csv").read_text().splitlines()
        assert all(row.split(",")[2] == "0.0" for row in rows[1:])  # maep column
        assert (out / "metrics.svg").exists()
        assert (out / "metrics.json").exists()

    def test_saturated_intercept_model_reproduces_frequencies(self, tmp_path):
        rng = np.random.default_rng(9)
        vals = (rng.uniform(size=(30, 4)) < [0.2, 0.45, 0.6, 0.8]).astype(float)
        data = ResponseMatrix(values=vals)
        panel = tmp_path / "b.csv"
        cio.write_matrix_csv(panel, data.values, data.site_names, data.species_names)
        runner = CliRunner()
        out = tmp_path / "o"
        assert runner.invoke(main, ["--out-dir", str(out), "fit", "--data", str(panel),
                                    "--family", "bernoulli", "--latent-dim", "0",
                                    "--restarts", "1"]).exit_code == 0
        sites = tmp_path / "sites.txt"
        sites.write_text("\n".join(data.site_names))
        assert runner.invoke(main, ["--out-dir", str(out), "predict", "--model",
                                    str(out / "model.json"), "--sites", str(sites),
                                    "--kind", "presence"]).exit_code == 0
        probs = cio.read_cover_csv(out / "presence.csv")
        assert np.max(np.abs(probs.values - vals.mean(0)[None, :])) < 1e-6

    def test_holdout_filter(self, tmp_path):
        panel, data = _write_panel(tmp_path, n=10, m=4)
        cov = tmp_path / "cov.csv"
        rows = ["site,year"]
        for i, s in enumerate(data.site_names):
            rows.append(f"{s},{2000 + i}")
        cov.write_text("\n".join(rows) + "\n")
        out = tmp_path / "ev2"
        res = CliRunner().invoke(main, ["--out-dir", str(out), "evaluate",
                                        "--predictions", str(panel),
                                        "--observed", str(panel),
                                        "--covariates", str(cov),
                                        "--holdout-after", "2006", "--groups", "2"])
        assert res.exit_code == 0, res.output
        doc = json.loads((out / "metrics.json").read_text())
        assert all(row["n_test"] == 3 for row in doc["species"])  # years 2007-2009

    def test_nmds_and_procrustes_commands(self, tmp_path):
        panel, data = _write_panel(tmp_path, n=12, m=6)
        out = tmp_path / "nm"
        runner = CliRunner()
        assert runner.invoke(main, ["--seed", "2", "--out-dir", str(out), "nmds",
                                    "--data", str(panel), "--metric", "jaccard",
                                    "--restarts", "2", "--max-iter", "100"]).exit_code == 0
        res = runner.invoke(main, ["--out-dir", str(out), "procrustes", "--target",
                                   str(out / "nmds.csv"), "--candidate",
                                   str(out / "nmds.csv")])
        assert res.exit_code == 0
        assert float(res.output.strip()) == pytest.approx(0.0, abs=1e-12)

    def test_simulate_then_sweep_row_count(self, tmp_path):
        out = tmp_path / "sw"
        res = CliRunner().invoke(main, [
            "--seed", "4", "--out-dir", str(out), "sweep", "--generator",
            "ordered-beta", "--p", "0.3,0.6", "--reps", "2", "--n", "15", "--m", "6",
            "--methods", "bernoulli,nmds-bray,nmds-jaccard", "--max-iter", "40",
            "--restarts", "1"])
        assert res.exit_code == 0, res.output
        summary = (out / "sweep_summary.csv").read_text().splitlines()
        assert len(summary) == 1 + 3 * 2  # header + methods x p values
        raw = (out / "sweep_raw.csv").read_text().splitlines()
        assert len(raw) == 1 + 3 * 2 * 2
        assert (out / "sweep.svg").exists()

    def test_sweep_summary_deterministic_across_threads(self, tmp_path):
        args = ["--seed", "5", "sweep", "--generator", "hurdle-beta", "--p", "0.4",
                "--reps", "2", "--n", "12", "--m", "5",
                "--methods", "bernoulli,nmds-bray", "--max-iter", "40",
                "--restarts", "1"]
        runner = CliRunner()
        out1, out4 = tmp_path / "t1", tmp_path / "t4"
        a = runner.invoke(main, [args[0], args[1], "--threads", "1",
                                 "--out-dir", str(out1), *args[2:]])
        b = runner.invoke(main, [args[0], args[1], "--threads", "4",
                                 "--out-dir", str(out4), *args[2:]])
        assert a.exit_code == 0 and b.exit_code == 0, (a.output, b.output)
        assert (out1 / "sweep_summary.csv").read_bytes() == \
            (out4 / "sweep_summary.csv").read_bytes()

    def test_simulate_command(self, tmp_path):
        out = tmp_path / "sim"
        res = CliRunner().invoke(main, ["--seed", "6", "--out-dir", str(out),
                                        "simulate", "--n", "10", "--m", "5"])
        assert res.exit_code == 0, res.output
        data = cio.read_cover_csv(out / "cover.csv")
        assert data.values.shape == (10, 5)
        scores, names = cio.read_scores_csv(out / "true_scores.csv")
        assert scores.shape == (10, 2)
