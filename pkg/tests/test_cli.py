"""End-to-end CLI behaviour: file formats, round trips, exit codes."""

import json

import numpy as np
import pytest

from hiermix import io as hio
from hiermix.cli import main, pca_project
from hiermix.errors import DataError
from hiermix.metrics import evaluate
from hiermix.model import Tree


def run(args):
    return main([str(a) for a in args])


class TestGenerate:
    def test_outputs(self, tmp_path):
        out = tmp_path / "gen"
        assert run(["generate", "--n", 20, "--dim", 2, "--out", out, "--seed", 3,
                    "--depth", 2, "--trunc", 4]) == 0
        x = hio.load_data_csv(out / "data.csv")
        assert x.shape == (20, 2)
        labels = hio.load_labels_csv(out / "labels.csv", n=20)
        assert len(labels) == 20
        tree, paths = hio.load_tree_json(out / "tree.json")
        assert len(paths) == 20

    def test_zero_rows_is_usage_error(self, tmp_path):
        assert run(["generate", "--n", 0, "--out", tmp_path / "g"]) == 1

    def test_seed_reproducible(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run(["generate", "--n", 15, "--dim", 2, "--out", out, "--seed", 11]) == 0
        for name in ("data.csv", "labels.csv", "tree.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()


class TestPca:
    def test_full_rank_reconstruction(self, tmp_path):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((30, 4))
        proj = pca_project(x, 4)
        # full basis preserves pairwise distances of the centred data
        centred = x - x.mean(axis=0)
        d_orig = np.linalg.norm(centred[:, None] - centred[None, :], axis=2)
        d_proj = np.linalg.norm(proj[:, None] - proj[None, :], axis=2)
        np.testing.assert_allclose(d_orig, d_proj, atol=1e-9)

    def test_rank_one_explains_everything(self):
        rng = np.random.default_rng(1)
        direction = np.array([1.0, 2.0, -1.0])
        x = np.outer(rng.standard_normal(25), direction)
        proj = pca_project(x, 1)
        centred = x - x.mean(axis=0)
        assert np.var(proj[:, 0], ddof=1) == pytest.approx(
            np.trace(np.cov(centred.T)), rel=1e-9
        )

    def test_matches_power_iteration(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((60, 5)) @ np.diag([3.0, 2.0, 1.0, 0.5, 0.1])
        centred = x - x.mean(axis=0)
        cov = centred.T @ centred / (len(x) - 1)
        v = rng.standard_normal(5)
        for _ in range(3000):
            v = cov @ v
            v /= np.linalg.norm(v)
        lead = pca_project(x, 1)[:, 0]
        ref = centred @ v
        # sign convention may differ from the power iterate
        err = min(np.abs(lead - ref).max(), np.abs(lead + ref).max())
        assert err < 1e-6

    def test_dims_validation(self, tmp_path):
        data = tmp_path / "d.csv"
        hio.save_data_csv(data, np.ones((4, 2)))
        assert run(["pca", "--data", data, "--dims", 3, "--out", tmp_path / "o.csv"]) == 1

    def test_cli_roundtrip(self, tmp_path):
        data = tmp_path / "d.csv"
        rng = np.random.default_rng(3)
        hio.save_data_csv(data, rng.standard_normal((10, 3)))
        out = tmp_path / "p.csv"
        assert run(["pca", "--data", data, "--dims", 2, "--out", out]) == 0
        assert hio.load_data_csv(out).shape == (10, 2)


class TestCsvIngestion:
    def test_ragged_rows_reported_with_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1.0,2.0\n3.0\n", encoding="utf-8")
        with pytest.raises(DataError, match="row 2"):
            hio.load_data_csv(path)

    def test_non_finite_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1.0,nan\n", encoding="utf-8")
        with pytest.raises(DataError, match="row 1"):
            hio.load_data_csv(path)

    def test_data_error_exit_code(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1.0,2.0\n3.0\n", encoding="utf-8")
        assert run(["fit", "--data", path, "--out", tmp_path / "f"]) == 2


class TestTreeJson:
    def test_round_trip_bytes(self, tmp_path):
        out = tmp_path / "gen"
        run(["generate", "--n", 12, "--dim", 2, "--out", out, "--seed", 5])
        tree, paths = hio.load_tree_json(out / "tree.json")
        again = tmp_path / "again.json"
        hio.save_tree_json(again, tree, paths)
        assert (out / "tree.json").read_bytes() == again.read_bytes()

    def test_newick_shape(self):
        tree = Tree(np.array([1.0]), np.zeros(1))
        a = tree.add_child(Tree.ROOT, np.array([1.0]), np.zeros(1))
        b = tree.add_child(Tree.ROOT, np.array([1.0]), np.zeros(1))
        paths = [(0, a), (0, a), (0, b)]
        assert hio.tree_to_newick(tree, paths) == "(2,1)n0;"


class TestFitEval:
    def _fit(self, tmp_path, mode="mcmc", chains=1, jobs=1, seed=4):
        gen = tmp_path / "gen"
        run(["generate", "--n", 16, "--dim", 2, "--out", gen, "--seed", 1,
             "--depth", 2, "--trunc", 4, "--prior-scale", 16.0])
        out = tmp_path / f"fit_{mode}_{chains}_{jobs}_{seed}"
        code = run([
            "fit", "--data", gen / "data.csv", "--out", out,
            "--mode", mode, "--chains", chains, "--jobs", jobs,
            "--burnin", 15, "--draws", 25, "--seed", seed,
            "--depth", 2, "--trunc", 4, "--max-cycles", 10,
        ])
        assert code == 0
        return gen, out

    def test_mcmc_outputs(self, tmp_path):
        gen, out = self._fit(tmp_path)
        trace = (out / "chain0" / "trace.csv").read_text().strip().splitlines()
        assert trace[0] == "iteration,cdl,rcdl,accept_rate"
        assert len(trace) - 1 == 15 + 25
        summary = json.loads((out / "summary.json").read_text())
        assert summary["mode"] == "mcmc"
        assert len(summary["chains"]) == 1
        assert (out / "chain0" / "tree.nwk").read_text().endswith(";\n")

    def test_fixed_seed_byte_identical(self, tmp_path):
        gen, out1 = self._fit(tmp_path, seed=9)
        _, out2 = self._fit(tmp_path / "second", seed=9)
        for rel in ("chain0/trace.csv", "chain0/tree.json", "summary.json"):
            assert (out1 / rel).read_bytes() == (tmp_path / "second" / out2.name / rel).read_bytes()

    def test_two_chains_distinct_seeds(self, tmp_path):
        gen, out = self._fit(tmp_path, chains=2)
        t0 = (out / "chain0" / "trace.csv").read_bytes()
        t1 = (out / "chain1" / "trace.csv").read_bytes()
        assert t0 != t1

    def test_parallel_jobs_match_serial(self, tmp_path):
        gen, serial = self._fit(tmp_path, chains=2, jobs=1)
        _, parallel = self._fit(tmp_path / "par", chains=2, jobs=2)
        for chain in ("chain0", "chain1"):
            assert (serial / chain / "trace.csv").read_bytes() == (
                tmp_path / "par" / parallel.name / chain / "trace.csv"
            ).read_bytes()

    def test_vi_mode(self, tmp_path):
        gen, out = self._fit(tmp_path, mode="vi")
        trace = (out / "chain0" / "trace.csv").read_text().strip().splitlines()
        assert trace[0] == "cycle,relbo,delta"
        summary = json.loads((out / "summary.json").read_text())
        assert "relbo" in summary["chains"][0]

    def test_eval_ground_truth(self, tmp_path):
        gen, out = self._fit(tmp_path)
        report_path = tmp_path / "report.json"
        code = run([
            "eval", "--tree", gen / "tree.json", "--data", gen / "data.csv",
            "--labels", gen / "labels.csv", "--out", report_path,
        ])
        assert code == 0
        report = json.loads(report_path.read_text())
        # classes are leaf ids, so the leaf level clusters match classes exactly
        deepest = max(int(k) for k in report["f_by_level"])
        assert report["f_by_level"][str(deepest)] == pytest.approx(1.0)

    def test_eval_matches_library_call(self, tmp_path):
        gen, out = self._fit(tmp_path)
        report_path = tmp_path / "report.json"
        run(["eval", "--tree", out / "chain0" / "tree.json",
             "--data", gen / "data.csv", "--out", report_path])
        report = json.loads(report_path.read_text())
        tree, paths = hio.load_tree_json(out / "chain0" / "tree.json")
        x = hio.load_data_csv(gen / "data.csv")
        direct = evaluate(tree, paths, x)
        assert report["aid"] == direct.aid
        assert report["aod"] == direct.aod

    def test_eval_singular_path_ok(self, tmp_path):
        tree = Tree(np.array([1.0]), np.zeros(1))
        a = tree.add_child(Tree.ROOT, np.array([1.0]), np.zeros(1))
        tree.attach_path((0, a))
        tree.attach_path((0, a))
        tree_path = tmp_path / "tree.json"
        hio.save_tree_json(tree_path, tree, [(0, a), (0, a)])
        data = tmp_path / "d.csv"
        hio.save_data_csv(data, np.array([[0.0], [1.0]]))
        report_path = tmp_path / "r.json"
        assert run(["eval", "--tree", tree_path, "--data", data, "--out", report_path]) == 0
        assert json.loads(report_path.read_text())["aod"] is None

    def test_eval_index_mismatch(self, tmp_path):
        gen, out = self._fit(tmp_path)
        data = tmp_path / "short.csv"
        hio.save_data_csv(data, np.zeros((3, 2)))
        assert run(["eval", "--tree", gen / "tree.json", "--data", data,
                    "--out", tmp_path / "r.json"]) == 2


class TestConfigFile:
    def test_file_plus_flag_override(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text('alpha = 0.7\nmode = "vi"\n# comment\ntrunc = 5\n', encoding="utf-8")
        from hiermix.cli import build_config

        class Args:
            config = str(cfg)
            alpha = None
            trunc = "6"

        args = Args()
        for key in ("gamma", "gamma0", "depth", "margin_cost", "margin_eps",
                    "eta_prior_scale", "kernel_scale", "prior_scale", "vi_weight",
                    "chains", "burnin", "draws", "seed", "mode", "jobs", "pca_dims",
                    "tolerance", "max_cycles", "branching", "zeta_clamp", "omega_floor"):
            setattr(args, key, None)
        rc = build_config(args)
        assert rc.alpha == 0.7
        assert rc.mode == "vi"
        assert rc.trunc == 6  # flag beats file

    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("bogus = 1\n", encoding="utf-8")
        from hiermix.cli import parse_config_file
        from hiermix.errors import ParameterError

        with pytest.raises(ParameterError):
            parse_config_file(cfg)


class TestAnimalsAsset:
    def test_bundled_table(self):
        path = hio.animals_labels_path()
        labels = hio.load_labels_csv(path)
        assert len(labels) == 33
        assert set(labels) == {
            "birds", "land mammals", "predators", "insects",
            "amphibians", "water animals", "mouse", "fish",
        }
