import json
import subprocess
import sys

import numpy as np
import pytest

from groupstat.cli import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, main, read_config, ValidationError
from groupstat.model import PosteriorSample
from groupstat.numerics import KernelSpec
from groupstat.predict import TrainedModel, load_model, save_model

SHORT = ["--burn-in", "30", "--n-samples", "20"]


@pytest.fixture
def data_a(tmp_path):
    d = tmp_path / "a"
    assert main(["gen", "a", "--seed", "1", "--out", str(d)]) == EXIT_OK
    return d


@pytest.fixture
def trained(tmp_path, data_a):
    out = tmp_path / "run"
    rc = main(["train", "--instances", str(data_a / "instances.csv"), "--groups", str(data_a / "groups.csv"),
               "--out", str(out), "--seed", "4"] + SHORT)
    assert rc == EXIT_OK
    return out


class TestGen:
    def test_dataset_a(self, data_a, capsys):
        lines = (data_a / "instances.csv").read_text().splitlines()
        assert lines[0] == "id,group,f1,f2"
        assert len(lines) == 56
        assert (data_a / "groups.csv").read_text().splitlines() == ["group,m", "A,0.73999999999999999",
                                                                    "B,0.25", "C,0.84999999999999998"]
        assert len((data_a / "labels.csv").read_text().splitlines()) == 56

    def test_summary_printed(self, tmp_path, capsys):
        main(["gen", "a", "--seed", "1", "--out", str(tmp_path)])
        out = capsys.readouterr().out
        assert "19" in out and "16" in out and "20" in out and "55 instances in 3 groups" in out

    def test_dataset_b(self, tmp_path, capsys):
        assert main(["gen", "b", "--seed", "7", "--out", str(tmp_path)]) == EXIT_OK
        assert len((tmp_path / "instances.csv").read_text().splitlines()) == 601
        assert len((tmp_path / "groups.csv").read_text().splitlines()) == 76
        assert "600 instances in 75 groups: 62 with m = 0, 13 mixed" in capsys.readouterr().out

    def test_same_seed_same_files(self, tmp_path):
        for d in ("x", "y"):
            main(["gen", "a", "--seed", "3", "--out", str(tmp_path / d)])
        for name in ("instances.csv", "groups.csv", "labels.csv"):
            assert (tmp_path / "x" / name).read_bytes() == (tmp_path / "y" / name).read_bytes()


class TestTrain:
    def test_outputs(self, trained):
        model = load_model(trained / "model.jsonl")
        assert len(model.samples) == 20
        header = json.loads((trained / "model.jsonl").read_text().splitlines()[0])
        assert header["hyper"]["chi"] == 1000.0 and header["chain_config"]["seed"] == 4
        report = json.loads((trained / "report.json").read_text())
        assert len(report["chains"][0]["active_kernel_trace"]) == 20

    def test_default_run_has_full_trace(self, tmp_path, data_a):
        out = tmp_path / "full"
        assert main(["train", "--instances", str(data_a / "instances.csv"),
                     "--groups", str(data_a / "groups.csv"), "--out", str(out)]) == EXIT_OK
        report = json.loads((out / "report.json").read_text())
        assert len(report["chains"][0]["active_kernel_trace"]) == 1000

    def test_rerun_is_byte_identical(self, tmp_path, data_a, trained):
        again = tmp_path / "again"
        main(["train", "--instances", str(data_a / "instances.csv"), "--groups", str(data_a / "groups.csv"),
              "--out", str(again), "--seed", "4"] + SHORT)
        assert (again / "model.jsonl").read_bytes() == (trained / "model.jsonl").read_bytes()

    def test_missing_groups_file(self, tmp_path, data_a, capsys):
        out = tmp_path / "nothing"
        rc = main(["train", "--instances", str(data_a / "instances.csv"), "--groups", str(tmp_path / "no.csv"),
                   "--out", str(out)])
        assert rc == EXIT_VALIDATION
        assert "groups file not found" in capsys.readouterr().err
        assert not out.exists()

    def test_label_column_refused(self, tmp_path, data_a):
        from groupstat.data import load_dataset, load_labels, save_dataset
        from dataclasses import replace

        ds = load_dataset(data_a / "instances.csv", data_a / "groups.csv")
        ds = replace(ds, labels=load_labels(data_a / "labels.csv", ds.ids))
        save_dataset(ds, tmp_path / "li.csv", tmp_path / "lg.csv")
        rc = main(["train", "--instances", str(tmp_path / "li.csv"), "--groups", str(tmp_path / "lg.csv"),
                   "--out", str(tmp_path / "o")] + SHORT)
        assert rc == EXIT_VALIDATION

    def test_config_file_and_override(self, tmp_path, data_a):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"# short run\ninstances = {data_a / 'instances.csv'}\ngroups = {data_a / 'groups.csv'}\n"
                       "burn_in = 10\nn_samples = 7\nchi = 50  # lower confidence\nseed = 2\n")
        out = tmp_path / "o"
        assert main(["train", "--config", str(cfg), "--out", str(out), "--n-samples", "5"]) == EXIT_OK
        header = json.loads((out / "model.jsonl").read_text().splitlines()[0])
        assert header["n_samples"] == 5 and header["hyper"]["chi"] == 50.0
        assert header["chain_config"]["burn_in"] == 10

    @pytest.mark.parametrize("text", ["bogus = 1\n", "chi = abc\n", "no equals sign\n"])
    def test_bad_config(self, tmp_path, text):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(text)
        with pytest.raises(ValidationError):
            read_config(cfg)

    @pytest.mark.parametrize("flags", [["--a", "0.5"], ["--thin", "0"], ["--chi", "-1"], ["--n-samples", "0"]])
    def test_invalid_settings(self, tmp_path, data_a, flags):
        rc = main(["train", "--instances", str(data_a / "instances.csv"), "--groups", str(data_a / "groups.csv"),
                   "--out", str(tmp_path / "o")] + flags)
        assert rc == EXIT_VALIDATION
        assert not (tmp_path / "o").exists()

    def test_chains_are_tagged(self, tmp_path, data_a):
        out = tmp_path / "multi"
        main(["train", "--instances", str(data_a / "instances.csv"), "--groups", str(data_a / "groups.csv"),
              "--out", str(out), "--chains", "2"] + SHORT)
        model = load_model(out / "model.jsonl")
        assert model.chains == (0,) * 20 + (1,) * 20

    def test_chain_failure_exit_code(self, tmp_path, data_a, monkeypatch):
        import groupstat.cli as cli_mod
        from groupstat.sampler import ChainError

        def fail(*a, **k):
            raise ChainError("iteration 3: non-finite state")

        monkeypatch.setattr(cli_mod, "train_model", fail)
        rc = main(["train", "--instances", str(data_a / "instances.csv"), "--groups", str(data_a / "groups.csv"),
                   "--out", str(tmp_path / "o")] + SHORT)
        assert rc == EXIT_RUNTIME


def _empty_model(path, dim=2):
    X = np.arange(3 * dim, dtype=float).reshape(3, dim)
    s = PosteriorSample(np.zeros(3, bool), np.zeros(0))
    save_model(TrainedModel((s, s), X, KernelSpec()), path)


class TestPredict:
    def test_scores(self, tmp_path, data_a, trained):
        out = tmp_path / "scores.csv"
        assert main(["predict", "--model", str(trained / "model.jsonl"),
                     "--instances", str(data_a / "instances.csv"), "--out", str(out)]) == EXIT_OK
        lines = out.read_text().splitlines()
        assert lines[0] == "id,prob" and len(lines) == 56
        probs = np.array([float(l.split(",")[1]) for l in lines[1:]])
        assert np.all((probs >= 0) & (probs <= 1))

    def test_empty_model_gives_half(self, tmp_path, data_a):
        _empty_model(tmp_path / "m.jsonl")
        out = tmp_path / "s.csv"
        main(["predict", "--model", str(tmp_path / "m.jsonl"), "--instances", str(data_a / "instances.csv"),
              "--out", str(out)])
        assert {l.split(",")[1] for l in out.read_text().splitlines()[1:]} == {"0.5"}

    def test_grid_single_cell_and_pgm(self, tmp_path):
        _empty_model(tmp_path / "m.jsonl")
        out, pgm = tmp_path / "g.csv", tmp_path / "g.pgm"
        assert main(["predict", "--model", str(tmp_path / "m.jsonl"), "--grid", "-1", "1", "1",
                     "--out", str(out), "--pgm", str(pgm)]) == EXIT_OK
        assert out.read_text() == "0.5\n"
        assert pgm.read_bytes() == b"P5\n1 1\n255\n" + bytes([128])

    def test_grid_shape_and_orientation(self, tmp_path, trained):
        out, pgm = tmp_path / "g.csv", tmp_path / "g.pgm"
        main(["predict", "--model", str(trained / "model.jsonl"), "--grid", "-3", "3", "6",
              "--out", str(out), "--pgm", str(pgm)])
        grid = np.array([[float(v) for v in l.split(",")] for l in out.read_text().splitlines()])
        assert grid.shape == (6, 6)
        raw = pgm.read_bytes()
        assert raw.startswith(b"P5\n6 6\n255\n")
        pix = np.frombuffer(raw[len(b"P5\n6 6\n255\n"):], dtype=np.uint8).reshape(6, 6)
        np.testing.assert_array_equal(pix, np.floor(255 * grid + 0.5).astype(np.uint8)[::-1])

    def test_grid_needs_2d(self, tmp_path):
        _empty_model(tmp_path / "m.jsonl", dim=3)
        rc = main(["predict", "--model", str(tmp_path / "m.jsonl"), "--grid", "0", "1", "4",
                   "--out", str(tmp_path / "g.csv")])
        assert rc == EXIT_VALIDATION and not (tmp_path / "g.csv").exists()

    def test_dimension_mismatch(self, tmp_path, data_a):
        _empty_model(tmp_path / "m.jsonl", dim=3)
        rc = main(["predict", "--model", str(tmp_path / "m.jsonl"), "--instances", str(data_a / "instances.csv"),
                   "--out", str(tmp_path / "s.csv")])
        assert rc == EXIT_VALIDATION

    def test_prediction_repeatable(self, tmp_path, data_a, trained):
        outs = []
        for name in ("p1.csv", "p2.csv"):
            main(["predict", "--model", str(trained / "model.jsonl"),
                  "--instances", str(data_a / "instances.csv"), "--out", str(tmp_path / name)])
            outs.append((tmp_path / name).read_bytes())
        assert outs[0] == outs[1]


class TestEval:
    def test_report(self, tmp_path, data_a, trained):
        out = tmp_path / "eval.json"
        assert main(["eval", "--model", str(trained / "model.jsonl"), "--instances", str(data_a / "instances.csv"),
                     "--labels", str(data_a / "labels.csv"), "--out", str(out)]) == EXIT_OK
        rep = json.loads(out.read_text())
        assert sorted(rep) == ["auc", "k_quantiles", "mean_active_kernels", "n_neg", "n_pos", "per_seed_auc"]
        assert rep["n_pos"] == 35 and rep["n_neg"] == 20

    def test_perfect_scores_fixture(self, tmp_path):
        # one kernel on the positive point drives its probability above the negative one
        X = np.array([[0.0, 0.0], [5.0, 5.0]])
        save_model(TrainedModel((PosteriorSample(np.array([1, 0], bool), np.array([2.0])),), X, KernelSpec()),
                   tmp_path / "m.jsonl")
        (tmp_path / "q.csv").write_text("id,f1,f2,label\np,0,0,1\nn,5,5,0\n")
        out = tmp_path / "e.json"
        main(["eval", "--model", str(tmp_path / "m.jsonl"), "--instances", str(tmp_path / "q.csv"),
              "--out", str(out)])
        assert json.loads(out.read_text())["auc"] == 1.0

    def test_single_class_rejected(self, tmp_path):
        _empty_model(tmp_path / "m.jsonl")
        (tmp_path / "q.csv").write_text("id,f1,f2,label\np,0,0,1\nn,5,5,1\n")
        rc = main(["eval", "--model", str(tmp_path / "m.jsonl"), "--instances", str(tmp_path / "q.csv")])
        assert rc == EXIT_VALIDATION

    def test_keys_stable_across_runs(self, tmp_path, data_a, trained):
        texts = []
        for name in ("e1.json", "e2.json"):
            main(["eval", "--model", str(trained / "model.jsonl"), "--instances", str(data_a / "instances.csv"),
                  "--labels", str(data_a / "labels.csv"), "--out", str(tmp_path / name)])
            texts.append((tmp_path / name).read_text())
        assert texts[0] == texts[1]

    def test_ablation(self, tmp_path, data_a):
        out = tmp_path / "abl.json"
        rc = main(["eval", "--ablation", "--instances", str(data_a / "instances.csv"),
                   "--groups", str(data_a / "groups.csv"), "--labels", str(data_a / "labels.csv"),
                   "--out", str(out)] + SHORT)
        assert rc == EXIT_OK
        rep = json.loads(out.read_text())
        assert set(rep) == {"full", "ablated"}

    def test_missing_labels(self, tmp_path, data_a, trained):
        rc = main(["eval", "--model", str(trained / "model.jsonl"), "--instances", str(data_a / "instances.csv")])
        assert rc == EXIT_VALIDATION


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "groupstat", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "groupstat" in res.stdout
