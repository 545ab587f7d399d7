import csv
import dataclasses

import numpy as np
import pytest
import torch

from metavo.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from metavo.config import ConfigError, RunConfig, dump_config, load_config, parse_config
from metavo.evaluation import accumulate, read_kitti_poses, write_kitti_poses, write_tum_trajectory
from metavo.geometry import PoseSE3
from metavo.networks import ArchitectureConfig

TINY = """\
[data]
root = {root}
sequences = 00, 01
[model]
widths = 4, 8, 8
pose_hidden = 8
mask_width = 4
height = 16
width = 32
[optim]
iterations = 50
window_length = 3
batch_size_train = 2
stats_iterations = 10
[run]
output_dir = {out}
deterministic = true
"""


@pytest.fixture(autouse=True)
def _restore_determinism():
    yield
    torch.use_deterministic_algorithms(False)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data"), "--sequences", "2", "--frames", "12",
                 "--height", "16", "--width", "32", "--seed", "1"]) == EXIT_OK
    assert main(["gen-data", "--out", str(root / "stream"), "--domain", "b", "--frames", "12",
                 "--height", "16", "--width", "32", "--seed", "5"]) == EXIT_OK
    cfg = root / "tiny.ini"
    cfg.write_text(TINY.format(root=root / "data", out=root / "run"))
    assert main(["train", "--config", str(cfg)]) == EXIT_OK
    torch.use_deterministic_algorithms(False)
    return root


def read_log(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_defaults_round_trip(self):
        cfg = RunConfig()
        assert parse_config(dump_config(cfg)) == cfg

    def test_custom_round_trip(self, tmp_path):
        (tmp_path / "d").mkdir()
        cfg = parse_config(TINY.format(root=tmp_path / "d", out="o"))
        assert cfg.model == ArchitectureConfig(widths=(4, 8, 8), pose_hidden=(8,), mask_width=4, height=16, width=32)
        assert cfg.data.sequences == ("00", "01") and cfg.run.deterministic is True
        assert parse_config(dump_config(cfg)) == cfg

    def test_none_and_float_values(self):
        cfg = RunConfig().replace("optim", inner_alpha=1 / 3)
        back = parse_config(dump_config(cfg))
        assert back.optim.inner_alpha == 1 / 3 and RunConfig().optim.inner_alpha is None
        assert parse_config(dump_config(RunConfig())).optim.inner_alpha is None

    @pytest.mark.parametrize("text, where", [
        ("[optim]\nlearning_rat = 3\n", "optim.learning_rat"),
        ("[optimiser]\nalpha = 3\n", "optimiser"),
        ("[optim]\nwindow_length = 1\n", "optim"),
        ("[run]\ndeterministic = maybe\n", "run.deterministic"),
        ("[optim]\niterations = ten\n", "optim.iterations"),
    ])
    def test_rejected(self, text, where):
        with pytest.raises(ConfigError, match=where):
            parse_config(text)

    def test_missing_paths(self, tmp_path):
        (tmp_path / "c.ini").write_text("[data]\nroot = nowhere\n")
        with pytest.raises(ConfigError, match="data.root"):
            load_config(tmp_path / "c.ini")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.ini")

    def test_relative_root_resolved_against_config(self, tmp_path):
        (tmp_path / "d").mkdir()
        (tmp_path / "c.ini").write_text("[data]\nroot = d\n")
        assert load_config(tmp_path / "c.ini").data.root == str((tmp_path / "d").resolve())

    def test_effective_config_reloads(self, workspace):
        eff = load_config(workspace / "run" / "effective_config.ini")
        assert eff == load_config(workspace / "tiny.ini")
        assert {f.name for f in dataclasses.fields(RunConfig)} == {"data", "model", "optim", "loss", "align",
                                                                   "online", "run"}


class TestTrain:
    def test_checkpoint_and_log(self, workspace):
        assert (workspace / "run" / "checkpoint.pt").is_file()
        rows = read_log(workspace / "run" / "train_log.csv")
        assert [int(r["iteration"]) for r in rows] == list(range(50))
        assert all(r["outer_loss"] != "" for r in rows)
        assert not (workspace / "run" / "train_state.pt").exists()

    def test_standard_has_no_outer_loss(self, workspace):
        assert main(["train", "--config", str(workspace / "tiny.ini"), "--standard", "--iterations", "10",
                     "--out", str(workspace / "std")]) == EXIT_OK
        rows = read_log(workspace / "std" / "train_log.csv")
        assert len(rows) == 10 and all(r["outer_loss"] == "" and r["grad_cosine"] == "" for r in rows)

    def test_resume(self, workspace):
        out = workspace / "resumed"
        args = ["train", "--config", str(workspace / "tiny.ini"), "--out", str(out)]
        assert main(args + ["--stop-after", "30"]) == EXIT_OK
        assert len(read_log(out / "train_log.csv")) == 30 and (out / "train_state.pt").exists()
        assert not (out / "checkpoint.pt").exists()
        assert main(args + ["--resume"]) == EXIT_OK
        rows = read_log(out / "train_log.csv")
        assert [int(r["iteration"]) for r in rows] == list(range(50))
        ref = read_log(workspace / "run" / "train_log.csv")
        assert [r["inner_loss"] for r in rows] == [r["inner_loss"] for r in ref]
        assert (out / "checkpoint.pt").read_bytes() == (workspace / "run" / "checkpoint.pt").read_bytes()

    def test_byte_identical_reruns(self, workspace):
        assert main(["train", "--config", str(workspace / "tiny.ini"), "--out", str(workspace / "again")]) == EXIT_OK
        assert (workspace / "again" / "checkpoint.pt").read_bytes() == \
            (workspace / "run" / "checkpoint.pt").read_bytes()
        a = read_log(workspace / "again" / "train_log.csv")
        b = read_log(workspace / "run" / "train_log.csv")
        strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_ms"} for r in rows]
        assert strip(a) == strip(b)


class TestAdapt:
    def adapt(self, ws, out, *flags):
        return main(["adapt", "--config", str(ws / "tiny.ini"), "--checkpoint", str(ws / "run" / "checkpoint.pt"),
                     "--stream-root", str(ws / "stream"), "--sequence", "00", "--out", str(ws / out), *flags])

    def header(self, path):
        return [line for line in path.read_text().splitlines() if line.startswith("#")]

    def test_mode_none_repeatable(self, workspace):
        assert self.adapt(workspace, "n1", "--mode", "none") == EXIT_OK
        assert self.adapt(workspace, "n2", "--mode", "none") == EXIT_OK
        a = (workspace / "n1" / "poses.txt").read_bytes()
        assert a == (workspace / "n2" / "poses.txt").read_bytes() and len(a.splitlines()) == 11

    def test_ablation_headers(self, workspace):
        headers = []
        for k, flags in enumerate([(), ("--no-lstm",), ("--no-fa",), ("--no-lstm", "--no-fa")]):
            assert self.adapt(workspace, f"ab{k}", "--mode", "meta", *flags) == EXIT_OK
            h = self.header(workspace / f"ab{k}" / "report.csv")
            assert f"# lstm={'--no-lstm' not in flags}" in h and f"# fa={'--no-fa' not in flags}" in h
            headers.append(tuple(h))
        assert len(set(headers)) == 4

    def test_poses_readable(self, workspace):
        assert self.adapt(workspace, "pm", "--mode", "naive") == EXIT_OK
        rows = (workspace / "pm" / "poses.txt").read_text().splitlines()
        assert all(len(r.split()) == 13 for r in rows)

    def test_architecture_mismatch(self, workspace, tmp_path, capsys):
        cfg = tmp_path / "other.ini"
        cfg.write_text((workspace / "tiny.ini").read_text().replace("widths = 4, 8, 8", "widths = 4, 8, 16"))
        rc = main(["adapt", "--config", str(cfg), "--checkpoint", str(workspace / "run" / "checkpoint.pt"),
                   "--stream-root", str(workspace / "stream"), "--sequence", "00", "--out", str(tmp_path / "o")])
        assert rc == EXIT_USAGE and "widths" in capsys.readouterr().err


def straight(n, step):
    return accumulate([PoseSE3(np.eye(3), step)] * n, np.arange(n + 1) / 10.0)


class TestEval:
    def run(self, capsys, *args):
        rc = main(["eval", *map(str, args)])
        out = capsys.readouterr().out
        return rc, {k: float(v) for k, v in (line.split() for line in out.splitlines())}

    def test_identity_kitti(self, workspace, capsys):
        gt = workspace / "stream" / "poses" / "00.txt"
        rc, m = self.run(capsys, "--est", gt, "--gt", gt, "--desk", "--rpe-delta", "5")
        assert rc == EXIT_OK and m["rpe_trans"] == 0.0 and m["ate"] == 0.0

    def test_stretch_kitti(self, tmp_path, capsys):
        write_kitti_poses(tmp_path / "gt.txt", straight(120, [0, 0, 0.1]))
        write_kitti_poses(tmp_path / "est.txt", straight(120, [0, 0, 0.105]))
        rc, m = self.run(capsys, "--est", tmp_path / "est.txt", "--gt", tmp_path / "gt.txt", "--desk",
                         "--no-align", "--csv", tmp_path / "m.csv")
        assert rc == EXIT_OK and abs(m["t_err"] - 5.0) < 0.1 and m["r_err"] == 0.0
        rows = list(csv.reader(open(tmp_path / "m.csv")))
        assert rows[0] == ["t_err", "r_err", "rpe_trans", "ate"] and float(rows[1][0]) == pytest.approx(m["t_err"])

    def test_tum_identity(self, tmp_path, capsys):
        write_tum_trajectory(tmp_path / "gt.txt", straight(60, [0.05, 0, 0.1]))
        rc, m = self.run(capsys, "--est", tmp_path / "gt.txt", "--gt", tmp_path / "gt.txt", "--format", "tum",
                         "--desk")
        assert rc == EXIT_OK and set(m.values()) == {0.0}

    def test_adapt_output_against_gt(self, workspace, capsys):
        assert TestAdapt().adapt(workspace, "ev", "--mode", "none") == EXIT_OK
        capsys.readouterr()
        rc, m = self.run(capsys, "--est", workspace / "ev" / "poses.txt", "--gt",
                         workspace / "stream" / "poses" / "00.txt", "--desk", "--rpe-delta", "5")
        assert rc == EXIT_OK and np.isfinite(m["ate"])

    def test_parse_failure(self, tmp_path, capsys):
        (tmp_path / "bad.txt").write_text("garbage\n")
        write_kitti_poses(tmp_path / "gt.txt", straight(10, [0, 0, 0.1]))
        assert main(["eval", "--est", str(tmp_path / "bad.txt"), "--gt", str(tmp_path / "gt.txt")]) == EXIT_DATA
        assert main(["eval", "--est", str(tmp_path / "nope.txt"), "--gt", str(tmp_path / "gt.txt")]) == EXIT_DATA


class TestExitCodes:
    def test_usage(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "none.ini")]) == EXIT_USAGE
        (tmp_path / "u.ini").write_text("[optim]\nlearning_rat = 3\n")
        assert main(["train", "--config", str(tmp_path / "u.ini")]) == EXIT_USAGE
        with pytest.raises(SystemExit) as e:
            main(["bogus"])
        assert e.value.code == EXIT_USAGE

    def test_data_error(self, tmp_path):
        (tmp_path / "empty").mkdir()
        (tmp_path / "c.ini").write_text("[data]\nroot = empty\nsequences = 00\n")
        assert main(["train", "--config", str(tmp_path / "c.ini"), "--out", str(tmp_path / "o")]) == EXIT_DATA


class TestGenDataAndPlot:
    def test_export_layout(self, workspace):
        seq = workspace / "data" / "sequences" / "01"
        assert len(list((seq / "image_2").glob("*.png"))) == 12 and (seq / "intrinsics.txt").is_file()
        assert len(read_kitti_poses(workspace / "data" / "poses" / "01.txt")) == 12

    def test_plot(self, workspace, tmp_path):
        gt = workspace / "stream" / "poses" / "00.txt"
        assert main(["plot", "--traj", f"gt={gt}", "--out", str(tmp_path / "p.png")]) == EXIT_OK
        assert (tmp_path / "p.png").stat().st_size > 0
        assert main(["plot", "--traj", str(gt), "--out", str(tmp_path / "q.png")]) == EXIT_USAGE


class TestSelfcheck:
    def test_passes(self, capsys):
        assert main(["selfcheck"]) == EXIT_OK
        out = capsys.readouterr().out
        for name in ("warp identity", "meta step", "align_stats", "collect_stats"):
            assert name in out
        assert "ms" in out

    def test_mutation_caught(self, capsys):
        assert main(["selfcheck", "--mutate", "align-sign"]) == EXIT_NUMERIC
        fails = [line for line in capsys.readouterr().out.splitlines() if "FAIL" in line]
        assert fails and all("align" in line for line in fails)
