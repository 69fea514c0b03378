import csv

import numpy as np
import pytest
import yaml

from giorom.cli import bench_rows, main, metrics_rows
from giorom.datagen import Trajectory, generate_fluidlike, read_trajectory, write_trajectory
from giorom.dynamics import WINDOW, inertial_rollout
from giorom.trainer import load_checkpoint, save_checkpoint

TINY_MODEL = dict(latent=8, type_embed=4, grid=8, modes=2, fno_width=4, gno_hidden=[4, 4], dec_channels=4)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["simulate-data", "--out", str(data), "--count", "2", "--particles", "40",
                 "--steps", "20", "--seed", "3"]) == 0
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump({"model": TINY_MODEL, "train": {"batch": 1, "log_every": 1}}))
    ckpt = root / "model.gprm"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--steps", "3", "--seed", "1",
                 "--out", str(ckpt)]) == 0
    return root, data, ckpt


class TestSimulateAndTrain:
    def test_files_and_env_default(self, tmp_path, monkeypatch):
        monkeypatch.setenv("GIOROM_DATA_DIR", str(tmp_path / "env"))
        assert main(["simulate-data", "--count", "1", "--particles", "10", "--steps", "5"]) == 0
        traj = read_trajectory(tmp_path / "env" / "traj_00000.gtrj")
        assert traj.positions.shape == (6, 10, 2)

    def test_prints_config_and_seed(self, tmp_path, capsys):
        main(["simulate-data", "--out", str(tmp_path), "--count", "1", "--particles", "4",
              "--steps", "2", "--seed", "7"])
        out = capsys.readouterr().out
        assert "config: " in out and "seed: 7" in out

    def test_deterministic(self, tmp_path):
        for k in (1, 2):
            main(["simulate-data", "--out", str(tmp_path / str(k)), "--count", "1", "--particles", "9",
                  "--steps", "4"])
        a, b = (tmp_path / "1" / "traj_00000.gtrj").read_bytes(), (tmp_path / "2" / "traj_00000.gtrj").read_bytes()
        assert a == b

    def test_train_outputs(self, workspace):
        root, _, ckpt = workspace
        model, _, meta = load_checkpoint(ckpt)
        assert model.cfg.latent == 8 and meta["train"]["steps"] == 3 and meta["train"]["seed"] == 1
        rows = read_csv(ckpt.with_suffix(".csv"))
        assert rows[0] == ["step", "loss", "lr", "wall_time"] and len(rows) == 4
        assert np.isfinite(float(rows[1][1]))

    def test_train_missing_data(self, tmp_path):
        assert main(["train", "--data", str(tmp_path), "--steps", "1", "--out", str(tmp_path / "m")]) == 3

    def test_train_bad_config_key(self, tmp_path, workspace):
        cfg = tmp_path / "bad.yaml"
        cfg.write_text(yaml.safe_dump({"model": {"no_such_field": 1}}))
        assert main(["train", "--config", str(cfg), "--data", str(workspace[1]), "--out", str(tmp_path / "m")]) == 2


class TestUsage:
    def test_unknown_flag_rejected(self):
        with pytest.raises(SystemExit) as exc:
            main(["metrics", "--pred", "a", "--truth", "b", "--out", "c", "--bogus"])
        assert exc.value.code == 2

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2


class TestRolloutAndUpsample:
    def test_rollout_writes_trajectory(self, workspace, tmp_path):
        _, data, ckpt = workspace
        src = data / "traj_00003.gtrj"
        out, truth = tmp_path / "pred.gtrj", tmp_path / "truth.gtrj"
        assert main(["rollout", "--checkpoint", str(ckpt), "--data", str(src), "--steps", "4",
                     "--fraction", "0.5", "--out", str(out), "--truth-out", str(truth)]) == 0
        pred = read_trajectory(out)
        assert pred.positions.shape == (WINDOW + 5, 20, 2)
        np.testing.assert_array_equal(pred.positions[:WINDOW + 1], read_trajectory(truth).positions[:WINDOW + 1])
        again = tmp_path / "again.gtrj"
        main(["rollout", "--checkpoint", str(ckpt), "--data", str(src), "--steps", "4",
              "--fraction", "0.5", "--out", str(again)])
        assert out.read_bytes() == again.read_bytes()

    def test_rollout_blowup_exit_code(self, workspace, tmp_path):
        _, data, ckpt = workspace
        model, stats, _ = load_checkpoint(ckpt)
        model.params["out.0.b"].data[...] = 1e5
        hot = tmp_path / "hot.gprm"
        save_checkpoint(hot, model, stats, 0.1)
        code = main(["rollout", "--checkpoint", str(hot), "--data", str(data / "traj_00003.gtrj"),
                     "--steps", "5", "--out", str(tmp_path / "x.gtrj")])
        assert code == 4

    def test_rollout_other_grid(self, workspace, tmp_path):
        _, data, ckpt = workspace
        assert main(["rollout", "--checkpoint", str(ckpt), "--data", str(data / "traj_00004.gtrj"),
                     "--steps", "2", "--grid", "12", "--out", str(tmp_path / "g.gtrj")]) == 0

    def test_upsample_fit_and_reconstruct(self, workspace, tmp_path):
        _, data, _ = workspace
        full = data / "traj_00003.gtrj"
        traj = read_trajectory(full)
        reduced = tmp_path / "reduced.gtrj"
        idx = np.arange(0, 40, 2)
        write_trajectory(reduced, Trajectory(traj.positions[:, idx], traj.particle_type[idx], traj.bounds))
        out = tmp_path / "up.gtrj"
        assert main(["upsample", "--basis", str(tmp_path / "b.gprm"), "--reduced", str(reduced),
                     "--reference", str(full), "--fit-data", str(data), "--rank", "4", "--out", str(out)]) == 0
        up = read_trajectory(out)
        assert up.positions.shape == traj.positions.shape
        np.testing.assert_allclose(up.positions[0], traj.positions[0], atol=1e-6)
        # the saved basis is reusable without refitting
        assert main(["upsample", "--basis", str(tmp_path / "b.gprm"), "--reduced", str(reduced),
                     "--reference", str(full), "--out", str(tmp_path / "up2.gtrj")]) == 0
        assert out.read_bytes() == (tmp_path / "up2.gtrj").read_bytes()


class TestBench:
    def test_zero_steps_header_only(self, workspace, tmp_path):
        _, data, ckpt = workspace
        out = tmp_path / "b.csv"
        assert main(["bench", "--checkpoint", str(ckpt), "--data", str(data / "traj_00003.gtrj"),
                     "--radii", "0.1,0.2", "--sizes", "10,20", "--steps", "0", "--out", str(out)]) == 0
        assert read_csv(out) == [["radius", "size", "seconds"]]

    def test_row_order_and_threads(self, workspace, tmp_path):
        _, data, ckpt = workspace
        out = tmp_path / "b.csv"
        assert main(["bench", "--checkpoint", str(ckpt), "--data", str(data / "traj_00003.gtrj"),
                     "--radii", "0.1,0.2", "--sizes", "10,20", "--steps", "1", "--threads", "1",
                     "--out", str(out)]) == 0
        rows = read_csv(out)[1:]
        assert [(float(r[0]), int(r[1])) for r in rows] == [(0.1, 10), (0.1, 20), (0.2, 10), (0.2, 20)]
        assert all(float(r[2]) > 0 for r in rows)

    def test_size_too_large(self, workspace):
        model, stats, _ = load_checkpoint(workspace[2])
        traj = read_trajectory(workspace[1] / "traj_00003.gtrj")
        with pytest.raises(ValueError):
            bench_rows(model, stats, traj, [0.1], [41], 1)


class TestMetrics:
    def traj(self, seed=0):
        return generate_fluidlike(12, 15, seed=seed)

    def test_identical_is_zero(self):
        x = self.traj().frames()
        rows = metrics_rows(x, x)
        assert all(r[1] == 0.0 for r in rows)

    def test_constant_shift(self):
        x = self.traj().frames()
        c = np.array([0.01, -0.02])
        rows = metrics_rows(x + c, x)
        np.testing.assert_allclose([r[1] for r in rows], (c ** 2).sum(), rtol=1e-12)

    def test_inertial_baseline_reproducible(self, tmp_path):
        traj = self.traj(seed=5)
        x = traj.frames()
        pred = np.concatenate([x[:WINDOW + 1], inertial_rollout(x[:WINDOW + 1], len(x) - WINDOW - 1)])
        paths = []
        for k in (0, 1):
            p, t, out = tmp_path / f"p{k}.gtrj", tmp_path / f"t{k}.gtrj", tmp_path / f"m{k}.csv"
            write_trajectory(p, traj.with_positions(pred))
            write_trajectory(t, traj)
            assert main(["metrics", "--pred", str(p), "--truth", str(t), "--out", str(out)]) == 0
            paths.append(out)
        rows = read_csv(paths[0])
        assert rows[0] == ["step", "mse", "min_distance", "max_speed"] and rows[-1][0] == "all"
        assert 0 < float(rows[-1][1]) < np.inf
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_shape_mismatch_exit_code(self, tmp_path):
        a, b = tmp_path / "a.gtrj", tmp_path / "b.gtrj"
        write_trajectory(a, generate_fluidlike(5, 4))
        write_trajectory(b, generate_fluidlike(6, 4))
        assert main(["metrics", "--pred", str(a), "--truth", str(b), "--out", str(tmp_path / "m.csv")]) == 3
