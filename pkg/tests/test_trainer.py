import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from giorom.datagen import generate_fluidlike
from giorom.dynamics import WINDOW, RolloutState
from giorom.geometry import PointCloud, connected_components
from giorom.operator import ModelConfig, OperatorModel
from giorom.tensor import Adam, Tensor
from giorom.trainer import (
    STD_FLOOR, NormStats, Simulator, TrainConfig, draw_sample, load_checkpoint, load_config, loss,
    make_sample, save_checkpoint, train, train_step, validate, window_at,
)

TINY = ModelConfig(latent=8, type_embed=4, grid=8, modes=2, fno_width=4, gno_hidden=(4, 4), dec_channels=4)


@pytest.fixture(scope="module")
def trajs():
    return [generate_fluidlike(60, 40, seed=s) for s in range(3)]


class TestNormStats:
    def test_round_trip(self, trajs):
        stats = NormStats.from_trajectories(trajs)
        a = np.random.default_rng(0).normal(size=(50, 2)) * 1e-3
        np.testing.assert_allclose(stats.denormalize_acceleration(stats.normalize_acceleration(a)), a, atol=1e-10)
        back = NormStats.from_dict(stats.to_dict())
        np.testing.assert_array_equal(back.acc_std, stats.acc_std)
        np.testing.assert_array_equal(back.vel_mean, stats.vel_mean)

    def test_matches_batch_moments(self, trajs):
        stats = NormStats.from_trajectories(trajs)
        v = np.concatenate([np.diff(t.frames(), axis=0).reshape(-1, 2) for t in trajs])
        np.testing.assert_allclose(stats.vel_mean, v.mean(axis=0), rtol=1e-10)
        np.testing.assert_allclose(stats.vel_std, v.std(axis=0), rtol=1e-10)
        assert stats.count == len(v)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(0, 40), min_size=1, max_size=6), st.integers(0, 1000))
    def test_streaming_chunks(self, sizes, seed):
        rng = np.random.default_rng(seed)
        chunks = [rng.normal(3.0, 2.0, size=(n, 2)) for n in sizes]
        if sum(sizes) == 0:
            return
        s = NormStats()
        for c in chunks:
            s.update(c, c)
        full = np.concatenate(chunks)
        np.testing.assert_allclose(s.acc_mean, full.mean(axis=0), rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(s.acc_std, np.maximum(full.std(axis=0), STD_FLOOR), rtol=1e-9)

    def test_std_floor_and_freeze(self):
        s = NormStats()
        s.update(np.ones((5, 2)), np.zeros((5, 2)))
        assert np.all(s.acc_std == STD_FLOOR)
        s.freeze()
        with pytest.raises(RuntimeError):
            s.update(np.ones((1, 2)), np.ones((1, 2)))


class TestLoss:
    def test_examples(self):
        t = np.random.default_rng(0).normal(size=(7, 2))
        assert loss(Tensor(t), t).item() == 0.0
        assert loss(Tensor(t + 1), t).item() == pytest.approx(1.0, abs=1e-15)
        p = np.random.default_rng(1).normal(size=(7, 2))
        direct = sum((p[i, k] - t[i, k]) ** 2 for i in range(7) for k in range(2)) / 14
        assert loss(Tensor(p), t).item() == pytest.approx(direct, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            loss(Tensor(np.zeros((3, 2))), np.zeros((2, 3)))


class TestConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=-1)
        with pytest.raises(ValueError):
            TrainConfig(fractions={"water": (0.0, 0.2)})

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lr, cfg.batch, cfg.window) == (1e-4, 4, 6)
        assert cfg.fraction_range("water") == (0.20, 0.25)
        assert cfg.gamma ** 5e6 == pytest.approx(0.1, rel=1e-9)

    def test_yaml_sections(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text(yaml.safe_dump({"train": {"lr": 1e-3}}))
        assert load_config(p)["train"]["lr"] == 1e-3
        p.write_text(yaml.safe_dump({"optimizer": {}}))
        with pytest.raises(ValueError, match="unknown"):
            load_config(p)


class TestSamples:
    def test_clean_target_is_normalized_second_difference(self, trajs):
        traj = trajs[0]
        x = traj.frames()
        stats = NormStats.from_trajectories(trajs)
        idx = np.arange(0, 60, 3)
        s = make_sample(x, 10, traj, stats, idx, 0.2)
        acc = x[11, idx] - 2 * x[10, idx] + x[9, idx]
        np.testing.assert_allclose(s.target, (acc - stats.acc_mean) / stats.acc_std, atol=1e-12)
        np.testing.assert_allclose(s.frame.window.reshape(20, WINDOW, 2),
                                   stats.normalize_velocity(window_at(x[:, idx], 10)), atol=1e-12)

    def test_draw_sample_fraction_and_connectivity(self, trajs):
        cfg = TrainConfig()
        stats = NormStats.from_trajectories(trajs)
        rng = np.random.default_rng(0)
        for _ in range(10):
            s, r = draw_sample(trajs[1], trajs[1].frames(), cfg, stats, rng)
            assert 12 <= len(s.index) <= 15
            assert s.frame.graph.radius == r
            assert all(c == 1 for c in connected_components(s.frame.graph).values())


class TestOptimizer:
    def test_zero_lr_leaves_parameters(self, trajs):
        model = OperatorModel(TINY)
        before = {k: v.data.copy() for k, v in model.params.items()}
        cfg = TrainConfig(lr=0.0, steps=3, batch=1)
        res = train(trajs, TINY, cfg, model=model)
        assert np.all(np.isfinite(res.losses))
        for k, v in model.params.items():
            np.testing.assert_array_equal(v.data, before[k])

    def test_zero_gradient_step(self):
        model = OperatorModel(TINY)
        opt = Adam(model.params, lr=1e-2)
        before = opt.flat.copy()
        for k in model.params.names():
            model.params.grads[k] = np.zeros(model.params[k].shape)
        opt.step()
        np.testing.assert_array_equal(opt.flat, before)

    def test_lr_decay(self):
        opt = Adam(OperatorModel(TINY).params, lr=1e-4, gamma=0.1 ** (1 / 5e6))
        opt.step_count = 123_456
        assert opt.lr == pytest.approx(1e-4 * (0.1 ** (1 / 5e6)) ** 123_456, rel=1e-12)

    def test_deterministic(self, trajs):
        cfg = TrainConfig(steps=4, batch=2, seed=3)
        a = train(trajs, TINY, cfg).losses
        b = train(trajs, TINY, cfg).losses
        np.testing.assert_array_equal(a, b)

    def test_overfit_single_frame(self, trajs):
        traj = trajs[0]
        x = traj.frames()
        stats = NormStats.from_trajectories(trajs)
        idx = np.arange(0, 60, 2)
        sample = make_sample(x, 20, traj, stats, idx, 0.15)
        model = OperatorModel(TINY)
        opt = Adam(model.params, lr=1e-3)
        losses = np.array([train_step(model, opt, [sample]) for _ in range(2000)])
        assert losses[-1] <= losses[0] / 100, (losses[0], losses[-1])
        rising = np.mean(losses[200:] >= losses[:-200])
        assert rising <= 0.05, rising


class TestValidate:
    def test_oracle_accelerations(self, trajs):
        def oracle(traj, x, index):
            def predict(state):
                t = WINDOW + state.step
                return x[t + 1] - 2 * x[t] + x[t - 1]
            return predict

        stats = NormStats.from_trajectories(trajs)
        out = validate(OperatorModel(TINY), stats, trajs[:2], 0.2, steps=20, predictor=oracle, one_step_every=50)
        assert out["rollout_mse"] < 1e-24
        assert out["inertial_mse"] > 0

    def test_single_step_matches_one_step_error(self, trajs):
        model = OperatorModel(TINY)
        stats = NormStats.from_trajectories(trajs)
        traj = trajs[2]
        out = validate(model, stats, [traj], 0.2, steps=1, start=15, fraction=1.0)
        x = traj.frames()
        sim = Simulator(model, stats, 0.2, traj.bounds, traj.particle_type)
        a = sim(RolloutState.from_frames(x[15 - WINDOW:16]))
        true = x[16] - 2 * x[15] + x[14]
        assert out["rollout_mse"] == pytest.approx(np.mean((a - true) ** 2), rel=1e-9)

    def test_blowup_counts_as_infinite(self, trajs):
        model = OperatorModel(TINY)
        model.params["out.0.b"].data[...] = 1e6
        out = validate(model, NormStats.from_trajectories(trajs), trajs[:1], 0.2, steps=20)
        assert out["rollout_mse"] == np.inf


class TestCheckpoint:
    def test_round_trip(self, trajs, tmp_path):
        res = train(trajs, TINY, TrainConfig(steps=2, batch=1))
        save_checkpoint(tmp_path / "m.gprm", res.model, res.stats, res.radius, TrainConfig(steps=2))
        model, stats, meta = load_checkpoint(tmp_path / "m.gprm")
        assert meta["radius"] == res.radius and meta["train"]["steps"] == 2
        cloud = PointCloud(trajs[0].frames(10, 11)[0], trajs[0].bounds)
        sim_a = Simulator(res.model, res.stats, 0.2, cloud.bounds, trajs[0].particle_type)
        sim_b = Simulator(model, stats, 0.2, cloud.bounds, trajs[0].particle_type)
        state = RolloutState.from_frames(trajs[0].frames(4, 11))
        np.testing.assert_array_equal(sim_a(state), sim_b(state))

    def test_missing_metadata(self, tmp_path):
        from giorom.tensor import save_params
        save_params(tmp_path / "p.gprm", OperatorModel(TINY).params, {})
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "p.gprm")
