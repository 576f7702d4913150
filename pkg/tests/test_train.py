import numpy as np
import pytest

from tilab.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from tilab.estimator import AttentionOnlyTransformer
from tilab.model import ArchConfig, ModelParams, init_params, loss_and_grad
from tilab.numerics import finite_diff_gradient, make_rng
from tilab.optim import AdamState, adam_step
from tilab.taskgen import EpisodeSampler
from tilab.train import (
    RegimeConfig,
    TrainingDiverged,
    backward,
    frozen,
    mse_loss,
    run_training,
    transfer_eval_setup,
)


def tiny_case(seed):
    rng = make_rng(seed)
    d = int(rng.integers(3, 7))
    H = int(rng.integers(1, 3))
    dh = int(rng.integers(1, 4))
    T = int(rng.integers(2, 5))
    B = int(rng.integers(1, 4))
    p = init_params(ArchConfig(token_dim=d, n_layers=2, n_heads=H, head_dim=dh), rng)
    p = p.map(lambda a: a * 1.5)
    p.b_out = np.asarray(rng.standard_normal())
    X = rng.standard_normal((B, T, d))
    y = rng.standard_normal(B)
    return p, X, y


def relative_error(a, b):
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


class TestLoss:
    def test_mse(self):
        assert mse_loss([1.0, -1.0], [0.0, 0.0]) == 1.0
        assert mse_loss([0.5], [0.5]) == 0.0
        assert mse_loss([2.0, 0.0, 1.0], [0.0, 0.0, 0.0]) == pytest.approx(5 / 3, abs=1e-15)

    def test_mse_errors(self):
        with pytest.raises(ValueError):
            mse_loss([], [])
        with pytest.raises(ValueError):
            mse_loss([1.0, 2.0], [1.0])


class TestGradient:
    @pytest.mark.parametrize("seed", range(24))
    def test_against_finite_differences(self, seed):
        p, X, y = tiny_case(seed)
        scale = 1.0 if seed % 2 else 0.5
        ablation = {(seed % 2, 0)} if seed % 3 == 0 else None
        analytic = backward(p, X, y, ablation, scale).flatten()

        def f(theta):
            q = ModelParams.unflatten(theta, p)
            return loss_and_grad(q, X, y, ablation, scale)[0]

        numeric = finite_diff_gradient(f, p.flatten(), 1e-4)
        assert relative_error(analytic, numeric).max() <= 1e-4

    def test_ablated_head_has_zero_output_grad_upstream(self):
        p, X, y = tiny_case(3)
        g = backward(p, X, y, {(1, 0)})
        assert np.all(g.W_Q[1, 0] == 0) and np.all(g.W_K[1, 0] == 0) and np.all(g.W_V[1, 0] == 0)

    def test_loss_matches_mse(self):
        p, X, y = tiny_case(5)
        from tilab.model import batched_forward
        assert loss_and_grad(p, X, y)[0] == pytest.approx(mse_loss(batched_forward(p, X), y), rel=1e-14)


class TestAdam:
    def one_param(self, value):
        z = np.zeros((1, 1, 1, 1))
        return ModelParams(z, z.copy(), z.copy(), z.copy(), np.array([value]), np.asarray(0.0))

    def test_first_step_moves_by_lr(self):
        # bias-corrected first step is lr * g / (|g| + eps)
        p = self.one_param(1.0)
        g = self.one_param(0.3)
        new, state = adam_step(AdamState.zeros_like(p), p, g, lr=0.01)
        expected = 1.0 - 0.01 * 0.3 / (0.3 + 1e-8)
        assert abs(new.w_out[0] - expected) < 1e-15
        assert state.t == 1
        assert new.W_Q[0, 0, 0, 0] == 0.0

    def test_two_steps_closed_form(self):
        b1, b2, eps, lr = 0.9, 0.999, 1e-8, 1e-3
        g1, g2 = 0.5, -0.2
        p = self.one_param(0.0)
        p1, s1 = adam_step(AdamState.zeros_like(p), p, self.one_param(g1), lr, b1, b2, eps)
        p2, _ = adam_step(s1, p1, self.one_param(g2), lr, b1, b2, eps)
        m = (1 - b1) * (b1 * g1 + g2)
        v = (1 - b2) * (b2 * g1**2 + g2**2)
        step1 = lr * g1 / (abs(g1) + eps)
        step2 = lr * (m / (1 - b1**2)) / (np.sqrt(v / (1 - b2**2)) + eps)
        assert abs(p2.w_out[0] - (-step1 - step2)) < 1e-15

    def test_coupled_weight_decay(self):
        p = self.one_param(2.0)
        zero = self.one_param(0.0)
        new, state = adam_step(AdamState.zeros_like(p), p, zero, lr=0.1, weight_decay=0.5)
        # decay enters the gradient: g = 0.5 * 2 = 1
        assert abs(new.w_out[0] - (2.0 - 0.1 * 1.0 / (1.0 + 1e-8))) < 1e-15
        assert abs(state.m.w_out[0] - 0.1) < 1e-15


class TestCheckpoint:
    def test_round_trip_and_deterministic_bytes(self, tmp_path):
        arch = ArchConfig(token_dim=6, n_heads=2)
        p = init_params(arch, make_rng(0))
        a, b = tmp_path / "a.tlc", tmp_path / "b.tlc"
        save_checkpoint(a, p, arch, seed=3, meta={"x": 1}, extra={"losses": np.arange(3.0)})
        save_checkpoint(b, p, arch, seed=3, meta={"x": 1}, extra={"losses": np.arange(3.0)})
        assert a.read_bytes() == b.read_bytes()
        ck = load_checkpoint(a)
        assert ck["params"].equal(p)
        assert ck["arch"] == arch and ck["seed"] == 3 and ck["meta"] == {"x": 1}
        np.testing.assert_array_equal(ck["extra"]["losses"], np.arange(3.0))

    def test_corruption_detected(self, tmp_path):
        arch = ArchConfig(token_dim=6, n_heads=2)
        path = tmp_path / "c.tlc"
        save_checkpoint(path, init_params(arch, make_rng(0)), arch)
        raw = bytearray(path.read_bytes())
        raw[-3] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "x.tlc"
        path.write_bytes(b"hello")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def small_cfg(**kw):
    base = dict(iterations=30, batch_size=8, eval_every=10, checkpoint_every=10, eval_episodes=4, seed=5)
    base.update(kw)
    return RegimeConfig(**base)


class TestConfig:
    def test_defaults(self):
        cfg = RegimeConfig()
        assert (cfg.n_items, cfg.P, cfg.D, cfg.n_layers, cfg.n_heads, cfg.batch_size) == (7, 32, 64, 2, 4, 64)
        assert cfg.learning_rate == 1e-3 and cfg.weight_decay == 1e-7

    def test_full_scale(self):
        cfg = RegimeConfig.full_scale("iwl")
        assert (cfg.iterations, cfg.batch_size, cfg.P, cfg.D, cfg.n_heads) == (14000, 128, 64, 1024, 8)
        assert RegimeConfig.full_scale("icl_adjacent").iterations == 40000
        assert RegimeConfig.full_scale("linreg_pretrain").iterations == 50000

    @pytest.mark.parametrize("bad", [{"iterations": 0}, {"batch_size": 0}, {"regime": "nope"}, {"D": 63},
                                     {"P": 16}])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            RegimeConfig(**bad)

    def test_unknown_key_named(self):
        with pytest.raises(ValueError, match="lerning_rate"):
            RegimeConfig.from_dict({"lerning_rate": 0.1})

    def test_round_trip(self):
        cfg = small_cfg(regime="linreg_pretrain")
        assert RegimeConfig.from_dict(cfg.to_dict()) == cfg


class TestTraining:
    def test_single_iteration(self):
        run = run_training(small_cfg(iterations=1))
        assert len(run.losses) == 1

    def test_deterministic(self):
        a = run_training(small_cfg())
        b = run_training(small_cfg())
        assert a.losses == b.losses
        assert a.params.equal(b.params)

    def test_seed_matters(self):
        assert run_training(small_cfg()).losses != run_training(small_cfg(seed=6)).losses

    @pytest.mark.parametrize("regime", ["iwl", "icl_adjacent", "icl_all_pairs", "linreg_pretrain"])
    def test_loss_decreases_early(self, regime):
        cfg = RegimeConfig(regime=regime, iterations=200, eval_every=200, checkpoint_every=200, seed=1)
        losses = run_training(cfg, keep_checkpoints=False).losses
        assert np.mean(losses[150:200]) < np.mean(losses[0:50])

    def test_resume_is_bit_exact(self, tmp_path):
        cfg = small_cfg(regime="iwl")
        full = run_training(cfg)
        d = tmp_path / "ck"
        d.mkdir()
        run_training(cfg, checkpoint_dir=d, stop_after=20)
        resumed = run_training(cfg, resume_from=d / "ckpt_0000020.tlc")
        assert resumed.losses == full.losses
        assert resumed.params.equal(full.params)

    def test_resume_rejects_other_config(self, tmp_path):
        run_training(small_cfg(), checkpoint_dir=tmp_path, stop_after=10)
        with pytest.raises(ValueError):
            run_training(small_cfg(seed=9), resume_from=tmp_path / "ckpt_0000010.tlc")

    def test_checkpoints_and_curves(self, tmp_path):
        run = run_training(small_cfg(), checkpoint_dir=tmp_path)
        assert [it for it, _ in run.checkpoints] == [0, 10, 20, 30]
        assert len(run.checkpoint_paths) == 4
        loss_csv, acc_csv = run.write_curves(tmp_path)
        lines = loss_csv.read_text().splitlines()
        assert lines[0] == "iteration,loss" and len(lines) == 31
        assert acc_csv.read_text().startswith("iteration,pair_class,accuracy\n")

    def test_divergence(self, tmp_path):
        cfg = small_cfg(learning_rate=1e300, iterations=50)
        with pytest.raises(TrainingDiverged):
            run_training(cfg, checkpoint_dir=tmp_path)
        assert (tmp_path / "diverged.tlc").exists()


class TestTransfer:
    def test_frozen_forbids_updates(self):
        run = run_training(small_cfg(regime="linreg_pretrain", iterations=5))
        model = transfer_eval_setup(run)
        before = model.params_.copy()
        X, y = EpisodeSampler("iwl", rng=make_rng(0), fixed_hierarchy=run.hierarchy).batch(4) \
            if run.hierarchy else EpisodeSampler("icl_adjacent", rng=make_rng(0)).batch(4)
        with pytest.raises(RuntimeError):
            model.fit(X, y)
        with pytest.raises(RuntimeError):
            model.partial_fit(X, y)
        assert model.params_.equal(before)
        assert model.predict(X).shape == (4,)

    def test_dimension_mismatch(self):
        run = run_training(small_cfg(regime="linreg_pretrain", iterations=2))
        with pytest.raises(ValueError):
            transfer_eval_setup(run, P=32, D=128)


class TestEstimator:
    def test_get_params_and_fit(self):
        est = AttentionOnlyTransformer(n_heads=2, max_iter=5, batch_size=4, random_state=0)
        assert est.get_params()["n_heads"] == 2
        X, y = EpisodeSampler("icl_adjacent", rng=make_rng(1)).batch(8)
        est.fit(X, y)
        assert est.n_iter_ == 5 and len(est.loss_curve_) == 5
        assert est.transform(X).shape == (8, 96)
        assert set(np.unique(est.predict_sign(X))) <= {-1, 1}

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            AttentionOnlyTransformer().predict(np.zeros((1, 3, 4)))

    def test_frozen_copy_predicts_identically(self):
        est = AttentionOnlyTransformer(n_heads=2, max_iter=2, batch_size=4, random_state=0)
        X, y = EpisodeSampler("icl_adjacent", rng=make_rng(1)).batch(8)
        est.fit(X, y)
        np.testing.assert_array_equal(frozen(est).predict(X), est.predict(X))


def test_steepest_drop():
    from tilab.train import steepest_drop_iteration, window_losses
    losses = [1.0] * 30 + [0.5] * 10 + [0.1] * 10 + [0.09] * 10
    ends, means = window_losses(losses, 10)
    assert list(ends) == [10, 20, 30, 40, 50, 60]
    assert steepest_drop_iteration(losses, 10) == 40
    with pytest.raises(ValueError):
        steepest_drop_iteration([1.0] * 5, 10)
