import json

import numpy as np
import pytest
import torch
from pydantic import ValidationError

from condot.autodiff import finite_diff_check
from condot.datasets import simulate_action_task, simulate_covariate_task, simulate_scalar_task
from condot.errors import ConfigError, NonFiniteLoss
from condot.metrics import sinkhorn
from condot.networks import AnchorSet, NetSpec, init_icnn, init_picnn, min_z_weight, project_convex, transport
from condot.training import (TrainConfig, TrainState, build_state, dual_losses, f_loss, g_loss, history_csv,
                             primal_loss, read_history_csv, train)

SMALL = dict(hidden=[8, 8], batch_size=32)


def scalar_pairs(n=100):
    return simulate_scalar_task(2, n, [0.0, 0.5, 1.0], seed=0).pairs


class TestLosses:
    def test_identity_potentials(self):
        # f = g = |x|^2/2: grad g = x, so loss_f = E|y|^2/2 - E|x|^2/2 and loss_g = -E|x|^2/2
        f = init_icnn(NetSpec("icnn", 2), "identity", seed=0)
        g = init_icnn(NetSpec("icnn", 2), "identity", seed=1)
        rng = np.random.default_rng(0)
        X, Y = rng.standard_normal((64, 2)), rng.standard_normal((64, 2)) * 2
        lf, lg = (v.detach() for v in dual_losses(f, g, X, Y))
        hx, hy = 0.5 * np.mean(np.sum(X ** 2, 1)), 0.5 * np.mean(np.sum(Y ** 2, 1))
        assert float(lf) == pytest.approx(hy - hx, rel=1e-3)
        assert float(lg) == pytest.approx(-hx, rel=1e-3)

    def test_penalty_enters_g_loss(self):
        f = init_icnn(NetSpec("icnn", 2), "identity")
        g = init_icnn(NetSpec("icnn", 2, constraint_mode="penalty"), "identity")
        X = np.random.default_rng(1).standard_normal((16, 2))
        base = float(g_loss(f, g, X, X, lam=1.0).detach())
        with torch.no_grad():
            g.Wz1[0, 0] = -1.0
        with_pen, without = (float(g_loss(f, g, X, X, lam=lam).detach()) for lam in (3.0, 0.0))
        assert with_pen == pytest.approx(without + 3.0)
        assert np.isfinite(base)

    def test_primal_matches_sinkhorn(self):
        g = init_icnn(NetSpec("icnn", 2), "identity")
        rng = np.random.default_rng(2)
        X, Y = rng.standard_normal((40, 2)), rng.standard_normal((40, 2)) + 1
        ref = sinkhorn(transport(g, X).numpy(), Y, 0.1).cost
        assert float(primal_loss(g, X, Y, eps=0.1).detach()) == pytest.approx(ref, rel=1e-10)

    def test_f_loss_holds_g_fixed(self):
        f = init_icnn(NetSpec("icnn", 2), "identity")
        g = init_icnn(NetSpec("icnn", 2), "identity")
        X = np.random.default_rng(3).standard_normal((8, 2))
        f_loss(f, g, X, X).backward()
        assert all(p.grad is None for p in g.parameters())

    def test_picnn_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        anchors = AnchorSet(rng.standard_normal((3, 3)))
        f = init_picnn(NetSpec("picnn", 2, 3, (16, 16)), anchors, "identity", seed=0)
        g = init_picnn(NetSpec("picnn", 2, 3, (16, 16), constraint_mode="penalty"), anchors, "identity", seed=1)
        # move away from the initialisation, where many gradients vanish to round-off level
        torch.manual_seed(0)
        with torch.no_grad():
            for p in list(f.parameters()) + list(g.parameters()):
                p.add_(0.1 * torch.randn_like(p))
        project_convex(f)
        X, Y = rng.standard_normal((32, 2)), rng.standard_normal((32, 2)) + 1
        c = torch.as_tensor(np.tile(rng.standard_normal(3), (32, 1)))
        # f's loss treats g as a constant, so it is checked against f's parameters only
        cases = ((lambda: f_loss(f, g, X, Y, c), f), (lambda: g_loss(f, g, X, Y, c), g))
        for loss, net in cases:
            rep = finite_diff_check(loss, list(net.named_parameters()), n_probe=16)
            assert rep.max_rel_err <= 1e-4, rep.worst_coordinate


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.lam == 1.0 and cfg.train_freq_f == 10 and cfg.betas == (0.5, 0.9)
        assert cfg.lr_theta == 1e-4 and cfg.eps == 0.1

    def test_rejects_unknown_keys(self):
        with pytest.raises(ValidationError):
            TrainConfig(learning_rate=0.1)

    def test_vanilla_only_for_icnn(self):
        with pytest.raises(ValidationError):
            TrainConfig(init="vanilla")
        TrainConfig(init="vanilla", model="icnn")


class TestTraining:
    def test_schedule_and_history(self):
        state = train(scalar_pairs(), TrainConfig(steps=25, **SMALL))
        names = [h[2] for h in state.history]
        assert state.step == 25
        assert [i for i, n in enumerate(names) if n == "f"] == [0, 10, 20]
        assert all(np.isfinite(h[3]) for h in state.history)

    def test_clamp_keeps_f_convex(self):
        state = train(scalar_pairs(), TrainConfig(steps=30, lr_theta=1e-2, **SMALL))
        assert min_z_weight(state.f) >= 0.0

    def test_deterministic(self):
        pairs = scalar_pairs()
        a = train(pairs, TrainConfig(steps=15, seed=3, **SMALL))
        b = train(pairs, TrainConfig(steps=15, seed=3, **SMALL))
        assert json.dumps(a.to_checkpoint(), sort_keys=True) == json.dumps(b.to_checkpoint(), sort_keys=True)

    def test_resume_equals_uninterrupted(self, tmp_path):
        pairs = simulate_action_task(2, 80, 3, 2, seed=0).pairs
        cfg = TrainConfig(steps=24, combinator="deepset", **SMALL)
        full = train(pairs, cfg)
        part = train(pairs, cfg.model_copy(update={"steps": 11}))
        part.save(tmp_path / "s.json")
        resumed = TrainState.load(tmp_path / "s.json")
        resumed.config = cfg
        resumed = train(pairs, state=resumed)
        assert resumed.history == full.history
        np.testing.assert_array_equal(resumed.g.params().values, full.g.params().values)

    def test_checkpoints_written(self, tmp_path):
        train(scalar_pairs(), TrainConfig(steps=10, checkpoint_every=5, **SMALL), checkpoint_dir=tmp_path)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["state.json", "state_000005.json",
                                                               "state_000010.json"]
        assert TrainState.load(tmp_path / "state_000005.json").step == 5

    def test_primal_mode(self):
        state = train(scalar_pairs(50), TrainConfig(steps=3, mode="primal", **SMALL))
        assert state.f is None
        assert [h[2] for h in state.history] == ["primal"] * 3

    def test_icnn_ignores_context(self):
        state = build_state(simulate_covariate_task(2, 60, 3, seed=0).pairs, TrainConfig(model="icnn", **SMALL))
        X = np.random.default_rng(0).standard_normal((5, 2))
        p0, p1 = simulate_covariate_task(2, 60, 3, seed=0).pairs[:2]
        np.testing.assert_array_equal(state.transport(X, p0.context), state.transport(X, p1.context))

    def test_encoder_learns_with_condot(self):
        pairs = simulate_covariate_task(2, 60, 3, seed=0).pairs
        state = build_state(pairs, TrainConfig(**SMALL))
        before = state.encoder.table.detach().clone()
        train(pairs, state=state.__class__(**{**state.__dict__, "config": state.config.model_copy(
            update={"steps": 5})}))
        assert not torch.equal(before, state.encoder.table.detach())

    def test_non_finite_loss_stops_and_saves(self, tmp_path):
        pairs = scalar_pairs(20)
        state = build_state(pairs, TrainConfig(steps=50, batch_size=20, hidden=[4]))
        for p in pairs:
            p.target[:] = np.nan
        with pytest.raises(NonFiniteLoss):
            train(pairs, state=state, checkpoint_dir=tmp_path)
        assert TrainState.load(tmp_path / "state.json").step == 0

    def test_needs_pairs(self):
        with pytest.raises(ConfigError):
            build_state([], TrainConfig())


class TestHistoryCsv:
    def test_round_trip(self, tmp_path):
        hist = [(1, "p000", "f", 0.25), (2, "p001", "g", -1.5e-3)]
        (tmp_path / "h.csv").write_text(history_csv(hist))
        assert read_history_csv(tmp_path / "h.csv") == hist
