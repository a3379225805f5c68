"""Model forward semantics: ISG, product block, highway, rollout, inference."""

import numpy as np
import pytest

from percnn import autodiff as ad
from percnn import gridops, solver
from percnn.autodiff import Tape
from percnn.errors import BlowUpError
from percnn.fields import Field, GridSpec, Trajectory, downsample, interpolate
from percnn.model import (
    HighwayConfig,
    IsgConfig,
    ModelConfig,
    PercnnModel,
    PiBlockConfig,
    frozen_derivative_tags,
    predict,
    rollout,
)

from helpers import fd_check, hand_set_gs_model, passthrough_isg_params, random_field


def small_cfg(fine=(17, 17), coarse=(9, 9), dx=0.1, n_layers=2, n_channels=3,
              k=1, highway=True, dt=0.05, isg_h=3, isg_k=3):
    return ModelConfig(
        channels=2,
        fine=GridSpec(fine, dx),
        coarse=GridSpec(coarse, dx * 2),
        dt=dt,
        pi=PiBlockConfig(
            n_layers=n_layers,
            n_channels=n_channels,
            filter_sizes=(k,) * n_layers,
            biases=(True,) * n_layers,
        ),
        isg=IsgConfig(hidden_channels=isg_h, filter_size=isg_k),
        highway=HighwayConfig(
            enabled=highway,
            lower=(0.0, 0.0) if highway else (),
            upper=(0.2, 0.1) if highway else (),
        ),
    )


class TestIsg:
    def test_zeroed_hidden_head_gives_interpolation(self):
        rng = np.random.default_rng(60)
        model = PercnnModel.build(small_cfg(), seed=1)
        passthrough_isg_params(model)
        coarse = random_field(rng, model.cfg.coarse)
        tape = Tape()
        out = model.bind(tape).isg_forward(coarse)
        expect = interpolate(coarse, model.cfg.fine)
        assert np.array_equal(out.value, expect.data)

    def test_output_shape(self):
        rng = np.random.default_rng(61)
        model = PercnnModel.build(small_cfg(), seed=2)
        coarse = random_field(rng, model.cfg.coarse)
        out = model.bind(Tape()).isg_forward(coarse)
        assert out.value.shape == (2, 17, 17)

    def test_gradients_reach_all_isg_weights(self):
        rng = np.random.default_rng(62)
        model = PercnnModel.build(small_cfg(), seed=3)
        coarse = random_field(rng, model.cfg.coarse)
        tape = Tape()
        bound = model.bind(tape)
        out = bound.isg_forward(coarse)
        probe = tape.constant(rng.standard_normal(out.value.shape))
        tape.backward(ad.sum_all(ad.hadamard(out, probe)))
        for name, t in bound.p.items():
            if name.startswith("isg."):
                assert np.abs(t.grad).max() > 0, f"no gradient reached {name}"

    def test_grid_mismatch_rejected(self):
        rng = np.random.default_rng(63)
        model = PercnnModel.build(small_cfg(), seed=4)
        wrong = random_field(rng, GridSpec((7, 7), 0.2))
        with pytest.raises(ValueError):
            model.bind(Tape()).isg_forward(wrong)


class TestPiBlock:
    def test_two_identity_layers_square_the_channel(self):
        cfg = small_cfg(n_layers=2, n_channels=1, highway=False)
        model = PercnnModel.build(cfg, seed=5)
        for l in (1, 2):
            model.params[f"pi.layer{l}.w"][:] = 0.0
            model.params[f"pi.layer{l}.b"][:] = 0.0
            model.params[f"pi.layer{l}.w"][0, 0] = 1.0  # feature = u
        model.params["pi.mix.w"][:] = 0.0
        model.params["pi.mix.w"][0, 0] = 0.7
        model.params["pi.mix.b"][:] = 0.0
        rng = np.random.default_rng(64)
        state_data = rng.standard_normal((2, 17, 17))
        tape = Tape()
        out = model.bind(tape).pi_block(tape.constant(state_data))
        np.testing.assert_allclose(out.value[0], 0.7 * state_data[0] ** 2, atol=1e-14)
        np.testing.assert_allclose(out.value[1], 0.0, atol=1e-14)

    def test_k1_output_is_local(self):
        rng = np.random.default_rng(65)
        model = PercnnModel.build(small_cfg(n_layers=3, n_channels=4, highway=False), seed=6)
        state = rng.standard_normal((2, 17, 17))
        tape = Tape()
        base = model.bind(tape).pi_block(tape.constant(state)).value
        bumped = state.copy()
        bumped[:, 8, 8] += 0.5
        tape2 = Tape()
        out = model.bind(tape2).pi_block(tape2.constant(bumped)).value
        diff = np.abs(out - base)
        assert diff[:, 8, 8].max() > 0
        diff[:, 8, 8] = 0.0
        assert diff.max() == 0.0


class TestRhsHat:
    def test_highway_disabled_equals_pi_block(self):
        rng = np.random.default_rng(66)
        model = PercnnModel.build(small_cfg(highway=False), seed=7)
        state = rng.standard_normal((2, 17, 17))
        tape = Tape()
        bound = model.bind(tape)
        a = bound.rhs_hat(tape.constant(state)).value
        tape2 = Tape()
        bound2 = model.bind(tape2)
        b = bound2.pi_block(tape2.constant(state)).value
        assert np.array_equal(a, b)

    def test_zeroed_pi_highway_is_scaled_laplacian(self):
        rng = np.random.default_rng(67)
        model = PercnnModel.build(small_cfg(), seed=8)
        for l in (1, 2):
            model.params[f"pi.layer{l}.w"][:] = 0.0
            model.params[f"pi.layer{l}.b"][:] = 0.0
        model.params["pi.mix.w"][:] = 0.0
        model.params["pi.mix.b"][:] = 0.0
        model.params["highway.theta"][:] = 0.0  # coeff = (0 + upper)/2
        mu = np.asarray(model.cfg.highway.upper) / 2.0
        state = random_field(rng, model.cfg.fine)
        tape = Tape()
        out = model.bind(tape).rhs_hat(tape.constant(state.data)).value
        lap = solver.laplacian(state).data
        assert np.array_equal(out, mu.reshape(2, 1, 1) * lap)

    def test_hand_set_gs_fixed_point(self):
        system = solver.gray_scott_2d()
        spec = GridSpec((16, 16), 0.01)
        model = hand_set_gs_model(system, spec, dt=0.5)
        state = np.stack([np.ones((16, 16)), np.zeros((16, 16))])
        tape = Tape()
        out = model.bind(tape).rhs_hat(tape.constant(state)).value
        assert np.abs(out).max() < 1e-12

    def test_hand_set_gs_matches_solver_rhs(self):
        system = solver.gray_scott_2d(mu_u=0.05, mu_v=0.02)
        spec = GridSpec((12, 12), 0.2)
        model = hand_set_gs_model(system, spec, dt=0.1)
        rng = np.random.default_rng(68)
        state = Field(spec, rng.uniform(0.0, 1.0, size=(2, 12, 12)))
        tape = Tape()
        out = model.bind(tape).rhs_hat(tape.constant(state.data)).value
        ref = solver.rhs(system, state).data
        np.testing.assert_allclose(out, ref, atol=1e-12)


class TestRollout:
    def test_zero_steps(self):
        rng = np.random.default_rng(69)
        model = PercnnModel.build(small_cfg(), seed=9)
        coarse = random_field(rng, model.cfg.coarse)
        frames = rollout(model, Tape(), coarse, 0)
        assert len(frames) == 1

    def test_euler_first_order_against_rk4(self):
        # hand-set exact operator: halving the model dt halves the rollout
        # error against a fine RK4 reference
        n, dx = 16, 0.2
        spec = GridSpec((n, n), dx)
        system = solver.gray_scott_2d(mu_u=0.05, mu_v=0.025)
        x = np.arange(n) * dx
        X, Y = np.meshgrid(x, x, indexing="ij")
        L = n * dx
        bump = np.sin(2 * np.pi * X / L) ** 2 * np.sin(2 * np.pi * Y / L) ** 2
        ic = Field(spec, np.stack([1.0 - 0.5 * bump, 0.25 * bump]))
        T = 1.6
        ref = solver.generate(system, ic, 0.0125, int(T / 0.0125),
                              record_every=int(T / 0.0125)).frames[-1].data

        def euler_err(dt):
            model = hand_set_gs_model(system, spec, dt=dt)
            frames = rollout(model, Tape(), ic, int(round(T / dt)))
            return np.abs(frames[-1].value - ref).max()

        ratio = euler_err(0.1) / euler_err(0.05)
        assert 1.7 < ratio < 2.3

    def test_shift_equivariance(self):
        rng = np.random.default_rng(70)
        cfg = small_cfg(fine=(14, 14), coarse=(7, 7), k=3, n_layers=2, n_channels=3)
        model = PercnnModel.build(cfg, seed=10)
        coarse = random_field(rng, cfg.coarse, scale=0.3)
        shifted = Field(cfg.coarse, np.roll(coarse.data, 2, axis=1))
        a = rollout(model, Tape(), coarse, 3)[-1].value
        b = rollout(model, Tape(), shifted, 3)[-1].value
        np.testing.assert_allclose(np.roll(a, 4, axis=1), b, atol=1e-10)

    def test_blow_up_reports_step(self):
        rng = np.random.default_rng(71)
        model = PercnnModel.build(small_cfg(highway=False, dt=1.0), seed=11)
        model.params["pi.mix.w"][:] = 1e8
        coarse = random_field(rng, model.cfg.coarse)
        with pytest.raises(BlowUpError) as exc:
            rollout(model, Tape(), coarse, 50)
        assert "step" in str(exc.value)


class TestPredict:
    def test_matches_rollout_bitwise(self):
        rng = np.random.default_rng(72)
        model = PercnnModel.build(small_cfg(k=3, n_layers=2), seed=12)
        coarse = random_field(rng, model.cfg.coarse, scale=0.2)
        frames = rollout(model, Tape(), coarse, 5)
        traj = predict(model, coarse, 5)
        assert traj.n_frames == 6
        assert traj.dt == model.cfg.dt
        for taped, plain in zip(frames, traj.frames):
            assert np.array_equal(taped.value, plain.data)

    def test_zero_steps_is_isg_output(self):
        rng = np.random.default_rng(73)
        model = PercnnModel.build(small_cfg(), seed=13)
        coarse = random_field(rng, model.cfg.coarse)
        traj = predict(model, coarse, 0)
        assert traj.n_frames == 1
        isg = model.bind(Tape()).isg_forward(coarse)
        assert np.array_equal(traj.frames[0].data, isg.value)


class TestPhysicsEmbedding:
    def test_highway_filter_is_not_trainable(self):
        model = PercnnModel.build(small_cfg(), seed=14)
        assert "highway.filter" not in model.params
        snapshot = model.lap_filter.copy()
        # simulate a training step touching every parameter
        for v in model.params.values():
            v += 0.1
        assert np.array_equal(model.lap_filter, snapshot)
        expect = gridops.diag_filter(gridops.laplacian_taps(2, model.cfg.fine.dx), 2)
        assert np.array_equal(model.lap_filter, expect)

    def test_coefficients_strictly_inside_bounds(self):
        model = PercnnModel.build(small_cfg(), seed=15)
        for theta in (-1e3, -30.0, 0.0, 30.0, 1e3):
            model.params["highway.theta"][:] = theta
            c = model.highway_coefficients()
            assert np.all(c > model.cfg.highway.lower)
            assert np.all(c < model.cfg.highway.upper)

    def test_parameter_count_scale(self):
        cfg = ModelConfig(
            channels=2,
            fine=GridSpec((101, 101), 0.01),
            coarse=GridSpec((26, 26), 0.04),
            dt=0.5,
            pi=PiBlockConfig(3, 8, (1, 1, 1), (True, True, True)),
            isg=IsgConfig(hidden_channels=16),
            highway=HighwayConfig(True, (0.0, 0.0), (6e-5, 6e-5)),
        )
        model = PercnnModel.build(cfg, seed=16)
        assert 500 <= model.num_parameters() <= 80000


class TestFrozenDerivativeLayer:
    def test_first_layer_features_are_derivatives(self):
        spec = GridSpec((16, 16), 0.1)
        cfg = ModelConfig(
            channels=2,
            fine=spec,
            coarse=spec,
            dt=0.01,
            pi=PiBlockConfig(
                n_layers=2,
                n_channels=4,
                filter_sizes=(5, 1),
                biases=(False, True),
                frozen_first=frozen_derivative_tags(2, 2),
            ),
            isg=IsgConfig(hidden_channels=2),
            highway=HighwayConfig(True, (0.0, 0.0), (0.01, 0.01)),
        )
        model = PercnnModel.build(cfg, seed=17)
        # make layer 2 the constant 1 so the product exposes layer-1 features
        model.params["pi.layer2.w"][:] = 0.0
        model.params["pi.layer2.b"][:] = 1.0
        model.params["pi.mix.w"][:] = 0.0
        model.params["pi.mix.w"][0, 0] = 1.0  # u_x
        model.params["pi.mix.w"][1, 3] = 1.0  # v_y
        model.params["pi.mix.b"][:] = 0.0
        rng = np.random.default_rng(74)
        state = random_field(rng, spec)
        tape = Tape()
        out = model.bind(tape).pi_block(tape.constant(state.data)).value
        np.testing.assert_allclose(out[0], solver.ddx(state, 0).data[0], atol=1e-13)
        np.testing.assert_allclose(out[1], solver.ddx(state, 1).data[1], atol=1e-13)

    def test_frozen_filter_has_no_parameter(self):
        spec = GridSpec((16, 16), 0.1)
        cfg = ModelConfig(
            channels=2, fine=spec, coarse=spec, dt=0.01,
            pi=PiBlockConfig(2, 4, (5, 1), (False, True),
                             frozen_first=frozen_derivative_tags(2, 2)),
            isg=IsgConfig(hidden_channels=2),
            highway=HighwayConfig(False),
        )
        model = PercnnModel.build(cfg, seed=18)
        assert "pi.layer1.w" not in model.params
        assert "pi.layer2.w" in model.params


class TestFullGradient:
    def test_two_step_rollout_gradient(self):
        # small model, 2-step rollout on a 17x17 grid: reverse gradients of a
        # probe loss match finite differences
        rng = np.random.default_rng(75)
        model = PercnnModel.build(small_cfg(), seed=19)
        coarse = random_field(rng, model.cfg.coarse, scale=0.4)
        probe = rng.standard_normal((2, 17, 17))

        def build(params):
            model.params.update(params)
            tape = Tape()
            bound = model.bind(tape)
            frames = []
            state = bound.isg_forward(coarse)
            frames.append(state)
            for _ in range(2):
                state = bound.euler_step(state)
                frames.append(state)
            loss = ad.sum_all(ad.hadamard(frames[-1], tape.constant(probe)))
            tape.backward(loss)
            return float(loss.value), {k: t.grad for k, t in bound.p.items()}

        fd_check(build, model.params, rtol=1e-5, probes=8, rng=rng)
