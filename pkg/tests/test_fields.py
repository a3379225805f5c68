"""Field container, padding, resampling, noise and interpolation contracts."""

import numpy as np
import pytest

from percnn.fields import (
    Dirichlet,
    Field,
    GridSpec,
    Neumann,
    PERIODIC,
    Trajectory,
    add_noise,
    crop,
    downsample,
    interpolate,
    pad,
)

from helpers import shared_frame_trajectory


def grid(*extents, dx=1.0):
    return GridSpec(tuple(extents), dx)


class TestTypes:
    def test_gridspec_validation(self):
        with pytest.raises(ValueError):
            GridSpec((10,), 0.1)  # 1D unsupported
        with pytest.raises(ValueError):
            GridSpec((10, 10), -1.0)
        with pytest.raises(ValueError):
            GridSpec((10, 0), 0.1)
        g = grid(8, 4, dx=0.25)
        assert g.domain_lengths == (2.0, 1.0)
        assert g.n_nodes == 32

    def test_field_shape_and_finiteness(self):
        g = grid(5, 5)
        with pytest.raises(ValueError):
            Field(g, np.zeros((5, 5)))  # missing channel axis
        bad = np.zeros((1, 5, 5))
        bad[0, 2, 2] = np.nan
        with pytest.raises(ValueError):
            Field(g, bad)
        f = Field(g, np.arange(25.0).reshape(1, 5, 5))
        assert f.channels == 1

    def test_trajectory_validation(self):
        g = grid(5, 5)
        f = Field.zeros(g, 2)
        with pytest.raises(ValueError):
            Trajectory((), 0.1)
        with pytest.raises(ValueError):
            Trajectory((f,), 0.0)
        other = Field.zeros(grid(6, 6), 2)
        with pytest.raises(ValueError):
            Trajectory((f, other), 0.1)
        t = Trajectory((f, f, f), 0.5, t0=1.0)
        assert np.allclose(t.times, [1.0, 1.5, 2.0])


class TestPad:
    def test_periodic_row_example(self):
        # 1D-like row [1,2,3] stored as a 3x1 grid: ghosts wrap torus-style.
        f = Field(grid(3, 1), np.array([[[1.0], [2.0], [3.0]]]))
        p = pad(f, 1, PERIODIC)
        assert p.spec.extents == (5, 3)
        assert list(p.data[0][:, 1]) == [3.0, 1.0, 2.0, 3.0, 1.0]

    def test_periodic_matches_modular_formula(self):
        rng = np.random.default_rng(3)
        f = Field(grid(6, 7), rng.standard_normal((2, 6, 7)))
        for w in (1, 2):
            p = pad(f, w, PERIODIC)
            for i in range(6 + 2 * w):
                for j in range(7 + 2 * w):
                    expect = f.data[:, (i - w) % 6, (j - w) % 7]
                    assert np.array_equal(p.data[:, i, j], expect)

    def test_periodic_commutes_with_cyclic_shift(self):
        rng = np.random.default_rng(4)
        f = Field(grid(6, 6), rng.standard_normal((1, 6, 6)))
        shifted = Field(f.spec, np.roll(f.data, 2, axis=1))
        lhs = pad(shifted, 2, PERIODIC).data
        # shifting the source then padding = looking up the torus at shifted
        # coordinates
        base = pad(f, 2, PERIODIC).data
        rhs = np.empty_like(lhs)
        for i in range(10):
            for j in range(10):
                rhs[:, i, j] = f.data[:, (i - 2 - 2) % 6, (j - 2) % 6]
        assert np.array_equal(lhs, rhs)
        assert np.array_equal(base[:, 2:8, 2:8], f.data)

    def test_dirichlet_ghosts(self):
        rng = np.random.default_rng(5)
        f = Field(grid(5, 5), rng.standard_normal((2, 5, 5)))
        p = pad(f, 1, Dirichlet((0.0, 3.5)))
        assert np.all(p.data[0, 0, :] == 0.0)
        assert np.all(p.data[1, 0, :] == 3.5)
        assert np.all(p.data[1, :, -1] == 3.5)
        assert np.array_equal(p.data[:, 1:-1, 1:-1], f.data)

    def test_neumann_constant_field(self):
        c = 2.25
        f = Field(grid(5, 5, dx=0.1), np.full((1, 5, 5), c))
        p = pad(f, 1, Neumann((0.0,)))
        assert np.all(p.data == c)
        g = 1.5
        p2 = pad(f, 1, Neumann((g,)))
        # ghost = mirror + 2*k*dx*g on every side
        assert np.allclose(p2.data[0, 0, 1:-1], c + 2 * 0.1 * g)
        assert np.allclose(p2.data[0, -1, 1:-1], c + 2 * 0.1 * g)
        assert np.allclose(p2.data[0, 1:-1, 0], c + 2 * 0.1 * g)

    def test_neumann_mirror_formula(self):
        rng = np.random.default_rng(6)
        f = Field(grid(7, 7, dx=0.5), rng.standard_normal((1, 7, 7)))
        g = 0.7
        p = pad(f, 2, Neumann((g,)))
        # along axis 0, interior columns: ghost ring k uses mirror node k
        for k in (1, 2):
            np.testing.assert_allclose(
                p.data[0, 2 - k, 2:-2], f.data[0, k, :] + 2 * k * 0.5 * g
            )
            np.testing.assert_allclose(
                p.data[0, 8 + k, 2:-2], f.data[0, 6 - k, :] + 2 * k * 0.5 * g
            )

    def test_pad_crop_identity(self):
        rng = np.random.default_rng(7)
        for extents in ((5, 8), (6, 6, 5)):
            f = Field(GridSpec(extents, 0.3), rng.standard_normal((2, *extents)))
            for w in (1, 2):
                assert np.array_equal(crop(pad(f, w, PERIODIC), w).data, f.data)

    def test_width_validation(self):
        f = Field.zeros(grid(5, 5), 1)
        with pytest.raises(ValueError):
            pad(f, 5, PERIODIC)
        with pytest.raises(ValueError):
            pad(f, 0, PERIODIC)
        with pytest.raises(ValueError):
            pad(f, 1, Dirichlet((0.0, 0.0)))  # channel mismatch


class TestDownsample:
    def test_paper_shapes_gs(self):
        # 2501 frames on 101x101 -> strides (4, 62) -> 41 frames on 26x26
        traj = shared_frame_trajectory(np.zeros((2, 101, 101)), grid(101, 101, dx=0.01), 2501, dt=0.5)
        out = downsample(traj, 4, 62)
        assert out.n_frames == 41
        assert out.spec.extents == (26, 26)
        assert out.spec.dx == pytest.approx(0.04)
        assert out.dt == pytest.approx(31.0)

    def test_paper_shapes_burgers(self):
        # first 401 frames of the Burgers run -> strides (2, 40) -> 11 on 51x51
        traj = shared_frame_trajectory(np.zeros((2, 101, 101)), grid(101, 101, dx=0.01), 401, dt=2.5e-4)
        out = downsample(traj, 2, 40)
        assert out.n_frames == 11
        assert out.spec.extents == (51, 51)

    def test_identity_strides(self):
        rng = np.random.default_rng(8)
        f = Field(grid(7, 7), rng.standard_normal((2, 7, 7)))
        traj = Trajectory((f, f), 0.1)
        out = downsample(traj, 1, 1)
        assert out.n_frames == 2
        assert np.array_equal(out.frames[0].data, f.data)

    def test_keeps_node_zero_and_values(self):
        rng = np.random.default_rng(9)
        data = rng.standard_normal((1, 11, 11))
        traj = shared_frame_trajectory(data, grid(11, 11), 5, dt=1.0)
        out = downsample(traj, 2, 2)
        assert out.n_frames == 3
        assert np.array_equal(out.frames[0].data[0], data[0, ::2, ::2])

    def test_composition(self):
        rng = np.random.default_rng(10)
        data = rng.standard_normal((1, 41, 41))
        traj = shared_frame_trajectory(data, grid(41, 41), 13, dt=1.0)
        once = downsample(downsample(traj, 2, 3), 2, 2)
        combined = downsample(traj, 4, 6)
        assert once.n_frames == combined.n_frames
        assert once.spec == combined.spec
        for a, b in zip(once.frames, combined.frames):
            assert np.array_equal(a.data, b.data)

    def test_too_coarse_errors(self):
        traj = shared_frame_trajectory(np.zeros((1, 9, 9)), grid(9, 9), 3)
        with pytest.raises(ValueError):
            downsample(traj, 3, 1)  # 3 nodes per axis < 5


class TestNoise:
    def test_level_zero_identity(self):
        rng = np.random.default_rng(11)
        data = rng.standard_normal((2, 6, 6))
        traj = shared_frame_trajectory(data, grid(6, 6), 3)
        out = add_noise(traj, 0.0, seed=1)
        for a, b in zip(out.frames, traj.frames):
            assert np.array_equal(a.data, b.data)

    def test_determinism(self):
        rng = np.random.default_rng(12)
        data = rng.standard_normal((2, 8, 8))
        traj = shared_frame_trajectory(data, grid(8, 8), 4)
        a = add_noise(traj, 0.1, seed=77)
        b = add_noise(traj, 0.1, seed=77)
        for fa, fb in zip(a.frames, b.frames):
            assert np.array_equal(fa.data, fb.data)
        c = add_noise(traj, 0.1, seed=78)
        assert not np.array_equal(a.frames[0].data, c.frames[0].data)

    def test_statistical_scale(self):
        # >= 1e6 samples per channel; empirical noise std within 2% of target
        rng = np.random.default_rng(13)
        spec = grid(101, 101)
        frames = tuple(
            # distinct frames so the trajectory has genuine per-channel spread
            rng.standard_normal((2, 101, 101)) * np.array([1.0, 3.0]).reshape(2, 1, 1)
            for _ in range(100)
        )
        traj = Trajectory(tuple(Field(spec, d) for d in frames), 1.0)
        stds = np.std(np.stack([f.data for f in traj.frames]), axis=(0, 2, 3))
        out = add_noise(traj, 0.1, seed=5)
        delta = np.stack([a.data - b.data for a, b in zip(out.frames, traj.frames)])
        assert delta[:, 0].size >= 1_000_000
        for c in range(2):
            measured = delta[:, c].std()
            assert abs(measured - 0.1 * stds[c]) < 0.02 * 0.1 * stds[c]
            assert abs(delta[:, c].mean()) < 3 * 0.1 * stds[c] / np.sqrt(delta[:, c].size)

    def test_negative_level_rejected(self):
        traj = shared_frame_trajectory(np.zeros((1, 5, 5)), grid(5, 5), 1)
        with pytest.raises(ValueError):
            add_noise(traj, -0.1, seed=0)


class TestInterpolate:
    def test_constant_field(self):
        f = Field(grid(6, 6, dx=0.5), np.full((2, 6, 6), 4.25))
        out = interpolate(f, grid(24, 24, dx=0.125))
        assert np.allclose(out.data, 4.25)

    def test_linear_ramp_midpoints(self):
        n = 8
        ramp = np.tile(np.arange(float(n)), (n, 1)).T[None]
        f = Field(grid(n, n, dx=1.0), ramp)
        out = interpolate(f, grid(2 * n, 2 * n, dx=0.5))
        # interior midpoints are neighbor means; the far edge wraps the torus
        for i in range(n - 1):
            assert out.data[0, 2 * i + 1, 0] == pytest.approx((ramp[0, i, 0] + ramp[0, i + 1, 0]) / 2)
        assert out.data[0, 2 * n - 1, 0] == pytest.approx((ramp[0, n - 1, 0] + ramp[0, 0, 0]) / 2)

    def test_sine_accuracy(self):
        x = np.arange(26) / 26.0
        f2d = np.sin(2 * np.pi * x)[:, None] * np.ones((1, 26))
        f = Field(grid(26, 26, dx=1.0 / 26), f2d[None])
        out = interpolate(f, grid(101, 101, dx=1.0 / 101))
        xf = np.arange(101) / 101.0
        exact = np.sin(2 * np.pi * xf)[:, None] * np.ones((1, 101))
        assert np.abs(out.data[0] - exact).max() < 0.02

    def test_exact_at_stride_subset_nodes(self):
        rng = np.random.default_rng(14)
        fine = grid(101, 101, dx=0.01)
        f = Field(fine, rng.standard_normal((2, 101, 101)))
        coarse = downsample(Trajectory((f,), 1.0), 4, 1).frames[0]
        up = interpolate(coarse, fine)
        assert np.array_equal(up.data[:, ::4, ::4], coarse.data)

    def test_trilinear(self):
        rng = np.random.default_rng(15)
        fine = GridSpec((9, 9, 9), 0.1)
        f = Field(fine, rng.standard_normal((2, 9, 9, 9)))
        coarse = downsample(Trajectory((f,), 1.0), 2, 1).frames[0]
        up = interpolate(coarse, fine)
        assert np.array_equal(up.data[:, ::2, ::2, ::2], coarse.data)

    def test_dimension_mismatch(self):
        f = Field.zeros(grid(6, 6), 1)
        with pytest.raises(ValueError):
            interpolate(f, GridSpec((6, 6, 6), 0.5))

    def test_refinement_only(self):
        f = Field.zeros(grid(8, 8, dx=0.1), 1)
        with pytest.raises(ValueError):
            interpolate(f, grid(4, 4, dx=0.2))
