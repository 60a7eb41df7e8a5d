"""
Galilean frames: phase shifts, transported states, potentials and cross-frame evolution.
"""

import numpy as np
import pytest

from errors import BoundaryDensityError, FrameClippingError, SuperluminalMotionError
from frames import (
    FrameMotion,
    compose_motions,
    phase_offset,
    phase_shift,
    proper_time_residue,
    tilde_grid,
    transform_state,
    transformed_potential,
    verify_symmetry,
)
from wavefield import Grid1D, decompose, gaussian_packet, harmonic_potential


def wrapped(angle):
    return np.angle(np.exp(1j * np.asarray(angle)))


class TestPhaseShift:
    def test_rest_frame(self):
        assert np.all(phase_shift(FrameMotion.rest(), np.linspace(-3, 3, 7), 0.7) == 0.0)

    def test_constant_velocity(self):
        x = np.linspace(-3, 3, 13)
        shift = phase_shift(FrameMotion.constant_velocity(1.5), x, 0.8)
        np.testing.assert_allclose(shift, 1.5 * x - 0.5 * 1.5**2 * 0.8, atol=1e-12)

    def test_constant_acceleration(self):
        x = np.linspace(-3, 3, 13)
        t = 0.9
        shift = phase_shift(FrameMotion.constant_acceleration(2.0), x, t)
        np.testing.assert_allclose(shift, 2.0 * x * t - 4.0 * t**3 / 6.0, atol=1e-12)

    def test_offset_starts_at_zero(self):
        assert phase_offset(FrameMotion.constant_velocity(3.0), 0.0) == 0.0

    def test_expression_motion_matches_preset(self):
        motion = FrameMotion.from_expression("t^2", step=1e-4)
        preset = FrameMotion.constant_acceleration(2.0)
        for t in (0.0, 0.3, 1.0):
            assert motion.xi_dot(t) == pytest.approx(preset.xi_dot(t), abs=1e-8)
            assert motion.xi_ddot(t) == pytest.approx(2.0, abs=1e-6)
        assert phase_offset(motion, 1.0) == pytest.approx(phase_offset(preset, 1.0), abs=1e-8)


class TestTransformState:
    @pytest.fixture
    def packet(self, wide_grid):
        return gaussian_packet(wide_grid, 0.0, 1.0, 0.5)

    def test_identity_at_origin(self, packet):
        moved = transform_state(packet, FrameMotion.constant_acceleration(2.0), 0.0)
        np.testing.assert_allclose(moved.amplitudes, packet.amplitudes, atol=1e-14)
        assert moved.grid == packet.grid

    def test_density_transported_pointwise(self, packet):
        motion = FrameMotion.constant_velocity(1.0)
        moved = transform_state(packet, motion, 0.37)
        assert moved.grid == tilde_grid(packet.grid, motion, 0.37)
        np.testing.assert_allclose(moved.density, packet.density, rtol=1e-12, atol=1e-16)
        assert moved.norm() == pytest.approx(1.0, abs=1e-12)

    def test_velocity_shifts_by_frame_velocity(self, packet):
        motion = FrameMotion.constant_acceleration(2.0)
        t = 0.6
        before = decompose(packet)
        after = decompose(transform_state(packet, motion, t))
        on = before.velocity_mask
        np.testing.assert_allclose(after.v[on], before.v[on] + motion.xi_dot(t), atol=1e-8)

    def test_composition_up_to_global_phase(self, packet):
        first = FrameMotion.constant_velocity(0.5)
        second = FrameMotion.constant_acceleration(1.0)
        t = 0.8
        grid = packet.grid
        stepwise = transform_state(transform_state(packet, first, t, target=grid), second, t, target=grid)
        direct = transform_state(packet, compose_motions(first, second), t, target=grid)
        on = direct.density >= 1e-8 * direct.density.max()
        np.testing.assert_allclose(stepwise.density, direct.density, atol=1e-12)
        offset = wrapped(np.angle(stepwise.amplitudes[on]) - np.angle(direct.amplitudes[on]))
        assert np.ptp(wrapped(offset - offset[0])) <= 1e-8

    def test_clipping(self):
        grid = Grid1D.spanning(-10.0, 10.0, 0.05)
        psi = gaussian_packet(grid, 3.0, 1.0)
        with pytest.raises(FrameClippingError):
            transform_state(psi, FrameMotion.constant_velocity(5.0), 1.0, target=grid)


class TestTransformedPotential:
    def test_boost_leaves_potential(self):
        x = np.linspace(-2, 2, 9)
        v = transformed_potential(harmonic_potential(), FrameMotion.constant_velocity(1.0))
        np.testing.assert_allclose(v(x, 0.0), 0.5 * x**2)

    def test_acceleration_adds_linear_term(self):
        x = np.linspace(-2, 2, 9)
        v = transformed_potential(None, FrameMotion.constant_acceleration(2.0))
        np.testing.assert_allclose(v(x, 0.4), -2.0 * x)

    def test_harmonic_with_acceleration(self):
        x = np.linspace(-2, 2, 9)
        t = 0.5
        v = transformed_potential(harmonic_potential(), FrameMotion.constant_acceleration(2.0))
        np.testing.assert_allclose(v(x, t), 0.5 * (x - t**2) ** 2 - 2.0 * x, atol=1e-14)


class TestVerifySymmetry:
    def test_rest_frame_is_exact(self, wide_grid):
        psi = gaussian_packet(wide_grid, 0.0, 1.0)
        report = verify_symmetry(psi, None, FrameMotion.rest(), dt=0.01, steps=20, checkpoint_every=5)
        assert report.max_density_residual <= 1e-14
        assert report.max_phase_residual <= 1e-12

    def test_constant_velocity(self, wide_grid):
        psi = gaussian_packet(wide_grid, 0.0, 1.0)
        report = verify_symmetry(psi, None, FrameMotion.constant_velocity(1.0), dt=1e-3, steps=1000, checkpoint_every=100)
        assert report.times[-1] == pytest.approx(1.0)
        assert report.max_density_residual <= 1e-6
        assert report.max_phase_residual <= 1e-6

    def test_constant_acceleration(self, wide_grid):
        psi = gaussian_packet(wide_grid, 0.0, 1.0)
        report = verify_symmetry(psi, None, FrameMotion.constant_acceleration(2.0), dt=1e-3, steps=1000, checkpoint_every=100)
        assert report.max_density_residual <= 1e-6
        assert report.max_phase_residual <= 1e-6
        assert set(report.to_dict()) == {"motion", "times", "density_residual", "phase_residual", "potentials_used"}

    def test_harmonic_in_accelerated_frame(self, wide_grid):
        psi = gaussian_packet(wide_grid, 1.0, 0.8)
        report = verify_symmetry(
            psi, harmonic_potential(), FrameMotion.constant_acceleration(1.0), dt=1e-3, steps=500, checkpoint_every=100
        )
        assert report.max_density_residual <= 1e-5

    def test_packet_reaching_a_dirichlet_wall_is_rejected(self):
        grid = Grid1D.spanning(-10.0, 10.0, 0.05)
        psi = gaussian_packet(grid, 6.0, 0.5, 10.0)
        with pytest.raises(BoundaryDensityError):
            verify_symmetry(psi, None, FrameMotion.rest(), dt=1e-3, steps=500, checkpoint_every=100)


class TestProperTime:
    def test_at_rest(self):
        residue = proper_time_residue(FrameMotion.rest(), 1.0, 1.0)
        assert residue.lhs == pytest.approx(0.0, abs=1e-14)
        assert residue.rhs == pytest.approx(0.0, abs=1e-14)

    def test_relative_gap(self):
        residue = proper_time_residue(FrameMotion.constant_velocity(0.1), 1.0, 1.0)
        expected = 0.1**2 / 4.0
        assert 0.5 * expected <= residue.gap / residue.lhs <= 2.0 * expected

    def test_quartic_scaling(self):
        slow = proper_time_residue(FrameMotion.constant_velocity(0.05), 1.0, 1.0)
        fast = proper_time_residue(FrameMotion.constant_velocity(0.1), 1.0, 1.0)
        assert fast.gap / slow.gap == pytest.approx(16.0, rel=0.25)

    def test_accelerating_frame_scaling(self):
        slow = proper_time_residue(FrameMotion.constant_acceleration(0.1), 1.0, 1.0)
        fast = proper_time_residue(FrameMotion.constant_acceleration(0.2), 1.0, 1.0)
        assert fast.gap / slow.gap == pytest.approx(16.0, rel=0.25)

    def test_superluminal(self):
        with pytest.raises(SuperluminalMotionError):
            proper_time_residue(FrameMotion.constant_velocity(2.0), 1.0, 1.0)
