import numpy as np
import pytest

from amerecon.phantom import (AcquisitionSpec, CoilModel, PhantomSpec, Tube, coil_values,
                              disc_kspace, make_trajectory, render_truth, simulate_series,
                              support_mask, synth_coils, tube_centers)


def spoke_angles(traj):
    k = traj.samples.reshape(traj.spokes, traj.samples_per_spoke, 2)[:, -1]
    return np.rad2deg(np.arctan2(k[:, 1], k[:, 0])) % 360


class TestTrajectory:
    acq = AcquisitionSpec(base_resolution=32)

    def test_spacing_and_interleave_offset(self):
        a0 = spoke_angles(make_trajectory(self.acq, 0))
        a1 = spoke_angles(make_trajectory(self.acq, 1))
        assert np.allclose(np.diff(np.sort(a0)), 40.0)
        assert np.allclose(np.sort(a1) - np.sort(a0), 8.0)

    def test_period_five(self):
        t0, t5 = make_trajectory(self.acq, 2), make_trajectory(self.acq, 7)
        assert np.array_equal(t0.samples, t5.samples)
        assert not np.array_equal(t0.spoke_times, t5.spoke_times)

    def test_union_of_interleaves(self):
        ang = np.concatenate([spoke_angles(make_trajectory(self.acq, t)) for t in range(5)])
        ang = np.sort(np.round(ang, 9) % 360)
        assert len(np.unique(ang)) == 45
        assert np.allclose(np.diff(ang), 8.0)

    def test_readout_and_times(self):
        tr = make_trajectory(self.acq, 3)
        assert tr.samples_per_spoke == 64
        r = np.hypot(*tr.samples.T)
        assert r.max() == pytest.approx(0.5) and np.all(tr.samples >= -0.5) and np.all(tr.samples < 0.5 + 1e-12)
        assert np.allclose(tr.spoke_times, (27 + np.arange(9)) * 2.28e-3)


class TestDisc:
    def test_dc_is_area(self):
        assert disc_kspace((3.0, -2.0), 4.0, 2.5, np.zeros(2)) == pytest.approx(2.5 * np.pi * 16)

    def test_hermitian(self, rng):
        k = rng.uniform(-0.5, 0.5, (20, 2))
        a = disc_kspace((1.5, -0.7), 3.0, 1.0, k)
        b = disc_kspace((1.5, -0.7), 3.0, 1.0, -k)
        assert np.allclose(a, np.conj(b))

    def test_against_quadrature(self, rng):
        r, c = 2.0, np.array([0.4, -0.3])
        # Gauss-Legendre in radius, periodic trapezoid in angle
        xr, wr = np.polynomial.legendre.leggauss(64)
        rad, wr = (xr + 1) * r / 2, wr * r / 2
        th = np.arange(256) * 2 * np.pi / 256
        rr, tt = np.meshgrid(rad, th, indexing="ij")
        w = (wr * rad)[:, None] * (2 * np.pi / 256)
        px, py = c[0] + rr * np.cos(tt), c[1] + rr * np.sin(tt)
        for k in rng.uniform(-0.5, 0.5, (6, 2)):
            quad = np.sum(w * np.exp(-2j * np.pi * (k[0] * px + k[1] * py)))
            assert abs(disc_kspace(c, r, 1.0, k) - quad) < 1e-5

    def test_radius_checked(self):
        with pytest.raises(ValueError):
            disc_kspace((0, 0), 0.0, 1.0, np.zeros(2))


class TestCoils:
    def test_wide_coil_is_flat(self):
        m = synth_coils(CoilModel(((0.0, 0.0),), width=1e6), 16)
        assert np.allclose(np.abs(m), 1.0)

    def test_ring_covers_fov(self):
        m = synth_coils(CoilModel.ring(), 32)
        assert m.shape == (8, 32, 32)
        assert np.min(np.sum(np.abs(m) ** 2, axis=0)) > 0

    def test_no_phase_gives_real_nonnegative(self):
        m = synth_coils(CoilModel.ring(phase=0.0), 16)
        assert np.allclose(m.imag, 0) and np.all(m.real >= 0)

    def test_validation(self):
        with pytest.raises(ValueError):
            CoilModel((), 0.4)
        with pytest.raises(ValueError):
            CoilModel(((0, 0),), width=0)

    def test_values_at_center(self):
        v = coil_values(CoilModel(((0.1, 0.0),), width=0.2), np.array([0.1, 0.0]))
        assert v[0] == pytest.approx(1.0)


def _acq(**kw):
    base = dict(base_resolution=32, frames=6, noise_sigma=0.0)
    base.update(kw)
    return AcquisitionSpec(**base)


class TestSimulation:
    def test_static_series_repeats(self):
        frames, _ = simulate_series(PhantomSpec(rotation_hz=0.0), CoilModel.ring(count=2), _acq())
        assert np.allclose(frames[0].samples, frames[5].samples, rtol=0, atol=1e-12)

    def test_uniform_coil_is_exact(self):
        ph = PhantomSpec(tubes=(Tube(0.0, 10.0, 1.5),), rotation_hz=0.0)
        acq = _acq(frames=1)
        frames, _ = simulate_series(ph, CoilModel.uniform(), acq)
        px = ph.fov / acq.base_resolution
        expect = disc_kspace((0.0, 0.0), 10.0 / px, 1.5, frames[0].trajectory.samples)
        assert np.array_equal(frames[0].samples[0], expect)

    def test_dc_equals_integral(self):
        ph = PhantomSpec(rotation_hz=0.0)
        acq = _acq(frames=1)
        frames, _ = simulate_series(ph, CoilModel.uniform(), acq)
        ns = acq.samples_per_spoke
        dc = frames[0].samples[0, ns // 2]
        px = ph.fov / acq.base_resolution
        integral = sum(tb.amplitude * np.pi * (tb.tube_radius / px) ** 2 for tb in ph.tubes)
        assert abs(dc - integral) < 1e-10

    def test_hermitian_pairs_real_coils(self):
        frames, _ = simulate_series(PhantomSpec(rotation_hz=0.0), CoilModel.ring(count=3, phase=0.0),
                                    _acq(frames=1))
        fr = frames[0]
        ns = fr.trajectory.samples_per_spoke
        s = fr.samples.reshape(3, -1, ns)
        assert np.allclose(s[:, :, 1:], np.conj(s[:, :, :0:-1]), atol=1e-10)

    def test_seed_reproducibility(self):
        acq = _acq(noise_sigma=1e-2, frames=2, seed=5)
        a, _ = simulate_series(PhantomSpec(), CoilModel.ring(count=2), acq)
        b, _ = simulate_series(PhantomSpec(), CoilModel.ring(count=2), acq)
        c, _ = simulate_series(PhantomSpec(), CoilModel.ring(count=2), _acq(noise_sigma=1e-2, frames=2, seed=6))
        assert np.array_equal(a[1].samples, b[1].samples)
        assert not np.array_equal(a[1].samples, c[1].samples)

    def test_rotation_per_spoke(self):
        ph = PhantomSpec()
        tr = make_trajectory(AcquisitionSpec(), 0)
        c = tube_centers(ph, tr.spoke_times)[0]
        step = np.diff(np.rad2deg(np.arctan2(c[:, 1], c[:, 0])))
        assert np.allclose(step, 360 * 1.0 * 2.28e-3)

    def test_truth_and_support(self):
        ph = PhantomSpec()
        truth = render_truth(ph, CoilModel.uniform(), 64, 0.0)
        mask = support_mask(ph, 64, 0.0)
        assert truth[mask].mean() > 0.8 and truth[~mask].mean() < 0.05
        assert mask.sum() == pytest.approx(3 * np.pi * (5 / 4) ** 2, rel=0.5)

    def test_toggle_moves_only_on_frames(self):
        ph = PhantomSpec(toggle_shift=(0.0, 8.0))
        fd = 1.0
        c = tube_centers(ph, np.arange(10) + 0.5, fd)[0]
        moved = c[:, 1] != c[0, 1]
        assert list(np.flatnonzero(moved)) == [2, 3, 7, 8]

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            PhantomSpec(tubes=(Tube(130.0),))
        with pytest.raises(ValueError):
            AcquisitionSpec(base_resolution=31)
        with pytest.raises(ValueError):
            AcquisitionSpec(noise_sigma=-1)
