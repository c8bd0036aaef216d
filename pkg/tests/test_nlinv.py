import numpy as np
import pytest

from amerecon.core import SobolevConfig, normalize_dataset, Unknowns, inner_product, sobolev_weight_apply
from amerecon.nlinv import (BilinearModel, IrgnmConfig, MultiCoilFrame, ReconstructionError,
                            cg_normal_solve, compose_image, conjugate_gradient, forward, irgnm,
                            jacobian_adjoint_apply, jacobian_apply)
from amerecon.nufft import nufft_forward

from conftest import crandn, dot_test_error, radial_traj, random_frame, random_unknowns

SOB = SobolevConfig()


@pytest.fixture
def setup(rng, tbl):
    traj = radial_traj(7, 32)
    frame = random_frame(rng, traj, 3)
    x = random_unknowns(rng, 16, 3)
    return frame, x, tbl


class TestForward:
    def test_matches_definition(self, setup):
        frame, x, tbl = setup
        wc = sobolev_weight_apply(x.coils[0], SOB)
        expect = nufft_forward(x.density * wc, frame.trajectory, tbl)
        assert np.allclose(forward(x, frame, SOB, tbl), expect)

    def test_gauge_invariance(self, setup):
        frame, x, tbl = setup
        g = 2.0 - 0.5j
        y = Unknowns(x.density * g, x.coils / g, x.offsets)
        assert np.allclose(forward(x, frame, SOB, tbl), forward(y, frame, SOB, tbl))

    def test_bilinear(self, setup):
        frame, x, tbl = setup
        a = forward(x, frame, SOB, tbl)
        b = forward(Unknowns(2 * x.density, 3 * x.coils, x.offsets), frame, SOB, tbl)
        assert np.allclose(b, 6 * a)

    def test_offset_check(self, rng, setup):
        frame, _, tbl = setup
        with pytest.raises(ValueError):
            forward(random_unknowns(rng, 16, 3, (0, 1)), frame, SOB, tbl)


class TestJacobian:
    def test_finite_difference(self, rng, setup):
        frame, x, tbl = setup
        h = random_unknowns(rng, 16, 3)
        jh = jacobian_apply(x, h, frame, SOB, tbl)
        for eps in (1e-3, 1e-4):
            fd = (forward(x + eps * h, frame, SOB, tbl) - forward(x - eps * h, frame, SOB, tbl)) / (2 * eps)
            # the model is bilinear so central differences are exact up to rounding
            assert np.linalg.norm(fd - jh) / np.linalg.norm(jh) < 1e-8

    def test_second_order_remainder(self, rng, setup):
        frame, x, tbl = setup
        h = random_unknowns(rng, 16, 3)
        f0, jh = forward(x, frame, SOB, tbl), jacobian_apply(x, h, frame, SOB, tbl)
        errs = []
        for eps in (1e-1, 1e-2):
            errs.append(np.linalg.norm(forward(x + eps * h, frame, SOB, tbl) - f0 - eps * jh))
        assert errs[1] / errs[0] == pytest.approx(1e-2, rel=1e-3)

    def test_adjoint_dot_test(self, rng, setup):
        frame, x, tbl = setup
        for _ in range(3):
            h = random_unknowns(rng, 16, 3)
            r = crandn(rng, 3, frame.trajectory.n_samples)
            lhs = np.vdot(r, jacobian_apply(x, h, frame, SOB, tbl))
            rhs = inner_product(jacobian_adjoint_apply(x, r, frame, SOB, tbl), h)
            assert dot_test_error(lhs, rhs) < 1e-10

    def test_normal_matches_composition(self, rng, tbl):
        from amerecon.nufft import build_kb_table
        tbl2 = build_kb_table(oversampling=2.0)
        frame = random_frame(rng, radial_traj(9, 32), 2)
        x, h = random_unknowns(rng, 16, 2), random_unknowns(rng, 16, 2)
        lin = BilinearModel([frame], (0,), SOB, tbl2).linearize(x)
        a = lin.normal(h).flatten()
        b = lin.adjoint(lin.apply(h)).flatten()
        assert np.linalg.norm(a - b) / np.linalg.norm(b) < 1e-4

    def test_normal_hermitian(self, rng, setup):
        frame, x, tbl = setup
        lin = BilinearModel([frame], (0,), SOB, tbl).linearize(x)
        a, b = random_unknowns(rng, 16, 3), random_unknowns(rng, 16, 3)
        assert dot_test_error(inner_product(b, lin.normal(a)), inner_product(lin.normal(b), a)) < 1e-10
        assert inner_product(a, lin.normal(a)).real > 0

    def test_residual_shape_checked(self, setup):
        frame, x, tbl = setup
        with pytest.raises(ValueError):
            jacobian_adjoint_apply(x, np.zeros((2, 5)), frame, SOB, tbl)


class TestConjugateGradient:
    def test_dense_system(self, rng):
        a = crandn(rng, 8, 8)
        m = a.conj().T @ a + 0.5 * np.eye(8)
        b = crandn(rng, 8)
        x, it = conjugate_gradient(lambda v: m @ v, b, 1e-12, 100)
        assert np.allclose(x, np.linalg.solve(m, b))
        assert it <= 9

    def test_zero_rhs(self):
        x, it = conjugate_gradient(lambda v: v, np.zeros(5, complex), 1e-6, 10)
        assert it == 0 and not np.any(x)

    def test_non_finite_raises(self):
        with pytest.raises(FloatingPointError):
            conjugate_gradient(lambda v: v * np.nan, np.ones(3, complex), 1e-6, 10)

    def test_regularized_normal_solve(self, rng):
        x = random_unknowns(rng, 4, 1)
        n = x.flatten().size
        a = crandn(rng, n, n) / n
        m = a.conj().T @ a
        op = lambda u: Unknowns.unflatten(m @ u.flatten(), u)
        rhs = random_unknowns(rng, 4, 1)
        h = cg_normal_solve(x, rhs, 0.3, op, IrgnmConfig(cg_max_iter=500), tol=1e-12)
        expect = np.linalg.solve(m + 0.3 * np.eye(n), rhs.flatten())
        assert np.allclose(h.flatten(), expect, atol=1e-9)

    def test_alpha_positive(self, rng):
        x = random_unknowns(rng, 4, 1)
        with pytest.raises(ValueError):
            cg_normal_solve(x, x, 0.0, lambda u: u, IrgnmConfig())


class TestIrgnm:
    def test_config(self):
        assert IrgnmConfig(alpha0=1, q=0.5, newton_steps=3).alphas() == [1, 0.5, 0.25]
        for kw in (dict(alpha0=0), dict(q=1), dict(newton_steps=0), dict(cg_tolerance=0)):
            with pytest.raises(ValueError):
                IrgnmConfig(**kw)

    def test_zero_data_is_fixed_point(self, tbl):
        traj = radial_traj(5, 32)
        frame = MultiCoilFrame(0, np.zeros((2, traj.n_samples)), traj)
        init = Unknowns.initial((16, 16), 2)
        res = irgnm(frame, init, SOB, IrgnmConfig(newton_steps=3), tbl)
        assert np.array_equal(res.unknowns.density, init.density)
        assert not np.any(res.unknowns.coils)
        assert res.residual_norm == 0.0

    def test_residual_decreases(self, rng, tbl):
        traj = radial_traj(21, 32)
        coils = np.zeros((1, 2, 16, 16), complex)
        coils[0, :, 7:10, 7:10] = 1000 * crandn(rng, 2, 3, 3)
        yy, xx = np.mgrid[:16, :16]
        disc = ((yy - 8) ** 2 + (xx - 8) ** 2 < 30).astype(float)
        truth = Unknowns(disc, coils, (0,))
        model = BilinearModel([MultiCoilFrame(0, np.zeros((2, traj.n_samples)), traj)], (0,), SOB, tbl)
        frame = MultiCoilFrame(0, model.forward(truth)[0], traj)
        frame = normalize_dataset([frame])[0][0]
        res = irgnm(frame, Unknowns.initial((16, 16), 2), SOB, IrgnmConfig(), tbl)
        hist = res.residual_history
        assert len(hist) == 7 and len(res.cg_iterations) == 6
        assert hist[-1] < 0.2 * hist[0]
        assert all(b <= a for a, b in zip(hist, hist[1:]))

    def test_nan_data_reports_frame(self, tbl):
        traj = radial_traj(5, 32)
        data = np.ones((1, traj.n_samples), complex)
        data[0, 3] = np.nan
        frame = MultiCoilFrame(7, data, traj)
        with pytest.raises(ReconstructionError) as info:
            irgnm(frame, Unknowns.initial((16, 16), 1), SOB, IrgnmConfig(newton_steps=2), tbl)
        assert info.value.frame_index == 7
        assert "frame 7" in str(info.value)

    def test_coil_count_mismatch(self, rng, tbl):
        frame = random_frame(rng, radial_traj(3, 16), 2)
        with pytest.raises(ValueError):
            irgnm(frame, Unknowns.initial((8, 8), 3), SOB, IrgnmConfig(), tbl)


def test_compose_image_uses_rss():
    coils = np.zeros((1, 2, 8, 8), complex)
    coils[0, 0, 4, 4] = 64.0 * 3
    coils[0, 1, 4, 4] = 64.0 * 4j
    x = Unknowns(np.full((8, 8), 2.0), coils, (0,))
    img = compose_image(x, SobolevConfig(a=1.0))
    assert np.allclose(img, 10.0)
