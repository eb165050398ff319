import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from phaseless.fields import (FieldError, GridSpec, SampledField, ball_volume, bessel_k,
                              bessel_kernel, bessel_kernel_limit, bessel_kernel_transform,
                              checksum, field_bytes, fourier_transform, kernel_constant,
                              load_field, save_field, sobolev_budget, sobolev_norm,
                              sphere_area)


def gaussian(grid):
    return SampledField(grid, np.exp(-grid.radius() ** 2 / 2))


def k_integral(nu, s):
    """K_nu(s) = int_0^inf exp(-s cosh t) cosh(nu t) dt."""
    return integrate.quad(lambda t: math.exp(-s * math.cosh(t)) * math.cosh(nu * t), 0, 50)[0]


class TestGrid:
    def test_nodes_include_origin(self):
        g = GridSpec(2, 1.0, 8)
        assert g.spacing == 0.25
        assert 0.0 in g.axis(0)
        assert g.axis(0)[0] == -1.0

    def test_shifted_center(self):
        g = GridSpec(2, 1.0, 8).shifted((0.5, -0.25))
        assert g.center == (0.5, -0.25)
        assert not g.origin_centered
        assert np.isclose(g.axis(1)[4], -0.25)

    @pytest.mark.parametrize("kw", [dict(dim=0, extent=1, points=4),
                                    dict(dim=2, extent=0, points=4),
                                    dict(dim=2, extent=1, points=1),
                                    dict(dim=2, extent=1, points=4, center=(0.0,))])
    def test_invalid(self, kw):
        with pytest.raises(FieldError):
            GridSpec(**kw)

    def test_resolution_warning(self, caplog):
        g = GridSpec(2, 1.0, 8)
        assert g.check_resolution(1.0)
        assert not g.check_resolution(1e4)
        assert "exceeds" in caplog.text


class TestSampledField:
    def test_support_enforced(self):
        g = GridSpec(2, 1.0, 16)
        f = SampledField(g, np.ones(g.shape), support_radius=0.5)
        assert np.all(f.values[g.radius() > 0.5] == 0)
        assert np.all(f.values[g.radius() <= 0.5] == 1)

    def test_values_read_only(self):
        g = GridSpec(2, 1.0, 4)
        f = SampledField(g, np.zeros(g.shape))
        with pytest.raises(ValueError):
            f.values[0, 0] = 1

    def test_wrong_size(self):
        with pytest.raises(FieldError):
            SampledField(GridSpec(2, 1.0, 4), np.zeros(5))

    def test_add_requires_same_grid(self):
        a = SampledField(GridSpec(2, 1.0, 4), np.ones(16))
        b = SampledField(GridSpec(2, 2.0, 4), np.ones(16))
        with pytest.raises(FieldError):
            a + b
        assert np.all((a + a).values == 2)

    def test_embed_round_trip(self):
        g = GridSpec(2, 1.0, 16)
        f = SampledField(g, np.exp(-g.radius() ** 2 * 8))
        big = GridSpec(2, 2.0, 32, (0.5, 0.25))
        e = f.embed(big)
        assert np.isclose(np.abs(e.values).sum(), np.abs(f.values).sum(), rtol=1e-14)
        p = np.array([[1.0, -2.0], [0.3, 0.7]])
        assert np.allclose(fourier_transform(e, p).values, fourier_transform(f, p).values,
                           rtol=1e-13)

    def test_embed_misaligned(self):
        g = GridSpec(2, 1.0, 16)
        f = SampledField(g, np.ones(g.shape), support_radius=0.5)
        with pytest.raises(FieldError):
            f.embed(GridSpec(2, 2.0, 32, (0.01, 0.0)))
        with pytest.raises(FieldError):
            f.embed(GridSpec(2, 0.25, 4))


class TestFourier:
    def test_gaussian_closed_form(self):
        g = GridSpec(2, 8.0, 64)
        p = np.array([[0.0, 0.0], [1.0, 0.5], [-2.0, 3.0], [4.0, 0.0]])
        exact = (2 * np.pi) ** -1 * np.exp(-np.sum(p ** 2, 1) / 2)
        assert np.allclose(fourier_transform(gaussian(g), p).values, exact, atol=1e-14)

    def test_empty_targets(self):
        out = fourier_transform(gaussian(GridSpec(2, 1.0, 4)), np.zeros((0, 2)))
        assert len(out) == 0

    def test_zero_field(self):
        g = GridSpec(2, 1.0, 4)
        out = fourier_transform(SampledField(g, np.zeros(g.shape)), [[1.0, 2.0]])
        assert out.values[0] == 0

    def test_nonfinite_rejected(self):
        g = GridSpec(2, 1.0, 4)
        vals = np.zeros(g.shape)
        vals[1, 1] = np.nan
        with pytest.raises(FieldError):
            fourier_transform(SampledField(g, vals), [[0.0, 0.0]])

    def test_three_dimensions(self):
        g = GridSpec(3, 7.0, 32)
        p = np.array([[0.5, -1.0, 0.25]])
        exact = (2 * np.pi) ** -1.5 * np.exp(-np.sum(p ** 2) / 2)
        assert np.allclose(fourier_transform(gaussian(g), p).values, exact, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(-6, 6), st.integers(-6, 6),
           st.floats(-5, 5), st.floats(-5, 5))
    def test_translation_phase(self, i, j, p1, p2):
        g = GridSpec(2, 1.0, 16)
        f = SampledField(g, np.exp(-g.radius() ** 2 * 6) * (1 + g.coordinates()[0]))
        a = np.array([i, j]) * g.spacing
        p = np.array([[p1, p2]])
        moved = fourier_transform(f.translated(a), p).values[0]
        base = fourier_transform(f, p).values[0]
        assert abs(moved - np.exp(1j * p[0] @ a) * base) <= 1e-13 * (1 + abs(base))


class TestBessel:
    @pytest.mark.parametrize("nu", [0.5, 1.0, 2.5])
    @pytest.mark.parametrize("s", [0.05, 1.0, 7.0])
    def test_against_integral(self, nu, s):
        assert math.isclose(bessel_k(nu, s), k_integral(nu, s), rel_tol=1e-10)

    def test_half_order_closed_form(self):
        s = np.array([0.3, 2.0, 10.0])
        assert np.allclose(bessel_k(0.5, s), np.sqrt(np.pi / (2 * s)) * np.exp(-s), rtol=1e-13)

    @pytest.mark.parametrize("nu,s", [(1.0, 0.0), (1.0, -1.0), (0.0, 1.0)])
    def test_domain(self, nu, s):
        with pytest.raises(FieldError):
            bessel_k(nu, s)

    def test_kernel_limit_continuity(self):
        for nu in (0.5, 1.0, 3.0):
            near = 1e-7 ** nu * bessel_k(nu, 1e-7)
            assert math.isclose(near, bessel_kernel_limit(nu), rel_tol=1e-6)

    def test_kernel_constant(self):
        assert math.isclose(kernel_constant(1.0, 2), 1 / math.pi, rel_tol=1e-15)
        assert math.isclose(kernel_constant(1.0, 3), math.gamma(2.5) / math.pi ** 1.5)

    def test_kernel_sampled_at_origin(self):
        g = GridSpec(2, 1.0, 8)
        w = bessel_kernel(2.0, g)
        assert w.values[4, 4] == bessel_kernel_limit(2.0)

    def test_transform_at_origin(self):
        assert math.isclose(bessel_kernel_transform(1.0, [0.0, 0.0], 2)[0], 1 / math.pi)


class TestGeometry:
    def test_sphere_and_ball(self):
        assert math.isclose(sphere_area(1), 2.0)
        assert math.isclose(sphere_area(2), 2 * math.pi)
        assert math.isclose(sphere_area(3), 4 * math.pi)
        assert math.isclose(ball_volume(2), math.pi)
        assert math.isclose(ball_volume(3), 4 * math.pi / 3)


class TestSobolev:
    def test_gaussian_l1(self):
        g = GridSpec(2, 8.0, 128)
        assert math.isclose(sobolev_norm(gaussian(g), 0), 2 * math.pi, rel_tol=1e-10)
        # first derivatives have L1 norm 2 sqrt(2 pi) < 2 pi
        assert math.isclose(sobolev_norm(gaussian(g), 1), 2 * math.pi, rel_tol=1e-10)

    def test_weighted_axis(self):
        g = GridSpec(2, 8.0, 128)
        val = sobolev_norm(gaussian(g), 0, weight_axis=0)
        # separable discrete oracle, then the continuum value up to the kink error at 0
        x = g.axis(0)
        h = g.spacing
        discrete = h * np.sum(np.abs(x) * np.exp(-x ** 2 / 2)) * h * np.sum(np.exp(-x ** 2 / 2))
        assert math.isclose(val, discrete, rel_tol=1e-12)
        assert math.isclose(val, 2 * math.sqrt(2 * math.pi), rel_tol=h ** 2 / 8)

    def test_budget_fields(self):
        g = GridSpec(2, 8.0, 64)
        b = sobolev_budget(gaussian(g), 2)
        assert b.n == 2 and b.dim == 2
        assert len(b.weighted_norms) == 2
        assert math.isclose(b.sup_bound, 1.0)
        assert b.max_weighted >= b.weighted_norms[0]


class TestPersistence:
    def test_round_trip_bit_exact(self, tmp_path):
        g = GridSpec(2, 1.0, 16, (0.5, 0.0))
        rng = np.random.default_rng(3)
        f = SampledField(g, rng.standard_normal(g.shape) + 1j * rng.standard_normal(g.shape))
        digest = save_field(f, tmp_path / "f.bin", {"source": "test"})
        back = load_field(tmp_path / "f.bin")
        assert back.grid == g
        assert np.array_equal(back.values, f.values)
        assert digest == checksum(field_bytes(back))

    def test_single_precision_option(self, tmp_path):
        g = GridSpec(2, 1.0, 8)
        f = SampledField(g, np.full(g.shape, 1 / 3))
        save_field(f, tmp_path / "f.bin", itemsize=8)
        back = load_field(tmp_path / "f.bin")
        assert np.allclose(back.values, f.values, rtol=1e-7)

    def test_support_metadata(self, tmp_path):
        g = GridSpec(2, 1.0, 16)
        f = SampledField(g, np.ones(g.shape), 0.5, (0.0, 0.0))
        save_field(f, tmp_path / "f.bin")
        back = load_field(tmp_path / "f.bin")
        assert back.support_radius == 0.5

    def test_corruption_detected(self, tmp_path):
        g = GridSpec(2, 1.0, 4)
        save_field(SampledField(g, np.ones(16)), tmp_path / "f.bin")
        data = bytearray((tmp_path / "f.bin").read_bytes())
        data[-1] ^= 0xFF
        (tmp_path / "f.bin").write_bytes(bytes(data))
        with pytest.raises(FieldError):
            load_field(tmp_path / "f.bin")

    def test_not_a_field(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"hello")
        with pytest.raises(FieldError):
            load_field(tmp_path / "x.bin")
