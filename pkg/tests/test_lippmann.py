import math

import numpy as np
import pytest
from scipy import integrate, special

from phaseless.fields import FieldError, GridSpec, SampledField
from phaseless.forward import scattering_amplitude, solve_lippmann_schwinger
from phaseless.lippmann import (LippmannSchwinger, SolverError, green_function,
                                truncated_kernel, truncated_symbol)
from phaseless.scatterers import build_potential


def truncated_symbol_quad(kappa, radius, s):
    """2 pi int_0^R G(r) J0(s r) r dr by adaptive quadrature (d = 2)."""
    def part(fn):
        return integrate.quad(fn, 0, radius, limit=400, points=[1e-6])[0]
    re = part(lambda r: (0.25j * special.hankel1(0, kappa * r)).real * special.j0(s * r) * r)
    im = part(lambda r: (0.25j * special.hankel1(0, kappa * r)).imag * special.j0(s * r) * r)
    return 2 * math.pi * (re + 1j * im)


def disk_amplitude(v0, a, energy, k, l, order=40):
    """Partial-wave amplitude of the constant disk v0 on |x| < a (d = 2)."""
    kap, kin = math.sqrt(energy), math.sqrt(energy - v0)
    tk, tl = math.atan2(k[1], k[0]), math.atan2(l[1], l[0])
    total = 0j
    for m in range(-order, order + 1):
        den = (kin * special.jvp(m, kin * a) * special.hankel1(m, kap * a)
               - kap * special.jv(m, kin * a) * special.h1vp(m, kap * a))
        coef = (-2j / (math.pi * a)) / den
        radial = integrate.quad(lambda r: special.jv(m, kin * r) * special.jv(m, kap * r) * r,
                                0, a)[0]
        total += coef * np.exp(1j * m * (tl - tk)) * 2 * math.pi * radial
    return v0 * total / (2 * math.pi) ** 2


def cell_averaged_disk(grid, v0, a, sub=8):
    X, Y = grid.coordinates()
    h = grid.spacing
    off = (np.arange(sub) + 0.5) / sub - 0.5
    frac = sum(((X + ox * h) ** 2 + (Y + oy * h) ** 2 <= a * a).astype(float)
               for ox in off for oy in off)
    return SampledField(grid, v0 * frac / sub ** 2)


class TestGreen:
    def test_three_dimensional_form(self):
        r = np.array([0.5, 2.0])
        assert np.allclose(green_function(3, 2.0, r), np.exp(2j * r) / (4 * np.pi * r))

    def test_two_dimensional_far_field(self):
        r, k = 400.0, 3.0
        asym = 0.25j * math.sqrt(2 / (math.pi * k * r)) * np.exp(1j * (k * r - math.pi / 4))
        assert abs(green_function(2, k, r) - asym) < 1e-3 * abs(asym)

    @pytest.mark.parametrize("s", [0.0, 1.3, 4.0, 4.0 + 1e-9, 9.5])
    def test_truncated_symbol_matches_quadrature(self, s):
        kappa, R = 4.0, 3.0
        got = truncated_symbol(2, kappa, R, np.array([s]))[0]
        assert abs(got - truncated_symbol_quad(kappa, R, s)) < 1e-9 * max(1, abs(got))

    def test_kernel_shape(self):
        g = GridSpec(2, 1.0, 8)
        assert truncated_kernel(g, 2.0).shape == (16, 16)

    def test_unknown_dimension(self):
        with pytest.raises(FieldError):
            green_function(4, 1.0, 1.0)


class TestSolver:
    def test_disk_partial_waves(self):
        E, a, v0 = 9.0, 1.0, 2.0
        k, l = np.array([3.0, 0.0]), np.array([0.0, 3.0])
        v = cell_averaged_disk(GridSpec(2, 1.5, 128), v0, a)
        sol = solve_lippmann_schwinger(v, k)
        assert sol.system.method == "gmres"
        f = scattering_amplitude(sol, v, l)
        ref = disk_amplitude(v0, a, E, k, l)
        assert abs(f - ref) < 3e-3 * abs(ref)

    def test_corrected_kernel_close_to_truncated(self):
        v = cell_averaged_disk(GridSpec(2, 1.5, 64), 2.0, 1.0)
        k, l = np.array([3.0, 0.0]), np.array([0.0, 3.0])
        f_t = scattering_amplitude(solve_lippmann_schwinger(v, k), v, l)
        sol_c = solve_lippmann_schwinger(v, k, kernel="corrected")
        f_c = scattering_amplitude(sol_c, v, l)
        assert abs(f_c - f_t) < 2e-2 * abs(f_t)

    def test_dense_and_gmres_agree(self, potential_grid):
        pot = build_potential(potential_grid, 1.0, "asymmetric", amplitude=2.0 + 1.0j)
        k = np.array([[5.0, 0.0], [0.0, -5.0], [3.0, 4.0]])
        dense = LippmannSchwinger(pot.field, 25.0, method="dense", tol=1e-10)
        it = LippmannSchwinger(pot.field, 25.0, method="gmres", tol=1e-10)
        a, _ = dense.solve_support(k)
        b, _ = it.solve_support(k)
        assert np.max(np.abs(a - b)) < 1e-9

    def test_reciprocity(self, potential_grid):
        pot = build_potential(potential_grid, 1.0, "asymmetric", amplitude=2.0 + 1.0j)
        system = LippmannSchwinger(pot.field, 16.0, tol=1e-10)
        k = np.array([4.0, 0.0])
        l = np.array([4 * math.cos(1.1), 4 * math.sin(1.1)])
        psi, _ = system.solve_support(np.stack([k, -l]))
        f_kl = system.amplitudes(psi[0], l)[0]
        f_rev = system.amplitudes(psi[1], -k)[0]
        assert abs(f_kl - f_rev) < 1e-9 * abs(f_kl)

    def test_zero_scatterer(self):
        g = GridSpec(2, 1.0, 16)
        v = SampledField(g, np.zeros(g.shape))
        sol = solve_lippmann_schwinger(v, [2.0, 0.0])
        assert sol.system.n_unknowns == 0
        assert scattering_amplitude(sol, v, [0.0, 2.0]) == 0

    def test_full_field_matches_support(self, potential):
        sol = solve_lippmann_schwinger(potential.field, [4.0, 0.0])
        psi = sol.psi_plus.values.ravel()[sol.system.support]
        assert np.max(np.abs(psi - sol.psi_support)) < 1e-8
        assert sol.residual < 1e-8

    def test_unreachable_tolerance(self, potential):
        with pytest.raises(SolverError):
            LippmannSchwinger(potential.field, 16.0, tol=1e-30).solve_support([4.0, 0.0])

    def test_resolution_guard(self, potential):
        with pytest.raises(FieldError):
            LippmannSchwinger(potential.field, 1e4)
        LippmannSchwinger(potential.field, 1e4, strict_resolution=False, method="gmres")

    def test_amplitude_requires_matching_scatterer(self, potential):
        sol = solve_lippmann_schwinger(potential.field, [4.0, 0.0])
        other = potential.field.scaled(2.0)
        with pytest.raises(FieldError):
            scattering_amplitude(sol, other, [0.0, 4.0])
