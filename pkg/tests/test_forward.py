import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phaseless.fields import GridSpec
from phaseless.forward import (DatasetError, PhaselessDataset, ProbeError, ProbeGeometry,
                               asymptotic_constant, born_amplitude, born_perturbation,
                               generate_dataset, probe_vectors, scattering_amplitude,
                               scene_grid, scene_scatterers, solve_lippmann_schwinger)
from phaseless.scatterers import build_potential


class TestProbe:
    def test_worked_example(self):
        k, l = probe_vectors(ProbeGeometry(100.0), [6.0, 0.0])
        assert np.allclose(k, [3.0, math.sqrt(91)], atol=1e-14)
        assert np.allclose(l, [-3.0, math.sqrt(91)], atol=1e-14)

    def test_zero_momentum(self):
        k, l = probe_vectors(ProbeGeometry(9.0), [0.0, 0.0])
        assert np.allclose(k, [0.0, 3.0]) and np.allclose(l, [0.0, 3.0])

    def test_backscatter_edge(self):
        k, l = probe_vectors(ProbeGeometry(4.0), [4.0, 0.0])
        assert np.allclose(k, [2.0, 0.0]) and np.allclose(l, [-2.0, 0.0])

    def test_outside_ball(self):
        with pytest.raises(ProbeError):
            probe_vectors(ProbeGeometry(4.0), [4.1, 0.0])

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1.0, 400.0), st.floats(0.0, 0.999), st.floats(0, 2 * math.pi))
    def test_energy_shell_2d(self, energy, frac, angle):
        p = 2 * math.sqrt(energy) * frac * np.array([math.cos(angle), math.sin(angle)])
        k, l = probe_vectors(ProbeGeometry(energy), p)
        assert abs(k @ k - energy) < 1e-9 * energy
        assert abs(l @ l - energy) < 1e-9 * energy
        assert np.allclose(k - l, p, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-3, 3), min_size=3, max_size=3))
    def test_energy_shell_3d(self, p):
        p = np.asarray(p)
        geom = ProbeGeometry(25.0, 3)
        g = geom.gamma(p)[0]
        assert math.isclose(np.linalg.norm(g), 1.0)
        assert abs(g @ p) < 1e-12
        k, l = probe_vectors(geom, p)
        assert abs(k @ k - 25.0) < 1e-9 and abs(l @ l - 25.0) < 1e-9

    def test_vectorized(self):
        p = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
        k, l = probe_vectors(ProbeGeometry(16.0), p)
        assert k.shape == (3, 2)
        assert np.allclose(k - l, p)

    def test_asymptotic_constant(self):
        assert np.isclose(asymptotic_constant(3, 5.0), -2 * math.pi ** 2)
        expected = -math.pi * 1j * np.sqrt(-2 * math.pi * 1j) / math.sqrt(4.0)
        assert np.isclose(asymptotic_constant(2, 4.0), expected)


class TestAmplitude:
    def test_weak_scattering_is_born(self, potential_grid):
        k = np.array([4.0, 0.0])
        l = np.array([4 * math.cos(2.0), 4 * math.sin(2.0)])
        gaps = []
        for amp in (1e-2, 1e-3):
            v = build_potential(potential_grid, 1.0, "bump", amplitude=amp)
            f = scattering_amplitude(solve_lippmann_schwinger(v.field, k), v.field, l)
            gaps.append(abs(f - born_amplitude(v, k, l)))
        # second-order remainder: shrinking v tenfold shrinks the gap a hundredfold
        assert 80 < gaps[0] / gaps[1] < 120

    def test_translation_phase(self, potential):
        g = potential.field.grid
        shift = np.array([5, -3]) * g.spacing
        big = GridSpec(2, 2.0, 64)
        v = potential.field.embed(big)
        vy = potential.field.translated(shift).embed(big)
        k = np.array([6.0, 0.0])
        l = np.array([6 * math.cos(0.7), 6 * math.sin(0.7)])
        f = scattering_amplitude(solve_lippmann_schwinger(v, k), v, l)
        fy = scattering_amplitude(solve_lippmann_schwinger(vy, k), vy, l)
        assert abs(fy - np.exp(1j * (k - l) @ shift) * f) <= 1e-6 * abs(f)


class TestScene:
    def test_grid_holds_everything(self, potential, families):
        fam = families["lattice"]
        grid = scene_grid(potential, fam)
        scenes = scene_scatterers(potential, fam, grid)
        assert len(scenes) == 4
        assert math.isclose(grid.spacing, potential.field.grid.spacing)
        for mem, sc in zip(fam.members, scenes[1:]):
            total = np.abs(mem.field.values).sum() + np.abs(potential.field.values).sum()
            assert math.isclose(np.abs(sc.values).sum(), total, rel_tol=1e-12)


class TestDataset:
    def test_exact_born_intensities(self, potential, families, rng):
        fam = families["translate-pair"]
        p = rng.uniform(-3, 3, (40, 2))
        ds = generate_dataset(potential, fam, [16.0, 64.0], p)
        vh, wh = potential.fourier(p), fam.transforms(p)
        assert ds.intensities.shape == (3, 2, 40)
        assert np.allclose(ds.intensities[0, 1], np.abs(vh) ** 2, rtol=1e-13, atol=0)
        for j in (1, 2):
            assert np.allclose(ds.intensities[j, 0], np.abs(vh + wh[j - 1]) ** 2, rtol=1e-13)
        assert np.allclose(ds.phased[0], vh)

    def test_perturbation_size_and_seed(self, rng):
        p = rng.uniform(-3, 3, (30, 2))
        d1 = born_perturbation(p, 64.0, 0.5, 7, 1)
        assert np.allclose(np.abs(d1), 0.5 / 8 / (1 + np.linalg.norm(p, axis=1)))
        assert np.array_equal(d1, born_perturbation(p, 64.0, 0.5, 7, 1))
        assert not np.array_equal(d1, born_perturbation(p, 64.0, 0.5, 8, 1))
        assert np.all(born_perturbation(p, 64.0, 0.0, 7, 1) == 0)

    def test_noise_reproducible(self, potential, families, rng):
        p = rng.uniform(-3, 3, (20, 2))
        a = generate_dataset(potential, families["iw-pair"], [16.0], p, noise=0.05, seed=3)
        b = generate_dataset(potential, families["iw-pair"], [16.0], p, noise=0.05, seed=3)
        c = generate_dataset(potential, families["iw-pair"], [16.0], p, noise=0.05, seed=4)
        assert np.array_equal(a.intensities, b.intensities)
        assert not np.array_equal(a.intensities, c.intensities)
        assert np.all(a.intensities >= 0)

    def test_p_grid_beyond_probe_ball(self, potential, families):
        with pytest.raises(ProbeError):
            generate_dataset(potential, families["iw-pair"], [4.0], [[5.0, 0.0]])

    def test_unknown_mode(self, potential, families):
        with pytest.raises(ValueError):
            generate_dataset(potential, families["iw-pair"], [4.0], [[1.0, 0.0]], mode="magic")

    def test_lookup(self, potential, families):
        p = np.array([[0.1, 0.2], [1.0, -1.0]])
        ds = generate_dataset(potential, families["iw-pair"], [16.0], p)
        assert list(ds.p_index(p[::-1])) == [1, 0]
        assert ds.intensity(1, 16.0, p[1:])[0] == ds.intensities[1, 0, 1]
        with pytest.raises(KeyError):
            ds.p_index([[0.1, 0.3]])
        with pytest.raises(KeyError):
            ds.energy_index(17.0)
        assert len(list(ds.records())) == 3 * 1 * 2

    def test_save_load_round_trip(self, potential, families, tmp_path, rng):
        p = rng.uniform(-2, 2, (10, 2))
        ds = generate_dataset(potential, families["lattice"], [16.0, 32.0], p,
                              perturbation=0.3, seed=5)
        digest = ds.save(tmp_path / "ds")
        back = PhaselessDataset.load(tmp_path / "ds")
        assert np.array_equal(back.intensities, ds.intensities)
        assert np.array_equal(back.phased, ds.phased)
        assert back.checksum() == digest
        assert back.mode == "born-synthetic" and back.seed == 5

    def test_rejects_holes(self):
        with pytest.raises(ValueError):
            PhaselessDataset([1.0], [[0.0, 0.0]], [[[np.nan]]], "born-synthetic")
        with pytest.raises(ValueError):
            PhaselessDataset([1.0], [[0.0, 0.0]], [[[-1.0]]], "born-synthetic")
        with pytest.raises(ValueError):
            PhaselessDataset([1.0], [[0.0, 0.0]], np.zeros((1, 2, 1)), "born-synthetic")

    def test_solver_mode_matches_direct_solve(self, potential, families):
        fam = families["iw-pair"]
        p = np.array([[1.0, 0.5], [-2.0, 1.0]])
        ds = generate_dataset(potential, fam, [16.0], p, mode="solver")
        scenes = scene_scatterers(potential, fam)
        k, l = probe_vectors(ProbeGeometry(16.0), p)
        for j, sc in enumerate(scenes):
            for i in range(len(p)):
                sol = solve_lippmann_schwinger(sc, k[i])
                f = scattering_amplitude(sol, sc, l[i])
                assert math.isclose(ds.intensities[j, 0, i], abs(f) ** 2, rel_tol=1e-7)
        assert ds.solver["max_residual"] < 1e-8

    def test_solver_failure_reported(self, potential):
        with pytest.raises(DatasetError) as err:
            generate_dataset(potential, None, [16.0], [[1.0, 0.0]], mode="solver",
                             solver_options={"tol": 1e-30})
        assert err.value.failures == [(0, 16.0, (1.0, 0.0))]
