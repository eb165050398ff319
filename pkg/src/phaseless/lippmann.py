"""Discretized Lippmann-Schwinger operator for -Laplace + v - E.

The integral equation

    psi(x) = exp(i k.x) - integral G_E(x - x') v(x') psi(x') dx'

is collocated on the nodes of a :class:`~phaseless.fields.GridSpec`. The
convolution with the outgoing Green's function uses the truncated-kernel
construction: for densities supported in the grid box, G_E may be replaced by
G_E * 1{|x| < R} with R the box diameter, whose Fourier transform is smooth and
known in closed form. Sampling that transform on a 4x oversampled frequency
lattice yields a discrete kernel that is spectrally accurate for smooth
densities (the logarithmic singularity of G_E never has to be sampled).
"""

from __future__ import annotations

import logging
import math
from typing import Optional

import mpmath
import numpy as np
import scipy.linalg
from scipy import special
from scipy.sparse.linalg import LinearOperator, gmres

from .fields import FieldError, GridSpec, SampledField

logger = logging.getLogger(__name__)

DENSE_LIMIT = 5000


class SolverError(RuntimeError):
    """Linear solve failed or did not reach the requested residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


def green_function(dim: int, kappa: float, r) -> np.ndarray:
    """Outgoing fundamental solution of -Laplace - kappa^2 (r > 0)."""
    r = np.asarray(r, float)
    if dim == 2:
        return 0.25j * special.hankel1(0, kappa * r)
    if dim == 3:
        return np.exp(1j * kappa * r) / (4.0 * np.pi * r)
    raise FieldError("Green's function implemented for d = 2, 3")


def _truncated_symbol_mp(dim, kappa, radius, s):
    mp = mpmath
    with mp.workdps(40):
        s, k, R = mp.mpf(s), mp.mpf(kappa), mp.mpf(radius)
        if dim == 2:
            h0 = mp.hankel1(0, k * R)
            h1 = mp.hankel1(1, k * R)
            num = 1 + 0.5j * mp.pi * R * (s * mp.besselj(1, s * R) * h0
                                          - k * mp.besselj(0, s * R) * h1)
        else:
            sinc = R if s == 0 else mp.sin(s * R) / s
            num = 1 - mp.exp(1j * k * R) * (mp.cos(s * R) - 1j * k * sinc)
        if s == k:
            return complex(mp.diff(lambda t: _num_mp(dim, k, R, t), k) / (2 * k))
        return complex(num / (s * s - k * k))


def _num_mp(dim, k, R, t):
    mp = mpmath
    if dim == 2:
        return 1 + 0.5j * mp.pi * R * (t * mp.besselj(1, t * R) * mp.hankel1(0, k * R)
                                       - k * mp.besselj(0, t * R) * mp.hankel1(1, k * R))
    return 1 - mp.exp(1j * k * R) * (mp.cos(t * R) - 1j * k * mp.sin(t * R) / t)


def truncated_symbol(dim: int, kappa: float, radius: float, s) -> np.ndarray:
    """Fourier transform of G_E restricted to the ball |x| < radius.

    Convention ``integral exp(-i xi.x) g(x) dx``; ``s = |xi|``. The removable
    singularity at s = kappa is evaluated in extended precision.
    """
    s = np.asarray(s, float)
    R = radius
    with np.errstate(all="ignore"):
        if dim == 2:
            h0 = special.hankel1(0, kappa * R)
            h1 = special.hankel1(1, kappa * R)
            num = 1.0 + 0.5j * np.pi * R * (s * special.j1(s * R) * h0
                                            - kappa * special.j0(s * R) * h1)
        elif dim == 3:
            sinc = np.where(s == 0, R, np.sin(s * R) / np.where(s == 0, 1.0, s))
            num = 1.0 - np.exp(1j * kappa * R) * (np.cos(s * R) - 1j * kappa * sinc)
        else:
            raise FieldError("truncated kernel implemented for d = 2, 3")
        out = num / (s ** 2 - kappa ** 2)
    near = np.abs(s - kappa) * R < 1e-2
    for idx in zip(*np.nonzero(near)):
        out[idx] = _truncated_symbol_mp(dim, kappa, R, float(s[idx]))
    return out


def truncated_kernel(grid: GridSpec, kappa: float) -> np.ndarray:
    """Discrete convolution kernel on the difference grid, shape (2N,)*d.

    Entry ``[m]`` (FFT ordering, m in [-N, N)) multiplies ``h^d rho_j`` for
    node offset ``i - j = m``.
    """
    d, n, h = grid.dim, grid.points, grid.spacing
    box = n * h
    radius = math.sqrt(d) * box * 1.01
    big = 4 * n
    freq = 2.0 * np.pi * np.fft.fftfreq(big, d=h)
    mesh = np.meshgrid(*([freq] * d), indexing="ij", sparse=True)
    s = np.sqrt(sum(m ** 2 for m in mesh))
    symbol = truncated_symbol(d, kappa, radius, s)
    # inverse transform on the period 4Nh: sum_m G(xi_m) e^{i xi_m x} / P^d
    full = np.fft.ifftn(symbol) * big ** d / (big * h) ** d
    idx = np.r_[0:n, big - n:big]
    return full[np.ix_(*([idx] * d))]


def corrected_kernel(grid: GridSpec, kappa: float) -> np.ndarray:
    """Point-sampled G_E with a cell-averaged diagonal (second-order baseline)."""
    d, n, h = grid.dim, grid.points, grid.spacing
    offs = np.fft.fftfreq(2 * n, d=1.0 / (2 * n)) * h
    mesh = np.meshgrid(*([offs] * d), indexing="ij", sparse=True)
    r = np.sqrt(sum(m ** 2 for m in mesh))
    with np.errstate(all="ignore"):
        kern = green_function(d, kappa, r)
    # equal-volume ball around the singular node
    if d == 2:
        a = h / math.sqrt(math.pi)
        cell = (0.5j * np.pi * a * special.hankel1(1, kappa * a) / kappa - 1.0 / kappa ** 2)
    else:
        a = h * (3.0 / (4.0 * math.pi)) ** (1.0 / 3.0)
        cell = ((1.0 - 1j * kappa * a) * np.exp(1j * kappa * a) - 1.0) / kappa ** 2
    kern[(0,) * d] = cell / h ** d
    return kern


class LippmannSchwinger:
    """Factorized Lippmann-Schwinger system for one scatterer and one energy.

    Parameters
    ----------
    scatterer : SampledField
        Total scatterer (potential plus background); compactly supported
        inside its grid.
    energy : float
        E = |k|^2.
    kernel : {"truncated", "corrected"}
        Discretization of the Green's function convolution.
    method : {"auto", "dense", "gmres"}
        Dense LU on the support nodes, or GMRES with FFT matrix-vector products.
    """

    def __init__(self, scatterer: SampledField, energy: float, kernel: str = "truncated",
                 method: str = "auto", tol: float = 1e-8, strict_resolution: bool = True):
        if scatterer.dim not in (2, 3):
            raise FieldError("solver supports d = 2 and d = 3")
        if not scatterer.is_finite():
            raise FieldError("scatterer has non-finite samples")
        grid = scatterer.grid
        self.scatterer = scatterer
        self.grid = grid
        self.energy = float(energy)
        self.kappa = math.sqrt(self.energy)
        self.tol = tol
        if not grid.check_resolution(self.energy) and strict_resolution:
            raise FieldError(f"grid spacing {grid.spacing:.4g} does not resolve E = {energy}")
        if kernel == "truncated":
            self.kernel = truncated_kernel(grid, self.kappa)
        elif kernel == "corrected":
            self.kernel = corrected_kernel(grid, self.kappa)
        else:
            raise ValueError(f"unknown kernel {kernel!r}")
        self.kernel_hat = np.fft.fftn(self.kernel)
        vals = scatterer.values
        self.support = np.flatnonzero(vals.ravel())
        self.contrast = vals.ravel()[self.support] * grid.spacing ** grid.dim
        self._coords = np.stack([c.ravel()[self.support] for c in grid.coordinates()], 1)
        if method == "auto":
            method = "dense" if len(self.support) <= DENSE_LIMIT else "gmres"
        self.method = method
        self._lu = None
        if method == "dense" and len(self.support):
            self._factor()

    @property
    def n_unknowns(self) -> int:
        return len(self.support)

    @property
    def support_coords(self) -> np.ndarray:
        return self._coords

    def _factor(self):
        n, d = self.grid.points, self.grid.dim
        multi = np.unravel_index(self.support, self.grid.shape)
        mat = None
        for ax in range(d):
            diff = (multi[ax][:, None] - multi[ax][None, :]).astype(np.int32)
            diff %= 2 * n
            mat = diff if mat is None else mat * (2 * n) + diff
            del diff
        flat_kernel = self.kernel.ravel()
        a = flat_kernel[mat]
        del mat
        a *= self.contrast[None, :]
        a[np.diag_indices_from(a)] += 1.0
        self._lu = scipy.linalg.lu_factor(a, overwrite_a=True, check_finite=False)

    def convolve(self, density: np.ndarray) -> np.ndarray:
        """Apply the discrete Green's operator to support densities.

        ``density`` has shape (n_support,) or (batch, n_support) and already
        contains the quadrature weight h^d. Returns the full-grid result.
        """
        n, d = self.grid.points, self.grid.dim
        batch = np.atleast_2d(density)
        pad = np.zeros((batch.shape[0],) + (2 * n,) * d, dtype=complex)
        inner = np.zeros((batch.shape[0], n ** d), dtype=complex)
        inner[:, self.support] = batch
        pad[(slice(None),) + (slice(0, n),) * d] = inner.reshape((-1,) + self.grid.shape)
        axes = tuple(range(1, d + 1))
        out = np.fft.ifftn(np.fft.fftn(pad, axes=axes) * self.kernel_hat, axes=axes)
        out = out[(slice(None),) + (slice(0, n),) * d].reshape(batch.shape[0], -1)
        return out if density.ndim == 2 else out[0]

    def apply(self, psi_support: np.ndarray) -> np.ndarray:
        """(I + G v) restricted to the support nodes."""
        conv = self.convolve(self.contrast * psi_support)
        return psi_support + conv[..., self.support]

    def incident(self, k) -> np.ndarray:
        k = np.atleast_2d(np.asarray(k, float))
        return np.exp(1j * k @ self._coords.T)

    def solve_support(self, k) -> tuple:
        """Total field on the support nodes for each incident vector in ``k``.

        Returns ``(psi, residuals)`` with psi of shape (n_k, n_support).
        """
        k = np.atleast_2d(np.asarray(k, float))
        rhs = self.incident(k)
        if len(self.support) == 0:
            return rhs, np.zeros(len(k))
        if self.method == "dense":
            psi = scipy.linalg.lu_solve(self._lu, rhs.T, check_finite=False).T
        else:
            psi = np.empty_like(rhs)
            op = LinearOperator((self.n_unknowns,) * 2, matvec=self.apply, dtype=complex)
            for i, b in enumerate(rhs):
                x, info = gmres(op, b, rtol=self.tol * 1e-2, atol=0.0, restart=60,
                                maxiter=200)
                if info != 0:
                    res = np.linalg.norm(self.apply(x) - b) / np.linalg.norm(b)
                    raise SolverError(f"GMRES did not converge (info={info})", res)
                psi[i] = x
        residuals = self.residuals(psi, rhs)
        bad = residuals > self.tol
        if np.any(bad):
            raise SolverError(f"residual {residuals.max():.3e} exceeds {self.tol:.1e}",
                              float(residuals.max()))
        return psi, residuals

    def residuals(self, psi, rhs, batch: int = 32) -> np.ndarray:
        out = np.empty(len(psi))
        for start in range(0, len(psi), batch):
            sl = slice(start, start + batch)
            r = self.apply(psi[sl]) - rhs[sl]
            out[sl] = np.linalg.norm(r, axis=1) / np.linalg.norm(rhs[sl], axis=1)
        return out

    def full_field(self, k, psi_support: np.ndarray) -> np.ndarray:
        """Total field on every grid node from its support values."""
        coords = self.grid.coordinates()
        phase = sum(kc * c for kc, c in zip(np.asarray(k, float), coords))
        scattered = self.convolve(self.contrast * psi_support).reshape(self.grid.shape)
        return np.exp(1j * phase) - scattered

    def amplitudes(self, psi_support: np.ndarray, l) -> np.ndarray:
        """f(k, l) = (2pi)^-d integral exp(-i l.x) v(x) psi(x, k) dx per row."""
        l = np.atleast_2d(np.asarray(l, float))
        phase = np.exp(-1j * np.einsum("nd,sd->ns", l, self._coords))
        d = self.grid.dim
        return np.einsum("ns,ns->n", phase, self.contrast * np.atleast_2d(psi_support)) \
            / (2.0 * np.pi) ** d
