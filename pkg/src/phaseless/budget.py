"""Closed-form constants of the reconstruction error bounds.

Parts of A_1, A_2, A_3 depend on the Born-gap constants c(D_j) N_j^3 of the
forward problem, which have no closed form here. They are replaced by an
empirical stand-in ``born_gap`` (sup over p of |f - v_hat| E^(1/2)), and the
result is flagged ``calibrated`` only when such a stand-in was supplied.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy import integrate, special

from .fields import SobolevBudget, ball_volume, kernel_constant, sphere_area
from .recon import ReconConfig
from .scatterers import BackgroundFamily


class DivergentTailError(ValueError):
    """Lattice and hyperplane sums diverge unless n > d."""


def c3(d: int, n: int) -> float:
    return sphere_area(d) * (2.0 * math.pi) ** (-d) * d ** n / (n - d)


def ball_moment(d: int, beta: float) -> float:
    """|S^(d-1)| 2^(d+beta) / (d+beta), the bound on r^-(d+beta) int_{B_r} (1+|p|)^beta."""
    return sphere_area(d) * 2.0 ** (d + beta) / (d + beta)


def hyperplane_sum(n: float, d: int, y_norm: float) -> float:
    """sum over z in Z of (1 + pi |z| / |y|)^(d-n-1), via the Hurwitz zeta function."""
    m = n + 1 - d
    if not m > 1:
        raise DivergentTailError("hyperplane sum needs n > d")
    a = math.pi / y_norm
    return 1.0 + 2.0 * a ** (-m) * float(special.zeta(m, 1.0 + 1.0 / a))


def lattice_sum(n: float, d: int, s: float, cutoff: int = 200):
    """sum over z in Z^d of (1 + 2 pi |z| / s)^-n.

    Exact over |z| <= cutoff plus the continuum integral of the tail; returns
    (value, tail). The tail decays like cutoff^(d-n), too slowly to truncate.
    """
    if not n > d:
        raise DivergentTailError("lattice sum needs n > d")
    a = 2.0 * math.pi / s
    k = np.arange(-cutoff, cutoff + 1)
    grids = np.meshgrid(*([k] * d), indexing="ij")
    norm = np.sqrt(sum(g.astype(float) ** 2 for g in grids))
    inner = norm <= cutoff
    partial = float(np.sum((1.0 + a * norm[inner]) ** (-n)))
    # continuum tail from the radius enclosing the same area as the counted points
    rho0 = (inner.sum() / ball_volume(d)) ** (1.0 / d)
    tail, _ = integrate.quad(lambda t: t ** (d - 1) * (1.0 + a * t) ** (-n), rho0, np.inf)
    tail *= sphere_area(d)
    return partial + tail, tail


@dataclass(frozen=True)
class ErrorBudget:
    d: int
    n: int
    beta: float
    tau: float
    c1: float
    c3: float
    c4: float
    c5: float
    c6: float
    c7: float
    c8: Optional[float]
    c9: float
    c10: float
    c11: Optional[float]
    c12: float
    A1: float
    A2: Optional[float]
    A3: Optional[float]
    born_gap: float
    calibrated: bool
    lattice_tail: Optional[float] = None

    def as_dict(self) -> dict:
        out = asdict(self)
        if not self.calibrated:
            out["note"] = ("c4, c5, c7, c9, c10 and A_i use born_gap = 1 in place of the "
                           "forward Born-gap constants; requires empirical calibration")
        return out


def error_budget(budget: SobolevBudget, family: BackgroundFamily, config: ReconConfig,
                 born_gap: Optional[float] = None) -> ErrorBudget:
    """Evaluate c3..c12 and the computable parts of A_1, A_2, A_3.

    Each forward constant c(D_j) N_j^3 is replaced by ``born_gap``.
    """
    d, n = budget.dim, budget.n
    if not n > d:
        raise DivergentTailError("n must exceed d for convergent tails")
    base = family.base
    beta, c1, tau = base.beta, base.c1, config.tau
    K = 1.0 if born_gap is None else float(born_gap)
    norm = budget.norm_n1

    k3 = c3(d, n)
    c2 = 4.0 * K
    k4 = ball_moment(d, beta) / c1 * c2
    # taken as printed: the bracket multiplied by c1
    k5 = 0.5 * math.pi * 4.0 * K * c1
    k6 = 2.0 ** n * (d + 1) ** (n + 1) / (2.0 * math.pi) ** d * budget.max_weighted
    k7 = sphere_area(d) * 2.0 ** (d + 2.0 * beta) / (d + beta) * k5
    k9 = 0.5 * math.pi * math.sqrt(d) * 4.0 * K * c1
    k10 = ball_moment(d, beta) * k9
    k12 = kernel_constant(base.nu, d)

    k8 = A2 = None
    if family.mode == "translate-pair":
        yn = float(np.linalg.norm(family.y))
        k6 = k6 / yn
        k8 = 2.0 / yn * sphere_area(d - 1) / (n - d + 1) * hyperplane_sum(n, d, yn)
        A2 = (2 * tau) ** (d + beta) * k7 + k6 * k8 + (2 * tau) ** (d - n) * k3 * norm
    k11 = A3 = tail = None
    if family.mode == "lattice":
        total, tail = lattice_sum(n, d, family.s)
        k11 = family.s ** (-d) * ball_volume(d) * total
        A3 = (2 * tau) ** (d + beta) * k10 + k11 + (2 * tau) ** (d - n) * k3 * norm
    A1 = (2 * tau) ** (d - n) * k3 * norm + (2 * tau) ** (d + beta) * k4
    return ErrorBudget(d, n, beta, tau, c1, k3, k4, k5, k6, k7, k8, k9, k10, k11, k12,
                       A1, A2, A3, K, born_gap is not None, tail)

