"""Closed-form work models and complexity constants from sampled densities.

Evaluates the optimal-mesh work estimates for the four refinement regimes
(stochastic/deterministic x adaptive/uniform), the multiplicative
complexity constants of the adaptive estimator, and the predicted
per-level variance used for the measured-versus-model table.  All
expectations are plain Monte Carlo means over the supplied density
samples; p = d = 2 throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import math
import numpy as np

P_ORDER = 2
DIM = 2


@dataclass
class DensityStats:
    """Per-sample density integrals on a common mesh."""

    y_samples: np.ndarray      # integral of |rho|^(1/2) per sample
    l1_samples: np.ndarray     # integral of |rho| per sample
    rho_samples: np.ndarray    # (n_samples, n_cells) bounded densities
    cell_areas: np.ndarray     # h_K^2 of the common mesh
    area: float

    @staticmethod
    def from_pilot(pilot):
        mesh = pilot.mesh
        return DensityStats(y_samples=pilot.y_samples, l1_samples=pilot.l1_samples,
                            rho_samples=np.abs(pilot.rho_samples),
                            cell_areas=mesh.h ** 2, area=float(np.sum(mesh.h ** 2)))


def var_k1(stats):
    """Relative variance of the per-sample error budget weight.

    For the fully stochastic scheme this is the squared coefficient of
    variation of the integral of rho^(1/2).
    """
    y = stats.y_samples
    m = float(np.mean(y))
    if m == 0.0:
        return 0.0
    return float(np.var(y, ddof=1)) / m ** 2


def optimal_h_stochastic(rho_bar, tol_bias, mesh, r_hat):
    """Per-cell optimal stochastic mesh size for one density sample."""
    if tol_bias <= 0 or r_hat <= 0:
        raise ValueError("tol_bias and r_hat must be positive")
    rho = np.abs(np.asarray(rho_bar, dtype=float))
    return (tol_bias / r_hat) ** (1.0 / P_ORDER) * rho ** (-1.0 / (P_ORDER + DIM))


def optimal_h_uniform(l1_samples, tol_bias):
    """Per-sample optimal uniform mesh size under the same bias budget."""
    r = np.asarray(l1_samples, dtype=float)
    denom = float(np.mean(r ** (DIM / (P_ORDER + DIM)))) ** (1.0 / P_ORDER)
    return tol_bias ** (1.0 / P_ORDER) * r ** (-1.0 / (P_ORDER + DIM)) / denom


def work_models(stats, tol_bias):
    """The four optimal-work estimates for one bias tolerance.

    Keys: stochastic_adaptive <= {stochastic_uniform, deterministic_adaptive}
    <= deterministic_uniform by Jensen's inequality, with equality for a
    density constant in space and sample.
    """
    if tol_bias <= 0:
        raise ValueError("tol_bias must be positive")
    w = stats.cell_areas
    rho = stats.rho_samples
    y = rho ** 0.5 @ w                      # per-sample integral of sqrt(rho)
    r1 = rho @ w                            # per-sample integral of rho
    sa = float(np.mean(y)) ** 2 / tol_bias
    su = float(np.mean(np.sqrt(r1))) ** 2 * stats.area / tol_bias
    da = float(np.sum(np.sqrt(np.mean(rho, axis=0)) * w)) ** 2 / tol_bias
    du = float(np.mean(r1)) * stats.area / tol_bias
    return {"stochastic_adaptive": sa, "stochastic_uniform": su,
            "deterministic_adaptive": da, "deterministic_uniform": du}


@dataclass
class ComplexityConstants:
    k3: float
    k4: float
    k5: float
    regime: str
    degenerate: bool

    @property
    def k_total(self):
        return self.k3 * self.k4 * self.k5


def k4_constant(regime, sep, tol0=None, theta=None, v0=None, vark1=None):
    """The tolerance-sequence factor of the complexity constant."""
    dp = DIM / P_ORDER
    if regime == "d<2p":
        decay = sep ** (1.0 - DIM / (2.0 * P_ORDER))
        head = math.sqrt(v0 / vark1) / ((1.0 / sep - 1.0) * math.sqrt(1.0 + sep ** dp))
        return tol0 ** (-dp) * (head + tol0 * decay / (1.0 - decay)) ** 2
    if regime == "d=2p":
        return math.log(sep) ** -2
    if regime == "d>2p":
        return (1.0 - theta) ** (2.0 - dp) / (1.0 - sep ** (DIM / (2.0 * P_ORDER) - 1.0)) ** 2
    raise ValueError(f"unknown regime {regime!r}")


def k5_constant(sep, theta, c_xi):
    dp = DIM / P_ORDER
    return (c_xi / theta) ** 2 * (1.0 / sep - 1.0) ** 2 * (1.0 + sep ** dp)


def complexity_constants(stats, sep, tol0, theta, c_xi, v0, case="adaptive"):
    """K3, K4, K5 of the adaptive complexity estimate.

    ``case`` selects the fully adaptive or uniform-selection variant of K3.
    With d = p = 2 the examples sit in the d < 2p regime, whose K4 needs
    the raw level-0 variance.
    """
    w = stats.cell_areas
    if case == "adaptive":
        y = stats.rho_samples ** 0.5 @ w
        k3 = float(np.var(y, ddof=1))
    else:
        r1 = np.sqrt(stats.rho_samples @ w)
        k3 = stats.area * float(np.var(r1, ddof=1))
    vk1 = var_k1(stats)
    degenerate = vk1 == 0.0 or k3 == 0.0
    if DIM < 2 * P_ORDER:
        regime = "d<2p"
        k4 = float("nan") if degenerate else k4_constant(regime, sep, tol0=tol0,
                                                         theta=theta, v0=v0, vark1=vk1)
    elif DIM == 2 * P_ORDER:
        regime = "d=2p"
        k4 = k4_constant(regime, sep)
    else:
        regime = "d>2p"
        k4 = k4_constant(regime, sep, theta=theta)
    return ComplexityConstants(k3=k3, k4=k4, k5=k5_constant(sep, theta, c_xi),
                               regime=regime, degenerate=degenerate)


def predicted_level_variance(tol_level, sep, vark1):
    """Model variance of one telescoping difference at level tolerance tol."""
    return tol_level ** 2 * (1.0 / sep - 1.0) ** 2 * vark1


def fit_loglog_slope(x, y):
    """Least-squares slope of log(y) against log(x), ignoring zero entries."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    good = (x > 0) & (y > 0)
    if good.sum() < 2:
        raise ValueError("need at least two positive points for a slope fit")
    return float(np.polyfit(np.log(x[good]), np.log(y[good]), 1)[0])


def decay_factor(levels, values):
    """Per-level geometric decay factor fitted to positive values."""
    slope = fit_loglog_slope(np.exp(np.asarray(levels, dtype=float)), values)
    return math.exp(-slope)
