"""Diffusivity coefficient models.

Three variants: a deterministic constant, a lognormal constant (one
Gaussian per sample), and a truncated Fourier expansion of a lognormal
field whose spectral weights come from the periodized Matern covariance.
All samples evaluate pointwise to strictly positive values and are pure
functions of their coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gamma as gamma_fn, kv

from . import rng


@dataclass
class MaternParams:
    sigma2: float = 1.0
    nu: float = 6.5
    corr_len: float = 1.0
    n_terms: int = 256
    extension_factor: float = 2.0
    grid: int = 64

    def __post_init__(self):
        if min(self.sigma2, self.nu, self.corr_len) <= 0 or self.n_terms < 1:
            raise ValueError("Matern parameters must be positive, n_terms >= 1")


def matern_covariance(h, params):
    """Stationary Matern covariance; the h=0 limit equals sigma^2."""
    h = np.asarray(h, dtype=float)
    z = np.sqrt(2.0 * params.nu) * h / params.corr_len
    out = np.full(z.shape, params.sigma2)
    pos = z > 0
    if np.any(pos):
        zp = z[pos]
        scale = params.sigma2 / (2.0 ** (params.nu - 1.0) * gamma_fn(params.nu))
        with np.errstate(over="ignore", invalid="ignore"):
            vals = scale * zp ** params.nu * kv(params.nu, zp)
        out[pos] = np.where(np.isfinite(vals), vals, 0.0)
    return out if out.ndim else float(out)


class ConstantField:
    """Spatially constant diffusivity (deterministic or one lognormal draw)."""

    is_constant = True

    def __init__(self, value, kind="constant"):
        if not (np.isfinite(value) and value > 0):
            raise ValueError("constant coefficient must be positive and finite")
        self.value = float(value)
        self.kind = kind

    def evaluate(self, points):
        return np.full(np.atleast_2d(points).shape[0], self.value)

    def descriptor(self):
        return {"kind": self.kind, "value": self.value}


class FourierField:
    """exp of a truncated trigonometric expansion with fixed coefficients."""

    is_constant = False

    def __init__(self, basis, xi):
        xi = np.asarray(xi, dtype=float)
        if xi.shape != (basis.n_terms,):
            raise ValueError("coefficient vector length must match basis truncation")
        self.basis = basis
        self.xi = xi
        self._weights = xi * basis.amplitude

    def evaluate(self, points):
        return np.exp(self.log_evaluate(points))

    def log_evaluate(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        arg = pts @ self.basis.ang_freq.T - (np.pi / 2.0) * self.basis.is_sin[None, :]
        return np.cos(arg) @ self._weights

    def descriptor(self):
        return {"kind": "fourier", "n_terms": int(self.basis.n_terms)}


@dataclass
class FourierBasis:
    """Trigonometric modes with spectral weights, sorted by decreasing weight."""

    ang_freq: np.ndarray     # (I, 2) angular frequencies
    lam: np.ndarray          # (I,) spectral weights, non-increasing
    is_sin: np.ndarray       # (I,) bool
    amplitude: np.ndarray    # (I,) sqrt(lam) * normalization of the mode
    period: float
    params: MaternParams

    @property
    def n_terms(self):
        return len(self.lam)

    def to_dict(self):
        return {
            "period": self.period,
            "params": {"sigma2": self.params.sigma2, "nu": self.params.nu,
                       "corr_len": self.params.corr_len, "n_terms": self.params.n_terms,
                       "extension_factor": self.params.extension_factor,
                       "grid": self.params.grid},
            "ang_freq": self.ang_freq.tolist(),
            "lam": self.lam.tolist(),
            "is_sin": self.is_sin.astype(int).tolist(),
            "amplitude": self.amplitude.tolist(),
        }

    @staticmethod
    def from_dict(d):
        return FourierBasis(ang_freq=np.asarray(d["ang_freq"], dtype=float),
                            lam=np.asarray(d["lam"], dtype=float),
                            is_sin=np.asarray(d["is_sin"], dtype=bool),
                            amplitude=np.asarray(d["amplitude"], dtype=float),
                            period=float(d["period"]),
                            params=MaternParams(**d["params"]))


def build_fourier_basis(params, domain, n_terms=None):
    """Spectral weights of the periodized covariance, truncated to the
    largest ``n_terms`` modes.

    The covariance is extended periodically over a square torus whose
    period is ``extension_factor`` times the larger domain side, sampled on
    a uniform grid, and transformed; each positive frequency pair carries a
    cosine and a sine mode sharing the same weight.
    """
    x0, x1, y0, y1 = domain
    period = params.extension_factor * max(x1 - x0, y1 - y0)
    if period < 2.0 * max(x1 - x0, y1 - y0):
        raise ValueError("periodic extension must be at least twice the domain size")
    M = params.grid
    u = np.arange(M) * (period / M)
    # two rings of periodic images leave the spectral weights nonnegative
    # to rounding accuracy for the smooth covariances used here
    cov = np.zeros((M, M))
    for sx in range(-2, 3):
        for sy in range(-2, 3):
            dx = u[:, None] - sx * period
            dy = u[None, :] - sy * period
            cov += matern_covariance(np.hypot(dx, dy), params)
    c = np.fft.fft2(cov).real / M ** 2
    neg = c.min()
    if neg < -1e-10 * c.max():
        raise ValueError("covariance periodization produced negative spectral mass; "
                         "increase the extension factor")
    c = np.clip(c, 0.0, None)

    modes = []  # (lam, k1, k2, is_sin, norm)
    half = M // 2
    for k1 in range(-half + 1, half):
        for k2 in range(-half + 1, half):
            if k1 < 0 or (k1 == 0 and k2 < 0):
                continue
            lam = float(c[k1 % M, k2 % M])
            if k1 == 0 and k2 == 0:
                modes.append((lam, 0, 0, False, 1.0))
            else:
                modes.append((lam, k1, k2, False, np.sqrt(2.0)))
                modes.append((lam, k1, k2, True, np.sqrt(2.0)))
    modes.sort(key=lambda m: (-m[0], m[1], m[2], m[3]))
    if n_terms is None:
        n_terms = params.n_terms
    if n_terms > len(modes):
        raise ValueError("requested more modes than the spectral grid provides")
    modes = modes[:n_terms]
    lam = np.array([m[0] for m in modes])
    freq = np.array([[m[1], m[2]] for m in modes], dtype=float) * (2.0 * np.pi / period)
    is_sin = np.array([m[3] for m in modes], dtype=bool)
    norm = np.array([m[4] for m in modes])
    return FourierBasis(ang_freq=freq, lam=lam, is_sin=is_sin,
                        amplitude=np.sqrt(lam) * norm, period=period, params=params)


def sample_field(basis, xi):
    """Field realization for a fixed coefficient draw."""
    return FourierField(basis, xi)


@dataclass
class FieldModel:
    """What to draw per Monte Carlo sample."""

    kind: str                  # constant | lognormal | fourier
    value: float = 1.0         # constant case
    sigma: float = 1.0         # lognormal case: a = exp(sigma * Z)
    basis: FourierBasis | None = None

    def n_random(self):
        return {"constant": 0, "lognormal": 1, "fourier": self.basis.n_terms if self.basis else 0}[self.kind]

    def descriptor(self):
        d = {"kind": self.kind}
        if self.kind == "constant":
            d["value"] = self.value
        elif self.kind == "lognormal":
            d["sigma"] = self.sigma
        else:
            d["n_terms"] = int(self.basis.n_terms)
        return d


def draw_sample(stream_key, index, model):
    """Field realization for one counter-based sample key."""
    if model.kind == "constant":
        return ConstantField(model.value)
    if model.kind == "lognormal":
        z = rng.normals(stream_key, index, 1)[0]
        return ConstantField(float(np.exp(model.sigma * z)), kind="lognormal")
    if model.kind == "fourier":
        xi = rng.normals(stream_key, index, model.basis.n_terms)
        return FourierField(model.basis, xi)
    raise ValueError(f"unknown field kind {model.kind!r}")
