"""Fixed latent lattices: quantile grids for the supported priors.

A lattice is an ``n x d`` matrix of distinct latent codes that discretizes a
prior. In one dimension the rows are the quantiles ``F^{-1}(i / (n + 1))``; in
higher dimensions a low-discrepancy point set in the unit cube is pushed
through the prior (coordinatewise inverse CDF, or a radius/direction map onto
the unit ball).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from ._sobol_table import JOE_KUO
from .errors import ConfigError, DomainError

PRIOR_KINDS = ("uniform01_coordinatewise", "standard_gaussian_coordinatewise", "uniform_ball")
SOURCES = ("univariate_quantiles", "sobol", "uniform_grid")
MAX_SOBOL_DIM = 32
_BITS = 32
_SCALE = float(2**_BITS)

VALID_PAIRS = (
    ("univariate_quantiles", "uniform01_coordinatewise"),
    ("univariate_quantiles", "standard_gaussian_coordinatewise"),
    ("univariate_quantiles", "uniform_ball"),
    ("sobol", "uniform01_coordinatewise"),
    ("sobol", "standard_gaussian_coordinatewise"),
    ("sobol", "uniform_ball"),
    ("uniform_grid", "uniform01_coordinatewise"),
    ("uniform_grid", "standard_gaussian_coordinatewise"),
)


@dataclass(frozen=True)
class PriorSpec:
    kind: str = "standard_gaussian_coordinatewise"
    dim: int = 2

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise ConfigError(f"prior kind must be one of {PRIOR_KINDS}, got {self.kind!r}")
        if self.dim < 1:
            raise ConfigError(f"prior dimension must be >= 1, got {self.dim}")


@dataclass(frozen=True, eq=False)
class Lattice:
    points: np.ndarray
    prior: PriorSpec
    source: str
    seed: int | None = None

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


# ---------------------------------------------------------------------------
# Sobol sequence


def _direction_numbers(dim: int) -> np.ndarray:
    """``(dim, 32)`` table of 32-bit direction integers v_k = m_k << (32 - k)."""
    v = np.zeros((dim, _BITS), dtype=np.uint64)
    v[0] = [1 << (_BITS - k) for k in range(1, _BITS + 1)]
    for j in range(1, dim):
        s, a, m_init = JOE_KUO[j - 1]
        m = list(m_init)
        for k in range(s, _BITS):
            new = m[k - s] ^ (m[k - s] << s)
            for i in range(1, s):
                if (a >> (s - 1 - i)) & 1:
                    new ^= m[k - i] << i
            m.append(new)
        v[j] = [m[k] << (_BITS - 1 - k) for k in range(_BITS)]
    return v


class SobolGenerator:
    """Gray-code Sobol sequence with an optional seeded digital shift.

    The all-zero point at index 0 is skipped, so the first point drawn is
    ``(0.5, ..., 0.5)`` before shifting.
    """

    def __init__(self, dim: int, seed: int | None = None):
        if not 1 <= dim <= MAX_SOBOL_DIM:
            raise DomainError(f"Sobol dimension must be in [1, {MAX_SOBOL_DIM}], got {dim}")
        self.dim = dim
        self.directions = _direction_numbers(dim)
        self.index = 1
        if seed is None:
            self.shift = np.zeros(dim, dtype=np.uint64)
        else:
            rng = np.random.default_rng(seed)
            self.shift = rng.integers(0, 2**_BITS, size=dim, dtype=np.uint64)

    def draw_integers(self, n: int) -> np.ndarray:
        if n < 0:
            raise ValueError("n must be >= 0")
        if self.index + n > 2**_BITS:
            raise DomainError("Sobol index would exceed 2^32")
        idx = np.arange(self.index, self.index + n, dtype=np.uint64)
        gray = idx ^ (idx >> np.uint64(1))
        x = np.zeros((n, self.dim), dtype=np.uint64)
        for bit in range(_BITS):
            on = ((gray >> np.uint64(bit)) & np.uint64(1)).astype(bool)
            if not on.any():
                continue
            x[on] ^= self.directions[:, bit]
        self.index += n
        return x ^ self.shift

    def draw(self, n: int) -> np.ndarray:
        x = self.draw_integers(n).astype(np.float64) / _SCALE
        # a shifted point can land on 0; fold it into the open interval
        x[x == 0.0] = 0.5 / _SCALE
        return x


def sobol_points(dim: int, n: int, seed: int | None = None) -> np.ndarray:
    """First ``n`` points of the (shifted) Sobol sequence, shape ``(n, dim)``, in (0, 1)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return SobolGenerator(dim, seed).draw(n)


# ---------------------------------------------------------------------------
# Inverse CDFs

# Acklam's rational approximation (relative error ~1.2e-9), refined by a Halley step.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549671010373563e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _horner(coeffs, x):
    acc = np.zeros_like(x) + coeffs[0]
    for c in coeffs[1:]:
        acc = acc * x + c
    return acc


def norm_ppf(u) -> np.ndarray:
    """Inverse standard normal CDF on (0, 1)."""
    u = np.asarray(u, dtype=np.float64)
    if np.any(~(u > 0.0) | ~(u < 1.0)):
        raise DomainError("inverse normal CDF needs arguments strictly inside (0, 1)")
    x = np.empty_like(u)
    lo = u < _P_LOW
    hi = u > 1.0 - _P_LOW
    mid = ~(lo | hi)

    q = u[mid] - 0.5
    r = q * q
    x[mid] = _horner(_A, r) * q / (_horner(_B, r) * r + 1.0)
    q = np.sqrt(-2.0 * np.log(u[lo]))
    x[lo] = _horner(_C, q) / (_horner(_D, q) * q + 1.0)
    q = np.sqrt(-2.0 * np.log1p(-u[hi]))
    x[hi] = -_horner(_C, q) / (_horner(_D, q) * q + 1.0)

    # Halley step on Phi(x) - u. The upper tail is refined through the
    # complementary probability to avoid cancellation in 1 - u.
    upper = x > 0
    target = np.where(upper, 1.0 - u, u)
    xs = np.where(upper, -x, x)
    e = 0.5 * erfc(-xs / math.sqrt(2.0)) - target
    step = e * math.sqrt(2.0 * math.pi) * np.exp(xs * xs / 2.0)
    xs = xs - step / (1.0 + xs * step / 2.0)
    return np.where(upper, -xs, xs)


def norm_cdf(x) -> np.ndarray:
    return 0.5 * erfc(-np.asarray(x, dtype=np.float64) / math.sqrt(2.0))


def to_gaussian(points) -> np.ndarray:
    """Coordinatewise inverse standard-normal CDF."""
    return norm_ppf(points)


def to_uniform_ball(points) -> np.ndarray:
    """Map cube points onto the open unit ball.

    With one column the map is ``2u - 1``. With ``d + 1`` columns the result
    is ``d``-dimensional: column ``d - 1`` sets the radius ``u**(1/d)`` and the
    remaining ``d`` columns, sent through the normal inverse CDF and
    normalized, set the direction.
    """
    u = np.asarray(points, dtype=np.float64)
    if u.ndim == 1:
        u = u[:, None]
    if np.any(~(u > 0.0) | ~(u < 1.0)):
        raise DomainError("ball map needs coordinates strictly inside (0, 1)")
    if u.shape[1] == 1:
        return 2.0 * u - 1.0
    d = u.shape[1] - 1
    dir_cols = [j for j in range(d + 1) if j != d - 1]
    g = norm_ppf(u[:, dir_cols])
    norms = np.linalg.norm(g, axis=1)
    # the unshifted first Sobol point maps to the origin; give it a fixed direction
    zero = norms == 0.0
    g[zero] = 0.0
    g[zero, 0] = 1.0
    norms[zero] = 1.0
    radius = u[:, d - 1] ** (1.0 / d)
    return g / norms[:, None] * radius[:, None]


def _inverse_cdf(kind: str, u: np.ndarray) -> np.ndarray:
    if kind == "uniform01_coordinatewise":
        return u.copy()
    if kind == "standard_gaussian_coordinatewise":
        return to_gaussian(u)
    return to_uniform_ball(u)


# ---------------------------------------------------------------------------
# Lattice construction


def univariate_quantiles(prior: PriorSpec, n: int) -> Lattice:
    if prior.dim != 1:
        raise DomainError(f"univariate quantiles need a 1-d prior, got d={prior.dim}")
    if n < 1:
        raise ValueError("n must be >= 1")
    u = np.arange(1, n + 1, dtype=np.float64) / (n + 1)
    return Lattice(_inverse_cdf(prior.kind, u[:, None]), prior, "univariate_quantiles", None)


def uniform_grid(dim: int, n: int) -> np.ndarray:
    """``n`` cell midpoints of the smallest regular ``g**dim`` grid with at least n cells.

    When ``n < g**dim`` the cells are taken at evenly strided flat indices.
    """
    g = max(1, int(round(n ** (1.0 / dim))))
    while g**dim < n:
        g += 1
    total = g**dim
    flat = (np.arange(n, dtype=np.int64) * total) // n
    coords = np.stack(np.unravel_index(flat, (g,) * dim), axis=1)
    return (coords + 0.5) / g


def build_lattice(prior: PriorSpec, n: int, source: str = "sobol", seed: int | None = 0) -> Lattice:
    if (source, prior.kind) not in VALID_PAIRS:
        valid = ", ".join(f"{s}/{k}" for s, k in VALID_PAIRS)
        raise ConfigError(f"unsupported lattice {source}/{prior.kind}; valid pairs: {valid}")
    if n < 1:
        raise ConfigError("lattice size must be >= 1")
    if source == "univariate_quantiles":
        return univariate_quantiles(prior, n)
    if source == "uniform_grid":
        return Lattice(_inverse_cdf(prior.kind, uniform_grid(prior.dim, n)), prior, source, None)
    cube_dim = prior.dim + 1 if (prior.kind == "uniform_ball" and prior.dim > 1) else prior.dim
    if cube_dim > MAX_SOBOL_DIM:
        raise ConfigError(f"Sobol lattice supports cube dimension <= {MAX_SOBOL_DIM}")
    u = sobol_points(cube_dim, n, seed)
    return Lattice(_inverse_cdf(prior.kind, u), prior, source, seed)


def sample_prior(prior: PriorSpec, count: int, seed: int) -> np.ndarray:
    """Seeded i.i.d. draws from the prior via inverse-CDF transformed uniforms."""
    if count < 1:
        raise ValueError("count must be >= 1")
    cube_dim = prior.dim + 1 if (prior.kind == "uniform_ball" and prior.dim > 1) else prior.dim
    u = np.random.default_rng(seed).random((count, cube_dim))
    u[u == 0.0] = np.nextafter(0.0, 1.0)
    return _inverse_cdf(prior.kind, u)
