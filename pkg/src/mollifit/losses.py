"""Convex losses, their subgradients, and Gaussian-smoothed versions.

The smoothing kernel is ``phi_m(x) = sqrt(m/pi) * exp(-m x^2)``, the density
of ``N(0, 1/(2m))``.  Convolving a loss ``rho`` with ``phi_m`` yields an
infinitely differentiable surrogate ``rho_m`` whose first two derivatives
stand in for the subgradient and the (generally distributional) second
derivative of ``rho``.  For the three kink losses the convolution has a
closed form in ``erf``/``Phi`` terms; an independent quadrature oracle is
provided so the closed forms can be cross-checked numerically.

All evaluation functions are vectorized over ``u`` and are pure functions of
their arguments, so they are safe to call from any number of threads.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import erf, ndtr

from .exceptions import ConfigurationError, UnsupportedLossError

_SQRT_PI = math.sqrt(math.pi)
_SQRT_2PI = math.sqrt(2.0 * math.pi)

# Exponents below this are flushed to exactly zero instead of producing
# denormals (relevant for the huge smoothing orders used at large n).
_EXP_FLUSH = -700.0


class LossKind(enum.Enum):
    LAD = "lad"
    QUANTILE = "quantile"
    HUBER = "huber"
    SQUARED_ERROR = "se"


@dataclass(frozen=True)
class LossSpec:
    """A member of the convex loss catalog.

    ``param`` is the quantile level for ``QUANTILE`` and the threshold for
    ``HUBER``; it is ignored otherwise.
    """

    kind: LossKind
    param: float = 0.0

    def __post_init__(self):
        if self.kind is LossKind.QUANTILE and not 0.0 < self.param < 1.0:
            raise ConfigurationError(
                f"quantile level must lie in (0,1), got {self.param}"
            )
        if self.kind is LossKind.HUBER and not self.param > 0.0:
            raise ConfigurationError(
                f"huber threshold must be positive, got {self.param}"
            )

    @property
    def lipschitz(self) -> float:
        """Global Lipschitz constant of the loss (1, max(tau,1-tau) or c)."""
        if self.kind is LossKind.LAD:
            return 1.0
        if self.kind is LossKind.QUANTILE:
            return max(self.param, 1.0 - self.param)
        if self.kind is LossKind.HUBER:
            return self.param
        raise UnsupportedLossError(
            "squared-error loss has no global Lipschitz constant"
        )

    @property
    def is_lipschitz(self) -> bool:
        return self.kind is not LossKind.SQUARED_ERROR

    def label(self) -> str:
        if self.kind in (LossKind.QUANTILE, LossKind.HUBER):
            return f"{self.kind.value}:{self.param:g}"
        return self.kind.value


LAD = LossSpec(LossKind.LAD)
SQUARED_ERROR = LossSpec(LossKind.SQUARED_ERROR)


def quantile_loss(tau: float) -> LossSpec:
    return LossSpec(LossKind.QUANTILE, tau)


def huber_loss(c: float) -> LossSpec:
    return LossSpec(LossKind.HUBER, c)


@dataclass(frozen=True)
class MollifierOrder:
    """Index of the smoothing sequence; larger means less smoothing."""

    m: float

    def __post_init__(self):
        if not self.m >= 1.0:
            raise ConfigurationError(f"mollifier order must be >= 1, got {self.m}")

    @staticmethod
    def from_sample_size(n: int, epsilon: float = 0.1) -> "MollifierOrder":
        """Sample-size rule m = floor(n^(2+epsilon)), epsilon > 0."""
        if not epsilon > 0.0:
            raise ConfigurationError("epsilon must be positive")
        return MollifierOrder(float(math.floor(n ** (2.0 + epsilon))))


def _as_m(m) -> float:
    if isinstance(m, MollifierOrder):
        return m.m
    m = float(m)
    if not m >= 1.0:
        raise ConfigurationError(f"mollifier order must be >= 1, got {m}")
    return m


def _gexp(z):
    """exp(z) with underflow flushed to exact zero below exp(-700)."""
    z = np.asarray(z, dtype=float)
    out = np.exp(np.maximum(z, _EXP_FLUSH))
    out = np.where(z < _EXP_FLUSH, 0.0, out)
    return out


def _phi(t):
    """Standard normal density with flushed tails."""
    return _gexp(-0.5 * np.asarray(t, dtype=float) ** 2) / _SQRT_2PI


def eval_loss(spec: LossSpec, u):
    """Evaluate the loss at ``u`` (vectorized)."""
    u = np.asarray(u, dtype=float)
    if spec.kind is LossKind.LAD:
        out = np.abs(u)
    elif spec.kind is LossKind.QUANTILE:
        tau = spec.param
        out = u * (tau - (u < 0))
    elif spec.kind is LossKind.HUBER:
        c = spec.param
        au = np.abs(u)
        out = np.where(au <= c, 0.5 * u * u, c * au - 0.5 * c * c)
    else:
        out = u * u
    return out if out.ndim else float(out)


def subgrad(spec: LossSpec, u):
    """Monotone subgradient selection psi(u).

    At kinks the fixed selections are psi(0)=0 for LAD, psi(0)=tau-1/2 for
    the quantile loss and psi(+-c)=+-c for Huber.
    """
    u = np.asarray(u, dtype=float)
    if spec.kind is LossKind.LAD:
        out = np.sign(u)
    elif spec.kind is LossKind.QUANTILE:
        tau = spec.param
        out = np.where(u > 0, tau, np.where(u < 0, tau - 1.0, tau - 0.5))
    elif spec.kind is LossKind.HUBER:
        c = spec.param
        out = np.clip(u, -c, c)
    else:
        out = 2.0 * u
    return out if out.ndim else float(out)


def _require_lipschitz(spec: LossSpec, what: str):
    if spec.kind is LossKind.SQUARED_ERROR:
        raise UnsupportedLossError(
            f"{what} is not defined for squared-error loss; it is already smooth"
        )


def _lad_eval(m, u):
    # E|u + N(0, 1/(2m))| = u*erf(sqrt(m) u) + exp(-m u^2)/sqrt(pi m)
    sm = np.sqrt(m)
    return u * erf(sm * u) + _gexp(-m * u * u) / (_SQRT_PI * sm)


def mollified_eval(spec: LossSpec, m, u):
    """Gaussian-smoothed loss rho_m(u) in closed form."""
    _require_lipschitz(spec, "mollified evaluation")
    m = _as_m(m)
    u = np.asarray(u, dtype=float)
    if spec.kind is LossKind.LAD:
        out = _lad_eval(m, u)
    elif spec.kind is LossKind.QUANTILE:
        # rho_tau(u) = (tau - 1/2) u + |u|/2, and smoothing is linear.
        out = (spec.param - 0.5) * u + 0.5 * _lad_eval(m, u)
    else:
        c = spec.param
        s2 = 0.5 / m
        s = math.sqrt(s2)
        a = (c - u) / s
        b = (c + u) / s
        # E[((Z - t)_+)^2] for standard normal Z.
        tail_a = (1.0 + a * a) * ndtr(-a) - a * _phi(a)
        tail_b = (1.0 + b * b) * ndtr(-b) - b * _phi(b)
        out = 0.5 * (u * u + s2) - 0.5 * s2 * (tail_a + tail_b)
    return out if out.ndim else float(out)


def mollified_grad(spec: LossSpec, m, u):
    """First derivative rho_m'(u); monotone nondecreasing in u."""
    _require_lipschitz(spec, "mollified gradient")
    m = _as_m(m)
    u = np.asarray(u, dtype=float)
    if spec.kind is LossKind.LAD:
        out = erf(np.sqrt(m) * u)
    elif spec.kind is LossKind.QUANTILE:
        out = (spec.param - 0.5) + 0.5 * erf(np.sqrt(m) * u)
    else:
        c = spec.param
        s = math.sqrt(0.5 / m)
        a = (c - u) / s
        b = (c + u) / s
        # E[clip(u + s Z, -c, c)] via the two one-sided censored means.
        out = u - s * (_phi(a) - a * ndtr(-a)) + s * (_phi(b) - b * ndtr(-b))
    return out if out.ndim else float(out)


def mollified_hess(spec: LossSpec, m, u):
    """Second derivative rho_m''(u) >= 0."""
    _require_lipschitz(spec, "mollified hessian")
    m = _as_m(m)
    u = np.asarray(u, dtype=float)
    if spec.kind is LossKind.LAD:
        out = 2.0 * np.sqrt(m / math.pi) * _gexp(-m * u * u)
    elif spec.kind is LossKind.QUANTILE:
        out = np.sqrt(m / math.pi) * _gexp(-m * u * u)
    else:
        c = spec.param
        s = math.sqrt(0.5 / m)
        out = ndtr((c - u) / s) + ndtr((c + u) / s) - 1.0
    return out if out.ndim else float(out)


def gap_bound(spec: LossSpec, m) -> float:
    """Uniform bound on |rho_m - rho|: lipschitz / sqrt(pi m).

    The constant is the Lipschitz constant times the first absolute moment
    of the smoothing kernel, E|N(0,1/(2m))| = 1/sqrt(pi m).
    """
    if not spec.is_lipschitz:
        raise UnsupportedLossError("gap bound requires a Lipschitz loss")
    return spec.lipschitz / math.sqrt(math.pi * _as_m(m))


def _kink_points(spec: LossSpec):
    if spec.kind is LossKind.HUBER:
        return (-spec.param, spec.param)
    return (0.0,)


class OracleResult(NamedTuple):
    value: float
    accuracy_warning: bool


# Domain half-width for the substituted integral; exp(-13.5^2) ~ 1e-80.
_ORACLE_SPAN = 13.5
_MAX_PANEL_WIDTH = 4.0
_LEGENDRE_CACHE: dict = {}


def _gauss_legendre(nodes: int):
    rule = _LEGENDRE_CACHE.get(nodes)
    if rule is None:
        rule = np.polynomial.legendre.leggauss(nodes)
        _LEGENDRE_CACHE[nodes] = rule
    return rule


def _oracle_value(spec, m, u, order, nodes):
    sm = math.sqrt(m)
    # Orders 1 and 2 integrate the subgradient instead of the loss (one
    # integration by parts): the Hermite-factor representation of rho*H_k
    # multiplies node/weight noise by m^(k/2), which swamps the tiny true
    # value of far-from-kink hessians at large m.
    if order == 0:
        integrand, hermite, prefactor = eval_loss, lambda y: np.ones_like(y), 1.0
    elif order == 1:
        integrand, hermite, prefactor = subgrad, lambda y: np.ones_like(y), 1.0
    else:
        integrand, hermite, prefactor = subgrad, lambda y: 2.0 * y, sm
    # Split at the image of each loss kink so every segment is analytic.
    cuts = [-_ORACLE_SPAN]
    for k in _kink_points(spec):
        yk = sm * (k - u)
        if -_ORACLE_SPAN < yk < _ORACLE_SPAN:
            cuts.append(yk)
    cuts.append(_ORACLE_SPAN)
    cuts.sort()
    ref_x, ref_w = _gauss_legendre(nodes)
    contribs = []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        npanels = max(1, math.ceil((hi - lo) / _MAX_PANEL_WIDTH))
        edges = np.linspace(lo, hi, npanels + 1)
        for a, b in zip(edges[:-1], edges[1:]):
            half = 0.5 * (b - a)
            y = 0.5 * (a + b) + half * ref_x
            f = integrand(spec, u + y / sm) * hermite(y) * _gexp(-y * y)
            contribs.append(half * ref_w * f)
    # The signed node contributions cancel heavily; compensated summation
    # keeps the (prefactor-amplified) result near 1 ulp.
    total = math.fsum(np.concatenate(contribs))
    return total * prefactor / _SQRT_PI


def quadrature_oracle(spec: LossSpec, m, u: float, order: int, nodes: int = 128) -> OracleResult:
    """Numerical value of the order-th derivative of rho_m at u.

    Integrates the substituted convolution integral, e.g. for order 0
    ``1/sqrt(pi) * int rho(u + y/sqrt(m)) exp(-y^2) dy``; orders 1 and 2 use
    the once-by-parts form with the subgradient in place of the loss, which
    keeps the conditioning independent of m.  A composite Gauss rule is
    applied per smooth piece, splitting the domain at the images of the loss
    kinks (a single global Gauss-Hermite rule cannot see the kinks and stalls
    near 1e-3 accuracy).  ``nodes`` is the Gauss order per panel.  Used only
    by tests and the loss-probe command; the result carries an embedded
    accuracy flag obtained by halving the node count.
    """
    _require_lipschitz(spec, "quadrature oracle")
    if order not in (0, 1, 2):
        raise ConfigurationError(f"derivative order must be 0, 1 or 2, got {order}")
    if nodes < 32:
        raise ConfigurationError(f"need at least 32 quadrature nodes, got {nodes}")
    m = _as_m(m)
    u = float(u)
    value = _oracle_value(spec, m, u, order, nodes)
    check = _oracle_value(spec, m, u, order, max(8, nodes // 2))
    warn = abs(value - check) > 1e-9 * (1.0 + abs(value))
    return OracleResult(value, warn)


def kde_mollifier_order(residuals) -> MollifierOrder:
    """Smoothing order matched to a Silverman-type density bandwidth.

    The second-derivative average of a kink loss is a kernel density value
    at the kink, so a consistent estimate needs the kernel scale to follow a
    density-estimation bandwidth (1/sqrt(2m) ~ n^(-1/5)), not the fast
    n^(2+eps) schedule used for the asymptotic theory.
    """
    r = np.asarray(residuals, dtype=float)
    if r.size < 2:
        raise ConfigurationError("need at least 2 residuals for a bandwidth")
    sd = float(np.std(r))
    iqr = float(np.quantile(r, 0.75) - np.quantile(r, 0.25))
    scale = min(sd, iqr / 1.349) if iqr > 0 else sd
    if scale <= 0:
        scale = max(abs(float(np.mean(r))), 1e-8)
    h = 1.06 * scale * r.size ** (-0.2)
    return MollifierOrder(max(1.0, 0.5 / (h * h)))
