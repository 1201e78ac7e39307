"""Additive single-index regression structure.

A model is a sum of single-index terms ``gamma * g(index' theta)`` split
into a block driven by the stochastically trending regressors ``x`` and a
block driven by the trending-stationary regressors ``z``.  Index vectors are
identified by unit norm with a positive leading coordinate.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
import numpy as np

from .exceptions import (
    ConfigurationError,
    DegenerateParameterError,
    ShapeError,
)

_SQRT_2PI = math.sqrt(2.0 * math.pi)


class LinkKind(enum.Enum):
    IDENTITY = "identity"
    POWER = "power"
    GAUSS_PDF = "gauss_pdf"
    HERMITE_EXP = "hermite_exp"
    HERMITE_EXP_LINEAR = "hermite_exp_linear"


@dataclass(frozen=True)
class LinkSpec:
    """A known link function with exact first and second derivatives."""

    kind: LinkKind
    power: int = 0

    def __post_init__(self):
        if self.kind is LinkKind.POWER and self.power < 2:
            raise ConfigurationError("power links need an exponent >= 2")

    def label(self) -> str:
        if self.kind is LinkKind.POWER:
            return f"power:{self.power}"
        return self.kind.value


IDENTITY = LinkSpec(LinkKind.IDENTITY)
GAUSS_PDF = LinkSpec(LinkKind.GAUSS_PDF)
HERMITE_EXP = LinkSpec(LinkKind.HERMITE_EXP)
HERMITE_EXP_LINEAR = LinkSpec(LinkKind.HERMITE_EXP_LINEAR)


def power_link(k: int) -> LinkSpec:
    return LinkSpec(LinkKind.POWER, k)


def link_value(link: LinkSpec, u):
    u = np.asarray(u, dtype=float)
    if link.kind is LinkKind.IDENTITY:
        return u
    if link.kind is LinkKind.POWER:
        return u**link.power
    if link.kind is LinkKind.GAUSS_PDF:
        return np.exp(-0.5 * u * u) / _SQRT_2PI
    if link.kind is LinkKind.HERMITE_EXP:
        return np.exp(-u * u)
    return u * np.exp(-u * u)


def link_deriv(link: LinkSpec, u):
    u = np.asarray(u, dtype=float)
    if link.kind is LinkKind.IDENTITY:
        return np.ones_like(u)
    if link.kind is LinkKind.POWER:
        return link.power * u ** (link.power - 1)
    if link.kind is LinkKind.GAUSS_PDF:
        return -u * np.exp(-0.5 * u * u) / _SQRT_2PI
    if link.kind is LinkKind.HERMITE_EXP:
        return -2.0 * u * np.exp(-u * u)
    return (1.0 - 2.0 * u * u) * np.exp(-u * u)


def link_second_deriv(link: LinkSpec, u):
    u = np.asarray(u, dtype=float)
    if link.kind is LinkKind.IDENTITY:
        return np.zeros_like(u)
    if link.kind is LinkKind.POWER:
        k = link.power
        return k * (k - 1) * u ** (k - 2)
    if link.kind is LinkKind.GAUSS_PDF:
        return (u * u - 1.0) * np.exp(-0.5 * u * u) / _SQRT_2PI
    if link.kind is LinkKind.HERMITE_EXP:
        return (4.0 * u * u - 2.0) * np.exp(-u * u)
    return (4.0 * u * u * u - 6.0 * u) * np.exp(-u * u)


@dataclass(frozen=True)
class HRegular:
    """Asymptotically homogeneous class: g(lambda u) = lambda^k g(u)."""

    order: int

    def nu(self, lam: float) -> float:
        return lam**self.order

    def nu_dot(self, lam: float) -> float:
        return self.order * lam ** (self.order - 1)


@dataclass(frozen=True)
class IRegular:
    """Absolutely integrable class (density-like links)."""


def classify_link(link: LinkSpec):
    """Regularity class of a link: HRegular(order) or IRegular()."""
    if link.kind is LinkKind.IDENTITY:
        return HRegular(1)
    if link.kind is LinkKind.POWER:
        return HRegular(link.power)
    return IRegular()


def _is_odd_link(link: LinkSpec) -> bool:
    # g(-u) = -g(u); sign flips of theta are absorbed by flipping gamma.
    if link.kind is LinkKind.HERMITE_EXP_LINEAR:
        return True
    if link.kind is LinkKind.IDENTITY:
        return True
    if link.kind is LinkKind.POWER:
        return link.power % 2 == 1
    return False


@dataclass(frozen=True)
class ModelSpec:
    """Block structure of the regression function."""

    nonstat_links: tuple[LinkSpec, ...]
    stat_links: tuple[LinkSpec, ...]
    d1: int
    d2: int
    share_theta1: bool = False

    def __post_init__(self):
        object.__setattr__(self, "nonstat_links", tuple(self.nonstat_links))
        object.__setattr__(self, "stat_links", tuple(self.stat_links))
        if self.p1 + self.p2 < 1:
            raise ConfigurationError("model needs at least one index block")
        if self.d1 < 1 or self.d2 < 1:
            raise ConfigurationError("index dimensions must be >= 1")
        any_iregular = any(
            isinstance(classify_link(l), IRegular) for l in self.nonstat_links
        )
        if any_iregular and self.p1 > 0 and not self.share_theta1:
            raise ConfigurationError(
                "integrable nonstationary links require a shared index vector"
            )

    @property
    def p1(self) -> int:
        return len(self.nonstat_links)

    @property
    def p2(self) -> int:
        return len(self.stat_links)

    @property
    def n_theta1_blocks(self) -> int:
        if self.p1 == 0:
            return 0
        return 1 if self.share_theta1 else self.p1

    @property
    def n_params(self) -> int:
        return (
            self.n_theta1_blocks * self.d1
            + self.p1
            + self.p2 * self.d2
            + self.p2
        )


@dataclass
class ParamVector:
    """Index vectors and coefficients for every block of a ModelSpec."""

    theta1: list[np.ndarray] = field(default_factory=list)
    gamma1: np.ndarray = field(default_factory=lambda: np.zeros(0))
    theta2: list[np.ndarray] = field(default_factory=list)
    gamma2: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.theta1 = [np.asarray(t, dtype=float).ravel() for t in self.theta1]
        self.theta2 = [np.asarray(t, dtype=float).ravel() for t in self.theta2]
        self.gamma1 = np.asarray(self.gamma1, dtype=float).ravel()
        self.gamma2 = np.asarray(self.gamma2, dtype=float).ravel()

    def copy(self) -> "ParamVector":
        return ParamVector(
            [t.copy() for t in self.theta1],
            self.gamma1.copy(),
            [t.copy() for t in self.theta2],
            self.gamma2.copy(),
        )


def validate_params(model: ModelSpec, params: ParamVector):
    if len(params.theta1) != model.n_theta1_blocks:
        raise ShapeError(
            f"expected {model.n_theta1_blocks} nonstationary index vectors, "
            f"got {len(params.theta1)}"
        )
    if params.gamma1.size != model.p1 or params.gamma2.size != model.p2:
        raise ShapeError("coefficient count does not match the model blocks")
    if len(params.theta2) != model.p2:
        raise ShapeError("stationary index vector count does not match")
    for t in params.theta1:
        if t.size != model.d1:
            raise ShapeError(f"nonstationary index must have length {model.d1}")
    for t in params.theta2:
        if t.size != model.d2:
            raise ShapeError(f"stationary index must have length {model.d2}")


@dataclass
class Dataset:
    """Observed rows (y, x, z) plus free-form provenance metadata."""

    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        n = self.y.size
        if self.X.shape[0] != n or self.Z.shape[0] != n:
            raise ShapeError("y, X and Z must have the same number of rows")
        for name, arr in (("y", self.y), ("X", self.X), ("Z", self.Z)):
            if not np.all(np.isfinite(arr)):
                raise ConfigurationError(f"dataset column block {name} has non-finite entries")

    @property
    def n(self) -> int:
        return self.y.size


class ParamLayout:
    """Flat packing of a ParamVector, column-compatible with the Jacobian.

    Order: nonstationary theta blocks, gamma1, stationary theta blocks,
    gamma2.  Also provides the conventional scalar parameter names used by the
    Monte Carlo tables (gamma1, theta11, theta12, gamma2, ...).
    """

    def __init__(self, model: ModelSpec):
        self.model = model
        pos = 0
        self.theta1_slices = []
        for _ in range(model.n_theta1_blocks):
            self.theta1_slices.append(slice(pos, pos + model.d1))
            pos += model.d1
        self.gamma1_slice = slice(pos, pos + model.p1)
        pos += model.p1
        self.theta2_slices = []
        for _ in range(model.p2):
            self.theta2_slices.append(slice(pos, pos + model.d2))
            pos += model.d2
        self.gamma2_slice = slice(pos, pos + model.p2)
        pos += model.p2
        self.size = pos

    def pack(self, params: ParamVector) -> np.ndarray:
        flat = np.empty(self.size)
        for sl, t in zip(self.theta1_slices, params.theta1):
            flat[sl] = t
        flat[self.gamma1_slice] = params.gamma1
        for sl, t in zip(self.theta2_slices, params.theta2):
            flat[sl] = t
        flat[self.gamma2_slice] = params.gamma2
        return flat

    def unpack(self, flat: np.ndarray) -> ParamVector:
        return ParamVector(
            [flat[sl].copy() for sl in self.theta1_slices],
            flat[self.gamma1_slice].copy(),
            [flat[sl].copy() for sl in self.theta2_slices],
            flat[self.gamma2_slice].copy(),
        )

    def param_names(self) -> list[str]:
        """Scalar names in table order: per block gamma then theta coords."""
        model = self.model
        names = []
        for j in range(model.p1):
            block = 1 if model.share_theta1 else j + 1
            names.append(f"gamma{j + 1}")
            if model.share_theta1 and j > 0:
                continue
            names.extend(f"theta{block}{i + 1}" for i in range(model.d1))
        for j in range(model.p2):
            g_idx = model.p1 + j + 1
            names.append(f"gamma{g_idx}")
            names.extend(f"theta{g_idx}{i + 1}" for i in range(model.d2))
        return names

    def named_errors(self, est: ParamVector, truth: ParamVector) -> dict[str, float]:
        """Signed estimation errors keyed by scalar name, sign-aligned.

        An estimated index vector is flipped when it points away from the
        true one (theta' theta0 < 0) before differencing; coefficients are
        differenced directly.
        """
        model = self.model
        out = {}
        th_est1 = [t.copy() for t in est.theta1]
        for k, t in enumerate(th_est1):
            if float(t @ truth.theta1[k]) < 0:
                th_est1[k] = -t
        th_est2 = [t.copy() for t in est.theta2]
        for k, t in enumerate(th_est2):
            if float(t @ truth.theta2[k]) < 0:
                th_est2[k] = -t
        for j in range(model.p1):
            block = 0 if model.share_theta1 else j
            out[f"gamma{j + 1}"] = float(est.gamma1[j] - truth.gamma1[j])
            if model.share_theta1 and j > 0:
                continue
            diff = th_est1[block] - truth.theta1[block]
            bname = 1 if model.share_theta1 else j + 1
            for i in range(model.d1):
                out[f"theta{bname}{i + 1}"] = float(diff[i])
        for j in range(model.p2):
            g_idx = model.p1 + j + 1
            out[f"gamma{g_idx}"] = float(est.gamma2[j] - truth.gamma2[j])
            diff = th_est2[j] - truth.theta2[j]
            for i in range(model.d2):
                out[f"theta{g_idx}{i + 1}"] = float(diff[i])
        return out


def _block_indices(model: ModelSpec, params: ParamVector):
    """(link, theta, gamma) triples for the nonstationary block."""
    for j, link in enumerate(model.nonstat_links):
        t = params.theta1[0] if model.share_theta1 else params.theta1[j]
        yield link, t, params.gamma1[j]


def regression_mean(model: ModelSpec, params: ParamVector, x, z):
    """Regression function value(s); accepts single rows or matrices."""
    validate_params(model, params)
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    single = x.ndim == 1 and z.ndim == 1
    X = np.atleast_2d(x)
    Z = np.atleast_2d(z)
    if model.p1 > 0 and X.shape[1] != model.d1:
        raise ShapeError(f"x must have {model.d1} columns, got {X.shape[1]}")
    if model.p2 > 0 and Z.shape[1] != model.d2:
        raise ShapeError(f"z must have {model.d2} columns, got {Z.shape[1]}")
    out = np.zeros(max(X.shape[0], Z.shape[0]))
    for link, theta, gamma in _block_indices(model, params):
        out += gamma * link_value(link, X @ theta)
    for j, link in enumerate(model.stat_links):
        out += params.gamma2[j] * link_value(link, Z @ params.theta2[j])
    return float(out[0]) if single else out


def residuals(model: ModelSpec, params: ParamVector, data: Dataset) -> np.ndarray:
    """e_t = y_t - regression mean at row t."""
    return data.y - regression_mean(model, params, data.X, data.Z)


def param_jacobian(model: ModelSpec, params: ParamVector, data: Dataset) -> np.ndarray:
    """Row-wise derivative of the regression mean in the packed parameters.

    Column order matches ParamLayout: for each nonstationary index block
    ``gamma_j * g_j'(x' theta_j) * x'`` (summed over the block's links when
    the index is shared), then the link values for gamma1, then the same
    for the stationary block.
    """
    validate_params(model, params)
    layout = ParamLayout(model)
    n = data.n
    J = np.zeros((n, layout.size))
    X, Z = data.X, data.Z
    if model.p1 > 0:
        if X.shape[1] != model.d1:
            raise ShapeError(f"X must have {model.d1} columns")
        for j, link in enumerate(model.nonstat_links):
            block = 0 if model.share_theta1 else j
            theta = params.theta1[block]
            u = X @ theta
            J[:, layout.theta1_slices[block]] += (
                params.gamma1[j] * link_deriv(link, u)
            )[:, None] * X
            J[:, layout.gamma1_slice.start + j] = link_value(link, u)
    if model.p2 > 0:
        if Z.shape[1] != model.d2:
            raise ShapeError(f"Z must have {model.d2} columns")
        for j, link in enumerate(model.stat_links):
            u = Z @ params.theta2[j]
            J[:, layout.theta2_slices[j]] = (
                params.gamma2[j] * link_deriv(link, u)
            )[:, None] * Z
            J[:, layout.gamma2_slice.start + j] = link_value(link, u)
    return J


def _unitize(theta: np.ndarray):
    nrm = float(np.linalg.norm(theta))
    if nrm <= 0.0 or not np.isfinite(nrm):
        raise DegenerateParameterError("cannot normalize a zero index vector")
    unit = theta / nrm
    sign = 1.0
    for v in unit:
        if abs(v) > 1e-12:
            sign = 1.0 if v > 0 else -1.0
            break
    return sign * unit, nrm, sign


def normalize(params: ParamVector, model: ModelSpec) -> ParamVector:
    """Rescale every index vector to unit norm with a positive lead.

    Coefficients are compensated only for identity links (gamma picks up the
    extracted norm and sign, so the regression mean is unchanged); for any
    other link the coefficient is left alone and the caller re-optimizes.
    """
    validate_params(model, params)
    out = params.copy()
    for b in range(model.n_theta1_blocks):
        unit, nrm, sign = _unitize(out.theta1[b])
        out.theta1[b] = unit
        for j, link in enumerate(model.nonstat_links):
            jb = 0 if model.share_theta1 else j
            if jb == b and link.kind is LinkKind.IDENTITY:
                out.gamma1[j] *= nrm * sign
    for b in range(model.p2):
        unit, nrm, sign = _unitize(out.theta2[b])
        out.theta2[b] = unit
        if model.stat_links[b].kind is LinkKind.IDENTITY:
            out.gamma2[b] *= nrm * sign
    return out


def renormalize_for_fit(params: ParamVector, model: ModelSpec) -> ParamVector:
    """Normalization used inside the optimizer.

    Same convention as :func:`normalize`, but compensates the coefficient
    whenever the link allows it exactly: homogeneous links absorb the norm
    as nrm^k and odd links absorb the sign flip, so the regression mean is
    preserved wherever possible.
    """
    out = params.copy()
    for b in range(model.n_theta1_blocks):
        unit, nrm, sign = _unitize(out.theta1[b])
        out.theta1[b] = unit
        for j, link in enumerate(model.nonstat_links):
            jb = 0 if model.share_theta1 else j
            if jb != b:
                continue
            cls = classify_link(link)
            if isinstance(cls, HRegular):
                out.gamma1[j] *= nrm**cls.order * sign**cls.order
            elif _is_odd_link(link):
                out.gamma1[j] *= sign
    for b in range(model.p2):
        unit, nrm, sign = _unitize(out.theta2[b])
        out.theta2[b] = unit
        link = model.stat_links[b]
        cls = classify_link(link)
        if isinstance(cls, HRegular):
            out.gamma2[b] *= nrm**cls.order * sign**cls.order
        elif _is_odd_link(link):
            out.gamma2[b] *= sign
    return out
