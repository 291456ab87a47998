"""Pole-free learnable rational units with exact analytic derivatives.

A unit computes p(x) / (1 + softplus(q(x)) + eps), so the denominator is
structurally >= 1 + eps for every real input and every real coefficient
setting. q carries no constant term; the floor does that job. A residual
gate blends the unit with the identity (1D) or with the mean of its two
inputs (2D), so freshly initialized units are near-transparent.

Every evaluation returns the value together with closed-form partials
with respect to the input(s) and to all unit parameters; there is no
autodiff anywhere in the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit as sigmoid

DEFAULT_EPS = 1e-4
GATE_LOGIT_INIT = -4.0  # sigmoid(-4) ~ 0.018: near-identity at birth
INIT_NOISE_STD = 1e-3

# monomial exponents (i, j) meaning x^i * y^j
NUM_BASIS_2D = ((0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2))
DEN_BASIS_2D = ((1, 0), (0, 1), (2, 0), (1, 1), (0, 2))

_TINY = np.finfo(float).smallest_subnormal


def softplus_stable(u):
    """log(1 + e^u) without overflow; strictly positive even for u << 0."""
    arr = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite input")
    out = np.logaddexp(0.0, arr)
    # log1p(e^u) underflows to 0 below u ~ -745; keep the sign contract
    out = np.maximum(out, _TINY)
    return float(out) if out.ndim == 0 else out


def _poly_val_der(coeffs: np.ndarray, x: np.ndarray):
    """Horner evaluation of an ascending-coefficient polynomial and its
    first derivative in one sweep."""
    k = len(coeffs) - 1
    p = np.full_like(x, coeffs[k])
    dp = np.zeros_like(x)
    for j in range(k - 1, -1, -1):
        dp = dp * x + p
        p = p * x + coeffs[j]
    return p, dp


@dataclass
class EvalWithGrads:
    """Value plus exact partials of the gated output."""

    value: float
    d_input: float | np.ndarray
    d_params: np.ndarray  # ordered: numerator, denominator, gate logit


@dataclass
class RationalUnit1D:
    num_coeffs: np.ndarray  # ascending, degrees 0..m
    den_coeffs: np.ndarray  # ascending, degrees 1..n (no constant term)
    gate_logit: float = GATE_LOGIT_INIT
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        self.num_coeffs = np.asarray(self.num_coeffs, dtype=float)
        self.den_coeffs = np.asarray(self.den_coeffs, dtype=float)
        if self.num_coeffs.ndim != 1 or self.num_coeffs.size == 0:
            raise ValueError("numerator needs at least the constant coefficient")
        if self.den_coeffs.ndim != 1:
            raise ValueError("denominator coefficients must be a flat vector")
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    @property
    def degree_num(self) -> int:
        return len(self.num_coeffs) - 1

    @property
    def degree_den(self) -> int:
        return len(self.den_coeffs)

    @property
    def gate(self) -> float:
        return float(sigmoid(self.gate_logit))

    @property
    def param_count(self) -> int:
        return len(self.num_coeffs) + len(self.den_coeffs) + 1

    def get_params(self) -> np.ndarray:
        return np.concatenate([self.num_coeffs, self.den_coeffs, [self.gate_logit]])

    def set_params(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.param_count,):
            raise ValueError("parameter vector length mismatch")
        nm = len(self.num_coeffs)
        self.num_coeffs = vec[:nm].copy()
        self.den_coeffs = vec[nm:-1].copy()
        self.gate_logit = float(vec[-1])


@dataclass
class RationalUnit2D:
    num_coeffs: np.ndarray
    den_coeffs: np.ndarray
    num_basis: tuple = NUM_BASIS_2D
    den_basis: tuple = DEN_BASIS_2D
    gate_logit: float = GATE_LOGIT_INIT
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        self.num_coeffs = np.asarray(self.num_coeffs, dtype=float)
        self.den_coeffs = np.asarray(self.den_coeffs, dtype=float)
        self.num_basis = tuple((int(i), int(j)) for i, j in self.num_basis)
        self.den_basis = tuple((int(i), int(j)) for i, j in self.den_basis)
        if (0, 0) in self.den_basis:
            raise ValueError("denominator basis must not contain the constant monomial")
        if len(self.num_coeffs) != len(self.num_basis):
            raise ValueError("numerator coefficient/basis length mismatch")
        if len(self.den_coeffs) != len(self.den_basis):
            raise ValueError("denominator coefficient/basis length mismatch")
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    @property
    def gate(self) -> float:
        return float(sigmoid(self.gate_logit))

    @property
    def param_count(self) -> int:
        return len(self.num_coeffs) + len(self.den_coeffs) + 1

    def get_params(self) -> np.ndarray:
        return np.concatenate([self.num_coeffs, self.den_coeffs, [self.gate_logit]])

    def set_params(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.param_count,):
            raise ValueError("parameter vector length mismatch")
        nm = len(self.num_coeffs)
        self.num_coeffs = vec[:nm].copy()
        self.den_coeffs = vec[nm:-1].copy()
        self.gate_logit = float(vec[-1])


def init_identity(unit, rng: np.random.Generator):
    """Fresh copy of `unit` at the near-identity starting point.

    1D: coefficient of x^1 is exactly 1, everything else ~N(0, 1e-3^2).
    2D: coefficients of x and y are exactly 0.5 (matching the (x+y)/2
    gate anchor), everything else ~N(0, 1e-3^2). Gate logit -4.
    """
    if isinstance(unit, RationalUnit1D):
        num = rng.normal(0.0, INIT_NOISE_STD, size=len(unit.num_coeffs))
        if len(num) < 2:
            raise ValueError("identity init needs numerator degree >= 1")
        num[1] = 1.0
        den = rng.normal(0.0, INIT_NOISE_STD, size=len(unit.den_coeffs))
        return RationalUnit1D(num, den, GATE_LOGIT_INIT, unit.eps)
    if isinstance(unit, RationalUnit2D):
        num = rng.normal(0.0, INIT_NOISE_STD, size=len(unit.num_coeffs))
        bas = list(unit.num_basis)
        for mono in ((1, 0), (0, 1)):
            if mono not in bas:
                raise ValueError("identity init needs x and y in the numerator basis")
            num[bas.index(mono)] = 0.5
        den = rng.normal(0.0, INIT_NOISE_STD, size=len(unit.den_coeffs))
        return RationalUnit2D(num, den, unit.num_basis, unit.den_basis,
                              GATE_LOGIT_INIT, unit.eps)
    raise TypeError(f"not a rational unit: {type(unit).__name__}")


@dataclass
class Batch1D:
    value: np.ndarray
    d_input: np.ndarray
    raw: np.ndarray
    raw_dx: np.ndarray
    den: np.ndarray
    d_params: np.ndarray | None


def eval_1d_batch(unit: RationalUnit1D, x: np.ndarray,
                  with_params: bool = True) -> Batch1D:
    """Vectorized gated evaluation over a batch of scalar inputs."""
    x = np.asarray(x, dtype=float)
    p, dp = _poly_val_der(unit.num_coeffs, x)
    qc = np.concatenate([[0.0], unit.den_coeffs])
    q, dq = _poly_val_der(qc, x)
    sig = sigmoid(q)
    den = 1.0 + np.logaddexp(0.0, q) + unit.eps
    raw = p / den
    raw_dx = (dp - raw * sig * dq) / den
    a = unit.gate
    value = x + a * (raw - x)
    d_input = (1.0 - a) + a * raw_dx
    d_params = None
    if with_params:
        m1 = len(unit.num_coeffs)
        n = len(unit.den_coeffs)
        cols = np.empty((x.size, m1 + n + 1))
        xp = np.ones_like(x)
        inv_den = a / den
        for j in range(m1):
            cols[:, j] = inv_den * xp
            xp = xp * x
        scale = -a * p * sig / den ** 2
        xb = x.copy()
        for b in range(n):
            cols[:, m1 + b] = scale * xb
            xb = xb * x
        cols[:, -1] = (raw - x) * a * (1.0 - a)
        d_params = cols
    return Batch1D(value, d_input, raw, raw_dx, den, d_params)


def _monomial_table(basis, x, y):
    cols = np.empty((x.size, len(basis)))
    dxc = np.empty_like(cols)
    dyc = np.empty_like(cols)
    for t, (i, j) in enumerate(basis):
        xi = x ** i
        yj = y ** j
        cols[:, t] = xi * yj
        dxc[:, t] = i * (x ** (i - 1) if i > 0 else 0.0) * yj
        dyc[:, t] = j * xi * (y ** (j - 1) if j > 0 else 0.0)
    return cols, dxc, dyc


@dataclass
class Batch2D:
    value: np.ndarray
    d_input: np.ndarray  # (N, 2)
    raw: np.ndarray
    raw_dx: np.ndarray
    raw_dy: np.ndarray
    den: np.ndarray
    d_params: np.ndarray | None


def eval_2d_batch(unit: RationalUnit2D, x: np.ndarray, y: np.ndarray,
                  with_params: bool = True) -> Batch2D:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    psi, psi_dx, psi_dy = _monomial_table(unit.num_basis, x, y)
    phi, phi_dx, phi_dy = _monomial_table(unit.den_basis, x, y)
    p = psi @ unit.num_coeffs
    px = psi_dx @ unit.num_coeffs
    py = psi_dy @ unit.num_coeffs
    q = phi @ unit.den_coeffs
    qx = phi_dx @ unit.den_coeffs
    qy = phi_dy @ unit.den_coeffs
    sig = sigmoid(q)
    den = 1.0 + np.logaddexp(0.0, q) + unit.eps
    raw = p / den
    raw_dx = (px - raw * sig * qx) / den
    raw_dy = (py - raw * sig * qy) / den
    a = unit.gate
    anchor = 0.5 * (x + y)
    value = anchor + a * (raw - anchor)
    d_input = np.stack([
        0.5 * (1.0 - a) + a * raw_dx,
        0.5 * (1.0 - a) + a * raw_dy,
    ], axis=1)
    d_params = None
    if with_params:
        dnum = (a / den)[:, None] * psi
        dden = (-a * p * sig / den ** 2)[:, None] * phi
        dgate = ((raw - anchor) * a * (1.0 - a))[:, None]
        d_params = np.concatenate([dnum, dden, dgate], axis=1)
    return Batch2D(value, d_input, raw, raw_dx, raw_dy, den, d_params)


def _check_scalar(x) -> float:
    x = float(x)
    if not np.isfinite(x):
        raise ValueError("non-finite input")
    return x


def eval_raw_1d(unit: RationalUnit1D, x: float) -> float:
    """Ungated quotient p(x)/d(x)."""
    x = _check_scalar(x)
    out = eval_1d_batch(unit, np.array([x]), with_params=False)
    return float(out.raw[0])


def eval_gated_1d(unit: RationalUnit1D, x: float) -> EvalWithGrads:
    """Gated unit value with exact input and parameter partials."""
    x = _check_scalar(x)
    out = eval_1d_batch(unit, np.array([x]))
    return EvalWithGrads(float(out.value[0]), float(out.d_input[0]),
                         out.d_params[0].copy())


def eval_gated_2d(unit: RationalUnit2D, x: float, y: float) -> EvalWithGrads:
    x = _check_scalar(x)
    y = _check_scalar(y)
    out = eval_2d_batch(unit, np.array([x]), np.array([y]))
    return EvalWithGrads(float(out.value[0]), out.d_input[0].copy(),
                         out.d_params[0].copy())


def denominator_derivative_1d(unit: RationalUnit1D, x: float) -> float:
    """d'(x) = sigmoid(q(x)) * q'(x); |d'| <= |q'| everywhere."""
    x = _check_scalar(x)
    qc = np.concatenate([[0.0], unit.den_coeffs])
    q, dq = _poly_val_der(qc, np.array([x]))
    return float(sigmoid(q[0]) * dq[0])
