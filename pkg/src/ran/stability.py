"""Certified derivative bounds for rational units and residual stacks.

The certificates are coefficient-norm bounds: for a unit p(x)/d(x) with
d >= 1 everywhere, sup|r~'| over [-B, B] is bounded by

    K_phi = W_P*S1(m,B) + (W_P*S0(m,B)) * (W_Q*S1(n,B))

where W_P, W_Q are L1 coefficient norms and S0, S1 are the geometric
scaling factors of polynomial growth.  The first term bounds |p'|/d, the
second |p|*|d'|/d^2 (|d'| <= |q'| because the softplus slope is below 1).
Layer and network bounds chain the unit bound through the residual
structure h <- (1-a)h + a*Phi(Wh).
"""

from dataclasses import dataclass

import numpy as np

from .rng import stream
from .units import RationalUnit1D, eval_1d_batch

GRID_POINTS = 10_000
POWER_TOL = 1e-8
POWER_MAX_ITER = 10_000


def scaling_factor(k: int, degree: int, B: float) -> float:
    """S0(d,B) = sum_{i=0..d} B^i and S1(d,B) = sum_{i=1..d} i*B^(i-1)."""
    if k not in (0, 1):
        raise ValueError("scaling_factor supports k in {0, 1} only")
    if B <= 0:
        raise ValueError("domain radius B must be positive")
    if degree < 0:
        raise ValueError("degree must be non-negative")
    if k == 0:
        return float(sum(B ** i for i in range(degree + 1)))
    return float(sum(i * B ** (i - 1) for i in range(1, degree + 1)))


@dataclass
class LipschitzReport:
    B: float
    W_P: float
    W_Q: float
    S0_m: float
    S1_m: float
    S1_n: float
    M_P: float          # sup bound on |p|
    M_P_prime: float    # sup bound on |p'|
    M_Q_prime: float    # sup bound on |q'| (and hence |d'|)
    K_phi: float
    empirical_sup: float
    margin: float


def _grid_with_critical_points(unit: RationalUnit1D, B: float) -> np.ndarray:
    xs = np.linspace(-B, B, GRID_POINTS)
    # stationary points of the numerator sharpen the measured sup
    a = np.asarray(unit.num_coeffs, dtype=float)
    if a.size >= 3:
        dp = a[1:] * np.arange(1, a.size)
        if np.any(dp[1:] != 0.0):
            roots = np.roots(dp[::-1])
            real = roots[np.abs(roots.imag) < 1e-12].real
            inside = real[np.abs(real) <= B]
            if inside.size:
                xs = np.concatenate([xs, inside])
    return xs


def unit_lipschitz_bound(unit: RationalUnit1D, B: float) -> LipschitzReport:
    """Certified sup|r~'(x)| over [-B, B] for the raw (ungated) unit."""
    if B <= 0:
        raise ValueError("domain radius B must be positive")
    m = unit.degree_num
    n = unit.degree_den
    W_P = float(np.sum(np.abs(unit.num_coeffs)))
    W_Q = float(np.sum(np.abs(unit.den_coeffs)))
    S0_m = scaling_factor(0, m, B)
    S1_m = scaling_factor(1, m, B)
    S1_n = scaling_factor(1, n, B) if n >= 1 else 0.0
    M_P = W_P * S0_m
    M_P_prime = W_P * S1_m
    M_Q_prime = W_Q * S1_n
    K_phi = M_P_prime + M_P * M_Q_prime

    xs = _grid_with_critical_points(unit, B)
    ev = eval_1d_batch(unit, xs, with_params=False)
    emp = float(np.max(np.abs(ev.raw_dx)))
    margin = K_phi - emp
    if margin < 0:
        raise AssertionError(
            f"certificate violated: empirical sup {emp} exceeds K_phi {K_phi}")
    return LipschitzReport(B=B, W_P=W_P, W_Q=W_Q, S0_m=S0_m, S1_m=S1_m,
                           S1_n=S1_n, M_P=M_P, M_P_prime=M_P_prime,
                           M_Q_prime=M_Q_prime, K_phi=K_phi,
                           empirical_sup=emp, margin=margin)


def gated_unit_bound(unit: RationalUnit1D, B: float) -> float:
    """Lipschitz bound for the gated unit x + alpha*(r~(x) - x)."""
    a = unit.gate
    return (1.0 - a) + a * unit_lipschitz_bound(unit, B).K_phi


def spectral_norm(W: np.ndarray, tol: float = POWER_TOL,
                  max_iter: int = POWER_MAX_ITER) -> float:
    """Largest singular value by power iteration on W^T W, seeded start."""
    W = np.atleast_2d(np.asarray(W, dtype=float))
    if W.size == 0:
        return 0.0
    v = stream(0, "power-iteration").standard_normal(W.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        u = W @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        v_new = W.T @ (u / nu)
        sigma_new = np.linalg.norm(v_new)
        v = v_new / sigma_new if sigma_new > 0 else v
        if abs(sigma_new - sigma) <= tol * max(1.0, sigma_new):
            return float(sigma_new)
        sigma = sigma_new
    raise RuntimeError(f"power iteration did not converge in {max_iter} steps")


def layer_jacobian_bound(block, B: float) -> float:
    """(1 - a) + a * K_Phi * ||W||2 for one residual block.

    Each channel unit sees (W h)_k, so its certificate radius is the
    row L1 norm of W times the hidden radius B.
    """
    a = block.gate
    row_l1 = np.sum(np.abs(block.weight), axis=1)
    K_Phi = max(gated_unit_bound(u, max(float(r) * B, np.finfo(float).tiny))
                for u, r in zip(block.units, row_l1))
    return (1.0 - a) + a * K_Phi * spectral_norm(block.weight)


def _block_value_bound(block, B: float) -> float:
    """Sup-norm bound on the block output over inputs with |h|inf <= B."""
    a = block.gate
    row_l1 = np.sum(np.abs(block.weight), axis=1)
    sup_phi = 0.0
    for u, r in zip(block.units, row_l1):
        Bu = max(float(r) * B, np.finfo(float).tiny)
        W_P = float(np.sum(np.abs(u.num_coeffs)))
        raw = W_P * scaling_factor(0, u.degree_num, Bu)
        au = u.gate
        sup_phi = max(sup_phi, (1.0 - au) * Bu + au * raw)
    return (1.0 - a) * B + a * sup_phi


def network_bound(stack, B: float) -> float:
    """Product of per-layer bounds with the hidden radius tracked forward."""
    bound = 1.0
    radius = float(B)
    for block in stack.blocks:
        bound *= layer_jacobian_bound(block, radius)
        radius = _block_value_bound(block, radius)
    return bound


@dataclass
class IsometryProbe:
    depth: int
    alpha: float
    ratio: float
    upper_bound: float
    lower_bound: float
    gamma: float


def isometry_probe(stack, loss_fn, inputs: np.ndarray) -> IsometryProbe:
    """Measure gradient-norm preservation through the residual stack.

    loss_fn maps the final hidden state (N, width) to (loss, grad) with
    grad of the same shape.  The ratio compares the pulled-back input
    gradient norm against the output gradient norm; near-closed gates
    keep it near 1 regardless of depth.
    """
    h0 = np.atleast_2d(np.asarray(inputs, dtype=float))
    alphas = [b.gate for b in stack.blocks]
    if not alphas:
        raise ValueError("stack has no blocks")
    if max(alphas) - min(alphas) > 1e-12:
        raise ValueError("isometry probe expects a uniform block gate")
    eps = alphas[0]

    hL, states = stack.forward_hidden(h0, with_params=False)
    _, g_out = loss_fn(hL)
    g_out = np.asarray(g_out, dtype=float)
    if g_out.shape != hL.shape:
        raise ValueError("loss gradient shape mismatch")
    g_in = stack.backward_hidden_input(states, g_out)
    n_out = float(np.linalg.norm(g_out))
    n_in = float(np.linalg.norm(g_in))
    if n_out == 0.0:
        raise ValueError("zero output gradient; ratio undefined")
    ratio = n_in / n_out

    # envelope exp(+-L*eps*(K_phi - 1)) around perfect preservation
    z_radius = max((float(np.max(np.abs(st["z"]))) for st in states),
                   default=1.0)
    z_radius = max(z_radius, np.finfo(float).tiny)
    K_phi = max(gated_unit_bound(u, z_radius)
                for b in stack.blocks for u in b.units)
    L = stack.depth
    upper = float(np.exp(L * eps * max(K_phi - 1.0, 0.0)))
    gamma = 0.0 if (eps == 0.0 or ratio == 1.0) else float(
        -np.log(ratio) / (L * eps))
    lower = float(np.exp(-L * eps * gamma))
    return IsometryProbe(depth=L, alpha=eps, ratio=ratio, upper_bound=upper,
                         lower_bound=lower, gamma=gamma)
