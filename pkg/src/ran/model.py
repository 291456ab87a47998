"""Sparse additive models built from rational units, and deep stacks of them.

The shallow model is a sum of per-coordinate units plus units on a chosen
set of coordinate pairs, combined by a linear head:

    f(x) = head([r_1(x_1), ..., r_d(x_d), r_ij(x_i, x_j) for (i,j) in S])

The deep variant chains residual blocks h <- h + alpha*(Phi(W h) - h) where
Phi applies one gated rational unit per channel. Both expose batched
forward/backward with closed-form parameter gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit as sigmoid

from .rng import stream
from .units import (
    DEFAULT_EPS,
    DEN_BASIS_2D,
    GATE_LOGIT_INIT,
    NUM_BASIS_2D,
    Batch1D,
    Batch2D,
    RationalUnit1D,
    RationalUnit2D,
    eval_1d_batch,
    eval_2d_batch,
    init_identity,
)


@dataclass
class InteractionSet:
    """Ordered pairs (i, j), i < j, of coordinates that get a 2D unit."""

    d: int
    pairs: list
    seed: int | None = None
    coupling_scores: dict | None = None  # filled by smart selection

    def __post_init__(self):
        self.pairs = [(int(i), int(j)) for i, j in self.pairs]
        seen = set()
        for i, j in self.pairs:
            if not (0 <= i < j < self.d):
                raise ValueError(f"pair ({i},{j}) out of range for d={self.d}")
            if (i, j) in seen:
                raise ValueError(f"duplicate pair ({i},{j})")
            seen.add((i, j))

    @property
    def K(self) -> int:
        return len(self.pairs)


def all_pairs(d: int) -> list:
    return [(i, j) for i in range(d) for j in range(i + 1, d)]


def build_random_topology(d: int, k: int, seed: int) -> InteractionSet:
    """Uniform draw of k distinct pairs from the d(d-1)/2 candidates."""
    cand = all_pairs(d)
    if k > len(cand):
        raise ValueError(f"requested {k} pairs but only {len(cand)} exist for d={d}")
    rng = stream(seed, "topology")
    idx = rng.choice(len(cand), size=k, replace=False)
    pairs = sorted(cand[i] for i in idx)
    return InteractionSet(d=d, pairs=pairs, seed=seed)


@dataclass
class ParamLayout:
    """Canonical flat ordering: main units (num, den, gate) by coordinate,
    pair units (num, den, gate) in interaction-set order, then every
    linear map (head row-major, bias last)."""

    n_params: int
    groups: dict  # name -> int index array: numerators, denominators, gates, head
    channels: list  # (label, index array); labels: main_i, pair_i_j, head
    unit_slices: list  # (label, slice) for each unit in canonical order


def _build_layout(pieces) -> ParamLayout:
    # pieces: list of (label, kind, sizes) with kind in {unit, linear}
    groups = {"numerators": [], "denominators": [], "gates": [], "head": []}
    channels = {}
    unit_slices = []
    off = 0
    for label, kind, sizes in pieces:
        if kind == "unit":
            n_num, n_den = sizes
            sl = slice(off, off + n_num + n_den + 1)
            groups["numerators"].extend(range(off, off + n_num))
            groups["denominators"].extend(range(off + n_num, off + n_num + n_den))
            groups["gates"].append(off + n_num + n_den)
            channels.setdefault(label, []).extend(range(off, sl.stop))
            unit_slices.append((label, sl))
            off = sl.stop
        else:
            size, = sizes
            groups["head"].extend(range(off, off + size))
            channels.setdefault(label, []).extend(range(off, off + size))
            off += size
    return ParamLayout(
        n_params=off,
        groups={k: np.array(v, dtype=int) for k, v in groups.items()},
        channels=[(k, np.array(v, dtype=int)) for k, v in channels.items()],
        unit_slices=unit_slices,
    )


@dataclass
class ModelGradients:
    """Flat gradient vector plus the group views the optimizer uses."""

    flat: np.ndarray
    layout: ParamLayout

    def group(self, name: str) -> np.ndarray:
        return self.flat[self.layout.groups[name]]


@dataclass
class ForwardCache:
    features: np.ndarray  # (N, d + K)
    logits: np.ndarray  # (N, C)
    unit_evals: list  # Batch1D/Batch2D per feature column
    min_den: float


class AnovaModel:
    def __init__(self, main_units, iset: InteractionSet, pair_units,
                 head_w: np.ndarray, head_b: np.ndarray):
        if len(main_units) != iset.d:
            raise ValueError("need one 1D unit per coordinate")
        if len(pair_units) != iset.K:
            raise ValueError("need one 2D unit per interaction pair")
        self.main_units = list(main_units)
        self.iset = iset
        self.pair_units = list(pair_units)
        self.head_w = np.asarray(head_w, dtype=float)
        self.head_b = np.asarray(head_b, dtype=float)
        if self.head_w.shape != (self.head_b.size, iset.d + iset.K):
            raise ValueError("head shape mismatch")

    @property
    def d(self) -> int:
        return self.iset.d

    @property
    def C(self) -> int:
        return self.head_b.size

    @property
    def n_features(self) -> int:
        return self.iset.d + self.iset.K

    @property
    def layout(self) -> ParamLayout:
        pieces = []
        for i, u in enumerate(self.main_units):
            pieces.append((f"main_{i}", "unit",
                           (len(u.num_coeffs), len(u.den_coeffs))))
        for (i, j), u in zip(self.iset.pairs, self.pair_units):
            pieces.append((f"pair_{i}_{j}", "unit",
                           (len(u.num_coeffs), len(u.den_coeffs))))
        pieces.append(("head", "linear", (self.head_w.size + self.head_b.size,)))
        return _build_layout(pieces)

    def get_flat(self) -> np.ndarray:
        parts = [u.get_params() for u in self.main_units]
        parts += [u.get_params() for u in self.pair_units]
        parts += [self.head_w.ravel(), self.head_b]
        return np.concatenate(parts)

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=float)
        off = 0
        for u in self.main_units + self.pair_units:
            u.set_params(vec[off:off + u.param_count])
            off += u.param_count
        w = self.head_w.size
        self.head_w = vec[off:off + w].reshape(self.head_w.shape).copy()
        off += w
        self.head_b = vec[off:].copy()

    def forward_batch(self, X: np.ndarray, with_params: bool = True) -> ForwardCache:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.d:
            raise ValueError(f"expected {self.d} input columns, got {X.shape[1]}")
        if not np.all(np.isfinite(X)):
            raise ValueError("non-finite input")
        evals = []
        cols = []
        min_den = np.inf
        for i, u in enumerate(self.main_units):
            ev = eval_1d_batch(u, X[:, i], with_params=with_params)
            evals.append(ev)
            cols.append(ev.value)
            min_den = min(min_den, float(ev.den.min()))
        for (i, j), u in zip(self.iset.pairs, self.pair_units):
            ev = eval_2d_batch(u, X[:, i], X[:, j], with_params=with_params)
            evals.append(ev)
            cols.append(ev.value)
            min_den = min(min_den, float(ev.den.min()))
        features = np.stack(cols, axis=1) if cols else np.zeros((X.shape[0], 0))
        logits = features @ self.head_w.T + self.head_b
        return ForwardCache(features, logits, evals, min_den)

    def backward_batch(self, cache: ForwardCache, upstream: np.ndarray) -> np.ndarray:
        """Gradient of sum_n <upstream_n, logits_n> over all parameters."""
        upstream = np.atleast_2d(np.asarray(upstream, dtype=float))
        parts = []
        feat_grad = upstream @ self.head_w  # (N, F)
        for f, ev in enumerate(cache.unit_evals):
            parts.append(ev.d_params.T @ feat_grad[:, f])
        dW = upstream.T @ cache.features
        db = upstream.sum(axis=0)
        parts += [dW.ravel(), db]
        return np.concatenate(parts)


def forward(model: AnovaModel, x: np.ndarray) -> np.ndarray:
    """Logits for a single input point; shape (C,)."""
    cache = model.forward_batch(np.asarray(x, dtype=float)[None, :],
                                with_params=False)
    return cache.logits[0]


def backward(model: AnovaModel, x: np.ndarray,
             upstream: np.ndarray) -> ModelGradients:
    """Exact parameter gradient of <upstream, logits> at one input."""
    cache = model.forward_batch(np.asarray(x, dtype=float)[None, :])
    flat = model.backward_batch(cache, np.asarray(upstream, dtype=float)[None, :])
    return ModelGradients(flat, model.layout)


def build_anova_model(d: int, C: int = 1, degree_num: int = 3,
                      degree_den: int = 2, topology: InteractionSet | None = None,
                      eps: float = DEFAULT_EPS, seed: int = 0,
                      pair_num_basis=NUM_BASIS_2D,
                      pair_den_basis=DEN_BASIS_2D) -> AnovaModel:
    """Identity-initialized model; all randomness comes from the init stream."""
    if topology is None:
        topology = InteractionSet(d=d, pairs=[])
    elif not isinstance(topology, InteractionSet):
        topology = InteractionSet(d=d, pairs=list(topology))
    if topology.d != d:
        raise ValueError("topology dimension mismatch")
    rng = stream(seed, "init")
    mains = []
    for _ in range(d):
        proto = RationalUnit1D(np.zeros(degree_num + 1), np.zeros(degree_den),
                               eps=eps)
        mains.append(init_identity(proto, rng))
    pairs = []
    for _ in topology.pairs:
        proto = RationalUnit2D(np.zeros(len(pair_num_basis)),
                               np.zeros(len(pair_den_basis)),
                               pair_num_basis, pair_den_basis, eps=eps)
        pairs.append(init_identity(proto, rng))
    F = d + topology.K
    head_w = rng.normal(0.0, (1.0 / F) ** 0.5, size=(C, F))
    head_b = np.zeros(C)
    return AnovaModel(mains, topology, pairs, head_w, head_b)


# ---------------------------------------------------------------------------
# deep residual stacks


@dataclass
class DeepBlock:
    weight: np.ndarray  # (width, width)
    units: list  # one RationalUnit1D per channel
    gate_logit: float = GATE_LOGIT_INIT

    @property
    def gate(self) -> float:
        return float(sigmoid(self.gate_logit))


class DeepRanStack:
    """Residual stack h <- h + alpha*(Phi(W h) - h) with affine adapters."""

    def __init__(self, blocks, in_weight, in_bias, out_weight, out_bias):
        self.blocks = list(blocks)
        self.in_weight = np.asarray(in_weight, dtype=float)
        self.in_bias = np.asarray(in_bias, dtype=float)
        self.out_weight = np.asarray(out_weight, dtype=float)
        self.out_bias = np.asarray(out_bias, dtype=float)
        w = self.in_weight.shape[0]
        for b in self.blocks:
            if b.weight.shape != (w, w) or len(b.units) != w:
                raise ValueError("block width mismatch")

    @property
    def width(self) -> int:
        return self.in_weight.shape[0]

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @property
    def d(self) -> int:
        return self.in_weight.shape[1]

    @property
    def C(self) -> int:
        return self.out_weight.shape[0]

    @property
    def layout(self) -> ParamLayout:
        pieces = []
        for l, b in enumerate(self.blocks):
            pieces.append((f"block_{l}_w", "linear", (b.weight.size,)))
            for k, u in enumerate(b.units):
                pieces.append((f"block_{l}_unit_{k}", "unit",
                               (len(u.num_coeffs), len(u.den_coeffs))))
            pieces.append((f"block_{l}_gate", "unit_gate", None))
        pieces.append(("adapters", "linear",
                       (self.in_weight.size + self.in_bias.size
                        + self.out_weight.size + self.out_bias.size,)))
        # block gates join the gates group: rebuild with explicit handling
        groups = {"numerators": [], "denominators": [], "gates": [], "head": []}
        unit_slices = []
        off = 0
        for label, kind, sizes in pieces:
            if kind == "unit":
                n_num, n_den = sizes
                groups["numerators"].extend(range(off, off + n_num))
                groups["denominators"].extend(range(off + n_num, off + n_num + n_den))
                groups["gates"].append(off + n_num + n_den)
                unit_slices.append((label, slice(off, off + n_num + n_den + 1)))
                off += n_num + n_den + 1
            elif kind == "unit_gate":
                groups["gates"].append(off)
                off += 1
            else:
                size, = sizes
                groups["head"].extend(range(off, off + size))
                off += size
        return ParamLayout(
            n_params=off,
            groups={k: np.array(v, dtype=int) for k, v in groups.items()},
            channels=[],
            unit_slices=unit_slices,
        )

    def get_flat(self) -> np.ndarray:
        parts = []
        for b in self.blocks:
            parts.append(b.weight.ravel())
            for u in b.units:
                parts.append(u.get_params())
            parts.append(np.array([b.gate_logit]))
        parts += [self.in_weight.ravel(), self.in_bias,
                  self.out_weight.ravel(), self.out_bias]
        return np.concatenate(parts)

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=float)
        off = 0
        for b in self.blocks:
            w = b.weight.size
            b.weight = vec[off:off + w].reshape(b.weight.shape).copy()
            off += w
            for u in b.units:
                u.set_params(vec[off:off + u.param_count])
                off += u.param_count
            b.gate_logit = float(vec[off])
            off += 1
        for name in ("in_weight", "in_bias", "out_weight", "out_bias"):
            arr = getattr(self, name)
            setattr(self, name, vec[off:off + arr.size].reshape(arr.shape).copy())
            off += arr.size

    # -- width-space forward/backward --------------------------------------

    def forward_hidden(self, h0: np.ndarray, with_params: bool = True):
        h = np.atleast_2d(np.asarray(h0, dtype=float))
        if h.shape[1] != self.width:
            raise ValueError(f"expected width {self.width}, got {h.shape[1]}")
        states = []
        for l, b in enumerate(self.blocks):
            z = h @ b.weight.T
            evals = [eval_1d_batch(u, z[:, k], with_params=with_params)
                     for k, u in enumerate(b.units)]
            u_out = np.stack([ev.value for ev in evals], axis=1)
            a = b.gate
            h_next = h + a * (u_out - h)
            if not np.all(np.isfinite(h_next)):
                raise FloatingPointError(f"non-finite activation in block {l}")
            states.append({"h": h, "z": z, "evals": evals, "u": u_out, "alpha": a})
            h = h_next
        return h, states

    def backward_hidden_input(self, states, g_out: np.ndarray) -> np.ndarray:
        """Pull a gradient at the stack output back to the stack input."""
        g = np.atleast_2d(np.asarray(g_out, dtype=float))
        for st, b in zip(reversed(states), reversed(self.blocks)):
            a = st["alpha"]
            phi_prime = np.stack([ev.d_input for ev in st["evals"]], axis=1)
            gz = a * g * phi_prime
            g = (1.0 - a) * g + gz @ b.weight
        return g

    # -- full model (adapters included) -------------------------------------

    def forward_batch(self, X: np.ndarray, with_params: bool = True) -> ForwardCache:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.d:
            raise ValueError(f"expected {self.d} input columns, got {X.shape[1]}")
        if not np.all(np.isfinite(X)):
            raise ValueError("non-finite input")
        h0 = X @ self.in_weight.T + self.in_bias
        hL, states = self.forward_hidden(h0, with_params=with_params)
        logits = hL @ self.out_weight.T + self.out_bias
        cache = ForwardCache(features=hL, logits=logits, unit_evals=states,
                             min_den=min((float(ev.den.min())
                                          for st in states for ev in st["evals"]),
                                         default=np.inf))
        cache.X = X
        cache.h0 = h0
        return cache

    def backward_batch(self, cache: ForwardCache, upstream: np.ndarray) -> np.ndarray:
        upstream = np.atleast_2d(np.asarray(upstream, dtype=float))
        states = cache.unit_evals
        d_out_w = upstream.T @ cache.features
        d_out_b = upstream.sum(axis=0)
        g = upstream @ self.out_weight  # gradient wrt hL
        block_parts = []
        for st, b in zip(reversed(states), reversed(self.blocks)):
            a = st["alpha"]
            gu = a * g
            d_gate = float(np.sum(g * (st["u"] - st["h"]))) * a * (1.0 - a)
            phi_prime = np.stack([ev.d_input for ev in st["evals"]], axis=1)
            gz = gu * phi_prime
            dW = gz.T @ st["h"]
            unit_grads = [ev.d_params.T @ gu[:, k]
                          for k, ev in enumerate(st["evals"])]
            g = (1.0 - a) * g + gz @ b.weight
            block_parts.append((dW, unit_grads, d_gate))
        d_in_w = g.T @ cache.X
        d_in_b = g.sum(axis=0)
        parts = []
        for dW, unit_grads, d_gate in reversed(block_parts):
            parts.append(dW.ravel())
            for ug in unit_grads:
                parts.append(ug)
            parts.append(np.array([d_gate]))
        parts += [d_in_w.ravel(), d_in_b, d_out_w.ravel(), d_out_b]
        return np.concatenate(parts)


def forward_deep(stack: DeepRanStack, h0: np.ndarray):
    """Run the residual blocks on a width-space vector (adapters not applied).

    Returns (h_L, states); states hold everything the backward passes need.
    """
    return stack.forward_hidden(h0)


def _orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def build_deep_stack(d: int, width: int, depth: int, C: int = 1,
                     degree_num: int = 3, degree_den: int = 2,
                     eps: float = DEFAULT_EPS, seed: int = 0) -> DeepRanStack:
    """Near-identity deep stack: orthogonal mixing, gates at sigmoid(-4)."""
    rng = stream(seed, "init")
    blocks = []
    for _ in range(depth):
        w = _orthogonal(rng, width, width)
        units = []
        for _ in range(width):
            proto = RationalUnit1D(np.zeros(degree_num + 1),
                                   np.zeros(degree_den), eps=eps)
            units.append(init_identity(proto, rng))
        blocks.append(DeepBlock(w, units, GATE_LOGIT_INIT))
    in_w = _orthogonal(rng, width, d)
    out_w = rng.normal(0.0, (1.0 / width) ** 0.5, size=(C, width))
    return DeepRanStack(blocks, in_w, np.zeros(width), out_w, np.zeros(C))


# ---------------------------------------------------------------------------
# budget accounting


def param_count(model) -> int:
    """Closed-form parameter count; must match flat-vector enumeration."""
    if isinstance(model, AnovaModel):
        total = sum(len(u.num_coeffs) + len(u.den_coeffs) + 1
                    for u in model.main_units + model.pair_units)
        return total + model.head_w.size + model.head_b.size
    if isinstance(model, DeepRanStack):
        total = 0
        for b in model.blocks:
            total += b.weight.size + 1
            total += sum(len(u.num_coeffs) + len(u.den_coeffs) + 1
                         for u in b.units)
        return (total + model.in_weight.size + model.in_bias.size
                + model.out_weight.size + model.out_bias.size)
    raise TypeError(f"cannot count parameters of {type(model).__name__}")


def param_count_formula(d: int, degree_num: int, degree_den: int, n_pairs: int,
                        pair_num_terms: int = len(NUM_BASIS_2D),
                        pair_den_terms: int = len(DEN_BASIS_2D),
                        outputs: int = 1, include_head: bool = True) -> int:
    """d(m+n+2) + K(T+S+1), plus the head's outputs*(d+K) + outputs."""
    total = d * (degree_num + degree_den + 2)
    total += n_pairs * (pair_num_terms + pair_den_terms + 1)
    if include_head:
        total += outputs * (d + n_pairs) + outputs
    return total


def estimate_params_kanbefair(n_inputs: int, n_pairs: int, outputs: int) -> int:
    """Coarse planning estimate (18+C)N + (26+C)K + C + 2 for spline-grid
    layer pairs at comparable capacity. Advisory only; budget decisions
    should use param_count, which counts this package's actual tensors."""
    C = outputs
    return (18 + C) * n_inputs + (26 + C) * n_pairs + C + 2
