"""Post-training interpretation: pruning, rational snapping, symbolic
formulas, variance attribution, and the gradient-coupling pair selector.

The trained denominator 1 + softplus(q(x)) + eps is never literally a
polynomial, so symbolic output first declares an effective rational
denominator: a least-squares polynomial fit to the denominator over the
training box, with the fit residual reported. Each emitted term is then
a single rational in which the residual gate is folded algebraically,

    (1-a)*anchor + a*p(x)/D(x)  =  [(1-a)*anchor*D(x) + a*p(x)] / D(x),

and numerator and denominator are both divided by the leading
denominator coefficient, so the declared form is value-faithful and the
denominator is monic. Coefficients are snapped to fractions with
denominator at most 1000 where the requested precision allows, flagged
and kept exact otherwise. Fidelity checks compare the rendered formula
against the declared-denominator forward of the same snapped model; the
softplus-vs-declared gap lives in the reported residuals, not in the
fidelity budget.
"""

import copy
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .model import AnovaModel, InteractionSet, build_anova_model
from .rng import stream
from .training import TrainConfig, train
from .units import eval_1d_batch, eval_2d_batch

SNAP_DEN_CAP = 1000
GATE_OFF_LOGIT = -745.0  # sigmoid underflows to exactly 0.0
GATE_ON_LOGIT = 745.0    # sigmoid rounds to exactly 1.0
DEN_FILTER_REL = 1e-9    # least-squares noise floor for declared coefficients
TIE_MAD_FACTOR = 4.0


# ---------------------------------------------------------------------------
# pruning


@dataclass
class TopologyReport:
    pair_norms: dict            # (i, j) -> ||theta||_2
    gates: dict                 # (i, j) -> alpha
    survived: dict              # (i, j) -> bool
    coupling_scores: dict | None = None
    removed_bound: float = 0.0  # sup bound on the forward change from pruning


def _box_for(model, box):
    if box is None:
        return [(-1.0, 1.0)] * model.d
    box = [tuple(map(float, b)) for b in box]
    if len(box) != model.d:
        raise ValueError("box dimension mismatch")
    return box


def _pair_sup_bound(unit, head_col, bi, bj) -> float:
    """Sup bound of |head * gated pair value| over the box."""
    Bx = max(abs(bi[0]), abs(bi[1]))
    By = max(abs(bj[0]), abs(bj[1]))
    sup_p = sum(abs(a) * Bx ** ex * By ** ey
                for a, (ex, ey) in zip(unit.num_coeffs, unit.num_basis))
    alpha = unit.gate
    sup_val = (1.0 - alpha) * 0.5 * (Bx + By) + alpha * sup_p
    return float(np.sum(np.abs(head_col)) * sup_val)


def prune(model: AnovaModel, threshold: float, box=None):
    """Drop interaction pairs whose gated group norm falls below threshold.

    Returns the reduced model and a TopologyReport whose removed_bound
    caps how far any prediction can move on the box.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    box = _box_for(model, box)
    norms, gates, survived = {}, {}, {}
    keep, removed_bound = [], 0.0
    for idx, (pair, unit) in enumerate(zip(model.iset.pairs, model.pair_units)):
        coeffs = np.concatenate([unit.num_coeffs, unit.den_coeffs])
        norms[pair] = float(np.linalg.norm(coeffs))
        gates[pair] = unit.gate
        alive = norms[pair] * gates[pair] >= threshold
        survived[pair] = alive
        if alive:
            keep.append(idx)
        else:
            i, j = pair
            removed_bound += _pair_sup_bound(unit, model.head_w[:, model.d + idx],
                                             box[i], box[j])
    new_iset = InteractionSet(d=model.d,
                              pairs=[model.iset.pairs[i] for i in keep],
                              coupling_scores=model.iset.coupling_scores)
    cols = list(range(model.d)) + [model.d + i for i in keep]
    pruned = AnovaModel(
        [copy.deepcopy(u) for u in model.main_units],
        new_iset,
        [copy.deepcopy(model.pair_units[i]) for i in keep],
        model.head_w[:, cols].copy(),
        model.head_b.copy(),
    )
    report = TopologyReport(pair_norms=norms, gates=gates, survived=survived,
                            coupling_scores=model.iset.coupling_scores,
                            removed_bound=removed_bound)
    return pruned, report


# ---------------------------------------------------------------------------
# rational snapping


def snap_value(x: float, precision: float):
    """Best fraction p/q with q <= 1000 within `precision`, else None.

    Continued-fraction search via Fraction.limit_denominator; values
    within precision of zero snap to exact zero first.
    """
    if abs(x) <= precision:
        return Fraction(0)
    f = Fraction(x).limit_denominator(SNAP_DEN_CAP)
    if abs(float(f) - x) <= precision:
        return f
    return None


def _snap_array(arr, precision, flags):
    out = np.array(arr, dtype=float)
    flat = np.ravel(out)
    for i, v in enumerate(flat):
        f = snap_value(float(v), precision)
        if f is None:
            flags.append(float(v))
        else:
            flat[i] = float(f)
    return out


def snap_to_rational(model: AnovaModel, precision: float, box=None):
    """Snap unit, head, and gate coefficients to small fractions.

    Gates within precision of 0 or 1 saturate exactly so the symbolic
    short-circuits apply. Returns the snapped model and its SymbolicForm;
    coefficients with no q <= 1000 fraction inside the tolerance are kept
    as floats and listed in the form's `unsnapped` field.
    """
    if precision <= 0:
        raise ValueError("precision must be positive")
    snapped = copy.deepcopy(model)
    flags = []
    for u in snapped.main_units + snapped.pair_units:
        u.num_coeffs = _snap_array(u.num_coeffs, precision, flags)
        u.den_coeffs = _snap_array(u.den_coeffs, precision, flags)
        if u.gate <= precision:
            u.gate_logit = GATE_OFF_LOGIT
        elif u.gate >= 1.0 - precision:
            u.gate_logit = GATE_ON_LOGIT
    snapped.head_w = _snap_array(snapped.head_w, precision, flags)
    snapped.head_b = _snap_array(snapped.head_b, precision, flags)
    form = symbolic_formula(snapped, precision=precision, box=box)
    form.unsnapped.extend(flags)
    return snapped, form


# ---------------------------------------------------------------------------
# denominator declaration and term assembly


def _filter_small(coeffs: dict) -> dict:
    scale = max(abs(v) for v in coeffs.values())
    return {k: v for k, v in coeffs.items()
            if abs(v) > DEN_FILTER_REL * max(1.0, scale)}


def _declare_den_1d(unit, lo, hi):
    xs = np.linspace(lo, hi, 512)
    den = eval_1d_batch(unit, xs, with_params=False).den
    raw = np.polynomial.polynomial.polyfit(xs, den, unit.degree_den)
    poly = _filter_small({(k,): c for k, c in enumerate(raw)})
    fit = sum(c * xs ** k for (k,), c in poly.items())
    return poly, float(np.max(np.abs(fit - den)))


def _declare_den_2d(unit, bi, bj):
    gx = np.linspace(bi[0], bi[1], 48)
    gy = np.linspace(bj[0], bj[1], 48)
    XX, YY = np.meshgrid(gx, gy, indexing="ij")
    x, y = XX.ravel(), YY.ravel()
    den = eval_2d_batch(unit, x, y, with_params=False).den
    basis = [(0, 0)] + [tuple(b) for b in unit.den_basis]
    A = np.stack([x ** ex * y ** ey for ex, ey in basis], axis=1)
    raw, *_ = np.linalg.lstsq(A, den, rcond=None)
    poly = _filter_small(dict(zip(basis, raw)))
    fit = sum(c * x ** ex * y ** ey for (ex, ey), c in poly.items())
    return poly, float(np.max(np.abs(fit - den)))


def _poly_mul(pa: dict, pb: dict) -> dict:
    out = {}
    for ka, va in pa.items():
        for kb, vb in pb.items():
            k = tuple(a + b for a, b in zip(ka, kb))
            out[k] = out.get(k, 0.0) + va * vb
    return out


def _poly_scale(p: dict, s: float) -> dict:
    return {k: v * s for k, v in p.items()}


def _poly_add(pa: dict, pb: dict) -> dict:
    out = dict(pa)
    for k, v in pb.items():
        out[k] = out.get(k, 0.0) + v
    return out


def _rationalize(v: float, precision: float, flags: list):
    """Snap at the working precision; keep the exact float when no small
    fraction fits, so the rendered form still evaluates faithfully."""
    f = snap_value(float(v), precision)
    if f is None:
        flags.append(float(v))
        return Fraction(float(v))
    return f


def _snap_poly(p: dict, precision: float, flags: list) -> dict:
    out = {}
    for k, v in p.items():
        f = _rationalize(v, precision, flags)
        if f != 0:
            out[k] = f
    return out


@dataclass
class SymbolicTerm:
    kind: str                   # "main" | "pair"
    indices: tuple
    num: dict                   # monomial exponents -> Fraction
    den: dict                   # monomial exponents -> Fraction; {} means 1
    gate: float
    den_fit_residual: float
    head_weights: list = field(default_factory=list)


def _build_terms(model: AnovaModel, box, precision):
    terms, flags = [], []
    specs = [("main", i, (i,), u) for i, u in enumerate(model.main_units)]
    specs += [("pair", k, pair, u) for k, (pair, u)
              in enumerate(zip(model.iset.pairs, model.pair_units))]
    for kind, idx, cols, unit in specs:
        alpha = unit.gate
        zero_key = (0,) * len(cols)
        if kind == "main":
            p = {(k,): float(a) for k, a in enumerate(unit.num_coeffs) if a}
            anchor = {(1,): 1.0}
            dhat, residual = _declare_den_1d(unit, *box[cols[0]])
        else:
            p = {tuple(b): float(a) for a, b
                 in zip(unit.num_coeffs, unit.num_basis) if a}
            anchor = {(1, 0): 0.5, (0, 1): 0.5}
            dhat, residual = _declare_den_2d(unit, box[cols[0]], box[cols[1]])
        if alpha == 0.0:
            num, den = anchor, {}
        else:
            num = p if alpha == 1.0 else _poly_add(
                _poly_scale(_poly_mul(anchor, dhat), 1.0 - alpha),
                _poly_scale(p, alpha))
            den = dict(dhat)
            # leading coefficient for canonical scaling: highest degree
            # among terms that are not declaration noise at this precision
            mx = max(abs(v) for v in den.values())
            solid = [k for k, v in den.items() if abs(v) >= precision * mx]
            lead = max(solid, key=lambda k: (sum(k), k))
            s = 1.0 / den[lead]
            num, den = _poly_scale(num, s), _poly_scale(den, s)
        num = _snap_poly(num, precision, flags)
        den = _snap_poly(den, precision, flags)
        if set(den) <= {zero_key}:
            c = den.get(zero_key, Fraction(1))
            if c not in (0, 1):
                num = {k: v / c for k, v in num.items()}
            den = {}
        feature = idx if kind == "main" else model.d + idx
        heads = [_rationalize(w, precision, flags)
                 for w in model.head_w[:, feature]]
        terms.append(SymbolicTerm(kind=kind, indices=tuple(cols), num=num,
                                  den=den, gate=alpha,
                                  den_fit_residual=residual,
                                  head_weights=heads))
    return terms, flags


# ---------------------------------------------------------------------------
# symbolic form


@dataclass
class SymbolicForm:
    terms: list
    bias: list                  # one Fraction per output channel
    expressions: list           # one rendered string per output channel
    complexity: int
    d: int
    unsnapped: list = field(default_factory=list)
    den_fit_residuals: dict = field(default_factory=dict)

    @property
    def expression(self) -> str:
        return "; ".join(self.expressions)

    def evaluate(self, X: np.ndarray) -> np.ndarray:
        """Monomial-by-monomial evaluation of the stored exact fractions."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        C = len(self.bias)
        out = np.tile([float(b) for b in self.bias], (X.shape[0], 1))
        for term in self.terms:
            val = None
            for c in range(C):
                w = float(term.head_weights[c])
                if w == 0.0 or not term.num:
                    continue
                if val is None:
                    val = _eval_rational(term, X)
                out[:, c] += w * val
        return out


def _mono_col(X, cols, key):
    mono = np.ones(X.shape[0])
    for var, power in zip(cols, key):
        if power:
            mono = mono * X[:, var] ** power
    return mono


def _eval_rational(term: SymbolicTerm, X: np.ndarray) -> np.ndarray:
    num = np.zeros(X.shape[0])
    for key in sorted(term.num):
        num += float(term.num[key]) * _mono_col(X, term.indices, key)
    if not term.den:
        return num
    den = np.zeros(X.shape[0])
    for key in sorted(term.den):
        den += float(term.den[key]) * _mono_col(X, term.indices, key)
    return num / den


def symbolic_formula(model: AnovaModel, precision: float = 1e-5,
                     box=None) -> SymbolicForm:
    """Canonical rational rendering with gates and head weights folded."""
    box = _box_for(model, box)
    terms, flags = _build_terms(model, box, precision)
    residuals = {(t.kind, t.indices): t.den_fit_residual for t in terms}
    bias = [_rationalize(b, precision, flags) for b in model.head_b]
    expressions = [_render_channel(terms, bias[c], c, model.d)
                   for c in range(model.C)]
    form = SymbolicForm(terms=terms, bias=bias, expressions=expressions,
                        complexity=0, d=model.d, unsnapped=flags,
                        den_fit_residuals=residuals)
    form.complexity = _complexity(form)
    return form


def declared_forward(model: AnovaModel, box=None, precision: float = 1e-5):
    """Reference forward of the declared rational object.

    Same declaration, folding, normalization, and snapping as the
    symbolic form, but evaluated through dense polynomial arithmetic
    instead of monomial sums; fidelity checks compare the two paths.
    """
    box = _box_for(model, box)
    terms, _ = _build_terms(model, box, precision)
    bias = np.array([float(_rationalize(b, precision, []))
                     for b in model.head_b])
    P = np.polynomial.polynomial

    def dense(poly: dict, cols):
        if len(cols) == 1:
            c = np.zeros(max(k[0] for k in poly) + 1)
            for (k,), v in poly.items():
                c[k] = float(v)
            return c
        dx = max(k[0] for k in poly)
        dy = max(k[1] for k in poly)
        c = np.zeros((dx + 1, dy + 1))
        for (kx, ky), v in poly.items():
            c[kx, ky] = float(v)
        return c

    def run(X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.tile(bias, (X.shape[0], 1))
        for term in terms:
            w = np.array([float(h) for h in term.head_weights])
            if not term.num or not np.any(w):
                continue
            if term.kind == "main":
                x = X[:, term.indices[0]]
                val = P.polyval(x, dense(term.num, term.indices))
                if term.den:
                    val = val / P.polyval(x, dense(term.den, term.indices))
            else:
                x, y = X[:, term.indices[0]], X[:, term.indices[1]]
                val = P.polyval2d(x, y, dense(term.num, term.indices))
                if term.den:
                    val = val / P.polyval2d(x, y, dense(term.den, term.indices))
            out += val[:, None] * w[None, :]
        return out

    return run


# ---------------------------------------------------------------------------
# rendering and complexity


def _frac_str(f: Fraction) -> str:
    if f.denominator == 1:
        return str(f.numerator)
    if f.denominator <= SNAP_DEN_CAP:
        return f"{f.numerator}/{f.denominator}"
    return f"{float(f):.6g}"


def _var_name(var: int, d: int) -> str:
    return "x" if d == 1 else f"x_{var}"


def _mono_str(key, cols, d) -> str:
    parts = []
    for var, power in zip(cols, key):
        if power == 1:
            parts.append(_var_name(var, d))
        elif power >= 2:
            parts.append(f"{_var_name(var, d)}^{power}")
    return "*".join(parts)


def _poly_str(p: dict, cols, d) -> str:
    keys = sorted(p, key=lambda k: (sum(k), k), reverse=True)
    pieces = []
    for k in keys:
        coeff, mono = p[k], _mono_str(k, cols, d)
        if not mono:
            s = _frac_str(coeff)
        elif coeff == 1:
            s = mono
        elif coeff == -1:
            s = f"-{mono}"
        else:
            s = f"{_frac_str(coeff)}*{mono}"
        pieces.append(s)
    out = pieces[0]
    for s in pieces[1:]:
        out += f" - {s[1:]}" if s.startswith("-") else f" + {s}"
    return out


def _render_channel(terms, bias, c, d) -> str:
    pieces = []
    for term in terms:
        w = term.head_weights[c]
        if w == 0 or not term.num:
            continue
        num = term.num if w == 1 else {k: v * w for k, v in term.num.items()}
        ns = _poly_str(num, term.indices, d)
        if term.den:
            ds = _poly_str(term.den, term.indices, d)
            pieces.append(f"({ns})/({ds})")
        else:
            pieces.append(ns if len(num) == 1 else f"({ns})")
    if bias != 0 or not pieces:
        pieces.append(_frac_str(bias))
    out = pieces[0]
    for s in pieces[1:]:
        out += f" - {s[1:]}" if s.startswith("-") else f" + {s}"
    return out


def _poly_ops(p: dict) -> int:
    ops = 0
    for key, coeff in p.items():
        nvars = sum(1 for e in key if e > 0)
        ops += sum(1 for e in key if e >= 2)          # pow nodes
        ops += max(nvars - 1, 0)                      # products between vars
        if abs(coeff) != 1 and nvars > 0:
            ops += 1                                  # coefficient multiply
    ops += max(len(p) - 1, 0)                         # additions
    return ops


def _complexity(form: SymbolicForm) -> int:
    ops = 0
    for c in range(len(form.bias)):
        live = [t for t in form.terms if t.head_weights[c] != 0 and t.num]
        for t in live:
            w = t.head_weights[c]
            num = t.num if w == 1 else {k: v * w for k, v in t.num.items()}
            ops += _poly_ops(num)
            if t.den:
                ops += _poly_ops(t.den) + 1           # the division node
        n_pieces = len(live) + (1 if form.bias[c] != 0 else 0)
        ops += max(n_pieces - 1, 0)
    return ops


# ---------------------------------------------------------------------------
# variance attribution


def anova_report(model: AnovaModel, dataset):
    """Per-term share of prediction variance over the dataset.

    Returns (TopologyReport, shares, degenerate). Shares sum to 1 unless
    the model is constant on the data, in which case they are all zero
    and the degenerate flag is set.
    """
    X = np.asarray(dataset.inputs, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("dataset is empty")
    cache = model.forward_batch(X, with_params=False)
    names = [f"main_{i}" for i in range(model.d)]
    names += [f"pair_{i}_{j}" for i, j in model.iset.pairs]
    shares, total = {}, 0.0
    for f, name in enumerate(names):
        contrib = cache.features[:, f][:, None] * model.head_w[:, f][None, :]
        var = float(np.sum(np.var(contrib, axis=0)))
        shares[name] = var
        total += var
    degenerate = total <= 0.0
    shares = {k: (0.0 if degenerate else v / total) for k, v in shares.items()}
    norms, gates, survived = {}, {}, {}
    for pair, unit in zip(model.iset.pairs, model.pair_units):
        coeffs = np.concatenate([unit.num_coeffs, unit.den_coeffs])
        norms[pair] = float(np.linalg.norm(coeffs))
        gates[pair] = unit.gate
        survived[pair] = True
    report = TopologyReport(pair_norms=norms, gates=gates, survived=survived,
                            coupling_scores=model.iset.coupling_scores)
    return report, shares, degenerate


# ---------------------------------------------------------------------------
# smart pair selection


def smart_select_pairs(dataset, k: int, seed: int = 0,
                       config: TrainConfig | None = None) -> InteractionSet:
    """Pick the k strongest interactions by residual gradient coupling.

    A main-effects-only model absorbs everything additive; what remains
    is scored per pair by the mean absolute mixed second difference of a
    nearest-neighbor surrogate of the residual. Pairs that do not rise
    above the noise floor of the scores count as ties and are ordered by
    a seeded shuffle, so purely additive targets select at random.
    """
    X = np.asarray(dataset.inputs, dtype=float)
    Y = np.asarray(dataset.targets, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    n, d = X.shape
    if k < 1:
        raise ValueError("k must be at least 1")
    if d < 2:
        raise ValueError("need at least two coordinates to pick pairs")
    if n < 4 * d:
        raise ValueError("insufficient data for coupling estimate")
    pairs = [(i, j) for i in range(d) for j in range(i + 1, d)]
    k = min(k, len(pairs))

    if config is None:
        config = TrainConfig(lr_main=1e-2, epochs=1500, seed=seed)
    mains = build_anova_model(d, C=Y.shape[1], seed=seed)
    train(mains, dataset, config)
    res = (Y - mains.forward_batch(X, with_params=False).logits).mean(axis=1)

    lo, hi = X.min(axis=0), X.max(axis=0)
    width = hi - lo
    width[width == 0] = 1.0
    h = 0.1 * width
    margin = np.minimum(2 * h, 0.25 * width)
    kn = min(8, n - 1)

    def surrogate(pts):
        d2 = ((pts[:, None, :] - X[None, :, :]) ** 2).sum(axis=2)
        knn = np.argpartition(d2, kn - 1, axis=1)[:, :kn]
        return res[knn].mean(axis=1)

    probes = stream(seed, "probes").uniform(lo + margin, hi - margin,
                                            size=(64, d))
    scores = {}
    for i, j in pairs:
        corners = []
        for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
            pts = probes.copy()
            pts[:, i] += si * h[i]
            pts[:, j] += sj * h[j]
            corners.append(surrogate(pts))
        mixed = (corners[0] - corners[1] - corners[2] + corners[3]) \
            / (4 * h[i] * h[j])
        scores[(i, j)] = float(np.mean(np.abs(mixed)))

    vals = np.array([scores[p] for p in pairs])
    med = float(np.median(vals))
    mad = float(np.median(np.abs(vals - med)))
    floor = med + TIE_MAD_FACTOR * mad
    # seeded shuffle orders the sub-floor ties; the sort is stable
    order = stream(seed, "topology").permutation(len(pairs))
    shuffled = [pairs[i] for i in order]
    ranked = sorted(shuffled,
                    key=lambda p: scores[p] if scores[p] > floor else 0.0,
                    reverse=True)
    chosen = sorted(ranked[:k])
    return InteractionSet(d=d, pairs=chosen, seed=seed,
                          coupling_scores=scores)
