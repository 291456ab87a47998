"""Losses, a from-scratch Adam with parameter groups, and the train loop.

Denominator coefficients and gate logits form their own Adam group with a
scaled-down learning rate (they move the geometry of the quotient, so they
get gentler steps), and decoupled weight decay applies to denominator
coefficients only. An optional group-lasso penalty on whole pair units
drives spurious interactions to zero for later pruning.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .model import AnovaModel, ModelGradients
from .rng import stream

LOSS_KINDS = ("mse", "mae", "softmax_ce")


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, d)
    targets: np.ndarray  # (N, C) reals, or (N,) integer labels
    name: str = "data"
    box: np.ndarray | None = None  # (d, 2) lo/hi per coordinate

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.targets = np.asarray(self.targets)
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be (N, d)")
        if len(self.targets) != len(self.inputs):
            raise ValueError("inputs/targets length mismatch")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("non-finite inputs")
        if self.targets.dtype.kind == "f" and not np.all(np.isfinite(self.targets)):
            raise ValueError("non-finite targets")
        if self.box is None:
            lo = self.inputs.min(axis=0)
            hi = self.inputs.max(axis=0)
            self.box = np.stack([lo, hi], axis=1)
        else:
            self.box = np.asarray(self.box, dtype=float)

    @property
    def n(self) -> int:
        return len(self.inputs)

    @property
    def d(self) -> int:
        return self.inputs.shape[1]


@dataclass
class TrainConfig:
    loss: str = "mse"
    lr_main: float = 1e-2
    lr_den_gate_scale: float = 0.1
    weight_decay_den: float = 1e-4
    group_lasso_lambda: float = 0.0
    batch_size: int = 0  # 0 means full batch
    epochs: int = 100
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss '{self.loss}', pick one of {LOSS_KINDS}")
        if not self.lr_main > 0:
            raise ValueError("lr_main must be positive")
        if not 0 < self.lr_den_gate_scale <= 1:
            raise ValueError("lr_den_gate_scale must lie in (0, 1]")
        if self.weight_decay_den < 0:
            raise ValueError("weight_decay_den must be >= 0")
        if self.group_lasso_lambda < 0:
            raise ValueError("group_lasso_lambda must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass
class TrainReport:
    train_losses: list
    val_losses: list
    grad_norms: list
    final_val_loss: float
    best_epoch: int
    wall_clock_s: float
    diverged: bool
    final_test_loss: float | None = None


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grad(model, X: np.ndarray, Y: np.ndarray, loss_kind: str):
    """Mean loss over the batch and its exact parameter gradient."""
    cache = model.forward_batch(X)
    logits = cache.logits
    N, C = logits.shape
    if loss_kind == "mse":
        Y = np.asarray(Y, dtype=float).reshape(N, C)
        err = logits - Y
        loss = float(np.mean(err ** 2))
        upstream = 2.0 * err / err.size
    elif loss_kind == "mae":
        Y = np.asarray(Y, dtype=float).reshape(N, C)
        err = logits - Y
        loss = float(np.mean(np.abs(err)))
        upstream = np.sign(err) / err.size
    elif loss_kind == "softmax_ce":
        labels = np.asarray(Y).reshape(N)
        if labels.dtype.kind not in "iu":
            raise ValueError("softmax_ce needs integer labels")
        if labels.min() < 0 or labels.max() >= C:
            raise ValueError(f"label out of range [0, {C})")
        probs = _softmax(logits)
        loss = float(-np.mean(np.log(probs[np.arange(N), labels] + 1e-300)))
        upstream = probs.copy()
        upstream[np.arange(N), labels] -= 1.0
        upstream /= N
    else:
        raise ValueError(f"unknown loss '{loss_kind}'")
    flat = model.backward_batch(cache, upstream)
    return loss, ModelGradients(flat, model.layout), cache


def group_lasso_penalty(model: AnovaModel, lam: float):
    """lam * sum over pairs of ||coefficients||_2 (gates excluded), with the
    exact subgradient that is zero at the origin."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    layout = model.layout
    flat_sub = np.zeros(layout.n_params)
    penalty = 0.0
    for (label, sl), unit in zip(layout.unit_slices,
                                 model.main_units + model.pair_units):
        if not label.startswith("pair_"):
            continue
        coeff_sl = slice(sl.start, sl.stop - 1)  # leave the gate out
        theta = np.concatenate([unit.num_coeffs, unit.den_coeffs])
        norm = float(np.linalg.norm(theta))
        penalty += lam * norm
        if norm > 0:
            flat_sub[coeff_sl] = lam * theta / norm
    return penalty, flat_sub


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def fresh(cls, n_params: int) -> "AdamState":
        return cls(np.zeros(n_params), np.zeros(n_params), 0)


def adam_step(model, state: AdamState, grad_flat: np.ndarray,
              config: TrainConfig) -> bool:
    """One Adam update in place. Returns False (step skipped, state
    untouched) when the gradient is non-finite."""
    if not np.all(np.isfinite(grad_flat)):
        return False
    layout = model.layout
    lr = np.full(layout.n_params, config.lr_main)
    slow = np.concatenate([layout.groups["denominators"], layout.groups["gates"]])
    lr[slow.astype(int)] *= config.lr_den_gate_scale
    state.t += 1
    state.m = config.adam_beta1 * state.m + (1 - config.adam_beta1) * grad_flat
    state.v = config.adam_beta2 * state.v + (1 - config.adam_beta2) * grad_flat ** 2
    mhat = state.m / (1 - config.adam_beta1 ** state.t)
    vhat = state.v / (1 - config.adam_beta2 ** state.t)
    theta = model.get_flat()
    theta -= lr * mhat / (np.sqrt(vhat) + config.adam_eps)
    den_idx = layout.groups["denominators"]
    if config.weight_decay_den > 0 and den_idx.size:
        theta[den_idx] -= lr[den_idx] * config.weight_decay_den * theta[den_idx]
    model.set_flat(theta)
    return True


def evaluate(model, X: np.ndarray, Y: np.ndarray, loss_kind: str) -> float:
    cache = model.forward_batch(X, with_params=False)
    logits = cache.logits
    N, C = logits.shape
    if loss_kind == "mse":
        return float(np.mean((logits - np.asarray(Y, float).reshape(N, C)) ** 2))
    if loss_kind == "mae":
        return float(np.mean(np.abs(logits - np.asarray(Y, float).reshape(N, C))))
    if loss_kind == "softmax_ce":
        labels = np.asarray(Y).reshape(N)
        probs = _softmax(logits)
        return float(-np.mean(np.log(probs[np.arange(N), labels] + 1e-300)))
    raise ValueError(f"unknown loss '{loss_kind}'")


def train(model, dataset: Dataset, config: TrainConfig) -> TrainReport:
    """Seeded minibatch Adam with best-validation checkpointing.

    The model is updated in place and ends at the best-validation
    parameters. Divergence (non-finite loss twice in a row) aborts early
    and flags the report.
    """
    t0 = time.perf_counter()
    rng = stream(config.seed, "shuffle")
    n = dataset.n
    idx = stream(config.seed, "val_split").permutation(n)
    n_val = int(round(config.val_fraction * n))
    val_idx, tr_idx = idx[:n_val], idx[n_val:]
    if len(tr_idx) == 0:
        raise ValueError("empty training split")
    Xtr, Ytr = dataset.inputs[tr_idx], dataset.targets[tr_idx]
    Xval, Yval = dataset.inputs[val_idx], dataset.targets[val_idx]

    state = AdamState.fresh(model.layout.n_params)
    bs = config.batch_size if config.batch_size > 0 else len(tr_idx)
    train_losses, val_losses, grad_norms = [], [], []
    best_val = np.inf
    best_params = model.get_flat()
    best_epoch = 0
    bad_streak = 0
    diverged = False
    eps_floor = 1.0 + min(u.eps for u in _all_units(model)) - 1e-12 \
        if _all_units(model) else None

    for epoch in range(config.epochs):
        order = rng.permutation(len(tr_idx))
        ep_losses, ep_norms = [], []
        for start in range(0, len(order), bs):
            sel = order[start:start + bs]
            loss, grads, cache = loss_and_grad(model, Xtr[sel], Ytr[sel],
                                               config.loss)
            if eps_floor is not None and cache.min_den < eps_floor:
                raise AssertionError("denominator fell below its structural floor")
            gflat = grads.flat
            if config.group_lasso_lambda > 0 and isinstance(model, AnovaModel):
                pen, sub = group_lasso_penalty(model, config.group_lasso_lambda)
                gflat = gflat + sub
            if not np.isfinite(loss):
                bad_streak += 1
                if bad_streak >= 2:
                    diverged = True
                    break
                continue
            bad_streak = 0
            adam_step(model, state, gflat, config)
            ep_losses.append(loss)
            ep_norms.append(float(np.linalg.norm(gflat)))
        if diverged:
            break
        train_losses.append(float(np.mean(ep_losses)) if ep_losses else np.nan)
        grad_norms.append(float(np.mean(ep_norms)) if ep_norms else np.nan)
        if len(val_idx):
            vl = evaluate(model, Xval, Yval, config.loss)
        else:
            vl = train_losses[-1]
        val_losses.append(vl)
        if np.isfinite(vl) and vl < best_val:
            best_val = vl
            best_params = model.get_flat()
            best_epoch = epoch

    model.set_flat(best_params)
    final_val = best_val if np.isfinite(best_val) else np.nan
    return TrainReport(train_losses, val_losses, grad_norms,
                       float(final_val), best_epoch,
                       time.perf_counter() - t0, diverged)


def _all_units(model):
    if isinstance(model, AnovaModel):
        return model.main_units + model.pair_units
    units = []
    for b in getattr(model, "blocks", []):
        units.extend(b.units)
    return units
