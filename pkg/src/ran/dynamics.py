"""Empirical tangent-kernel machinery and first-order influence analysis.

One SGD step on an example (x_u, y_u) changes the prediction at a query
x_o by -eta * J(x_o) J(x_u)^T grad_z L + O(eta^2), so the Gram matrix
J(x_o) J(x_u)^T acts as a kernel between data points.  Because the model
is linear in its head and each unit owns a disjoint parameter slice, the
kernel splits exactly into a head channel plus one channel per main
effect and per interaction pair.
"""

from dataclasses import dataclass

import numpy as np

from .model import AnovaModel, backward, forward
from .training import loss_and_grad


def output_param_grad(model, x: np.ndarray) -> np.ndarray:
    """Exact C x P Jacobian of the logits in canonical flat order."""
    x = np.asarray(x, dtype=float)
    C = model.C
    rows = []
    for c in range(C):
        upstream = np.zeros(C)
        upstream[c] = 1.0
        rows.append(backward(model, x, upstream).flat)
    return np.stack(rows, axis=0)


@dataclass
class EntkMatrix:
    total: np.ndarray               # C x C
    channels: dict                  # name -> C x C

    def channel_sum(self) -> np.ndarray:
        return sum(self.channels.values())


def entk(model, x_o: np.ndarray, x_u: np.ndarray) -> EntkMatrix:
    """K(x_o, x_u) = J(x_o) J(x_u)^T with per-parameter-group channels."""
    J_o = output_param_grad(model, x_o)
    J_u = output_param_grad(model, x_u)
    total = J_o @ J_u.T
    channels = {}
    if isinstance(model, AnovaModel):
        layout = model.layout
        for name, sl in layout.channels:
            channels[name] = J_o[:, sl] @ J_u[:, sl].T
    else:
        channels["all"] = total.copy()
    return EntkMatrix(total=total, channels=channels)


def _loss_grad_single(model, x_u, y_u, loss_kind):
    X = np.atleast_2d(np.asarray(x_u, dtype=float))
    Y = np.atleast_2d(np.asarray(y_u, dtype=float))
    if loss_kind == "softmax_ce":
        Y = np.asarray(y_u).reshape(1)
    _, grads, _ = loss_and_grad(model, X, Y, loss_kind)
    return grads.flat


def _query_value(model, x_o, loss_kind):
    z = forward(model, np.asarray(x_o, dtype=float))
    if loss_kind == "softmax_ce":
        s = z - np.max(z)
        return s - np.log(np.sum(np.exp(s)))   # log-probabilities
    return z


@dataclass
class InfluenceRecord:
    x_o: np.ndarray
    x_u: np.ndarray
    y_u: np.ndarray
    eta: float
    predicted: np.ndarray           # per-output predicted change
    realized: np.ndarray
    discrepancy: float


def predict_influence(model, x_o, x_u, y_u, eta: float,
                      loss: str = "mse") -> InfluenceRecord:
    """First-order predicted vs. realized effect of one plain SGD step.

    The realized change uses a bare gradient step (never Adam) so the
    measured discrepancy is the genuine second-order remainder.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    grad_u = _loss_grad_single(model, x_u, y_u, loss)
    J_o = output_param_grad(model, x_o)
    before = _query_value(model, x_o, loss)
    if loss == "softmax_ce":
        # d log pi / d z = I - softmax(z)^T broadcast over rows
        z = forward(model, np.asarray(x_o, dtype=float))
        s = np.exp(z - np.max(z))
        probs = s / np.sum(s)
        A = np.eye(model.C) - np.ones((model.C, 1)) * probs[None, :]
        predicted = -eta * A @ (J_o @ grad_u)
    else:
        predicted = -eta * J_o @ grad_u

    theta = model.get_flat()
    model.set_flat(theta - eta * grad_u)
    after = _query_value(model, x_o, loss)
    model.set_flat(theta)
    realized = after - before
    return InfluenceRecord(
        x_o=np.asarray(x_o, dtype=float), x_u=np.asarray(x_u, dtype=float),
        y_u=np.asarray(y_u, dtype=float), eta=eta, predicted=predicted,
        realized=realized,
        discrepancy=float(np.linalg.norm(predicted - realized)))


def accumulated_influence(model_snapshots, updates, x_o) -> np.ndarray:
    """Running sum of predicted per-step influences of `updates` on x_o.

    Snapshot t must hold the parameters in force when update t was
    applied; the trace has one row per update (cumulative, C columns).
    """
    snapshots = list(model_snapshots)
    updates = list(updates)
    if len(snapshots) != len(updates):
        raise ValueError(
            f"{len(snapshots)} snapshots vs {len(updates)} updates")
    if not updates:
        return np.zeros((0, 0))
    C = snapshots[0].C
    trace = np.zeros((len(updates), C))
    running = np.zeros(C)
    for t, (model, upd) in enumerate(zip(snapshots, updates)):
        x_u, y_u, eta = upd[0], upd[1], upd[2]
        loss = upd[3] if len(upd) > 3 else "mse"
        rec = predict_influence(model, x_o, x_u, y_u, eta, loss)
        running = running + rec.predicted
        trace[t] = running
    return trace
