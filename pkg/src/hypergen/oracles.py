"""Closed-form constructions that bound what the weight generator can express.

* :func:`one_step_gd_logits` -- logits-layer update after one gradient step
  on softmax cross-entropy from a label-independent initialization.
* :func:`construct_attention_generator` -- a single self-attention layer with
  hand-set query/key/value maps whose placeholder outputs are per-class
  embedding means.
* :func:`semi_supervised_propagation` -- a two-layer residual construction
  that first marks unlabeled samples with the classes of similar labeled
  samples, then averages embeddings per class.
* :func:`ode_track` -- transports a minimizer of ``L(theta, t)`` along a task
  curve by integrating ``dtheta/dgamma = -H^{-1} (d2L/dtheta dt) dt/dgamma``.

Everything here is plain numpy and independent of :mod:`hypergen.tensor`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

from .episodes import UNLABELED


def _one_hot(labels, n_classes) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        return labels.astype(np.float64)
    y = np.zeros((len(labels), n_classes))
    y[np.arange(len(labels)), labels] = 1.0
    return y


@dataclass
class LogitsUpdate:
    deltaW: np.ndarray  # |C| x dim_e
    deltaB: np.ndarray  # |C|
    gamma: float
    label_term: np.ndarray = None  # gamma/n * sum_m y_i e_j
    mean_term: np.ndarray = None  # gamma/(n |C|) * sum_m e_j


def one_step_gd_logits(embeddings, labels, gamma: float, n_classes: int) -> LogitsUpdate:
    """Exact single-step update of a logits layer.

    ``dW_ij = gamma/n sum_m (y_i^m - 1/|C|) e_j^m`` and
    ``db_i = gamma/n sum_m (y_i^m - 1/|C|)``; ``labels`` are class indices or
    one-hot rows.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    n = e.shape[0]
    if n < 1:
        raise ValueError("need at least one sample")
    y = _one_hot(labels, n_classes)
    centered = y - 1.0 / n_classes
    dW = gamma / n * centered.T @ e
    db = gamma / n * centered.sum(axis=0)
    label_term = gamma / n * y.T @ e
    mean_term = np.broadcast_to(gamma / (n * n_classes) * e.sum(axis=0), dW.shape).copy()
    return LogitsUpdate(dW, db, gamma, label_term, mean_term)


# -- hand-constructed attention -------------------------------------------------

@dataclass
class AttentionConstruction:
    """Result of a hand-set self-attention pass over sample and placeholder tokens.

    ``slices`` are the placeholder outputs of the class-matching head (rows
    approximate per-class embedding means); ``delta_w`` combines it with the
    uniform head as ``scale * (class_head - uniform_head)``.
    """

    slices: np.ndarray
    attention: np.ndarray  # |C| x n_tokens, class head, placeholder rows only
    leakage: np.ndarray  # per slice: attention mass on non-matching tokens
    tokens: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    label_dim: int
    shift: np.ndarray
    uniform_slices: np.ndarray = None
    delta_w: np.ndarray = None
    head_scale: float = 1.0


def _label_basis(n_classes: int) -> dict:
    """Orthonormal label-space layout: xi(c), mu(i), xi_hat, sample marker."""
    return {"xi": 0, "mu": n_classes, "xi_hat": 2 * n_classes, "marker": 2 * n_classes + 1,
            "dim": 2 * n_classes + 2}


def _softmax_rows(s):
    s = s - s.max(axis=1, keepdims=True)
    p = np.exp(s)
    return p / p.sum(axis=1, keepdims=True)


def _attend(label_parts: np.ndarray, e: np.ndarray, n_classes: int, beta: float, two_head: bool,
            gamma: float, shift: np.ndarray, match: np.ndarray) -> AttentionConstruction:
    basis = _label_basis(n_classes)
    L, D = basis["dim"], e.shape[1]
    n = e.shape[0]
    mu = np.zeros((n_classes, L))
    mu[np.arange(n_classes), basis["mu"] + np.arange(n_classes)] = 1.0
    tokens = np.vstack([np.hstack([label_parts, e]), np.hstack([mu, np.zeros((n_classes, D))])])
    # class head: placeholder mu(i) queries xi(i); keys read the label part
    wq = np.zeros((L + D, L))
    wq[basis["mu"] + np.arange(n_classes), basis["xi"] + np.arange(n_classes)] = beta
    wk = np.zeros((L + D, L))
    wk[np.arange(L), np.arange(L)] = 1.0
    wv = np.zeros((L + D, D))
    wv[L + np.arange(D), np.arange(D)] = 1.0
    q = tokens[n:] @ wq
    attn = _softmax_rows(q @ (tokens @ wk).T)
    values = tokens @ wv
    slices = attn @ values
    leakage = np.array([attn[i, :n][~match[i]].sum() + attn[i, n:].sum() for i in range(n_classes)])
    out = AttentionConstruction(slices, attn, leakage, tokens, wq, wk, wv, L, shift)
    if two_head:
        wq2 = np.zeros((L + D, L))
        wq2[basis["mu"] + np.arange(n_classes), basis["marker"]] = beta
        attn2 = _softmax_rows((tokens[n:] @ wq2) @ (tokens @ wk).T)
        out.uniform_slices = attn2 @ values
        out.head_scale = gamma / n_classes
        out.delta_w = out.head_scale * (slices - out.uniform_slices)
    return out


def _center(e, center):
    e = np.asarray(e, dtype=np.float64)
    shift = e.mean(axis=0) if center else np.zeros(e.shape[1])
    return e - shift, shift


def construct_attention_generator(embeddings, labels, n_classes: int | None = None, gamma: float = 1.0,
                                  beta_scale: float = 50.0, two_head: bool = False,
                                  center: bool = False, leak_tolerance: float | None = None
                                  ) -> AttentionConstruction:
    """Generate logits-layer slices with one hand-set self-attention layer.

    Sample tokens are ``[xi(c_m) | e_m]`` (``xi_hat`` for unlabeled samples),
    placeholder tokens ``[mu(i) | 0]``.  The query of ``mu(i)`` is
    ``beta_scale * xi(i)`` and keys are label parts, so slice ``i`` averages
    the embeddings of class-``i`` samples; the attention mass that leaks to
    other tokens is of order ``exp(-beta_scale)``.

    With ``two_head`` a second head attends uniformly to all samples and
    ``delta_w = gamma/|C| * (class_mean - overall_mean)``, which equals the
    one-step update for balanced episodes.  ``center`` subtracts the sample
    mean first (recorded as ``shift``).  If ``leak_tolerance`` is given and
    exceeded, ``ValueError`` is raised.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    e, shift = _center(embeddings, center)
    basis = _label_basis(n_classes)
    parts = np.zeros((len(labels), basis["dim"]))
    lab = labels != UNLABELED
    parts[np.where(lab)[0], labels[lab]] = 1.0
    parts[np.where(~lab)[0], basis["xi_hat"]] = 1.0
    parts[:, basis["marker"]] = 1.0
    match = labels[None, :] == np.arange(n_classes)[:, None]
    out = _attend(parts, e, n_classes, beta_scale, two_head, gamma, shift, match)
    if leak_tolerance is not None and np.max(out.leakage) > leak_tolerance:
        raise ValueError(f"beta_scale={beta_scale} leaks {np.max(out.leakage):.3g} attention mass")
    return out


def attention_params(construction: AttentionConstruction, prefix: str = "") -> dict:
    """Express the class head as single-head parameters for ``multi_head_attention``.

    The query map absorbs the ``sqrt(width)`` scaling used there; the output
    projection writes the attended embedding into the embedding part.
    """
    c = construction
    width = c.wq.shape[1]
    d_model = c.tokens.shape[1]
    wo = np.zeros((c.wv.shape[1], d_model))
    wo[np.arange(c.wv.shape[1]), c.label_dim + np.arange(c.wv.shape[1])] = 1.0
    return {
        prefix + "wq": c.wq * np.sqrt(width), prefix + "bq": np.zeros(width),
        prefix + "wk": c.wk, prefix + "bk": np.zeros(width),
        prefix + "wv": c.wv, prefix + "bv": np.zeros(c.wv.shape[1]),
        prefix + "wo": wo, prefix + "bo": np.zeros(d_model),
    }


@dataclass
class PropagationResult:
    slices: np.ndarray
    marks: np.ndarray  # unlabeled rows: propagated class weights (n_unlabeled x |C|)
    layer2: AttentionConstruction


def semi_supervised_propagation(embeddings, partial_labels, n_classes: int | None = None,
                                beta1: float = 50.0, beta2: float = 50.0, gamma: float = 1.0,
                                ) -> PropagationResult:
    """Two-layer construction for supervised plus unlabeled support sets.

    Layer 1 (residual): each unlabeled token adds
    ``sum_j softmax_j(beta1 * e_u . e_j) xi(c_j)`` over labeled samples ``j``
    to its label part.  Layer 2 is :func:`construct_attention_generator`
    over all tokens, so a fully marked unlabeled sample is averaged into its
    propagated class.
    """
    labels = np.asarray(partial_labels, dtype=np.int64)
    lab = labels != UNLABELED
    if n_classes is None:
        n_classes = int(labels[lab].max()) + 1
    present = np.unique(labels[lab])
    if len(present) != n_classes:
        raise ValueError("every class needs at least one labeled sample")
    e = np.asarray(embeddings, dtype=np.float64)
    basis = _label_basis(n_classes)
    parts = np.zeros((len(labels), basis["dim"]))
    parts[np.where(lab)[0], labels[lab]] = 1.0
    parts[np.where(~lab)[0], basis["xi_hat"]] = 1.0
    parts[:, basis["marker"]] = 1.0
    onehot = _one_hot(labels[lab], n_classes)
    marks = np.zeros((int((~lab).sum()), n_classes))
    if marks.shape[0]:
        a = _softmax_rows(beta1 * e[~lab] @ e[lab].T)
        marks = a @ onehot
        parts[np.where(~lab)[0], :n_classes] += marks
    match = np.zeros((n_classes, len(labels)), dtype=bool)
    match[:, lab] = labels[lab][None, :] == np.arange(n_classes)[:, None]
    layer2 = _attend(parts, e, n_classes, beta2, False, gamma, np.zeros(e.shape[1]), match)
    return PropagationResult(layer2.slices, marks, layer2)


# -- minimum tracking ----------------------------------------------------------------

class TrackingError(RuntimeError):
    def __init__(self, gamma: float, message: str):
        super().__init__(f"at gamma={gamma:.6g}: {message}")
        self.gamma = gamma


class QuadraticFamily:
    """``L(theta, t) = 0.5 * ||theta - A t||^2`` with minimizer ``A t``."""

    def __init__(self, A):
        self.A = np.asarray(A, dtype=np.float64)

    def loss(self, theta, t):
        r = theta - self.A @ t
        return 0.5 * float(r @ r)

    def grad(self, theta, t):
        return theta - self.A @ t

    def hess(self, theta, t):
        return np.eye(len(theta))

    def mixed(self, theta, t):
        return -self.A


class LogisticFamily:
    """L2-regularized two-class logistic regression whose class means move with the task.

    Sample ``i`` sits at ``X_i + y_i t`` (labels ``y`` in {-1, +1}), and
    ``theta = (w, b)``.
    """

    def __init__(self, X, y, lam: float = 0.1):
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        self.lam = lam

    def _parts(self, theta, t):
        p = self.X.shape[1]
        w, b = theta[:p], theta[p]
        x = self.X + self.y[:, None] * t[None, :]
        s = self.y * (x @ w + b)
        sig = 0.5 * (1.0 - np.tanh(0.5 * s))  # sigmoid(-s), overflow-safe
        xt = np.hstack([x, np.ones((len(x), 1))])
        return w, s, sig, xt

    def loss(self, theta, t):
        _, s, _, _ = self._parts(theta, t)
        return float(np.mean(np.logaddexp(0.0, -s)) + 0.5 * self.lam * theta @ theta)

    def grad(self, theta, t):
        _, _, sig, xt = self._parts(theta, t)
        return -(sig * self.y) @ xt / len(sig) + self.lam * theta

    def hess(self, theta, t):
        _, _, sig, xt = self._parts(theta, t)
        wgt = sig * (1.0 - sig)
        return (xt * wgt[:, None]).T @ xt / len(sig) + self.lam * np.eye(len(theta))

    def mixed(self, theta, t):
        w, _, sig, xt = self._parts(theta, t)
        p = self.X.shape[1]
        n = len(sig)
        wgt = sig * (1.0 - sig)
        m = ((self.y * wgt)[:, None] * xt).T @ np.ones((n, 1)) @ w[None, :] / n
        m[:p] -= np.eye(p) * sig.mean()
        return m


@dataclass
class TaskCurve:
    """A loss family plus a path ``t(gamma)`` from ``t0`` to ``t1`` (linear by default)."""

    family: object
    t0: np.ndarray
    t1: np.ndarray
    path: Callable | None = None
    path_derivative: Callable | None = None

    def __post_init__(self):
        self.t0 = np.asarray(self.t0, dtype=np.float64)
        self.t1 = np.asarray(self.t1, dtype=np.float64)

    def t(self, g: float) -> np.ndarray:
        if self.path is not None:
            return np.asarray(self.path(g), dtype=np.float64)
        return self.t0 + g * (self.t1 - self.t0)

    def dt(self, g: float) -> np.ndarray:
        if self.path_derivative is not None:
            return np.asarray(self.path_derivative(g), dtype=np.float64)
        return self.t1 - self.t0


def tracking_velocity(curve: TaskCurve, g: float, theta: np.ndarray) -> np.ndarray:
    t = curve.t(g)
    H = curve.family.hess(theta, t)
    rhs = curve.family.mixed(theta, t) @ curve.dt(g)
    try:
        factor = scipy.linalg.cho_factor(0.5 * (H + H.T))
    except np.linalg.LinAlgError as exc:
        raise TrackingError(g, "Hessian is not positive definite") from exc
    return -scipy.linalg.cho_solve(factor, rhs)


def ode_track(curve: TaskCurve, theta0, steps: int = 100, grad_tol: float = 1e-8) -> np.ndarray:
    """Fixed-step RK4 transport of a minimizer from ``t0`` to ``t1``."""
    theta = np.asarray(theta0, dtype=np.float64).copy()
    g0 = np.linalg.norm(curve.family.grad(theta, curve.t(0.0)))
    if g0 >= grad_tol:
        raise ValueError(f"theta0 is not a minimizer of L(., t0): gradient norm {g0:.3g}")
    h = 1.0 / steps
    for s in range(steps):
        g = s * h
        k1 = tracking_velocity(curve, g, theta)
        k2 = tracking_velocity(curve, g + h / 2, theta + h / 2 * k1)
        k3 = tracking_velocity(curve, g + h / 2, theta + h / 2 * k2)
        k4 = tracking_velocity(curve, g + h, theta + h * k3)
        theta = theta + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return theta
