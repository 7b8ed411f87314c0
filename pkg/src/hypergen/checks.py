"""Numerical self-checks of the closed-form constructions.

Each check returns a :class:`CheckResult` holding the measured worst-case
value next to its tolerance, so the same numbers can be reported by the
command line and asserted by tests.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .episodes import UNLABELED
from .oracles import (LogisticFamily, QuadraticFamily, TaskCurve, construct_attention_generator,
                      ode_track, one_step_gd_logits, semi_supervised_propagation)


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool

    @classmethod
    def below(cls, name, value, tolerance):
        value = float(value)
        return cls(name, value, tolerance, bool(value < tolerance))


def _rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def _balanced_labels(rng, n_classes, per_class):
    labels = np.repeat(np.arange(n_classes), per_class)
    return rng.permutation(labels)


# -- logits update --------------------------------------------------------------------

def autodiff_logits_step(embeddings, labels, gamma, n_classes, w0=None, b0=None):
    """``-gamma`` times the gradient of mean cross-entropy w.r.t. the logits layer."""
    e = np.asarray(embeddings, dtype=np.float64)
    d = e.shape[1]
    W = T.Tensor(np.zeros((n_classes, d)) if w0 is None else w0, requires_grad=True)
    b = T.Tensor(np.zeros(n_classes) if b0 is None else b0, requires_grad=True)
    with T.Tape():
        logits = T.add(T.matmul(T.Tensor(e), T.transpose(W, (1, 0))), b)
        grads = T.backward(T.cross_entropy(logits, np.asarray(labels)))
    return -gamma * grads[W], -gamma * grads[b]


def check_gd_matches_autodiff(instances=100, seed=0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        C, d, n = int(rng.integers(2, 8)), int(rng.integers(2, 12)), int(rng.integers(1, 20))
        e = rng.normal(size=(n, d))
        y = rng.integers(0, C, size=n)
        gamma = float(rng.uniform(0.1, 2.0))
        # any label-independent start works: equal logits for every class
        b0 = np.full(C, rng.normal())
        w0 = np.tile(rng.normal(size=d), (C, 1))
        upd = one_step_gd_logits(e, y, gamma, C)
        gw, gb = autodiff_logits_step(e, y, gamma, C, w0, b0)
        worst = max(worst, _rel(upd.deltaW, gw), float(np.max(np.abs(upd.deltaB - gb))))
    return CheckResult.below("one_step_gd_logits == -gamma * autodiff gradient", worst, 1e-10)


def check_balanced_bias(instances=20, seed=1) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        C, k = int(rng.integers(2, 8)), int(rng.integers(1, 5))
        y = _balanced_labels(rng, C, k)
        upd = one_step_gd_logits(rng.normal(size=(len(y), 4)), y, 1.0, C)
        worst = max(worst, float(np.max(np.abs(upd.deltaB))))
    return CheckResult.below("balanced episode has zero bias update", worst, 1e-12)


# -- attention construction ---------------------------------------------------------------

def check_attention_one_shot(instances=20, seed=2) -> list:
    rng = np.random.default_rng(seed)
    err = leak = 0.0
    for _ in range(instances):
        C, d = int(rng.integers(2, 10)), int(rng.integers(2, 16))
        y = rng.permutation(C)
        e = rng.normal(size=(C, d))
        out = construct_attention_generator(e, y, C, beta_scale=50.0)
        err = max(err, float(np.max(np.abs(out.slices[y] - e))))
        leak = max(leak, float(np.max(out.leakage)))
    return [CheckResult.below("one sample per class: slice equals its embedding", err, 1e-6),
            CheckResult.below("one sample per class: mismatched attention mass", leak, 1e-9)]


def check_attention_class_mean(instances=100, seed=3) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        C, d = int(rng.integers(2, 8)), int(rng.integers(2, 12))
        y = np.concatenate([np.arange(C), rng.integers(0, C, size=int(rng.integers(0, 12)))])
        y = rng.permutation(y)
        e = rng.normal(size=(len(y), d))
        gamma = float(rng.uniform(0.1, 2.0))
        out = construct_attention_generator(e, y, C, gamma=gamma, beta_scale=50.0)
        upd = one_step_gd_logits(e, y, gamma, C)
        counts = np.bincount(y, minlength=C)
        scaled = gamma * counts[:, None] / len(y) * out.slices
        worst = max(worst, float(np.max(np.abs(scaled - upd.label_term))))
    return CheckResult.below("attention slices match the per-class term of the GD step", worst, 1e-6)


def check_two_head_balanced(instances=50, seed=4) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        C, k, d = int(rng.integers(2, 7)), int(rng.integers(1, 4)), int(rng.integers(2, 10))
        y = _balanced_labels(rng, C, k)
        e = rng.normal(size=(len(y), d))
        gamma = float(rng.uniform(0.1, 2.0))
        out = construct_attention_generator(e, y, C, gamma=gamma, beta_scale=50.0,
                                            two_head=True)
        upd = one_step_gd_logits(e, y, gamma, C)
        # delta_w is gamma/|C| * (class mean - overall mean); the GD step is
        # gamma/n * sum (y - 1/|C|) e = gamma/|C| * (class mean - overall mean) when balanced
        worst = max(worst, float(np.max(np.abs(out.delta_w - upd.deltaW))))
    return CheckResult.below("two-head construction equals the full GD step (balanced)", worst, 1e-6)


def beta_errors(betas=(5.0, 10.0, 20.0, 50.0), instances=20, seed=5) -> np.ndarray:
    """Mean |slice - class mean| for each ``beta_scale``."""
    rng = np.random.default_rng(seed)
    errs = np.zeros(len(betas))
    for _ in range(instances):
        C, d = int(rng.integers(2, 6)), 6
        y = rng.permutation(np.concatenate([np.arange(C), rng.integers(0, C, size=4)]))
        e = rng.normal(size=(len(y), d))
        counts = np.bincount(y, minlength=C)
        means = (np.eye(C)[y].T @ e) / counts[:, None]
        for j, beta in enumerate(betas):
            out = construct_attention_generator(e, y, C, beta_scale=beta)
            errs[j] += np.abs(out.slices - means).mean() / instances
    return errs


def check_beta_monotone() -> CheckResult:
    errs = beta_errors()
    worst_increase = float(np.max(np.diff(errs)))
    return CheckResult("error decreases with beta_scale over 5,10,20,50", worst_increase, 0.0,
                       bool(np.all(np.diff(errs) < 0)))


def check_oracle_permutation(instances=20, seed=6) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        C, d = 4, 5
        y = rng.permutation(np.concatenate([np.arange(C), rng.integers(0, C, size=6)]))
        y_u = y.copy()
        y_u[rng.random(len(y)) < 0.3] = UNLABELED
        y_u[:C] = np.arange(C)
        e = rng.normal(size=(len(y), d))
        p = rng.permutation(len(y))
        pairs = [
            (one_step_gd_logits(e, y, 0.5, C).deltaW, one_step_gd_logits(e[p], y[p], 0.5, C).deltaW),
            (construct_attention_generator(e, y, C).slices,
             construct_attention_generator(e[p], y[p], C).slices),
            (semi_supervised_propagation(e, y_u, C).slices,
             semi_supervised_propagation(e[p], y_u[p], C).slices),
        ]
        worst = max(worst, max(float(np.max(np.abs(a - b))) for a, b in pairs))
    return CheckResult.below("oracle outputs invariant to sample order", worst, 1e-12)


def check_propagation(seed=7) -> list:
    rng = np.random.default_rng(seed)
    C, d = 4, 6
    y = rng.permutation(np.repeat(np.arange(C), 2))
    e = rng.normal(size=(len(y), d))
    no_u = float(np.max(np.abs(semi_supervised_propagation(e, y, C).slices
                                - construct_attention_generator(e, y, C).slices)))
    # unlabeled copy of a labeled sample lands in its class
    e1 = rng.normal(size=(C, d))
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e1 *= 3.0
    x = np.vstack([e1, e1[2:3]])
    lab = np.array([0, 1, 2, 3, UNLABELED])
    dup = semi_supervised_propagation(x, lab, C, beta1=50.0, beta2=50.0)
    dup_err = float(np.max(np.abs(dup.slices[2] - 0.5 * (e1[2] + e1[2]))))
    # an unlabeled sample orthogonal to every labeled one gets uniform marks
    # and, at the class-head query strength, contributes almost nothing
    basis = np.eye(C + 1)
    x2 = np.vstack([basis[:C] * 2.0, basis[C] * 2.0])
    orth = semi_supervised_propagation(x2, lab, C)
    ref = construct_attention_generator(x2[:C], lab[:C], C).slices
    orth_err = float(np.max(np.abs(orth.slices - ref)))
    return [CheckResult.below("propagation without unlabeled samples equals the plain construction", no_u, 1e-12),
            CheckResult.below("unlabeled duplicate averages into its class", dup_err, 1e-4),
            CheckResult.below("orthogonal unlabeled sample barely moves any slice", orth_err, 1e-3)]


# -- minimum tracking ------------------------------------------------------------------

def newton_minimize(family, t, theta, tol=1e-13, max_iter=100) -> np.ndarray:
    """Direct re-optimization used as the reference for tracking."""
    theta = np.array(theta, dtype=np.float64)
    for _ in range(max_iter):
        g = family.grad(theta, t)
        if np.linalg.norm(g) < tol:
            break
        theta = theta - np.linalg.solve(family.hess(theta, t), g)
    return theta


def logistic_instance(seed=8, n=40, p=3):
    rng = np.random.default_rng(seed)
    y = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    X = rng.normal(size=(n, p))
    fam = LogisticFamily(X, y, lam=0.1)
    t0 = 0.5 * rng.normal(size=p)
    t1 = t0 + rng.normal(size=p)
    return fam, t0, t1


def check_mixed_derivative(seed=8, h=1e-6) -> CheckResult:
    fam, t0, _ = logistic_instance(seed)
    rng = np.random.default_rng(seed + 1)
    theta = rng.normal(size=fam.X.shape[1] + 1)
    fd = np.zeros((len(theta), len(t0)))
    for j in range(len(t0)):
        dt = np.zeros(len(t0))
        dt[j] = h
        fd[:, j] = (fam.grad(theta, t0 + dt) - fam.grad(theta, t0 - dt)) / (2 * h)
    return CheckResult.below("logistic mixed derivative matches finite differences",
                             _rel(fam.mixed(theta, t0), fd), 1e-6)


def check_tracking() -> list:
    rng = np.random.default_rng(9)
    A = rng.normal(size=(4, 3))
    quad = QuadraticFamily(A)
    t0, t1 = rng.normal(size=3), rng.normal(size=3)
    theta_q = ode_track(TaskCurve(quad, t0, t1), A @ t0)
    const = ode_track(TaskCurve(quad, t0, t0), A @ t0)
    fam, l0, l1 = logistic_instance()
    start = newton_minimize(fam, l0, np.zeros(fam.X.shape[1] + 1))
    tracked = ode_track(TaskCurve(fam, l0, l1), start, steps=100)
    direct = newton_minimize(fam, l1, tracked)
    return [
        CheckResult.below("constant task curve leaves theta unchanged", np.max(np.abs(const - A @ t0)), 1e-300),
        CheckResult.below("quadratic family tracks A t1", np.max(np.abs(theta_q - A @ t1)), 1e-10),
        CheckResult.below("logistic tracking vs direct re-optimization", np.linalg.norm(tracked - direct), 1e-4),
        CheckResult.below("logistic final gradient norm", np.linalg.norm(fam.grad(tracked, l1)), 1e-6),
    ]


# -- generator checks -----------------------------------------------------------------

def micro_generator(seed=0, allocation="output"):
    """Two-way, 2-channel, two-conv CNN with every layer generated by a 1-layer 1-head encoder."""
    from .cnn import CnnSpec
    from .generator import HyperTransformer, TransformerConfig
    spec = CnnSpec.standard(2, 2, n_conv=2, generate="all", input_shape=(1, 16, 16))
    return HyperTransformer(spec, TransformerConfig(num_layers=1, num_heads=1, allocation=allocation), seed)


def micro_episode(seed=0, n=2, k=1, q=2, size=16):
    from .episodes import sample_episode, synth_glyphs
    return sample_episode(synth_glyphs(4, 6, size, seed=seed).with_standardization(), n, k, q, seed=seed)


def check_episode_gradient(coords=24, seed=0, h=1e-6) -> CheckResult:
    """Tape gradient of the episode loss vs central differences on random generator coordinates."""
    model = micro_generator(seed)
    episode = micro_episode(seed)
    rng = np.random.default_rng(seed)
    # Zero-initialised biases put ReLU inputs exactly on the kink wherever the
    # incoming activations are dead; move to a generic point first.
    for name, p in model.params.items():
        if name.endswith("bias") or name.endswith(".b") or name.endswith("b1") or name.endswith("b2"):
            p.data = p.data + 0.01 * rng.standard_normal(p.shape)
    with T.Tape():
        loss, _, _ = model.episode_loss(episode)
        grads = T.backward(loss)
    names = [k for k in model.params if not k.startswith("cnn.")]
    analytic, numeric = [], []
    for _ in range(coords):
        name = names[rng.integers(len(names))]
        p = model.params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        old = p.data[idx]
        vals = []
        for delta in (h, -h):
            p.data[idx] = old + delta
            with T.no_grad():
                vals.append(model.episode_loss(episode)[0].item())
        p.data[idx] = old
        numeric.append((vals[0] - vals[1]) / (2 * h))
        g = grads.get(p)
        analytic.append(0.0 if g is None else g[idx])
    a, b = np.array(analytic), np.array(numeric)
    err = float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-300))
    return CheckResult.below("episode-loss gradient vs finite differences", err, 1e-3)


def support_permutation_error(model, episode, permutations=5, seed=0) -> float:
    """Largest change of any generated tensor when the support set is reordered."""
    rng = np.random.default_rng(seed)
    with T.no_grad():
        base = model.generate(episode.support_images, episode.support_labels).weights
        worst = 0.0
        for _ in range(permutations):
            order = rng.permutation(len(episode.support_labels))
            w = model.generate(episode.support_images[order], episode.support_labels[order]).weights
            for i in model.spec.generated_layers:
                for a, b in ((w.kernels[i], base.kernels[i]), (w.biases[i], base.biases[i])):
                    worst = max(worst, float(np.max(np.abs(a.data - b.data))))
    return worst


SUITES = {
    "appendixA": lambda: [check_gd_matches_autodiff(), check_balanced_bias(), *check_attention_one_shot(),
                          check_attention_class_mean(), check_two_head_balanced(), check_beta_monotone(),
                          check_oracle_permutation(), *check_propagation()],
    "appendixB": lambda: [check_mixed_derivative(), *check_tracking()],
}


def run_suite(name: str) -> dict:
    names = list(SUITES) if name == "all" else [name]
    if any(n not in SUITES for n in names):
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)} or 'all'")
    results = [r for n in names for r in SUITES[n]()]
    return {"suite": name, "passed": all(r.passed for r in results), "results": [asdict(r) for r in results]}
