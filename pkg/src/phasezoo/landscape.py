"""Loss-landscape metrics: Hessian top eigenvalue and trace, Bezier mode connectivity, CKA.

Curvature and connectivity routines work against an *objective*: anything
with ``loss(theta)``, ``grad(theta)`` and ``hvp(theta, v)`` over flat float
arrays. ``MLPObjective`` wraps a network and a dataset; ``QuadraticObjective``
and ``FunctionObjective`` exist for analytic checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Sequence

import numpy as np

from .data import Dataset
from .nn import ModelSpec, NumericError, ParameterVector, ShapeError, forward, hvp, layout_for, loss, loss_and_grad


class UndefinedSimilarityError(ValueError):
    """CKA is undefined for a representation with zero variance."""


class MLPObjective:
    """Mean cross-entropy of a fixed network architecture on a fixed dataset."""

    def __init__(self, spec: ModelSpec, data: Dataset, samples: int | None = None, seed: int = 0):
        self.spec = spec
        self.layout = layout_for(spec)
        if samples is not None and samples < len(data):
            # deterministic subsample for larger datasets
            idx = np.sort(np.random.default_rng(seed).choice(len(data), size=samples, replace=False))
            data = data.subset(idx)
        self.data = data

    def _p(self, theta) -> ParameterVector:
        return ParameterVector(np.asarray(theta, dtype=np.float64), self.layout)

    def loss(self, theta) -> float:
        return loss(self._p(theta), self.spec, self.data.inputs, self.data.labels)

    def grad(self, theta) -> np.ndarray:
        return loss_and_grad(self._p(theta), self.spec, self.data.inputs, self.data.labels)[1].values

    def hvp(self, theta, v) -> np.ndarray:
        return hvp(self._p(theta), self.spec, self.data.inputs, self.data.labels, self._p(v)).values

    def logits(self, theta) -> np.ndarray:
        return forward(self._p(theta), self.spec, self.data.inputs)


class QuadraticObjective:
    """``0.5 * theta^T A theta`` with symmetric ``A``."""

    def __init__(self, matrix):
        a = np.asarray(matrix, dtype=np.float64)
        self.matrix = 0.5 * (a + a.T)

    def loss(self, theta) -> float:
        theta = np.asarray(theta, dtype=np.float64)
        return float(0.5 * theta @ self.matrix @ theta)

    def grad(self, theta) -> np.ndarray:
        return self.matrix @ np.asarray(theta, dtype=np.float64)

    def hvp(self, theta, v) -> np.ndarray:
        return self.matrix @ np.asarray(v, dtype=np.float64)


class FunctionObjective:
    """Wraps a plain loss callable (and optionally its gradient)."""

    def __init__(self, fn: Callable[[np.ndarray], float], grad: Callable[[np.ndarray], np.ndarray] | None = None):
        self._fn = fn
        self._grad = grad

    def loss(self, theta) -> float:
        return float(self._fn(np.asarray(theta, dtype=np.float64)))

    def grad(self, theta) -> np.ndarray:
        if self._grad is None:
            raise NotImplementedError("no gradient supplied")
        return np.asarray(self._grad(np.asarray(theta, dtype=np.float64)), dtype=np.float64)


def _values(p) -> np.ndarray:
    return p.values if isinstance(p, ParameterVector) else np.asarray(p, dtype=np.float64)


def dense_hessian(objective, theta) -> np.ndarray:
    """Assemble H column by column from Hessian-vector products with basis vectors."""
    theta = _values(theta)
    m = theta.size
    cols = []
    for i in range(m):
        e = np.zeros(m)
        e[i] = 1.0
        cols.append(objective.hvp(theta, e))
    h = np.stack(cols, axis=1)
    return 0.5 * (h + h.T)


# ---------------------------------------------------------------------------
# curvature


@dataclass
class CurvatureReport:
    lambda_max: float | None
    trace_estimate: float | None
    trace_stderr: float  # NaN when a single probe gives no spread estimate
    probes_used: int
    power_iters: int
    converged: bool

    def to_dict(self) -> dict:
        return {
            "lambda_max": self.lambda_max, "trace_estimate": self.trace_estimate,
            "trace_stderr": None if math.isnan(self.trace_stderr) else self.trace_stderr,
            "probes_used": self.probes_used, "power_iters": self.power_iters, "converged": self.converged,
        }


def _check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite {what}")
    return x


def top_eigenvalue(objective, theta, max_iters: int = 100, tol: float = 1e-4,
                   seed: int = 0) -> tuple[float, bool, int]:
    """Power iteration on H through Hessian-vector products.

    Returns ``(eigenvalue, converged, iterations)``. The eigenvalue is the
    one of largest magnitude, signed by its Rayleigh quotient. Convergence
    means successive Rayleigh quotients agree to ``tol`` relative.
    """
    theta = _values(theta)
    v = np.random.default_rng(seed).standard_normal(theta.size)
    v /= np.linalg.norm(v)
    prev = None
    estimate = 0.0
    for it in range(1, max_iters + 1):
        hv = _check_finite(objective.hvp(theta, v), "Hessian-vector product")
        estimate = float(v @ hv)
        norm = np.linalg.norm(hv)
        if norm == 0.0:
            return 0.0, True, it
        if prev is not None and abs(estimate - prev) <= tol * max(abs(estimate), 1e-30):
            return estimate, True, it
        prev = estimate
        v = hv / norm
    return estimate, False, max_iters


def hessian_trace(objective, theta, probes: int = 100, seed: int = 0) -> CurvatureReport:
    """Hutchinson estimate of Tr(H) from Rademacher probes."""
    if probes < 1:
        raise ValueError("need at least one probe")
    theta = _values(theta)
    rng = np.random.default_rng(seed)
    samples = np.empty(probes)
    for i in range(probes):
        z = rng.integers(0, 2, size=theta.size) * 2.0 - 1.0
        samples[i] = z @ _check_finite(objective.hvp(theta, z), "Hessian-vector product")
    stderr = float(np.std(samples, ddof=1) / math.sqrt(probes)) if probes > 1 else math.nan
    return CurvatureReport(None, float(samples.mean()), stderr, probes, 0, False)


def curvature(objective, theta, probes: int = 100, seed: int = 0, max_iters: int = 100,
              tol: float = 1e-4) -> CurvatureReport:
    lam, converged, iters = top_eigenvalue(objective, theta, max_iters=max_iters, tol=tol, seed=seed)
    report = hessian_trace(objective, theta, probes=probes, seed=seed)
    report.lambda_max, report.converged, report.power_iters = lam, converged, iters
    return report


# ---------------------------------------------------------------------------
# mode connectivity


@dataclass
class BezierCurve:
    """Quadratic Bezier curve (1-t)^2 a + 2t(1-t) control + t^2 b."""

    endpoint_a: np.ndarray
    endpoint_b: np.ndarray
    control: np.ndarray
    degree: int = field(default=2, init=False)

    def point(self, t: float) -> np.ndarray:
        if t == 0.0:
            return self.endpoint_a.copy()
        if t == 1.0:
            return self.endpoint_b.copy()
        s = 1.0 - t
        return s * s * self.endpoint_a + 2.0 * t * s * self.control + t * t * self.endpoint_b

    def mirrored(self) -> "BezierCurve":
        return BezierCurve(self.endpoint_b, self.endpoint_a, self.control)


@dataclass
class ConnectivityReport:
    mc: float
    t_star: float
    curve_losses: list[tuple[float, float]]
    endpoint_mean_loss: float

    def to_dict(self) -> dict:
        return {"mc": self.mc, "t_star": self.t_star, "endpoint_mean_loss": self.endpoint_mean_loss,
                "curve_losses": [list(p) for p in self.curve_losses]}


def straight_line(a, b) -> BezierCurve:
    a, b = _values(a), _values(b)
    return BezierCurve(a.copy(), b.copy(), 0.5 * (a + b))


def fit_bezier(a, b, objective, steps: int = 2000, lr: float = 0.1, seed: int = 0,
               momentum: float = 0.9, batch_size: int | None = 32) -> BezierCurve:
    """Fit the control point of a quadratic Bezier curve between two fixed endpoints.

    The control point starts at the midpoint and follows SGD on
    ``L(curve(t))`` with ``t ~ U(0, 1)`` drawn afresh every step. Identical
    endpoints give a degenerate curve that is left untouched.
    """
    if isinstance(a, ParameterVector) and isinstance(b, ParameterVector) and not a.same_layout(b):
        raise ShapeError("endpoints have different layouts")
    av, bv = _values(a), _values(b)
    if av.shape != bv.shape:
        raise ShapeError(f"endpoint shapes differ: {av.shape} vs {bv.shape}")
    curve = straight_line(av, bv)
    if steps <= 0 or np.array_equal(av, bv):
        return curve
    rng = np.random.default_rng(seed)
    phi = curve.control.copy()
    velocity = np.zeros_like(phi)
    sub = objective
    for _ in range(steps):
        t = rng.uniform(0.0, 1.0)
        if batch_size is not None and isinstance(objective, MLPObjective) and batch_size < len(objective.data):
            idx = rng.choice(len(objective.data), size=batch_size, replace=False)
            sub = MLPObjective(objective.spec, objective.data.subset(idx))
        point = (1 - t) ** 2 * av + 2 * t * (1 - t) * phi + t * t * bv
        g = _check_finite(sub.grad(point), "curve gradient") * (2 * t * (1 - t))
        velocity = momentum * velocity + g
        phi = phi - lr * velocity
    return BezierCurve(av.copy(), bv.copy(), phi)


def t_grid(size: int) -> np.ndarray:
    if size < 3 or size % 2 == 0:
        raise ValueError("t grid needs an odd size >= 3 so that it contains 0, 0.5 and 1")
    return np.linspace(0.0, 1.0, size)


def mode_connectivity(curve: BezierCurve, objective, t_grid_size: int = 21, argmin: bool = False) -> ConnectivityReport:
    """Endpoint-mean loss minus the loss at the extremal point of the curve.

    ``t*`` maximizes the absolute deviation from the endpoint mean, so a
    barrier gives mc < 0 and a lower-loss valley gives mc > 0. ``argmin=True``
    selects the grid point of *smallest* deviation instead, endpoints included.
    """
    ts = t_grid(t_grid_size)
    losses = []
    for t in ts:
        value = objective.loss(curve.point(float(t)))
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss on the curve at t={t:.6g}")
        losses.append(value)
    losses = np.array(losses)
    mean_end = 0.5 * (losses[0] + losses[-1])
    dev = np.abs(mean_end - losses)
    i = int(np.argmin(dev)) if argmin else int(np.argmax(dev))
    return ConnectivityReport(float(mean_end - losses[i]), float(ts[i]),
                              [(float(t), float(l)) for t, l in zip(ts, losses)], float(mean_end))


# ---------------------------------------------------------------------------
# CKA


@dataclass
class SimilarityReport:
    cka: float
    n_samples: int


def _centered(x: np.ndarray) -> np.ndarray:
    return x - x.mean(axis=0, keepdims=True)


def centered_gram(x: np.ndarray) -> np.ndarray:
    """H K H for the linear kernel K = x x^T, H = I - 11^T/n (computed as Xc Xc^T)."""
    xc = _centered(x)
    return xc @ xc.T


def hsic(kc: np.ndarray, lc: np.ndarray) -> float:
    n = kc.shape[0]
    return float(np.sum(kc * lc) / (n - 1) ** 2)  # tr(Kc Lc) for symmetric matrices


def _zero_variance(x: np.ndarray) -> bool:
    return np.linalg.norm(_centered(x)) <= 1e-12 * max(1.0, np.linalg.norm(x))


def cka_similarity(x, y) -> SimilarityReport:
    """Linear CKA between two ``n x C`` representations of the same inputs."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or x.shape != y.shape:
        raise ShapeError(f"representations must have equal 2-D shapes, got {x.shape} and {y.shape}")
    n = x.shape[0]
    if n < 2:
        raise ValueError("CKA needs at least two samples")
    if _zero_variance(x) or _zero_variance(y):
        raise UndefinedSimilarityError("a representation has zero variance")
    kc, lc = centered_gram(x), centered_gram(y)
    kk, ll = hsic(kc, kc), hsic(lc, lc)
    return SimilarityReport(hsic(kc, lc) / math.sqrt(kk * ll), n)


# ---------------------------------------------------------------------------
# seed pairs


@dataclass
class PairwiseReport:
    mc_mean: float
    cka_mean: float
    pairs: list[dict]


def pairwise_metrics(models: Sequence, objective: MLPObjective, labels: Sequence | None = None,
                     bezier_steps: int = 2000, bezier_lr: float = 0.1, bezier_batch: int | None = 32,
                     t_grid_size: int = 21, seed: int = 0, argmin: bool = False) -> PairwiseReport:
    """Mode connectivity and CKA for every unordered pair of same-config models."""
    if len(models) < 2:
        raise ValueError("pairwise metrics need at least two models")
    labels = list(labels) if labels is not None else list(range(len(models)))
    values = [_values(m) for m in models]
    logits = [objective.logits(v) for v in values]
    pairs = []
    for i, j in combinations(range(len(values)), 2):
        curve = fit_bezier(values[i], values[j], objective, steps=bezier_steps, lr=bezier_lr,
                           seed=seed + 1000 * i + j, batch_size=bezier_batch)
        conn = mode_connectivity(curve, objective, t_grid_size, argmin=argmin)
        try:
            cka, undefined = cka_similarity(logits[i], logits[j]).cka, False
        except UndefinedSimilarityError:
            # a constant-output model shares no variance with anything
            cka, undefined = 0.0, True
        pairs.append({"seeds": [labels[i], labels[j]], "mc": conn.mc, "t_star": conn.t_star, "cka": cka,
                      "cka_undefined": undefined})
    return PairwiseReport(float(np.mean([p["mc"] for p in pairs])), float(np.mean([p["cka"] for p in pairs])), pairs)
