"""Core domain types: time grids, random sources, generators, control problems.

Coefficient functions are numpy-vectorized over paths: ``x`` has shape
``(M, n)``, ``y`` shape ``(M,)``, ``z`` shape ``(M, d)``, and the control
``v`` is either a single point ``(k,)`` or per-path values ``(M, k)``.
Scalar-time evaluation keeps the hot loops in C.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import LabError, NonFiniteError

__all__ = [
    "TimeGrid",
    "RandomSource",
    "GeneratorSpec",
    "ControlSet",
    "ControlProblem",
    "ControlProcess",
    "SmoothTestFunction",
    "ValidationReport",
    "make_grid",
    "validate_problem",
]


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing time nodes t0 = s_0 < ... < s_N = T."""

    nodes: np.ndarray
    uniform: bool = True

    def __post_init__(self):
        nodes = _readonly(self.nodes)
        object.__setattr__(self, "nodes", nodes)
        if nodes.ndim != 1 or nodes.size < 2:
            raise LabError("time grid needs at least two nodes")
        if not np.all(np.diff(nodes) > 0):
            raise LabError("time grid nodes must be strictly increasing")

    @property
    def t0(self) -> float:
        return float(self.nodes[0])

    @property
    def T(self) -> float:
        return float(self.nodes[-1])

    @property
    def N(self) -> int:
        return self.nodes.size - 1

    @property
    def dt(self) -> np.ndarray:
        """Per-step widths, shape (N,)."""
        return np.diff(self.nodes)

    def restrict(self, last_index: int) -> "TimeGrid":
        """Sub-grid over the first ``last_index`` steps."""
        if not 1 <= last_index <= self.N:
            raise LabError(f"restrict index {last_index} outside 1..{self.N}")
        return TimeGrid(self.nodes[: last_index + 1].copy(), uniform=self.uniform)


def make_grid(t0: float, T: float, N: int) -> TimeGrid:
    """Uniform grid on [t0, T] with N steps; the last node is T exactly."""
    if not 0 <= t0 < T:
        raise LabError(f"need 0 <= t0 < T, got t0={t0}, T={T}")
    if N < 1:
        raise LabError(f"need N >= 1, got N={N}")
    return TimeGrid(np.linspace(t0, T, N + 1), uniform=True)


@dataclass(frozen=True)
class RandomSource:
    """Deterministic stream of Gaussian draws addressed by (seed, stream key).

    ``child(i, j, ...)`` derives an independent substream; substreams are
    pre-assigned to work items (one per ensemble, replication, ladder rung)
    before any parallel dispatch, so results do not depend on scheduling or
    thread count.  Draws use the counter-based Philox generator keyed through
    ``numpy.random.SeedSequence``; identical (seed, key, draw index) gives
    bit-identical output on every run.
    """

    seed: int
    key: tuple[int, ...] = ()

    def child(self, *indices: int) -> "RandomSource":
        return RandomSource(self.seed, self.key + tuple(int(i) for i in indices))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        return np.random.Generator(np.random.Philox(ss))

    def normals(self, shape: tuple[int, ...]) -> np.ndarray:
        """All of this stream's N(0,1) draws in one vectorized call."""
        return self.generator().standard_normal(shape)


@dataclass(frozen=True)
class GeneratorSpec:
    """BSDE driver g(t, x, y, z, v) with its declared Lipschitz constant.

    ``K`` bounds the (y, z) increments: |g(..., y, z, ...) - g(..., y', z', ...)|
    <= K (|y - y'| + |z - z'|).  Backward solvers rely on dt * K < 1.
    """

    g: Callable[..., np.ndarray]
    K: float = 0.0
    continuous_in_t: bool = True
    name: str = "generator"

    def __post_init__(self):
        if self.K < 0:
            raise LabError("Lipschitz constant K must be >= 0")

    def __call__(self, t, x, y, z, v) -> np.ndarray:
        out = np.asarray(self.g(t, x, y, z, v), dtype=np.float64)
        return out


@dataclass(frozen=True)
class ControlSet:
    """Compact control set U in R^k: an axis-aligned box, or an explicit finite set.

    Solvers act on ``mesh()``, a finite subset of U (box meshes default to
    11 points per axis).
    """

    lower: np.ndarray
    upper: np.ndarray
    points: np.ndarray | None = None  # explicit finite set, shape (m, k)

    def __post_init__(self):
        lo = _readonly(np.atleast_1d(self.lower))
        hi = _readonly(np.atleast_1d(self.upper))
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise LabError("control box bounds must be 1-d arrays of equal length")
        if np.any(hi < lo):
            raise LabError("control box upper bound below lower bound")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise LabError("control box must be bounded")
        if self.points is not None:
            pts = _readonly(np.atleast_2d(self.points))
            object.__setattr__(self, "points", pts)
            if pts.shape[1] != lo.size:
                raise LabError("explicit control points have wrong dimension")
            if not self.contains(pts).all():
                raise LabError("explicit control points fall outside the box")

    @property
    def k(self) -> int:
        return self.lower.size

    @classmethod
    def box(cls, bounds: Sequence[Sequence[float]]) -> "ControlSet":
        b = np.asarray(bounds, dtype=np.float64)
        return cls(lower=b[:, 0], upper=b[:, 1])

    @classmethod
    def singleton(cls, v: Sequence[float]) -> "ControlSet":
        v = np.atleast_1d(np.asarray(v, dtype=np.float64))
        return cls(lower=v, upper=v, points=v[None, :])

    def contains(self, v: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        v = np.atleast_2d(v)
        return np.all((v >= self.lower - tol) & (v <= self.upper + tol), axis=1)

    def mesh(self, points_per_axis: int = 11) -> np.ndarray:
        """Finite mesh of U, shape (m, k), in deterministic order."""
        if self.points is not None:
            return np.array(self.points)
        axes = []
        for lo, hi in zip(self.lower, self.upper):
            if hi == lo:
                axes.append(np.array([lo]))
            else:
                axes.append(np.linspace(lo, hi, points_per_axis))
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)


@dataclass(frozen=True)
class ControlProblem:
    """Controlled FBSDE data: forward coefficients, driver, terminal payoff.

    ``b(t, x, v) -> (M, n)`` and ``sigma(t, x, v) -> (M, n, d)`` may return
    broadcastable shapes ``(n,)`` / ``(n, d)``.  ``K_state`` bounds the joint
    (x, v)-Lipschitz increments of b and sigma; ``K_phi`` bounds Phi.
    """

    n: int
    d: int
    k: int
    b: Callable[..., np.ndarray]
    sigma: Callable[..., np.ndarray]
    generator: GeneratorSpec
    phi: Callable[[np.ndarray], np.ndarray]
    U: ControlSet
    T: float
    K_state: float = 0.0
    K_phi: float = 0.0
    name: str = "problem"

    def __post_init__(self):
        if min(self.n, self.d, self.k) < 1:
            raise LabError("dimensions n, d, k must be positive")
        if self.T <= 0:
            raise LabError("horizon T must be positive")
        if self.U.k != self.k:
            raise LabError(f"control set dimension {self.U.k} != k={self.k}")

    def drift(self, t: float, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        out = np.asarray(self.b(t, x, v), dtype=np.float64)
        return np.broadcast_to(out, (x.shape[0], self.n))

    def diffusion(self, t: float, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        out = np.asarray(self.sigma(t, x, v), dtype=np.float64)
        return np.broadcast_to(out, (x.shape[0], self.n, self.d))

    def terminal(self, x: np.ndarray) -> np.ndarray:
        out = np.asarray(self.phi(x), dtype=np.float64)
        return np.broadcast_to(out, (x.shape[0],))


@dataclass(frozen=True)
class ControlProcess:
    """Admissible control: constant, piecewise-constant on a grid, or feedback.

    kind "constant":  ``values`` is one point (k,).
    kind "piecewise": ``values`` is (N, k), one point per grid step.
    kind "feedback":  ``feedback(t, x) -> (M, k)`` with values in U.
    """

    kind: str
    U: ControlSet
    values: np.ndarray | None = None
    feedback: Callable[[float, np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.kind not in ("constant", "piecewise", "feedback"):
            raise LabError(f"unknown control kind {self.kind!r}")
        if self.kind in ("constant", "piecewise"):
            if self.values is None:
                raise LabError(f"{self.kind} control needs values")
            vals = np.atleast_1d(np.asarray(self.values, dtype=np.float64))
            if self.kind == "constant":
                vals = vals.reshape(-1)
                if not self.U.contains(vals[None, :]).all():
                    raise LabError("constant control outside U")
            else:
                vals = np.atleast_2d(vals)
                if not self.U.contains(vals).all():
                    raise LabError("piecewise control values outside U")
            object.__setattr__(self, "values", _readonly(vals))
        elif self.feedback is None:
            raise LabError("feedback control needs a feedback map")

    @classmethod
    def constant(cls, U: ControlSet, v) -> "ControlProcess":
        return cls(kind="constant", U=U, values=np.atleast_1d(np.asarray(v, dtype=np.float64)))

    def at_step(self, i: int, t: float, x: np.ndarray) -> np.ndarray:
        """Control applied on step i; shape (k,) or (M, k) for feedback."""
        if self.kind == "constant":
            return self.values
        if self.kind == "piecewise":
            idx = min(i, self.values.shape[0] - 1)
            return self.values[idx]
        v = np.asarray(self.feedback(t, x), dtype=np.float64)
        v = np.broadcast_to(v, (x.shape[0], self.U.k))
        if not self.U.contains(v).all():
            raise LabError(f"feedback control left U at t={t}")
        return v


class SmoothTestFunction:
    """C^{1,2} test function phi(t, x) with time/space derivatives.

    Analytic derivatives are used when supplied; otherwise central finite
    differences with step ``h_fd`` (default 1e-5).  The FD Hessian is built
    entry-wise from the symmetric four-point formula, so it is symmetric by
    construction.
    """

    def __init__(self, phi, grad_t=None, grad_x=None, hess_x=None, h_fd: float = 1e-5,
                 name: str = "phi"):
        supplied = [grad_t is not None, grad_x is not None, hess_x is not None]
        if any(supplied) and not all(supplied):
            raise LabError("supply all three analytic derivatives, or none")
        self.phi = phi
        self._grad_t = grad_t
        self._grad_x = grad_x
        self._hess_x = hess_x
        self.h_fd = float(h_fd)
        self.name = name
        self.derivative_mode = "analytic" if all(supplied) else "finite-difference"

    def __call__(self, t: float, x: np.ndarray) -> float:
        return float(self.phi(t, np.asarray(x, dtype=np.float64)))

    def grad_t(self, t: float, x: np.ndarray) -> float:
        if self._grad_t is not None:
            return float(self._grad_t(t, x))
        h = self.h_fd
        return (self(t + h, x) - self(t - h, x)) / (2 * h)

    def grad_x(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self._grad_x is not None:
            return np.atleast_1d(np.asarray(self._grad_x(t, x), dtype=np.float64))
        h = self.h_fd
        g = np.empty(x.size)
        for i in range(x.size):
            e = np.zeros(x.size)
            e[i] = h
            g[i] = (self(t, x + e) - self(t, x - e)) / (2 * h)
        return g

    def hess_x(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self._hess_x is not None:
            H = np.atleast_2d(np.asarray(self._hess_x(t, x), dtype=np.float64))
            return H
        h = self.h_fd
        nn = x.size
        H = np.empty((nn, nn))
        for i in range(nn):
            ei = np.zeros(nn)
            ei[i] = h
            H[i, i] = (self(t, x + ei) - 2 * self(t, x) + self(t, x - ei)) / h**2
            for j in range(i + 1, nn):
                ej = np.zeros(nn)
                ej[j] = h
                val = (self(t, x + ei + ej) - self(t, x + ei - ej)
                       - self(t, x - ei + ej) + self(t, x - ei - ej)) / (4 * h**2)
                H[i, j] = val
                H[j, i] = val
        return H

    def shifted(self, delta, name: str | None = None) -> "SmoothTestFunction":
        """New test function phi + delta where delta is another SmoothTestFunction."""
        return SmoothTestFunction(
            phi=lambda t, x: self(t, x) + delta(t, x),
            grad_t=lambda t, x: self.grad_t(t, x) + delta.grad_t(t, x),
            grad_x=lambda t, x: self.grad_x(t, x) + delta.grad_x(t, x),
            hess_x=lambda t, x: self.hess_x(t, x) + delta.hess_x(t, x),
            name=name or f"{self.name}+{delta.name}",
        )


@dataclass
class ValidationReport:
    """Outcome of sampling-based Lipschitz validation."""

    violations: list = field(default_factory=list)
    samples: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations


def _lip_violation(lhs: float, bound: float, rel_slack: float = 1e-9) -> bool:
    return lhs > bound * (1.0 + rel_slack) + 1e-15


def validate_problem(p: ControlProblem, samples: int, rng: RandomSource,
                     x_bound: float = 3.0) -> ValidationReport:
    """Spot-check the declared Lipschitz constants on random input pairs.

    States are sampled uniformly on the box |x_i| <= x_bound (so locally
    Lipschitz coefficients can declare an honest constant for the sampled
    region); (y, z) pairs are standard normal, controls uniform on U.  A
    record is appended whenever a measured increment exceeds the declared
    bound by more than 1e-9 relative slack.  Passing with constant K implies
    passing with any K' >= K.
    """
    if samples < 1:
        raise LabError("samples must be >= 1")
    gen = rng.generator()
    report = ValidationReport(samples=samples)
    lo, hi = p.U.lower, p.U.upper
    for s in range(samples):
        t = float(gen.uniform(0.0, p.T))
        x1 = gen.uniform(-x_bound, x_bound, size=(1, p.n))
        x2 = gen.uniform(-x_bound, x_bound, size=(1, p.n))
        v1 = gen.uniform(lo, hi)[None, :]
        v2 = gen.uniform(lo, hi)[None, :]
        y1, y2 = gen.normal(size=2)
        z1 = gen.normal(size=(1, p.d))
        z2 = gen.normal(size=(1, p.d))

        try:
            b1, b2 = p.drift(t, x1, v1[0]), p.drift(t, x2, v2[0])
            s1, s2 = p.diffusion(t, x1, v1[0]), p.diffusion(t, x2, v2[0])
            g1 = p.generator(t, x1, np.array([y1]), z1, v1[0])
            g2 = p.generator(t, x1, np.array([y2]), z2, v1[0])
            f1, f2 = p.terminal(x1), p.terminal(x2)
        except FloatingPointError as exc:  # pragma: no cover - defensive
            raise NonFiniteError(f"coefficient evaluation failed at sample {s}: {exc}")
        values = np.concatenate([b1.ravel(), b2.ravel(), s1.ravel(), s2.ravel(),
                                 g1.ravel(), g2.ravel(), f1.ravel(), f2.ravel()])
        if not np.all(np.isfinite(values)):
            raise NonFiniteError(
                f"non-finite coefficient value at sample {s}: t={t}, x={x1.ravel()}")

        dxv = float(np.linalg.norm(x1 - x2) + np.linalg.norm(v1 - v2))
        lhs_state = float(np.linalg.norm(b1 - b2) + np.linalg.norm(s1 - s2))
        if _lip_violation(lhs_state, p.K_state * dxv):
            report.violations.append({
                "kind": "state", "sample": s, "lhs": lhs_state,
                "bound": p.K_state * dxv, "t": t,
            })

        dyz = abs(y1 - y2) + float(np.linalg.norm(z1 - z2))
        lhs_gen = float(abs(g1[0] - g2[0]))
        if _lip_violation(lhs_gen, p.generator.K * dyz):
            report.violations.append({
                "kind": "generator", "sample": s, "lhs": lhs_gen,
                "bound": p.generator.K * dyz, "t": t,
            })

        dx = float(np.linalg.norm(x1 - x2))
        lhs_phi = float(abs(f1[0] - f2[0]))
        if _lip_violation(lhs_phi, p.K_phi * dx):
            report.violations.append({
                "kind": "terminal", "sample": s, "lhs": lhs_phi,
                "bound": p.K_phi * dx,
            })
    return report
