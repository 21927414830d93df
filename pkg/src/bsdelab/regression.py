"""Least-squares conditional expectations on path ensembles.

Two basis families:

* ``poly``      global polynomials of total degree <= degree (default 2),
                fitted on standardized coordinates for conditioning;
* ``indicator`` hypercube partition (local constant) with cell width
                ``cell_width``; the fit is the per-cell sample mean, which
                is a monotone smoother.

A rank-deficient least-squares system (degenerate ensembles, e.g. sigma = 0
collapsing all paths to one point) falls back to a ridge-regularized normal
equation solve with lambda = 1e-8 and the step is flagged; for constant
designs that reduces to a plain sample average.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import LabError

__all__ = ["RegressionBasis", "RegressionFit"]

_RIDGE_LAMBDA = 1e-8


@dataclass(frozen=True)
class RegressionBasis:
    kind: str = "poly"
    degree: int = 2
    cell_width: float = 0.5

    def __post_init__(self):
        if self.kind not in ("poly", "indicator"):
            raise LabError(f"unknown basis kind {self.kind!r}")
        if self.kind == "poly" and self.degree < 0:
            raise LabError("polynomial degree must be >= 0")
        if self.kind == "indicator" and self.cell_width <= 0:
            raise LabError("cell width must be positive")

    def fit(self, X: np.ndarray, targets: np.ndarray) -> "RegressionFit":
        """Fit all target columns on state X (shape (M, n)); targets (M,) or (M, T)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        squeeze = targets.ndim == 1
        Y = targets[:, None] if squeeze else targets
        if X.shape[0] != Y.shape[0]:
            raise LabError("state and target sample sizes differ")
        if not np.all(np.isfinite(X)):
            raise LabError("non-finite state in regression design")
        if self.kind == "poly":
            fit = _PolyFit(self, X, Y)
        else:
            fit = _IndicatorFit(self, X, Y)
        if not np.all(np.isfinite(fit.fitted)):
            raise LabError("regression produced non-finite fitted values")
        if squeeze:
            fit.fitted = fit.fitted[:, 0]
        return fit


class RegressionFit:
    """Fitted conditional-expectation surfaces for one time step."""

    fitted: np.ndarray
    ridge_flagged: bool

    def predict(self, Xnew: np.ndarray) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError


def _poly_exponents(n: int, degree: int) -> list[tuple[int, ...]]:
    exps = []
    for total in range(degree + 1):
        for comb in itertools.combinations_with_replacement(range(n), total):
            e = [0] * n
            for i in comb:
                e[i] += 1
            exps.append(tuple(e))
    return exps


class _PolyFit(RegressionFit):
    def __init__(self, basis: RegressionBasis, X: np.ndarray, Y: np.ndarray):
        self.center = X.mean(axis=0)
        scale = X.std(axis=0)
        # constant coordinates carry no information beyond the intercept;
        # dropping them keeps fully degenerate designs an exact plain average
        # (the mean of identical values can round in the last ulp, hence the
        # relative threshold)
        live = scale > 1e-13 * np.maximum(1.0, np.abs(self.center))
        self.scale = np.where(live, scale, 1.0)
        self.exponents = [e for e in _poly_exponents(X.shape[1], basis.degree)
                          if all(live[i] or e[i] == 0 for i in range(X.shape[1]))]
        design = self._design(X)
        coeffs, _, rank, _ = np.linalg.lstsq(design, Y, rcond=None)
        self.ridge_flagged = rank < design.shape[1]
        if self.ridge_flagged:
            G = design.T @ design + _RIDGE_LAMBDA * np.eye(design.shape[1])
            coeffs = np.linalg.solve(G, design.T @ Y)
        self.coeffs = coeffs
        self.fitted = design @ coeffs

    def _design(self, X: np.ndarray) -> np.ndarray:
        Xs = (X - self.center) / self.scale
        cols = [np.prod([Xs[:, i] ** e[i] for i in range(Xs.shape[1])], axis=0)
                for e in self.exponents]
        return np.stack(cols, axis=1)

    def predict(self, Xnew: np.ndarray) -> np.ndarray:
        Xnew = np.atleast_2d(np.asarray(Xnew, dtype=np.float64))
        out = self._design(Xnew) @ self.coeffs
        return out[:, 0] if out.shape[1] == 1 else out


class _IndicatorFit(RegressionFit):
    def __init__(self, basis: RegressionBasis, X: np.ndarray, Y: np.ndarray):
        self.h = basis.cell_width
        self.origin = X.min(axis=0)
        idx, self.shape = self._cells(X)
        ncells = int(np.prod(self.shape))
        counts = np.bincount(idx, minlength=ncells)
        self.means = np.empty((ncells, Y.shape[1]))
        for j in range(Y.shape[1]):
            sums = np.bincount(idx, weights=Y[:, j], minlength=ncells)
            with np.errstate(invalid="ignore"):
                self.means[:, j] = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
        self.global_mean = Y.mean(axis=0)
        self.ridge_flagged = False
        self.fitted = self.means[idx]

    def _cells(self, X: np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
        rel = np.floor((X - self.origin) / self.h).astype(np.int64)
        if not hasattr(self, "shape"):
            shape = tuple(int(m) + 1 for m in rel.max(axis=0))
        else:
            shape = self.shape
        rel = np.clip(rel, 0, np.asarray(shape) - 1)
        return np.ravel_multi_index(tuple(rel.T), shape), shape

    def predict(self, Xnew: np.ndarray) -> np.ndarray:
        Xnew = np.atleast_2d(np.asarray(Xnew, dtype=np.float64))
        idx, _ = self._cells(Xnew)
        out = self.means[idx]
        empty = ~np.isfinite(out).all(axis=1)
        if empty.any():
            out = out.copy()
            out[empty] = self.global_mean  # unpopulated cell: fall back to the global mean
        return out[:, 0] if out.shape[1] == 1 else out
