"""Euler-Maruyama simulation of the controlled forward SDE.

The scheme is the explicit update

    X[m, i+1] = X[m, i] + b(s_i, X[m, i], v_i) dt_i + sigma(s_i, X[m, i], v_i) dB[m, i]

with increments dB[m, i] ~ N(0, dt_i I_d).  All increments for an ensemble
are drawn in a single vectorized call from the ensemble's own substream
(path-major layout), so equal (seed, grid, M) reproduce bit-identical
ensembles regardless of how downstream work is chunked or threaded.
Increments are stored with the ensemble: backward solvers and
common-random-number comparisons need the exact same noise.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import LabError, NonFiniteError
from .problems import ControlProblem, ControlProcess, RandomSource, TimeGrid

__all__ = ["PathEnsemble", "simulate", "resimulate_with_offset", "save_ensemble", "load_ensemble"]

_MAGIC = b"BSEN"
_VERSION = 1


@dataclass(frozen=True)
class PathEnsemble:
    """Simulated forward paths with their Brownian increments.

    X has shape (M, N+1, n), dB shape (M, N, d).  ``control_trace`` holds the
    control actually applied on each step: shape (N, k) for deterministic
    controls, (M, N, k) when a feedback map was used.
    """

    grid: TimeGrid
    X: np.ndarray
    dB: np.ndarray
    control_trace: np.ndarray

    def __post_init__(self):
        for name in ("X", "dB", "control_trace"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            a.flags.writeable = False
            object.__setattr__(self, name, a)
        if self.X.shape[1] != self.grid.N + 1:
            raise LabError("X second axis must match grid nodes")
        if self.dB.shape[:2] != (self.X.shape[0], self.grid.N):
            raise LabError("dB shape inconsistent with X and grid")

    @property
    def M(self) -> int:
        return self.X.shape[0]

    @property
    def n(self) -> int:
        return self.X.shape[2]

    @property
    def d(self) -> int:
        return self.dB.shape[2]

    def control_at(self, i: int) -> np.ndarray:
        """Control applied on step i: (k,) or (M, k)."""
        if self.control_trace.ndim == 2:
            return self.control_trace[i]
        return self.control_trace[:, i]

    def restrict(self, last_index: int) -> "PathEnsemble":
        """Sub-ensemble over the first ``last_index`` steps (shared noise)."""
        trace = (self.control_trace[:last_index] if self.control_trace.ndim == 2
                 else self.control_trace[:, :last_index])
        return PathEnsemble(
            grid=self.grid.restrict(last_index),
            X=self.X[:, : last_index + 1].copy(),
            dB=self.dB[:, :last_index].copy(),
            control_trace=trace.copy(),
        )


def _advance(p: ControlProblem, ctrl: ControlProcess, grid: TimeGrid, x0: np.ndarray,
             dB: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Run the Euler loop for given increments; returns (X, control_trace)."""
    M = dB.shape[0]
    N = grid.N
    nodes = grid.nodes
    dt = grid.dt
    X = np.empty((M, N + 1, p.n))
    X[:, 0, :] = x0
    per_path_ctrl = ctrl.kind == "feedback"
    trace = np.empty((M, N, p.k)) if per_path_ctrl else np.empty((N, p.k))
    for i in range(N):
        t = float(nodes[i])
        xi = X[:, i, :]
        v = ctrl.at_step(i, t, xi)
        if per_path_ctrl:
            trace[:, i, :] = v
        else:
            trace[i, :] = v
        drift = p.drift(t, xi, v)
        diff = p.diffusion(t, xi, v)
        X[:, i + 1, :] = xi + drift * dt[i] + np.einsum("mnd,md->mn", diff, dB[:, i, :])
        bad = ~np.isfinite(X[:, i + 1, :]).all(axis=1)
        if bad.any():
            m = int(np.argmax(bad))
            raise NonFiniteError(f"state blew up at path {m}, step {i + 1} (t={nodes[i + 1]})")
    return X, trace


def simulate(p: ControlProblem, t0: float, x0, ctrl: ControlProcess, grid: TimeGrid,
             M: int, rng: RandomSource) -> PathEnsemble:
    """Simulate M controlled paths on ``grid`` starting from x0 at t0."""
    if M < 1:
        raise LabError("need M >= 1 paths")
    if abs(grid.t0 - t0) > 1e-12:
        raise LabError(f"grid starts at {grid.t0}, not t0={t0}")
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 1:
        x0 = np.broadcast_to(x0, (M, p.n))
    elif x0.shape != (M, p.n):
        raise LabError(f"x0 must have shape ({p.n},) or ({M}, {p.n})")
    dB = rng.normals((M, grid.N, p.d)) * np.sqrt(grid.dt)[None, :, None]
    X, trace = _advance(p, ctrl, grid, x0, dB)
    return PathEnsemble(grid=grid, X=X, dB=dB, control_trace=trace)


def resimulate_with_offset(base: PathEnsemble, p: ControlProblem, x0_new) -> PathEnsemble:
    """Re-run the Euler loop from a different initial state, reusing base.dB exactly."""
    if base.dB.size == 0 and base.grid.N > 0:
        raise LabError("base ensemble has no stored increments")
    x0 = np.broadcast_to(np.asarray(x0_new, dtype=np.float64), (base.M, p.n))
    if base.control_trace.ndim == 2:
        ctrl = ControlProcess(kind="piecewise", U=p.U, values=base.control_trace)
    else:
        raise LabError("cannot replay a feedback control trace; re-simulate instead")
    X, trace = _advance(p, ctrl, base.grid, x0, base.dB)
    return PathEnsemble(grid=base.grid, X=X, dB=base.dB, control_trace=trace)


def save_ensemble(path: str, ens: PathEnsemble) -> None:
    """Binary dump, little-endian.

    Layout: magic "BSEN", u32 version, u64 M, N, n, d, k, u8 per-path-trace
    flag, then row-major f64 arrays: grid nodes (N+1), X (M x (N+1) x n),
    dB (M x N x d), control trace ((N x k) or (M x N x k) per the flag).
    """
    k = ens.control_trace.shape[-1]
    per_path = 1 if ens.control_trace.ndim == 3 else 0
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<QQQQQB", ens.M, ens.grid.N, ens.n, ens.d, k, per_path))
        f.write(ens.grid.nodes.astype("<f8").tobytes())
        f.write(ens.X.astype("<f8").tobytes())
        f.write(ens.dB.astype("<f8").tobytes())
        f.write(ens.control_trace.astype("<f8").tobytes())


def load_ensemble(path: str) -> PathEnsemble:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise LabError(f"{path}: not an ensemble dump")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _VERSION:
            raise LabError(f"{path}: unsupported dump version {version}")
        M, N, n, d, k, per_path = struct.unpack("<QQQQQB", f.read(41))
        nodes = np.frombuffer(f.read(8 * (N + 1)), dtype="<f8")
        X = np.frombuffer(f.read(8 * M * (N + 1) * n), dtype="<f8").reshape(M, N + 1, n)
        dB = np.frombuffer(f.read(8 * M * N * d), dtype="<f8").reshape(M, N, d)
        shape = (M, N, k) if per_path else (N, k)
        trace = np.frombuffer(f.read(8 * int(np.prod(shape))), dtype="<f8").reshape(shape)
    uniform = bool(np.allclose(np.diff(nodes), nodes[1] - nodes[0]))
    grid = TimeGrid(nodes.copy(), uniform=uniform)
    return PathEnsemble(grid=grid, X=X.copy(), dB=dB.copy(), control_trace=trace.copy())
