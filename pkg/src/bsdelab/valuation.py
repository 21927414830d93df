"""Value-function estimation by backward dynamic programming over epochs.

The recursion mirrors the dynamic programming principle: starting from
u(T, .) = Phi, each decision epoch [t_i, t_{i+1}] updates

    u(t_i, .) = max over mesh controls v of  G^{t_i, .; v}_{t_i, t_{i+1}}[ u(t_{i+1}, X_{t_{i+1}}) ]

where G is the backward semigroup (a BSDE solve along simulated paths) and
u(t_{i+1}, .) is read off the space grid by multilinear interpolation.  The
per-control conditional values are represented on the grid by regressing the
solver's initial-node values on the epoch's starting states; all controls in
an epoch share one noise substream (common random numbers), which keeps the
max over controls from accumulating selection bias.

Controls are epoch-constant and mesh-valued; that is a strict subset of the
admissible adapted controls, so the estimate is a lower bound up to Monte
Carlo and regression error.  Refining the mesh and the epoch grid tightens
it; the gap is reported, not bounded.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .bsde import backward_semigroup, solve_bsde
from .errors import LabError
from .hjb import SpaceGrid, ValueGrid, interpolate_space
from .problems import ControlProblem, ControlProcess, RandomSource, make_grid
from .regression import RegressionBasis
from .simulate import simulate

__all__ = ["DppConfig", "estimate_value", "check_dpp", "deterministic_check"]


@dataclass(frozen=True)
class DppConfig:
    """Epoch/mesh/path budget for the dynamic-programming estimator."""

    control_mesh: np.ndarray
    epochs: int = 10
    inner_steps: int = 10
    M: int = 4000
    basis: RegressionBasis = field(default_factory=RegressionBasis)

    def __post_init__(self):
        mesh = np.atleast_2d(np.asarray(self.control_mesh, dtype=np.float64))
        if mesh.size == 0:
            raise LabError("control mesh must be nonempty")
        mesh.flags.writeable = False
        object.__setattr__(self, "control_mesh", mesh)
        if self.epochs < 1 or self.inner_steps < 1 or self.M < 1:
            raise LabError("epochs, inner_steps and M must be positive")


def _excursion_pad(p: ControlProblem, coords: np.ndarray, mesh: np.ndarray,
                   t: float, dt: float) -> float:
    """Typical per-epoch path excursion: max|b| dt + 3 max|sigma| sqrt(dt)."""
    max_b = 0.0
    max_s = 0.0
    for v in mesh:
        max_b = max(max_b, float(np.max(np.abs(p.drift(t, coords, v)))))
        max_s = max(max_s, float(np.max(np.abs(p.diffusion(t, coords, v)))))
    return max_b * dt + 3.0 * max_s * math.sqrt(dt)


def estimate_value(p: ControlProblem, t: float, x, cfg: DppConfig, space: SpaceGrid,
                   rng: RandomSource) -> ValueGrid:
    """Estimate u on the space grid for all epoch nodes of [t, T]; provenance 'mc'.

    The value at (t, x) is read off the returned grid by interpolation.
    Endpoint states leaving the space grid are clamped (a warning reports how
    many).  Because clamping biases targets near the boundary, the per-epoch
    surface fit uses only starts whose typical excursion stays inside the
    grid; boundary-node values come from the fitted surface's own extension.
    """
    if not p.U.contains(cfg.control_mesh).all():
        raise LabError("control mesh must be a subset of U")
    if not 0 <= t < p.T:
        raise LabError("need 0 <= t < T")
    outer = make_grid(t, p.T, cfg.epochs)
    coords = space.nodes_matrix()
    n_nodes = coords.shape[0]
    reps = max(1, math.ceil(cfg.M / n_nodes))
    X0 = np.repeat(coords, reps, axis=0)
    M = X0.shape[0]

    u = np.empty((cfg.epochs + 1,) + space.shape)
    u[cfg.epochs] = p.terminal(coords).reshape(space.shape)
    clamped = 0
    for i in range(cfg.epochs - 1, -1, -1):
        t_i = float(outer.nodes[i])
        dt_epoch = float(outer.nodes[i + 1]) - t_i
        inner = make_grid(t_i, float(outer.nodes[i + 1]), cfg.inner_steps)
        stream = rng.child(i)  # shared across the mesh: common random numbers
        pad = _excursion_pad(p, coords, cfg.control_mesh, t_i, dt_epoch)
        core = np.all((X0 >= space.lower + pad) & (X0 <= space.upper - pad), axis=1)
        if not core.any():
            core = np.ones(M, dtype=bool)
        X0c = X0[core]
        best = None
        for v in cfg.control_mesh:
            ctrl = ControlProcess.constant(p.U, v)
            ens = simulate(p, t_i, X0c, ctrl, inner, X0c.shape[0], stream)
            endpoint = ens.X[:, -1, :]
            clamped += int(np.sum(~np.all((endpoint >= space.lower)
                                          & (endpoint <= space.upper), axis=1)))
            terminal = interpolate_space(space, u[i + 1], endpoint)
            sol = solve_bsde(terminal, p.generator, ens, cfg.basis, ctrl)
            surface = cfg.basis.fit(X0c, np.array(sol.Y[:, 0]))
            u_v = surface.predict(coords).reshape(space.shape)
            best = u_v if best is None else np.where(u_v > best, u_v, best)
        u[i] = best
    if clamped:
        warnings.warn(f"{clamped} endpoint evaluations clamped to the space grid",
                      stacklevel=2)
    return ValueGrid(u=u, grid=outer, space=space, provenance="mc")


def check_dpp(p: ControlProblem, t: float, x, delta: float, cfg: DppConfig,
              space: SpaceGrid, rng: RandomSource, replications: int = 4) -> dict:
    """Residual of the one-step dynamic-programming identity at (t, x).

    Compares the grid estimate of u(t, x) with the best mesh control's
    backward-semigroup value of the same grid's u(t + delta, .).  The
    combined standard error comes from independent replications of both
    sides (sample standard deviations added in quadrature).
    """
    if not 0 <= delta <= p.T - t + 1e-12:
        raise LabError("need 0 <= delta <= T - t")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if delta == 0.0:
        return {"residual": 0.0, "stderr": 0.0, "lhs": None, "rhs": None,
                "delta": 0.0, "note": "empty interval: semigroup is the identity"}
    if replications < 2:
        raise LabError("need at least two replications for a standard error")

    epoch_dt = (p.T - t) / cfg.epochs
    steps = max(cfg.inner_steps, int(math.ceil(delta / epoch_dt)) * cfg.inner_steps)
    lhs_vals, rhs_vals = [], []
    for r in range(replications):
        vg = estimate_value(p, t, x, cfg, space, rng.child(0, r))
        lhs_vals.append(vg.value_at(t, x))

        def xi(endpoint, _vg=vg):
            return _vg.values_at(t + delta, endpoint)

        best = -np.inf
        for j, v in enumerate(cfg.control_mesh):
            ctrl = ControlProcess.constant(p.U, v)
            val = backward_semigroup(p, t, x, ctrl, delta, xi, steps, cfg.M,
                                     cfg.basis, rng.child(1, r))
            if val > best:
                best = val
        rhs_vals.append(best)
    lhs = np.array(lhs_vals)
    rhs = np.array(rhs_vals)
    se = float(np.sqrt(lhs.std(ddof=1) ** 2 + rhs.std(ddof=1) ** 2))
    return {"residual": abs(float(lhs[0] - rhs[0])), "stderr": se,
            "lhs": float(lhs[0]), "rhs": float(rhs[0]), "delta": delta,
            "lhs_values": lhs.tolist(), "rhs_values": rhs.tolist()}


def deterministic_check(p: ControlProblem, t: float, x, replications: int,
                        rng: RandomSource, cfg: DppConfig, space: SpaceGrid) -> dict:
    """Max-min spread of u(t, x) across independent seeds, with its standard error."""
    if replications < 2:
        raise LabError("need at least two replications")
    values = []
    for r in range(replications):
        vg = estimate_value(p, t, x, cfg, space, rng.child(r))
        values.append(vg.value_at(t, x))
    values = np.array(values)
    return {
        "spread": float(values.max() - values.min()),
        "stderr": float(values.std(ddof=1)),
        "values": values.tolist(),
    }
