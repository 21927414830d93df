"""Empirical recovery of a BSDE driver from short-horizon solutions.

The probe solves, for a fixed triplet (t, y, z) and small eps > 0, the BSDE
on [t, t+eps] whose terminal value is y + <z, B_{t+eps} - B_t>, and returns
(Y_t - y) / eps.  For Lipschitz drivers this converges to g(t, y, z) as
eps -> 0 (in L^p, 1 <= p < 2, at continuity points of t -> g(t, y, z)).

Internally the solve runs in shifted variables: with W_s = B_s - B_t the
unknowns Ytil = Y - <z, W> and Ztil = Z - z satisfy the same equation with
the constant terminal y and driver g(r, ytil + <z, W_r>, ztil + z).  The
shift removes the known martingale part exactly, so driver values that do
not depend on (y, z) are recovered to round-off instead of carrying
O(1/sqrt(M)) noise divided by eps.  The simulated state handed to the
driver's x-slot is W_r itself, which is the observable part of omega for
path-dependent drivers.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import LabError, StabilityError
from .problems import ControlProblem, ControlProcess, ControlSet, GeneratorSpec, RandomSource, make_grid
from .regression import RegressionBasis
from .bsde import solve_bsde
from .simulate import simulate
from .utils import parallel_map

__all__ = [
    "RepresentationProbe",
    "RateFit",
    "default_grid_steps",
    "probe_generator",
    "conditional_expectation_residual",
    "verify_limit",
    "rate_fit_rows",
    "write_rate_fit_csv",
]

GRID_STEPS_CAP = 10_000
EXACT_FLOOR = 1e-12


@dataclass(frozen=True)
class RepresentationProbe:
    """Probe point (t, y, z), window eps, and sampling parameters."""

    t: float
    y: float
    z: np.ndarray
    epsilon: float
    M: int
    p_norm: float = 1.0
    horizon: float = math.inf

    def __post_init__(self):
        z = np.atleast_1d(np.asarray(self.z, dtype=np.float64))
        z.flags.writeable = False
        object.__setattr__(self, "z", z)
        if not 0 <= self.t < self.horizon:
            raise LabError("probe time must lie in [0, horizon)")
        if not 0 < self.epsilon <= self.horizon - self.t:
            raise LabError("need 0 < epsilon <= horizon - t")
        if not 1 <= self.p_norm < 2:
            raise LabError("p_norm must lie in [1, 2)")
        if self.M < 1:
            raise LabError("need at least one path")


def default_grid_steps(epsilon: float, K: float, floor: int = 16) -> int:
    """Backward steps keeping dt <= 0.5/K uniformly across a ladder."""
    if K <= 0:
        return floor
    return max(floor, math.ceil(epsilon * 2.0 * K))


def _refined_steps(epsilon: float, K: float, grid_steps: int) -> int:
    steps = max(int(grid_steps), 1)
    if K > 0:
        needed = math.ceil(epsilon * 2.0 * K)  # dt <= 0.5/K
        steps = max(steps, needed)
        if steps > GRID_STEPS_CAP:
            raise StabilityError(
                f"probe needs {steps} steps (> cap {GRID_STEPS_CAP}) for dt*K < 1")
    return steps


def _probe_problem(gen: GeneratorSpec, probe: RepresentationProbe) -> ControlProblem:
    d = probe.z.size
    z = probe.z

    def shifted(t, x, ytil, ztil, v):
        return gen.g(t, x, ytil + x @ z, ztil + z, v)

    eye = np.eye(d)
    return ControlProblem(
        n=d, d=d, k=1,
        b=lambda t, x, v: np.zeros((x.shape[0], d)),
        sigma=lambda t, x, v: eye,
        generator=GeneratorSpec(shifted, K=gen.K, continuous_in_t=gen.continuous_in_t,
                                name=f"shifted({gen.name})"),
        phi=lambda x: np.zeros(x.shape[0]),
        U=ControlSet.singleton([0.0]),
        T=probe.t + probe.epsilon,
        name="representation-probe",
    )


def _solve_probe(gen: GeneratorSpec, probe: RepresentationProbe, grid_steps: int,
                 basis: RegressionBasis, rng: RandomSource) -> float:
    steps = _refined_steps(probe.epsilon, gen.K, grid_steps)
    prob = _probe_problem(gen, probe)
    grid = make_grid(probe.t, probe.t + probe.epsilon, steps)
    ctrl = ControlProcess.constant(prob.U, [0.0])
    ens = simulate(prob, probe.t, np.zeros(prob.n), ctrl, grid, probe.M, rng)
    terminal = np.full(probe.M, probe.y)  # y + <z, W> minus the removed martingale part
    sol = solve_bsde(terminal, prob.generator, ens, basis, ctrl)
    return sol.Y0


def probe_generator(gen: GeneratorSpec, probe: RepresentationProbe, grid_steps: int,
                    basis: RegressionBasis, rng: RandomSource) -> float:
    """Estimate of (Y^eps_t - y) / eps for the probe BSDE."""
    y0 = _solve_probe(gen, probe, grid_steps, basis, rng)
    return (y0 - probe.y) / probe.epsilon


def _frozen_driver_value(gen: GeneratorSpec, probe: RepresentationProbe) -> float:
    x0 = np.zeros((1, probe.z.size))
    val = gen(probe.t, x0, np.array([probe.y]), probe.z[None, :], np.zeros(1))
    return float(val[0])


def conditional_expectation_residual(gen: GeneratorSpec, probe: RepresentationProbe,
                                     grid_steps: int, M: int, rng: RandomSource,
                                     basis: RegressionBasis | None = None) -> float:
    """(1/eps) |E[(Y^eps_t - y)] - eps g(t, y, z)| with (y, z) frozen in the driver."""
    basis = basis or RegressionBasis()
    probe = RepresentationProbe(t=probe.t, y=probe.y, z=probe.z, epsilon=probe.epsilon,
                                M=M, p_norm=probe.p_norm, horizon=probe.horizon)
    y0 = _solve_probe(gen, probe, grid_steps, basis, rng)
    eps = probe.epsilon
    return abs((y0 - probe.y) - eps * _frozen_driver_value(gen, probe)) / eps


@dataclass(frozen=True)
class RateFit:
    """Per-rung empirical errors of the probe and a fitted log-log slope."""

    epsilons: np.ndarray
    errors: np.ndarray
    stderrs: np.ndarray
    slope: float | None
    slope_band: tuple[float, float] | None
    exact: bool

    def __post_init__(self):
        for name in ("epsilons", "errors", "stderrs"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            a.flags.writeable = False
            object.__setattr__(self, name, a)


def verify_limit(gen: GeneratorSpec, t: float, y: float, z, ladder, M: int,
                 basis: RegressionBasis, rng: RandomSource, replications: int = 32,
                 p_norm: float = 1.0, grid_steps: int | None = None,
                 threads: int = 1) -> RateFit:
    """Measure the probe's L^p error against g(t, y, z) down a geometric eps ladder.

    errors[j] is the empirical L^p deviation over independent replications at
    ladder[j]; the slope comes from least squares on (log eps, log error) with
    a 95% band.  When every rung sits below the 1e-12 noise floor the fit is
    flagged exact and no slope is reported.
    """
    ladder = np.asarray(ladder, dtype=np.float64)
    if ladder.ndim != 1 or ladder.size < 2:
        raise LabError("ladder needs at least two rungs")
    if not np.all(np.diff(ladder) < 0):
        raise LabError("ladder must be strictly decreasing")
    if replications < 2:
        raise LabError("need at least two replications per rung")
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    target = _frozen_driver_value(
        gen, RepresentationProbe(t=t, y=y, z=z, epsilon=float(ladder[0]), M=1, p_norm=p_norm))

    def run_one(job: tuple[int, int]) -> float:
        j, r = job
        eps = float(ladder[j])
        steps = grid_steps if grid_steps is not None else default_grid_steps(eps, gen.K)
        probe = RepresentationProbe(t=t, y=y, z=z, epsilon=eps, M=M, p_norm=p_norm)
        return probe_generator(gen, probe, steps, basis, rng.child(j, r))

    jobs = [(j, r) for j in range(ladder.size) for r in range(replications)]
    estimates = np.array(parallel_map(run_one, jobs, threads)).reshape(ladder.size, replications)

    devs = np.abs(estimates - target) ** p_norm
    mean_p = devs.mean(axis=1)
    errors = mean_p ** (1.0 / p_norm)
    se_mean = devs.std(axis=1, ddof=1) / math.sqrt(replications)
    # delta method through the 1/p power; exact for p = 1
    with np.errstate(divide="ignore", invalid="ignore"):
        stderrs = np.where(mean_p > 0, se_mean / (p_norm * mean_p ** (1.0 - 1.0 / p_norm)), 0.0)

    if np.all(errors < EXACT_FLOOR):
        return RateFit(ladder, errors, stderrs, slope=None, slope_band=None, exact=True)

    safe = np.maximum(errors, 1e-300)
    reg = stats.linregress(np.log(ladder), np.log(safe))
    tq = stats.t.ppf(0.975, ladder.size - 2)
    band = (reg.slope - tq * reg.stderr, reg.slope + tq * reg.stderr)
    return RateFit(ladder, errors, stderrs, slope=float(reg.slope),
                   slope_band=(float(band[0]), float(band[1])), exact=False)


def rate_fit_rows(fit: RateFit) -> list[dict]:
    return [
        {"epsilon": float(e), "error": float(err), "stderr": float(se)}
        for e, err, se in zip(fit.epsilons, fit.errors, fit.stderrs)
    ]


def write_rate_fit_csv(fit: RateFit, path: str) -> None:
    rows = rate_fit_rows(fit)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["epsilon", "error", "stderr"])
        w.writeheader()
        w.writerows(rows)
