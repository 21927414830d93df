"""Benchmark registry and named coefficient families.

Benchmarks are code, not data files: each case carries its control problem,
an optional closed-form value function with analytic derivatives (used as
the oracle for cross-validation and the viscosity checks), and default grid
settings.  The coefficient families double as the vocabulary of the text
configuration: a problem is assembled from named families with parameters,
so configs stay declarative while the oracles stay executable.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, LabError
from .hjb import HjbOperator, SpaceGrid, hjb_residual
from .problems import ControlProblem, ControlSet, GeneratorSpec, RandomSource, SmoothTestFunction

__all__ = [
    "BenchmarkCase",
    "REGISTRY",
    "get_benchmark",
    "list_benchmarks",
    "registry_self_test",
    "build_problem_from_config",
]


@dataclass(frozen=True)
class BenchmarkCase:
    """A named control problem with (optionally) its closed-form value function."""

    name: str
    description: str
    problem: ControlProblem
    closed_form: SmoothTestFunction | None
    closed_form_note: str = ""
    window: tuple = ((-1.0, 1.0),)  # interior window for error reports
    space_h: float = 0.05
    mesh_points: int = 11
    defaults: dict = field(default_factory=dict)

    def margin(self) -> float:
        """Domain padding 3 (max|b| T + 3 max|sigma| sqrt(T)) around the window."""
        p = self.problem
        probe_x = np.zeros((1, p.n))
        vs = p.U.mesh(3)
        max_b = max(float(np.max(np.abs(p.drift(0.0, probe_x, v)))) for v in vs)
        max_s = max(float(np.max(np.abs(p.diffusion(0.0, probe_x, v)))) for v in vs)
        return 3.0 * (max_b * p.T + 3.0 * max_s * math.sqrt(p.T))

    def fd_space(self, h: float | None = None) -> SpaceGrid:
        h = h or self.space_h
        m = self.margin()
        bounds = [(lo - m, hi + m) for lo, hi in self.window]
        return SpaceGrid.regular(bounds, h=h)

    def mc_space(self, h: float = 0.1) -> SpaceGrid:
        """Grid for the Monte-Carlo valuation: window plus one path excursion."""
        m = max(self.margin() / 3.0, 2.0 * h)
        bounds = [(lo - m, hi + m) for lo, hi in self.window]
        return SpaceGrid.regular(bounds, h=h)

    def operator(self) -> HjbOperator:
        return HjbOperator(self.problem, self.problem.U.mesh(self.mesh_points))


# ---------------------------------------------------------------------------
# coefficient families (stable identifiers used by the configuration format)

def _drift_family(name: str, params: dict, n: int, k: int):
    if name == "zero":
        return (lambda t, x, v: np.zeros((x.shape[0], n))), 0.0
    if name == "constant":
        c = np.asarray(params.get("value", np.zeros(n)), dtype=np.float64).reshape(n)
        return (lambda t, x, v: np.broadcast_to(c, (x.shape[0], n))), 0.0
    if name == "linear":
        a = np.asarray(params.get("matrix", np.eye(n)), dtype=np.float64).reshape(n, n)
        K = float(np.linalg.norm(a, 2))
        return (lambda t, x, v: x @ a.T), K
    if name == "control":
        if n != k:
            raise ConfigError("b.family", "'control' drift needs n == k")
        return (lambda t, x, v: np.broadcast_to(np.atleast_2d(v), (x.shape[0], n))), 1.0
    raise ConfigError("b.family", f"unknown drift family {name!r}")


def _sigma_family(name: str, params: dict, n: int, d: int):
    if name == "zero":
        return (lambda t, x, v: np.zeros((x.shape[0], n, d))), 0.0
    if name == "constant":
        c = np.asarray(params.get("value", np.eye(n, d)), dtype=np.float64).reshape(n, d)
        return (lambda t, x, v: c), 0.0
    if name == "identity":
        scale = float(params.get("scale", 1.0))
        c = scale * np.eye(n, d)
        return (lambda t, x, v: c), 0.0
    raise ConfigError("sigma.family", f"unknown diffusion family {name!r}")


def _generator_family(name: str, params: dict) -> GeneratorSpec:
    if name == "zero":
        return GeneratorSpec(lambda t, x, y, z, v: np.zeros_like(y), K=0.0, name="zero")
    if name == "constant":
        c = float(params.get("value", 1.0))
        return GeneratorSpec(lambda t, x, y, z, v: np.full_like(y, c), K=0.0,
                             name=f"constant({c})")
    if name == "discount":
        r = float(params.get("rate", 0.1))
        return GeneratorSpec(lambda t, x, y, z, v: -r * y, K=abs(r), name=f"discount({r})")
    if name == "linear_y":
        a = float(params.get("coef", 1.0))
        return GeneratorSpec(lambda t, x, y, z, v: a * y, K=abs(a), name=f"linear_y({a})")
    if name == "abs_z":
        return GeneratorSpec(lambda t, x, y, z, v: np.linalg.norm(z, axis=-1), K=1.0,
                             name="abs_z")
    if name == "step_t":
        t_star = float(params.get("t_star", 0.5))
        height = float(params.get("height", 1.0))
        return GeneratorSpec(lambda t, x, y, z, v: np.full_like(y, height * (t > t_star)),
                             K=0.0, continuous_in_t=False, name=f"step_t({t_star})")
    raise ConfigError("generator.family", f"unknown generator family {name!r}")


def _phi_family(name: str, params: dict, n: int):
    if name == "zero":
        return (lambda x: np.zeros(x.shape[0])), 0.0
    if name == "constant":
        c = float(params.get("value", 1.0))
        return (lambda x: np.full(x.shape[0], c)), 0.0
    if name == "quadratic":
        # locally Lipschitz; the declared constant covers the validation box |x| <= 3
        return (lambda x: np.sum(x * x, axis=1)), 6.0 * math.sqrt(n)
    if name == "abs":
        return (lambda x: np.linalg.norm(x, axis=1)), 1.0
    if name == "affine":
        w = np.asarray(params.get("weights", np.ones(n)), dtype=np.float64).reshape(n)
        c = float(params.get("offset", 0.0))
        return (lambda x: x @ w + c), float(np.linalg.norm(w))
    raise ConfigError("phi.family", f"unknown terminal family {name!r}")


def build_problem_from_config(cfg: dict, key_path: str = "problem") -> ControlProblem:
    """Assemble a ControlProblem from the documented configuration key tree."""
    def need(key: str):
        if key not in cfg:
            raise ConfigError(f"{key_path}.{key}", "missing required key")
        return cfg[key]

    n, d, k = int(need("n")), int(need("d")), int(need("k"))
    T = float(need("T"))
    b_cfg = dict(need("b"))
    s_cfg = dict(need("sigma"))
    g_cfg = dict(need("generator"))
    p_cfg = dict(need("phi"))
    u_cfg = dict(need("U"))
    b, Kb = _drift_family(b_cfg.pop("family", "zero"), b_cfg, n, k)
    sigma, Ks = _sigma_family(s_cfg.pop("family", "constant"), s_cfg, n, d)
    gen = _generator_family(g_cfg.pop("family", "zero"), g_cfg)
    if "K" in g_cfg:
        gen = GeneratorSpec(gen.g, K=float(g_cfg["K"]), continuous_in_t=gen.continuous_in_t,
                            name=gen.name)
    phi, Kphi = _phi_family(p_cfg.pop("family", "zero"), p_cfg, n)
    if "points" in u_cfg:
        pts = np.asarray(u_cfg["points"], dtype=np.float64)
        U = ControlSet(lower=pts.min(axis=0), upper=pts.max(axis=0), points=pts)
    elif "box" in u_cfg:
        U = ControlSet.box(u_cfg["box"])
    else:
        raise ConfigError(f"{key_path}.U", "needs 'box' or 'points'")
    return ControlProblem(n=n, d=d, k=k, b=b, sigma=sigma, generator=gen, phi=phi,
                          U=U, T=T, K_state=Kb + Ks, K_phi=float(p_cfg.get("K", Kphi)),
                          name=str(cfg.get("name", "configured-problem")))


# ---------------------------------------------------------------------------
# the benchmark registry


def _case_zero_dynamics() -> BenchmarkCase:
    n = 1
    b, Kb = _drift_family("zero", {}, n, 1)
    sigma, _ = _sigma_family("zero", {}, n, 1)
    phi, Kphi = _phi_family("quadratic", {}, n)
    problem = ControlProblem(
        n=n, d=1, k=1, b=b, sigma=sigma,
        generator=_generator_family("zero", {}),
        phi=phi, U=ControlSet.singleton([0.0]), T=1.0,
        K_state=Kb, K_phi=Kphi, name="zero-dynamics")
    closed = SmoothTestFunction(
        phi=lambda t, x: float(np.sum(x * x)),
        grad_t=lambda t, x: 0.0,
        grad_x=lambda t, x: 2.0 * x,
        hess_x=lambda t, x: 2.0 * np.eye(x.size),
        name="zero-dynamics-exact")
    return BenchmarkCase(
        name="zero-dynamics",
        description="frozen state, zero driver: u(t,x) = Phi(x) = |x|^2 exactly",
        problem=problem, closed_form=closed,
        closed_form_note="no dynamics and no driver, so the value is the terminal payoff",
        window=((-1.0, 1.0),), space_h=0.1,
        defaults={"tol_fd": 1e-12, "tol_mc": 1e-12, "tol_pair": 1e-12})


def _case_heat() -> BenchmarkCase:
    n = 1
    b, Kb = _drift_family("zero", {}, n, 1)
    sigma, _ = _sigma_family("identity", {}, n, 1)
    phi, Kphi = _phi_family("quadratic", {}, n)
    problem = ControlProblem(
        n=n, d=1, k=1, b=b, sigma=sigma,
        generator=_generator_family("zero", {}),
        phi=phi, U=ControlSet.singleton([0.0]), T=1.0,
        K_state=Kb, K_phi=Kphi, name="heat-fk")
    closed = SmoothTestFunction(
        phi=lambda t, x: float(np.sum(x * x)) + (1.0 - t),
        grad_t=lambda t, x: -1.0,
        grad_x=lambda t, x: 2.0 * x,
        hess_x=lambda t, x: 2.0 * np.eye(x.size),
        name="heat-exact")
    return BenchmarkCase(
        name="heat-fk",
        description="unit Brownian state, quadratic payoff: u(t,x) = x^2 + (T - t)",
        problem=problem, closed_form=closed,
        closed_form_note="second moment of Brownian motion: E[(x + B_{T-t})^2] = x^2 + (T-t)",
        window=((-1.0, 1.0),), space_h=0.05,
        defaults={"tol_fd": 2e-2, "tol_mc": 5e-2, "tol_pair": 5e-2})


def _case_linear_drift() -> BenchmarkCase:
    n = 1
    b, Kb = _drift_family("control", {}, n, 1)
    sigma, _ = _sigma_family("identity", {}, n, 1)
    phi, Kphi = _phi_family("affine", {"weights": [1.0]}, n)
    problem = ControlProblem(
        n=n, d=1, k=1, b=b, sigma=sigma,
        generator=_generator_family("zero", {}),
        phi=phi, U=ControlSet.box([(-1.0, 1.0)]), T=1.0,
        K_state=Kb, K_phi=Kphi, name="linear-drift-control")
    closed = SmoothTestFunction(
        phi=lambda t, x: float(x[0]) + (1.0 - t),
        grad_t=lambda t, x: -1.0,
        grad_x=lambda t, x: np.ones(1),
        hess_x=lambda t, x: np.zeros((1, 1)),
        name="linear-drift-exact")
    return BenchmarkCase(
        name="linear-drift-control",
        description="drift equals the control on [-1,1], linear payoff: u = x + (T - t)",
        problem=problem, closed_form=closed,
        closed_form_note="maximal drift v* = 1 is optimal for a linear payoff; "
                         "the Brownian part integrates out",
        window=((-1.0, 1.0),), space_h=0.05,
        defaults={"tol_fd": 2e-2, "tol_mc": 5e-2, "tol_pair": 5e-2})


def _case_exp_discount() -> BenchmarkCase:
    n = 1
    r = 0.1
    b, Kb = _drift_family("zero", {}, n, 1)
    sigma, _ = _sigma_family("identity", {}, n, 1)
    phi, Kphi = _phi_family("constant", {"value": 1.0}, n)
    problem = ControlProblem(
        n=n, d=1, k=1, b=b, sigma=sigma,
        generator=_generator_family("discount", {"rate": r}),
        phi=phi, U=ControlSet.singleton([0.0]), T=1.0,
        K_state=Kb, K_phi=Kphi, name="exp-discount-bsde")
    closed = SmoothTestFunction(
        phi=lambda t, x: math.exp(-r * (1.0 - t)),
        grad_t=lambda t, x: r * math.exp(-r * (1.0 - t)),
        grad_x=lambda t, x: np.zeros(1),
        hess_x=lambda t, x: np.zeros((1, 1)),
        name="exp-discount-exact")
    return BenchmarkCase(
        name="exp-discount-bsde",
        description="unit terminal discounted by the driver -0.1 y: u = exp(-0.1 (T - t))",
        problem=problem, closed_form=closed,
        closed_form_note="y' = r y backward from y(T) = 1",
        window=((-1.0, 1.0),), space_h=0.05,
        defaults={"tol_fd": 5e-3, "tol_mc": 5e-3, "tol_pair": 5e-3, "rate": r})


REGISTRY: dict[str, BenchmarkCase] = {
    case.name: case
    for case in (_case_zero_dynamics(), _case_heat(), _case_linear_drift(),
                 _case_exp_discount())
}


def get_benchmark(name: str) -> BenchmarkCase:
    if name not in REGISTRY:
        raise ConfigError("benchmark", f"unknown benchmark {name!r}; "
                          f"known: {', '.join(sorted(REGISTRY))}")
    return REGISTRY[name]


def list_benchmarks() -> list[tuple[str, str]]:
    """(name, description) pairs in deterministic order."""
    return [(name, REGISTRY[name].description) for name in sorted(REGISTRY)]


def registry_self_test(case: BenchmarkCase, points: int = 100,
                       rng: RandomSource | None = None, tol: float = 1e-8) -> float:
    """Max |hjb residual| of the closed form at random interior points."""
    if case.closed_form is None:
        raise LabError(f"benchmark {case.name} has no closed form")
    rng = rng or RandomSource(20240901)
    gen = rng.child(zlib.crc32(case.name.encode())).generator()
    op = case.operator()
    worst = 0.0
    for _ in range(points):
        t = float(gen.uniform(0.0, case.problem.T * 0.999))
        x = np.array([gen.uniform(lo, hi) for lo, hi in case.window])
        worst = max(worst, abs(hjb_residual(op, case.closed_form, t, x)))
    if worst > tol:
        raise LabError(f"closed form of {case.name} violates the PDE: "
                       f"max residual {worst:.3e} > {tol}")
    return worst
