"""Monotone explicit finite differences for the control HJB equation.

The equation solved backward from u(T, .) = Phi is

    du/dt + max_v { (1/2) Tr[(sigma sigma*)(t,x,v) D^2 u] + <b(t,x,v), grad u>
                    + g(t, x, u, sigma*(t,x,v) grad u, v) } = 0

on a truncated box, with the max taken over a finite control mesh.  The
discretization is the classic monotone recipe: centered second differences,
upwinded first differences for the drift term, centered differences for the
gradient fed to the driver, and the standard seven-point-compatible stencil
for mixed second derivatives (accepted only where sigma sigma* is diagonally
dominant).  Under the CFL bound

    dt <= h^2 / (n max|sigma sigma*| + h max|b| + h^2 K)

the interior update is nondecreasing in every neighbor value, which is the
property that drives convergence to the viscosity solution.  Boundary nodes
use first-order one-sided differences; callers are expected to pad the
domain so truncation error stays outside the reported interior window.
Ties in the control max go to the smallest mesh index.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import LabError, NonFiniteError, StabilityError
from .problems import ControlProblem, SmoothTestFunction, TimeGrid, make_grid

__all__ = [
    "SpaceGrid",
    "ValueGrid",
    "HjbOperator",
    "apply_Lv",
    "hjb_residual",
    "hjb_step",
    "solve_hjb",
    "cfl_bound",
    "cfl_time_grid",
    "interpolate_space",
    "write_value_grid_csv",
    "save_value_grid",
    "load_value_grid",
]

_VG_MAGIC = b"BSVG"
_VG_VERSION = 1


@dataclass(frozen=True)
class SpaceGrid:
    """Rectangular grid: per-axis uniform nodes, at least 3 per axis."""

    axes: tuple[np.ndarray, ...]

    def __post_init__(self):
        axes = []
        for ax in self.axes:
            a = np.asarray(ax, dtype=np.float64)
            if a.size < 3:
                raise LabError("need at least 3 nodes per axis")
            steps = np.diff(a)
            if not np.all(steps > 0):
                raise LabError("axis nodes must be strictly increasing")
            if not np.allclose(steps, steps[0], rtol=1e-10, atol=0.0):
                raise LabError("axis nodes must be uniformly spaced")
            if not np.all(np.isfinite(a)):
                raise LabError("axis bounds must be finite")
            a.flags.writeable = False
            axes.append(a)
        object.__setattr__(self, "axes", tuple(axes))

    @classmethod
    def regular(cls, bounds, h: float | None = None, counts=None) -> "SpaceGrid":
        """Build from per-axis [lo, hi] bounds and either a spacing h or node counts."""
        axes = []
        for i, (lo, hi) in enumerate(bounds):
            if h is not None:
                m = int(round((hi - lo) / h)) + 1
            else:
                m = int(counts[i] if np.ndim(counts) else counts)
            axes.append(np.linspace(lo, hi, max(m, 3)))
        return cls(tuple(axes))

    @property
    def n(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(a.size for a in self.axes)

    @property
    def h(self) -> np.ndarray:
        return np.array([a[1] - a[0] for a in self.axes])

    @property
    def lower(self) -> np.ndarray:
        return np.array([a[0] for a in self.axes])

    @property
    def upper(self) -> np.ndarray:
        return np.array([a[-1] for a in self.axes])

    def nodes_matrix(self) -> np.ndarray:
        """All node coordinates, shape (prod(shape), n), C order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def interior_mask(self, margin: int = 1) -> np.ndarray:
        mask = np.ones(self.shape, dtype=bool)
        for ax in range(self.n):
            idx = [slice(None)] * self.n
            idx[ax] = slice(0, margin)
            mask[tuple(idx)] = False
            idx[ax] = slice(self.shape[ax] - margin, None)
            mask[tuple(idx)] = False
        return mask

    def window_mask(self, lower, upper) -> np.ndarray:
        """Nodes inside the coordinate box [lower, upper]."""
        coords = self.nodes_matrix()
        ok = np.all((coords >= np.asarray(lower) - 1e-12)
                    & (coords <= np.asarray(upper) + 1e-12), axis=1)
        return ok.reshape(self.shape)


@dataclass(frozen=True)
class ValueGrid:
    """u(t, x) sampled on a time grid x space grid; provenance 'fd' or 'mc'."""

    u: np.ndarray
    grid: TimeGrid
    space: SpaceGrid
    provenance: str

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        if u.shape != (self.grid.N + 1,) + self.space.shape:
            raise LabError("value array shape must be (N+1,) + space shape")
        if not np.all(np.isfinite(u)):
            raise LabError("value grid contains non-finite entries")
        if self.provenance not in ("fd", "mc"):
            raise LabError("provenance must be 'fd' or 'mc'")
        u.flags.writeable = False
        object.__setattr__(self, "u", u)

    def slice_at(self, i: int) -> np.ndarray:
        return self.u[i]

    def value_at(self, t: float, x) -> float:
        """Multilinear interpolation in space, linear in time; clamped outside."""
        return float(self.values_at(t, np.atleast_2d(np.asarray(x, dtype=np.float64)))[0])

    def values_at(self, t: float, xs: np.ndarray) -> np.ndarray:
        nodes = self.grid.nodes
        t = min(max(t, nodes[0]), nodes[-1])
        i = int(np.searchsorted(nodes, t, side="right") - 1)
        i = min(max(i, 0), self.grid.N - 1) if self.grid.N > 0 else 0
        t0, t1 = nodes[i], nodes[i + 1]
        theta = 0.0 if t1 == t0 else (t - t0) / (t1 - t0)
        lo = interpolate_space(self.space, self.u[i], xs)
        hi = interpolate_space(self.space, self.u[i + 1], xs)
        return (1 - theta) * lo + theta * hi

    def as_function(self):
        """Callable u(t, x) view used by the viscosity checks."""
        return lambda t, x: self.value_at(t, x)


def interpolate_space(space: SpaceGrid, values: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of a nodal array at points xs (Q, n), clamped to the box."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    Q = xs.shape[0]
    n = space.n
    idx = np.empty((Q, n), dtype=np.int64)
    w = np.empty((Q, n))
    for ax in range(n):
        a = space.axes[ax]
        x = np.clip(xs[:, ax], a[0], a[-1])
        j = np.clip(np.searchsorted(a, x, side="right") - 1, 0, a.size - 2)
        idx[:, ax] = j
        w[:, ax] = (x - a[j]) / (a[j + 1] - a[j])
    out = np.zeros(Q)
    for corner in range(1 << n):
        weight = np.ones(Q)
        offsets = np.empty((Q, n), dtype=np.int64)
        for ax in range(n):
            hi = (corner >> ax) & 1
            offsets[:, ax] = idx[:, ax] + hi
            weight *= w[:, ax] if hi else (1.0 - w[:, ax])
        out += weight * values[tuple(offsets.T)]
    return out


@dataclass(frozen=True)
class HjbOperator:
    """Control problem plus the finite control mesh the sup is taken over."""

    problem: ControlProblem
    control_mesh: np.ndarray

    def __post_init__(self):
        mesh = np.atleast_2d(np.asarray(self.control_mesh, dtype=np.float64))
        if mesh.size == 0:
            raise LabError("control mesh must be nonempty")
        if not self.problem.U.contains(mesh).all():
            raise LabError("control mesh must be a subset of U")
        mesh.flags.writeable = False
        object.__setattr__(self, "control_mesh", mesh)

    @classmethod
    def with_default_mesh(cls, problem: ControlProblem, points_per_axis: int = 11) -> "HjbOperator":
        return cls(problem, problem.U.mesh(points_per_axis))


def apply_Lv(op: HjbOperator, phi: SmoothTestFunction, t: float, x, v) -> float:
    """(1/2) Tr[(sigma sigma*) Hess phi] + <b, grad phi> at (t, x, v)."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    if not op.problem.U.contains(v[None, :]).all():
        raise LabError("control point outside U")
    p = op.problem
    b = p.drift(t, x[None, :], v)[0]
    sig = p.diffusion(t, x[None, :], v)[0]
    a = sig @ sig.T
    H = phi.hess_x(t, x)
    grad = phi.grad_x(t, x)
    out = 0.5 * float(np.trace(a @ H)) + float(b @ grad)
    if not np.isfinite(out):
        raise NonFiniteError(f"L^v produced a non-finite value at t={t}, x={x}, v={v}")
    return out


def hjb_residual(op: HjbOperator, phi: SmoothTestFunction, t: float, x) -> float:
    """d/dt phi + max over the mesh of {L^v phi + g(t, x, phi, sigma* grad phi, v)}."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    p = op.problem
    grad = phi.grad_x(t, x)
    y = phi(t, x)
    best = -np.inf
    for v in op.control_mesh:
        lv = apply_Lv(op, phi, t, x, v)
        sig = p.diffusion(t, x[None, :], v)[0]
        z = sig.T @ grad
        gval = float(p.generator(t, x[None, :], np.array([y]), z[None, :], v)[0])
        cand = lv + gval
        if cand > best:
            best = cand
    return phi.grad_t(t, x) + best


def _axis_shift(u: np.ndarray, ax: int, by: int) -> np.ndarray:
    """u shifted ``by`` nodes along ax, replicating the edge (callers overwrite edges)."""
    out = np.empty_like(u)
    src = [slice(None)] * u.ndim
    dst = [slice(None)] * u.ndim
    if by > 0:
        dst[ax] = slice(0, u.shape[ax] - by)
        src[ax] = slice(by, None)
        out[tuple(dst)] = u[tuple(src)]
        edge = [slice(None)] * u.ndim
        edge[ax] = slice(u.shape[ax] - by, None)
        fill = [slice(None)] * u.ndim
        fill[ax] = slice(u.shape[ax] - 1, u.shape[ax])
        out[tuple(edge)] = u[tuple(fill)]
    else:
        by = -by
        dst[ax] = slice(by, None)
        src[ax] = slice(0, u.shape[ax] - by)
        out[tuple(dst)] = u[tuple(src)]
        edge = [slice(None)] * u.ndim
        edge[ax] = slice(0, by)
        fill = [slice(None)] * u.ndim
        fill[ax] = slice(0, 1)
        out[tuple(edge)] = u[tuple(fill)]
    return out


def _derivatives(u: np.ndarray, space: SpaceGrid):
    """First (forward/backward/centered) and second differences per axis.

    Interior nodes get the standard stencils; boundary nodes fall back to
    first-order one-sided formulas (second derivatives use the shifted
    three-point stencil).
    """
    n = space.n
    h = space.h
    fwd, bwd, cen, second = [], [], [], []
    for ax in range(n):
        up = _axis_shift(u, ax, +1)
        dn = _axis_shift(u, ax, -1)
        f = (up - u) / h[ax]
        bk = (u - dn) / h[ax]
        # one-sided fallbacks at the faces where the shift replicated the edge
        first_hi = [slice(None)] * n
        first_hi[ax] = slice(u.shape[ax] - 1, None)
        f[tuple(first_hi)] = bk[tuple(first_hi)]
        first_lo = [slice(None)] * n
        first_lo[ax] = slice(0, 1)
        bk[tuple(first_lo)] = f[tuple(first_lo)]
        c = 0.5 * (f + bk)
        d2 = (up - 2.0 * u + dn) / h[ax] ** 2
        up2 = _axis_shift(u, ax, +2)
        dn2 = _axis_shift(u, ax, -2)
        lo = [slice(None)] * n
        lo[ax] = slice(0, 1)
        d2[tuple(lo)] = ((u - 2.0 * up + up2) / h[ax] ** 2)[tuple(lo)]
        hi = [slice(None)] * n
        hi[ax] = slice(u.shape[ax] - 1, None)
        d2[tuple(hi)] = ((u - 2.0 * dn + dn2) / h[ax] ** 2)[tuple(hi)]
        fwd.append(f)
        bwd.append(bk)
        cen.append(c)
        second.append(d2)
    return fwd, bwd, cen, second


def _mixed_derivative(u: np.ndarray, space: SpaceGrid, p_ax: int, q_ax: int,
                      positive: bool) -> np.ndarray:
    """Monotone-compatible mixed stencil for d^2 u / dx_p dx_q (sign-split)."""
    h = space.h
    up_p = _axis_shift(u, p_ax, +1)
    dn_p = _axis_shift(u, p_ax, -1)
    up_q = _axis_shift(u, q_ax, +1)
    dn_q = _axis_shift(u, q_ax, -1)
    if positive:
        upp = _axis_shift(up_p, q_ax, +1)
        dnn = _axis_shift(dn_p, q_ax, -1)
        val = (2.0 * u + upp + dnn - up_p - dn_p - up_q - dn_q) / (2.0 * h[p_ax] * h[q_ax])
    else:
        upd = _axis_shift(up_p, q_ax, -1)
        dnu = _axis_shift(dn_p, q_ax, +1)
        val = -(2.0 * u + upd + dnu - up_p - dn_p - up_q - dn_q) / (2.0 * h[p_ax] * h[q_ax])
    # zero the faces where the stencil would have left the grid
    for ax in (p_ax, q_ax):
        lo = [slice(None)] * u.ndim
        lo[ax] = slice(0, 1)
        val[tuple(lo)] = 0.0
        hi = [slice(None)] * u.ndim
        hi[ax] = slice(u.shape[ax] - 1, None)
        val[tuple(hi)] = 0.0
    return val


def _coefficients(p: ControlProblem, t: float, coords: np.ndarray, v: np.ndarray,
                  shape: tuple[int, ...]):
    b = p.drift(t, coords, v).reshape(shape + (p.n,))
    sig = p.diffusion(t, coords, v).reshape(shape + (p.n, p.d))
    a = np.einsum("...nd,...qd->...nq", sig, sig)
    return b, sig, a


def _check_diagonal_dominance(a: np.ndarray, h: np.ndarray, v) -> None:
    n = a.shape[-1]
    for p_ax in range(n):
        diag = a[..., p_ax, p_ax] / h[p_ax] ** 2
        off = sum(np.abs(a[..., p_ax, q]) / (h[p_ax] * h[q])
                  for q in range(n) if q != p_ax)
        if np.any(diag - off < -1e-12):
            raise StabilityError(
                f"sigma sigma* not diagonally dominant at control {v}; "
                "the mixed-derivative stencil would break monotonicity")


def hjb_step(op: HjbOperator, u_next: np.ndarray, t: float, dt: float,
             space: SpaceGrid) -> np.ndarray:
    """One explicit backward step from the slice at t+dt to the slice at t."""
    p = op.problem
    coords = space.nodes_matrix()
    shape = space.shape
    h = space.h
    fwd, bwd, cen, second = _derivatives(u_next, space)
    best = None
    for v in op.control_mesh:
        b, sig, a = _coefficients(p, t, coords, v, shape)
        if p.n > 1:
            _check_diagonal_dominance(a, h, v)
        lv = np.zeros(shape)
        for ax in range(p.n):
            lv += 0.5 * a[..., ax, ax] * second[ax]
            bax = b[..., ax]
            lv += np.maximum(bax, 0.0) * fwd[ax] + np.minimum(bax, 0.0) * bwd[ax]
        for p_ax in range(p.n):
            for q_ax in range(p_ax + 1, p.n):
                apq = a[..., p_ax, q_ax]
                if not np.any(apq):
                    continue
                pos = _mixed_derivative(u_next, space, p_ax, q_ax, positive=True)
                neg = _mixed_derivative(u_next, space, p_ax, q_ax, positive=False)
                lv += np.where(apq >= 0, apq * pos, -apq * neg)
        grad = np.stack([cen[ax] for ax in range(p.n)], axis=-1)
        z = np.einsum("...nd,...n->...d", sig, grad)
        gval = p.generator(t, coords, u_next.ravel(), z.reshape(-1, p.d), v).reshape(shape)
        cand = u_next + dt * (lv + gval)
        best = cand if best is None else np.where(cand > best, cand, best)
    if not np.all(np.isfinite(best)):
        bad = np.unravel_index(int(np.argmax(~np.isfinite(best))), shape)
        raise NonFiniteError(f"finite-difference blow-up at t={t}, node index {bad}")
    return best


def cfl_bound(op: HjbOperator, space: SpaceGrid, t_samples=None) -> float:
    """Largest admissible dt: h^2 / (n max|a| + h max|b| + h^2 K).

    Maxima run over all space nodes, the control mesh, and the sampled times
    (default: a handful of times across the horizon, enough for the
    time-continuous coefficients the toolkit targets).
    """
    p = op.problem
    coords = space.nodes_matrix()
    if t_samples is None:
        t_samples = np.linspace(0.0, p.T, 9)
    max_a = 0.0
    max_b = 0.0
    for t in np.atleast_1d(t_samples):
        for v in op.control_mesh:
            b = p.drift(float(t), coords, v)
            sig = p.diffusion(float(t), coords, v)
            a = np.einsum("mnd,mqd->mnq", sig, sig)
            max_a = max(max_a, float(np.max(np.abs(a))))
            max_b = max(max_b, float(np.max(np.abs(b))))
    h = float(np.min(space.h))
    denom = p.n * max_a + h * max_b + h * h * p.generator.K
    if denom == 0.0:
        return np.inf
    return h * h / denom


def cfl_time_grid(op: HjbOperator, space: SpaceGrid, t0: float = 0.0,
                  safety: float = 1.0) -> TimeGrid:
    """Uniform grid on [t0, T] whose step respects the CFL bound."""
    bound = cfl_bound(op, space)
    T = op.problem.T
    if not np.isfinite(bound):
        return make_grid(t0, T, 1)
    N = max(1, int(np.ceil((T - t0) / (bound * safety))))
    return make_grid(t0, T, N)


def solve_hjb(op: HjbOperator, space: SpaceGrid, grid: TimeGrid) -> ValueGrid:
    """March the monotone scheme backward from u(T, .) = Phi on the box."""
    p = op.problem
    if abs(grid.T - p.T) > 1e-9:
        raise LabError(f"time grid must end at T={p.T}")
    bound = cfl_bound(op, space, t_samples=grid.nodes[:: max(1, grid.N // 8)])
    max_dt = float(np.max(grid.dt))
    if max_dt > bound * (1 + 1e-9):
        raise StabilityError(
            f"CFL violated: dt={max_dt:.3e} exceeds the admissible {bound:.3e}")
    coords = space.nodes_matrix()
    u = np.empty((grid.N + 1,) + space.shape)
    u[grid.N] = p.terminal(coords).reshape(space.shape)
    for i in range(grid.N - 1, -1, -1):
        u[i] = hjb_step(op, u[i + 1], float(grid.nodes[i]), float(grid.dt[i]), space)
    return ValueGrid(u=u, grid=grid, space=space, provenance="fd")


def write_value_grid_csv(vg: ValueGrid, path: str) -> None:
    """CSV rows (t, x..., u) over the full time x space product."""
    coords = vg.space.nodes_matrix()
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t"] + [f"x{i}" for i in range(vg.space.n)] + ["u"])
        for i, t in enumerate(vg.grid.nodes):
            flat = vg.u[i].ravel()
            for row, val in zip(coords, flat):
                w.writerow([repr(float(t))] + [repr(float(c)) for c in row] + [repr(float(val))])


def save_value_grid(vg: ValueGrid, path: str) -> None:
    """Binary slab: header (magic, version, provenance, dims), nodes, then u row-major."""
    with open(path, "wb") as f:
        f.write(_VG_MAGIC)
        f.write(struct.pack("<I", _VG_VERSION))
        f.write(struct.pack("<B", 0 if vg.provenance == "fd" else 1))
        f.write(struct.pack("<QQ", vg.grid.N + 1, vg.space.n))
        f.write(struct.pack(f"<{vg.space.n}Q", *vg.space.shape))
        f.write(vg.grid.nodes.astype("<f8").tobytes())
        for ax in vg.space.axes:
            f.write(ax.astype("<f8").tobytes())
        f.write(vg.u.astype("<f8").tobytes())


def load_value_grid(path: str) -> ValueGrid:
    with open(path, "rb") as f:
        if f.read(4) != _VG_MAGIC:
            raise LabError(f"{path}: not a value-grid slab")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _VG_VERSION:
            raise LabError(f"{path}: unsupported slab version {version}")
        (prov,) = struct.unpack("<B", f.read(1))
        nt, n = struct.unpack("<QQ", f.read(16))
        shape = struct.unpack(f"<{n}Q", f.read(8 * n))
        tnodes = np.frombuffer(f.read(8 * nt), dtype="<f8").copy()
        axes = tuple(np.frombuffer(f.read(8 * m), dtype="<f8").copy() for m in shape)
        count = nt * int(np.prod(shape))
        u = np.frombuffer(f.read(8 * count), dtype="<f8").reshape((nt,) + shape).copy()
    grid = TimeGrid(tnodes, uniform=bool(np.allclose(np.diff(tnodes), tnodes[1] - tnodes[0])))
    return ValueGrid(u=u, grid=grid, space=SpaceGrid(axes),
                     provenance="fd" if prov == 0 else "mc")
