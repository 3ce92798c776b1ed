"""Time steppers and derivative estimation.

Deterministic integration uses classical fixed-step RK4; gradients of
trajectory functionals are taken by differentiating through the unrolled
recursion (discretize-then-differentiate), which keeps them exact for the
computed trajectory. Stochastic paths use Euler-Maruyama with pregenerated
noise so a (seed, trajectory id) pair fully determines the path.

Trajectory CSV format: columns ``traj_id, t, x_0..x_{d-1}, u_0..u_{q-1}``,
doubles printed with 17 significant digits (lossless round trip).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import StructuredField, velocity_cached, velocity_vjp_cached
from .nnet import NonFiniteError


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    t1: float
    n_steps: int

    def __post_init__(self):
        if not (self.t1 > self.t0):
            raise ValueError("need t1 > t0")
        if self.n_steps < 1:
            raise ValueError("need n_steps >= 1")

    @property
    def h(self) -> float:
        return (self.t1 - self.t0) / self.n_steps

    def times(self) -> np.ndarray:
        return self.t0 + self.h * np.arange(self.n_steps + 1)


@dataclass
class Trajectory:
    """Uniformly sampled time series under one constant control vector."""

    times: np.ndarray
    states: np.ndarray
    control: np.ndarray
    traj_id: int = 0
    system: str = ""

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        self.control = np.atleast_1d(np.asarray(self.control, dtype=float))
        if self.states.ndim == 1:
            self.states = self.states[:, None]
        if len(self.times) != len(self.states):
            raise ValueError("times and states must have equal length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    @property
    def dim(self) -> int:
        return self.states.shape[1]


@dataclass(frozen=True)
class NoisePath:
    """Pregenerated standard-normal increments, one d-vector per step."""

    increments: np.ndarray  # (n_steps, d)
    seed: object = None


def noise_path(grid: TimeGrid, dim: int, seed) -> NoisePath:
    rng = np.random.default_rng(seed)
    return NoisePath(rng.standard_normal((grid.n_steps, dim)), seed)


def _check_finite(x: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite state at step {step}")


def rk4_step_batch(rhs, x: np.ndarray, u: np.ndarray, h: float) -> np.ndarray:
    k1 = rhs(x, u)
    k2 = rhs(x + (0.5 * h) * k1, u)
    k3 = rhs(x + (0.5 * h) * k2, u)
    k4 = rhs(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_solve_batch(rhs, x0: np.ndarray, u: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Integrate a batch of initial states; returns (B, n_steps+1, d)."""
    x = np.asarray(x0, dtype=float)
    out = np.empty((x.shape[0], grid.n_steps + 1, x.shape[1]))
    out[:, 0] = x
    h = grid.h
    for n in range(grid.n_steps):
        x = rk4_step_batch(rhs, x, u, h)
        _check_finite(x, n + 1)
        out[:, n + 1] = x
    return out


def rk4_solve(rhs, x0, u, grid: TimeGrid, traj_id: int = 0, system: str = "") -> Trajectory:
    """Classical RK4 on dx/dt = rhs(x, u), recording every grid node."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    states = rk4_solve_batch(lambda xb, ub: np.atleast_2d(rhs(xb[0], ub[0])),
                             x0[None, :], u[None, :], grid)[0]
    return Trajectory(grid.times(), states, u, traj_id=traj_id, system=system)


def field_rhs_batch(field: StructuredField):
    """Batched rhs closure for rk4_solve_batch over a StructuredField."""
    from .field import eval_velocity

    return lambda x, u: eval_velocity(field, x, u)


def rk4_solve_unrolled_grad(
    field: StructuredField,
    x0: np.ndarray,
    u: np.ndarray,
    grid: TimeGrid,
    cotangents: np.ndarray,
):
    """Exact parameter gradient of sum_i <cotangent_i, x(t_i)> through RK4.

    ``x0`` is (B, d), ``u`` is (B, q), ``cotangents`` is (B, n_steps+1, d).
    Returns (states (B, n_steps+1, d), flat_param_grad).
    """
    x0 = np.asarray(x0, dtype=float)
    u = np.asarray(u, dtype=float)
    cotangents = np.asarray(cotangents, dtype=float)
    B, d = x0.shape
    if cotangents.shape != (B, grid.n_steps + 1, d):
        raise ValueError("cotangent array must be (batch, n_steps+1, dim)")
    h = grid.h

    states = np.empty((B, grid.n_steps + 1, d))
    states[:, 0] = x0
    x = x0
    caches = []
    for n in range(grid.n_steps):
        k1, c1 = velocity_cached(field, x, u)
        k2, c2 = velocity_cached(field, x + (0.5 * h) * k1, u)
        k3, c3 = velocity_cached(field, x + (0.5 * h) * k2, u)
        k4, c4 = velocity_cached(field, x + h * k3, u)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _check_finite(x, n + 1)
        states[:, n + 1] = x
        caches.append((c1, c2, c3, c4))

    pgrad = np.zeros(field.params.shape)
    lam = cotangents[:, grid.n_steps].copy()
    for n in range(grid.n_steps - 1, -1, -1):
        c1, c2, c3, c4 = caches[n]
        dk1 = (h / 6.0) * lam
        dk2 = (h / 3.0) * lam
        dk3 = (h / 3.0) * lam
        dk4 = (h / 6.0) * lam
        dxn = lam.copy()
        pg, dy = velocity_vjp_cached(field, c4, dk4)
        pgrad += pg
        dxn += dy
        dk3 += h * dy
        pg, dy = velocity_vjp_cached(field, c3, dk3)
        pgrad += pg
        dxn += dy
        dk2 += (0.5 * h) * dy
        pg, dy = velocity_vjp_cached(field, c2, dk2)
        pgrad += pg
        dxn += dy
        dk1 += (0.5 * h) * dy
        pg, dy = velocity_vjp_cached(field, c1, dk1)
        pgrad += pg
        dxn += dy
        lam = dxn + cotangents[:, n]
    return states, pgrad


def euler_maruyama(
    drift,
    diffusion_diag,
    x0,
    grid: TimeGrid,
    noise: NoisePath,
    traj_id: int = 0,
    system: str = "",
) -> Trajectory:
    """x_{k+1} = x_k + h*drift(x_k) + sqrt(h)*diffusion_diag(x_k)*xi_k."""
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    d = x.shape[0]
    if noise.increments.shape != (grid.n_steps, d):
        raise ValueError("noise path shape does not match grid/state")
    h = grid.h
    sqrt_h = np.sqrt(h)
    out = np.empty((grid.n_steps + 1, d))
    out[0] = x
    for n in range(grid.n_steps):
        x = x + h * np.asarray(drift(x)) + sqrt_h * np.asarray(diffusion_diag(x)) * noise.increments[n]
        _check_finite(x, n + 1)
        out[n + 1] = x
    return Trajectory(grid.times(), out, np.zeros(0), traj_id=traj_id, system=system)


def finite_diff(traj: Trajectory) -> np.ndarray:
    """Derivative estimates: centered inside, one-sided Euler at the ends."""
    t, x = traj.times, traj.states
    n = len(t)
    if n < 2:
        raise ValueError("need at least 2 samples for finite differences")
    d = np.empty_like(x)
    d[0] = (x[1] - x[0]) / (t[1] - t[0])
    d[-1] = (x[-1] - x[-2]) / (t[-1] - t[-2])
    if n > 2:
        d[1:-1] = (x[2:] - x[:-2]) / (t[2:] - t[:-2])[:, None]
    return d


# --- CSV interchange ---------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_trajectories_csv(path, trajectories: list[Trajectory]) -> None:
    if not trajectories:
        raise ValueError("no trajectories to write")
    d = trajectories[0].dim
    q = len(trajectories[0].control)
    header = (
        ["traj_id", "t"]
        + [f"x_{i}" for i in range(d)]
        + [f"u_{i}" for i in range(q)]
    )
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for traj in trajectories:
            u_cols = [_fmt(v) for v in traj.control]
            for t, row in zip(traj.times, traj.states):
                cells = [str(traj.traj_id), _fmt(t)] + [_fmt(v) for v in row] + u_cols
                fh.write(",".join(cells) + "\n")


def read_trajectories_csv(path) -> list[Trajectory]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        d = sum(1 for c in header if c.startswith("x_"))
        q = sum(1 for c in header if c.startswith("u_"))
        groups: dict[int, list[list[float]]] = {}
        order: list[int] = []
        for line in fh:
            cells = line.rstrip("\n").split(",")
            tid = int(cells[0])
            if tid not in groups:
                groups[tid] = []
                order.append(tid)
            groups[tid].append([float(c) for c in cells[1:]])
    out = []
    for tid in order:
        rows = np.asarray(groups[tid])
        out.append(
            Trajectory(
                times=rows[:, 0],
                states=rows[:, 1 : 1 + d],
                control=rows[0, 1 + d : 1 + d + q],
                traj_id=tid,
            )
        )
    return out
