"""Equilibrium discovery, stability classification, bifurcation sweeps,
tipping-point detection, and evaluation metrics.

Root finding is deliberately simple and testable: a uniform scan with
bisection on sign changes in one dimension, damped Newton with a
finite-difference Jacobian from a grid of starts in higher dimensions.
Sign-change cells that bisect onto a discontinuity (the residual stays
large) are discarded, and tangency roots without a sign change can be
missed; scan densities are chosen below benchmark feature scales.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

STABLE = "stable"
UNSTABLE = "unstable"
MARGINAL = "marginal"


@dataclass(frozen=True)
class EquilibriumPoint:
    x_star: np.ndarray
    u: np.ndarray
    stability: str
    residual_norm: float

    def __post_init__(self):
        object.__setattr__(self, "x_star", np.atleast_1d(np.asarray(self.x_star, dtype=float)))
        object.__setattr__(self, "u", np.atleast_1d(np.asarray(self.u, dtype=float)))


@dataclass
class BifurcationDiagram:
    control_index: int
    control_values: np.ndarray
    points: list[EquilibriumPoint]
    tipping_points: list[float]
    counts: np.ndarray  # equilibria per control value


@dataclass
class MetricsReport:
    nrmse_mean: np.ndarray          # per dimension
    nrmse_std: np.ndarray
    within_5pct: np.ndarray         # fraction per dimension
    within_2pct: np.ndarray
    magnitude: np.ndarray
    magnitude_definition: str
    per_target: list = dc_field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "nrmse_mean": self.nrmse_mean.tolist(),
            "nrmse_std": self.nrmse_std.tolist(),
            "within_5pct": self.within_5pct.tolist(),
            "within_2pct": self.within_2pct.tolist(),
            "magnitude": self.magnitude.tolist(),
            "magnitude_definition": self.magnitude_definition,
            "per_target": self.per_target,
        }


# --- scalar root finding -------------------------------------------------------

def find_equilibria_1d(residual_fn, interval, n_scan: int = 400,
                       tol: float = 1e-10, dedup: float = 1e-6) -> np.ndarray:
    """Roots of a continuous scalar residual on an interval, sorted.

    Uniform scan over n_scan cells, bisection on each sign change. A cell
    whose bisection limit still has |r| > tol hides a discontinuity, not a
    root, and is dropped.
    """
    lo, hi = float(interval[0]), float(interval[1])
    xs = np.linspace(lo, hi, n_scan + 1)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        vals = np.array([float(residual_fn(x)) for x in xs])
        roots = []
        for x, v in zip(xs, vals):
            if v == 0.0:
                roots.append(x)
        for i in range(n_scan):
            a, b = xs[i], xs[i + 1]
            fa, fb = vals[i], vals[i + 1]
            if fa == 0.0 or fb == 0.0 or np.sign(fa) == np.sign(fb):
                continue
            for _ in range(200):
                m = 0.5 * (a + b)
                fm = float(residual_fn(m))
                if fm == 0.0 or (b - a) < 1e-15 * max(1.0, abs(m)):
                    break
                if np.sign(fm) == np.sign(fa):
                    a, fa = m, fm
                else:
                    b, fb = m, fm
            m = 0.5 * (a + b)
            if abs(float(residual_fn(m))) <= tol:
                roots.append(m)
    roots.sort()
    out: list[float] = []
    for r in roots:
        if not out or abs(r - out[-1]) > dedup:
            out.append(r)
    return np.asarray(out)


# --- multivariate root finding ---------------------------------------------------

def _fd_jacobian(fn, x, h: float = 1e-6) -> np.ndarray:
    d = len(x)
    jac = np.empty((d, d))
    for j in range(d):
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        jac[:, j] = (np.asarray(fn(xp)) - np.asarray(fn(xm))) / (2.0 * h)
    return jac


def find_equilibria_nd(residual_fn, box, starts_per_axis: int = 6,
                       tol: float = 1e-8, dedup: float = 1e-4,
                       max_iter: int = 80):
    """Damped Newton on r(x) = 0 from a grid of starts over a box.

    Returns (roots array, n_failed_starts). Starts that do not reach
    ||r|| <= tol are counted, not silently dropped.
    """
    box = np.asarray(box, dtype=float).reshape(-1, 2)
    axes = [np.linspace(lo, hi, starts_per_axis) for lo, hi in box]
    mesh = np.meshgrid(*axes, indexing="ij")
    starts = np.stack([m.ravel() for m in mesh], axis=1)

    roots: list[np.ndarray] = []
    failed = 0
    for x0 in starts:
        x = x0.copy()
        r = np.asarray(residual_fn(x), dtype=float)
        ok = False
        for _ in range(max_iter):
            nr = np.linalg.norm(r)
            if nr <= tol:
                ok = True
                break
            jac = _fd_jacobian(residual_fn, x)
            try:
                step = np.linalg.solve(jac, -r)
            except np.linalg.LinAlgError:
                break
            scale = 1.0
            improved = False
            for _ in range(30):
                x_new = x + scale * step
                r_new = np.asarray(residual_fn(x_new), dtype=float)
                if np.all(np.isfinite(r_new)) and np.linalg.norm(r_new) < nr:
                    x, r = x_new, r_new
                    improved = True
                    break
                scale *= 0.5
            if not improved:
                break
        if ok or np.linalg.norm(r) <= tol:
            if not any(np.linalg.norm(x - prev) <= dedup for prev in roots):
                roots.append(x)
        else:
            failed += 1
    roots.sort(key=lambda p: tuple(p))
    return np.asarray(roots).reshape(-1, box.shape[0]), failed


# --- stability -------------------------------------------------------------------

def classify_stability(velocity_fn, x_star, equilibrium_tol: float = 1e-6,
                       eig_tol: float = 1e-8, h: float = 1e-6) -> str:
    """Stability of an equilibrium from the finite-difference Jacobian of
    the velocity field (d = 1 or 2)."""
    x_star = np.atleast_1d(np.asarray(x_star, dtype=float))
    v = np.atleast_1d(np.asarray(velocity_fn(x_star), dtype=float))
    if np.linalg.norm(v) > equilibrium_tol:
        raise ValueError(f"not an equilibrium: |velocity| = {np.linalg.norm(v):.3e}")
    d = len(x_star)
    if d == 1:
        def f(x):
            return float(np.atleast_1d(velocity_fn(np.atleast_1d(x)))[0])

        slope = (f(x_star[0] + h) - f(x_star[0] - h)) / (2.0 * h)
        if slope < -eig_tol:
            return STABLE
        if slope > eig_tol:
            return UNSTABLE
        return MARGINAL
    if d == 2:
        jac = _fd_jacobian(lambda x: np.atleast_1d(velocity_fn(x)), x_star, h)
        tr = jac[0, 0] + jac[1, 1]
        det = jac[0, 0] * jac[1, 1] - jac[0, 1] * jac[1, 0]
        disc = tr * tr - 4.0 * det
        if disc >= 0.0:
            max_real = 0.5 * (tr + np.sqrt(disc))
        else:
            max_real = 0.5 * tr
        if max_real < -eig_tol:
            return STABLE
        if max_real > eig_tol:
            return UNSTABLE
        return MARGINAL
    raise ValueError("stability classification supports d <= 2")


# --- bifurcation sweeps -----------------------------------------------------------

def bifurcation_sweep(residual_of, velocity_of, control_values, state_interval,
                      control_index: int = 0, n_scan: int = 400) -> BifurcationDiagram:
    """Scalar-state sweep: equilibria with stability per control value, plus
    the control values where the equilibrium count changes.

    ``residual_of(c)`` and ``velocity_of(c)`` return scalar functions of x
    for control value c. Tipping points are the midpoints of the grid cells
    where the count changes (true fold within one grid cell).
    """
    control_values = np.asarray(control_values, dtype=float)
    points: list[EquilibriumPoint] = []
    counts = np.empty(len(control_values), dtype=int)
    for i, c in enumerate(control_values):
        res_fn = residual_of(c)
        vel_fn = velocity_of(c)
        roots = find_equilibria_1d(res_fn, state_interval, n_scan=n_scan)
        counts[i] = len(roots)
        for r in roots:
            stab = classify_stability(
                lambda xv: np.atleast_1d(vel_fn(float(np.atleast_1d(xv)[0]))),
                [r],
            )
            points.append(
                EquilibriumPoint([r], [c], stab, abs(float(res_fn(r))))
            )
    tipping = [
        float(0.5 * (control_values[i] + control_values[i + 1]))
        for i in range(len(control_values) - 1)
        if counts[i] != counts[i + 1]
    ]
    return BifurcationDiagram(control_index, control_values, points, tipping, counts)


def sweep_to_rows(diagram: BifurcationDiagram) -> list[tuple]:
    """Rows `(control_value, x*..., stability)` sorted by control then state."""
    rows = [
        (float(p.u[0]), *[float(v) for v in p.x_star], p.stability)
        for p in diagram.points
    ]
    rows.sort(key=lambda r: (r[0], r[1:-1]))
    return rows


# --- metrics ----------------------------------------------------------------------

def nrmse(states_window: np.ndarray, x_star, magnitude) -> np.ndarray:
    """Per-dimension RMSE over the window divided by the system magnitude."""
    states_window = np.atleast_2d(np.asarray(states_window, dtype=float))
    if states_window.shape[0] == 0:
        raise ValueError("empty window")
    x_star = np.atleast_1d(np.asarray(x_star, dtype=float))
    magnitude = np.broadcast_to(np.asarray(magnitude, dtype=float), x_star.shape)
    if np.any(magnitude <= 0):
        raise ValueError("magnitude must be positive")
    rmse = np.sqrt(np.mean((states_window - x_star) ** 2, axis=0))
    return rmse / magnitude


def iqr(samples) -> float:
    """Interquartile range with linear-interpolation percentiles."""
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size < 2:
        raise ValueError("need at least 2 samples")
    q75, q25 = np.percentile(samples, [75.0, 25.0])
    return float(q75 - q25)


def contraction_bound(target_fn, x_star: float, radius: float,
                      n_samples: int = 101, h: float = 1e-6):
    """Sampled sup |d target/dx| over [x*-r, x*+r]; flags L < 1.

    ``target_fn`` maps a scalar state to a scalar (control already bound).
    """
    xs = np.linspace(x_star - radius, x_star + radius, n_samples)
    derivs = np.array([
        (float(target_fn(x + h)) - float(target_fn(x - h))) / (2.0 * h) for x in xs
    ])
    L = float(np.max(np.abs(derivs)))
    return L, L < 1.0


def summarize_targets(per_target_nrmse: list[np.ndarray], magnitude,
                      magnitude_definition: str) -> MetricsReport:
    """Aggregate per-target nRMSE vectors into the trial metrics report."""
    arr = np.asarray(per_target_nrmse, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    return MetricsReport(
        nrmse_mean=arr.mean(axis=0),
        nrmse_std=arr.std(axis=0),
        within_5pct=(arr <= 0.05).mean(axis=0),
        within_2pct=(arr <= 0.02).mean(axis=0),
        magnitude=np.atleast_1d(np.asarray(magnitude, dtype=float)),
        magnitude_definition=magnitude_definition,
        per_target=[row.tolist() for row in arr],
    )
