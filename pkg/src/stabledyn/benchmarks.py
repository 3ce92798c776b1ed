"""Ground-truth benchmark systems, their analytic decay/target splittings,
and the data-generation protocols used for training.

Four systems: a pump-and-valve pair of mixing tanks, the symmetric
bistable scalar ODE dx/dt = u + x - x^3, the spruce budworm outbreak model
with carrying capacity as control, and the two-gene toggle switch with
four control parameters. States/controls are vectorized over a batch axis
where possible so whole (ic, control) grids integrate in one solver call.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import Featurizer, StructuredField
from .integrate import TimeGrid, Trajectory, rk4_solve_batch, write_trajectories_csv
from .nnet import MlpSpec, init_params

TWO_TANKS = "two-tanks"
SYM_HYSTERESIS = "sym-hysteresis"
BUDWORM = "budworm"
TOGGLE_SWITCH = "toggle-switch"
SYSTEMS = (TWO_TANKS, SYM_HYSTERESIS, BUDWORM, TOGGLE_SWITCH)

SYSTEM_DIMS = {
    TWO_TANKS: (2, 2),
    SYM_HYSTERESIS: (1, 1),
    BUDWORM: (1, 1),
    TOGGLE_SWITCH: (2, 4),
}


class UndefinedSplit(ValueError):
    """No analytic decay/target factorization is available here."""


def default_params(system: str) -> dict:
    if system == TWO_TANKS:
        return {"a1": 0.08, "a2": 0.02, "a3": 0.08, "a4": 0.02, "gate_rate": 50.0}
    if system == BUDWORM:
        return {"r": 0.56}
    if system in (SYM_HYSTERESIS, TOGGLE_SWITCH):
        return {}
    raise ValueError(f"unknown system {system!r}")


def _logistic(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _batched(x, u, d, q):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if u.ndim == 1:
        u = np.broadcast_to(u, (x.shape[0], q))
    if x.shape[1] != d or u.shape[1] != q:
        raise ValueError(f"expected state dim {d} and control dim {q}")
    return x, u, single


def system_rhs(system: str, params: dict | None, x, u):
    """Exact dx/dt for one of the four benchmark systems (batched)."""
    params = default_params(system) if params is None else params
    d, q = SYSTEM_DIMS[system]
    x, u, single = _batched(x, u, d, q)

    if system == TWO_TANKS:
        x1, x2 = x[:, 0], x[:, 1]
        p, v = u[:, 0], u[:, 1]
        gate1 = 1.0 - _logistic(params["gate_rate"] * (x1 - 1.0))
        gate2 = 1.0 - _logistic(params["gate_rate"] * (x2 - 1.0))
        c1_in = params["a1"] * gate1
        c1_out = params["a2"] * gate2
        c2_in = params["a3"] * gate2
        # sqrt of clipped level: drift stays defined if noise dips below zero
        s1 = np.sqrt(np.clip(x1, 0.0, None))
        s2 = np.sqrt(np.clip(x2, 0.0, None))
        dx1 = c1_in * (1.0 - v) * p - c1_out * s1
        dx2 = c2_in * v * p + c1_out * s1 - params["a4"] * s2
        out = np.stack([dx1, dx2], axis=1)
    elif system == SYM_HYSTERESIS:
        out = u + x - x**3
    elif system == BUDWORM:
        r = params["r"]
        out = r * x * (1.0 - x / u) - x**2 / (1.0 + x**2)
    elif system == TOGGLE_SWITCH:
        x1 = np.clip(x[:, 0], 0.0, None)
        x2 = np.clip(x[:, 1], 0.0, None)
        a1, a2, beta, gamma = u[:, 0], u[:, 1], u[:, 2], u[:, 3]
        dx1 = -x[:, 0] + a1 / (1.0 + x2**beta)
        dx2 = -x[:, 1] + a2 / (1.0 + x1**gamma)
        out = np.stack([dx1, dx2], axis=1)
    else:
        raise ValueError(f"unknown system {system!r}")
    return out[0] if single else out


def analytic_split(system: str, params: dict | None, x, u):
    """The paper-style exact factorization rhs = f * (x - g), where defined.

    Raises UndefinedSplit for the tanks (none is given) and outside each
    split's validity domain (hysteresis x != 0, budworm x > 0).
    """
    params = default_params(system) if params is None else params
    d, q = SYSTEM_DIMS[system]
    x, u, single = _batched(x, u, d, q)

    if system == SYM_HYSTERESIS:
        if np.any(x == 0.0):
            raise UndefinedSplit("hysteresis split undefined at x = 0")
        f = -(x**2)
        g = (x + u) / x**2
    elif system == BUDWORM:
        if np.any(x <= 0.0):
            raise UndefinedSplit("budworm split defined for x > 0 only")
        r = params["r"]
        f = -x / (1.0 + x**2)
        g = (r / u) * (1.0 + x**2) * (u - x)
    elif system == TOGGLE_SWITCH:
        x1 = np.clip(x[:, 0], 0.0, None)
        x2 = np.clip(x[:, 1], 0.0, None)
        a1, a2, beta, gamma = u[:, 0], u[:, 1], u[:, 2], u[:, 3]
        f = -np.ones_like(x)
        g = np.stack([a1 / (1.0 + x2**beta), a2 / (1.0 + x1**gamma)], axis=1)
    else:
        raise UndefinedSplit(f"no analytic split for {system!r}")
    if single:
        return f[0], g[0]
    return f, g


def split_target_fn(system: str, params: dict | None = None):
    """Vectorized oracle target map g(x, u) for systems with a split."""

    def g_fn(x, u):
        return analytic_split(system, params, x, u)[1]

    return g_fn


def rhs_fn(system: str, params: dict | None = None):
    return lambda x, u: system_rhs(system, params, x, u)


# --- data protocols ----------------------------------------------------------

@dataclass(frozen=True)
class DataProtocol:
    ic_grid: np.ndarray        # (n_ic, d)
    control_grid: np.ndarray   # (n_u, q)
    horizon: float
    samples_per_traj: int = 51
    substeps: int = 1          # RK4 steps between consecutive samples
    transient_truncate: bool = False
    transient_threshold: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "ic_grid", np.atleast_2d(np.asarray(self.ic_grid, dtype=float)))
        object.__setattr__(
            self, "control_grid", np.atleast_2d(np.asarray(self.control_grid, dtype=float))
        )
        if len(self.ic_grid) == 0 or len(self.control_grid) == 0:
            raise ValueError("protocol grids must be nonempty")
        if self.horizon <= 0 or self.samples_per_traj < 2 or self.substeps < 1:
            raise ValueError("invalid protocol")

    @property
    def n_trajectories(self) -> int:
        return len(self.ic_grid) * len(self.control_grid)

    def meta(self) -> dict:
        return {
            "n_initial_conditions": len(self.ic_grid),
            "n_controls": len(self.control_grid),
            "horizon": self.horizon,
            "samples_per_traj": self.samples_per_traj,
            "substeps": self.substeps,
            "transient_truncate": self.transient_truncate,
            "transient_threshold": self.transient_threshold,
        }


def default_protocol(system: str, paper_scale: bool = False, samples_per_traj: int = 51) -> DataProtocol:
    if system == TWO_TANKS:
        levels = 0.05 * np.arange(21)
        ics = np.stack([levels, levels], axis=1)
        vals = 0.1 * np.arange(1, 10)
        controls = np.array(list(itertools.product(vals, vals)))
        return DataProtocol(ics, controls, horizon=200.0,
                            samples_per_traj=samples_per_traj, substeps=8)
    if system == SYM_HYSTERESIS:
        return DataProtocol(
            np.linspace(-2, 2, 51)[:, None],
            np.linspace(-1, 1, 51)[:, None],
            horizon=0.25,
            samples_per_traj=samples_per_traj,
        )
    if system == BUDWORM:
        return DataProtocol(
            np.linspace(0.1, 10, 51)[:, None],
            np.linspace(4.45, 11.99, 51)[:, None],
            horizon=10.0,
            samples_per_traj=samples_per_traj,
            substeps=2,
        )
    if system == TOGGLE_SWITCH:
        axis = np.linspace(0, 6, 9)
        ics = np.array(list(itertools.product(axis, axis)))
        vals = np.array([0.1, 1.25, 2.5, 3.75, 5.0])
        if not paper_scale:
            vals = vals[::2]  # desk-scale stride over the control grid
        controls = np.array(list(itertools.product(vals, vals, vals, vals)))
        return DataProtocol(ics, controls, horizon=100.0,
                            samples_per_traj=samples_per_traj, substeps=8,
                            transient_truncate=True)
    raise ValueError(f"unknown system {system!r}")


# --- dataset generation ------------------------------------------------------

@dataclass
class Dataset:
    system: str
    params: dict
    trajectories: list[Trajectory]
    protocol_meta: dict = dc_field(default_factory=dict)
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.trajectories)


def transient_time(traj: Trajectory, rel_threshold: float = 1e-3):
    """Smallest time after which the accumulated tail variation stays below
    rel_threshold * (trajectory range). Returns (t_star, converged)."""
    x = traj.states
    rng = float(np.max(np.max(x, axis=0) - np.min(x, axis=0)))
    if rng == 0.0:
        return float(traj.times[0]), True
    step_var = np.linalg.norm(np.diff(x, axis=0), axis=1)
    tail = np.concatenate([np.cumsum(step_var[::-1])[::-1], [0.0]])
    idx = int(np.argmax(tail <= rel_threshold * rng))
    if idx >= len(traj.times) - 1:
        return float(traj.times[-1]), False
    return float(traj.times[idx]), True


def gen_dataset(system: str, protocol: DataProtocol, params: dict | None = None) -> Dataset:
    """One trajectory per (ic, control) pair, ic-major lexicographic order."""
    params = default_params(system) if params is None else params
    d, q = SYSTEM_DIMS[system]
    rhs = rhs_fn(system, params)

    pairs_x = np.repeat(protocol.ic_grid, len(protocol.control_grid), axis=0)
    pairs_u = np.tile(protocol.control_grid, (len(protocol.ic_grid), 1))
    n_sub = (protocol.samples_per_traj - 1) * protocol.substeps
    grid = TimeGrid(0.0, protocol.horizon, n_sub)
    states = rk4_solve_batch(rhs, pairs_x, pairs_u, grid)
    times = grid.times()[:: protocol.substeps]
    sampled = states[:, :: protocol.substeps, :]

    trajectories: list[Trajectory | None] = [
        Trajectory(times, sampled[i], pairs_u[i], traj_id=i, system=system)
        for i in range(len(pairs_x))
    ]
    if protocol.transient_truncate:
        # re-integrate each converged trajectory on [0, t*]; t* is sample-
        # aligned, so trajectories sharing it re-solve in one batched call
        groups: dict[float, list[int]] = {}
        for i, traj in enumerate(trajectories):
            t_star, converged = transient_time(traj, protocol.transient_threshold)
            if converged:
                t_eff = max(t_star, 0.02 * protocol.horizon)
                groups.setdefault(t_eff, []).append(i)
        for t_eff, idxs in groups.items():
            regrid = TimeGrid(0.0, t_eff, n_sub)
            st = rk4_solve_batch(rhs, pairs_x[idxs], pairs_u[idxs], regrid)
            sub_times = regrid.times()[:: protocol.substeps]
            for j, i in enumerate(idxs):
                trajectories[i] = Trajectory(
                    sub_times, st[j, :: protocol.substeps, :], pairs_u[i],
                    traj_id=i, system=system,
                )
    return Dataset(system, params, trajectories, protocol.meta())


def _git_blob_sha1(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def save_dataset(prefix, dataset: Dataset, seed: int | None = None) -> dict:
    """Write <prefix>.csv plus <prefix>.json manifest; returns the manifest."""
    csv_path = f"{prefix}.csv"
    write_trajectories_csv(csv_path, dataset.trajectories)
    with open(csv_path, "rb") as fh:
        digest = _git_blob_sha1(fh.read())
    manifest = {
        "system": dataset.system,
        "params": dataset.params,
        "protocol": dataset.protocol_meta,
        "seed": seed if seed is not None else dataset.seed,
        "content_hash": digest,
        "n_trajectories": len(dataset),
    }
    with open(f"{prefix}.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def load_dataset(prefix) -> Dataset:
    from .integrate import read_trajectories_csv

    with open(f"{prefix}.json") as fh:
        manifest = json.load(fh)
    trajectories = read_trajectories_csv(f"{prefix}.csv")
    return Dataset(
        manifest["system"],
        manifest["params"],
        trajectories,
        manifest.get("protocol", {}),
        manifest.get("seed"),
    )


# --- per-system model architecture and domain --------------------------------

@dataclass(frozen=True)
class ModelRecipe:
    decay_spec: MlpSpec
    target_spec: MlpSpec
    featurizer: Featurizer | None
    domain: tuple


def default_model(system: str) -> ModelRecipe:
    if system == TWO_TANKS:
        return ModelRecipe(
            MlpSpec((2, 20, 20, 20, 2), output_bounds=(-1.0, 0.0)),
            MlpSpec((4, 20, 20, 20, 2), output_bounds=(0.0, 1.0)),
            None,
            ((0.0, 1.0), (0.0, 1.0)),
        )
    if system == SYM_HYSTERESIS:
        return ModelRecipe(
            MlpSpec((1, 20, 20, 1), output_bounds=(-4.0, -0.1)),
            MlpSpec((6, 20, 20, 1), output_bounds=(-2.0, 2.0)),
            Featurizer(a=-1.5, b=1.5, num_modes=4),
            ((-2.0, 2.0),),
        )
    if system == BUDWORM:
        # target bounds widened past the stated (-5, 2): the upper equilibrium
        # branch reaches x ~ 10 and must be representable
        return ModelRecipe(
            MlpSpec((1, 20, 20, 1), output_bounds=(-4.0, -0.1)),
            MlpSpec((6, 20, 20, 1), output_bounds=(-5.0, 12.0)),
            Featurizer(a=-1.0, b=1.5, num_modes=4),
            ((0.1, 10.0),),
        )
    if system == TOGGLE_SWITCH:
        return ModelRecipe(
            MlpSpec((2, 20, 20, 20, 2), output_bounds=(-4.0, -0.01)),
            MlpSpec((6, 20, 20, 20, 2), output_bounds=(0.0, 6.0)),
            None,
            ((0.0, 6.0), (0.0, 6.0)),
        )
    raise ValueError(f"unknown system {system!r}")


def make_untrained_field(system: str, seed: int) -> StructuredField:
    recipe = default_model(system)
    d, q = SYSTEM_DIMS[system]
    return StructuredField(
        dim=d,
        control_dim=q,
        decay_spec=recipe.decay_spec,
        decay_params=init_params(recipe.decay_spec, seed),
        target_spec=recipe.target_spec,
        target_params=init_params(recipe.target_spec, seed + 1),
        featurizer=recipe.featurizer,
        domain=np.asarray(recipe.domain),
    )


def candidate_models(system: str) -> list[tuple[str, ModelRecipe]]:
    """Architecture grid for cross validation; first entry is the default."""
    base = default_model(system)
    d, q = SYSTEM_DIMS[system]
    feat_len = base.featurizer.out_dim if base.featurizer is not None else d
    deeper_f = MlpSpec((d, 20, 20, 20, d), output_bounds=base.decay_spec.output_bounds)
    deeper_g = MlpSpec(
        (feat_len + q, 20, 20, 20, d), output_bounds=base.target_spec.output_bounds
    )
    wider_f = MlpSpec((d, 32, 32, d), output_bounds=base.decay_spec.output_bounds)
    wider_g = MlpSpec((feat_len + q, 32, 32, d), output_bounds=base.target_spec.output_bounds)
    names = {
        "default": ModelRecipe(base.decay_spec, base.target_spec, base.featurizer, base.domain),
        "deeper": ModelRecipe(deeper_f, deeper_g, base.featurizer, base.domain),
        "wider": ModelRecipe(wider_f, wider_g, base.featurizer, base.domain),
    }
    # drop duplicates of the default topology (tanks/toggle default is deep)
    out = [("default", names["default"])]
    for key in ("deeper", "wider"):
        alt = names[key]
        if alt.decay_spec != base.decay_spec or alt.target_spec != base.target_spec:
            out.append((key, alt))
    return out


# --- training recipes ---------------------------------------------------------

def default_train_recipe(system: str):
    """Objective and hyperparameters per system: (full-data config, cv epochs)."""
    from .training import GRAD_MATCHING, TRAJ_MATCHING, TrainConfig

    if system == TWO_TANKS:
        return TrainConfig(GRAD_MATCHING, epochs=1000, batch_size=50, lr0=0.01), 1000
    if system == SYM_HYSTERESIS:
        return TrainConfig(TRAJ_MATCHING, epochs=200, batch_size=50, lr0=0.01), 200
    if system == BUDWORM:
        # cross validation runs 200 epochs; the final model trains for 500
        return TrainConfig(GRAD_MATCHING, epochs=500, batch_size=50, lr0=0.1), 200
    if system == TOGGLE_SWITCH:
        return TrainConfig(GRAD_MATCHING, epochs=500, batch_size=200, lr0=0.01), 500
    raise ValueError(f"unknown system {system!r}")


# --- feedback-control experiment recipes --------------------------------------

@dataclass(frozen=True)
class ControlRecipe:
    k: int
    eta: float
    sigma: float
    t_per_target: float
    step: float                       # Euler-Maruyama step
    u0: tuple
    constraints: tuple = ()           # per-channel smooth-Heaviside terms
    magnitude_definition: str = "range"


def default_control_recipe(system: str) -> ControlRecipe:
    from .control import interval_gate, lower_gate

    if system == TWO_TANKS:
        gate = interval_gate(0.05, 0.95, 50.0)
        return ControlRecipe(k=10, eta=0.1, sigma=0.01, t_per_target=500.0, step=0.25,
                             u0=(0.5, 0.5), constraints=(gate, gate))
    if system == SYM_HYSTERESIS:
        return ControlRecipe(k=1, eta=5.0, sigma=0.03, t_per_target=10.0, step=0.005,
                             u0=(0.0,))
    if system == BUDWORM:
        # growth near the lower branch is slow (dx/dt ~ 0.05), so climbing to
        # high targets needs a longer window than the hysteresis benchmark
        return ControlRecipe(k=1, eta=20.0, sigma=0.02, t_per_target=50.0, step=0.005,
                             u0=(8.22,))
    if system == TOGGLE_SWITCH:
        return ControlRecipe(
            k=1, eta=1.0, sigma=0.05, t_per_target=20.0, step=0.01,
            u0=(2.55, 2.55, 3.05, 3.05),
            constraints=(lower_gate(0.1, 200.0), lower_gate(0.1, 200.0),
                         lower_gate(1.1, 200.0), lower_gate(1.1, 200.0)),
            magnitude_definition="iqr",
        )
    raise ValueError(f"unknown system {system!r}")


def system_magnitude(system: str, trajectories=None) -> np.ndarray:
    """Normalization for nRMSE: output range where known, IQR otherwise."""
    from .analysis import iqr

    if system == TWO_TANKS:
        return np.array([1.0, 1.0])
    if system == SYM_HYSTERESIS:
        return np.array([3.0])       # targets drawn from [-1.5, 1.5]
    if system == BUDWORM:
        return np.array([9.9])       # state range [0.1, 10]
    if system == TOGGLE_SWITCH:
        if not trajectories:
            raise ValueError("toggle magnitude is the IQR of observed trajectories")
        stacked = np.concatenate([t.states for t in trajectories])
        return np.array([iqr(stacked[:, i]) for i in range(stacked.shape[1])])
    raise ValueError(f"unknown system {system!r}")


def steady_state_of_true_system(system: str, u, params: dict | None = None,
                                x0=None, horizon: float = 1000.0) -> np.ndarray:
    """Settle the true dynamics under constant control; returns the end state."""
    d, q = SYSTEM_DIMS[system]
    if x0 is None:
        x0 = np.full(d, 0.5)
    grid = TimeGrid(0.0, horizon, max(int(horizon / 0.25), 100))
    states = rk4_solve_batch(rhs_fn(system, params), np.asarray(x0, dtype=float)[None, :],
                             np.atleast_1d(np.asarray(u, dtype=float))[None, :], grid)
    return states[0, -1]


def sample_targets(system: str, n: int, seed, params: dict | None = None) -> np.ndarray:
    """Randomized reachable targets per the experiment designs.

    Tanks and toggle targets come from settling the true dynamics under
    randomly drawn control configurations; hysteresis and budworm targets
    are drawn uniformly from the stated state ranges.
    """
    rng = np.random.default_rng(seed)
    if system == SYM_HYSTERESIS:
        return rng.uniform(-1.5, 1.5, size=(n, 1))
    if system == BUDWORM:
        return rng.uniform(0.1, 10.0, size=(n, 1))
    if system == TWO_TANKS:
        # draw generating controls over the training grid's range so target
        # optima sit inside the gated box rather than on its boundary
        targets = np.empty((n, 2))
        for i in range(n):
            u = rng.uniform(0.1, 0.9, size=2)
            targets[i] = steady_state_of_true_system(system, u, params)
        return targets
    if system == TOGGLE_SWITCH:
        targets = np.empty((n, 2))
        for i in range(n):
            x0 = rng.uniform(0.0, 6.0, size=2)
            u = rng.uniform(0.0, 5.0, size=4)
            targets[i] = steady_state_of_true_system(system, u, params, x0=x0, horizon=100.0)
        return targets
    raise ValueError(f"unknown system {system!r}")


def run_control_trial(system: str, target_map, targets: np.ndarray,
                      recipe: ControlRecipe, seed, params: dict | None = None,
                      record_every: int = 1):
    """One trial: steer the true (stochastic) system through the target list."""
    from .control import ControlPolicyCfg, feedback_simulate

    schedule = [(i * recipe.t_per_target, targets[i]) for i in range(len(targets))]
    total = recipe.t_per_target * len(targets)
    grid = TimeGrid(0.0, total, int(round(total / recipe.step)))
    return feedback_simulate(
        plant_rhs=rhs_fn(system, params),
        target_map=target_map,
        policy=ControlPolicyCfg(k=recipe.k, eta=recipe.eta, constraints=recipe.constraints),
        targets=schedule,
        x0=_trial_start(system),
        u0=np.asarray(recipe.u0, dtype=float),
        grid=grid,
        sigma=recipe.sigma,
        seed=seed,
        record_every=record_every,
    )


def _trial_start(system: str) -> np.ndarray:
    d, _ = SYSTEM_DIMS[system]
    if system == SYM_HYSTERESIS:
        return np.zeros(1)
    if system == BUDWORM:
        return np.array([5.0])
    return np.full(d, 0.5)


def evaluate_trace(trace, magnitude, window_fraction: float = 0.2):
    """Per-target nRMSE over the final window_fraction of each target span."""
    from .analysis import nrmse

    per_target = []
    for i, (_, ref) in enumerate(trace.targets):
        mask = trace.target_index == i
        idx = np.nonzero(mask)[0]
        if len(idx) == 0:
            continue
        tail = idx[int(np.ceil(len(idx) * (1.0 - window_fraction))):]
        per_target.append(nrmse(trace.states[tail], ref, magnitude))
    return np.asarray(per_target)
