"""Command-line orchestration: data generation, training, cross validation,
simulation, equilibrium/bifurcation analysis, and feedback-control trials.

Every command is driven by explicit seeds and an optional flat JSON config
file (CLI flags override file values), and writes machine-readable CSV/JSON
outputs only. Exit codes: 0 success, 2 configuration error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, benchmarks, field as field_mod, training
from .integrate import TimeGrid, Trajectory, rk4_solve_batch, write_trajectories_csv
from .nnet import NonFiniteError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class ConfigError(ValueError):
    pass


def _load_config(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config file: {err}")
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file is not valid JSON: {err}")
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a flat JSON object")
    return doc


def _merge_config(args: argparse.Namespace, parser_defaults: dict) -> argparse.Namespace:
    """File values fill in only where the CLI flag was left at its default."""
    if not getattr(args, "config", None):
        return args
    doc = _load_config(args.config)
    for key, value in doc.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise ConfigError(f"unknown config key {key!r}")
        if getattr(args, attr) == parser_defaults.get(attr):
            setattr(args, attr, value)
    return args


def _outdir(args) -> Path:
    out = Path(args.out)
    if not out.exists():
        raise ConfigError(f"output directory does not exist: {out}")
    if not out.is_dir():
        raise ConfigError(f"output path is not a directory: {out}")
    return out


def _check_system(name: str) -> str:
    if name not in benchmarks.SYSTEMS:
        raise ConfigError(
            f"unknown system {name!r}; choose from {', '.join(benchmarks.SYSTEMS)}"
        )
    return name


def _protocol(args) -> benchmarks.DataProtocol:
    proto = benchmarks.default_protocol(
        args.system, paper_scale=args.paper_scale, samples_per_traj=args.samples
    )
    return proto


def _json_dump(path: Path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _thread_map(fn, items, threads: int):
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# --- commands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    system = _check_system(args.system)
    out = _outdir(args)
    proto = _protocol(args)
    dataset = benchmarks.gen_dataset(system, proto)
    dataset.seed = args.seed
    manifest = benchmarks.save_dataset(out / f"{system}-data", dataset, seed=args.seed)
    print(f"wrote {manifest['n_trajectories']} trajectories to {out}/{system}-data.csv")
    return EXIT_OK


def _load_dataset_arg(args) -> benchmarks.Dataset:
    prefix = args.data
    if prefix is None:
        raise ConfigError("--data PREFIX is required (output of gen-data)")
    if prefix.endswith(".csv") or prefix.endswith(".json"):
        prefix = prefix.rsplit(".", 1)[0]
    try:
        return benchmarks.load_dataset(prefix)
    except OSError as err:
        raise ConfigError(f"cannot load dataset {prefix!r}: {err}")


def _train_config(args, system) -> tuple[training.TrainConfig, int]:
    cfg, cv_epochs = benchmarks.default_train_recipe(system)
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
        cv_epochs = args.epochs
    if args.batch_size is not None:
        cfg = replace(cfg, batch_size=args.batch_size)
    if args.lr is not None:
        cfg = replace(cfg, lr0=args.lr)
    cfg = replace(cfg, seed=args.seed, folds=args.folds, restarts=args.restarts)
    return cfg, cv_epochs


def cmd_train(args) -> int:
    out = _outdir(args)
    dataset = _load_dataset_arg(args)
    system = _check_system(args.system or dataset.system)
    cfg, _ = _train_config(args, system)
    result = training.train(
        benchmarks.make_untrained_field(system, args.seed), dataset.trajectories, cfg
    )
    field_mod.save_field(out / f"{system}-field.json", result.field, seed=args.seed)
    _json_dump(out / f"{system}-train-report.json", result.report(cfg))
    print(f"best loss {result.best_loss:.6e}; checkpoint {out}/{system}-field.json")
    return EXIT_OK


def cmd_cv(args) -> int:
    out = _outdir(args)
    dataset = _load_dataset_arg(args)
    system = _check_system(args.system or dataset.system)
    cfg, cv_epochs = _train_config(args, system)

    candidates = []
    for name, recipe in benchmarks.candidate_models(system):
        def builder(seed, recipe=recipe):
            d, q = benchmarks.SYSTEM_DIMS[system]
            from .nnet import init_params

            return field_mod.StructuredField(
                dim=d,
                control_dim=q,
                decay_spec=recipe.decay_spec,
                decay_params=init_params(recipe.decay_spec, seed),
                target_spec=recipe.target_spec,
                target_params=init_params(recipe.target_spec, seed + 1),
                featurizer=recipe.featurizer,
                domain=np.asarray(recipe.domain),
            )

        candidates.append((name, builder))

    report = training.cross_validate(
        dataset.trajectories, candidates, cfg, cv_epochs=cv_epochs
    )
    _json_dump(out / f"{system}-cv-report.json", report.to_dict())
    if report.final is not None:
        field_mod.save_field(out / f"{system}-field.json", report.final.field, seed=args.seed)
    print(f"selected architecture: {report.selected}; report {out}/{system}-cv-report.json")
    return EXIT_OK


def _field_for_analysis(args, system):
    """Learned checkpoint, or the analytic split when --oracle is set."""
    if args.oracle:
        if system == benchmarks.TWO_TANKS:
            raise ConfigError("the mixing tanks have no analytic split; train a model")
        return benchmarks.split_target_fn(system), None
    if not args.field:
        raise ConfigError("--field CHECKPOINT is required unless --oracle is set")
    try:
        fld = field_mod.load_field(args.field)
    except OSError as err:
        raise ConfigError(f"cannot load field checkpoint: {err}")
    return (lambda x, u: field_mod.eval_target(fld, x, u)), fld


def cmd_simulate(args) -> int:
    system = _check_system(args.system)
    out = _outdir(args)
    proto = _protocol(args)
    horizon = args.horizon if args.horizon is not None else proto.horizon
    grid = TimeGrid(0.0, horizon, max(1, (proto.samples_per_traj - 1) * proto.substeps))

    pairs_x = np.repeat(proto.ic_grid, len(proto.control_grid), axis=0)
    pairs_u = np.tile(proto.control_grid, (len(proto.ic_grid), 1))
    if args.limit is not None:
        pairs_x, pairs_u = pairs_x[: args.limit], pairs_u[: args.limit]

    if args.oracle:
        rhs = benchmarks.rhs_fn(system)
        tag = "oracle"
    else:
        if not args.field:
            raise ConfigError("--field CHECKPOINT is required unless --oracle is set")
        fld = field_mod.load_field(args.field)
        rhs = lambda x, u: field_mod.eval_velocity(fld, x, u)
        tag = "model"

    states = rk4_solve_batch(rhs, pairs_x, pairs_u, grid)
    times = grid.times()[:: proto.substeps]
    trajs = [
        Trajectory(times, states[i, :: proto.substeps], pairs_u[i], traj_id=i, system=system)
        for i in range(len(pairs_x))
    ]
    path = out / f"{system}-simulate-{tag}.csv"
    write_trajectories_csv(path, trajs)
    print(f"wrote {len(trajs)} simulated trajectories to {path}")
    return EXIT_OK


def cmd_equilibria(args) -> int:
    system = _check_system(args.system)
    out = _outdir(args)
    target_fn, fld = _field_for_analysis(args, system)
    d, q = benchmarks.SYSTEM_DIMS[system]
    u = np.asarray(
        [float(v) for v in args.control.split(",")] if args.control else
        benchmarks.default_control_recipe(system).u0,
        dtype=float,
    )
    if u.shape != (q,):
        raise ConfigError(f"--control needs {q} comma-separated values")
    box = benchmarks.default_model(system).domain

    vel = _velocity_fn(args, system, fld)
    rows = []
    if d == 1:
        if args.oracle:
            # rhs roots coincide with the split's but stay finite everywhere
            res_fn = lambda x: -float(benchmarks.system_rhs(system, None, [x], u)[0])
        else:
            res_fn = lambda x: float(x - target_fn(np.array([x]), u)[0])
        roots = analysis.find_equilibria_1d(res_fn, box[0], n_scan=args.scan)
        for r in roots:
            stab = analysis.classify_stability(lambda xv: np.atleast_1d(vel(xv, u)), [r])
            rows.append((r, stab, abs(res_fn(r))))
    else:
        if args.oracle:
            res_fn = lambda x: -np.asarray(benchmarks.system_rhs(system, None, x, u))
        else:
            res_fn = lambda x: np.asarray(x) - target_fn(np.asarray(x), u)
        roots, failed = analysis.find_equilibria_nd(res_fn, box, starts_per_axis=args.scan_nd)
        for r in roots:
            stab = analysis.classify_stability(lambda xv: np.atleast_1d(vel(xv, u)), r)
            rows.append((*r, stab, float(np.linalg.norm(res_fn(r)))))

    path = out / f"{system}-equilibria.json"
    _json_dump(path, {"system": system, "control": u.tolist(),
                      "equilibria": [list(map(_jsonable, row)) for row in rows]})
    print(f"found {len(rows)} equilibria; wrote {path}")
    return EXIT_OK


def _jsonable(v):
    return v if isinstance(v, str) else float(v)


def _velocity_fn(args, system, fld):
    if args.oracle or fld is None:
        return lambda x, u: benchmarks.system_rhs(system, None, np.atleast_1d(x), u)
    return lambda x, u: field_mod.eval_velocity(fld, np.atleast_1d(x), u)


def cmd_bifurcate(args) -> int:
    system = _check_system(args.system)
    out = _outdir(args)
    d, q = benchmarks.SYSTEM_DIMS[system]
    if d != 1:
        raise ConfigError("bifurcation sweeps support scalar-state systems; "
                          "use `equilibria` per control setting for 2-d systems")
    target_fn, fld = _field_for_analysis(args, system)
    proto = benchmarks.default_protocol(system)
    lo_u, hi_u = float(proto.control_grid.min()), float(proto.control_grid.max())
    grid = np.linspace(lo_u, hi_u, args.points)
    interval = benchmarks.default_model(system).domain[0]

    if args.oracle:
        # the true rhs has the same zeros as the split residual but stays
        # finite where the split blows up
        residual_of = lambda c: (
            lambda x: -float(benchmarks.system_rhs(system, None, [x], [c])[0])
        )
    else:
        residual_of = lambda c: (lambda x: float(x - target_fn(np.array([x]), np.array([c]))[0]))
    vel = _velocity_fn(args, system, fld)
    velocity_of = lambda c: (lambda x: float(np.atleast_1d(vel([x], np.array([c])))[0]))

    diagram = analysis.bifurcation_sweep(residual_of, velocity_of, grid, interval,
                                         n_scan=args.scan)
    rows = analysis.sweep_to_rows(diagram)
    csv_path = out / f"{system}-bifurcation.csv"
    with open(csv_path, "w") as fh:
        fh.write("control_value," + ",".join(f"x_{i}" for i in range(d)) + ",stability\n")
        for row in rows:
            cells = [format(v, ".17g") for v in row[:-1]] + [row[-1]]
            fh.write(",".join(cells) + "\n")
    _json_dump(out / f"{system}-tipping.json",
               {"system": system, "tipping_points": diagram.tipping_points})
    print(f"swept {len(grid)} control values; tipping points: "
          f"{[round(t, 4) for t in diagram.tipping_points]}")
    return EXIT_OK


def cmd_control(args) -> int:
    system = _check_system(args.system)
    out = _outdir(args)
    target_map_fn, fld = _field_for_analysis(args, system)
    target_map = fld if fld is not None else target_map_fn

    recipe = benchmarks.default_control_recipe(system)
    if args.k is not None:
        recipe = replace(recipe, k=args.k)
    if args.eta is not None:
        recipe = replace(recipe, eta=args.eta)
    if args.sigma is not None:
        recipe = replace(recipe, sigma=args.sigma)
    if args.t_per_target is not None:
        recipe = replace(recipe, t_per_target=args.t_per_target)

    if recipe.magnitude_definition == "iqr":
        dataset = _load_dataset_arg(args)
        magnitude = benchmarks.system_magnitude(system, dataset.trajectories)
    else:
        magnitude = benchmarks.system_magnitude(system)

    def one_trial(trial):
        targets = benchmarks.sample_targets(system, args.targets, seed=[args.seed, 7, trial])
        trace = benchmarks.run_control_trial(
            system, target_map, targets, recipe, seed=[args.seed, 11, trial],
            record_every=args.record_every,
        )
        return trace, benchmarks.evaluate_trace(trace, magnitude)

    results = _thread_map(one_trial, range(args.trials), args.threads)

    csv_path = out / f"{system}-control-trials.csv"
    d, q = benchmarks.SYSTEM_DIMS[system]
    with open(csv_path, "w") as fh:
        header = (["trial_id", "target_id", "t"]
                  + [f"x_{i}" for i in range(d)] + [f"u_{i}" for i in range(q)]
                  + ["phase"])
        fh.write(",".join(header) + "\n")
        for trial, (trace, _) in enumerate(results):
            for j in range(len(trace.times)):
                row = ([str(trial), str(int(trace.target_index[j])),
                        format(trace.times[j], ".17g")]
                       + [format(v, ".17g") for v in trace.states[j]]
                       + [format(v, ".17g") for v in trace.controls[j]]
                       + [str(int(trace.target_index[j]))])
                fh.write(",".join(row) + "\n")

    per_target = [v for _, vals in results for v in vals]
    report = analysis.summarize_targets(per_target, magnitude, recipe.magnitude_definition)
    _json_dump(out / f"{system}-control-summary.json", report.to_dict())
    print(f"nRMSE mean per dim: {np.round(report.nrmse_mean, 5).tolist()}")
    print(f"within 5%: {np.round(report.within_5pct, 3).tolist()}  "
          f"within 2%: {np.round(report.within_2pct, 3).tolist()}")
    return EXIT_OK


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stabledyn",
        description="Learn stable multistable dynamics and control them "
                    "through the learned equilibrium map.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, model=False):
        p.add_argument("--system", required=False, help="benchmark system id")
        p.add_argument("--out", default=".", help="output directory (must exist)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1,
                       help="worker fan-out; 1 guarantees bitwise determinism")
        p.add_argument("--config", help="flat JSON config file; flags override")
        p.add_argument("--paper-scale", action="store_true",
                       help="full experiment sizes instead of desk-scale defaults")
        p.add_argument("--samples", type=int, default=51,
                       help="observation samples per trajectory")
        if data:
            p.add_argument("--data", help="dataset prefix written by gen-data")
        if model:
            p.add_argument("--field", help="field checkpoint JSON")
            p.add_argument("--oracle", action="store_true",
                           help="use the analytic split instead of a checkpoint")

    p = sub.add_parser("gen-data", help="generate a benchmark dataset")
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a structured field on a dataset")
    common(p, data=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--restarts", type=int, default=3)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("cv", help="k-fold cross validation over architectures")
    common(p, data=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--restarts", type=int, default=3)
    p.set_defaults(fn=cmd_cv)

    p = sub.add_parser("simulate", help="integrate trajectories on the protocol grid")
    common(p, model=True)
    p.add_argument("--horizon", type=float)
    p.add_argument("--limit", type=int, help="only the first N (ic, control) pairs")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("equilibria", help="equilibria for one control setting")
    common(p, model=True)
    p.add_argument("--control", help="comma-separated control vector")
    p.add_argument("--scan", type=int, default=400)
    p.add_argument("--scan-nd", type=int, default=6)
    p.set_defaults(fn=cmd_equilibria)

    p = sub.add_parser("bifurcate", help="equilibrium branches over a control sweep")
    common(p, model=True)
    p.add_argument("--points", type=int, default=401)
    p.add_argument("--scan", type=int, default=400)
    p.set_defaults(fn=cmd_bifurcate)

    p = sub.add_parser("control", help="stochastic feedback-control trials")
    common(p, data=True, model=True)
    p.add_argument("--k", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--t-per-target", type=float)
    p.add_argument("--targets", type=int, default=10)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--record-every", type=int, default=20)
    p.set_defaults(fn=cmd_control)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    defaults = {
        action.dest: action.default
        for action in parser._subparsers._group_actions[0].choices[args.command]._actions
    }
    try:
        args = _merge_config(args, defaults)
        if args.system is None and args.command in ("gen-data", "simulate", "equilibria",
                                                    "bifurcate", "control"):
            raise ConfigError("--system is required")
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, training.TrainingDiverged) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
