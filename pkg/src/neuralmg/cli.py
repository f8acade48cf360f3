"""Command-line interface: ``neuralmg <command> [--config FILE] [--key value ...]``.

Every command reads an optional plain-text ``key = value`` config file,
applies the ``--key value`` flags on top, and validates the result before
touching the filesystem.  Exit status is 0 on success, 1 when the command
fails at run time and 2 for an invalid configuration.
"""

import argparse
import os
import sys
import tempfile
from contextlib import contextmanager

import numpy as np

from . import dataset, fem, mesh as meshmod, multigrid, nn
from .errors import NeuralMGError, TrainingFailure
from .l2proj import intersection_counter


class ConfigError(Exception):
    pass


def _int(v):
    return int(v)


def _float(v):
    return float(v)


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v):
    if isinstance(v, (list, tuple)):
        return [int(x) for x in v]
    return [int(x) for x in str(v).replace(" ", "").split(",") if x]


def _paths(v):
    if isinstance(v, (list, tuple)):
        return list(v)
    return [x.strip() for x in str(v).split(",") if x.strip()]


def _choice(*options):
    def parse(v):
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return v
    return parse


REQUIRED = object()

_SOLVER_KEYS = {
    "method": (_choice("sgmg", "neural"), "sgmg"),
    "dimension": (_choice("1", "2"), "1"),
    "n": (_int, 128),
    "levels": (_int, 2),
    "gamma": (_float, 0.0),
    "mesh_seed": (_int, 0),
    "mesh": (str, None),
    "models": (_paths, []),
    "coarse_features": (_choice(*multigrid.COARSE_FEATURES), "assembled"),
    "smoother": (_choice(*multigrid.SMOOTHERS), "jacobi"),
    "pre_sweeps": (_int, 2),
    "post_sweeps": (_int, 2),
    "omega": (_float, 2.0 / 3.0),
    "tol": (_float, 1e-8),
    "max_iter": (_int, 100),
    "rhs": (_choice("one", "zero"), "one"),
}

SCHEMAS = {
    "gen-data": {
        "dimension": (_choice("1", "2"), "1"),
        "patch_size": (_int, None),
        "schedule": (_choice("linear", "refinement"), "linear"),
        "n0": (_int, 10),
        "step": (_int, 10),
        "count": (_int, 20),
        "factor": (_int, 2),
        "n_levels": (_int, 5),
        "records_per_class": (_int, 1000),
        "seed": (_int, 0),
        "gamma": (_float, 0.25),
        "output": (str, REQUIRED),
    },
    "train": {
        "data": (str, REQUIRED),
        "output": (str, REQUIRED),
        "history": (str, None),
        "hidden": (_ints, [64, 64]),
        "alpha": (_float, 0.5),
        "beta": (_float, 0.5),
        "epochs": (_int, 100),
        "batch_size": (_int, 64),
        "lr": (_float, 1e-3),
        "lr_final": (_float, 1e-5),
        "seed": (_int, 0),
        "scaled": (_bool, True),
    },
    "solve": dict(_SOLVER_KEYS, output=(str, None), residuals=(str, None)),
    "bench": dict(
        {k: v for k, v in _SOLVER_KEYS.items() if k not in ("method", "n", "mesh", "rhs")},
        sizes=(_ints, [64, 128, 256]),
        output=(str, REQUIRED),
        plot_dir=(str, None),
    ),
    "inspect": {
        "path": (str, REQUIRED),
        "kind": (_choice("auto", "mesh", "matrix", "dataset", "model"), "auto"),
    },
}


def read_config(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve(command, file_values, flag_values):
    """Merge defaults, config file and flags, then convert and validate."""
    schema = SCHEMAS[command]
    unknown = sorted(set(file_values) - set(schema))
    if unknown:
        raise ConfigError(f"unknown key(s) for {command}: {', '.join(unknown)}")
    merged = {k: d for k, (_, d) in schema.items()}
    merged.update(file_values)
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    cfg = {}
    for key, (parse, default) in schema.items():
        value = merged[key]
        if value is REQUIRED:
            raise ConfigError(f"missing required key {key!r}")
        if value is None or (value is default and not isinstance(default, str)):
            cfg[key] = value
            continue
        try:
            cfg[key] = parse(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    _VALIDATORS[command](cfg)
    return cfg


def _need(cond, message):
    if not cond:
        raise ConfigError(message)


def _check_output(path):
    parent = os.path.dirname(os.path.abspath(path))
    _need(os.path.isdir(parent), f"output directory {parent} does not exist")


def _validate_gen(cfg):
    cfg["dimension"] = int(cfg["dimension"])
    for key in ("n0", "step", "count", "n_levels", "records_per_class"):
        _need(cfg[key] >= 1, f"{key} must be >= 1")
    _need(cfg["factor"] in (2, 4), "factor must be 2 or 4")
    _need(0.0 <= cfg["gamma"] < 0.5, "gamma must lie in [0, 0.5)")
    if cfg["patch_size"] is None:
        cfg["patch_size"] = dataset.INTERIOR_PATCH_SIZE[cfg["dimension"]]
    try:
        dataset.family_layout(cfg["dimension"], cfg["patch_size"])
        schedule = _schedule(cfg)
        smallest = min(schedule)
        dataset.class_mesh(cfg["dimension"], smallest)
    except NeuralMGError as exc:
        raise ConfigError(str(exc)) from None
    _need(smallest >= 4, "every class needs at least 4 elements")
    _check_output(cfg["output"])


def _schedule(cfg):
    if cfg["schedule"] == "linear":
        return dataset.class_schedule_linear(cfg["n0"], cfg["step"], cfg["count"])
    return dataset.class_schedule_refinement(cfg["n0"], cfg["factor"], cfg["n_levels"])


def _validate_train(cfg):
    _need(os.path.isfile(cfg["data"]), f"dataset {cfg['data']} does not exist")
    _need(all(h >= 1 for h in cfg["hidden"]), "hidden layer widths must be >= 1")
    for key in ("alpha", "beta"):
        _need(0.0 < cfg[key] < 1.0, f"{key} must lie in (0, 1)")
    _need(cfg["epochs"] >= 0, "epochs must be >= 0")
    _need(cfg["batch_size"] >= 1, "batch_size must be >= 1")
    _need(cfg["lr"] > 0, "lr must be positive")
    _need(0 < cfg["lr_final"] <= cfg["lr"], "lr_final must lie in (0, lr]")
    _check_output(cfg["output"])
    if cfg["history"] is None:
        cfg["history"] = os.path.splitext(cfg["output"])[0] + ".history.csv"
    _check_output(cfg["history"])


def _validate_solver(cfg, sizes):
    cfg["dimension"] = int(cfg["dimension"])
    _need(cfg["levels"] >= 2, "levels must be >= 2")
    _need(0.0 <= cfg["gamma"] < 0.5, "gamma must lie in [0, 0.5)")
    _need(cfg["tol"] > 0, "tol must be positive")
    _need(cfg["max_iter"] >= 0, "max_iter must be >= 0")
    _need(cfg["pre_sweeps"] >= 0 and cfg["post_sweeps"] >= 0, "sweeps must be >= 0")
    _need(0.0 < cfg["omega"] <= 2.0, "omega must lie in (0, 2]")
    stride = 2 ** (cfg["levels"] - 1)
    for n in sizes:
        _need(n >= 2 * stride and n % stride == 0,
              f"n={n} cannot be coarsened {cfg['levels'] - 1} times")
    for path in cfg["models"]:
        _need(os.path.isfile(path), f"model checkpoint {path} does not exist")


def _validate_solve(cfg):
    if cfg["mesh"] is not None:
        _need(os.path.isfile(cfg["mesh"]), f"mesh {cfg['mesh']} does not exist")
        _validate_solver(cfg, [])
    else:
        _validate_solver(cfg, [cfg["n"]])
    if cfg["method"] == "neural":
        _need(cfg["models"], "method=neural needs models")
    for key in ("output", "residuals"):
        if cfg[key] is not None:
            _check_output(cfg[key])


def _validate_bench(cfg):
    _need(cfg["sizes"], "sizes must not be empty")
    _validate_solver(cfg, cfg["sizes"])
    _need(cfg["models"], "bench needs models for the neural runs")
    _check_output(cfg["output"])
    if cfg["plot_dir"] is not None:
        _need(os.path.isdir(cfg["plot_dir"]), f"plot_dir {cfg['plot_dir']} does not exist")


def _validate_inspect(cfg):
    _need(os.path.isfile(cfg["path"]), f"{cfg['path']} does not exist")


_VALIDATORS = {
    "gen-data": _validate_gen,
    "train": _validate_train,
    "solve": _validate_solve,
    "bench": _validate_bench,
    "inspect": _validate_inspect,
}


@contextmanager
def _atomic(path, mode="w"):
    """Write to a temporary file next to ``path`` and rename on success."""
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def cmd_gen_data(cfg, out=sys.stdout):
    schedule = _schedule(cfg)
    manifest, records = dataset.build_dataset(
        cfg["dimension"], schedule, cfg["records_per_class"], cfg["seed"],
        schedule_kind=cfg["schedule"], patch_size=cfg["patch_size"], gamma=cfg["gamma"])
    with _atomic(cfg["output"]) as tmp:
        dataset.write_dataset(tmp, manifest, records)
    print(f"wrote {manifest.n_records} records to {cfg['output']}", file=out)
    print(f"dimension={manifest.dimension} patch_size={manifest.patch_size} "
          f"schedule={manifest.schedule_kind} seed={manifest.seed}", file=out)
    print(dataset.balance_diagnostic(manifest).summary(), file=out)
    return 0


def cmd_train(cfg, out=sys.stdout):
    manifest, records = dataset.read_dataset(cfg["data"])
    train_set, val_set, test_set = dataset.split(records, cfg["seed"])
    X, Y, aux = dataset.as_arrays(train_set)
    sizes = (X.shape[1],) + tuple(cfg["hidden"]) + (Y.shape[1],)
    model = nn.init_mlp(sizes, cfg["seed"], manifest.patch_size, manifest.dimension,
                        scaled=cfg["scaled"])
    loss_cfg = nn.LossConfig(cfg["alpha"], cfg["beta"])
    val = dataset.as_arrays(val_set) if val_set else None
    best, history = nn.train(model, (X, Y, aux), val, loss_cfg, epochs=cfg["epochs"],
                             batch_size=cfg["batch_size"], seed=cfg["seed"], lr=cfg["lr"],
                             lr_final=cfg["lr_final"])
    best.metadata.update(alpha=cfg["alpha"], beta=cfg["beta"], epochs=cfg["epochs"])
    with _atomic(cfg["output"]) as tmp, _atomic(cfg["history"]) as tmp_hist:
        nn.save_model(tmp, best)
        nn.write_history(tmp_hist, history)
    print(f"saved patch-size {manifest.patch_size} model {sizes} to {cfg['output']}", file=out)
    if test_set:
        Xt, Yt, At = dataset.as_arrays(test_set)
        pred = nn.forward(best, Xt)
        q = pred.reshape(len(Xt), manifest.patch_size, -1) / At[:, :, None]
        print(f"test loss {nn.loss(Yt, pred, At, loss_cfg):.6g}  "
              f"mean |row sum - 1| {np.abs(q.sum(axis=2) - 1.0).mean():.3e}", file=out)
    return 0


def load_models(paths):
    """Checkpoints keyed by patch size; later files win on duplicates."""
    models = {}
    for path in paths:
        model = nn.load_model(path)
        models[model.patch_size] = model
    return models


def _fine_mesh(cfg, n):
    if cfg.get("mesh"):
        return meshmod.read_mesh(cfg["mesh"])
    if cfg["dimension"] == 1:
        base = meshmod.uniform_mesh_1d(n)
    else:
        base = meshmod.structured_tri_mesh(n, n)
    if cfg["gamma"] > 0:
        base = meshmod.jitter_mesh(base, cfg["gamma"], cfg["mesh_seed"])
    return base


def _smoother(cfg):
    return multigrid.SmootherConfig(cfg["smoother"], cfg["pre_sweeps"], cfg["post_sweeps"],
                                    cfg["omega"])


def build(method, fine, cfg, models=None):
    if method == "sgmg":
        return multigrid.build_hierarchy_sgmg(multigrid.mesh_sequence(fine, cfg["levels"]),
                                              _smoother(cfg))
    return multigrid.build_hierarchy_neural(fine, models, cfg["levels"], _smoother(cfg),
                                            coarse_features=cfg["coarse_features"])


def run_solve(method, fine, cfg, models=None, zero_rhs=False):
    hier = build(method, fine, cfg, models)
    b = multigrid.poisson_rhs(hier)
    if zero_rhs:
        b = np.zeros_like(b)
    result = multigrid.solve(hier, b, cfg["tol"], cfg["max_iter"])
    return hier, result


def cmd_solve(cfg, out=sys.stdout):
    models = load_models(cfg["models"]) if cfg["method"] == "neural" else None
    fine = _fine_mesh(cfg, cfg["n"])
    hier, result = run_solve(cfg["method"], fine, cfg, models, cfg["rhs"] == "zero")
    row = multigrid.report_row(cfg["method"], hier, result)
    if cfg["output"]:
        with _atomic(cfg["output"]) as tmp:
            multigrid.write_report(tmp, [row])
    else:
        multigrid.write_report(out, [row])
    if cfg["residuals"]:
        with _atomic(cfg["residuals"]) as tmp, open(tmp, "w", encoding="utf-8") as fh:
            fh.write("iteration,relres\n")
            for i, r in enumerate(result.history, start=1):
                fh.write(f"{i},{r:.6e}\n")
    if not result.converged:
        print(f"{cfg['method']}: no convergence to {cfg['tol']:g} in "
              f"{result.iterations} iterations", file=sys.stderr)
        return 1
    return 0


PLOT_CURVES = ("iterations", "setup_ms", "solve_ms")


def cmd_bench(cfg, out=sys.stdout):
    models = load_models(cfg["models"])
    rows = []
    for n in cfg["sizes"]:
        fine = _fine_mesh(cfg, n)
        for method in ("sgmg", "neural"):
            before = intersection_counter.count
            try:
                hier, result = run_solve(method, fine, cfg, models)
                row = multigrid.report_row(method, hier, result)
            except NeuralMGError as exc:
                print(f"{method} n={n}: {exc}", file=sys.stderr)
                dofs = int(np.sum(~(fine.boundary_flags | fine.virtual_flags)))
                row = {"method": method, "levels": cfg["levels"], "dofs": dofs,
                       "iterations": -1, "final_relres": "nan", "setup_ms": "nan",
                       "solve_ms": "nan"}
            calls = intersection_counter.count - before
            print(f"{method:6s} dofs={row['dofs']:>6} iterations={row['iterations']:>3} "
                  f"setup_ms={row['setup_ms']} intersections={calls}", file=out)
            rows.append(row)
    with _atomic(cfg["output"]) as tmp:
        multigrid.write_report(tmp, rows)
    if cfg["plot_dir"]:
        for method in ("sgmg", "neural"):
            for curve in PLOT_CURVES:
                path = os.path.join(cfg["plot_dir"], f"{method}_{curve}.dat")
                with _atomic(path) as tmp, open(tmp, "w", encoding="utf-8") as fh:
                    fh.write(f"# dofs {curve}\n")
                    for row in rows:
                        if row["method"] == method:
                            fh.write(f"{row['dofs']} {row[curve]}\n")
    return 0


def _detect(path):
    with open(path, "rb") as fh:
        head = fh.read(64)
    if head.startswith(nn.MAGIC):
        return "model"
    first = head.split(b"\n", 1)[0]
    if b"=" in first:
        return "dataset"
    try:
        meshmod.read_mesh(path)
        return "mesh"
    except NeuralMGError:
        return "matrix"


def cmd_inspect(cfg, out=sys.stdout):
    kind = cfg["kind"] if cfg["kind"] != "auto" else _detect(cfg["path"])
    path = cfg["path"]
    if kind == "model":
        m = nn.load_model(path)
        print(f"model: dimension={m.dimension} patch_size={m.patch_size} "
              f"layers={'-'.join(map(str, m.layer_sizes))} parameters={m.n_parameters} "
              f"scaled={m.scaled}", file=out)
        for k in sorted(m.metadata):
            print(f"  {k}: {m.metadata[k]}", file=out)
    elif kind == "dataset":
        manifest, records = dataset.read_dataset(path)
        print(f"dataset: dimension={manifest.dimension} patch_size={manifest.patch_size} "
              f"schedule={manifest.schedule_kind} seed={manifest.seed} "
              f"records={len(records)}", file=out)
        if records:
            print(f"  features={len(records[0].features)} targets={len(records[0].target)}",
                  file=out)
        print("  " + dataset.balance_diagnostic(manifest).summary(), file=out)
    elif kind == "mesh":
        m = meshmod.read_mesh(path)
        sizes = meshmod.patch_sizes(m)
        counts = {int(s): int(c) for s, c in zip(*np.unique(sizes, return_counts=True))}
        print(f"mesh: dim={m.dim} nodes={m.n_nodes} elements={m.n_elements} "
              f"boundary={int(m.boundary_flags.sum())} virtual={int(m.virtual_flags.sum())} "
              f"measure={m.measure:.12g}", file=out)
        print("  patch sizes: " + " ".join(f"{s}:{c}" for s, c in counts.items()), file=out)
    else:
        A = fem.read_sparse(path)
        sym = A.shape[0] == A.shape[1] and (abs(A - A.T).max() if A.nnz else 0.0) == 0.0
        print(f"matrix: shape={A.shape[0]}x{A.shape[1]} nnz={A.nnz} symmetric={sym}", file=out)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "solve": cmd_solve,
    "bench": cmd_bench,
    "inspect": cmd_inspect,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="neuralmg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        for key in schema:
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        file_values = read_config(args.config) if args.config else {}
        cfg = resolve(args.command, file_values, flags)
    except ConfigError as exc:
        print(f"neuralmg {args.command}: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](cfg, sys.stdout)
    except TrainingFailure as exc:
        print(f"neuralmg {args.command}: training diverged: {exc}", file=sys.stderr)
        return 1
    except (NeuralMGError, OSError) as exc:
        print(f"neuralmg {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
