"""Batch front door: generate, pca, fit, eval.

Exit codes: 0 ok, 1 usage or configuration problem, 2 malformed data,
3 numerical failure.  Data files are headerless float CSV; labels are
(key,class) CSV; trees travel as JSON (see io module).  Configuration is a
flat ``key = value`` file overridden by flags.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import io as hio
from .errors import DataError, HiermixError, NumericalError, ParameterError
from .mcmc import ChainConfig, merge_single_chains, run_chain
from .metrics import evaluate
from .model import Dataset, Hyperparams, generate_dataset
from .vi import ViConfig, chosen_path_matrix, fit_vi

DEFAULTS = {
    # model (animals-style configuration)
    "alpha": 0.4,
    "gamma": 1.0,
    "gamma0": 0.85,
    "depth": 3,
    "trunc": 10,
    "margin_cost": 1.0,
    "margin_eps": 1.0,
    "eta_prior_scale": 1.0,
    "kernel_scale": 1.0,   # kernel covariance = kernel_scale * I
    "prior_scale": 1.0,    # component-mean prior covariance = prior_scale * I
    "vi_weight": 1.0,
    # run protocol
    "chains": 1,
    "burnin": 5000,
    "draws": 10000,
    "seed": 0,
    "mode": "mcmc",
    "jobs": 1,
    "pca_dims": 0,         # 0 = off
    # vi specifics
    "tolerance": 1e-6,
    "max_cycles": 200,
    "branching": 3,
    # clamps
    "zeta_clamp": 1e-8,
    "omega_floor": 1e-3,
}

_INT_KEYS = {"depth", "trunc", "chains", "burnin", "draws", "seed", "jobs", "pca_dims", "max_cycles", "branching"}
_STR_KEYS = {"mode"}


@dataclass
class RunConfig:
    """Flat bag of every knob the CLI understands."""

    values: dict

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError as exc:
            raise AttributeError(name) from exc

    def hyper(self, dim: int) -> Hyperparams:
        v = self.values
        return Hyperparams(
            alpha=v["alpha"],
            gamma=v["gamma"],
            gamma0=v["gamma0"],
            depth=v["depth"],
            trunc=v["trunc"],
            margin_cost=v["margin_cost"],
            margin_eps=v["margin_eps"],
            eta_prior_scale=v["eta_prior_scale"],
            kernel_cov=v["kernel_scale"] * np.eye(dim),
            prior_mean=np.zeros(dim),
            prior_cov=v["prior_scale"] * np.eye(dim),
            vi_weight=v["vi_weight"],
        )


def parse_config_file(path) -> dict:
    """Flat key = value file; comments with #, strings optionally quoted."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParameterError(f"{path}: line {lineno} is not 'key = value'")
            key, val = (part.strip() for part in line.split("=", 1))
            out[key] = _coerce(key, val.strip('"').strip("'"), where=f"{path}:{lineno}")
    return out


def _coerce(key: str, val, where: str = "flag"):
    if key not in DEFAULTS:
        raise ParameterError(f"{where}: unknown option '{key}'")
    if key in _STR_KEYS:
        return str(val)
    try:
        if key in _INT_KEYS:
            return int(val)
        return float(val)
    except (TypeError, ValueError) as exc:
        raise ParameterError(f"{where}: bad value for '{key}': {val}") from exc


def build_config(args) -> RunConfig:
    values = dict(DEFAULTS)
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    for key in DEFAULTS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = _coerce(key, flag)
    if values["mode"] not in ("mcmc", "vi"):
        raise ParameterError(f"mode must be 'mcmc' or 'vi', got {values['mode']}")
    return RunConfig(values)


# -- subcommands --------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = build_config(args)
    if args.n < 1:
        raise ParameterError("need n >= 1 rows to generate")
    dim = args.dim
    rng = np.random.default_rng(cfg.seed)
    hyper = cfg.hyper(dim)
    data, tree, assignments, _ = generate_dataset(hyper, args.n, rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hio.save_data_csv(out / "data.csv", data.x)
    hio.save_labels_csv(out / "labels.csv", data.labels)
    hio.save_tree_json(out / "tree.json", tree, [a.path for a in assignments])
    print(f"wrote {args.n} rows to {out}")
    return 0


def cmd_pca(args) -> int:
    x = hio.load_data_csv(args.data)
    dims = args.dims
    if dims < 1 or dims > x.shape[1]:
        raise ParameterError(f"pca dims must be in 1..{x.shape[1]}, got {dims}")
    hio.save_data_csv(args.out, pca_project(x, dims))
    print(f"projected {x.shape[0]}x{x.shape[1]} -> {dims} dims into {args.out}")
    return 0


def pca_project(x: np.ndarray, dims: int) -> np.ndarray:
    """Centre, eigendecompose the sample covariance, project on the top axes.

    Axis signs are pinned (first nonzero loading positive) so output is
    reproducible across runs.
    """
    centred = x - x.mean(axis=0)
    cov = centred.T @ centred / max(x.shape[0] - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:dims]
    basis = vecs[:, order]
    for j in range(basis.shape[1]):
        col = basis[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if len(nz) and col[nz[0]] < 0:
            basis[:, j] = -col
    return centred @ basis


def _run_one_chain(payload):
    cfg_values, x, chain_index = payload
    cfg = RunConfig(cfg_values)
    hyper = cfg.hyper(x.shape[1])
    rng = np.random.default_rng(cfg.seed + chain_index)
    if cfg.mode == "mcmc":
        config = ChainConfig(
            hyper=hyper,
            burnin=cfg.burnin,
            draws=cfg.draws,
            zeta_clamp=cfg.zeta_clamp,
        )
        trace, best = run_chain(config, x, rng)
        merged, paths = merge_single_chains(best.tree, best.assignments)
        return {
            "mode": "mcmc",
            "trace": (list(trace.cdl), list(trace.rcdl), list(trace.accept_rate)),
            "tree": hio.tree_to_dict(merged, paths),
            "newick": hio.tree_to_newick(merged, paths),
            "rcdl": trace.best_rcdl,
        }
    config = ViConfig(
        hyper=hyper,
        branching=cfg.branching,
        tol=cfg.tolerance,
        max_cycles=cfg.max_cycles,
        omega_floor=cfg.omega_floor,
    )
    state, rows = fit_vi(config, x, rng)
    member = chosen_path_matrix(state)
    paths = [tuple(int(z) for z in np.flatnonzero(member[n])) for n in range(x.shape[0])]
    return {
        "mode": "vi",
        "vi_trace": rows,
        "tree": hio.tree_to_dict(state.tree, paths),
        "newick": hio.tree_to_newick(state.tree, paths),
        "relbo": rows[-1][1] if rows else float("nan"),
    }


def cmd_fit(args) -> int:
    cfg = build_config(args)
    x = hio.load_data_csv(args.data)
    if cfg.pca_dims:
        if cfg.pca_dims > x.shape[1]:
            raise ParameterError(f"pca_dims {cfg.pca_dims} exceeds data dimension {x.shape[1]}")
        x = pca_project(x, cfg.pca_dims)
    if cfg.mode == "vi" and (args.burnin is not None or args.draws is not None):
        print("warning: mode=vi ignores burnin/draws", file=sys.stderr)
    if cfg.chains < 1:
        raise ParameterError("need at least one chain")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payloads = [(cfg.values, x, i) for i in range(cfg.chains)]
    if cfg.jobs > 1 and cfg.chains > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_run_one_chain, payloads))
    else:
        results = [_run_one_chain(p) for p in payloads]

    summary = {"mode": cfg.mode, "chains": []}
    for i, res in enumerate(results):
        chain_dir = out / f"chain{i}"
        chain_dir.mkdir(exist_ok=True)
        if res["mode"] == "mcmc":
            trace = _TraceView(*res["trace"])
            hio.save_trace_csv(chain_dir / "trace.csv", trace)
            summary["chains"].append({"chain": i, "rcdl": res["rcdl"]})
        else:
            hio.save_vi_trace_csv(chain_dir / "trace.csv", res["vi_trace"])
            summary["chains"].append({"chain": i, "relbo": res["relbo"]})
        _dump_json(chain_dir / "tree.json", res["tree"])
        (chain_dir / "tree.nwk").write_text(res["newick"] + "\n", encoding="utf-8")
    _dump_json(out / "summary.json", summary)
    print(f"fit {cfg.chains} chain(s) into {out}")
    return 0


class _TraceView:
    def __init__(self, cdl, rcdl, accept_rate):
        self.cdl = cdl
        self.rcdl = rcdl
        self.accept_rate = accept_rate


def _dump_json(path, payload) -> None:
    import json

    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def cmd_eval(args) -> int:
    tree, paths = hio.load_tree_json(args.tree)
    x = hio.load_data_csv(args.data)
    if len(paths) != x.shape[0]:
        raise DataError(f"tree holds {len(paths)} member indices but data has {x.shape[0]} rows")
    labels = None
    if args.labels:
        labels = hio.load_labels_csv(args.labels, n=x.shape[0])
    report = evaluate(tree, paths, x, labels)
    hio.save_eval_json(args.out, report)
    print(f"eval written to {args.out}")
    return 0


# -- argument plumbing ----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(1 if "invalid" in message or "argument" in message else 1)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value configuration file")
    for key, default in DEFAULTS.items():
        flag = "--" + key.replace("_", "-")
        p.add_argument(flag, default=None, help=f"override {key} (default {default})")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hiermix", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="sample a synthetic dataset with ground truth")
    g.add_argument("--n", type=int, required=True, help="number of rows")
    g.add_argument("--dim", type=int, default=2, help="data dimension")
    g.add_argument("--out", required=True, help="output directory")
    _add_config_flags(g)
    g.set_defaults(func=cmd_generate)

    p = sub.add_parser("pca", help="project data onto leading principal axes")
    p.add_argument("--data", required=True)
    p.add_argument("--dims", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pca)

    f = sub.add_parser("fit", help="run MCMC chains or a variational fit")
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    _add_config_flags(f)
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="score a tree against data and labels")
    e.add_argument("--tree", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--labels", default=None)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except ParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except HiermixError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
