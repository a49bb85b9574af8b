"""Command-line front end: collect, optimize, tune, evaluate, verify.

All commands read one JSON config (``--config``) with dotted ``--set``
overrides and write into ``--out``. Outputs are deterministic for a fixed
seed list; the only wall-clock value lives in ``metadata.json``.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import platform
import sys as _sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from ._accel import use_numba
from .control import DEFAULT_COSTS, MpcConfig, value_of_communication
from .data import DataConfig, DataLengthError, HankelBundle, collect
from .predictor import fit_unstructured, validation_mse
from .system import NoiseSpec, random_system, system_from_config
from .topology import ConsistencyError, OptimizerConfig, bounds_report, check_against_oracle, optimize

log = logging.getLogger("commtopo")

EXIT_OK, EXIT_PRECONDITION, EXIT_MISMATCH = 0, 2, 3

DEFAULTS = {
    "system": {"swing": "default"},
    "data": {"T_ini": 3, "N": 5, "T": 200, "N_coll": 50, "n_guess": 8},
    "noise": {"mode": "by-snr", "snr": 1e3},
    "optimizer": {"big_m": 5.0, "mode": "decomposed-exact", "tie_tol": 1e-9},
    "mpc": {"q": 1.0, "r": 1e-2, "lam_s": 1e3, "T_sim": 100},
    "sweep": {"c": [0.001, 1, 20, 1000], "T": [100, 200, 400], "N_coll": [1, 10, 50]},
    "evaluate": {"c": list(DEFAULT_COSTS), "n_random": 10},
    "verify": {"n_instances": 20},
    "trials": {"mse": 50, "tune": 500},
    "seeds": [0],
}


class PreconditionError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, item: str) -> None:
    if "=" not in item:
        raise PreconditionError(f"--set expects KEY=VALUE, got {item!r}")
    key, val = item.split("=", 1)
    node = cfg
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise PreconditionError(f"--set {key}: {p} is not a section")
    node[parts[-1]] = _parse_value(val)


def parse_seeds(text: str) -> list:
    """``"0,3,5"`` or ``"0-49"`` or a mix of both."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            a, b = part.split("-", 1)
            seeds.extend(range(int(a), int(b) + 1))
        else:
            seeds.append(int(part))
    return seeds


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict

    @classmethod
    def build(cls, path=None, overrides=(), seeds=None) -> "ExperimentConfig":
        cfg = copy.deepcopy(DEFAULTS)
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise PreconditionError(f"config file {p} does not exist")
            cfg = _merge(cfg, json.loads(p.read_text()))
        for item in overrides:
            apply_override(cfg, item)
        if seeds is not None:
            cfg["seeds"] = list(seeds)
        out = cls(cfg)
        out.validate()
        return out

    def validate(self) -> None:
        try:
            self.system()
            self.data()
            self.noise()
            self.optimizer()
            self.mpc()
        except (TypeError, ValueError, KeyError) as e:
            raise PreconditionError(f"invalid config: {e}") from e
        sys_file = self.raw["system"].get("file") if isinstance(self.raw["system"], dict) else None
        if sys_file and not Path(sys_file).exists():
            raise PreconditionError(f"system file {sys_file} does not exist")
        if not self.seeds:
            raise PreconditionError("seed list is empty")

    def system(self):
        spec = self.raw["system"]
        if "file" in spec:
            spec = json.loads(Path(spec["file"]).read_text())
        return system_from_config(spec)

    def data(self, **kw) -> DataConfig:
        return DataConfig(**{**self.raw["data"], **kw})

    def noise(self) -> NoiseSpec:
        n = self.raw["noise"]
        return NoiseSpec(n.get("mode", "none"), float(n.get("snr", 1e3)))

    def optimizer(self, verify=False) -> OptimizerConfig:
        return OptimizerConfig(**self.raw["optimizer"], verify=verify)

    def mpc(self) -> MpcConfig:
        m = dict(self.raw["mpc"])
        for k in ("q", "r", "x0"):
            if isinstance(m.get(k), list):
                m[k] = tuple(m[k])
        return MpcConfig(**m)

    @property
    def seeds(self) -> list:
        return list(self.raw["seeds"])


# ---------------------------------------------------------------------------
# tables


SCHEMAS = {
    "table": [("seed", int), ("c", float), ("links", int), ("topology", str),
              ("pred_cost", float), ("objective", float), ("mse", float)],
    "tune": [("T", int), ("N_coll", int), ("trials", int), ("mse", float)],
    "voc_rows": [("seed", int), ("c", float), ("links", int), ("topology", str),
                 ("pred_cost", float), ("objective", float), ("J_opt", float), ("J_rand", float),
                 ("J_empty", float), ("ratio", float)],
    "voc_by_links": [("links", int), ("n", int), ("pred_cost", float), ("J_opt", float),
                     ("J_rand", float), ("ratio", float)],
    "voc_by_cost": [("c", float), ("n", int), ("links", float), ("pred_cost", float),
                    ("J_opt", float), ("ratio", float)],
}


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_table(path, schema: str, rows) -> None:
    cols = [c for c, _ in SCHEMAS[schema]]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in cols])


def read_table(path, schema: str) -> list:
    """Inverse of :func:`write_table`: rows with their original types."""
    types = dict(SCHEMAS[schema])
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        return [{k: types[k](v) for k, v in row.items()} for row in rd]


def _dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))


def topology_label(adj) -> str:
    """Links as ``receiver<-sender`` pairs, 1-based, ``-`` when empty."""
    adj = np.asarray(adj, dtype=bool)
    links = [f"{i + 1}<-{j + 1}" for i, j in zip(*np.nonzero(adj))]
    return ";".join(links) if links else "-"


def _map(fn, tasks, jobs):
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, tasks))
    return [fn(t) for t in tasks]


def _seed_dir(out, seed) -> Path:
    return Path(out) / "data" / f"seed_{seed}"


def _load_bundle(out, seed) -> HankelBundle:
    prefix = _seed_dir(out, seed) / "bundle"
    if not prefix.with_suffix(".json").exists():
        raise PreconditionError(f"no dataset for seed {seed} under {out}; run 'collect' first")
    return HankelBundle.load(prefix)


# ---------------------------------------------------------------------------
# commands


def _collect_one(args):
    cfg, out, seed = args
    sys = cfg.system()
    ds = collect(sys, cfg.data(), cfg.noise(), seed=seed)
    d = _seed_dir(out, seed)
    (d / "raw").mkdir(parents=True, exist_ok=True)
    header = {"seed": seed, "data": cfg.raw["data"], "noise": cfg.raw["noise"]}
    ds.bundle.save(d / "bundle", header)
    for k, b in enumerate(ds.bundle.raw):
        b.save(d / "raw" / f"bundle_{k:03d}", header)
    np.save(d / "input.npy", ds.u)
    rep = {"seed": seed, **ds.pe.to_dict(), "order": cfg.data().pe_order,
           "noise_std": None if ds.noise_std is None else ds.noise_std.tolist()}
    _dump_json(d / "pe.json", rep)
    return rep


def cmd_collect(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> int:
    sys = cfg.system()
    try:
        cfg.data().check_length(sys.m)
    except DataLengthError as e:
        raise PreconditionError(str(e)) from e
    reports = _map(_collect_one, [(cfg, out, s) for s in cfg.seeds], jobs)
    _dump_json(Path(out) / "pe_report.json", reports)
    bad = [r["seed"] for r in reports if not r["ok"]]
    if bad:
        raise PreconditionError(f"input not persistently exciting for seeds {bad}")
    print(f"collected {len(reports)} dataset(s) into {Path(out) / 'data'}")
    return EXIT_OK


def _optimize_one(args):
    cfg, out, seed, verify = args
    bundle = _load_bundle(out, seed)
    sys = cfg.system()
    ocfg = cfg.optimizer(verify=verify)
    rows, results = [], []
    for c in cfg.raw["sweep"]["c"]:
        res = optimize(bundle, float(c), ocfg)
        rep = bounds_report(bundle, float(c), res)
        mse = validation_mse(res.predictor, sys, n_windows=50, noise=cfg.noise(),
                             seed=[seed, 1], n_trials=int(cfg.raw["trials"]["mse"]))
        rows.append({"seed": seed, "c": float(c), "links": res.n_links,
                     "topology": topology_label(res.topology.adj),
                     "pred_cost": res.residual, "objective": res.objective, "mse": mse})
        results.append({"c": float(c), **res.to_dict(), "bounds": rep.to_dict(), "mse": mse})
    d = Path(out) / "optimize"
    d.mkdir(parents=True, exist_ok=True)
    _dump_json(d / f"results_seed_{seed}.json", {"seed": seed, "results": results})
    return rows


def cmd_optimize(cfg: ExperimentConfig, out: Path, jobs: int = 1, verify: bool = False) -> int:
    for s in cfg.seeds:
        _load_bundle(out, s)
    chunks = _map(_optimize_one, [(cfg, out, s, verify) for s in cfg.seeds], jobs)
    rows = [r for ch in chunks for r in ch]
    (Path(out) / "optimize").mkdir(parents=True, exist_ok=True)
    write_table(Path(out) / "optimize" / "table.csv", "table", rows)
    for r in rows:
        print(f"seed {r['seed']:>3} c={r['c']:<8g} links={r['links']:>2} "
              f"pred={r['pred_cost']:.4g} mse={r['mse']:.4g}")
    return EXIT_OK


def tune_cell(cfg: ExperimentConfig, T: int, n_coll: int, trials: int, base_seed: int) -> float:
    """Mean validation MSE of the unstructured fit over ``trials`` datasets."""
    sys = cfg.system()
    dcfg = cfg.data(T=T, N_coll=n_coll)
    noise = cfg.noise()
    errs = []
    for t in range(trials):
        ds = collect(sys, dcfg, noise, seed=[base_seed, T, n_coll, t])
        K = fit_unstructured(ds.bundle)
        errs.append(validation_mse(K, sys, n_windows=50, noise=noise, seed=[base_seed, T, n_coll, t, 1]))
    return float(np.mean(errs))


def _tune_one(args):
    cfg, T, n, trials, seed = args
    return {"T": T, "N_coll": n, "trials": trials, "mse": tune_cell(cfg, T, n, trials, seed)}


def cmd_tune(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> int:
    sw = cfg.raw["sweep"]
    if not sw.get("T") or not sw.get("N_coll"):
        raise PreconditionError("tuning needs non-empty sweep.T and sweep.N_coll lists")
    sys = cfg.system()
    for T in sw["T"]:
        try:
            cfg.data(T=int(T)).check_length(sys.m)
        except DataLengthError as e:
            raise PreconditionError(str(e)) from e
    trials = int(cfg.raw["trials"]["tune"])
    tasks = [(cfg, int(T), int(n), trials, cfg.seeds[0]) for T in sw["T"] for n in sw["N_coll"]]
    rows = _map(_tune_one, tasks, jobs)
    (Path(out) / "tune").mkdir(parents=True, exist_ok=True)
    write_table(Path(out) / "tune" / "grid.csv", "tune", rows)
    for r in rows:
        print(f"T={r['T']:<4} N_coll={r['N_coll']:<3} mse={r['mse']:.4g}")
    return EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> int:
    out = Path(out)
    for s in cfg.seeds:
        if not (out / "optimize" / f"results_seed_{s}.json").exists():
            raise PreconditionError(f"no optimize results for seed {s}; run 'optimize' first")
    bundles = [_load_bundle(out, s) for s in cfg.seeds]
    stds = []
    for s in cfg.seeds:
        std = json.loads((_seed_dir(out, s) / "pe.json").read_text())["noise_std"]
        stds.append(None if std is None else np.asarray(std))
    ev = cfg.raw["evaluate"]
    rep = value_of_communication(bundles, cfg.system(), ev["c"], cfg.mpc(), int(ev["n_random"]),
                                 len(bundles), cfg.optimizer(), cfg.noise(), stds, cfg.seeds, jobs)
    d = out / "evaluate"
    d.mkdir(parents=True, exist_ok=True)
    write_table(d / "voc_rows.csv", "voc_rows", rep["rows"])
    write_table(d / "voc_by_links.csv", "voc_by_links", rep["by_links"])
    write_table(d / "voc_by_cost.csv", "voc_by_cost", rep["by_cost"])
    _dump_json(d / "summary.json", rep["summary"])
    lines = [f"links={b['links']:>2} n={b['n']:<3} ratio={b['ratio']:.4f} J_opt={b['J_opt']:.4g}"
             for b in rep["by_links"]]
    lines.append(f"spearman(pred cost, J_opt) = {rep['summary']['spearman_pred_vs_J']:.4f}")
    lines.append(f"min ratio = {rep['summary']['min_ratio']:.4f}")
    (d / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_verify(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> int:
    """Cross-check the decomposed solver against full enumeration."""
    ocfg = cfg.optimizer()
    checked = 0
    for s in cfg.seeds:
        if (_seed_dir(out, s) / "bundle.json").exists():
            b = _load_bundle(out, s)
            for c in cfg.raw["sweep"]["c"]:
                check_against_oracle(b, float(c), ocfg)
                checked += 1
    n_inst = int(cfg.raw["verify"]["n_instances"])
    for k in range(n_inst):
        rng = np.random.default_rng([cfg.seeds[0], k])
        M = int(rng.integers(2, 5))
        sys = random_system(M, rng)
        dcfg = DataConfig(T_ini=2, N=2, T=(sys.m + 1) * (4 + sys.n) + 10, N_coll=1, n_guess=sys.n)
        noise = NoiseSpec("by-snr", 100.0) if k % 2 else None
        b = collect(sys, dcfg, noise, seed=rng).bundle
        costs = rng.uniform(0, 2, (M, M))
        check_against_oracle(b, costs, ocfg)
        checked += 1
    print(f"verified {checked} instance(s): decomposed and exhaustive solvers agree")
    return EXIT_OK


COMMANDS = {"collect": cmd_collect, "optimize": cmd_optimize, "tune": cmd_tune,
            "evaluate": cmd_evaluate, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="commtopo", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON experiment config")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--seeds", type=parse_seeds, help="e.g. 0-49 or 1,2,5")
        p.add_argument("--set", action="append", default=[], metavar="K=V",
                       help="override a config entry, dotted key, JSON value")
        p.add_argument("--verify", action="store_true", help="cross-check against full enumeration")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def _write_metadata(out: Path, args, cfg: ExperimentConfig) -> None:
    meta = {"command": args.command, "version": __version__, "python": platform.python_version(),
            "backend": "numba" if use_numba() else "numpy",
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "config": cfg.raw}
    _dump_json(out / "metadata.json", meta)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.jobs < 1:
            raise PreconditionError("--jobs must be at least 1")
        cfg = ExperimentConfig.build(args.config, args.set, args.seeds)
        args.out.mkdir(parents=True, exist_ok=True)
        _write_metadata(args.out, args, cfg)
        fn = COMMANDS[args.command]
        if args.command == "optimize":
            return fn(cfg, args.out, args.jobs, args.verify)
        code = fn(cfg, args.out, args.jobs)
        if args.verify and args.command != "verify":
            code = cmd_verify(cfg, args.out, args.jobs)
        return code
    except PreconditionError as e:
        print(f"error: {e}", file=_sys.stderr)
        return EXIT_PRECONDITION
    except ConsistencyError as e:
        print(f"verification failed: {e}", file=_sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    raise SystemExit(main())
