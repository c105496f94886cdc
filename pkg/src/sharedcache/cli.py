"""Command-line entry point: ``sharedcache <command> [options]``.

Exit codes: 0 success, 1 usage or config error, 2 tolerance failure,
3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from fractions import Fraction
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .admission import (OverbookingInfeasible, SlaSpec, admit_recomputed, can_admit,
                        minimal_virtual_allocation, overbooking_report)
from .approx import InfeasibleAllocation, NotConverged, Rule, solve
from .core import CacheError, Mode
from .service import serve
from .workload import CacheConfig, WorkloadSpec, run_simulation

EXIT_OK, EXIT_USAGE, EXIT_TOLERANCE, EXIT_RUNTIME = 0, 1, 2, 3

DEFAULT_RANKS = [1, 10, 100, 1000]
RIPPLE_DEFAULTS = {
    "num_objects": 10_000, "num_proxies": 9, "ratios": [1, 1, 1, 2, 2, 2, 7, 7, 7],
    "unit": 10, "capacity": 300, "requests": 375_000, "warmup_fraction": 0.2,
    "ripple_factor": 1.1,
}
# 10^6 objects, 3 GB of 100 kB items split 100/200/700 MB per proxy triple
RIPPLE_FULL_SCALE = {"num_objects": 1_000_000, "unit": 1000, "capacity": 30_000,
                     "requests": 3_750_000}

log = logging.getLogger("sharedcache")


class UsageError(Exception):
    pass


# -- config handling -------------------------------------------------------

def _schema() -> dict:
    text = resources.files("sharedcache").joinpath("schemas/config.schema.json").read_text()
    return json.loads(text)


def load_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, _schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"config invalid at {where}: {exc.message}") from exc


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _require(cfg: dict, *sections: str) -> None:
    missing = [s for s in sections if s not in cfg]
    if missing:
        raise UsageError(f"config lacks section(s): {', '.join(missing)}")


def _workload(cfg: dict, seed: int, requests: int | None = None) -> WorkloadSpec:
    w = cfg["workload"]
    try:
        return WorkloadSpec(
            num_objects=w["num_objects"], num_proxies=len(w["popularity"]),
            popularity=w["popularity"], lengths=w.get("lengths", 1), rates=w.get("rates"),
            request_count=w.get("requests", 0) if requests is None else requests, seed=seed)
    except ValueError as exc:
        raise UsageError(f"workload: {exc}") from exc


def _fraction(x) -> Fraction:
    return Fraction(str(x)) if isinstance(x, float) else Fraction(x)


def _allocation_list(cfg: dict) -> list[list[Fraction]]:
    c = cfg["cache"]
    if "allocation_grid" in c and "allocations" in c:
        raise UsageError("cache: give either allocations or allocation_grid, not both")
    grid = c.get("allocation_grid") or ([c["allocations"]] if "allocations" in c else None)
    if grid is None:
        raise UsageError("cache: allocations missing")
    return [[_fraction(b) for b in row] for row in grid]


def _cache_config(cfg: dict, allocs, mode: str | None) -> CacheConfig:
    c = cfg["cache"]
    mode = Mode(mode or c.get("mode", "standard"))
    ripple = None
    if mode is Mode.RRE:
        if "ripple_thresholds" in c:
            ripple = [_fraction(b) for b in c["ripple_thresholds"]]
        else:
            f = _fraction(c.get("ripple_factor", 1))
            ripple = [f * b for b in allocs]
    return CacheConfig(c["capacity"], allocs, mode, ripple)


def _label(allocs) -> str:
    return "/".join(str(b) for b in allocs)


def _header(command: str, cfg: dict, seed: int | None) -> str:
    parts = [f"sharedcache {__version__}", command, f"config_sha256={config_hash(cfg)}"]
    if seed is not None:
        parts.append(f"seed={seed}")
    return " ".join(parts)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, cfg: dict) -> int:
    return args.seed if args.seed is not None else cfg.get("seed", 0)


def _write_json(path: Path, header: str, payload: dict) -> None:
    path.write_text(json.dumps({"header": header, **payload}, indent=2, sort_keys=True) + "\n")


# -- commands -------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    _require(cfg, "workload", "cache")
    seed = _seed(args, cfg)
    spec = _workload(cfg, seed, args.requests)
    ranks = cfg.get("report", {}).get("ranks", DEFAULT_RANKS)
    ranks = [r for r in ranks if r <= spec.num_objects]
    warmup = cfg["workload"].get("warmup_fraction", 0.2)
    header = _header("simulate", cfg, seed)
    out = _out_dir(args)
    summary, dumps = [], {}
    with open(out / "simulate.csv", "w", newline="") as fh:
        fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(["allocation", "proxy", "object_rank", "requests", "hits",
                    "hit_prob", "residency_prob"])
        for allocs in _allocation_list(cfg):
            cc = _cache_config(cfg, allocs, args.mode)
            report, snap = run_simulation(spec, cc, warmup, return_state=True)
            label = _label(allocs)
            for i, r, n, h, p, q in report.rows(ranks):
                w.writerow([label, i, r, n, h, _num(p), _num(q)])
            summary.append({"allocation": label, **_report_summary(report)})
            dumps[label] = snap
    _write_json(out / "simulate.json", header, {"runs": summary})
    if args.dump:
        _write_json(out / "state.json", header, {"states": dumps})
    print(f"wrote {out / 'simulate.csv'}")
    return EXIT_OK


def _num(x: float) -> str:
    return "nan" if np.isnan(x) else repr(float(x))


def _report_summary(report) -> dict:
    d = report.to_json(ranks=[])
    d.pop("rows")
    d["mean_evictions_per_set"] = report.mean_evictions_per_set
    d["mean_ripple_evictions_per_set"] = report.mean_ripple_per_set
    return d


def cmd_approx(args) -> int:
    cfg = load_config(args.config)
    _require(cfg, "workload", "cache")
    solver = cfg.get("solver", {})
    rule = Rule(args.rule or solver.get("rule", "exact"))
    tol = args.tolerance if args.tolerance is not None else solver.get("tolerance", 1e-9)
    spec = _workload(cfg, 0)
    rates = spec.rate_matrix()
    lengths = spec.object_lengths()
    ranks = [r for r in cfg.get("report", {}).get("ranks", DEFAULT_RANKS) if r <= spec.num_objects]
    header = _header("approx", cfg, None)
    out = _out_dir(args)
    times = []
    with open(out / "approx.csv", "w", newline="") as fh:
        fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(["allocation", "proxy", "object_rank", "rate", "t", "h"])
        for allocs in _allocation_list(cfg):
            b = [float(x) for x in allocs]
            try:
                res = solve(b, lengths, rates, rule, tol, solver.get("max_iters", 500))
            except InfeasibleAllocation as exc:
                margins = ", ".join(f"{m:g}" for m in exc.margins)
                print(f"error: allocation {_label(allocs)} infeasible; margins [{margins}]",
                      file=sys.stderr)
                return EXIT_RUNTIME
            label = _label(allocs)
            for i in range(spec.num_proxies):
                for r in ranks:
                    w.writerow([label, i, r, repr(float(rates[i, r - 1])),
                                repr(float(res.t[i])), repr(float(res.h[i, r - 1]))])
            times.append({"allocation": label, "t": res.t.tolist(),
                          "max_residual": res.max_residual, "iterations": res.iterations})
    _write_json(out / "approx.json", header, {"rule": rule.value, "solutions": times})
    print(f"wrote {out / 'approx.csv'}")
    return EXIT_OK


VALUE_COLUMNS = ("h", "residency_prob", "hit_prob")


def _read_table(path) -> tuple[list[str], list[dict]]:
    with open(path, newline="") as fh:
        rows = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(rows)
    return list(reader.fieldnames or []), list(reader)


def _value_column(fields, override: str | None) -> str:
    if override:
        if override not in fields:
            raise UsageError(f"column {override!r} not present")
        return override
    for name in VALUE_COLUMNS:
        if name in fields:
            return name
    raise UsageError(f"no value column among {VALUE_COLUMNS}")


def cmd_compare(args) -> int:
    f_sim, sim = _read_table(args.sim_csv)
    f_apx, apx = _read_table(args.approx_csv)
    keys = [k for k in ("allocation", "proxy", "object_rank") if k in f_sim and k in f_apx]
    if "proxy" not in keys or "object_rank" not in keys:
        raise UsageError("both files need proxy and object_rank columns")
    cs = _value_column(f_sim, args.sim_column)
    ca = _value_column(f_apx, args.approx_column)
    left = {tuple(r[k] for k in keys): r[cs] for r in sim}
    right = {tuple(r[k] for k in keys): r[ca] for r in apx}
    if left.keys() != right.keys():
        raise UsageError(f"files disagree on keys: {len(left.keys() ^ right.keys())} unmatched")
    rel_errors, failures = [], 0
    for key in sorted(left, key=lambda k: tuple(_sort_key(x) for x in k)):
        s, a = float(left[key]), float(right[key])
        if np.isnan(s) or np.isnan(a):
            continue
        rel = abs(s - a) / a if a > 0 else (0.0 if s == a else float("inf"))
        rel_errors.append(rel)
        ok = rel <= args.tolerance or (a < args.abs_below and abs(s - a) <= args.abs_tolerance)
        failures += not ok
        if args.verbose or not ok:
            print(f"{'ok  ' if ok else 'FAIL'} {dict(zip(keys, key))} sim={s:.6g} "
                  f"approx={a:.6g} rel={rel:.4f}")
    if rel_errors:
        print(f"compared {len(rel_errors)} rows: max relative error {max(rel_errors):.4f}, "
              f"mean {np.mean(rel_errors):.4f}, {failures} outside tolerance")
    else:
        print("compared 0 rows")
    return EXIT_TOLERANCE if failures else EXIT_OK


def _sort_key(x: str):
    try:
        return (0, float(x), "")
    except ValueError:
        return (1, 0.0, x)


def ripple_setup(params: dict, seed: int):
    """Workload and allocations for the heterogeneous ripple benchmark."""
    J = params["num_proxies"]
    ratios = params.get("ratios") or [1] * J
    if len(ratios) != J:
        raise UsageError("ripple: one ratio per proxy is required")
    allocs = [params["unit"] * r for r in ratios]
    spec = WorkloadSpec(params["num_objects"], J, [0.5 + 0.5 * i for i in range(J)],
                        request_count=params["requests"], seed=seed)
    return spec, allocs


def cmd_ripple_bench(args) -> int:
    cfg = load_config(args.config) if args.config else {"version": 1}
    params = dict(RIPPLE_DEFAULTS)
    if args.full_scale:
        params.update(RIPPLE_FULL_SCALE)
    params.update(cfg.get("ripple", {}))
    if args.proxies is not None:
        params["num_proxies"] = args.proxies
        if args.proxies != len(params["ratios"]):
            params["ratios"] = None
    if args.requests is not None:
        params["requests"] = args.requests
    seed = _seed(args, cfg)
    spec, allocs = ripple_setup(params, seed)
    capacity = max(params["capacity"], sum(allocs))
    modes = ["standard", "rre"] if args.paired else [args.mode or "standard"]
    factor = _fraction(params["ripple_factor"])
    header = _header("ripple-bench", {"ripple": params, "paired": args.paired}, seed)
    out = _out_dir(args)
    results = {}
    for mode in modes:
        ripple = [factor * b for b in allocs] if mode == "rre" else None
        report = run_simulation(spec, CacheConfig(capacity, allocs, mode, ripple),
                                params["warmup_fraction"])
        report.write_histogram_csv(out / f"ripple_{mode}.csv", header=header)
        results[mode] = _report_summary(report)
        print(f"{mode}: {report.sets} sets, multi-eviction fraction "
              f"{report.multi_eviction_fraction:.4f}, support {report.histogram_support()}")
    _write_json(out / "ripple.json", header,
                {"allocations": allocs, "capacity": capacity, "results": results})
    return EXIT_OK


def cmd_admit(args) -> int:
    cfg = load_config(args.config)
    _require(cfg, "workload", "cache", "admission")
    adm = cfg["admission"]
    spec = _workload(cfg, 0)
    rule = Rule(args.rule or cfg.get("solver", {}).get("rule", "exact"))
    capacity = cfg["cache"]["capacity"]
    sla = SlaSpec(adm["b_star"], capacity)
    J = len(sla.b_star)
    new = adm.get("new_b_star")
    expected = J + (new is not None)
    if spec.num_proxies != expected:
        raise UsageError(f"workload must list {expected} proxies (existing first, newcomer last)")
    rates = spec.rate_matrix()
    lengths = spec.object_lengths()
    tol = args.tolerance if args.tolerance is not None else adm.get("tolerance", 1e-4)
    gran = adm.get("granularity", 1.0)
    try:
        virtual = minimal_virtual_allocation(sla, rates[:J], lengths, rule, tol, gran)
    except (OverbookingInfeasible, InfeasibleAllocation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    rep = overbooking_report(sla, virtual)
    result = {
        "b_star": list(sla.b_star), "b": virtual.b.tolist(), "slack": virtual.slack,
        "total_sla": rep.total_sla, "total_virtual": rep.total_virtual,
        "overbooked": rep.overbooked, "capacity": capacity,
    }
    if new is not None:
        current = adm.get("current_b", virtual.b.tolist())
        cons = can_admit(new, capacity, current)
        rec = admit_recomputed(sla, new, rates, lengths, rule, tol, gran)
        result["decisions"] = [
            {"basis": cons.basis.value, "admitted": cons.admitted, "slack": cons.slack},
            {"basis": rec.basis.value, "admitted": rec.admitted,
             "b": None if rec.b is None else rec.b.tolist(), "slack": rec.slack},
        ]
    header = _header("admit", cfg, None)
    out = _out_dir(args)
    _write_json(out / "admit.json", header, result)
    print(json.dumps(result, indent=2))
    return EXIT_OK


def cmd_serve(args) -> int:
    cfg = load_config(args.config)
    _require(cfg, "cache")
    allocs = _allocation_list(cfg)
    if len(allocs) != 1:
        raise UsageError("serve needs a single allocation vector")
    try:
        cache = _cache_config(cfg, allocs[0], args.mode).build()
    except ValueError as exc:
        raise UsageError(f"cache: {exc}") from exc
    serve(args.listen, cache)
    return EXIT_OK


def cmd_dump(args) -> int:
    cfg = load_config(args.config)
    _require(cfg, "workload", "cache")
    seed = _seed(args, cfg)
    spec = _workload(cfg, seed, args.requests)
    warmup = cfg["workload"].get("warmup_fraction", 0.2)
    states = {}
    for allocs in _allocation_list(cfg):
        _, snap = run_simulation(spec, _cache_config(cfg, allocs, args.mode), warmup,
                                 return_state=True)
        states[_label(allocs)] = snap
    header = _header("dump", cfg, seed)
    text = json.dumps({"header": header, "states": states}, indent=2, sort_keys=True) + "\n"
    if args.out == "-":
        sys.stdout.write(text)
    else:
        out = _out_dir(args)
        (out / "state.json").write_text(text)
    return EXIT_OK


# -- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sharedcache",
                                description="Shared-object LRU cache experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True, seed=True, mode=True):
        sp.add_argument("--config", required=config_required, metavar="PATH")
        sp.add_argument("--out", default=".", metavar="DIR")
        if seed:
            sp.add_argument("--seed", type=int, metavar="U64")
        if mode:
            sp.add_argument("--mode", choices=[m.value for m in Mode])

    sp = sub.add_parser("simulate", help="replay an IRM workload against the engine")
    common(sp)
    sp.add_argument("--requests", type=int, help="override the workload request count")
    sp.add_argument("--dump", action="store_true", help="also write final cache states")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("approx", help="solve the working-set approximation")
    common(sp, seed=False, mode=False)
    sp.add_argument("--rule", choices=[r.value for r in Rule])
    sp.add_argument("--tolerance", type=float, help="solver residual tolerance")
    sp.set_defaults(func=cmd_approx)

    sp = sub.add_parser("compare", help="compare simulated and predicted hit probabilities")
    sp.add_argument("sim_csv")
    sp.add_argument("approx_csv")
    sp.add_argument("--tolerance", type=float, default=0.15, help="relative tolerance")
    sp.add_argument("--abs-tolerance", type=float, default=0.005)
    sp.add_argument("--abs-below", type=float, default=0.05,
                    help="predictions below this may pass on the absolute tolerance")
    sp.add_argument("--sim-column")
    sp.add_argument("--approx-column")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("ripple-bench", help="eviction-per-set histogram on the 9-proxy workload")
    common(sp, config_required=False)
    sp.add_argument("--paired", action="store_true", help="run standard and RRE on the same seed")
    sp.add_argument("--proxies", type=int)
    sp.add_argument("--requests", type=int)
    sp.add_argument("--full-scale", action="store_true")
    sp.set_defaults(func=cmd_ripple_bench)

    sp = sub.add_parser("admit", help="virtual allocations and admission decisions")
    common(sp, seed=False, mode=False)
    sp.add_argument("--rule", choices=[r.value for r in Rule])
    sp.add_argument("--tolerance", type=float, help="hit-probability tolerance")
    sp.set_defaults(func=cmd_admit)

    sp = sub.add_parser("serve", help="run the TCP key-value service")
    sp.add_argument("--config", required=True, metavar="PATH")
    sp.add_argument("--listen", default="127.0.0.1:11311", metavar="ADDR")
    sp.add_argument("--mode", choices=[m.value for m in Mode])
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("dump", help="replay a workload and write the final cache state")
    common(sp)
    sp.add_argument("--requests", type=int)
    sp.set_defaults(func=cmd_dump)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CacheError, NotConverged, InfeasibleAllocation, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
