"""Batch front end: plan, noise, run, verify and report.

Exit codes: 0 ok, 1 failed check, 2 usage, 3 infeasible level, 4 missing artifact.
Every run directory holds manifest.json (config echo and file hashes), ledger.csv,
report.json, TFLD checkpoints and timing.json; only timing.json varies between reruns.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import os
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict

import numpy as np

from . import __version__
from . import controls, noise, scheme, tfld
from . import diagnostics as dg
from . import spectral as sp
from . import timeline as tl

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_MISSING = 0, 1, 2, 3, 4

RUN_DEFAULTS = {
    "alpha": 0.5, "kappa": 0.6, "gamma": 1.0, "m": 2, "nu": 1.0, "C": 2.0, "C0": 2.0,
    "C_start": 1.0, "mode": "demo", "a": 2, "b": 2, "beta": 0.1,
    "noise": "wiener", "delta": -2.2, "hurst": 0.5, "K": None, "amplitude": 1.0,
    "grid": 256, "levels": 1, "samples": 16, "seed": 0, "T": 1.0, "dt": None,
    "eval_stride": None, "cz_dt": 1.0 / 64.0, "cz_samples": None, "calibrate": True,
    "defects": True, "directions": "derived", "linearity": None, "regularity": None,
    "bootstrap": 400,
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=dg._json_default) + "\n"


def _write_text(path, text: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _floats(text):
    if text is None or isinstance(text, list):
        return text
    return [float(x) for x in str(text).split(",") if x.strip()]


def _pairs(text):
    if text is None or isinstance(text, list):
        return text
    out = []
    for item in str(text).split(";"):
        if item.strip():
            t, x = item.split(",")
            out.append([float(t), float(x)])
    return out


# ---------------------------------------------------------------------------
# configuration


def merge_config(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        with open(args.config) as fh:
            loaded = json.load(fh)
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise CliError(EXIT_USAGE, f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key in defaults:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    cfg["linearity"] = _floats(cfg["linearity"])
    cfg["regularity"] = _pairs(cfg["regularity"])
    return cfg


def planner_input(cfg: dict) -> controls.PlannerInput:
    return controls.PlannerInput(alpha=cfg["alpha"], kappa=cfg["kappa"], gamma=cfg["gamma"], m=int(cfg["m"]),
                                 nu=cfg["nu"], C=cfg["C"], C0=cfg["C0"], C_start=cfg["C_start"])


def plan_from(cfg: dict) -> controls.ControlParams:
    """strict: full planner; lattice: planner b and beta with the lattice-minimal a; demo: user values."""
    inp = planner_input(cfg)
    if cfg["mode"] == "demo":
        return controls.plan(inp, "demo", a=cfg["a"], b=cfg["b"], beta=cfg["beta"])
    if cfg["mode"] == "lattice":
        cp = controls.plan(inp, "demo")
        return dataclasses.replace(cp, mode="lattice")
    return controls.plan(inp, "strict")


def noise_config(cfg: dict, K: int | None) -> noise.NoiseConfig:
    return noise.NoiseConfig(kind=cfg["noise"], delta=cfg["delta"], gamma=cfg["gamma"], nu=cfg["nu"], K=K,
                             seed=int(cfg["seed"]), hurst=cfg["hurst"], amplitude=cfg["amplitude"])


def feasibility_rows(cp: controls.ControlParams, N: int, levels: int) -> list:
    rows = []
    for lv in controls.sequences(cp, levels):
        if lv.n == 0:
            log_band = lv.log_lam
        else:
            log_band = math.log(5.0) + lv.log_lam + math.log1p(math.exp(lv.log_mu - lv.log_lam) / 5.0)
        band = math.exp(log_band) if log_band < 700 else math.inf
        feasible = lv.feasible(N) if lv.n > 0 else (lv.lam is not None and lv.lam <= N // 2)
        rows.append({"n": lv.n, "log_lambda": lv.log_lam, "band": band, "nyquist": N // 2, "feasible": feasible})
    return rows


# ---------------------------------------------------------------------------
# pipeline


def default_stride(T: int) -> int:
    """Residual evaluation stride at the deepest level: every frame up to 257 frames, else ~9 frames."""
    return 1 if T <= 257 else int(math.ceil((T - 1) / 8))


def _scheme_config(cfg: dict, levels: int, T: int) -> scheme.SchemeConfig:
    dirs = scheme.DERIVED_DIRECTIONS if cfg["directions"] == "derived" else scheme.ALTERNATE_DIRECTIONS
    stride = cfg["eval_stride"] or default_stride(T)
    return scheme.SchemeConfig(N=int(cfg["grid"]), levels=levels, block=scheme.BlockConfig(*dirs, C0=cfg["C0"]),
                               nu=cfg["nu"], gamma=cfg["gamma"], eval_stride=int(stride))


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as ex:
        return list(ex.map(fn, items))


def estimate_cz(cfg: dict, K: int, samples: int, scale: float = 1.0) -> noise.CzEstimate:
    """Cz on its own coarse time grid; sample s uses the same driver keys as in the runs."""
    grid = tl.TimeGrid.covering(cfg["T"], cfg["cz_dt"])
    ncfg = noise_config(cfg, K)
    paths = [noise.generate(ncfg, grid, int(cfg["grid"]), s).scaled(scale) for s in range(samples)]
    spec = noise.MomentSpec(m=int(cfg["m"]), alpha=cfg["alpha"], kappa=cfg["kappa"], samples=samples,
                            bootstrap=int(cfg["bootstrap"]), seed=int(cfg["seed"]))
    return noise.estimate_Cz(paths, spec)


def sample_levels(z: noise.NoisePath, cp: controls.ControlParams, scfg: scheme.SchemeConfig, defects: bool) -> dict:
    """Run one noise sample through all levels and reduce it to per-window numbers."""
    states = scheme.run(z, cp, scfg)
    grid = z.grid
    times = grid.times
    out = {"q": [], "g": [], "defect": [], "clamp_fraction": [], "max_ratio": []}
    for st in states:
        rec = st.record
        out["q"].append(dg.window_sups(rec.xnorm, times[rec.frames], grid))
        out["clamp_fraction"].append(rec.clamp_fraction)
        out["max_ratio"].append(rec.max_ratio)
        if st.level >= 1:
            fr = scheme._eval_frames(grid.count, scfg.eval_stride)
            out["g"].append(dg.g_local_norm(st, frames=fr))
        if defects:
            out["defect"].append(dg.total_defect(st, z, nu=scfg.nu, gamma=scfg.gamma))
    out["states"] = states
    return out


def run_pipeline(cfg: dict, out_dir: str | None = None, keep_states: bool = False) -> dict:
    """plan -> Cz -> calibration -> levels -> ledger; writes artifacts when out_dir is given."""
    timing = {}
    t_all = time.perf_counter()
    try:
        cp = plan_from(cfg)
    except controls.PlannerError as e:
        raise CliError(EXIT_INFEASIBLE, str(e))
    levels, N = int(cfg["levels"]), int(cfg["grid"])
    feas = feasibility_rows(cp, N, levels)
    if not all(r["feasible"] for r in feas):
        raise CliError(EXIT_INFEASIBLE, "level infeasible at this grid\n" + _dump(feas))
    seq = controls.sequences(cp, levels)
    K = int(cfg["K"]) if cfg["K"] is not None else int(seq[levels].lam)
    samples = int(cfg["samples"])
    workers = sp.fft_workers()
    noise_config(cfg, K).check(cfg["kappa"], strict=cfg["mode"] != "demo")

    t = time.perf_counter()
    cz = estimate_cz(cfg, K, int(cfg["cz_samples"] or samples))
    timing["cz"] = time.perf_counter() - t
    cp = cp.with_calibration(Cz=cz.value)

    grid = scheme.time_grid_for(cp, levels, T=cfg["T"], dt=cfg["dt"])
    scfg = _scheme_config(cfg, levels, grid.count)
    p = 2 * cp.m

    # start condition: ||q_0|| <= r_0 = C_start (Cz^2 + 1); q_0 only sees modes up to lambda_0
    t = time.perf_counter()
    lam0 = int(seq[0].lam)
    ncfg0 = noise_config(cfg, lam0)

    def q0_rows(s):
        z0 = noise.generate(ncfg0, grid, N, s)
        st = scheme.init(z0, cp, scfg, all_frames=levels >= 1 or scfg.eval_stride == 1)
        return dg.window_sups(st.record.xnorm, grid.times[st.record.frames], grid)

    q0 = dg.mc_local_norm(np.stack(_map(q0_rows, range(samples), workers)), p, int(cfg["bootstrap"]), int(cfg["seed"]))
    C_start = dg.calibrate_C_start(q0.ci_hi, cz.value) if cfg["calibrate"] else float(cfg["C_start"])
    cp = cp.with_calibration(C_start=C_start, Cz=cz.value)
    timing["calibration"] = time.perf_counter() - t

    t = time.perf_counter()
    ncfg = noise_config(cfg, K)

    def one(s):
        z = noise.generate(ncfg, grid, N, s)
        res = sample_levels(z, cp, scfg, bool(cfg["defects"]))
        if not (keep_states or (s == 0 and out_dir)):
            res.pop("states")
        return res

    per = _map(one, range(samples), workers)
    timing["levels"] = time.perf_counter() - t

    q_est = {n: dg.mc_local_norm(np.stack([r["q"][n] for r in per]), p, int(cfg["bootstrap"]), int(cfg["seed"]))
             for n in range(levels + 1)}
    ledger = dg.error_ledger(cp, cz.value, levels, q_est)
    ineq = dg.check_iteration_inequality(ledger, cp.C, cp) if levels >= 1 else None
    g_est = {n: dg.mc_local_norm(np.stack([r["g"][n - 1] for r in per]), p, int(cfg["bootstrap"]), int(cfg["seed"]))
             for n in range(1, levels + 1)}
    report = {
        "mode": cp.mode,
        "controls": cp.to_json(),
        "Cz": {"value": cz.value, "space": cz.space_term, "time": cz.time_term, "ci": list(cz.ci), "K": K},
        "C_start": C_start,
        "q0_start": q0.as_dict(),
        "grid": {"N": N, "t0": grid.t0, "dt": grid.dt, "count": grid.count, "eval_stride": scfg.eval_stride},
        "levels": [],
        "ledger": ledger.to_json(),
    }
    for n in range(levels + 1):
        lv = {"n": n, "r": seq_r(cp, n), "q": q_est[n].as_dict(), "q_within_r": q_est[n].ci_hi <= seq_r(cp, n),
              "clamp_fraction": float(np.mean([r["clamp_fraction"][n] for r in per])),
              "max_ratio": float(np.max([r["max_ratio"][n] for r in per]))}
        if n >= 1:
            lv["g"] = g_est[n].as_dict()
            row = ineq.rows[n - 1]
            lv["inequality"] = {"lhs": row[1], "rhs": row[2], "margin": row[3], "holds": bool(row[4])}
        if cfg["defects"]:
            d = np.array([r["defect"][n] for r in per])
            lv["defect"] = {"median": float(np.median(d)), "per_sample": d.tolist()}
        report["levels"].append(lv)
    if cfg["defects"] and levels >= 1:
        d0 = np.array([r["defect"][0] for r in per])
        dL = np.array([r["defect"][levels] for r in per])
        report["defect_decrease_fraction"] = float(np.mean(dL < d0))
    if cfg["linearity"]:
        t = time.perf_counter()
        report["linearity"] = linearity_run(cfg, K, samples)
        timing["linearity"] = time.perf_counter() - t
    if cfg["regularity"] and per[0].get("states") is not None:
        report["regularity"] = []
        for th_t, th_x in cfg["regularity"]:
            try:
                rr = dg.regularity_probe(per[0]["states"], cp, th_t, th_x)
                report["regularity"].append({"theta_t": th_t, "theta_x": th_x, **asdict(rr)})
            except dg.RegularityRangeError as e:
                report["regularity"].append({"theta_t": th_t, "theta_x": th_x, "error": str(e)})
    report["pass"] = pass_flags(report)
    timing["total"] = time.perf_counter() - t_all
    result = {"cp": cp, "report": report, "ledger": ledger, "per_sample": per, "timing": timing, "config": cfg}
    if out_dir is not None:
        write_run(out_dir, cfg, result)
    return result


def seq_r(cp: controls.ControlParams, n: int) -> float:
    return controls.sequences(cp, n)[n].r


def pass_flags(report: dict) -> dict:
    flags = {"q0_start": report["q0_start"]["ci_hi"] <= report["levels"][0]["r"]}
    for lv in report["levels"][1:]:
        flags[f"q{lv['n']}_within_r"] = bool(lv["q_within_r"])
        flags[f"inequality_{lv['n']}"] = bool(lv["inequality"]["holds"])
    if "linearity" in report:
        flags["linearity"] = bool(report["linearity"]["consistent_with_zero"])
    return flags


def linearity_run(cfg: dict, K: int, samples: int) -> dict:
    """Scale the noise by sigma (same drivers), recalibrate, and fit ||g|| against the measured Cz."""
    rows, czs, gs = [], [], []
    levels, N = int(cfg["levels"]), int(cfg["grid"])
    p = 2 * int(cfg["m"])
    for sigma in cfg["linearity"]:
        sub = dict(cfg, amplitude=cfg["amplitude"] * sigma)
        cz = estimate_cz(sub, K, int(cfg["cz_samples"] or samples))
        cp = plan_from(sub).with_calibration(Cz=cz.value)
        grid = scheme.time_grid_for(cp, levels, T=cfg["T"], dt=cfg["dt"])
        scfg = _scheme_config(sub, levels, grid.count)
        ncfg = noise_config(sub, K)
        zs = [noise.generate(ncfg, grid, N, s) for s in range(samples)]
        recs = [scheme.init(z, cp, scfg).record for z in zs]
        q0 = np.stack([dg.window_sups(r.xnorm, grid.times[r.frames], grid) for r in recs])
        q0e = dg.mc_local_norm(q0, p, int(cfg["bootstrap"]), int(cfg["seed"]))
        cp = cp.with_calibration(C_start=dg.calibrate_C_start(q0e.ci_hi, cz.value), Cz=cz.value)
        g_rows = []
        for z in zs:
            states = scheme.run(z, cp, scfg, last_residual=False)
            fr = scheme._eval_frames(grid.count, scfg.eval_stride)
            g_rows.append(dg.g_local_norm(states[-1], frames=fr))
        g_rows = np.stack(g_rows)
        est = dg.mc_local_norm(g_rows, p, int(cfg["bootstrap"]), int(cfg["seed"]))
        rows.append(g_rows)
        czs.append(cz.value)
        gs.append({"sigma": sigma, "Cz": cz.value, "C_start": cp.C_start, "g": est.as_dict()})
    fit = dg.linearity_fit(np.array(czs), rows, p, int(cfg["bootstrap"]), int(cfg["seed"]))
    return {"points": gs, "coeffs": list(fit.coeffs), "c2_ci": list(fit.c2_ci),
            "consistent_with_zero": fit.consistent_with_zero}


def write_run(out_dir: str, cfg: dict, result: dict) -> None:
    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    files = []
    ledger_path = os.path.join(out_dir, "ledger.csv")
    result["ledger"].write_csv(ledger_path)
    files.append("ledger.csv")
    _write_text(os.path.join(out_dir, "report.json"), _dump(result["report"]))
    files.append("report.json")
    states = result["per_sample"][0].get("states")
    if states is not None:
        for st in states:
            name = f"checkpoints/level{st.level}_g.tfld"
            M = sp.fast_even_size(2 * int(math.ceil(st.blocks.band)) + 4)
            last = st.grid.count - 1
            tfld.write_field(os.path.join(out_dir, name), sp.TorusField.from_coeffs(st.g_coeffs(M, [last])[0]))
            files.append(name)
            if st.q is not None and len(st.record.frames):
                name = f"checkpoints/level{st.level}_q.tfld"
                tfld.write_field(os.path.join(out_dir, name), sp.TorusField.from_coeffs(st.q[-1]))
                files.append(name)
    manifest = {
        "command": "run",
        "version": __version__,
        "mode": result["cp"].mode,
        "seed": int(cfg["seed"]),
        "config": cfg,
        "controls": result["cp"].to_json(),
        "noise": noise_config(cfg, result["report"]["Cz"]["K"]).to_json(),
        "threads_independent": True,
        "files": {f: _sha256(os.path.join(out_dir, f)) for f in sorted(files)},
    }
    _write_text(os.path.join(out_dir, "manifest.json"), _dump(manifest))
    _write_text(os.path.join(out_dir, "timing.json"), _dump(result["timing"]))


# ---------------------------------------------------------------------------
# subcommands


def cmd_plan(args) -> int:
    cfg = merge_config(args, dict(RUN_DEFAULTS, mode="strict", a=None, b=None, beta=None))
    try:
        cp = plan_from(cfg)
    except controls.PlannerError as e:
        print(json.dumps({"error": str(e)}), file=sys.stderr)
        return EXIT_INFEASIBLE
    n_max = int(args.levels or 2)
    rep = controls.check_conditions(cp, n_max)
    out = {"controls": cp.to_json(), "conditions": rep.as_dict(), "lattice_min_a": cp.lattice_a}
    if args.grid:
        out["feasibility"] = feasibility_rows(cp, int(args.grid), n_max)
    sys.stdout.write(_dump(out))
    if cp.mode in ("demo", "lattice"):
        for name, n, ok in rep.failed():
            warnings.warn(f"demo mode: condition {name} (n={n}) does not hold", stacklevel=1)
        return EXIT_OK
    return EXIT_OK if rep.strict_ok else EXIT_INFEASIBLE


def cmd_noise(args) -> int:
    cfg = merge_config(args, RUN_DEFAULTS)
    N = int(cfg["grid"])
    ncfg = noise_config(cfg, cfg["K"])
    ncfg.check(cfg["kappa"], strict=cfg["mode"] != "demo")
    grid = tl.TimeGrid.covering(cfg["T"], cfg["dt"] or cfg["cz_dt"])
    os.makedirs(args.out, exist_ok=True)
    K = ncfg.cutoff(N)
    Ns = min(N, sp.fast_even_size(2 * K + 2))
    files = []
    paths = []
    for s in range(int(cfg["samples"])):
        z = noise.generate(ncfg, grid, N, s)
        paths.append(z)
        name = f"noise_s{s:04d}.tfld"
        tfld.write_frames(os.path.join(args.out, name), sp.inverse(z.coeffs(Ns)), grid.t0, grid.dt)
        files.append(name)
    side = {"config": ncfg.to_json(), "seed": ncfg.seed, "kind": ncfg.kind, "N_saved": Ns, "N": N,
            "grid": {"t0": grid.t0, "dt": grid.dt, "count": grid.count}}
    if args.estimate_cz:
        spec = noise.MomentSpec(m=int(cfg["m"]), alpha=cfg["alpha"], kappa=cfg["kappa"], samples=len(paths),
                                bootstrap=int(cfg["bootstrap"]), seed=ncfg.seed)
        cz = noise.estimate_Cz(paths, spec)
        side["Cz"] = {"value": cz.value, "space": cz.space_term, "time": cz.time_term, "ci": list(cz.ci)}
    side["files"] = {f: _sha256(os.path.join(args.out, f)) for f in files}
    _write_text(os.path.join(args.out, "noise.json"), _dump(side))
    sys.stdout.write(_dump({k: v for k, v in side.items() if k != "files"}))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = merge_config(args, RUN_DEFAULTS)
    res = run_pipeline(cfg, args.out)
    sys.stdout.write(_dump({"pass": res["report"]["pass"], "out": args.out}))
    return EXIT_OK


def _require(path: str) -> None:
    if not os.path.exists(path):
        raise CliError(EXIT_MISSING, f"missing artifact: {path}")


def cmd_verify(args) -> int:
    """Check file hashes and re-evaluate the error terms from the stored manifest."""
    mpath = os.path.join(args.run, "manifest.json")
    _require(mpath)
    with open(mpath) as fh:
        man = json.load(fh)
    problems = []
    for name, digest in man["files"].items():
        path = os.path.join(args.run, name)
        _require(path)
        if _sha256(path) != digest:
            problems.append(f"hash mismatch: {name}")
    cp = controls_from_json(man["controls"])
    levels = int(man["config"]["levels"])
    with open(os.path.join(args.run, "report.json")) as fh:
        rep = json.load(fh)
    fresh = dg.error_ledger(cp, rep["Cz"]["value"], levels)
    stored = {(r["level"], r["quantity"]): r["value"] for r in read_ledger(os.path.join(args.run, "ledger.csv"))}
    for n, q, v, *_ in fresh.rows():
        if q == "q_norm":
            continue
        if stored.get((str(n), q)) != str(dg._fmt(v)):
            problems.append(f"ledger value differs: level {n} {q}")
    sys.stdout.write(_dump({"ok": not problems, "problems": problems}))
    return EXIT_OK if not problems else EXIT_FAIL


def controls_from_json(d: dict) -> controls.ControlParams:
    d = dict(d)
    for key in ("a", "lattice_a", "closing_a", "a0"):
        if isinstance(d.get(key), dict):
            raise CliError(EXIT_FAIL, f"{key} is stored only as a logarithm")
    return controls.ControlParams(**d)


def read_ledger(path: str) -> list:
    _require(path)
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _dat_item(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _write_dat(path: str, header: list, rows: list) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("# " + " ".join(header) + "\n")
        for r in rows:
            fh.write(" ".join(_dat_item(x) for x in r) + "\n")


def cmd_report(args) -> int:
    """gnuplot-ready .dat files, matching PNG figures and a summary table."""
    run = args.run
    rows = read_ledger(os.path.join(run, "ledger.csv"))
    _require(os.path.join(run, "report.json"))
    with open(os.path.join(run, "report.json")) as fh:
        rep = json.load(fh)
    out = args.out or os.path.join(run, "plots")
    os.makedirs(out, exist_ok=True)
    by = {}
    for r in rows:
        by.setdefault(int(r["level"]), {})[r["quantity"]] = r
    res_rows = []
    for n in sorted(by):
        q = by[n].get("q_norm")
        r_n = float(by[n]["r"]["value"])
        if q is not None:
            res_rows.append((n, r_n, float(q["value"]), float(q["ci_lo"]), float(q["ci_hi"])))
    _write_dat(os.path.join(out, "residual.dat"), ["n", "r_n", "measured", "ci_lo", "ci_hi"], res_rows)
    err_rows = [(n, *[float(by[n]["E_" + k]["value"]) for k in dg.ERROR_KEYS]) for n in sorted(by) if n >= 1]
    _write_dat(os.path.join(out, "errors.dat"), ["n", *("E_" + k for k in dg.ERROR_KEYS)], err_rows)
    lin_rows = []
    if "linearity" in rep:
        lin_rows = [(p["sigma"], p["Cz"], p["g"]["value"], p["g"]["ci_lo"], p["g"]["ci_hi"]) for p in rep["linearity"]["points"]]
        _write_dat(os.path.join(out, "linearity.dat"), ["sigma", "Cz", "g_norm", "ci_lo", "ci_hi"], lin_rows)
    reg_rows = []
    for item in rep.get("regularity", []):
        for i, v in enumerate(item.get("increments", []), start=1):
            reg_rows.append((item["theta_t"], item["theta_x"], i, v))
    if reg_rows:
        _write_dat(os.path.join(out, "regularity.dat"), ["theta_t", "theta_x", "n", "increment"], reg_rows)
    from . import plots

    plots.residual_plot(res_rows, os.path.join(out, "residual.png"))
    if err_rows:
        plots.error_stack_plot(err_rows, dg.ERROR_KEYS, os.path.join(out, "errors.png"))
    if lin_rows:
        plots.linearity_plot(lin_rows, rep["linearity"]["coeffs"], os.path.join(out, "linearity.png"))
    if reg_rows:
        plots.regularity_plot(reg_rows, os.path.join(out, "regularity.png"))
    flags = rep.get("pass", {})
    lines = [f"mode {rep['mode']}  Cz {rep['Cz']['value']:.4g}  C_start {rep['C_start']:g}"]
    for r in res_rows:
        lines.append(f"level {r[0]}: r={r[1]:.4g} measured={r[2]:.4g} ci=({r[3]:.4g}, {r[4]:.4g})")
    for k in sorted(flags):
        lines.append(f"{k}: {'pass' if flags[k] else 'FAIL'}")
    print("\n".join(lines))
    if rep["mode"] in ("strict", "lattice") and not all(flags.values()):
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_physics(p, required: bool = False):
    p.add_argument("--config", help="JSON file with defaults for any flag (flags win)")
    p.add_argument("--alpha", type=float, required=required)
    p.add_argument("--kappa", type=float, required=required)
    p.add_argument("--gamma", type=float, required=required)
    p.add_argument("--m", type=int)
    p.add_argument("--nu", type=float)
    p.add_argument("--C", type=float)
    p.add_argument("--C0", type=float)
    p.add_argument("--C-start", dest="C_start", type=float)
    p.add_argument("--mode", choices=["strict", "lattice", "demo"])
    p.add_argument("--a", type=int)
    p.add_argument("--b", type=int)
    p.add_argument("--beta", type=float)


def _add_noise(p):
    p.add_argument("--noise", choices=["wiener", "fbm", "fourth_moment"])
    p.add_argument("--delta", type=float)
    p.add_argument("--hurst", type=float)
    p.add_argument("--K", type=int, help="noise cutoff (default: deepest lambda for runs, N/3 otherwise)")
    p.add_argument("--amplitude", type=float)
    p.add_argument("--grid", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--T", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--bootstrap", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cisqg", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="choose control parameters and check their conditions")
    _add_physics(p, required=True)
    p.add_argument("--levels", type=int, help="levels to check (default 2)")
    p.add_argument("--grid", type=int, help="also report level feasibility on this grid")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("noise", help="sample stochastic convolutions")
    _add_physics(p)
    _add_noise(p)
    p.add_argument("--estimate-cz", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("run", help="run the iteration on a noise ensemble and write the ledger")
    _add_physics(p)
    _add_noise(p)
    p.add_argument("--levels", type=int)
    p.add_argument("--eval-stride", dest="eval_stride", type=int)
    p.add_argument("--cz-dt", dest="cz_dt", type=float)
    p.add_argument("--cz-samples", dest="cz_samples", type=int)
    p.add_argument("--no-calibrate", dest="calibrate", action="store_const", const=False)
    p.add_argument("--no-defects", dest="defects", action="store_const", const=False)
    p.add_argument("--directions", choices=["derived", "alternate"])
    p.add_argument("--linearity", help="comma-separated noise scalings, e.g. 0.5,1,2,4")
    p.add_argument("--regularity", help="semicolon-separated theta_t,theta_x pairs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="check hashes and re-evaluate the ledger of a run")
    p.add_argument("run")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="write .dat/.png summaries of a run")
    p.add_argument("run")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(str(e), file=sys.stderr)
        return e.code
    except (controls.PlannerError, noise.NoiseError) as e:
        print(str(e), file=sys.stderr)
        return EXIT_INFEASIBLE if isinstance(e, controls.PlannerError) else EXIT_USAGE
    except scheme.InfeasibleLevel as e:
        print(str(e), file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
