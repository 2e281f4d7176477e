"""Scenario runner: single runs, time series, and communication stress.

Every command writes a deterministic summary.json plus plot-ready CSVs,
and renders the matching PNG figure next to each CSV.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import data_path, report
from .commsim import build_topology, load_topology
from .coordinator import ConvergenceCriteria, Coordinator
from .engine import (EngineError, build_area_workspaces, collect_injections,
                     replay_dispatch, solve_central_linear)
from .feeder import (FeederError, apply_der_scenario, parse_feeder,
                     parse_partition, scale_loads)
from .powerflow import PowerFlowError, slack_phasors, solve_powerflow, total_loss

MODES = ("powerflow", "central-linear", "central-linear-dt",
         "distributed-linear", "distributed-linear-dt")

BUILTIN_FEEDERS = {"ieee123": "ieee123.json"}
BUILTIN_PARTITIONS = {"ieee123-4area": "ieee123_areas4.json"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    feeder: str = "ieee123"
    partition: str = "ieee123-4area"
    objective: str = "loss-min"
    scenario: str = "i"
    mode: str = "distributed-linear-dt"
    comm: str = "ideal"
    bandwidth_bps: float = 3000.0
    delay_s: float = 1e-4
    seed: int = 0
    steps: int = 60
    load_factor: float = 1.0
    load_min: float = 0.78
    load_max: float = 0.98
    slack_voltage: float = 1.03
    p_fixed_kw: float | None = None
    tol_v: float = 1e-4
    tol_p: float = 1e-4
    max_macro_iterations: int = 50
    out: str = "out"

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.objective not in ("loss-min", "der-max"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if not (0 < self.load_min <= self.load_max):
            raise ConfigError("need 0 < load_min <= load_max")
        if self.load_factor <= 0:
            raise ConfigError("load factor must be positive")


def _resolve(path: str, builtin: dict) -> Path:
    if path in builtin:
        return Path(str(data_path(builtin[path])))
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"file not found: {path}")
    return p


def load_inputs(cfg: RunConfig):
    model = parse_feeder(_resolve(cfg.feeder, BUILTIN_FEEDERS))
    part = parse_partition(_resolve(cfg.partition, BUILTIN_PARTITIONS), model)
    if cfg.scenario in ("none", ""):
        pass
    elif cfg.scenario in ("i", "ii", "iii"):
        mode = "reactive-dispatch" if cfg.objective == "loss-min" else "active-dispatch"
        model = apply_der_scenario(model, cfg.scenario, mode=mode,
                                   p_fixed_kw=cfg.p_fixed_kw)
    else:
        with open(_resolve(cfg.scenario, {})) as fh:
            model = apply_der_scenario(model, json.load(fh),
                                       p_fixed_kw=cfg.p_fixed_kw)
    if cfg.load_factor != 1.0:
        model = scale_loads(model, cfg.load_factor)
    return model, part


def comm_topology(cfg: RunConfig, part):
    if cfg.comm in ("ideal", "ring", "blackout", "none"):
        return build_topology(
            cfg.comm, part.area_ids,
            interfaces=[(i.parent_area, i.child_area) for i in part.interfaces],
            bandwidth_bps=cfg.bandwidth_bps, delay_s=cfg.delay_s)
    return load_topology(_resolve(cfg.comm, {}))


# ---------------------------------------------------------------------------
# Single run


def _objective_value(cfg, loss_kw, gen_kw):
    """loss-min reports kW of loss, der-max reports MW of generation."""
    if cfg.objective == "loss-min":
        return round(loss_kw, 6)
    return round(gen_kw / 1000.0, 6)


def _voltage_rows(model, sol):
    rows = []
    for bus in model.buses:
        i = model.bus_index[bus.id]
        for p in bus.phases:
            j = "abc".index(p)
            V = sol.V[i, j]
            rows.append((bus.id, p, float(np.abs(V)),
                         float(np.degrees(np.angle(V)))))
    return rows


def _flow_rows(model, sol):
    rows = []
    i_base = model.s_base_kva_1ph / (model.base_kv / np.sqrt(3.0))
    for k, br in enumerate(model.branches):
        for p in br.phases:
            j = "abc".index(p)
            S = sol.S_send[k, j]
            rows.append((br.name, p, float(S.real * model.s_base_kva_1ph),
                         float(S.imag * model.s_base_kva_1ph),
                         float(np.abs(sol.I[k, j]) * i_base)))
    return rows


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(row)


def execute_run(cfg: RunConfig, out_dir: Path | None = None) -> dict:
    """Run one configured experiment; returns the summary dict."""
    model, part = load_inputs(cfg)
    out = report.ensure_dir(out_dir or cfg.out)
    t_wall = time.time()
    summary = {
        "objective_kw_or_mw": None, "rounds": 0, "macro_iterations": 0,
        "converged": True, "premature_dispatches": 0, "sim_time_s": 0.0,
        "meta": {"mode": cfg.mode, "objective": cfg.objective,
                 "scenario": cfg.scenario, "seed": cfg.seed,
                 "slack_voltage": cfg.slack_voltage,
                 "load_factor": cfg.load_factor},
    }
    twin_sol = None
    log_lines = []

    if cfg.mode == "powerflow":
        twin_sol = solve_powerflow(model,
                                   slack_voltage=slack_phasors(cfg.slack_voltage))
        gen_kw = model.kw(sum((d.p_fixed if d.mode == "reactive-dispatch"
                               else d.s_rated).sum() for d in model.ders)) \
            if model.ders else 0.0
        summary["objective_kw_or_mw"] = _objective_value(
            cfg, total_loss(twin_sol), gen_kw)

    elif cfg.mode in ("central-linear", "central-linear-dt"):
        project = cfg.mode.endswith("-dt")
        sol = solve_central_linear(model, cfg.objective,
                                   slack_voltage=cfg.slack_voltage,
                                   project_twin=project)
        gen_kw = sol.objective_linear_kw
        if project:
            if sol.twin is None:
                raise EngineError("twin projection failed for the central dispatch")
            twin_sol = sol.twin
            loss_kw = total_loss(twin_sol)
        else:
            loss_kw = sol.objective_linear_kw
        summary["objective_kw_or_mw"] = _objective_value(cfg, loss_kw, gen_kw)
        if not project:
            # report the linear state as the solution dump
            vrows = []
            for bus in model.buses:
                for p in bus.phases:
                    v2 = sol.linear_state.v[bus.id]["abc".index(p)]
                    vrows.append((bus.id, p, float(np.sqrt(max(v2, 0.0))), ""))
            _write_csv(out / "bus_voltages.csv",
                       ["bus", "phase", "vmag_pu", "vang_deg"], vrows)
            report.voltage_profile_png(out / "voltage_profile.png",
                                       [(b, p, v) for b, p, v, _ in vrows],
                                       title="Bus voltages (linear estimate)")
            frows = []
            for br in model.branches:
                for p in br.phases:
                    j = "abc".index(p)
                    frows.append((br.name, p,
                                  sol.linear_state.flows_p[br.name][j] * model.s_base_kva_1ph,
                                  sol.linear_state.flows_q[br.name][j] * model.s_base_kva_1ph,
                                  ""))
            _write_csv(out / "branch_flows.csv",
                       ["branch", "phase", "P_kw", "Q_kvar", "I_amp"], frows)

    elif cfg.mode in ("distributed-linear", "distributed-linear-dt"):
        use_twin = cfg.mode.endswith("-dt")
        workspaces = build_area_workspaces(model, part, cfg.objective)
        topo = comm_topology(cfg, part)
        criteria = ConvergenceCriteria(tol_v=cfg.tol_v, tol_p=cfg.tol_p,
                                       max_macro_iterations=cfg.max_macro_iterations)
        coord = Coordinator(model, part, workspaces, topo, criteria=criteria,
                            use_twin=use_twin, root_voltage=cfg.slack_voltage)
        res = coord.run()
        sols = res.solutions()
        summary["rounds"] = res.rounds
        summary["macro_iterations"] = res.macro_iterations
        summary["converged"] = bool(res.converged)
        summary["premature_dispatches"] = res.premature_dispatches
        summary["sim_time_s"] = round(res.sim_time_s, 6)
        gen_kw = sum(s.objective_linear_kw for s in sols.values() if s) \
            if cfg.objective == "der-max" else 0.0
        if any(s is None for s in sols.values()):
            summary["converged"] = False
            loss_kw = float("nan")
        else:
            inj = collect_injections(
                [(workspaces[a].submodel, s) for a, s in sols.items()])
            twin_sol = replay_dispatch(model, inj, slack_voltage=cfg.slack_voltage)
            loss_kw = (total_loss(twin_sol) if use_twin
                       else sum(s.objective_linear_kw for s in sols.values()))
        summary["objective_kw_or_mw"] = _objective_value(cfg, loss_kw, gen_kw)
        res.write_trace_csv(out / "coordinator_trace.csv")
        coord.loop.write_trace_csv(out / "comm_trace.csv")
        res.write_iteration_log(out / "iteration_log.json")
        with open(out / "comm_topology.json", "w") as fh:
            json.dump(topo.to_json(), fh, indent=1, sort_keys=True)
        report.convergence_png(out / "convergence.png", coord.residual_by_round,
                               tol=min(cfg.tol_v, cfg.tol_p))
    else:
        raise ConfigError(f"unhandled mode {cfg.mode!r}")

    if twin_sol is not None:
        vrows = _voltage_rows(model, twin_sol)
        _write_csv(out / "bus_voltages.csv",
                   ["bus", "phase", "vmag_pu", "vang_deg"],
                   [(b, p, f"{v:.8f}", f"{a:.6f}") for b, p, v, a in vrows])
        _write_csv(out / "branch_flows.csv",
                   ["branch", "phase", "P_kw", "Q_kvar", "I_amp"],
                   [(n, p, f"{pk:.6f}", f"{qk:.6f}", f"{ia:.6f}")
                    for n, p, pk, qk, ia in _flow_rows(model, twin_sol)])
        report.voltage_profile_png(out / "voltage_profile.png",
                                   [(b, p, v) for b, p, v, _ in vrows])

    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    log_lines.append(f"wall_time_s={time.time() - t_wall:.3f}")
    (out / "run.log").write_text("\n".join(log_lines) + "\n")
    return summary


# ---------------------------------------------------------------------------
# Time series


def execute_timeseries(cfg: RunConfig, out_dir: Path | None = None) -> dict:
    model0, part = load_inputs(cfg)
    out = report.ensure_dir(out_dir or cfg.out)
    rng = np.random.default_rng(cfg.seed)
    rows = []
    dist_rows = []
    mask = np.array([b.mask for b in model0.buses])
    any_converged = False

    for step in range(cfg.steps):
        factor = float(rng.uniform(cfg.load_min, cfg.load_max))
        model = scale_loads(model0, factor)
        base = solve_powerflow(model, slack_voltage=slack_phasors(cfg.slack_voltage))
        try:
            step_cfg = RunConfig(**{**asdict(cfg), "load_factor": 1.0})
            summary, twin = _run_on_model(step_cfg, model, part)
            converged = summary["converged"]
        except (EngineError, PowerFlowError) as exc:
            summary, twin, converged = None, None, False
        any_converged |= bool(converged)

        vb = base.vmag[mask]
        if twin is not None:
            vo = twin.vmag[mask]
            vmin, vmax = float(vo.min()), float(vo.max())
            upper = int(np.sum(vo > 1.05 + 1e-9))
            lower = int(np.sum(vo < 0.95 - 1e-9))
            obj = summary["objective_kw_or_mw"]
            for b in model.buses:
                i = model.bus_index[b.id]
                for p in b.phases:
                    j = "abc".index(p)
                    dist_rows.append((step, b.id, p,
                                      f"{float(base.vmag[i, j]):.6f}",
                                      f"{float(twin.vmag[i, j]):.6f}"))
        else:
            vmin = vmax = float("nan")
            upper = lower = -1
            obj = float("nan")
        rows.append((step, f"{factor:.6f}", obj, f"{vmin:.6f}", f"{vmax:.6f}",
                     upper, lower, int(bool(converged)),
                     int(np.sum(vb > 1.05 + 1e-9)), int(np.sum(vb < 0.95 - 1e-9))))

    _write_csv(out / "timeseries.csv",
               ["step", "load_factor", "objective_kw_or_mw", "vmin_pu", "vmax_pu",
                "upper_violations", "lower_violations", "converged",
                "baseline_upper_violations", "baseline_lower_violations"], rows)
    _write_csv(out / "voltage_distribution.csv",
               ["step", "bus", "phase", "v_baseline_pu", "v_optimized_pu"],
               dist_rows)
    if dist_rows:
        report.voltage_histogram_png(
            out / "voltage_distribution.png",
            [float(r[3]) for r in dist_rows], [float(r[4]) for r in dist_rows])
    report.timeseries_png(out / "timeseries.png",
                          [r[0] for r in rows],
                          [r[2] for r in rows],
                          "loss (kW)" if cfg.objective == "loss-min"
                          else "generation (MW)")
    summary = {
        "steps": cfg.steps, "seed": cfg.seed,
        "mean_objective": round(float(np.nanmean(
            [r[2] for r in rows if isinstance(r[2], float)])), 6),
        "nonconverged_steps": int(sum(1 for r in rows if not r[7])),
        "meta": {"mode": cfg.mode, "objective": cfg.objective,
                 "scenario": cfg.scenario},
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    summary["_all_failed"] = not any_converged
    return summary


def _run_on_model(cfg: RunConfig, model, part):
    """Solve one already-scaled model per cfg.mode; used by the time series."""
    if cfg.mode == "powerflow":
        twin = solve_powerflow(model, slack_voltage=slack_phasors(cfg.slack_voltage))
        gen_kw = model.kw(sum((d.p_fixed if d.mode == "reactive-dispatch"
                               else d.s_rated).sum() for d in model.ders)) \
            if model.ders else 0.0
        return {"objective_kw_or_mw": _objective_value(cfg, total_loss(twin), gen_kw),
                "converged": True}, twin
    if cfg.mode in ("central-linear", "central-linear-dt"):
        project = cfg.mode.endswith("-dt")
        sol = solve_central_linear(model, cfg.objective,
                                   slack_voltage=cfg.slack_voltage,
                                   project_twin=True)
        twin = sol.twin
        loss_kw = total_loss(twin) if twin is not None else sol.objective_linear_kw
        return {"objective_kw_or_mw": _objective_value(
            cfg, loss_kw if project else sol.objective_linear_kw,
            sol.objective_linear_kw),
            "converged": twin is not None}, twin
    use_twin = cfg.mode.endswith("-dt")
    workspaces = build_area_workspaces(model, part, cfg.objective)
    topo = comm_topology(cfg, part)
    criteria = ConvergenceCriteria(tol_v=cfg.tol_v, tol_p=cfg.tol_p,
                                   max_macro_iterations=cfg.max_macro_iterations)
    coord = Coordinator(model, part, workspaces, topo, criteria=criteria,
                        use_twin=use_twin, root_voltage=cfg.slack_voltage)
    res = coord.run()
    sols = res.solutions()
    if any(s is None for s in sols.values()):
        return {"objective_kw_or_mw": float("nan"), "converged": False}, None
    inj = collect_injections([(workspaces[a].submodel, s) for a, s in sols.items()])
    twin = replay_dispatch(model, inj, slack_voltage=cfg.slack_voltage)
    gen_kw = sum(s.objective_linear_kw for s in sols.values())
    loss_kw = total_loss(twin) if use_twin \
        else sum(s.objective_linear_kw for s in sols.values())
    return {"objective_kw_or_mw": _objective_value(cfg, loss_kw, gen_kw),
            "converged": bool(res.converged)}, twin


# ---------------------------------------------------------------------------
# Stress matrix


def execute_stress(cfg: RunConfig, cells, out_dir: Path | None = None) -> dict:
    out = report.ensure_dir(out_dir or cfg.out)
    rows = []
    for topo_kind, bw in cells:
        cell_cfg = RunConfig(**{**asdict(cfg), "comm": topo_kind,
                                "bandwidth_bps": float(bw),
                                "out": str(out / f"{topo_kind}_{int(bw)}")})
        try:
            summary = execute_run(cell_cfg)
            rows.append({"topology": topo_kind, "bandwidth_bps": float(bw),
                         "objective_kw_or_mw": summary["objective_kw_or_mw"],
                         "rounds": summary["rounds"],
                         "sim_time_s": summary["sim_time_s"],
                         "premature_dispatches": summary["premature_dispatches"],
                         "converged": summary["converged"]})
        except (EngineError, PowerFlowError, ConfigError) as exc:
            rows.append({"topology": topo_kind, "bandwidth_bps": float(bw),
                         "objective_kw_or_mw": float("nan"), "rounds": -1,
                         "sim_time_s": float("nan"), "premature_dispatches": -1,
                         "converged": False})
    _write_csv(out / "stress.csv",
               ["topology", "bandwidth_bps", "objective_kw_or_mw", "rounds",
                "sim_time_s", "premature_dispatches", "converged"],
               [[r["topology"], r["bandwidth_bps"], r["objective_kw_or_mw"],
                 r["rounds"], r["sim_time_s"], r["premature_dispatches"],
                 int(bool(r["converged"]))] for r in rows])
    report.stress_png(out / "stress.png",
                      [r for r in rows if r["topology"] != "blackout"])
    summary = {"cells": rows}
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    return summary


# ---------------------------------------------------------------------------
# Argument handling


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--feeder", default="ieee123")
    p.add_argument("--partition", default="ieee123-4area")
    p.add_argument("--objective", default="loss-min",
                   choices=["loss-min", "der-max"])
    p.add_argument("--scenario", default="i")
    p.add_argument("--mode", default="distributed-linear-dt", choices=MODES)
    p.add_argument("--comm", default="ideal")
    p.add_argument("--bandwidth-bps", type=float, default=3000.0)
    p.add_argument("--delay-s", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=60)
    p.add_argument("--load-factor", type=float, default=1.0)
    p.add_argument("--slack-voltage", type=float, default=1.03)
    p.add_argument("--p-fixed-kw", type=float, default=None)
    p.add_argument("--out", default="out")
    p.add_argument("--config", default=None,
                   help="JSON config; its values override the flags")


def _config_from_args(args) -> RunConfig:
    fields = {k: v for k, v in vars(args).items()
              if k in RunConfig.__dataclass_fields__}
    if args.config:
        with open(args.config) as fh:
            overrides = json.load(fh)
        unknown = set(overrides) - set(RunConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        fields.update(overrides)
    cfg = RunConfig(**fields)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dopf",
        description="Distributed OPF scenario runner for radial feeders")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "timeseries", "stress"):
        sp = sub.add_parser(name)
        _add_common(sp)
        if name == "timeseries":
            sp.add_argument("--load-min", type=float, default=0.78)
            sp.add_argument("--load-max", type=float, default=0.98)
        if name == "stress":
            sp.add_argument("--cells",
                            default="ideal:3000,ideal:2000,ideal:1000,"
                                    "ring:3000,ring:2000,ring:1000")
    args = parser.parse_args(argv)
    try:
        cfg = _config_from_args(args)
        if args.command == "run":
            summary = execute_run(cfg)
            if not summary["converged"]:
                return 2
        elif args.command == "timeseries":
            summary = execute_timeseries(cfg)
            if summary.pop("_all_failed", False):
                return 2
        else:
            cells = []
            for cell in args.cells.split(","):
                kind, _, bw = cell.partition(":")
                cells.append((kind.strip(), float(bw or cfg.bandwidth_bps)))
            execute_stress(cfg, cells)
        return 0
    except (ConfigError, FeederError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (EngineError, PowerFlowError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
