"""Acceptance suite: one test per shipped criterion.

Each test prints one PASS/FAIL line (run pytest with -s or -rA to see
them all). The heavyweight 123-bus runs execute once per session and are
shared. Tolerances are pinned here, not configurable.
"""

import json

import numpy as np
import pytest

from dopf.cli import RunConfig, execute_run
from dopf.commsim import build_topology
from dopf.coordinator import Coordinator
from dopf.engine import (build_area_workspaces, collect_injections,
                         replay_dispatch, solve_central_linear)
from dopf.feeder import apply_der_scenario
from dopf.powerflow import (evaluate_residuals, slack_phasors, solve_powerflow,
                            total_loss)
from dopf.qp import QpProblem, SolverSettings, project_disc, solve_lp, solve_qp
from oracles import (newton_powerflow, solve_lp_vertices, solve_qp_active_set)

import scipy.sparse as sp

SLACK = 1.03          # shipped 123-bus operating point (regulated head)
TOL_V = 1e-4
TOL_P = 1e-4


def report(num, name, ok, detail):
    line = f"ACCEPTANCE {num} [{name}]: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def scenario_models(ieee123):
    return {
        "i": apply_der_scenario(ieee123, "i", p_fixed_kw=50.0),
        "ii": apply_der_scenario(ieee123, "ii"),
        "iii": apply_der_scenario(ieee123, "iii"),
    }


@pytest.fixture(scope="module")
def runs(scenario_models, ieee123_partition):
    """Central and distributed solutions for every scenario/objective."""
    part = ieee123_partition
    itfs = [(i.parent_area, i.child_area) for i in part.interfaces]
    out = {}
    for scen, kind in (("i", "loss-min"), ("ii", "loss-min"), ("iii", "der-max")):
        m = scenario_models[scen]
        central = solve_central_linear(m, kind, slack_voltage=SLACK,
                                       project_twin=True)
        cell = {"model": m, "kind": kind, "central": central}
        for use_twin in (False, True):
            ws = build_area_workspaces(m, part, kind)
            topo = build_topology("ideal", part.area_ids, interfaces=itfs,
                                  bandwidth_bps=3000.0)
            coord = Coordinator(m, part, ws, topo, use_twin=use_twin,
                                root_voltage=SLACK)
            res = coord.run()
            inj = collect_injections(
                [(ws[a].submodel, s) for a, s in res.solutions().items()])
            replay = replay_dispatch(m, inj, slack_voltage=SLACK)
            cell["dt" if use_twin else "lin"] = {
                "coord": coord, "result": res, "replay": replay,
                "workspaces": ws,
            }
        out[scen] = cell
    return out


@pytest.fixture(scope="module")
def stress(scenario_models, ieee123_partition):
    part = ieee123_partition
    itfs = [(i.parent_area, i.child_area) for i in part.interfaces]
    m = scenario_models["ii"]
    cells = {}
    for topo_kind in ("ideal", "ring"):
        for bw in (3000.0, 2000.0, 1000.0):
            ws = build_area_workspaces(m, part, "loss-min")
            topo = build_topology(topo_kind, part.area_ids, interfaces=itfs,
                                  bandwidth_bps=bw)
            coord = Coordinator(m, part, ws, topo, use_twin=True,
                                root_voltage=SLACK)
            res = coord.run()
            inj = collect_injections(
                [(ws[a].submodel, s) for a, s in res.solutions().items()])
            replay = replay_dispatch(m, inj, slack_voltage=SLACK)
            cells[(topo_kind, bw)] = {
                "objective": total_loss(replay),
                "sim_time": res.sim_time_s,
                "premature": res.premature_dispatches,
                "converged": res.converged,
            }
    return cells


# ---------------------------------------------------------------------------


def test_criterion_1_powerflow_oracle(two_bus, five_bus, scenario_models, runs):
    worst_v = 0.0
    for model in (two_bus, five_bus):
        sol = solve_powerflow(model, tol=1e-12)
        V = newton_powerflow(model)
        worst_v = max(worst_v, float(np.max(np.abs(V - sol.V))))
    worst_res = 0.0
    for scen, cell in runs.items():
        base = solve_powerflow(cell["model"], slack_voltage=slack_phasors(SLACK))
        for sol in (base, cell["dt"]["replay"]):
            rep = evaluate_residuals(cell["model"], sol)
            worst_res = max(worst_res, rep.overall)
    ok = worst_v <= 1e-8 and worst_res <= 1e-6
    report(1, "powerflow oracle equivalence", ok,
           f"max |dV| vs dense Newton {worst_v:.2e} (<=1e-8); "
           f"max nonlinear residual on 123-bus solves {worst_res:.2e} (<=1e-6)")


def test_criterion_2_baseline_loss(scenario_models):
    sol = solve_powerflow(scenario_models["i"],
                          slack_voltage=slack_phasors(SLACK))
    loss = total_loss(sol)
    target = 63.132
    ok = abs(loss - target) / target <= 0.05
    report(2, "scenario (i) baseline loss", ok,
           f"measured {loss:.3f} kW vs {target} kW +-5% "
           f"({(loss - target) / target * 100:+.1f}%)")


def test_criterion_3_central_linear_lossmin(runs):
    li = total_loss(runs["i"]["central"].twin)
    lii = total_loss(runs["ii"]["central"].twin)
    ok_i = abs(li - 44.875) / 44.875 <= 0.05
    ok_ii = abs(lii - 26.508) / 26.508 <= 0.07
    report(3, "central linear loss-min", ok_i and ok_ii,
           f"(i) {li:.3f} kW vs 44.875 +-5% ({(li - 44.875) / 44.875 * 100:+.1f}%, "
           f"{'ok' if ok_i else 'out'}); "
           f"(ii) {lii:.3f} kW vs 26.508 +-7% ({(lii - 26.508) / 26.508 * 100:+.1f}%, "
           f"{'ok' if ok_ii else 'out'})")


def test_criterion_4_distributed_equals_central(runs):
    details = []
    ok = True
    for scen, cell in runs.items():
        central = cell["central"].objective_linear_kw
        dist = cell["lin"]["result"].objective_kw(False)
        rel = abs(dist - central) / abs(central)
        ok &= rel <= 0.005
        details.append(f"({scen}) {rel * 100:.3f}%")
    report(4, "distributed = central within 0.5%", ok, "; ".join(details))


def test_criterion_5_dt_fidelity(runs):
    nl_ref = 27.160
    dt_loss = total_loss(runs["ii"]["dt"]["replay"])
    lin_loss = runs["ii"]["lin"]["result"].objective_kw(False)
    ok_loss = abs(dt_loss - nl_ref) < abs(lin_loss - nl_ref)
    gen_dt = runs["iii"]["dt"]["result"].objective_kw(False)
    gen_lin = runs["iii"]["lin"]["result"].objective_kw(False)
    ok_gen = gen_dt >= gen_lin - 1e-6 and gen_dt <= 5400.0 + 1e-6
    report(5, "digital twin improves fidelity", ok_loss and ok_gen,
           f"loss-min (ii): |{dt_loss:.3f}-{nl_ref}|={abs(dt_loss - nl_ref):.3f} "
           f"< |{lin_loss:.3f}-{nl_ref}|={abs(lin_loss - nl_ref):.3f}; "
           f"der-max: {gen_dt / 1000:.4f} MW >= {gen_lin / 1000:.4f} MW, <= 5.4 MW")


def test_criterion_6_round_counts(runs):
    ok = True
    details = []
    floor = min(TOL_V, TOL_P) * 0.1
    for scen, cell in runs.items():
        for mode in ("lin", "dt"):
            res = cell[mode]["result"]
            coord = cell[mode]["coord"]
            ok &= res.converged and res.rounds <= 10
            rs = [v for _, v in sorted(coord.residual_by_round.items())]
            for a, b in zip(rs[1:], rs[2:]):   # after round 1
                if max(a, b) >= floor:
                    ok &= b <= a * (1 + 1e-9) + 1e-15
            details.append(f"{scen}/{mode}:{res.rounds}")
    report(6, "round counts and monotone residuals", ok,
           "rounds " + ", ".join(details) + " (all <=10, decreasing after round 1)")


def test_criterion_7_comm_robustness(stress):
    objs = [c["objective"] for c in stress.values()]
    spread = (max(objs) - min(objs)) / min(objs)
    ok_obj = spread <= 1e-3
    ok_time = True
    for topo in ("ideal", "ring"):
        times = [stress[(topo, bw)]["sim_time"] for bw in (3000.0, 2000.0, 1000.0)]
        ok_time &= times[0] <= times[1] + 1e-9 <= times[2] + 2e-9
    ring1k = stress[("ring", 1000.0)]
    ok_prem = ring1k["premature"] >= 1 and ring1k["converged"]
    ok = ok_obj and ok_time and ok_prem
    report(7, "communication robustness", ok,
           f"objective spread {spread * 100:.4f}% (<=0.1%); times weakly "
           f"increasing as bandwidth drops ({ok_time}); ring@1kbps premature "
           f"dispatches {ring1k['premature']} with recovery")


def test_criterion_8_feasibility_guarantee(runs, ieee123):
    mask = np.array([b.mask for b in ieee123.buses])
    ok = True
    details = []
    for scen in ("i", "ii"):
        vm = runs[scen]["dt"]["replay"].vmag[mask]
        low = float(vm.min())
        high = float(vm.max())
        ok &= low >= 0.95 - 1e-4 and high <= 1.05 + 1e-4
        details.append(f"loss-min ({scen}) v in [{low:.4f},{high:.4f}]")
    vm = runs["iii"]["dt"]["replay"].vmag[mask]
    upper = int(np.sum(vm > 1.05 + 1e-9))
    ok &= upper == 0
    details.append(f"der-max upper violations {upper}")
    report(8, "dispatch feasibility on the whole-feeder twin", ok,
           "; ".join(details))


def test_criterion_9_solver_oracles():
    tight = SolverSettings(eps_abs=1e-8, eps_rel=1e-8, max_iter=50000)
    rng = np.random.default_rng(2024)
    worst = 0.0
    n_qp = n_lp = 0
    while n_qp < 50:
        n, m = 20, 5
        B = rng.standard_normal((n, n))
        H = B @ B.T + 0.5 * np.eye(n)
        f = rng.standard_normal(n)
        A = rng.standard_normal((m, n))
        b = rng.standard_normal(m)
        ub = np.full(n, np.inf)
        lb = np.full(n, -np.inf)
        ub[:10] = rng.uniform(0.0, 0.5, 10)
        xo, fo = solve_qp_active_set(H, f, A=A, b=b, lb=lb, ub=ub)
        r = solve_qp(QpProblem(H=sp.csc_matrix(H), f=f, A=sp.csc_matrix(A),
                               b=b, lb=lb, ub=ub), tight)
        assert r.status == "optimal"
        worst = max(worst, float(np.max(np.abs(r.x - xo))), abs(r.objective - fo))
        n_qp += 1
    while n_lp < 50:
        n, meq = 15, 12
        A = rng.standard_normal((meq, n))
        b = rng.standard_normal(meq) * 0.3
        G = np.vstack([rng.standard_normal((6, n)), np.eye(n), -np.eye(n)])
        h = np.concatenate([rng.uniform(1.0, 2.0, 6), np.full(2 * n, 3.0)])
        c = rng.standard_normal(n)
        try:
            xo, fo = solve_lp_vertices(c, A=A, b=b, G=G, h=h)
        except RuntimeError:
            continue
        r = solve_lp(c, A=A, b=b, G=sp.csc_matrix(G), h=h, settings=tight)
        assert r.status == "optimal"
        worst = max(worst, abs(r.objective - fo))
        n_lp += 1
    disc_exact = (project_disc(6.0, 8.0, 5.0) == (3.0, 4.0)
                  and project_disc(3.0, 4.0, 10.0) == (3.0, 4.0)
                  and project_disc(0.0, 0.0, 1.0) == (0.0, 0.0))
    ok = worst <= 1e-5 and disc_exact
    report(9, "solver oracle battery", ok,
           f"100 instances, worst deviation {worst:.2e} (<=1e-5); "
           f"disc projection exact: {disc_exact}")


def test_criterion_10_determinism(tmp_path):
    outs = []
    for name in ("a", "b"):
        cfg = RunConfig(mode="distributed-linear-dt", objective="loss-min",
                        scenario="ii", seed=11, slack_voltage=SLACK,
                        out=str(tmp_path / name))
        execute_run(cfg)
        outs.append(tmp_path / name)
    same_summary = (outs[0] / "summary.json").read_bytes() == \
        (outs[1] / "summary.json").read_bytes()
    same_comm = (outs[0] / "comm_trace.csv").read_bytes() == \
        (outs[1] / "comm_trace.csv").read_bytes()
    same_coord = (outs[0] / "coordinator_trace.csv").read_bytes() == \
        (outs[1] / "coordinator_trace.csv").read_bytes()
    ok = same_summary and same_comm and same_coord
    report(10, "determinism", ok,
           f"summary identical: {same_summary}; event traces identical: "
           f"{same_comm and same_coord}")
