import numpy as np
import pytest

from conftest import CHAIN_AREAS
from dopf.commsim import build_topology
from dopf.coordinator import Coordinator
from dopf.engine import (AreaWorkspace, EngineError, boundary_observation,
                         build_area_workspaces, collect_injections,
                         decision_injections, replay_dispatch,
                         solve_central_linear)
from dopf.feeder import apply_der_scenario, area_submodel, partition_feeder
from dopf.linear import BoundaryConditions
from dopf.powerflow import evaluate_residuals, solve_powerflow, total_loss


def test_no_ders_reduces_to_feasibility(five_bus):
    sol = solve_central_linear(five_bus, "loss-min")
    assert sol.decisions == {}
    assert sol.objective_linear_kw > 0.0


def test_mode_compatibility_enforced(ieee123):
    m = apply_der_scenario(ieee123, "iii")
    with pytest.raises(EngineError, match="loss-min requires"):
        solve_central_linear(m, "loss-min")
    m = apply_der_scenario(ieee123, "i", p_fixed_kw=50.0)
    with pytest.raises(EngineError, match="der-max requires"):
        solve_central_linear(m, "der-max")


def test_single_area_equals_central(chain):
    part = partition_feeder(chain, {"all": [b.id for b in chain.buses]})
    central = solve_central_linear(chain, "loss-min")
    ws = build_area_workspaces(chain, part, "loss-min")["all"]
    bc = BoundaryConditions(ua_voltage=np.ones(3))
    local = ws.solve(bc, project_twin=False, area_name="all")
    assert local.solver_status == "optimal"
    assert abs(local.objective_linear_kw - central.objective_linear_kw) \
        / central.objective_linear_kw < 1e-4
    for key, val in central.decisions.items():
        assert abs(local.decisions[key] - val) < 1e-5


def test_leaf_area_passthrough(chain):
    # a leaf with zero internal load forwards exactly its withdrawals
    from conftest import chain_doc
    from dopf.feeder import model_from_dict
    doc = chain_doc()
    for bus in doc["buses"]:
        if bus["id"] in ("b5", "b6"):
            bus["load_kw"] = [0.0] * 3
            bus["load_kvar"] = [0.0] * 3
    doc["ders"] = []
    m = model_from_dict(doc)
    part = partition_feeder(m, CHAIN_AREAS)
    ws = AreaWorkspace(area_submodel(m, part, "a3"), "loss-min")
    bc = BoundaryConditions(ua_voltage=np.ones(3))
    sol = ws.solve(bc, project_twin=False, area_name="a3")
    obs = boundary_observation(ws, part, "a3", sol, use_twin=False)
    np.testing.assert_allclose(obs.ua_flow[0], 0.0, atol=1e-9)
    np.testing.assert_allclose(obs.ua_flow[1], 0.0, atol=1e-9)


def test_twin_projection_identity_injection(chain):
    part = partition_feeder(chain, CHAIN_AREAS)
    sub = area_submodel(chain, part, "a2")
    ws = AreaWorkspace(sub, "loss-min")
    bc = BoundaryConditions(ua_voltage=np.ones(3))
    twin = ws.project({}, bc)
    # reactive DERs still inject their fixed active output
    plain = solve_powerflow(sub, injections={
        d.bus: d.p_fixed.astype(complex) for d in sub.ders},
        include_der_base=False)
    np.testing.assert_allclose(twin.V, plain.V, atol=1e-12)


def test_projection_feasibility_residuals(ieee123, ieee123_partition):
    m = apply_der_scenario(ieee123, "ii")
    ws = build_area_workspaces(m, ieee123_partition, "loss-min")
    coord = Coordinator(m, ieee123_partition, ws,
                        build_topology("ideal", ieee123_partition.area_ids,
                                       interfaces=[(i.parent_area, i.child_area)
                                                   for i in ieee123_partition.interfaces]),
                        use_twin=True, root_voltage=1.03)
    res = coord.run()
    assert res.converged
    for area, sol in res.solutions().items():
        assert sol.twin is not None
        rep = evaluate_residuals(ws[area].submodel, sol.twin)
        assert rep.overall <= 1e-6


def test_twin_loss_within_ten_percent_of_linear(ieee123):
    m = apply_der_scenario(ieee123, "ii")
    sol = solve_central_linear(m, "loss-min", slack_voltage=1.03,
                               project_twin=True)
    assert sol.objective_twin_kw is not None
    assert abs(sol.objective_twin_kw - sol.objective_linear_kw) \
        / sol.objective_linear_kw < 0.10


def test_der_max_monotone_in_voltage_cap(ieee123):
    from dataclasses import replace
    m = apply_der_scenario(ieee123, "iii")
    base = solve_central_linear(m, "der-max", slack_voltage=1.03)
    relaxed_buses = tuple(replace(b, v_max=b.v_max + 0.01) for b in m.buses)
    from dopf.feeder import FeederModel
    m2 = FeederModel(buses=relaxed_buses, branches=m.branches, ders=m.ders,
                     base_kva=m.base_kva, base_kv=m.base_kv)
    relaxed = solve_central_linear(m2, "der-max", slack_voltage=1.03)
    assert relaxed.objective_linear_kw >= base.objective_linear_kw - 1e-6


def test_area_decision_matches_central_restriction(ieee123, ieee123_partition):
    # at a converged fixed point, the head area's decisions coincide with
    # the central restriction
    m = apply_der_scenario(ieee123, "i", p_fixed_kw=50.0)
    central = solve_central_linear(m, "loss-min", slack_voltage=1.03)
    ws = build_area_workspaces(m, ieee123_partition, "loss-min")
    coord = Coordinator(m, ieee123_partition, ws,
                        build_topology("ideal", ieee123_partition.area_ids,
                                       interfaces=[(i.parent_area, i.child_area)
                                                   for i in ieee123_partition.interfaces]),
                        use_twin=False, root_voltage=1.03)
    res = coord.run()
    sol1 = res.solutions()["area1"]
    central_by_bus_phase = {}
    for (bus, k, p), val in central.decisions.items():
        central_by_bus_phase[(bus, p)] = val
    for (bus, k, p), val in sol1.decisions.items():
        assert abs(val - central_by_bus_phase[(bus, p)]) < 1e-3


def test_replay_matches_sum_of_area_twins(ieee123, ieee123_partition):
    m = apply_der_scenario(ieee123, "ii")
    ws = build_area_workspaces(m, ieee123_partition, "loss-min")
    coord = Coordinator(m, ieee123_partition, ws,
                        build_topology("ideal", ieee123_partition.area_ids,
                                       interfaces=[(i.parent_area, i.child_area)
                                                   for i in ieee123_partition.interfaces]),
                        use_twin=True, root_voltage=1.03)
    res = coord.run()
    sols = res.solutions()
    inj = collect_injections([(ws[a].submodel, s) for a, s in sols.items()])
    rep = replay_dispatch(m, inj, slack_voltage=1.03)
    area_sum = sum(total_loss(s.twin) for s in sols.values())
    assert abs(total_loss(rep) - area_sum) < 0.05   # kW


def test_infeasible_boundary_reported_not_fatal(chain):
    # a head voltage far below the floor leaves no feasible dispatch; the
    # workspace reports it through the solver status instead of raising
    part = partition_feeder(chain, CHAIN_AREAS)
    ws = AreaWorkspace(area_submodel(chain, part, "a2"), "loss-min")
    bad = BoundaryConditions(ua_voltage=np.full(3, 0.80 ** 2))
    sol = ws.solve(bad, project_twin=False, area_name="a2")
    assert sol.solver_status != "optimal"


def test_decision_injections_signs(chain):
    part = partition_feeder(chain, CHAIN_AREAS)
    sub = area_submodel(chain, part, "a1")
    der = sub.ders[0]
    q_val = 0.02
    inj = decision_injections(sub, {(der.bus, 0, p): q_val for p in der.phases})
    s = inj[der.bus]
    np.testing.assert_allclose(s.real, der.p_fixed)
    np.testing.assert_allclose(s.imag, q_val)
