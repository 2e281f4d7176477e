import numpy as np
import pytest

from dopf.feeder import model_from_dict
from dopf.powerflow import (PowerFlowError, evaluate_residuals, extract_boundary,
                            net_injections, slack_injection, slack_phasors,
                            solve_powerflow, total_loss)
from dopf.feeder import partition_feeder
from oracles import newton_powerflow, newton_total_loss_kw


def two_bus_oracle():
    """Closed-form solution of the single-line case (solved by hand first)."""
    r, x, P, Q = 0.01, 0.02, 0.1, 0.05
    b = 1.0 - 2.0 * (r * P + x * Q)
    c = (r * r + x * x) * (P * P + Q * Q)
    v1 = (b + np.sqrt(b * b - 4 * c)) / 2.0
    V1 = np.conj((v1 + (r + 1j * x) * (P - 1j * Q)) / 1.0)
    loss_pu = (P * P + Q * Q) / v1 * r
    return v1, V1, loss_pu


def test_zero_load_flat(five_bus):
    doc = {"base_kva": 300.0, "base_kv": 2.4,
           "buses": [{"id": "s", "phases": "abc", "slack": True},
                     {"id": "t", "phases": "abc"}],
           "branches": [{"from": "s", "to": "t", "phases": "abc",
                         "r_ohm": [[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]],
                         "x_ohm": [[2.0, 0, 0], [0, 2.0, 0], [0, 0, 2.0]]}],
           "ders": []}
    sol = solve_powerflow(model_from_dict(doc))
    np.testing.assert_allclose(np.abs(sol.V[1]), 1.0, atol=1e-12)
    np.testing.assert_allclose(sol.I, 0.0, atol=1e-14)
    assert total_loss(sol) == 0.0
    rep = evaluate_residuals(sol.model, sol)
    assert rep.overall == 0.0


def test_two_bus_matches_closed_form(two_bus):
    sol = solve_powerflow(two_bus, tol=1e-12)
    v1, V1, loss_pu = two_bus_oracle()
    assert abs(sol.v_at("1")[0] - v1) < 1e-10
    assert abs(sol.V[two_bus.bus_index["1"], 0] - V1) < 1e-10
    assert abs(total_loss(sol) - loss_pu * two_bus.s_base_kva_1ph) < 1e-8


def test_two_bus_newton_oracle(two_bus):
    sol = solve_powerflow(two_bus, tol=1e-12)
    V = newton_powerflow(two_bus)
    assert np.max(np.abs(V - sol.V)) < 1e-8


def test_five_bus_newton_oracle(five_bus):
    sol = solve_powerflow(five_bus, tol=1e-12)
    V = newton_powerflow(five_bus)
    assert np.max(np.abs(V - sol.V)) < 1e-8
    assert abs(newton_total_loss_kw(five_bus, V) - total_loss(sol)) < 1e-6


def test_five_bus_with_injections_newton(five_bus):
    inj = {"z": np.array([0.02 + 0.01j, 0.015, 0.01 - 0.005j])}
    sol = solve_powerflow(five_bus, injections=inj, tol=1e-12,
                          slack_voltage=slack_phasors(1.02))
    V = newton_powerflow(five_bus, injections=inj, slack_voltage=1.02)
    assert np.max(np.abs(V - sol.V)) < 1e-8


def test_residuals_converged_small(five_bus):
    sol = solve_powerflow(five_bus)
    rep = evaluate_residuals(five_bus, sol)
    assert rep.overall <= 1e-6


def test_residuals_detect_perturbation(five_bus):
    sol = solve_powerflow(five_bus)
    sol.V[five_bus.bus_index["z"], 0] += 0.01
    rep = evaluate_residuals(five_bus, sol)
    assert rep.voltage_drop >= 1e-3


def test_cross_current_identity_machine_precision(five_bus):
    sol = solve_powerflow(five_bus)
    rep = evaluate_residuals(five_bus, sol)
    assert rep.current_cross <= 1e-14


def test_energy_conservation(ieee123):
    sol = solve_powerflow(ieee123)
    S = net_injections(ieee123)
    head = slack_injection(sol)
    # slack P = total load - generation + losses
    loss_pu = total_loss(sol) / ieee123.s_base_kva_1ph
    assert abs(head.real.sum() + S.real.sum() - loss_pu) < 1e-6


def test_mismatch_trace_monotone_tail(ieee123):
    sol = solve_powerflow(ieee123)
    tail = sol.mismatch_trace[-3:]
    assert all(tail[i + 1] <= tail[i] for i in range(len(tail) - 1))


def test_nonconvergence_flagged(two_bus):
    # absurd load makes a collapse point; solver must raise, not loop
    inj = {"1": np.array([-60.0 + 0j, 0, 0])}
    with pytest.raises(PowerFlowError, match="converge|diverged"):
        solve_powerflow(two_bus, injections=inj, max_sweeps=40)


def test_unknown_injection_bus(two_bus):
    with pytest.raises(PowerFlowError, match="unknown bus"):
        solve_powerflow(two_bus, injections={"zz": np.zeros(3, complex)})


def test_random_radial_feeders_satisfy_identities():
    # random chains with random coupling: conservation and the nonlinear
    # identities hold on every converged solve
    rng = np.random.default_rng(17)
    for trial in range(20):
        n = int(rng.integers(3, 8))
        buses = [{"id": "n0", "phases": "abc", "slack": True}]
        branches = []
        for k in range(1, n):
            parent = f"n{rng.integers(0, k)}"
            r = rng.uniform(0.002, 0.02, (3, 3))
            r = (r + r.T) / 2 + np.diag(rng.uniform(0.01, 0.03, 3))
            x = rng.uniform(0.005, 0.04, (3, 3))
            x = (x + x.T) / 2 + np.diag(rng.uniform(0.02, 0.06, 3))
            zb = 19.2
            buses.append({"id": f"n{k}", "phases": "abc",
                          "load_kw": list(rng.uniform(0, 15, 3)),
                          "load_kvar": list(rng.uniform(0, 7, 3))})
            branches.append({"from": parent, "to": f"n{k}", "phases": "abc",
                             "r_ohm": (r * zb).tolist(),
                             "x_ohm": (x * zb).tolist()})
        m = model_from_dict({"base_kva": 300.0, "base_kv": 2.4,
                             "buses": buses, "branches": branches, "ders": []})
        sol = solve_powerflow(m, tol=1e-10)
        rep = evaluate_residuals(m, sol)
        assert rep.overall <= 1e-6
        S = net_injections(m)
        head = slack_injection(sol)
        loss_pu = total_loss(sol) / m.s_base_kva_1ph
        assert abs(head.real.sum() + S.real.sum() - loss_pu) < 1e-8


def test_extract_boundary_single_area(five_bus):
    part = partition_feeder(five_bus, {"all": [b.id for b in five_bus.buses]})
    sol = solve_powerflow(five_bus)
    obs = extract_boundary(sol, part, "all")
    assert obs.da_voltage == {}
    np.testing.assert_allclose(obs.ua_flow[0] + 1j * obs.ua_flow[1],
                               slack_injection(sol))


def test_extract_boundary_zero_load_passthrough():
    # area with no internal load forwards exactly its downstream demand
    from dopf.feeder import area_submodel
    from conftest import chain_doc, CHAIN_AREAS
    doc = chain_doc()
    for bus in doc["buses"]:
        if bus["id"] in ("b3", "b4"):
            bus["load_kw"] = [0.0, 0.0, 0.0]
            bus["load_kvar"] = [0.0, 0.0, 0.0]
    m = model_from_dict(doc)
    part = partition_feeder(m, CHAIN_AREAS)
    sub = area_submodel(m, part, "a2")
    # downstream demand of a3 presented as a withdrawal at b4
    wd = np.array([0.03, 0.04, 0.05])
    sol = solve_powerflow(sub, injections={"b4": -(wd + 0.3j * wd)},
                          include_der_base=False)
    obs = extract_boundary(sol, part, "a2")
    # lossless would be exact; tiny line loss only
    np.testing.assert_allclose(obs.ua_flow[0], wd, atol=5e-4)
