"""Central and per-area linear OPF solving with digital-twin projection.

The linear problem proposes DER setpoints; the twin (nonlinear power
flow) evaluates what the network actually does under them. Area
workspaces cache the assembled problem and its factorization so the
macro-iteration only swaps boundary values between solves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .feeder import AreaPartition, FeederModel, area_submodel, partition_feeder
from .linear import (BoundaryConditions, LinearState, build_der_constraints,
                     build_lindistflow, build_objective, extract_state,
                     implied_loss_kw, total_decision_kw)
from .powerflow import (BoundaryObservation, PowerFlowError, PowerFlowSolution,
                        extract_boundary, slack_phasors, solve_powerflow,
                        total_loss)
from .qp import QpSolver, SolverSettings

OBJECTIVE_KINDS = ("loss-min", "der-max")


class EngineError(RuntimeError):
    pass


def check_mode_compatibility(model: FeederModel, kind: str) -> None:
    if kind not in OBJECTIVE_KINDS:
        raise EngineError(f"unknown objective kind {kind!r}")
    modes = {d.mode for d in model.ders}
    if kind == "loss-min" and "active-dispatch" in modes:
        raise EngineError("loss-min requires reactive-dispatch DERs")
    if kind == "der-max" and "reactive-dispatch" in modes:
        raise EngineError("der-max requires active-dispatch DERs")


def decision_injections(submodel: FeederModel, decisions: dict) -> dict:
    """Per-bus complex injections implementing the OPF decisions.

    Reactive dispatch contributes p_fixed + j q*; active dispatch p*.
    ``decisions`` is keyed (bus, der index, phase) as produced by
    ``extract_state``.
    """
    inj: dict[str, np.ndarray] = {}
    for k, der in enumerate(submodel.ders):
        s = inj.setdefault(der.bus, np.zeros(3, complex))
        for p in der.phases:
            i = "abc".index(p)
            val = decisions.get((der.bus, k, p), 0.0)
            if der.mode == "reactive-dispatch":
                s[i] += der.p_fixed[i] + 1j * val
            else:
                s[i] += val
    return inj


@dataclass
class LocalSolution:
    area: str
    decisions: dict                     # (bus, der index, phase) -> pu
    linear_state: LinearState
    twin: PowerFlowSolution | None
    objective_linear_kw: float          # implied loss kW or total DER kW
    objective_twin_kw: float | None
    solver_status: str
    solver_iterations: int

    def objective_kw(self, use_twin: bool) -> float:
        if use_twin and self.objective_twin_kw is not None:
            return self.objective_twin_kw
        return self.objective_linear_kw


class AreaWorkspace:
    """One area's assembled problem, solver state and twin model."""

    def __init__(self, submodel: FeederModel, kind: str,
                 settings: SolverSettings | None = None,
                 init_bc: BoundaryConditions | None = None):
        check_mode_compatibility(submodel, kind)
        self.submodel = submodel
        self.kind = kind
        self.settings = settings or SolverSettings()
        if init_bc is None:
            init_bc = BoundaryConditions(ua_voltage=np.ones(3))
        self.problem = build_lindistflow(submodel, init_bc)
        build_der_constraints(self.problem)
        build_objective(self.problem, kind)
        self._solver = QpSolver(self.problem.to_qp(), self.settings)
        self._last_x = None

    def solve(self, bc: BoundaryConditions, project_twin: bool,
              area_name: str = "area") -> LocalSolution:
        b = self.problem.apply_boundary(bc)
        self._solver.update_vectors(b=b)
        res = self._solver.solve(x0=self._last_x)
        if res.optimal:
            self._last_x = res.x
        state = extract_state(self.problem, res.x)
        if self.kind == "loss-min":
            obj_lin = implied_loss_kw(self.problem, state)
        else:
            obj_lin = total_decision_kw(self.problem, state)

        twin = None
        obj_twin = None
        if project_twin and res.optimal:
            try:
                twin = self.project(state.decisions, bc)
                obj_twin = (total_loss(twin) if self.kind == "loss-min"
                            else obj_lin)
            except PowerFlowError:
                twin = None
        return LocalSolution(area=area_name, decisions=state.decisions,
                             linear_state=state, twin=twin,
                             objective_linear_kw=obj_lin,
                             objective_twin_kw=obj_twin,
                             solver_status=res.status,
                             solver_iterations=res.iterations)

    def project(self, decisions: dict, bc: BoundaryConditions) -> PowerFlowSolution:
        """Run the area twin: head bus as slack at the boundary voltage,
        downstream withdrawals as loads, decisions as injections."""
        inj = decision_injections(self.submodel, decisions)
        for bus_id, (wp, wq) in bc.da_withdrawals.items():
            s = inj.setdefault(bus_id, np.zeros(3, complex))
            s -= wp + 1j * wq
        head = self.submodel.slack
        vmag = np.sqrt(np.maximum(bc.ua_voltage, 0.0))
        slack_v = vmag * slack_phasors(1.0)
        mask = head.mask
        slack_v = np.where(mask, slack_v, 0.0)
        return solve_powerflow(self.submodel, injections=inj,
                               slack_voltage=slack_v, include_der_base=False)


def boundary_observation(ws: AreaWorkspace, part: AreaPartition, area: str,
                         sol: LocalSolution, use_twin: bool) -> BoundaryObservation:
    """What this area's latest solution publishes to its neighbors."""
    if use_twin and sol.twin is not None:
        return extract_boundary(sol.twin, part, area)
    ua = part.upstream(area)
    if ua is None:
        flows = np.zeros(3, complex)
        for br in ws.submodel.children[ws.submodel.slack.id]:
            flows += sol.linear_state.flow(br.name)
        ua_flow = (flows.real.copy(), flows.imag.copy())
    else:
        name = f"{ua.cut_branch[0]}-{ua.cut_branch[1]}"
        ua_flow = (sol.linear_state.flows_p[name].copy(),
                   sol.linear_state.flows_q[name].copy())
    da_voltage = {itf.child_area: sol.linear_state.v[itf.shared_bus].copy()
                  for itf in part.downstream(area)}
    return BoundaryObservation(area=area, ua_flow=ua_flow, da_voltage=da_voltage)


# ---------------------------------------------------------------------------
# Central solves


def single_area_partition(model: FeederModel) -> AreaPartition:
    return partition_feeder(model, {"all": [b.id for b in model.buses]})


def solve_central_linear(model: FeederModel, kind: str, slack_voltage: float = 1.0,
                         settings: SolverSettings | None = None,
                         project_twin: bool = False) -> LocalSolution:
    """Whole-feeder linear OPF, optionally projected through the twin."""
    check_mode_compatibility(model, kind)
    bc = BoundaryConditions(ua_voltage=np.full(3, slack_voltage ** 2))
    ws = AreaWorkspace(model, kind, settings, init_bc=bc)
    sol = ws.solve(bc, project_twin=project_twin, area_name="central")
    if sol.solver_status != "optimal":
        raise EngineError(f"central OPF did not reach optimality "
                          f"({sol.solver_status})")
    return sol


def replay_dispatch(model: FeederModel, decisions_by_bus: dict,
                    slack_voltage: float = 1.0) -> PowerFlowSolution:
    """Whole-feeder twin run of a dispatched decision set.

    ``decisions_by_bus`` maps bus id to a complex length-3 injection
    (already including fixed active output for reactive-dispatch units).
    """
    return solve_powerflow(model, injections=decisions_by_bus,
                           slack_voltage=slack_phasors(slack_voltage),
                           include_der_base=False)


def collect_injections(submodels_and_solutions) -> dict:
    """Merge per-area decision injections for a whole-feeder replay."""
    merged: dict[str, np.ndarray] = {}
    for submodel, sol in submodels_and_solutions:
        for bus, s in decision_injections(submodel, sol.decisions).items():
            merged[bus] = merged.get(bus, np.zeros(3, complex)) + s
    return merged


def build_area_workspaces(model: FeederModel, part: AreaPartition, kind: str,
                          settings: SolverSettings | None = None) -> dict:
    """AreaWorkspace per area, head pins initialized flat.

    Polish is off by default here: the macro-iteration wants decisions
    that vary continuously with the boundary data, and vertex snapping on
    degenerate faces breaks near-consensus.
    """
    if settings is None:
        settings = SolverSettings(polish=False)
    out = {}
    for area in part.area_ids:
        sub = area_submodel(model, part, area)
        out[area] = AreaWorkspace(sub, kind, settings)
    return out
