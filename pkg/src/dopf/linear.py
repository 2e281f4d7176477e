"""Linearized three-phase OPF constraint builder.

Lossless branch-flow balance plus the squared-voltage drop with full 3x3
mutual coupling under nominal 120-degree phase rotation. Problems are
built per area sub-model (the whole feeder is the degenerate single-area
case) with the head-bus voltage pinned and downstream-interface
withdrawals folded into the balance right-hand side, so re-solving with
fresh boundary values is a vector update, not a rebuild.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .feeder import PHASES, PHASE_INDEX, FeederModel
from .qp import QpProblem

# nominal phasor rotation e^{j(theta_p - theta_q)} for p,q in a,b,c
_ANG = np.exp(1j * np.deg2rad([0.0, -120.0, 120.0]))
ROTATION = _ANG[:, None] / _ANG[None, :]


class LinearModelError(ValueError):
    pass


@dataclass(frozen=True)
class BoundaryConditions:
    """Head-bus squared voltage plus per-interface (P, Q) withdrawals."""
    ua_voltage: np.ndarray                     # length 3, pu^2
    da_withdrawals: dict = field(default_factory=dict)  # bus -> (P[3], Q[3]) pu

    def __post_init__(self):
        object.__setattr__(self, "ua_voltage", np.asarray(self.ua_voltage, float))
        clean = {}
        for bus, (p, q) in self.da_withdrawals.items():
            clean[str(bus)] = (np.asarray(p, float), np.asarray(q, float))
        object.__setattr__(self, "da_withdrawals", clean)


class VariableMap:
    """Bijection between (kind, element, phase) and dense indices.

    Kinds: ``P``/``Q`` per branch-phase, ``v`` per bus-phase, ``qder``/
    ``pder`` per DER-phase.
    """

    def __init__(self):
        self._keys: list[tuple] = []
        self._index: dict[tuple, int] = {}

    def add(self, kind: str, element: str, phase: str) -> int:
        key = (kind, element, phase)
        if key in self._index:
            raise LinearModelError(f"duplicate variable {key}")
        self._index[key] = len(self._keys)
        self._keys.append(key)
        return self._index[key]

    def __getitem__(self, key: tuple) -> int:
        return self._index[key]

    def __contains__(self, key: tuple) -> bool:
        return key in self._index

    def __len__(self) -> int:
        return len(self._keys)

    @property
    def keys(self) -> list[tuple]:
        return list(self._keys)

    def of_kind(self, *kinds: str) -> list[int]:
        return [i for i, k in enumerate(self._keys) if k[0] in kinds]

    def to_json(self) -> dict:
        return {"variables": [{"kind": k, "element": e, "phase": p}
                              for (k, e, p) in self._keys]}


@dataclass
class LinearOpfProblem:
    """Sparse equality system with bounds and cost over a VariableMap."""
    model: FeederModel                 # area sub-model (head bus is slack)
    var_map: VariableMap
    A: sp.csc_matrix
    b: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    H: sp.csc_matrix | None = None
    f: np.ndarray | None = None
    objective_kind: str | None = None
    # bookkeeping for boundary updates
    pin_rows: dict = field(default_factory=dict)       # (phase)->row
    balance_rows: dict = field(default_factory=dict)   # (bus, phase, kind)->row
    base_rhs: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.var_map)

    def to_qp(self) -> QpProblem:
        if self.f is None and self.H is None:
            raise LinearModelError("objective not set; call build_objective")
        f = self.f if self.f is not None else np.zeros(self.n)
        return QpProblem(H=self.H, f=f, A=self.A, b=self.b.copy(),
                         lb=self.lb, ub=self.ub)

    def apply_boundary(self, bc: BoundaryConditions) -> np.ndarray:
        """Recompute the equality RHS for new boundary values."""
        b = self.base_rhs.copy()
        head = self.model.slack
        for p in head.phases:
            b[self.pin_rows[p]] = bc.ua_voltage[PHASE_INDEX[p]]
        for bus_id, (wp, wq) in bc.da_withdrawals.items():
            if bus_id not in self.model.bus_index:
                raise LinearModelError(f"withdrawal at unknown bus {bus_id!r}")
            for p in self.model.bus(bus_id).phases:
                i = PHASE_INDEX[p]
                key_p = (bus_id, p, "P")
                key_q = (bus_id, p, "Q")
                if key_p not in self.balance_rows:
                    raise LinearModelError(
                        f"withdrawal bus {bus_id!r} has no balance row (head bus?)")
                b[self.balance_rows[key_p]] += wp[i]
                b[self.balance_rows[key_q]] += wq[i]
        self.b = b
        return b


def aggregate_net_loads(model: FeederModel) -> dict:
    """Lossless per-branch flows: downstream net withdrawals summed up the
    tree (loads minus capacitors and fixed DER output, decisions at zero).
    This is the unique zero-decision solution of the balance equations."""
    from .powerflow import net_injections

    S = net_injections(model)
    flows: dict[str, np.ndarray] = {}
    demand = {b.id: -S[model.bus_index[b.id]] for b in model.buses}
    for bus in reversed(model.topo_order[1:]):
        br = model.parent[bus]
        f = demand[bus].copy()
        for child in model.children[bus]:
            f += flows[child.name]
        flows[br.name] = np.where(br.mask, f, 0.0)
    return flows


def lin_drop_coefficients(z: np.ndarray, p: int, q: int) -> tuple[float, float]:
    """Coefficients (on P^qq, Q^qq) of the squared-voltage drop on phase p."""
    zt = z[p, q] * np.conj(ROTATION[p, q])
    return 2.0 * zt.real, 2.0 * zt.imag


def build_lindistflow(submodel: FeederModel, bc: BoundaryConditions) -> LinearOpfProblem:
    """Equality system (balance + voltage drop + head pin) for one area.

    ``submodel`` comes from ``area_submodel`` (or is the whole feeder);
    its slack bus is the area head whose voltage is pinned to
    ``bc.ua_voltage``. Withdrawals in ``bc`` are added as constant loads.
    """
    vm = VariableMap()
    for br in submodel.branches:
        for p in br.phases:
            vm.add("P", br.name, p)
    for br in submodel.branches:
        for p in br.phases:
            vm.add("Q", br.name, p)
    for bus in submodel.buses:
        for p in bus.phases:
            vm.add("v", bus.id, p)
    for k, der in enumerate(submodel.ders):
        kind = "qder" if der.mode == "reactive-dispatch" else "pder"
        for p in der.phases:
            vm.add(kind, f"{der.bus}#{k}", p)

    n = len(vm)
    rows, cols, vals, rhs = [], [], [], []
    pin_rows = {}
    balance_rows = {}

    def add_entry(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    head = submodel.slack
    r = 0
    # per-bus per-phase balance (P then Q), skipping the head bus
    for bus in submodel.buses:
        if bus.is_slack:
            continue
        parent = submodel.parent[bus.id]
        for kind in ("P", "Q"):
            for p in bus.phases:
                i = PHASE_INDEX[p]
                add_entry(r, vm[(kind, parent.name, p)], 1.0)
                for child in submodel.children[bus.id]:
                    if p in child.phases:
                        add_entry(r, vm[(kind, child.name, p)], -1.0)
                load = bus.load_p[i] if kind == "P" else bus.load_q[i] - bus.shunt_q[i]
                for k, der in enumerate(submodel.ders):
                    if der.bus != bus.id or p not in der.phases:
                        continue
                    if der.mode == "reactive-dispatch":
                        if kind == "P":
                            load -= der.p_fixed[i]
                        else:
                            add_entry(r, vm[("qder", f"{der.bus}#{k}", p)], 1.0)
                    else:
                        if kind == "P":
                            add_entry(r, vm[("pder", f"{der.bus}#{k}", p)], 1.0)
                rhs.append(load)
                balance_rows[(bus.id, p, kind)] = r
                r += 1

    # per-branch voltage drop rows
    for br in submodel.branches:
        phs = [PHASE_INDEX[p] for p in br.phases]
        for p in phs:
            add_entry(r, vm[("v", br.to_bus, PHASES[p])], 1.0)
            add_entry(r, vm[("v", br.from_bus, PHASES[p])], -1.0)
            for q in phs:
                cp, cq = lin_drop_coefficients(br.z, p, q)
                add_entry(r, vm[("P", br.name, PHASES[q])], cp)
                add_entry(r, vm[("Q", br.name, PHASES[q])], cq)
            rhs.append(0.0)
            r += 1

    # head-bus voltage pin
    for p in head.phases:
        add_entry(r, vm[("v", head.id, p)], 1.0)
        rhs.append(bc.ua_voltage[PHASE_INDEX[p]])
        pin_rows[p] = r
        r += 1

    A = sp.csc_matrix((vals, (rows, cols)), shape=(r, n))
    b = np.asarray(rhs, float)

    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    for bus in submodel.buses:
        if bus.is_slack:
            continue
        for p in bus.phases:
            j = vm[("v", bus.id, p)]
            lb[j] = bus.v_min ** 2
            ub[j] = bus.v_max ** 2

    prob = LinearOpfProblem(model=submodel, var_map=vm, A=A, b=b, lb=lb, ub=ub,
                            pin_rows=pin_rows, balance_rows=balance_rows)
    prob.base_rhs = b.copy()
    for p in head.phases:
        prob.base_rhs[pin_rows[p]] = 0.0
    prob.apply_boundary(bc)
    return prob


def build_der_constraints(prob: LinearOpfProblem) -> None:
    """Tighten variable bounds with the DER capability model.

    Reactive dispatch: |q| <= sqrt(S^2 - p_fixed^2). Active dispatch:
    0 <= p <= S. (Joint p/q disc constraints are carried by the QP layer's
    disc projection when both kinds are present.)
    """
    vm = prob.var_map
    for k, der in enumerate(prob.model.ders):
        el = f"{der.bus}#{k}"
        for p in der.phases:
            i = PHASE_INDEX[p]
            if der.mode == "reactive-dispatch":
                bound = der.q_bound()[i]
                j = vm[("qder", el, p)]
                prob.lb[j] = -bound
                prob.ub[j] = bound
            else:
                j = vm[("pder", el, p)]
                prob.lb[j] = 0.0
                prob.ub[j] = der.s_rated[i]


def build_objective(prob: LinearOpfProblem, kind: str) -> None:
    """Attach the cost: ``loss-min`` sums squared branch flows (voltage
    near 1 pu makes that a loss surrogate); ``der-max`` maximizes total
    DER output (stored as its negation)."""
    n = prob.n
    vm = prob.var_map
    modes = {d.mode for d in prob.model.ders}
    if kind == "loss-min":
        if "active-dispatch" in modes:
            raise LinearModelError("loss-min requires reactive-dispatch DERs")
        idx = vm.of_kind("P", "Q")
        H = sp.csc_matrix((np.full(len(idx), 2.0), (idx, idx)), shape=(n, n))
        prob.H = H
        prob.f = np.zeros(n)
    elif kind == "der-max":
        if "reactive-dispatch" in modes:
            raise LinearModelError("der-max requires active-dispatch DERs")
        f = np.zeros(n)
        for j in vm.of_kind("pder"):
            f[j] = -1.0
        prob.f = f
        prob.H = None
    else:
        raise LinearModelError(f"unknown objective kind {kind!r}")
    prob.objective_kind = kind


# ---------------------------------------------------------------------------
# Solution views


@dataclass(frozen=True)
class LinearState:
    """Flows, voltages and decisions extracted from a solved problem."""
    flows_p: dict      # branch name -> length-3 array (pu)
    flows_q: dict
    v: dict            # bus id -> length-3 array (pu^2)
    decisions: dict    # (bus, der index, phase) -> value (pu)

    def flow(self, branch_name: str) -> np.ndarray:
        return self.flows_p[branch_name] + 1j * self.flows_q[branch_name]


def extract_state(prob: LinearOpfProblem, x: np.ndarray) -> LinearState:
    vm = prob.var_map
    flows_p = {br.name: np.zeros(3) for br in prob.model.branches}
    flows_q = {br.name: np.zeros(3) for br in prob.model.branches}
    v = {bus.id: np.zeros(3) for bus in prob.model.buses}
    decisions = {}
    for i, (kind, el, p) in enumerate(vm.keys):
        j = PHASE_INDEX[p]
        if kind == "P":
            flows_p[el][j] = x[i]
        elif kind == "Q":
            flows_q[el][j] = x[i]
        elif kind == "v":
            v[el][j] = x[i]
        else:
            bus, k = el.rsplit("#", 1)
            decisions[(bus, int(k), p)] = float(x[i])
    return LinearState(flows_p=flows_p, flows_q=flows_q, v=v, decisions=decisions)


def implied_loss_kw(prob: LinearOpfProblem, state: LinearState) -> float:
    """Series-loss estimate of a linear solution at unit nominal voltage.

    Branch currents are approximated per phase as conj(S) rotated by the
    nominal 120-degree phasors, then pushed through Re(I^H Z I), the same
    measure the nonlinear twin reports; on uncoupled lines this is
    r*(P^2+Q^2)."""
    total = 0.0
    for br in prob.model.branches:
        S = state.flows_p[br.name] + 1j * state.flows_q[br.name]
        I = np.conj(S) * _ANG
        total += float((np.conj(I) @ (br.z @ I)).real)
    return total * prob.model.s_base_kva_1ph


def total_decision_kw(prob: LinearOpfProblem, state: LinearState) -> float:
    return float(sum(state.decisions.values())) * prob.model.s_base_kva_1ph


def dump_problem(prob: LinearOpfProblem, directory) -> None:
    """Debug dump: Matrix Market matrices plus the variable map as JSON."""
    import json
    from pathlib import Path

    from scipy.io import mmwrite

    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    mmwrite(out / "A.mtx", prob.A)
    if prob.H is not None:
        mmwrite(out / "H.mtx", prob.H)
    np.savetxt(out / "b.txt", prob.b)
    bounds = np.column_stack([prob.lb, prob.ub])
    np.savetxt(out / "bounds.txt", bounds)
    with open(out / "variables.json", "w") as fh:
        json.dump(prob.var_map.to_json(), fh, indent=1)
