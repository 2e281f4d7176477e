"""Nonlinear three-phase power flow for radial feeders (the digital twin).

Backward current aggregation + forward voltage drop over the 3x3 phase
impedance blocks, constant-power loads, fixed capacitor injections. The
solution keeps full phasors, so derived quantities (squared currents,
angle differences) satisfy the nonlinear branch-flow identities by
construction; ``evaluate_residuals`` checks them explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .feeder import AreaPartition, FeederModel

NOMINAL_ANGLES = np.exp(1j * np.deg2rad([0.0, -120.0, 120.0]))


class PowerFlowError(RuntimeError):
    """Non-convergence or inconsistent injection data."""


def slack_phasors(magnitude=1.0) -> np.ndarray:
    """Balanced slack voltage phasors at the given per-unit magnitude."""
    return np.asarray(magnitude, float) * NOMINAL_ANGLES


@dataclass
class PowerFlowSolution:
    model: FeederModel
    V: np.ndarray                    # (n_bus, 3) complex, 0 on absent phases
    I: np.ndarray                    # (n_branch, 3) complex branch currents
    S_send: np.ndarray               # (n_branch, 3) complex sending-end flows
    S_bus: np.ndarray                # (n_bus, 3) complex net injections used
    iterations: int = 0
    max_mismatch: float = np.inf
    converged: bool = False
    mismatch_trace: tuple = field(default_factory=tuple)

    @property
    def v(self) -> np.ndarray:
        """Squared voltage magnitudes (n_bus, 3)."""
        return np.abs(self.V) ** 2

    @property
    def vmag(self) -> np.ndarray:
        return np.abs(self.V)

    def v_at(self, bus_id: str) -> np.ndarray:
        return self.v[self.model.bus_index[bus_id]]

    def branch_index(self, from_bus: str, to_bus: str) -> int:
        for k, br in enumerate(self.model.branches):
            if br.from_bus == from_bus and br.to_bus == to_bus:
                return k
        raise KeyError(f"{from_bus}-{to_bus}")

    def flow(self, from_bus: str, to_bus: str) -> np.ndarray:
        """Sending-end complex power on a branch, per phase (pu)."""
        return self.S_send[self.branch_index(from_bus, to_bus)]

    def l_diag(self) -> np.ndarray:
        """Squared current magnitudes |I^p|^2 per branch-phase."""
        return np.abs(self.I) ** 2


def _der_base_injection(model: FeederModel) -> dict[str, np.ndarray]:
    """Fixed complex DER output per bus: reactive mode injects p_fixed,
    active mode injects the full rating (uncontrolled baseline)."""
    inj: dict[str, np.ndarray] = {}
    for d in model.ders:
        s = inj.setdefault(d.bus, np.zeros(3, complex))
        if d.mode == "reactive-dispatch":
            s += d.p_fixed
        else:
            s += d.s_rated
    return inj


def net_injections(model: FeederModel, extra: dict | None = None,
                   include_der_base: bool = True) -> np.ndarray:
    """Per-bus net complex injection (generation positive), pu.

    ``extra`` maps bus id -> complex length-3 array added on top (OPF
    decisions, boundary withdrawals as negative entries).
    """
    n = len(model.buses)
    S = np.zeros((n, 3), complex)
    for i, b in enumerate(model.buses):
        S[i] = -(b.load_p + 1j * b.load_q) + 1j * b.shunt_q
    if include_der_base:
        for bus_id, s in _der_base_injection(model).items():
            S[model.bus_index[bus_id]] += s
    if extra:
        for bus_id, s in extra.items():
            if bus_id not in model.bus_index:
                raise PowerFlowError(f"injection references unknown bus {bus_id!r}")
            s = np.asarray(s, complex)
            mask = model.bus(bus_id).mask
            if np.any(s[~mask] != 0):
                raise PowerFlowError(f"injection at {bus_id} on absent phase")
            S[model.bus_index[bus_id]] += s
    return S


def solve_powerflow(model: FeederModel, injections: dict | None = None,
                    slack_voltage=None, tol: float = 1e-8,
                    max_sweeps: int = 100,
                    include_der_base: bool = True) -> PowerFlowSolution:
    """Run the sweep power flow. ``injections`` augments loads/DER baseline.

    ``slack_voltage`` is either per-phase complex phasors (length 3) or a
    scalar magnitude expanded with nominal 120-degree angles.
    """
    n = len(model.buses)
    m = len(model.branches)
    idx = model.bus_index
    S_bus = net_injections(model, injections, include_der_base)

    if slack_voltage is None:
        v_slack = slack_phasors(1.0)
    else:
        v_slack = np.asarray(slack_voltage, complex)
        if v_slack.ndim == 0:
            v_slack = slack_phasors(float(v_slack.real))

    slack_i = idx[model.slack.id]
    masks = np.array([b.mask for b in model.buses])
    V = np.where(masks, v_slack, 0.0).astype(complex)

    order = [idx[b] for b in model.topo_order]
    br_order = [model.parent[b] for b in model.topo_order[1:]]  # parent branch per bus
    br_index = {br.name: k for k, br in enumerate(model.branches)}

    I = np.zeros((m, 3), complex)
    trace = []
    converged = False
    it = 0
    for it in range(1, max_sweeps + 1):
        # backward: nodal currents, then aggregate up the tree
        with np.errstate(divide="ignore", invalid="ignore"):
            I_node = np.where(masks & (np.abs(V) > 0),
                              np.conj(np.divide(S_bus, V, where=np.abs(V) > 0)), 0.0)
        I_node = np.where(masks, I_node, 0.0)
        acc = -I_node.copy()   # current drawn from upstream at each bus
        for b in reversed(model.topo_order[1:]):
            br = model.parent[b]
            k = br_index[br.name]
            I[k] = acc[idx[b]] * br.mask
            acc[idx[br.from_bus]] += I[k]

        # forward: voltage drops from the slack
        V_new = V.copy()
        V_new[slack_i] = np.where(masks[slack_i], v_slack, 0.0)
        for b, br in zip(model.topo_order[1:], br_order):
            k = br_index[br.name]
            drop = br.z @ I[k]
            V_new[idx[b]] = np.where(masks[idx[b]], V_new[idx[br.from_bus]] - drop, 0.0)

        # complex-power mismatch at the new voltages
        mism = V_new * np.conj(I_node) - S_bus
        mism[slack_i] = 0.0
        max_mismatch = float(np.max(np.abs(mism)))
        trace.append(max_mismatch)
        V = V_new
        if max_mismatch < tol:
            converged = True
            break
        if not np.all(np.isfinite(V)):
            raise PowerFlowError("power flow diverged (non-finite voltages)")

    if not converged:
        raise PowerFlowError(
            f"power flow did not converge in {max_sweeps} sweeps "
            f"(mismatch {trace[-1]:.3e})")

    # sending-end flows from final phasors
    S_send = np.zeros((m, 3), complex)
    for k, br in enumerate(model.branches):
        S_send[k] = V[idx[br.from_bus]] * np.conj(I[k])

    return PowerFlowSolution(model=model, V=V, I=I, S_send=S_send, S_bus=S_bus,
                             iterations=it, max_mismatch=trace[-1],
                             converged=True, mismatch_trace=tuple(trace))


def total_loss(sol: PowerFlowSolution) -> float:
    """Series active-power loss in kW: Re(I^H Z I) summed over branches.

    Includes the mutual-resistance terms of the phase impedance blocks,
    so the energy balance slack = loads - generation + loss is exact; on
    uncoupled lines this reduces to the familiar sum of |I^p|^2 r^pp.
    """
    model = sol.model
    loss_pu = 0.0
    for k, br in enumerate(model.branches):
        I = sol.I[k]
        loss_pu += float((np.conj(I) @ (br.z @ I)).real)
    return loss_pu * model.s_base_kva_1ph


def slack_injection(sol: PowerFlowSolution) -> np.ndarray:
    """Complex power leaving the slack bus into the feeder, per phase (pu)."""
    model = sol.model
    out = np.zeros(3, complex)
    for br in model.children[model.slack.id]:
        out += sol.flow(br.from_bus, br.to_bus)
    return out


@dataclass(frozen=True)
class ResidualReport:
    active_balance: float
    reactive_balance: float
    voltage_drop: float
    flow_current: float
    current_cross: float

    @property
    def overall(self) -> float:
        return max(self.active_balance, self.reactive_balance, self.voltage_drop,
                   self.flow_current, self.current_cross)


def evaluate_residuals(model: FeederModel, sol: PowerFlowSolution) -> ResidualReport:
    """Max absolute residuals of the nonlinear branch-flow equations.

    Checks per-phase active/reactive balance at every non-slack bus, the
    squared-voltage drop across every branch, the |S|^2 = v*l tie and the
    cross-phase current consistency, all built from the solution phasors.
    """
    if sol.V.shape != (len(model.buses), 3):
        raise PowerFlowError("solution does not match model dimensions")
    idx = model.bus_index
    r_bal_p, r_bal_q, r_drop, r_flow, r_cross = 0.0, 0.0, 0.0, 0.0, 0.0

    for b in model.topo_order[1:]:
        br = model.parent[b]
        k = sol.branch_index(br.from_bus, br.to_bus)
        j = idx[b]
        i = idx[br.from_bus]
        Ik = sol.I[k]
        phs = [p for p in range(3) if br.mask[p]]
        l = np.abs(Ik)
        ang = np.angle(Ik, deg=False)
        z = br.z
        S = sol.S_send[k]
        inj = sol.S_bus[j]
        out = np.zeros(3, complex)
        for child in model.children[b]:
            out += sol.flow(child.from_bus, child.to_bus)

        for p in phs:
            # line loss terms with delta^pq = angle(I^q) - angle(I^p)
            loss_p = 0.0
            loss_q = 0.0
            for q in phs:
                lpq = l[p] * l[q]
                d = ang[q] - ang[p]
                r_, x_ = z[p, q].real, z[p, q].imag
                loss_p += lpq * (r_ * np.cos(d) - x_ * np.sin(d))
                loss_q += lpq * (x_ * np.cos(d) + r_ * np.sin(d))
            r_bal_p = max(r_bal_p, abs(S[p].real - loss_p - out[p].real + inj[p].real))
            r_bal_q = max(r_bal_q, abs(S[p].imag - loss_q - out[p].imag + inj[p].imag))

            # voltage drop: v_j = v_i - 2 Re[S z*] + |z|^2 l + cross terms
            acc = sol.v[i][p]
            for q in phs:
                Spq = sol.V[i][p] * np.conj(Ik[q])
                acc -= 2.0 * (Spq * np.conj(z[p, q])).real
            for q in phs:
                acc += np.abs(z[p, q]) ** 2 * (l[q] ** 2)
            for a in range(len(phs)):
                for bq in range(a + 1, len(phs)):
                    q1, q2 = phs[a], phs[bq]
                    lq = l[q1] * l[q2]
                    rot = np.exp(1j * (ang[q1] - ang[q2]))
                    acc += 2.0 * (z[p, q1] * np.conj(z[p, q2]) * lq * rot).real
            r_drop = max(r_drop, abs(sol.v[j][p] - acc))

            # |S^pp|^2 = v_i * l^pp
            r_flow = max(r_flow, abs(S[p].real ** 2 + S[p].imag ** 2
                                     - sol.v[i][p] * l[p] ** 2))

        for a in range(len(phs)):
            for bq in range(a + 1, len(phs)):
                q1, q2 = phs[a], phs[bq]
                r_cross = max(r_cross, abs((l[q1] * l[q2]) ** 2
                                           - (l[q1] ** 2) * (l[q2] ** 2)))

    return ResidualReport(active_balance=r_bal_p, reactive_balance=r_bal_q,
                          voltage_drop=r_drop, flow_current=r_flow,
                          current_cross=r_cross)


@dataclass(frozen=True)
class BoundaryObservation:
    """What one area publishes: head-branch flow up, shared-bus voltages down."""
    area: str
    ua_flow: tuple | None            # (P[3], Q[3]) pu on the upstream cut branch
    da_voltage: dict                 # child area -> v[3] pu^2 at the shared bus


def extract_boundary(sol: PowerFlowSolution, part: AreaPartition,
                     area: str) -> BoundaryObservation:
    """Boundary observables of an area-local solution.

    For the root area the "upstream flow" is the substation head flow. The
    solution must come from the area sub-model (or the whole feeder for a
    single-area partition).
    """
    if area not in part.areas:
        raise PowerFlowError(f"unknown area {area!r}")
    model = sol.model
    ua = part.upstream(area)
    if ua is None:
        S = slack_injection(sol)
    else:
        S = sol.flow(*ua.cut_branch)
    da_voltage = {}
    for itf in part.downstream(area):
        da_voltage[itf.child_area] = sol.v_at(itf.shared_bus).copy()
    return BoundaryObservation(area=area, ua_flow=(S.real.copy(), S.imag.copy()),
                               da_voltage=da_voltage)
