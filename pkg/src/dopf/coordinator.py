"""Boundary fixed-point coordination between area agents.

Every agent re-solves its local problem on a fixed cadence using the
latest boundary values received from its neighbors, projects the result
through its digital twin (when enabled), and publishes head-branch flows
upstream and shared-bus voltages downstream. Consensus is per-agent: when
the last two received values on every incoming stream agree within
tolerance, the agent dispatches after a fixed latency. Stale streams
(no fresh message within the staleness window) are treated as converged,
which reproduces premature dispatch under degraded communications; a
late arrival after a premature dispatch resumes iteration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .commsim import CommTopology, EventLoop, message_size_bytes
from .engine import AreaWorkspace, LocalSolution, boundary_observation
from .feeder import PHASE_INDEX, AreaPartition, FeederModel
from .linear import BoundaryConditions, aggregate_net_loads


@dataclass(frozen=True)
class ConvergenceCriteria:
    tol_v: float = 1e-4          # pu^2 on boundary voltages
    tol_p: float = 1e-4          # pu on boundary P and Q
    consecutive: int = 1
    max_macro_iterations: int = 50

    def __post_init__(self):
        if self.tol_v <= 0 or self.tol_p <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class BoundaryMessage:
    sender: str
    receiver: str
    direction: str               # to-parent | to-child
    payload: dict                # {"P":[3],"Q":[3]} or {"v":[3]}
    iteration: int
    timestamp: float = 0.0

    @property
    def size_bytes(self) -> int:
        return message_size_bytes(len(self.payload))

    def values(self) -> np.ndarray:
        if self.direction == "to-parent":
            return np.concatenate([self.payload["P"], self.payload["Q"]])
        return np.asarray(self.payload["v"], float)


def check_consensus(prev: dict, new: dict, criteria: ConvergenceCriteria):
    """Compare two boundary snapshots ({stream: values dict}).

    Returns (converged, residuals-per-stream). Streams must coincide.
    """
    if set(prev) != set(new):
        raise ValueError("snapshots cover different interface sets")
    residuals = {}
    ok = True
    for key in prev:
        a, b = prev[key], new[key]
        if "v" in a:
            r = float(np.max(np.abs(np.asarray(a["v"]) - np.asarray(b["v"]))))
            residuals[key] = r
            ok &= r <= criteria.tol_v
        else:
            rp = float(np.max(np.abs(np.asarray(a["P"]) - np.asarray(b["P"]))))
            rq = float(np.max(np.abs(np.asarray(a["Q"]) - np.asarray(b["Q"]))))
            residuals[key] = max(rp, rq)
            ok &= rp <= criteria.tol_p and rq <= criteria.tol_p
    return ok, residuals


def init_boundary(model: FeederModel, part: AreaPartition,
                  root_voltage: float = 1.0) -> dict:
    """Initial boundary values: flat pins at the substation voltage,
    lossless aggregated flows on every cut branch."""
    flows = aggregate_net_loads(model)
    values = {}
    for itf in part.interfaces:
        name = f"{itf.cut_branch[0]}-{itf.cut_branch[1]}"
        f = flows[name]
        values[itf.name] = {
            "ua_voltage": np.full(3, root_voltage ** 2),
            "da_flow": (f.real.copy(), f.imag.copy()),
        }
    return values


@dataclass
class AreaAgent:
    """One area controller attached to the event loop."""
    area: str
    workspace: AreaWorkspace
    part: AreaPartition
    criteria: ConvergenceCriteria
    use_twin: bool
    cadence_s: float = 2.0
    dispatch_latency_s: float = 0.2
    staleness_factor: float = 2.0
    _root_voltage: float = 1.0

    iteration: int = 0
    last_solution: LocalSolution | None = None
    dispatched_solution: LocalSolution | None = None
    converged: bool = False
    dispatched: bool = False
    premature: bool = False
    premature_count: int = 0
    ticking: bool = True
    # per incoming stream: list of (time, values array, iteration tag)
    inbox: dict = field(default_factory=dict)
    _num_solves: int = 0
    _consecutive_ok: int = 0

    def init_values(self, boundary_init: dict):
        ua = self.part.upstream(self.area)
        if ua is not None:
            v0 = boundary_init[ua.name]["ua_voltage"]
            self.inbox["from-parent"] = [(-1.0, np.asarray(v0, float), -1)]
        for itf in self.part.downstream(self.area):
            p0, q0 = boundary_init[itf.name]["da_flow"]
            self.inbox[f"from-child/{itf.child_area}"] = [
                (-1.0, np.concatenate([p0, q0]), -1)]

    def boundary_conditions(self) -> BoundaryConditions:
        ua = self.part.upstream(self.area)
        if ua is None:
            head = self.workspace.submodel.slack
            v = np.full(3, 0.0)
            v[[PHASE_INDEX[p] for p in head.phases]] = self._root_voltage ** 2
        else:
            v = self.inbox["from-parent"][-1][1]
        withdrawals = {}
        for itf in self.part.downstream(self.area):
            vals = self.inbox[f"from-child/{itf.child_area}"][-1][1]
            withdrawals[itf.shared_bus] = (vals[:3].copy(), vals[3:].copy())
        return BoundaryConditions(ua_voltage=np.asarray(v, float),
                                  da_withdrawals=withdrawals)

    def stream_status(self, now: float) -> dict:
        """satisfied | unsatisfied | stale, per incoming stream.

        A stream whose last two values agree within tolerance is satisfied
        outright (a neighbor that dispatched goes quiet on agreed values).
        ``stale`` means agreement was never observed and nothing fresh has
        arrived within the staleness window, so the agent can only assume.
        """
        window = self.staleness_factor * self.cadence_s
        out = {}
        for key, entries in self.inbox.items():
            delta = None
            if len(entries) >= 2:
                delta = float(np.max(np.abs(entries[-1][1] - entries[-2][1])))
            tol = self.criteria.tol_v if entries[-1][1].shape == (3,) \
                else self.criteria.tol_p
            if delta is not None and delta <= tol:
                out[key] = "satisfied"
            elif now - entries[-1][0] <= window:
                out[key] = "unsatisfied"
            else:
                out[key] = "stale"
        return out

    def consensus_state(self, now: float):
        """(converged, premature) from the incoming stream statuses."""
        if not self.inbox:
            return True, False           # no neighbors at all
        status = self.stream_status(now)
        if self._num_solves == 0:
            return False, False
        if any(s == "unsatisfied" for s in status.values()):
            return False, False
        stale = [k for k, s in status.items() if s == "stale"]
        return True, bool(stale)

    def handle_timeout(self, now: float) -> str:
        """Dispatch-or-wait decision when expected messages are overdue.

        Returns ``dispatch`` when every fresh stream satisfies the
        tolerance (overdue ones are assumed converged — the premature
        case), else ``wait``. Arrival of late data afterwards resumes
        iteration via the delivery path.
        """
        converged, premature = self.consensus_state(now)
        if converged and premature and self.last_solution is not None:
            return "dispatch"
        return "wait"

    def residual(self) -> float:
        worst = 0.0
        for entries in self.inbox.values():
            if len(entries) >= 2:
                worst = max(worst, float(np.max(np.abs(entries[-1][1]
                                                       - entries[-2][1]))))
        return worst


class Coordinator:
    """Drives agents over the event loop and logs the exchange trace."""

    def __init__(self, model: FeederModel, part: AreaPartition, workspaces: dict,
                 topology: CommTopology, criteria: ConvergenceCriteria | None = None,
                 use_twin: bool = True, cadence_s: float = 2.0,
                 dispatch_latency_s: float = 0.2, root_voltage: float = 1.0,
                 stagger: bool = True):
        self.model = model
        self.part = part
        self.criteria = criteria or ConvergenceCriteria()
        self.use_twin = use_twin
        self.stagger = stagger
        self.loop = EventLoop(topology)
        self.agents: dict[str, AreaAgent] = {}
        self.trace: list[dict] = []
        self.iteration_log: list[dict] = []
        self.exchange_count: dict[str, int] = {}
        self.residual_by_round: dict[int, float] = {}
        for area in part.area_ids:
            agent = AreaAgent(area=area, workspace=workspaces[area], part=part,
                              criteria=self.criteria, use_twin=use_twin,
                              cadence_s=cadence_s,
                              dispatch_latency_s=dispatch_latency_s)
            agent._root_voltage = root_voltage
            self.agents[area] = agent
        init = init_boundary(model, part, root_voltage)
        for agent in self.agents.values():
            agent.init_values(init)
        for itf in part.interfaces:
            self.exchange_count[itf.name] = 0

    # -- events ------------------------------------------------------------
    def start(self):
        # phase-shifted cadences: each agent still solves every cadence_s,
        # but neighbors see fresher values (sequential information flow
        # contracts much faster than synchronized rounds)
        for k, area in enumerate(sorted(self.agents)):
            agent = self.agents[area]
            offset = (k * agent.cadence_s / max(len(self.agents), 1)
                      if self.stagger else 0.0)
            self._schedule_tick(agent, offset)

    def _schedule_tick(self, agent: AreaAgent, when: float):
        agent.ticking = True
        self.loop.schedule(when, "agent-tick",
                           lambda now, a=agent: self._on_tick(a, now))

    def _log(self, now, area, event, interface="", v=None, p=None, q=None,
             objective=""):
        def fmt(arr, nd):
            return "" if arr is None else [round(float(x), nd) for x in arr]

        self.trace.append({
            "time_s": round(now, 6), "area": area, "event": event,
            "interface": interface,
            "v_pu2": fmt(v, 8), "P_kw": fmt(p, 3), "Q_kvar": fmt(q, 3),
            "objective": objective})

    def _on_tick(self, agent: AreaAgent, now: float):
        if agent.dispatched:
            agent.ticking = False
            return
        if agent.iteration >= self.criteria.max_macro_iterations:
            agent.ticking = False
            return
        bc = agent.boundary_conditions()
        sol = agent.workspace.solve(bc, project_twin=self.use_twin,
                                    area_name=agent.area)
        if sol.solver_status == "optimal":
            agent.last_solution = sol
            agent.iteration += 1
            agent._num_solves += 1
        self._log(now, agent.area, "solve",
                  objective=f"{sol.objective_kw(self.use_twin):.4f}")
        self.iteration_log.append({
            "time_s": round(now, 6),
            "area": agent.area,
            "iteration": agent.iteration,
            "status": sol.solver_status,
            "objective_lin_kw": round(sol.objective_linear_kw, 6),
            "objective_twin_kw": None if sol.objective_twin_kw is None
            else round(sol.objective_twin_kw, 6),
            "solver_iterations": sol.solver_iterations,
            "received_head_v_pu2": [round(float(x), 9) for x in bc.ua_voltage],
            "received_withdrawals_pu": {
                bus: [[round(float(x), 9) for x in p],
                      [round(float(x), 9) for x in q]]
                for bus, (p, q) in bc.da_withdrawals.items()},
        })

        if agent.last_solution is not None:
            self._publish(agent, now)

        converged, premature = agent.consensus_state(now)
        agent._consecutive_ok = agent._consecutive_ok + 1 if converged else 0
        converged = agent._consecutive_ok >= self.criteria.consecutive
        if converged and not agent.converged:
            self._log(now, agent.area, "converged",
                      objective=f"{agent.residual():.3e}")
        agent.converged = converged
        if converged and agent.last_solution is not None and not agent.dispatched:
            agent.dispatched = True
            agent.premature = premature
            if premature:
                agent.premature_count += 1
            agent.dispatched_solution = agent.last_solution
            ev = "premature-dispatch" if premature else "dispatch"
            self.loop.schedule(now + agent.dispatch_latency_s, "agent-tick",
                               lambda t, a=agent, e=ev: self._on_dispatch(a, t, e))
            agent.ticking = False
            return
        self._schedule_tick(agent, now + agent.cadence_s)

    def _on_dispatch(self, agent: AreaAgent, now: float, event: str):
        # dispatch may have been cancelled by a late message in the window
        if not agent.dispatched:
            return
        self._log(now, agent.area, event,
                  objective=f"{agent.dispatched_solution.objective_kw(self.use_twin):.4f}")

    def _publish(self, agent: AreaAgent, now: float):
        obs = boundary_observation(agent.workspace, self.part, agent.area,
                                   agent.last_solution, self.use_twin)
        ua = self.part.upstream(agent.area)
        s_base = self.model.s_base_kva_1ph
        if ua is not None:
            p, q = obs.ua_flow
            msg = BoundaryMessage(sender=agent.area, receiver=ua.parent_area,
                                  direction="to-parent",
                                  payload={"P": p.copy(), "Q": q.copy()},
                                  iteration=agent.iteration, timestamp=now)
            self._send(msg, now, ua.name)
            self._log(now, agent.area, "send", interface=ua.name,
                      p=p * s_base, q=q * s_base)
        for itf in self.part.downstream(agent.area):
            v = obs.da_voltage[itf.child_area]
            msg = BoundaryMessage(sender=agent.area, receiver=itf.child_area,
                                  direction="to-child",
                                  payload={"v": v.copy()},
                                  iteration=agent.iteration, timestamp=now)
            self._send(msg, now, itf.name)
            self._log(now, agent.area, "send", interface=itf.name, v=v)

    def _send(self, msg: BoundaryMessage, now: float, interface: str):
        self.loop.transmit(
            message=(msg, interface),
            on_deliver=self._on_deliver,
            size_bytes=msg.size_bytes,
            iteration=msg.iteration,
            src=msg.sender, dst=msg.receiver)

    def _on_deliver(self, now: float, payload):
        msg, interface = payload
        agent = self.agents[msg.receiver]
        # a to-child message lands in the child's parent stream, and a
        # to-parent message in the parent's per-child stream
        key = "from-parent" if msg.direction == "to-child" else \
            f"from-child/{msg.sender}"
        entries = agent.inbox[key]
        if entries and msg.iteration <= self._iteration_of(entries[-1]):
            return                        # stale duplicate, drop
        values = msg.values()
        prev_values = entries[-1][1] if entries else None
        entries.append((now, values, msg.iteration))
        if msg.direction == "to-parent":
            self.exchange_count[interface] += 1
            rnd = self.exchange_count[interface]
            delta = (float(np.max(np.abs(values - prev_values)))
                     if prev_values is not None else float("inf"))
            cur = self.residual_by_round.get(rnd, 0.0)
            self.residual_by_round[rnd] = max(cur, delta)
        s_base = self.model.s_base_kva_1ph
        if msg.direction == "to-parent":
            self._log(now, msg.receiver, "recv", interface=interface,
                      p=values[:3] * s_base, q=values[3:] * s_base)
        else:
            self._log(now, msg.receiver, "recv", interface=interface, v=values)
        if agent.dispatched:
            fresh_change = len(entries) >= 2 and \
                float(np.max(np.abs(entries[-1][1] - entries[-2][1]))) > \
                (self.criteria.tol_v if values.shape == (3,) else self.criteria.tol_p)
            if agent.premature or fresh_change:
                agent.dispatched = False
                agent.converged = False
        if not agent.ticking and not agent.dispatched:
            self._schedule_tick(agent, now)

    @staticmethod
    def _iteration_of(entry) -> int:
        return entry[2] if len(entry) > 2 else -1

    # -- run ----------------------------------------------------------------
    def run(self, until: float = 36000.0):
        self.start()
        guard = 0
        while True:
            self.loop.run(until=until)
            if self.loop.pending == 0:
                break
            guard += 1
            if guard > 10000:
                break
        converged = all(a.dispatched and a.last_solution is not None
                        for a in self.agents.values())
        return CoordinatorResult(self, converged, self.loop.now)


@dataclass
class CoordinatorResult:
    coordinator: Coordinator
    converged: bool
    sim_time_s: float

    @property
    def rounds(self) -> int:
        counts = self.coordinator.exchange_count
        return max(counts.values()) if counts else 0

    @property
    def macro_iterations(self) -> int:
        return max(a.iteration for a in self.coordinator.agents.values())

    @property
    def premature_dispatches(self) -> int:
        return sum(a.premature_count for a in self.coordinator.agents.values())

    def solutions(self) -> dict:
        return {a: ag.dispatched_solution or ag.last_solution
                for a, ag in self.coordinator.agents.items()}

    def objective_kw(self, use_twin: bool) -> float:
        total = 0.0
        for sol in self.solutions().values():
            if sol is None:
                return float("nan")
            total += sol.objective_kw(use_twin)
        return total

    def boundary_snapshot(self) -> dict:
        snap = {}
        for area, agent in self.coordinator.agents.items():
            for key, entries in agent.inbox.items():
                vals = entries[-1][1]
                if vals.shape == (3,):
                    snap[f"{area}/{key}"] = {"v": vals.copy()}
                else:
                    snap[f"{area}/{key}"] = {"P": vals[:3].copy(),
                                             "Q": vals[3:].copy()}
        return snap

    def write_trace_csv(self, path):
        import csv
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_s", "area", "event", "interface",
                        "v_pu2", "P_kw", "Q_kvar", "objective"])
            for row in self.coordinator.trace:
                w.writerow([row["time_s"], row["area"], row["event"],
                            row["interface"], row["v_pu2"], row["P_kw"],
                            row["Q_kvar"], row["objective"]])

    def write_iteration_log(self, path):
        """Per-solve JSON log: area, iteration, objectives, boundary data."""
        with open(path, "w") as fh:
            json.dump(self.coordinator.iteration_log, fh, indent=1)
