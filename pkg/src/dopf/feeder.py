"""Radial three-phase feeder model: parsing, validation, partitioning, scenarios.

All electrical quantities are stored in per-unit. Powers use a per-phase base
of ``base_kva / 3``; impedances use ``base_kv**2 * 1000 / base_kva`` ohms.
Phase quantities are dense length-3 arrays indexed a=0, b=1, c=2 with zeros
on absent phases; the ``phases`` string says which entries are meaningful.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

PHASES = "abc"
PHASE_INDEX = {"a": 0, "b": 1, "c": 2}

# Named DER placements reused by all built-in scenarios.
SCENARIO_SEED_BUSES = ["15", "23", "30", "37", "49", "50", "51", "67", "78", "107"]


class FeederError(ValueError):
    """Raised for schema violations, bad topology or inconsistent data."""


def _phase_mask(phases: str) -> np.ndarray:
    mask = np.zeros(3, dtype=bool)
    for p in phases:
        mask[PHASE_INDEX[p]] = True
    return mask


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


def validate_phases(phases: str, what: str) -> str:
    if not phases or any(p not in PHASE_INDEX for p in phases):
        raise FeederError(f"{what}: invalid phase set {phases!r}")
    # canonical order a, b, c without duplicates
    seen = [p for p in PHASES if p in phases]
    if len(seen) != len(phases):
        raise FeederError(f"{what}: duplicate phases in {phases!r}")
    return "".join(seen)


@dataclass(frozen=True)
class Bus:
    id: str
    phases: str
    load_p: np.ndarray       # pu withdrawal per phase
    load_q: np.ndarray
    shunt_q: np.ndarray      # pu capacitor injection per phase (fixed)
    v_min: float = 0.95
    v_max: float = 1.05
    is_slack: bool = False

    def __post_init__(self):
        object.__setattr__(self, "load_p", _freeze(np.asarray(self.load_p, float)))
        object.__setattr__(self, "load_q", _freeze(np.asarray(self.load_q, float)))
        object.__setattr__(self, "shunt_q", _freeze(np.asarray(self.shunt_q, float)))
        mask = _phase_mask(self.phases)
        for name in ("load_p", "load_q", "shunt_q"):
            arr = getattr(self, name)
            if arr.shape != (3,):
                raise FeederError(f"bus {self.id}: {name} must have 3 entries")
            if np.any(arr[~mask] != 0.0):
                raise FeederError(f"bus {self.id}: {name} set on absent phase")
        if not (0.0 < self.v_min < self.v_max):
            raise FeederError(f"bus {self.id}: need 0 < v_min < v_max")

    @property
    def mask(self) -> np.ndarray:
        return _phase_mask(self.phases)


@dataclass(frozen=True)
class Branch:
    from_bus: str
    to_bus: str
    phases: str
    z: np.ndarray            # 3x3 complex pu, zero rows/cols on absent phases
    i_rated: float | None = None   # pu ampacity; None = unconstrained

    def __post_init__(self):
        z = np.asarray(self.z, complex)
        if z.shape != (3, 3):
            raise FeederError(f"branch {self.name}: z must be 3x3")
        mask = _phase_mask(self.phases)
        off = ~np.outer(mask, mask)
        if np.any(z[off] != 0):
            raise FeederError(f"branch {self.name}: impedance on absent phase")
        if np.any(np.diag(z).real[mask] < 0):
            raise FeederError(f"branch {self.name}: negative series resistance")
        object.__setattr__(self, "z", _freeze(z))

    @property
    def name(self) -> str:
        return f"{self.from_bus}-{self.to_bus}"

    @property
    def mask(self) -> np.ndarray:
        return _phase_mask(self.phases)


@dataclass(frozen=True)
class Der:
    bus: str
    phases: str
    s_rated: np.ndarray      # pu apparent-power rating per phase
    mode: str                # reactive-dispatch | active-dispatch | full-pq
    p_fixed: np.ndarray | None = None   # pu, required in reactive-dispatch

    def __post_init__(self):
        if self.mode not in ("reactive-dispatch", "active-dispatch", "full-pq"):
            raise FeederError(f"der at {self.bus}: unknown mode {self.mode!r}")
        s = _freeze(np.asarray(self.s_rated, float))
        object.__setattr__(self, "s_rated", s)
        mask = _phase_mask(self.phases)
        if np.any(s[mask] <= 0):
            raise FeederError(f"der at {self.bus}: nonpositive rating")
        if self.mode == "reactive-dispatch":
            if self.p_fixed is None:
                raise FeederError(f"der at {self.bus}: reactive-dispatch needs p_fixed")
            p = _freeze(np.asarray(self.p_fixed, float))
            object.__setattr__(self, "p_fixed", p)
            if np.any(p[mask] > s[mask] + 1e-12):
                raise FeederError(f"der at {self.bus}: p_fixed exceeds rating")
        elif self.p_fixed is not None:
            raise FeederError(f"der at {self.bus}: p_fixed only valid in reactive-dispatch")

    @property
    def mask(self) -> np.ndarray:
        return _phase_mask(self.phases)

    def q_bound(self) -> np.ndarray:
        """Per-phase reactive capability sqrt(S^2 - p_fixed^2), zero off-phase."""
        out = np.zeros(3)
        m = self.mask
        out[m] = np.sqrt(np.maximum(self.s_rated[m] ** 2 - self.p_fixed[m] ** 2, 0.0))
        return out


@dataclass(frozen=True)
class FeederModel:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    ders: tuple[Der, ...]
    base_kva: float          # three-phase system base
    base_kv: float           # line-to-line voltage base
    # derived tree index, filled by validate()
    bus_index: dict = field(default_factory=dict, compare=False)
    parent: dict = field(default_factory=dict, compare=False)       # bus -> upstream branch
    children: dict = field(default_factory=dict, compare=False)     # bus -> downstream branches
    topo_order: tuple = field(default=(), compare=False)            # bus ids, slack first

    def __post_init__(self):
        self._validate()

    # -- unit helpers -------------------------------------------------------
    @property
    def s_base_kva_1ph(self) -> float:
        return self.base_kva / 3.0

    @property
    def z_base_ohm(self) -> float:
        return 1000.0 * self.base_kv ** 2 / self.base_kva

    def kw(self, p_pu) -> float:
        return float(np.sum(p_pu) * self.s_base_kva_1ph)

    # -- lookups ------------------------------------------------------------
    def bus(self, bus_id: str) -> Bus:
        return self.buses[self.bus_index[bus_id]]

    @property
    def slack(self) -> Bus:
        return next(b for b in self.buses if b.is_slack)

    def branch_between(self, from_bus: str, to_bus: str) -> Branch:
        for br in self.branches:
            if br.from_bus == from_bus and br.to_bus == to_bus:
                return br
        raise FeederError(f"no branch {from_bus}-{to_bus}")

    def ders_at(self, bus_id: str) -> list[Der]:
        return [d for d in self.ders if d.bus == bus_id]

    def total_load_kw(self) -> float:
        return self.kw(sum(b.load_p.sum() for b in self.buses))

    # -- validation ---------------------------------------------------------
    def _validate(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise FeederError("duplicate bus ids")
        index = {b.id: i for i, b in enumerate(self.buses)}
        slacks = [b for b in self.buses if b.is_slack]
        if len(slacks) != 1:
            raise FeederError(f"expected exactly one slack bus, found {len(slacks)}")
        if len(self.branches) != len(self.buses) - 1:
            raise FeederError(
                f"radial feeder needs |branches| = |buses|-1 "
                f"(got {len(self.branches)} vs {len(self.buses) - 1})")
        adjacency: dict[str, list[Branch]] = {b.id: [] for b in self.buses}
        for br in self.branches:
            for end in (br.from_bus, br.to_bus):
                if end not in index:
                    raise FeederError(f"branch {br.name}: unknown bus {end!r}")
            bf, bt = self.buses[index[br.from_bus]], self.buses[index[br.to_bus]]
            for p in br.phases:
                if p not in bf.phases or p not in bt.phases:
                    raise FeederError(f"branch {br.name}: phase {p} missing at endpoint")
            adjacency[br.from_bus].append(br)
            adjacency[br.to_bus].append(br)

        # BFS from slack; orient branches away from it and detect cycles
        root = slacks[0].id
        parent: dict[str, Branch] = {}
        children: dict[str, list[Branch]] = {b.id: [] for b in self.buses}
        order = [root]
        seen = {root}
        queue = [root]
        while queue:
            u = queue.pop(0)
            for br in adjacency[u]:
                v = br.to_bus if br.from_bus == u else br.from_bus
                if v in seen:
                    if parent.get(u) is not br:
                        raise FeederError(f"cycle detected at branch {br.name}")
                    continue
                if br.from_bus != u:
                    raise FeederError(
                        f"branch {br.name} oriented against the tree (expected {u}->{v})")
                parent[v] = br
                children[u].append(br)
                seen.add(v)
                order.append(v)
                queue.append(v)
        if len(seen) != len(self.buses):
            missing = sorted(set(ids) - seen)
            raise FeederError(f"buses unreachable from slack: {missing}")

        # non-slack bus phases must be energized through the incoming branch
        for b in self.buses:
            if b.is_slack:
                continue
            feed = parent[b.id].phases
            for p in b.phases:
                if p not in feed:
                    raise FeederError(f"bus {b.id}: phase {p} not fed by {parent[b.id].name}")

        for d in self.ders:
            if d.bus not in index:
                raise FeederError(f"der references unknown bus {d.bus!r}")
            host = self.buses[index[d.bus]]
            for p in d.phases:
                if p not in host.phases:
                    raise FeederError(f"der at {d.bus}: bus lacks phase {p}")

        object.__setattr__(self, "bus_index", index)
        object.__setattr__(self, "parent", parent)
        object.__setattr__(self, "children", {k: tuple(v) for k, v in children.items()})
        object.__setattr__(self, "topo_order", tuple(order))


# ---------------------------------------------------------------------------
# Area partition


@dataclass(frozen=True)
class Interface:
    """Cut between a parent area and one of its child areas.

    ``shared_bus`` is the parent-side endpoint of the cut branch; the child
    sub-model includes a pinned copy of it plus the cut branch itself.
    """
    parent_area: str
    child_area: str
    shared_bus: str
    cut_branch: tuple[str, str]      # (shared_bus, child head bus)
    phases: str

    @property
    def name(self) -> str:
        return f"{self.parent_area}/{self.child_area}"


@dataclass(frozen=True)
class AreaPartition:
    areas: dict               # area id -> frozenset of bus ids
    root_area: str
    interfaces: tuple[Interface, ...]

    def upstream(self, area: str) -> Interface | None:
        for itf in self.interfaces:
            if itf.child_area == area:
                return itf
        return None

    def downstream(self, area: str) -> tuple[Interface, ...]:
        return tuple(i for i in self.interfaces if i.parent_area == area)

    def area_of(self, bus_id: str) -> str:
        for aid, members in self.areas.items():
            if bus_id in members:
                return aid
        raise FeederError(f"bus {bus_id!r} not assigned to any area")

    @property
    def area_ids(self) -> tuple[str, ...]:
        return tuple(self.areas.keys())


def partition_feeder(model: FeederModel, assignment: dict) -> AreaPartition:
    """Build an AreaPartition from ``{area id: iterable of bus ids}``.

    Every bus must be assigned exactly once, every area must induce a
    connected radial subgraph, and the area adjacency graph must be a tree
    rooted at the slack's area.
    """
    areas = {str(k): frozenset(str(b) for b in v) for k, v in assignment.items()}
    assigned: dict[str, str] = {}
    for aid, members in areas.items():
        if not members:
            raise FeederError(f"area {aid!r} is empty")
        for b in members:
            if b not in model.bus_index:
                raise FeederError(f"area {aid!r} references unknown bus {b!r}")
            if b in assigned:
                raise FeederError(f"bus {b!r} assigned to both {assigned[b]!r} and {aid!r}")
            assigned[b] = aid
    missing = [b.id for b in model.buses if b.id not in assigned]
    if missing:
        raise FeederError(f"buses not assigned to any area: {sorted(missing)}")

    root_area = assigned[model.slack.id]

    # cut branches and per-area connectivity
    interfaces = []
    internal: dict[str, list[Branch]] = {aid: [] for aid in areas}
    for br in model.branches:
        au, av = assigned[br.from_bus], assigned[br.to_bus]
        if au == av:
            internal[au].append(br)
        else:
            interfaces.append(Interface(
                parent_area=au, child_area=av, shared_bus=br.from_bus,
                cut_branch=(br.from_bus, br.to_bus), phases=br.phases))

    for aid, members in areas.items():
        heads = [b for b in members
                 if b == model.slack.id or assigned[model.parent[b].from_bus] != aid]
        if len(heads) != 1:
            raise FeederError(
                f"area {aid!r} is not connected/radial: {len(heads)} entry points")
        # traversal from the head over internal branches must cover the area
        reach = {heads[0]}
        frontier = [heads[0]]
        down = {br.from_bus: [] for br in internal[aid]}
        for br in internal[aid]:
            down.setdefault(br.from_bus, []).append(br.to_bus)
        while frontier:
            u = frontier.pop()
            for v in down.get(u, []):
                if v not in reach:
                    reach.add(v)
                    frontier.append(v)
        if reach != members:
            raise FeederError(f"area {aid!r} is disconnected: "
                              f"{sorted(members - reach)} unreachable from its head")

    parent_of = {i.child_area: i.parent_area for i in interfaces}
    if len(parent_of) != len(interfaces):
        raise FeederError("an area has more than one upstream interface")
    if set(parent_of) | {root_area} != set(areas):
        stranded = sorted(set(areas) - set(parent_of) - {root_area})
        raise FeederError(f"areas with no upstream path: {stranded}")
    # walk to the root from every area to rule out adjacency cycles
    for aid in areas:
        hops, cur = 0, aid
        while cur != root_area:
            cur = parent_of[cur]
            hops += 1
            if hops > len(areas):
                raise FeederError("area adjacency graph is not a tree")

    return AreaPartition(areas=areas, root_area=root_area, interfaces=tuple(interfaces))


# ---------------------------------------------------------------------------
# JSON parsing


def _phase_list_to_array(values, phases: str, what: str) -> np.ndarray:
    out = np.zeros(3)
    if values is None:
        return out
    if len(values) != 3:
        raise FeederError(f"{what}: expected 3 phase entries")
    for i, v in enumerate(values):
        if v is None:
            continue
        if PHASES[i] not in phases and float(v) != 0.0:
            raise FeederError(f"{what}: value on absent phase {PHASES[i]}")
        out[i] = float(v)
    return out


def _matrix_to_array(values, phases: str, what: str) -> np.ndarray:
    out = np.zeros((3, 3))
    if values is None:
        return out
    for i in range(3):
        for j in range(3):
            v = values[i][j]
            if v is None:
                continue
            if (PHASES[i] not in phases or PHASES[j] not in phases) and float(v) != 0.0:
                raise FeederError(f"{what}: impedance on absent phase pair "
                                  f"{PHASES[i]}{PHASES[j]}")
            out[i, j] = float(v)
    return out


def model_from_dict(doc: dict) -> FeederModel:
    """Build a per-unit FeederModel from the feeder JSON document."""
    try:
        base_kva = float(doc["base_kva"])
        base_kv = float(doc["base_kv"])
    except KeyError as exc:
        raise FeederError(f"missing top-level key {exc}") from exc
    if base_kva <= 0 or base_kv <= 0:
        raise FeederError("bases must be positive")
    s_base = base_kva / 3.0
    z_base = 1000.0 * base_kv ** 2 / base_kva

    buses = []
    for b in doc.get("buses", []):
        phases = validate_phases(str(b["phases"]), f"bus {b.get('id')}")
        buses.append(Bus(
            id=str(b["id"]),
            phases=phases,
            load_p=_phase_list_to_array(b.get("load_kw"), phases, f"bus {b['id']} load_kw") / s_base,
            load_q=_phase_list_to_array(b.get("load_kvar"), phases, f"bus {b['id']} load_kvar") / s_base,
            shunt_q=_phase_list_to_array(b.get("shunt_kvar"), phases, f"bus {b['id']} shunt_kvar") / s_base,
            v_min=float(b.get("vmin", 0.95)),
            v_max=float(b.get("vmax", 1.05)),
            is_slack=bool(b.get("slack", False)),
        ))

    branches = []
    for br in doc.get("branches", []):
        phases = validate_phases(str(br["phases"]), f"branch {br.get('from')}-{br.get('to')}")
        what = f"branch {br['from']}-{br['to']}"
        r = _matrix_to_array(br.get("r_ohm"), phases, what) / z_base
        x = _matrix_to_array(br.get("x_ohm"), phases, what) / z_base
        amps = br.get("amps")
        i_rated = None
        if amps is not None:
            # per-unit current base: per-phase kVA / line-neutral kV
            i_base = (base_kva / 3.0) / (base_kv / np.sqrt(3.0))
            i_rated = float(amps) / i_base
        branches.append(Branch(
            from_bus=str(br["from"]), to_bus=str(br["to"]),
            phases=phases, z=r + 1j * x, i_rated=i_rated))

    ders = []
    for d in doc.get("ders", []):
        phases = validate_phases(str(d["phases"]), f"der at {d.get('bus')}")
        p_fixed = d.get("p_fixed_kw")
        ders.append(Der(
            bus=str(d["bus"]), phases=phases,
            s_rated=_phase_list_to_array(d["s_kva"], phases, "der s_kva") / s_base,
            mode=str(d.get("mode", "reactive-dispatch")),
            p_fixed=None if p_fixed is None
            else _phase_list_to_array(p_fixed, phases, "der p_fixed_kw") / s_base,
        ))

    return FeederModel(buses=tuple(buses), branches=tuple(branches), ders=tuple(ders),
                       base_kva=base_kva, base_kv=base_kv)


def model_to_dict(model: FeederModel) -> dict:
    """Inverse of model_from_dict, converting back to physical units."""
    s_base = model.s_base_kva_1ph
    z_base = model.z_base_ohm
    i_base = s_base / (model.base_kv / np.sqrt(3.0))

    def phase_list(arr, phases):
        return [float(arr[i]) if PHASES[i] in phases else None for i in range(3)]

    doc = {"base_kva": model.base_kva, "base_kv": model.base_kv,
           "buses": [], "branches": [], "ders": []}
    for b in model.buses:
        doc["buses"].append({
            "id": b.id, "phases": b.phases,
            "load_kw": phase_list(b.load_p * s_base, b.phases),
            "load_kvar": phase_list(b.load_q * s_base, b.phases),
            "shunt_kvar": phase_list(b.shunt_q * s_base, b.phases),
            "vmin": b.v_min, "vmax": b.v_max, "slack": b.is_slack,
        })
    for br in model.branches:
        doc["branches"].append({
            "from": br.from_bus, "to": br.to_bus, "phases": br.phases,
            "r_ohm": (br.z.real * z_base).tolist(),
            "x_ohm": (br.z.imag * z_base).tolist(),
            "amps": None if br.i_rated is None else float(br.i_rated * i_base),
        })
    for d in model.ders:
        doc["ders"].append({
            "bus": d.bus, "phases": d.phases,
            "s_kva": phase_list(d.s_rated * s_base, d.phases),
            "mode": d.mode,
            "p_fixed_kw": None if d.p_fixed is None
            else phase_list(d.p_fixed * s_base, d.phases),
        })
    return doc


def parse_feeder(path: str | Path) -> FeederModel:
    """Load and validate a feeder JSON file."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FeederError(f"{path}: invalid JSON ({exc})") from exc
    return model_from_dict(doc)


def parse_partition(path: str | Path, model: FeederModel) -> AreaPartition:
    """Load a partition JSON (``areas[] {name, buses[]}``) against a model."""
    with open(path) as fh:
        doc = json.load(fh)
    try:
        assignment = {a["name"]: a["buses"] for a in doc["areas"]}
    except (KeyError, TypeError) as exc:
        raise FeederError(f"{path}: bad partition schema ({exc})") from exc
    return partition_feeder(model, assignment)


# ---------------------------------------------------------------------------
# Scenario edits


def scale_loads(model: FeederModel, factor) -> FeederModel:
    """Return a copy with load_p/load_q scaled, globally or per bus id."""
    if np.isscalar(factor):
        factors = {b.id: float(factor) for b in model.buses}
    else:
        factors = {str(k): float(v) for k, v in dict(factor).items()}
    for bid, f in factors.items():
        if f <= 0:
            raise FeederError(f"nonpositive load factor {f} for bus {bid}")
    buses = tuple(
        replace(b, load_p=b.load_p * factors.get(b.id, 1.0),
                load_q=b.load_q * factors.get(b.id, 1.0))
        for b in model.buses)
    return FeederModel(buses=buses, branches=model.branches, ders=model.ders,
                       base_kva=model.base_kva, base_kv=model.base_kv)


def _largest_load_three_phase_buses(model: FeederModel, exclude: set[str], count: int):
    candidates = [b for b in model.buses
                  if b.phases == "abc" and not b.is_slack and b.id not in exclude]
    candidates.sort(key=lambda b: (-float(b.load_p.sum()), b.id))
    if len(candidates) < count:
        raise FeederError(f"feeder has only {len(candidates)} eligible three-phase buses")
    return [b.id for b in candidates[:count]]


def apply_der_scenario(model: FeederModel, scenario, mode: str | None = None,
                       p_fixed_kw: float | None = None) -> FeederModel:
    """Install DERs per a named scenario or an explicit list.

    Named scenarios (per-phase ratings):
      ``i``   10 units at the seed buses, 60 kVA
      ``ii``  30 units (seed buses + 20 largest-load three-phase buses), 48 kVA
      ``iii`` same 30 locations, 60 kVA
    Default dispatch modes: reactive (p held at measured value) for i/ii with
    50 and 20 kW per phase respectively, active for iii.
    """
    s_base = model.s_base_kva_1ph
    if isinstance(scenario, str):
        name = scenario.lower().lstrip("(").rstrip(")")
        if name == "i":
            buses, s_kva = list(SCENARIO_SEED_BUSES), 60.0
            mode = mode or "reactive-dispatch"
            p_def = 50.0
        elif name == "ii":
            extra = _largest_load_three_phase_buses(model, set(SCENARIO_SEED_BUSES), 20)
            buses, s_kva = SCENARIO_SEED_BUSES + extra, 48.0
            mode = mode or "reactive-dispatch"
            p_def = 20.0
        elif name == "iii":
            extra = _largest_load_three_phase_buses(model, set(SCENARIO_SEED_BUSES), 20)
            buses, s_kva = SCENARIO_SEED_BUSES + extra, 60.0
            mode = mode or "active-dispatch"
            p_def = 0.0
        else:
            raise FeederError(f"unknown DER scenario {scenario!r}")
        if mode == "reactive-dispatch":
            p_kw = p_def if p_fixed_kw is None else p_fixed_kw
            entries = [(b, "abc", s_kva, mode, p_kw) for b in buses]
        else:
            entries = [(b, "abc", s_kva, mode, None) for b in buses]
    else:
        entries = [(str(e["bus"]), validate_phases(str(e["phases"]), "custom der"),
                    float(e["s_kva"]), str(e.get("mode", mode or "reactive-dispatch")),
                    e.get("p_fixed_kw", p_fixed_kw)) for e in scenario]

    ders = []
    for bus_id, phases, s_kva, der_mode, p_kw in entries:
        if bus_id not in model.bus_index:
            raise FeederError(f"der scenario references unknown bus {bus_id!r}")
        host = model.bus(bus_id)
        for p in phases:
            if p not in host.phases:
                raise FeederError(f"der at {bus_id}: bus lacks phase {p}")
        mask = _phase_mask(phases)
        s_pu = np.where(mask, s_kva / s_base, 0.0)
        p_pu = None
        if der_mode == "reactive-dispatch":
            p_pu = np.where(mask, (p_kw or 0.0) / s_base, 0.0)
        ders.append(Der(bus=bus_id, phases=phases, s_rated=s_pu,
                        mode=der_mode, p_fixed=p_pu))

    return FeederModel(buses=model.buses, branches=model.branches, ders=tuple(ders),
                       base_kva=model.base_kva, base_kv=model.base_kv)


# ---------------------------------------------------------------------------
# Area sub-models


def area_submodel(model: FeederModel, part: AreaPartition, area: str) -> FeederModel:
    """Extract one area as a standalone feeder.

    Non-root areas get a phase-reduced copy of the parent-side shared bus as
    their slack (no load there; the parent owns it) plus the cut branch, so
    the sub-model computes the flow entering the area through the cut.
    """
    if area not in part.areas:
        raise FeederError(f"unknown area {area!r}")
    members = part.areas[area]
    ua = part.upstream(area)

    buses = []
    branches = [br for br in model.branches
                if br.from_bus in members and br.to_bus in members]
    if ua is None:
        for b in model.buses:
            if b.id in members:
                buses.append(b)
    else:
        head = model.bus(ua.shared_bus)
        buses.append(Bus(id=head.id, phases=ua.phases,
                         load_p=np.zeros(3), load_q=np.zeros(3), shunt_q=np.zeros(3),
                         v_min=head.v_min, v_max=head.v_max, is_slack=True))
        for b in model.buses:
            if b.id in members:
                buses.append(b if not b.is_slack else replace(b, is_slack=False))
        branches.insert(0, model.branch_between(*ua.cut_branch))

    ders = tuple(d for d in model.ders if d.bus in members)
    return FeederModel(buses=tuple(buses), branches=tuple(branches), ders=ders,
                       base_kva=model.base_kva, base_kv=model.base_kv)
