import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dopf import data_path
from dopf.feeder import model_from_dict, parse_feeder, parse_partition


def two_bus_doc():
    # per-unit: z = 0.01 + j0.02, load 0.1 + j0.05 on phase a
    return {
        "base_kva": 300.0, "base_kv": 2.4,
        "buses": [
            {"id": "s", "phases": "a", "slack": True},
            {"id": "1", "phases": "a",
             "load_kw": [10.0, None, None], "load_kvar": [5.0, None, None]},
        ],
        "branches": [
            {"from": "s", "to": "1", "phases": "a",
             "r_ohm": [[0.192, None, None], [None, None, None], [None, None, None]],
             "x_ohm": [[0.384, None, None], [None, None, None], [None, None, None]]},
        ],
        "ders": [],
    }


def five_bus_doc():
    # unbalanced hand case: 3ph trunk with mutual coupling, 2ph and 1ph
    # laterals, a capacitor and asymmetric loads
    zb = 19.2   # ohms at 2.4 kV / 300 kVA three-phase base
    r3 = [[0.010 * zb, 0.003 * zb, 0.002 * zb],
          [0.003 * zb, 0.011 * zb, 0.004 * zb],
          [0.002 * zb, 0.004 * zb, 0.012 * zb]]
    x3 = [[0.025 * zb, 0.008 * zb, 0.006 * zb],
          [0.008 * zb, 0.024 * zb, 0.007 * zb],
          [0.006 * zb, 0.007 * zb, 0.026 * zb]]
    r2 = [[0.02 * zb, 0.005 * zb, None], [0.005 * zb, 0.022 * zb, None],
          [None, None, None]]
    x2 = [[0.04 * zb, 0.01 * zb, None], [0.01 * zb, 0.042 * zb, None],
          [None, None, None]]
    r1 = [[None, None, None], [None, None, None], [None, None, 0.05 * zb]]
    x1 = [[None, None, None], [None, None, None], [None, None, 0.08 * zb]]
    return {
        "base_kva": 300.0, "base_kv": 2.4,
        "buses": [
            {"id": "s", "phases": "abc", "slack": True},
            {"id": "m", "phases": "abc",
             "load_kw": [8.0, 6.0, 10.0], "load_kvar": [3.0, 2.0, 4.0]},
            {"id": "x", "phases": "ab",
             "load_kw": [5.0, 3.0, None], "load_kvar": [2.0, 1.0, None]},
            {"id": "y", "phases": "c",
             "load_kw": [None, None, 4.0], "load_kvar": [None, None, 1.5],
             "shunt_kvar": [None, None, 2.0]},
            {"id": "z", "phases": "abc",
             "load_kw": [6.0, 7.0, 5.0], "load_kvar": [2.5, 3.0, 2.0]},
        ],
        "branches": [
            {"from": "s", "to": "m", "phases": "abc", "r_ohm": r3, "x_ohm": x3},
            {"from": "m", "to": "x", "phases": "ab", "r_ohm": r2, "x_ohm": x2},
            {"from": "m", "to": "y", "phases": "c", "r_ohm": r1, "x_ohm": x1},
            {"from": "m", "to": "z", "phases": "abc", "r_ohm": r3, "x_ohm": x3},
        ],
        "ders": [],
    }


def chain_doc():
    """Three-phase 7-bus chain with DERs, partitionable into 3 areas."""
    zb = 19.2

    def blk(r, x):
        return ([[r * zb, 0.3 * r * zb, 0.25 * r * zb],
                 [0.3 * r * zb, 1.05 * r * zb, 0.3 * r * zb],
                 [0.25 * r * zb, 0.3 * r * zb, 1.1 * r * zb]],
                [[x * zb, 0.35 * x * zb, 0.3 * x * zb],
                 [0.35 * x * zb, 1.02 * x * zb, 0.35 * x * zb],
                 [0.3 * x * zb, 0.35 * x * zb, 1.04 * x * zb]])
    buses = [{"id": "b0", "phases": "abc", "slack": True}]
    branches = []
    for k in range(1, 7):
        buses.append({"id": f"b{k}", "phases": "abc",
                      "load_kw": [6.0 + k, 5.0 + k, 7.0 + k],
                      "load_kvar": [2.0 + 0.5 * k, 2.0, 2.5]})
        r, x = blk(0.004 + 0.001 * k, 0.01)
        branches.append({"from": f"b{k-1}", "to": f"b{k}", "phases": "abc",
                         "r_ohm": r, "x_ohm": x})
    ders = [
        {"bus": "b2", "phases": "abc", "s_kva": [12.0, 12.0, 12.0],
         "mode": "reactive-dispatch", "p_fixed_kw": [8.0, 8.0, 8.0]},
        {"bus": "b5", "phases": "abc", "s_kva": [12.0, 12.0, 12.0],
         "mode": "reactive-dispatch", "p_fixed_kw": [8.0, 8.0, 8.0]},
    ]
    return {"base_kva": 300.0, "base_kv": 2.4,
            "buses": buses, "branches": branches, "ders": ders}


CHAIN_AREAS = {"a1": ["b0", "b1", "b2"], "a2": ["b3", "b4"], "a3": ["b5", "b6"]}


@pytest.fixture(scope="session")
def two_bus():
    return model_from_dict(two_bus_doc())


@pytest.fixture(scope="session")
def five_bus():
    return model_from_dict(five_bus_doc())


@pytest.fixture(scope="session")
def chain():
    return model_from_dict(chain_doc())


@pytest.fixture(scope="session")
def ieee123():
    return parse_feeder(data_path("ieee123.json"))


@pytest.fixture(scope="session")
def ieee123_partition(ieee123):
    return parse_partition(data_path("ieee123_areas4.json"), ieee123)
