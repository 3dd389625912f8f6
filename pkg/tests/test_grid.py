import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opfguard.grid import (
    CaseError,
    CaseValidationError,
    Generator,
    GridCase,
    Line,
    Load,
    UnsupportedFeatureError,
    bus_injections,
    case_from_dict,
    case_to_dict,
    line_flows,
    load_case,
    parse_case,
    parse_matpower,
    save_case,
    serialize_case,
)

DATA = Path(__file__).resolve().parents[1] / "src" / "opfguard" / "data"


def ring3():
    return GridCase(
        3,
        [Line(0, 1, 10.0, 100.0), Line(1, 2, 10.0, 100.0), Line(0, 2, 10.0, 100.0)],
        [Generator(0, 0.0, 100.0, 1.0)],
        [Load(1, 50.0)],
        slack_bus=0,
    )


def test_case9_counts(case9):
    assert (case9.n_buses, case9.n_lines, case9.n_gens, case9.n_loads) == (9, 9, 3, 3)
    assert case9.load_max.sum() == pytest.approx(315.0)
    assert case9.slack_gen == 0
    assert list(case9.cost) == [5.0, 1.2, 1.0]


def test_matpower_and_json_agree(case9):
    from_m = parse_matpower((DATA / "case9.m").read_text(), name="case9")
    assert case_to_dict(from_m) == case_to_dict(case9)


def test_json_round_trip_is_exact(case9, tmp_path):
    p = tmp_path / "c.json"
    save_case(case9, p)
    again = load_case(p)
    assert serialize_case(again) == serialize_case(case9)


def test_infinite_limit_round_trip(tmp_path):
    c = GridCase(2, [Line(0, 1, 5.0, math.inf)], [Generator(0, 0, 10, 1)], [Load(1, 5)], 0)
    again = parse_case(serialize_case(c))
    assert math.isinf(again.flow_limit[0])


def test_ring_ptdf_closed_form():
    # injection at bus 1 splits 2/3 on the direct line and 1/3 around the ring
    adm = ring3().admittance
    flows = line_flows(adm, np.array([-1.0, 0.0]))
    assert flows == pytest.approx([2 / 3, -1 / 3, 1 / 3])


def test_ptdf_matches_angle_solution(case9):
    rng = np.random.default_rng(0)
    adm = case9.admittance
    ns = case9.nonslack_buses
    for _ in range(5):
        inj = rng.normal(size=ns.size) * 50
        theta = np.zeros(case9.n_buses)
        theta[ns] = np.linalg.solve(adm.b_bus[np.ix_(ns, ns)], inj)
        assert line_flows(adm, inj) == pytest.approx(adm.b_line @ theta, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=8, max_size=8))
def test_flows_conserve_at_nonslack_buses(values):
    case = load_case("case9")
    inj = np.array(values)
    adm = case.admittance
    f = line_flows(adm, inj)
    # net outflow at every non-slack bus equals its injection
    out = np.zeros(case.n_buses)
    for ell, ln in enumerate(case.lines):
        out[ln.from_bus] += f[ell]
        out[ln.to_bus] -= f[ell]
    assert out[case.nonslack_buses] == pytest.approx(inj, abs=1e-8)


def test_bus_injections_batch(case9):
    p_g = np.array([[10.0, 35.0, 270.0], [50.0, 50.0, 50.0]])
    p_d = np.tile(case9.load_max, (2, 1))
    inj = bus_injections(case9, p_g, p_d)
    assert inj.shape == (2, 8)
    full = p_g @ case9.maps.gen_map.T - p_d @ case9.maps.load_map.T
    assert inj == pytest.approx(full[:, case9.nonslack_buses])


@pytest.mark.parametrize(
    "mutate, exc",
    [
        (lambda d: d.update(slack_bus=5), CaseValidationError),
        (lambda d: d["lines"].append({"from": 0, "to": 0, "susceptance": 1.0, "flow_limit": 1.0}), CaseValidationError),
        (lambda d: d["lines"].__setitem__(0, {**d["lines"][0], "flow_limit": -1.0}), CaseValidationError),
        (lambda d: d["generators"].__setitem__(0, {**d["generators"][0], "p_min": 500.0}), CaseValidationError),
        (lambda d: d["loads"].append({"bus": 99, "p_max": 1.0}), CaseValidationError),
        (lambda d: d.pop("lines"), CaseError),
    ],
)
def test_validation_errors(case9, mutate, exc):
    d = json.loads(serialize_case(case9))
    mutate(d)
    with pytest.raises(exc):
        case_from_dict(d)


def test_disconnected_network_rejected():
    with pytest.raises(CaseValidationError, match="disconnected"):
        GridCase(3, [Line(0, 1, 1.0, 1.0)], [Generator(0, 0, 1, 1)], [], 0)


MATPOWER_MINI = """function mpc = mini
mpc.baseMVA = 100;
mpc.bus = [
 1 3 0 0 0 0 1 1 0 345 1 1.1 0.9;
 2 1 40 0 0 0 1 1 0 345 1 1.1 0.9;
];
mpc.gen = [
 1 0 0 300 -300 1 100 1 250 10 0 0 0 0 0 0 0 0 0 0 0;
];
mpc.branch = [
 1 2 0 0.05 0 0 0 0 0 0 1 -360 360;
];
mpc.gencost = [
 2 0 0 2 7 0;
];
"""


def test_matpower_zero_rating_is_unlimited():
    c = parse_matpower(MATPOWER_MINI)
    assert math.isinf(c.flow_limit[0])
    assert c.lines[0].susceptance == pytest.approx(20.0)
    assert c.gens[0].cost == 7.0


def test_matpower_quadratic_cost_unsupported():
    text = MATPOWER_MINI.replace("2 0 0 2 7 0;", "2 0 0 3 0.1 7 0;")
    with pytest.raises(UnsupportedFeatureError) as ei:
        parse_matpower(text)
    assert ei.value.line == 14


def test_matpower_bad_number_reports_line():
    text = MATPOWER_MINI.replace("2 1 40", "2 1 4x0")
    with pytest.raises(CaseError) as ei:
        parse_matpower(text)
    assert ei.value.line == 5


def test_matpower_unterminated_matrix():
    text = MATPOWER_MINI.replace("];\nmpc.gencost", ";\nmpc.gencost")
    with pytest.raises(CaseError):
        parse_matpower(text)


def test_missing_case_file():
    with pytest.raises(FileNotFoundError):
        load_case("/nonexistent/case.json")


def test_reduced_variant(case9_2load, case9):
    assert case9_2load.n_loads == 2
    assert case9_2load.n_buses == case9.n_buses
