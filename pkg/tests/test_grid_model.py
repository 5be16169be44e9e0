import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from demads.grid_model import (
    CycleDetected,
    DisconnectedBus,
    DuplicateLine,
    Line,
    NetworkTopology,
    NonConvergence,
    TopologyError,
    aggregate_substation,
    random_radial_topology,
    solve_power_flow,
    solve_power_flow_batch,
    topology_fingerprint,
    topology_from_dict,
    topology_to_dict,
    validate_topology,
)

from conftest import two_bus

# Scalar fixed point V1 <- 1 - z*conj(S/V1) for z = 0.01+0.005j, S = 0.1+0.02j,
# iterated until the update is below 1e-15 (computed separately, then frozen).
ORACLE_V1 = complex(0.998898697131993, -0.0003)
ORACLE_LOSS_P = 0.00010422944056644969


def scalar_oracle(z: complex, s: complex, v0: complex = 1.0, tol: float = 1e-12) -> complex:
    v = complex(v0)
    for _ in range(10_000):
        nv = v0 - z * np.conj(s / v)
        if abs(nv - v) < tol:
            return nv
        v = nv
    raise RuntimeError("oracle diverged")


def random_loads(rng, n, scale=0.02):
    s = rng.uniform(0, scale, n) + 1j * rng.uniform(-scale / 3, scale / 3, n)
    s[0] = 0
    return s


# --- topology -------------------------------------------------------------------

def test_smallest_tree_is_valid():
    topo = validate_topology(NetworkTopology(2, (Line(0, 1, 0.01, 0.0),)))
    assert topo.parent[1] == 0


def test_triangle_is_a_cycle():
    lines = (Line(0, 1, 0.01, 0), Line(1, 2, 0.01, 0), Line(2, 0, 0.01, 0))
    with pytest.raises(CycleDetected):
        validate_topology(NetworkTopology(3, lines))


def test_unreachable_bus():
    with pytest.raises(DisconnectedBus) as exc:
        validate_topology(NetworkTopology(3, (Line(0, 1, 0.01, 0),)))
    assert exc.value.bus == 2


def test_duplicate_line():
    with pytest.raises(DuplicateLine):
        validate_topology(NetworkTopology(3, (Line(0, 1, 0.01, 0), Line(1, 0, 0.02, 0), Line(1, 2, 0.01, 0))))


def test_reversed_line_is_reoriented():
    topo = validate_topology(NetworkTopology(3, (Line(1, 0, 0.01, 0), Line(2, 1, 0.01, 0))))
    assert topo.parent[1:] == (0, 1)
    assert all(ln.from_bus == topo.parent[ln.to_bus] for ln in topo.lines)


def test_negative_resistance_rejected():
    with pytest.raises(TopologyError):
        validate_topology(NetworkTopology(2, (Line(0, 1, -0.01, 0),)))


def test_feeder_membership():
    topo = random_radial_topology(12, 3, seed=4)
    heads = topo.feeder_heads()
    feeder = topo.feeder_of()
    assert feeder[0] == 0
    assert set(feeder[1:]) == set(heads)
    for h in heads:
        assert feeder[h] == h


def test_grid_file_round_trip():
    topo = random_radial_topology(9, 2, seed=8)
    data = json.loads(json.dumps(topology_to_dict(topo)))
    again = topology_from_dict(data)
    assert topology_fingerprint(again) == topology_fingerprint(topo)
    assert again.lines == topo.lines


def test_grid_file_rejects_cycle():
    data = {"base_voltage_v": 400, "base_power_kva": 100, "buses": [{"id": i} for i in range(3)],
            "lines": [{"from": 0, "to": 1, "r_pu": .01, "x_pu": 0}, {"from": 1, "to": 2, "r_pu": .01, "x_pu": 0},
                      {"from": 2, "to": 0, "r_pu": .01, "x_pu": 0}]}
    with pytest.raises(CycleDetected):
        topology_from_dict(data)


# --- power flow -----------------------------------------------------------------

def test_zero_load_is_flat():
    topo = random_radial_topology(7, 2, seed=1)
    res = solve_power_flow(topo, np.zeros(7, complex), slack_voltage=1.02)
    assert np.all(res.voltages == 1.02)
    assert res.iterations == 1
    rec = aggregate_substation(res, topo)
    assert rec["v_slack"] == 1.02
    assert all(v == 0 for k, v in rec.items() if k != "v_slack")


def test_two_bus_matches_scalar_oracle():
    # the frozen constant and a fresh oracle run agree with each other first
    assert abs(scalar_oracle(0.01 + 0.005j, 0.1 + 0.02j) - ORACLE_V1) < 1e-12
    res = solve_power_flow(two_bus(), np.array([0, 0.1 + 0.02j]))
    assert abs(res.voltages[1] - ORACLE_V1) <= 1e-8
    assert res.residual <= 1e-8


def test_two_bus_losses_and_slack_power():
    topo = two_bus()
    res = solve_power_flow(topo, np.array([0, 0.1 + 0.02j]))
    i_line = res.line_currents[0]
    assert res.losses.real == pytest.approx(abs(i_line) ** 2 * 0.01, abs=1e-12)
    assert res.losses.real == pytest.approx(ORACLE_LOSS_P, abs=1e-9)
    rec = aggregate_substation(res, topo)
    assert rec["p_total"] == pytest.approx(0.1 + ORACLE_LOSS_P, abs=1e-9)


def test_overload_does_not_converge():
    with pytest.raises(NonConvergence):
        solve_power_flow(two_bus(), np.array([0, 100.0 + 0j]))


def test_identical_feeders_give_equal_channels():
    lines = (Line(0, 1, 0.02, 0.01), Line(1, 2, 0.03, 0.01), Line(0, 3, 0.02, 0.01), Line(3, 4, 0.03, 0.01))
    topo = validate_topology(NetworkTopology(5, lines))
    s = np.array([0, 0.01 + 0.003j, 0.02 + 0.005j, 0.01 + 0.003j, 0.02 + 0.005j])
    rec = aggregate_substation(solve_power_flow(topo, s), topo)
    assert rec["p_feeder1"] == pytest.approx(rec["p_feeder3"], abs=1e-15)
    assert rec["q_feeder1"] == pytest.approx(rec["q_feeder3"], abs=1e-15)


def test_aggregate_recomputes_from_result():
    topo = random_radial_topology(10, 3, seed=6)
    rng = np.random.default_rng(0)
    res = solve_power_flow(topo, random_loads(rng, 10))
    rec = aggregate_substation(res, topo)
    heads = topo.feeder_heads()
    idx = {ln.to_bus: k for k, ln in enumerate(topo.lines)}
    total_i = sum(res.line_currents[idx[h]] for h in heads)
    s = res.voltages[0] * np.conj(total_i)
    assert rec["p_total"] == pytest.approx(s.real, abs=1e-9)
    assert rec["q_total"] == pytest.approx(s.imag, abs=1e-9)
    assert rec["i_slack"] == pytest.approx(abs(total_i), abs=1e-9)
    assert rec["p_total"] == pytest.approx(sum(rec[f"p_feeder{h}"] for h in heads), abs=1e-12)


def test_batch_rows_equal_single_solves():
    topo = random_radial_topology(8, 2, seed=3)
    rng = np.random.default_rng(5)
    loads = np.stack([random_loads(rng, 8) for _ in range(4)])
    batch = solve_power_flow_batch(topo, loads)
    for t in range(4):
        single = solve_power_flow(topo, loads[t])
        assert np.max(np.abs(batch.voltages[t] - single.voltages)) < 1e-8


def test_solver_is_deterministic():
    topo = random_radial_topology(10, 2, seed=2)
    s = random_loads(np.random.default_rng(9), 10)
    a, b = solve_power_flow(topo, s), solve_power_flow(topo, s)
    assert a.voltages.tobytes() == b.voltages.tobytes()


@settings(max_examples=60, deadline=None)
@given(n=st.integers(5, 15), feeders=st.integers(1, 4), seed=st.integers(0, 10_000))
def test_power_balance_and_nonnegative_losses(n, feeders, seed):
    topo = random_radial_topology(n, feeders, seed)
    s = random_loads(np.random.default_rng(seed), n)
    res = solve_power_flow(topo, s)
    balance = res.slack_power - s[1:].sum() - res.losses
    assert abs(balance.real) <= 1e-6 and abs(balance.imag) <= 1e-6
    assert res.losses.real >= 0


def test_more_load_lowers_voltage_on_two_bus():
    topo = two_bus()
    mags = [abs(solve_power_flow(topo, np.array([0, p + 0.1j * p])).voltages[1]) for p in np.linspace(0, 5, 40)]
    assert np.all(np.diff(mags) < 0)
