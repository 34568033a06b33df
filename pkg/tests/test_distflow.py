import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ccdopf.distflow import (InjectionSet, branch_voltage_profile, bus_table_csv, edge_losses, edge_table_csv,
                             residuals, solve_lindistflow, total_losses)
from helpers import dense_lindistflow, random_feeder, two_bus

# frozen from the dense linear-system oracle in helpers.py
CASE33_LOSSES_PU = 0.017636179672701265
CASE33_MIN_U = 0.838935776874334


def test_two_bus_hand_values():
    net = two_bus()
    st_ = solve_lindistflow(net)
    assert st_.flow_p[(1, 2)] == pytest.approx(0.1, abs=1e-15)
    assert st_.flow_q[(1, 2)] == pytest.approx(0.05, abs=1e-15)
    assert abs(st_.u[2] - 0.996) <= 1e-12
    prof = branch_voltage_profile(net, st_, 2)
    assert prof[0] == (1, 1.0)
    assert prof[1][1] == pytest.approx(math.sqrt(0.996), abs=1e-14)


def test_single_edge_loss():
    st_ = solve_lindistflow(two_bus())
    assert edge_losses(two_bus(), st_)[(1, 2)] == pytest.approx(0.01 * (0.01 + 0.0025), abs=1e-16)


def test_pv_cancels_load():
    net = two_bus()
    st_ = solve_lindistflow(net, InjectionSet({2: 0.1}, {2: 0.05}))
    assert st_.u[2] == 1.0
    assert total_losses(net, st_) == 0.0


def test_case33_base(net33):
    st_ = solve_lindistflow(net33)
    assert total_losses(net33, st_) == pytest.approx(CASE33_LOSSES_PU, abs=1e-12)
    assert min(st_.u.values()) == pytest.approx(CASE33_MIN_U, abs=1e-12)
    assert max(residuals(net33, InjectionSet(), st_).values()) < 1e-14


def test_case33_profiles_monotone_without_pv(net33):
    st_ = solve_lindistflow(net33)
    for leaf in net33.leaves():
        v = [x for _, x in branch_voltage_profile(net33, st_, leaf)]
        assert all(b <= a for a, b in zip(v, v[1:]))


def test_unknown_injection_bus(net33):
    with pytest.raises(ValueError, match="unknown bus"):
        solve_lindistflow(net33, InjectionSet({99: 0.1}))
    with pytest.raises(ValueError, match="non-finite"):
        solve_lindistflow(net33, InjectionSet({2: math.nan}))


def test_csv_tables(net33):
    st_ = solve_lindistflow(net33)
    bus = bus_table_csv(net33, st_).splitlines()
    assert bus[0] == "bus,v_pu,u_pu2" and len(bus) == 34
    edge = edge_table_csv(net33, st_).splitlines()
    assert edge[0].startswith("from_bus,to_bus,p_pu,q_pu,p_mw,q_mvar") and len(edge) == 33


def test_sweep_matches_dense_system_on_random_feeders():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        net = random_feeder(rng)
        pv = {b: float(rng.uniform(0, 0.1)) for b in net.bus_ids[1:] if rng.random() < 0.4}
        qv = {b: float(rng.uniform(-0.05, 0.05)) for b in pv}
        st_ = solve_lindistflow(net, InjectionSet(pv, qv))
        p, q, u = dense_lindistflow(net, pv, qv)
        for e in net.edges:
            worst = max(worst, abs(st_.flow_p[e] - p[e]), abs(st_.flow_q[e] - q[e]))
        worst = max(worst, max(abs(st_.u[b] - u[b]) for b in net.bus_ids))
    assert worst <= 1e-10
    assert time.perf_counter() - t0 < 5.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.1), st.floats(-0.05, 0.05))
def test_flow_conservation_and_linearity(seed, p_inj, q_inj):
    net = random_feeder(np.random.default_rng(seed))
    b = net.leaves()[0]
    inj = InjectionSet({b: p_inj}, {b: q_inj})
    st_ = solve_lindistflow(net, inj)
    assert max(residuals(net, inj, st_).values()) < 1e-12
    # root flow equals total net demand (losses are not in the linear model)
    root_p = sum(st_.flow_p[e] for e in net.child_edges(net.root))
    demand = sum(x.load_p for x in net.buses) - p_inj
    assert root_p == pytest.approx(demand, abs=1e-12)
    # u is affine in injections: superposition around the no-PV state
    base = solve_lindistflow(net)
    half = solve_lindistflow(net, InjectionSet({b: p_inj / 2}, {b: q_inj / 2}))
    for i in net.bus_ids:
        assert half.u[i] == pytest.approx((base.u[i] + st_.u[i]) / 2, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_voltage_drops_along_every_branch_without_pv(seed):
    net = random_feeder(np.random.default_rng(seed))
    st_ = solve_lindistflow(net)
    for i, j in net.edges:
        assert st_.u[j] <= st_.u[i] + 1e-15
