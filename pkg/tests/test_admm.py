import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ccdopf.admm import (AdmmConfig, ConvergenceTrace, LocalProblem, MessageBus, ProtocolViolation,
                         RoundStall, _init_agents, default_rho, injection_compare_csv, run_admm)
from ccdopf.netmodel import Branch, Bus, orient_from_root
from ccdopf.opf import solve_centralized
from ccdopf.policies import InverterSpec
from helpers import equivalence_feeders, two_bus

TIGHT = AdmmConfig(max_iters=500, tol_primal=1e-5, tol_dual=1e-5)


def chain(n=4):
    buses = [Bus(1)] + [Bus(i, 0.03, 0.02) for i in range(2, n + 1)]
    return orient_from_root(1, buses, [Branch(i - 1, i, 0.04, 0.05) for i in range(2, n + 1)])


def test_local_step_stationarity():
    # with X = 0 the voltage rows do not involve q-, so q- solves the scalar problem alone
    net = two_bus(x=0.0)
    spec = InverterSpec(2, 5.0, 0.0)
    agents, fc = _init_agents(net, [spec], None)
    prob = LocalProblem(net, agents[2], spec, None, fc.flow_p[(1, 2)], rho=1.0)
    g = np.array([1.0, fc.u[2], fc.u[1]])
    sol = prob.solve(g, np.zeros(3))
    assert sol.ok
    assert sol.x[0] == pytest.approx(1.0 / 1.02, abs=1e-12)


def test_two_bus_matches_centralized():
    net = two_bus()
    specs = [InverterSpec(2, 0.5, 0.02)]
    res = run_admm(net, specs, None, TIGHT)
    central = solve_centralized(net, specs)
    assert res.converged
    assert res.solution.injections.q(2) == pytest.approx(central.injections.q(2), abs=1e-3)


def test_default_rho():
    net = orient_from_root(1, [Bus(1, v_nom=1.05, v_min=1.0, v_max=1.1), Bus(2)], [Branch(1, 2, 0.01, 0.01)])
    assert default_rho(net) == pytest.approx(1 / 1.05 ** 2)
    assert default_rho(two_bus()) == 1.0


def test_config_validation():
    for kw in ({"rho": 0.0}, {"max_iters": 0}, {"tol_primal": 0.0}):
        with pytest.raises(ValueError):
            AdmmConfig(**kw)


def test_bus_rejects_non_neighbours():
    bus = MessageBus(chain())
    bus.send(1, 2, 3, "q_plus", 0.1)
    with pytest.raises(ProtocolViolation):
        bus.send(1, 1, 3, "q_plus", 0.1)
    assert bus.non_neighbour_count() == 1
    assert bus.neighbours(2) == {1, 3}


def test_bus_barrier_stall_and_duplicates():
    bus = MessageBus(chain())
    bus.send(1, 2, 3, "q_plus", 0.1)
    with pytest.raises(RoundStall) as exc:
        bus.deliver([(2, 3, "q_plus"), (4, 3, "q_minus")])
    assert exc.value.missing == [(4, 3, "q_minus")]
    bus.send(2, 2, 3, "q_plus", 0.1)
    bus.send(2, 2, 3, "q_plus", 0.2)
    with pytest.raises(ProtocolViolation, match="duplicate"):
        bus.deliver()
    bus = MessageBus(chain())
    bus.send(1, 3, 2, "q_minus", 0.5)
    assert bus.deliver([(3, 2, "q_minus")])[2] == {(3, "q_minus"): 0.5}
    assert bus.log_csv() == "round,from,to,kind\n1,3,2,q_minus\n"


def test_run_audit_and_trace():
    net = chain(6)
    res = run_admm(net, [InverterSpec(4, 0.1, 0.02), InverterSpec(6, 0.1, 0.02)])
    assert res.converged
    assert res.bus.non_neighbour_count() == 0
    assert all(m.dst in res.bus.neighbours(m.src) for m in res.bus.log)
    iters = [r["iter"] for r in res.trace.records]
    assert iters == list(range(1, res.iterations + 1))
    assert math.isinf(res.trace.records[0]["dual_res"])
    last = res.trace.records[-1]
    assert last["primal_res"] < 1e-4 and last["dual_res"] < 1e-4
    assert res.trace.to_csv(10.0).splitlines()[0] == \
        "iter,primal_res,dual_res,total_q_pu,total_q_mvar,losses_pu,losses_mw"


def test_trace_rejects_repeated_iteration():
    tr = ConvergenceTrace()
    tr.append(1, 1.0, 1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        tr.append(1, 1.0, 1.0, 0.0, 0.0)


def test_iteration_cap_reports_not_converged():
    res = run_admm(chain(6), [InverterSpec(4, 0.1, 0.02)], None, AdmmConfig(max_iters=3))
    assert not res.converged and res.iterations == 3
    assert res.solution.status == "not-converged"


def test_threaded_agents_are_deterministic():
    net = chain(5)
    specs = [InverterSpec(3, 0.1, 0.02), InverterSpec(5, 0.1, 0.01)]
    a = run_admm(net, specs, None, AdmmConfig())
    b = run_admm(net, specs, None, AdmmConfig(workers=3))
    assert a.iterations == b.iterations
    assert a.trace.to_csv() == b.trace.to_csv()


def test_bad_inverter_placement():
    with pytest.raises(ValueError, match="root"):
        run_admm(two_bus(), [InverterSpec(1, 0.5, 0.0)])
    with pytest.raises(ValueError, match="unknown"):
        run_admm(two_bus(), [InverterSpec(9, 0.5, 0.0)])


def test_compare_csv():
    net = two_bus()
    specs = [InverterSpec(2, 0.5, 0.02)]
    text = injection_compare_csv(net, run_admm(net, specs).solution, solve_centralized(net, specs))
    assert text.startswith("node,q_pu,q_mvar,centralized_q_pu,centralized_q_mvar\n2,")


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matches_centralized_on_random_feeders(seed):
    net, specs = next(equivalence_feeders(seed, count=1))
    central = solve_centralized(net, specs)
    res = run_admm(net, specs, None, TIGHT)
    assert res.converged
    assert abs(res.solution.losses - central.losses) <= 1e-3 * central.losses
    for s in specs:
        assert res.solution.injections.q(s.node) == pytest.approx(central.injections.q(s.node), abs=1e-3)


def test_dual_update_steps():
    from ccdopf.admm import AdmmNodeState, dual_update
    a = AdmmNodeState(2, 1, (), {}, q_minus=0.5, u_plus=1.0, u_minus=1.0)
    a.g_q_parent, a.g_u_self, a.g_u_parent = 0.4, 1.0, 1.0
    dual_update(a, 1.0)
    assert a.lam_q_minus == pytest.approx(0.1)
    dual_update(a, 1.0)
    assert a.lam_q_minus == pytest.approx(0.2)
    assert a.lam_u_plus == 0.0 and a.lam_u_minus == 0.0


def test_exchange_means_and_order():
    from ccdopf.admm import exchange_and_average
    net = chain(3)
    agents, _ = _init_agents(net, [], None)
    agents[1].q_plus[2] = 0.2
    agents[2].q_minus = 0.4
    g = exchange_and_average(agents, MessageBus(net), 1, net)
    assert g.q_edge[(1, 2)] == pytest.approx(0.3)
    assert agents[2].g_q_parent == pytest.approx(0.3)
    assert g.u_node[1] == 1.0
    # the mean does not depend on the order agents are stored in
    shuffled, _ = _init_agents(net, [], None)
    shuffled[1].q_plus[2] = 0.2
    shuffled[2].q_minus = 0.4
    shuffled = dict(reversed(list(shuffled.items())))
    assert exchange_and_average(shuffled, MessageBus(net), 1, net) == g


def test_recover_injection_arithmetic():
    from ccdopf.admm import AdmmNodeState, recover_injections
    net = chain(3)
    a = AdmmNodeState(2, 1, (3,), {3: 0.3}, q_minus=0.1)
    inj = recover_injections({2: a}, net.with_loads({2: (0.0, 0.05)}), [InverterSpec(2, 0.5, 0.1)])
    assert inj.q(2) == pytest.approx(0.25)


def test_consensus_at_convergence():
    from ccdopf.admm import recover_injections
    net = chain(6)
    specs = [InverterSpec(4, 0.1, 0.02), InverterSpec(6, 0.1, 0.02)]
    res = run_admm(net, specs)
    worst = max(float(np.max(np.abs(a.local_vector() - a.global_vector()))) for a in res.agents.values())
    assert worst < 1e-4
    from_locals = recover_injections(res.agents, net, specs)
    for s in specs:
        assert abs(from_locals.q(s.node) - res.globals.q_node[s.node]) <= 2 * 1e-4 * (1 + len(net.children[s.node]))
    assert res.solution.injections.total_q() == pytest.approx(res.trace.records[-1]["total_q"], abs=1e-15)
