"""Centralized loss-minimization OPF over the LinDistFlow model."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .distflow import InjectionSet, PowerFlowState, solve_lindistflow, total_losses
from .netmodel import RadialNetwork
from .policies import InverterSpec, capability_q
from .qpcore import QpSolution, QuadProgram, solve_qp
from .uncertainty import UncertaintyModel, pf_reactive_range


class OpfStateError(RuntimeError):
    pass


@dataclass
class OpfSolution:
    state: PowerFlowState | None
    injections: InjectionSet
    losses: float
    status: str
    qp: QpSolution | None = field(default=None, repr=False)
    violated: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def active_injection(spec: InverterSpec, model: UncertaintyModel | None) -> float:
    """PV active output held fixed in the OPF: the forecast mean, or p_ref without a model."""
    if model is not None and spec.node in model.mean:
        return model.mean[spec.node]
    return spec.p_ref


def reactive_range(spec: InverterSpec, model: UncertaintyModel | None) -> float:
    """Half-width of the allowed reactive injection interval for one inverter.

    Without a model this is the rating limit at fixed active output; with one it
    is the chance-tightened power-factor coupling.
    """
    if model is None or spec.node not in model.mean:
        return capability_q(spec, spec.p_ref)
    return pf_reactive_range(spec.node, model, spec.pf)


class _Layout:
    """Variable indexing for the centralized QP: [q_i (PV) | p_ij | q_ij | u_i]."""

    def __init__(self, net: RadialNetwork, pv_nodes: list[int]):
        self.pv = {n: k for k, n in enumerate(pv_nodes)}
        off = len(pv_nodes)
        self.p = {e: off + k for k, e in enumerate(net.edges)}
        off += len(net.edges)
        self.q = {e: off + k for k, e in enumerate(net.edges)}
        off += len(net.edges)
        self.u = {b: off + k for k, b in enumerate(net.bus_ids)}
        self.dim = off + net.n_bus


def build_centralized_qp(net: RadialNetwork, specs: list[InverterSpec],
                         model: UncertaintyModel | None = None) -> tuple[QuadProgram, _Layout, list[str]]:
    """Assemble the QP and the labels of its general inequality rows."""
    pv_nodes = [s.node for s in specs]
    if len(set(pv_nodes)) != len(pv_nodes):
        raise ValueError("more than one inverter per bus")
    for n in pv_nodes:
        if not net.has_bus(n):
            raise ValueError(f"inverter at unknown bus {n}")
        if n == net.root:
            raise ValueError("inverter at the root bus is not supported")
    lay = _Layout(net, pv_nodes)
    spec_at = {s.node: s for s in specs}
    n = lay.dim

    hess = np.zeros((n, n))
    for br in net.branches:
        w = 2.0 * br.r / net.bus(br.from_bus).v_nom ** 2
        hess[lay.p[br.edge], lay.p[br.edge]] = w
        hess[lay.q[br.edge], lay.q[br.edge]] = w

    eq_rows, eq_rhs = [], []
    for br in net.branches:
        i, j = br.edge
        bus_j = net.bus(j)
        pv_p = active_injection(spec_at[j], model) if j in spec_at else 0.0
        # p_ij - sum_k p_jk = P_j - p_j
        row = np.zeros(n)
        row[lay.p[br.edge]] = 1.0
        for k in net.children[j]:
            row[lay.p[(j, k)]] = -1.0
        eq_rows.append(row)
        eq_rhs.append(bus_j.load_p - pv_p)
        # q_ij - sum_k q_jk + q_j = Q_j
        row = np.zeros(n)
        row[lay.q[br.edge]] = 1.0
        for k in net.children[j]:
            row[lay.q[(j, k)]] = -1.0
        if j in lay.pv:
            row[lay.pv[j]] = 1.0
        eq_rows.append(row)
        eq_rhs.append(bus_j.load_q)
        # u_j - u_i + 2 (R p_ij + X q_ij) = 0
        row = np.zeros(n)
        row[lay.u[j]] = 1.0
        row[lay.u[i]] = -1.0
        row[lay.p[br.edge]] = 2.0 * br.r
        row[lay.q[br.edge]] = 2.0 * br.x
        eq_rows.append(row)
        eq_rhs.append(0.0)
    row = np.zeros(n)
    row[lay.u[net.root]] = 1.0
    eq_rows.append(row)
    eq_rhs.append(net.bus(net.root).v_nom ** 2)

    in_rows, in_rhs, labels = [], [], []
    for s in specs:
        r = reactive_range(s, model)
        for sign, tag in ((1.0, "upper"), (-1.0, "lower")):
            row = np.zeros(n)
            row[lay.pv[s.node]] = sign
            in_rows.append(row)
            in_rhs.append(r)
            labels.append(f"inverter {s.node} {tag}")

    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    for b in net.buses:
        if b.id == net.root:
            continue
        lo[lay.u[b.id]] = b.v_min ** 2
        hi[lay.u[b.id]] = b.v_max ** 2

    prog = QuadProgram(hess, np.zeros(n), np.array(in_rows) if in_rows else None,
                       np.array(in_rhs) if in_rhs else None, np.array(eq_rows), np.array(eq_rhs), lo, hi)
    return prog, lay, labels


def solve_centralized(net: RadialNetwork, specs: list[InverterSpec],
                      model: UncertaintyModel | None = None) -> OpfSolution:
    prog, lay, labels = build_centralized_qp(net, specs, model)
    sol = solve_qp(prog)
    pv_p = {s.node: active_injection(s, model) for s in specs}
    if not sol.ok:
        violated = [labels[i] for i in sol.violated_rows if i < len(labels)]
        return OpfSolution(None, InjectionSet(pv_p, {}), math.nan, sol.status, sol, violated)
    pv_q = {s.node: float(sol.x[lay.pv[s.node]]) for s in specs}
    inj = InjectionSet(pv_p, pv_q)
    state = solve_lindistflow(net, inj)
    return OpfSolution(state, inj, total_losses(net, state), "optimal", sol)


def reference_setpoints(sol: OpfSolution, net: RadialNetwork, specs: list[InverterSpec]) -> list[InverterSpec]:
    """Copy of ``specs`` with p/q references and child-flow references taken from an OPF optimum."""
    if not sol.ok or sol.state is None:
        raise OpfStateError(f"reference set points need an optimal OPF solution, got {sol.status!r}")
    out = []
    for s in specs:
        flows = {e: (sol.state.flow_p[e], sol.state.flow_q[e]) for e in net.child_edges(s.node)}
        out.append(replace(s, p_ref=sol.injections.p(s.node), q_ref=sol.injections.q(s.node), flow_refs=flows))
    return out


def solution_csv(net: RadialNetwork, sol: OpfSolution) -> str:
    """Long-format dump: one row per bus voltage, edge flow and inverter set point, then totals."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "id", "value_pu", "value_phys"])
    base = net.base_mva
    if sol.state is not None:
        for b in net.bus_ids:
            w.writerow(["u", b, repr(sol.state.u[b]), repr(math.sqrt(sol.state.u[b]))])
        for e in net.edges:
            w.writerow(["p_flow", f"{e[0]}-{e[1]}", repr(sol.state.flow_p[e]), repr(sol.state.flow_p[e] * base)])
            w.writerow(["q_flow", f"{e[0]}-{e[1]}", repr(sol.state.flow_q[e]), repr(sol.state.flow_q[e] * base)])
    for node in sol.injections.nodes:
        w.writerow(["pv_p", node, repr(sol.injections.p(node)), repr(sol.injections.p(node) * base)])
        w.writerow(["pv_q", node, repr(sol.injections.q(node)), repr(sol.injections.q(node) * base)])
    w.writerow(["losses", "total", repr(sol.losses), repr(sol.losses * base)])
    w.writerow(["status", sol.status, "", ""])
    return buf.getvalue()
