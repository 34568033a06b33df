"""LinDistFlow evaluation and loss accounting on radial feeders."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping

from .netmodel import RadialNetwork, subtree_order

Edge = tuple[int, int]


@dataclass(frozen=True)
class InjectionSet:
    """Active/reactive PV injections (p.u.) keyed by bus id."""

    pv_p: Mapping[int, float] = field(default_factory=dict)
    pv_q: Mapping[int, float] = field(default_factory=dict)

    def p(self, bus: int) -> float:
        return self.pv_p.get(bus, 0.0)

    def q(self, bus: int) -> float:
        return self.pv_q.get(bus, 0.0)

    @property
    def nodes(self) -> list[int]:
        return sorted(set(self.pv_p) | set(self.pv_q))

    def total_q(self) -> float:
        return math.fsum(self.pv_q.values())


@dataclass(frozen=True)
class PowerFlowState:
    flow_p: dict[Edge, float]
    flow_q: dict[Edge, float]
    u: dict[int, float]

    def v(self, bus: int) -> float:
        return math.sqrt(self.u[bus])


def _check_injections(net: RadialNetwork, inj: InjectionSet) -> None:
    for node in inj.nodes:
        if not net.has_bus(node):
            raise ValueError(f"injection at unknown bus {node}")
    for val in list(inj.pv_p.values()) + list(inj.pv_q.values()):
        if not math.isfinite(val):
            raise ValueError("non-finite injection")


def solve_lindistflow(net: RadialNetwork, inj: InjectionSet | None = None) -> PowerFlowState:
    """Backward sweep for branch flows, forward sweep for squared voltages."""
    inj = inj or InjectionSet()
    _check_injections(net, inj)
    order = subtree_order(net)
    # net downstream demand seen at each bus, accumulated leaves-first
    acc_p = {}
    acc_q = {}
    for j in reversed(order):
        b = net.bus(j)
        p = b.load_p - inj.p(j)
        q = b.load_q - inj.q(j)
        for k in net.children[j]:
            p += acc_p[k]
            q += acc_q[k]
        acc_p[j], acc_q[j] = p, q

    flow_p: dict[Edge, float] = {}
    flow_q: dict[Edge, float] = {}
    u = {net.root: net.bus(net.root).v_nom ** 2}
    for j in order[1:]:
        br = net.parent_branch(j)
        e = br.edge
        flow_p[e], flow_q[e] = acc_p[j], acc_q[j]
        u[j] = u[br.from_bus] - 2.0 * (br.r * acc_p[j] + br.x * acc_q[j])
    # keep dict order aligned with the network's branch / bus order
    flow_p = {e: flow_p[e] for e in net.edges}
    flow_q = {e: flow_q[e] for e in net.edges}
    u = {i: u[i] for i in net.bus_ids}
    return PowerFlowState(flow_p, flow_q, u)


def edge_losses(net: RadialNetwork, state: PowerFlowState) -> dict[Edge, float]:
    """Per-edge R (p^2 + q^2) / V_i^2 with V_i the sending-end nominal voltage."""
    out = {}
    for br in net.branches:
        e = br.edge
        v_nom = net.bus(br.from_bus).v_nom
        out[e] = br.r * (state.flow_p[e] ** 2 + state.flow_q[e] ** 2) / v_nom ** 2
    return out


def total_losses(net: RadialNetwork, state: PowerFlowState) -> float:
    return math.fsum(edge_losses(net, state).values())


def branch_voltage_profile(net: RadialNetwork, state: PowerFlowState, leaf: int) -> list[tuple[int, float]]:
    if not net.has_bus(leaf):
        raise ValueError(f"unknown bus {leaf}")
    return [(i, math.sqrt(state.u[i])) for i in net.path_to(leaf)]


def residuals(net: RadialNetwork, inj: InjectionSet, state: PowerFlowState) -> dict[str, float]:
    """Max absolute residual of the active flow, reactive flow and voltage equations."""
    rp = rq = ru = 0.0
    for br in net.branches:
        i, j = br.edge
        b = net.bus(j)
        down_p = sum(state.flow_p[(j, k)] for k in net.children[j])
        down_q = sum(state.flow_q[(j, k)] for k in net.children[j])
        rp = max(rp, abs(state.flow_p[br.edge] - (b.load_p - inj.p(j) + down_p)))
        rq = max(rq, abs(state.flow_q[br.edge] - (b.load_q - inj.q(j) + down_q)))
        ru = max(ru, abs(state.u[j] - (state.u[i] - 2.0 * (br.r * state.flow_p[br.edge]
                                                           + br.x * state.flow_q[br.edge]))))
    root_err = abs(state.u[net.root] - net.bus(net.root).v_nom ** 2)
    return {"flow_p": rp, "flow_q": rq, "voltage": max(ru, root_err)}


def bus_table_csv(net: RadialNetwork, state: PowerFlowState) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bus", "v_pu", "u_pu2"])
    for i in net.bus_ids:
        w.writerow([i, repr(math.sqrt(state.u[i])), repr(state.u[i])])
    return buf.getvalue()


def edge_table_csv(net: RadialNetwork, state: PowerFlowState) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["from_bus", "to_bus", "p_pu", "q_pu", "p_mw", "q_mvar", "loss_pu"])
    losses = edge_losses(net, state)
    for e in net.edges:
        p, q = state.flow_p[e], state.flow_q[e]
        w.writerow([e[0], e[1], repr(p), repr(q), repr(p * net.base_mva), repr(q * net.base_mva),
                    repr(losses[e])])
    return buf.getvalue()
