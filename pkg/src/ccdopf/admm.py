"""Consensus ADMM with one agent per bus and neighbor-only messaging.

Each agent ``i`` keeps local copies of the quantities it shares with its
neighbours:

* ``q_plus[j]`` - reactive flow on each child edge (i, j)
* ``q_minus``   - reactive flow on its parent edge (a, i)
* ``u_plus``    - its own squared voltage
* ``u_minus``   - its parent's squared voltage

A global edge flow is the mean of the parent's ``q_plus`` copy and the
child's ``q_minus`` copy; a global voltage is the mean of the owner's
``u_plus`` and every child's ``u_minus``. Active flows are frozen at the
forecast LinDistFlow state.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .distflow import InjectionSet, solve_lindistflow, total_losses
from .netmodel import RadialNetwork
from .opf import OpfSolution, active_injection, reactive_range
from .policies import InverterSpec
from .qpcore import ActiveSetSolver, QuadProgram
from .uncertainty import UncertaintyModel

Edge = tuple[int, int]


class ProtocolViolation(RuntimeError):
    pass


class RoundStall(RuntimeError):
    def __init__(self, missing: list[tuple[int, int, str]]):
        self.missing = missing
        super().__init__(f"round stalled, missing messages {missing}")


class AgentFault(RuntimeError):
    def __init__(self, node: int, status: str, rows: tuple[int, ...] = ()):
        self.node = node
        self.rows = rows
        super().__init__(f"agent {node}: local problem {status} (rows {list(rows)})")


@dataclass(frozen=True)
class AdmmConfig:
    rho: float | None = None  # None -> 1 / V_root^2
    max_iters: int = 500
    tol_primal: float = 1e-4
    tol_dual: float = 1e-4
    epsilon: float | None = None  # overrides the model's epsilon when set
    policy_rows: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.rho is not None and not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not (self.tol_primal > 0 and self.tol_dual > 0):
            raise ValueError("tolerances must be positive")


@dataclass(frozen=True)
class Message:
    round: int
    src: int
    dst: int
    kind: str
    payload: float


class MessageBus:
    """In-memory per-edge channels with barrier delivery and a full audit log.

    ``send`` refuses anything not addressed to a graph neighbour; refused
    attempts are still counted so an audit can report them.
    """

    def __init__(self, net: RadialNetwork):
        self._nbrs = {b: set(net.children[b]) for b in net.bus_ids}
        for j, a in net.parent.items():
            self._nbrs[j].add(a)
        self._pending: list[Message] = []
        self.log: list[Message] = []
        self.rejected: list[Message] = []

    def neighbours(self, node: int) -> set[int]:
        return self._nbrs[node]

    def send(self, rnd: int, src: int, dst: int, kind: str, payload: float) -> None:
        msg = Message(rnd, src, dst, kind, float(payload))
        if dst not in self._nbrs.get(src, ()):
            self.rejected.append(msg)
            raise ProtocolViolation(f"message {kind} from {src} to non-neighbour {dst}")
        self._pending.append(msg)

    def deliver(self, expected: list[tuple[int, int, str]] | None = None) -> dict[int, dict[tuple[int, str], float]]:
        """Barrier: hand every pending message to its recipient; ``expected`` lists (src, dst, kind)."""
        inbox: dict[int, dict[tuple[int, str], float]] = {b: {} for b in self._nbrs}
        for m in self._pending:
            if (m.src, m.kind) in inbox[m.dst]:
                raise ProtocolViolation(f"duplicate {m.kind} from {m.src} to {m.dst}")
            inbox[m.dst][(m.src, m.kind)] = m.payload
        if expected is not None:
            missing = [x for x in expected if (x[0], x[2]) not in inbox[x[1]]]
            if missing:
                self._pending.clear()
                raise RoundStall(missing)
        self.log.extend(self._pending)
        self._pending.clear()
        return inbox

    def non_neighbour_count(self) -> int:
        bad = sum(1 for m in self.log if m.dst not in self._nbrs[m.src])
        return bad + len(self.rejected)

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "from", "to", "kind"])
        for m in self.log:
            w.writerow([m.round, m.src, m.dst, m.kind])
        return buf.getvalue()


@dataclass
class AdmmNodeState:
    node: int
    parent: int | None
    children: tuple[int, ...]
    q_plus: dict[int, float]
    q_minus: float = 0.0
    u_plus: float = 1.0
    u_minus: float = 1.0
    lam_q_plus: dict[int, float] = field(default_factory=dict)
    lam_q_minus: float = 0.0
    lam_u_plus: float = 0.0
    lam_u_minus: float = 0.0
    inbox: dict[tuple[int, str], float] = field(default_factory=dict)
    # globals as last seen by this agent
    g_q_child: dict[int, float] = field(default_factory=dict)
    g_q_parent: float = 0.0
    g_u_self: float = 1.0
    g_u_parent: float = 1.0

    def local_vector(self) -> np.ndarray:
        vals = [self.q_plus[j] for j in self.children]
        if self.parent is not None:
            vals.append(self.q_minus)
        vals.append(self.u_plus)
        if self.parent is not None:
            vals.append(self.u_minus)
        return np.array(vals)

    def global_vector(self) -> np.ndarray:
        vals = [self.g_q_child[j] for j in self.children]
        if self.parent is not None:
            vals.append(self.g_q_parent)
        vals.append(self.g_u_self)
        if self.parent is not None:
            vals.append(self.g_u_parent)
        return np.array(vals)

    def dual_vector(self) -> np.ndarray:
        vals = [self.lam_q_plus[j] for j in self.children]
        if self.parent is not None:
            vals.append(self.lam_q_minus)
        vals.append(self.lam_u_plus)
        if self.parent is not None:
            vals.append(self.lam_u_minus)
        return np.array(vals)

    def set_local(self, x: np.ndarray) -> None:
        k = 0
        for j in self.children:
            self.q_plus[j] = float(x[k])
            k += 1
        if self.parent is not None:
            self.q_minus = float(x[k])
            k += 1
        self.u_plus = float(x[k])
        k += 1
        if self.parent is not None:
            self.u_minus = float(x[k])

    def set_duals(self, lam: np.ndarray) -> None:
        k = 0
        for j in self.children:
            self.lam_q_plus[j] = float(lam[k])
            k += 1
        if self.parent is not None:
            self.lam_q_minus = float(lam[k])
            k += 1
        self.lam_u_plus = float(lam[k])
        k += 1
        if self.parent is not None:
            self.lam_u_minus = float(lam[k])

    def net_injection(self, load_q: float) -> float:
        """Reactive injection implied by the local copies: sum q+ - q- + Q."""
        return math.fsum(self.q_plus.values()) - (self.q_minus if self.parent is not None else 0.0) + load_q


@dataclass
class ConsensusGlobals:
    q_edge: dict[Edge, float]
    u_node: dict[int, float]
    q_node: dict[int, float] = field(default_factory=dict)


@dataclass
class ConvergenceTrace:
    records: list[dict] = field(default_factory=list)

    def append(self, it: int, primal: float, dual: float, total_q: float, losses: float) -> None:
        if self.records and it <= self.records[-1]["iter"]:
            raise ValueError("trace iterations must increase")
        self.records.append({"iter": it, "primal_res": primal, "dual_res": dual,
                             "total_q": total_q, "losses": losses})

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self, base_mva: float = 1.0) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "primal_res", "dual_res", "total_q_pu", "total_q_mvar", "losses_pu", "losses_mw"])
        for r in self.records:
            w.writerow([r["iter"], repr(r["primal_res"]), repr(r["dual_res"]), repr(r["total_q"]),
                        repr(r["total_q"] * base_mva), repr(r["losses"]), repr(r["losses"] * base_mva)])
        return buf.getvalue()


@dataclass
class AdmmResult:
    solution: OpfSolution
    trace: ConvergenceTrace
    converged: bool
    iterations: int
    agents: dict[int, AdmmNodeState]
    globals: ConsensusGlobals
    bus: MessageBus
    rho: float


class LocalProblem:
    """One agent's constraint set; only the linear term changes between ADMM rounds."""

    def __init__(self, net: RadialNetwork, agent: AdmmNodeState, spec: InverterSpec | None,
                 model: UncertaintyModel | None, p_in: float, rho: float, policy_rows: bool = False):
        i = agent.node
        bus = net.bus(i)
        nc = len(agent.children)
        has_parent = agent.parent is not None
        n = nc + (2 if has_parent else 0) + 1
        iq_minus = nc if has_parent else None
        iu_plus = nc + (1 if has_parent else 0)
        iu_minus = iu_plus + 1 if has_parent else None
        self.dim = n
        self.rho = float(rho)

        h = np.full(n, float(rho))
        if has_parent:
            br = net.parent_branch(i)
            v_nom = net.bus(br.from_bus).v_nom
            self.loss_w = br.r / v_nom ** 2
            self.loss_const = self.loss_w * p_in ** 2
            h[iq_minus] += 2.0 * self.loss_w
        else:
            self.loss_w = 0.0
            self.loss_const = 0.0
        hess = np.diag(h)

        eq_a, eq_b, in_a, in_b = [], [], [], []
        balance = np.zeros(n)
        balance[:nc] = 1.0
        if has_parent:
            balance[iq_minus] = -1.0
        if has_parent:
            if spec is None:
                eq_a.append(balance)
                eq_b.append(-bus.load_q)
            else:
                r = reactive_range(spec, model)
                in_a += [balance, -balance]
                in_b += [r - bus.load_q, r + bus.load_q]
                if policy_rows:
                    # sum q+ - q- + Q = q_ref + K_q (sum q+ - sum q_ref_ij)
                    row = balance.copy()
                    row[:nc] -= spec.droop_q
                    rhs = spec.q_ref - bus.load_q - spec.droop_q * sum(
                        spec.flow_refs.get((i, j), (0.0, 0.0))[1] for j in agent.children)
                    eq_a.append(row)
                    eq_b.append(rhs)
            br = net.parent_branch(i)
            # u+ - u- + 2 X q- = -2 R p
            row = np.zeros(n)
            row[iu_plus] = 1.0
            row[iu_minus] = -1.0
            row[iq_minus] = 2.0 * br.x
            eq_a.append(row)
            eq_b.append(-2.0 * br.r * p_in)
        else:
            row = np.zeros(n)
            row[iu_plus] = 1.0
            eq_a.append(row)
            eq_b.append(bus.v_nom ** 2)

        lo = np.full(n, -np.inf)
        hi = np.full(n, np.inf)
        if has_parent:
            lo[iu_plus] = bus.v_min ** 2
            hi[iu_plus] = bus.v_max ** 2
        self.prog = QuadProgram(hess, np.zeros(n), np.array(in_a) if in_a else None,
                                np.array(in_b) if in_b else None, np.array(eq_a), np.array(eq_b), lo, hi)
        self.solver = ActiveSetSolver(self.prog)

    def linear_term(self, globals_vec: np.ndarray, duals: np.ndarray) -> np.ndarray:
        # rho/2 (x - g)^2 + lam (x - g)  ->  linear coefficient lam - rho g
        return duals - self.rho * globals_vec

    def solve(self, globals_vec: np.ndarray, duals: np.ndarray):
        return self.solver.solve(self.linear_term(globals_vec, duals))


def default_rho(net: RadialNetwork) -> float:
    return 1.0 / net.bus(net.root).v_nom ** 2


def _init_agents(net: RadialNetwork, specs: list[InverterSpec], model: UncertaintyModel | None):
    pv_p = {s.node: active_injection(s, model) for s in specs}
    forecast = solve_lindistflow(net, InjectionSet(pv_p, {}))
    agents = {}
    for b in net.bus_ids:
        parent = net.parent.get(b)
        kids = tuple(net.children[b])
        a = AdmmNodeState(b, parent, kids, {j: forecast.flow_q[(b, j)] for j in kids})
        a.lam_q_plus = {j: 0.0 for j in kids}
        if parent is not None:
            a.q_minus = forecast.flow_q[(parent, b)]
            a.u_minus = forecast.u[parent]
            a.g_q_parent = a.q_minus
            a.g_u_parent = a.u_minus
        a.u_plus = forecast.u[b]
        a.g_u_self = a.u_plus
        a.g_q_child = dict(a.q_plus)
        agents[b] = a
    return agents, forecast


def local_minimize(agent: AdmmNodeState, problem: LocalProblem) -> AdmmNodeState:
    """Minimize the agent's augmented Lagrangian against its current view of the globals."""
    sol = problem.solve(agent.global_vector(), agent.dual_vector())
    if not sol.ok:
        raise AgentFault(agent.node, sol.status, sol.violated_rows)
    agent.set_local(sol.x)
    return agent


def publish_locals(agents: Mapping[int, AdmmNodeState], bus: MessageBus, rnd: int) -> list[tuple[int, int, str]]:
    """Each agent sends its copies of shared quantities to the neighbour that shares them."""
    expected = []
    for i in sorted(agents):
        a = agents[i]
        for j in a.children:
            bus.send(rnd, i, j, "q_plus", a.q_plus[j])
            expected.append((i, j, "q_plus"))
        if a.parent is not None:
            bus.send(rnd, i, a.parent, "q_minus", a.q_minus)
            bus.send(rnd, i, a.parent, "u_minus", a.u_minus)
            expected += [(i, a.parent, "q_minus"), (i, a.parent, "u_minus")]
    return expected


def exchange_and_average(agents: Mapping[int, AdmmNodeState], bus: MessageBus, rnd: int,
                         net: RadialNetwork) -> ConsensusGlobals:
    """Two barrier phases: copies to neighbours, then each owner broadcasts its averaged voltage."""
    inbox = bus.deliver(publish_locals(agents, bus, rnd))
    q_edge: dict[Edge, float] = {}
    u_node: dict[int, float] = {}
    for i in sorted(agents):
        a = agents[i]
        box = inbox[i]
        a.inbox = box
        for j in a.children:
            q_edge[(i, j)] = 0.5 * (a.q_plus[j] + box[(j, "q_minus")])
            a.g_q_child[j] = q_edge[(i, j)]
        if a.parent is not None:
            a.g_q_parent = 0.5 * (box[(a.parent, "q_plus")] + a.q_minus)
        if i == net.root:
            u = net.bus(i).v_nom ** 2
        else:
            copies = [a.u_plus] + [box[(j, "u_minus")] for j in a.children]
            u = math.fsum(copies) / len(copies)
        u_node[i] = u
        a.g_u_self = u
    expected = []
    for i in sorted(agents):
        for j in agents[i].children:
            bus.send(rnd, i, j, "u_global", u_node[i])
            expected.append((i, j, "u_global"))
    inbox = bus.deliver(expected)
    for i in sorted(agents):
        a = agents[i]
        if a.parent is not None:
            a.g_u_parent = inbox[i][(a.parent, "u_global")]
            a.inbox.update(inbox[i])
    q_node = {}
    for i in sorted(agents):
        a = agents[i]
        inflow = q_edge[(a.parent, i)] if a.parent is not None else 0.0
        q_node[i] = math.fsum(q_edge[(i, j)] for j in a.children) - inflow + net.bus(i).load_q
    return ConsensusGlobals(dict(sorted(q_edge.items())), u_node, q_node)


def dual_update(agent: AdmmNodeState, rho: float) -> AdmmNodeState:
    lam = agent.dual_vector() + rho * (agent.local_vector() - agent.global_vector())
    agent.set_duals(lam)
    return agent


def recover_injections(agents: Mapping[int, AdmmNodeState], net: RadialNetwork,
                       specs: list[InverterSpec], model: UncertaintyModel | None = None) -> InjectionSet:
    pv_p = {s.node: active_injection(s, model) for s in specs}
    pv_q = {s.node: agents[s.node].net_injection(net.bus(s.node).load_q) for s in specs}
    return InjectionSet(pv_p, pv_q)


def _losses_from_globals(net: RadialNetwork, flow_p: Mapping[Edge, float], g: ConsensusGlobals) -> float:
    return math.fsum(br.r * (flow_p[br.edge] ** 2 + g.q_edge[br.edge] ** 2) / net.bus(br.from_bus).v_nom ** 2
                     for br in net.branches)


def run_admm(net: RadialNetwork, specs: list[InverterSpec], model: UncertaintyModel | None = None,
             cfg: AdmmConfig | None = None) -> AdmmResult:
    cfg = cfg or AdmmConfig()
    if cfg.epsilon is not None and model is not None:
        model = model.with_epsilon(cfg.epsilon)
    rho = cfg.rho if cfg.rho is not None else default_rho(net)
    spec_at = {s.node: s for s in specs}
    if len(spec_at) != len(specs):
        raise ValueError("more than one inverter per bus")
    for s in specs:
        if not net.has_bus(s.node):
            raise ValueError(f"inverter at unknown bus {s.node}")
        if s.node == net.root:
            raise ValueError("inverter at the root bus is not supported")

    agents, forecast = _init_agents(net, specs, model)
    problems = {}
    for b, a in agents.items():
        p_in = forecast.flow_p[(a.parent, b)] if a.parent is not None else 0.0
        problems[b] = LocalProblem(net, a, spec_at.get(b), model, p_in, rho, cfg.policy_rows)

    bus = MessageBus(net)
    trace = ConvergenceTrace()
    order = sorted(agents)
    prev = None
    converged = False
    it = 0
    g = ConsensusGlobals({e: forecast.flow_q[e] for e in net.edges}, dict(forecast.u))
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for it in range(1, cfg.max_iters + 1):
            if pool is not None:
                list(pool.map(lambda b: local_minimize(agents[b], problems[b]), order))
            else:
                for b in order:
                    local_minimize(agents[b], problems[b])
            g = exchange_and_average(agents, bus, it, net)
            primal = max(float(np.max(np.abs(agents[b].local_vector() - agents[b].global_vector())))
                         for b in order)
            cur = np.array(list(g.q_edge.values()) + [g.u_node[b] for b in order])
            dual = rho * float(np.max(np.abs(cur - prev))) if prev is not None else math.inf
            prev = cur
            for b in order:
                dual_update(agents[b], rho)
            total_q = math.fsum(agents[s.node].net_injection(net.bus(s.node).load_q) for s in specs)
            trace.append(it, primal, dual, total_q, _losses_from_globals(net, forecast.flow_p, g))
            if primal < cfg.tol_primal and dual < cfg.tol_dual:
                converged = True
                break
    finally:
        if pool is not None:
            pool.shutdown()

    inj = recover_injections(agents, net, specs, model)
    state = solve_lindistflow(net, inj)
    status = "optimal" if converged else "not-converged"
    sol = OpfSolution(state, inj, total_losses(net, state), status)
    return AdmmResult(sol, trace, converged, it, agents, g, bus, rho)


def injection_compare_csv(net: RadialNetwork, admm: OpfSolution, central: OpfSolution) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["node", "q_pu", "q_mvar", "centralized_q_pu", "centralized_q_mvar"])
    for n in admm.injections.nodes:
        q, qc = admm.injections.q(n), central.injections.q(n)
        w.writerow([n, repr(q), repr(q * net.base_mva), repr(qc), repr(qc * net.base_mva)])
    return buf.getvalue()
