"""Local inverter control policies and the closed-loop measurement/actuation simulator.

Every policy maps one inverter's local measurement to its injection set point
(p.u.). The flow-based policies respond to measured flows on the edges leaving
the inverter's bus relative to reference flows.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Mapping

from .distflow import InjectionSet, PowerFlowState, solve_lindistflow, total_losses
from .netmodel import RadialNetwork

Edge = tuple[int, int]


class CapabilityError(ValueError):
    pass


class PolicyConfigError(ValueError):
    pass


class NonConvergenceError(RuntimeError):
    def __init__(self, message: str, trace: list[dict[int, tuple[float, float]]]):
        super().__init__(message)
        self.trace = trace


class PolicyKind(str, enum.Enum):
    NONE = "none"
    CONSTANT_PF = "constant_pf"
    VOLTAGE = "voltage"
    LOSS_MIN = "loss_min"
    HYBRID = "hybrid"
    FLOW_REACTIVE = "flow_reactive"
    FLOW_ACTIVE_REACTIVE = "flow_active_reactive"


@dataclass(frozen=True)
class InverterSpec:
    node: int
    s_rated: float
    p_ref: float
    q_ref: float = 0.0
    flow_refs: Mapping[Edge, tuple[float, float]] = field(default_factory=dict)
    droop_p: float = 0.0
    droop_q: float = 0.0
    pf: float = 1.0
    p_headroom: float = 0.0

    def __post_init__(self):
        if self.s_rated < 0:
            raise PolicyConfigError(f"inverter {self.node}: negative rating")
        if not 0.0 <= self.p_ref <= self.s_rated + 1e-12:
            raise PolicyConfigError(f"inverter {self.node}: p_ref outside [0, s_rated]")
        if self.droop_p < 0 or self.droop_q < 0:
            raise PolicyConfigError(f"inverter {self.node}: droops must be nonnegative")
        if not 0.0 < self.pf <= 1.0:
            raise PolicyConfigError(f"inverter {self.node}: power factor must lie in (0, 1]")
        if self.p_headroom < 0:
            raise PolicyConfigError(f"inverter {self.node}: negative headroom")
        for e in self.flow_refs:
            if e[0] != self.node:
                raise PolicyConfigError(f"inverter {self.node}: flow reference on edge {e} not leaving its bus")

    def with_droop(self, k: float) -> "InverterSpec":
        return replace(self, droop_p=k, droop_q=k)


@dataclass(frozen=True)
class PolicyParams:
    kind: PolicyKind = PolicyKind.FLOW_REACTIVE
    delta: float = 0.05
    k_v: float = 0.5
    k_l: float = 0.5
    # "prose": droop acts when measured flow exceeds its reference;
    # "literal": droop acts when reference - measured >= 0 as the equation is typeset
    gate: str = "prose"

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if self.kind in (PolicyKind.VOLTAGE, PolicyKind.HYBRID) and not self.delta > 0:
            raise PolicyConfigError("sigmoid width delta must be positive")
        if self.k_v < 0 or self.k_l < 0:
            raise PolicyConfigError("hybrid weights must be nonnegative")
        if self.gate not in ("prose", "literal"):
            raise PolicyConfigError(f"unknown gate {self.gate!r}")


@dataclass(frozen=True)
class LocalMeasurement:
    v: float
    load_p: float = 0.0
    load_q: float = 0.0
    child_flows: Mapping[Edge, tuple[float, float]] = field(default_factory=dict)
    v_nom: float = 1.0

    def __post_init__(self):
        if not self.v > 0:
            raise ValueError("measured voltage must be positive")


def capability_q(spec: InverterSpec, p_actual: float) -> float:
    """Largest |q| the inverter can deliver while producing ``p_actual``."""
    if p_actual < 0 or p_actual > spec.s_rated + 1e-12:
        raise CapabilityError(f"inverter {spec.node}: p={p_actual} outside [0, {spec.s_rated}]")
    return math.sqrt(max(spec.s_rated ** 2 - p_actual ** 2, 0.0))


def _clip(q: float, cap: float) -> float:
    return min(max(q, -cap), cap)


def sigmoid(v: float, v_nom: float, delta: float) -> float:
    """Smooth sign surrogate: +1 for deep undervoltage, -1 for overvoltage."""
    return math.tanh((v_nom - v) / delta)


def policy_constant_pf(spec: InverterSpec, meas: LocalMeasurement) -> float:
    net_p = spec.p_ref - meas.load_p
    q = (net_p ** 2 + meas.load_q ** 2) / spec.pf ** 2 - net_p ** 2
    return _clip(q, capability_q(spec, spec.p_ref))


def policy_voltage(spec: InverterSpec, meas: LocalMeasurement, params: PolicyParams) -> float:
    cap = capability_q(spec, spec.p_ref)
    q = min(meas.load_q, cap * sigmoid(meas.v, meas.v_nom, params.delta))
    return _clip(q, cap)


def policy_loss_min(spec: InverterSpec, meas: LocalMeasurement) -> float:
    cap = capability_q(spec, spec.p_ref)
    if abs(meas.load_q) <= cap:
        return meas.load_q
    return math.copysign(cap, meas.load_q)


def policy_hybrid(spec: InverterSpec, meas: LocalMeasurement, params: PolicyParams) -> float:
    cap = capability_q(spec, spec.p_ref)
    q = params.k_l * policy_loss_min(spec, meas) + params.k_v * policy_voltage(spec, meas, params)
    return _clip(q, cap)


def _flow_excess(spec: InverterSpec, meas: LocalMeasurement, which: int) -> float:
    total = 0.0
    for e, flows in meas.child_flows.items():
        if e not in spec.flow_refs:
            raise PolicyConfigError(f"inverter {spec.node}: no reference for measured edge {e}")
        total += flows[which] - spec.flow_refs[e][which]
    return total


def _droop(ref: float, k: float, excess: float, gate: str) -> float:
    active = excess >= 0 if gate == "prose" else excess <= 0
    return ref + k * excess if active else ref


def flow_reactive_raw(spec: InverterSpec, meas: LocalMeasurement, gate: str = "prose") -> float:
    """Reactive droop on child-flow excess before any rating limit."""
    return _droop(spec.q_ref, spec.droop_q, _flow_excess(spec, meas, 1), gate)


def policy_flow_reactive(spec: InverterSpec, meas: LocalMeasurement, gate: str = "prose") -> float:
    return _clip(flow_reactive_raw(spec, meas, gate), capability_q(spec, spec.p_ref))


def project_joint(spec: InverterSpec, p: float, q: float) -> tuple[float, float]:
    """Pull (p, q) into the rating disc: shrink |q| toward 0 first, then p toward p_ref."""
    s2 = spec.s_rated ** 2
    if p * p + q * q <= s2:
        return p, q
    if p * p <= s2:
        return p, math.copysign(math.sqrt(s2 - p * p), q)
    # even q = 0 is infeasible: lower p onto the rating (p_ref <= s_rated)
    return spec.s_rated, 0.0


def policy_flow_active_reactive(spec: InverterSpec, meas: LocalMeasurement,
                                gate: str = "prose") -> tuple[float, float]:
    q = flow_reactive_raw(spec, meas, gate)
    p = _droop(spec.p_ref, spec.droop_p, _flow_excess(spec, meas, 0), gate)
    p = min(max(p, 0.0), spec.p_ref + spec.p_headroom)
    return project_joint(spec, p, q)


def evaluate_policy(spec: InverterSpec, meas: LocalMeasurement, params: PolicyParams) -> tuple[float, float]:
    """Dispatch to the configured policy; returns (p, q)."""
    kind = params.kind
    if kind is PolicyKind.NONE:
        return spec.p_ref, 0.0
    if kind is PolicyKind.CONSTANT_PF:
        return spec.p_ref, policy_constant_pf(spec, meas)
    if kind is PolicyKind.VOLTAGE:
        return spec.p_ref, policy_voltage(spec, meas, params)
    if kind is PolicyKind.LOSS_MIN:
        return spec.p_ref, policy_loss_min(spec, meas)
    if kind is PolicyKind.HYBRID:
        return spec.p_ref, policy_hybrid(spec, meas, params)
    if kind is PolicyKind.FLOW_REACTIVE:
        return spec.p_ref, policy_flow_reactive(spec, meas, params.gate)
    return policy_flow_active_reactive(spec, meas, params.gate)


# ---------------------------------------------------------------------------
# closed loop

def measure(net: RadialNetwork, state: PowerFlowState, node: int) -> LocalMeasurement:
    b = net.bus(node)
    flows = {e: (state.flow_p[e], state.flow_q[e]) for e in net.child_edges(node)}
    return LocalMeasurement(math.sqrt(max(state.u[node], 0.0)), b.load_p, b.load_q, flows, b.v_nom)


@dataclass
class ClosedLoopResult:
    state: PowerFlowState
    injections: InjectionSet
    iterations: int
    losses: float
    trace: list[dict[int, tuple[float, float]]]


def closed_loop_simulate(net: RadialNetwork, specs: list[InverterSpec], params: PolicyParams,
                         perturbation: Mapping[int, float] | None = None, tol: float = 1e-8,
                         max_iter: int = 1000) -> ClosedLoopResult:
    """Iterate measure -> policy -> power flow with synchronous inverter updates.

    ``perturbation`` maps bus id to a load multiplier (Case I: ``{5: 1.5}``).
    Inverters start from their reference set points.
    """
    for s in specs:
        if not net.has_bus(s.node):
            raise PolicyConfigError(f"inverter at unknown bus {s.node}")
    for node, factor in (perturbation or {}).items():
        net = net.scale_load(node, factor)
    current = {s.node: (s.p_ref, s.q_ref) for s in specs}
    trace = [dict(current)]
    for it in range(1, max_iter + 1):
        inj = InjectionSet({n: pq[0] for n, pq in current.items()}, {n: pq[1] for n, pq in current.items()})
        state = solve_lindistflow(net, inj)
        new = {s.node: evaluate_policy(s, measure(net, state, s.node), params) for s in specs}
        change = max((max(abs(new[n][0] - current[n][0]), abs(new[n][1] - current[n][1])) for n in new),
                     default=0.0)
        current = new
        trace.append(dict(current))
        if change < tol:
            inj = InjectionSet({n: pq[0] for n, pq in current.items()},
                               {n: pq[1] for n, pq in current.items()})
            state = solve_lindistflow(net, inj)
            return ClosedLoopResult(state, inj, it, total_losses(net, state), trace)
    raise NonConvergenceError(f"closed loop did not settle within {max_iter} iterations", trace[-10:])


def find_breakpoint(ks: list[float], losses: list[float], tol: float = 1e-10) -> float:
    """Smallest droop after which every loss value equals the final one within ``tol``."""
    if not ks:
        raise ValueError("empty droop grid")
    last = losses[-1]
    bp = ks[-1]
    for k, loss in zip(reversed(ks), reversed(losses)):
        if abs(loss - last) > tol:
            break
        bp = k
    return bp


CASE_PERTURBATIONS = {"I": {5: 1.5}, "II": {33: 1.5}, "none": {}}


@dataclass(frozen=True)
class SweepPoint:
    k: float
    losses: float
    injections: dict[int, tuple[float, float]]
    status: str = "ok"


def droop_sweep(net: RadialNetwork, specs: list[InverterSpec], params: PolicyParams, ks: list[float],
                perturbation: Mapping[int, float] | None = None) -> list[SweepPoint]:
    """Closed-loop losses for each droop K (K^p = K^q = K); diverged points carry NaN losses."""
    out = []
    for k in ks:
        try:
            res = closed_loop_simulate(net, [s.with_droop(k) for s in specs], params, perturbation)
        except NonConvergenceError:
            out.append(SweepPoint(k, math.nan, {}, "diverged"))
            continue
        inj = {n: (res.injections.p(n), res.injections.q(n)) for n in res.injections.nodes}
        out.append(SweepPoint(k, res.losses, inj))
    return out


def sweep_breakpoint(points: list[SweepPoint], tol: float = 1e-10) -> float:
    """Droop after which the closed-loop injections stop changing."""
    ok = [pt for pt in points if pt.status == "ok"]
    if not ok:
        raise ValueError("no converged sweep points")
    last = ok[-1].injections
    bp = ok[-1].k
    for pt in reversed(ok):
        if any(abs(a - b) > tol for n in last for a, b in zip(pt.injections[n], last[n])):
            break
        bp = pt.k
    return bp
