"""Radial feeder data model and Matpower case ingestion.

All quantities stored on a :class:`RadialNetwork` are per-unit on the case
base (``base_mva``, ``base_kv``). Loads are converted at parse time.
"""
from __future__ import annotations

import logging
import re
from collections import deque
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Iterable, Mapping

log = logging.getLogger(__name__)

DEFAULT_V_MIN = 0.9
DEFAULT_V_MAX = 1.1

# Matpower column positions (0-based)
_BUS_I, _BUS_TYPE, _PD, _QD, _VM, _BASE_KV, _VMAX, _VMIN = 0, 1, 2, 3, 7, 9, 11, 12
_F_BUS, _T_BUS, _BR_R, _BR_X, _TAP, _BR_STATUS = 0, 1, 2, 3, 8, 10
_REF_TYPE = 3


class CaseFormatError(ValueError):
    """Malformed case text. ``lineno`` is 1-based, or None if not line specific."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class ValidationError(ValueError):
    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class Bus:
    id: int
    load_p: float = 0.0
    load_q: float = 0.0
    v_min: float = DEFAULT_V_MIN
    v_max: float = DEFAULT_V_MAX
    v_nom: float = 1.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    in_service: bool = True

    @property
    def edge(self) -> tuple[int, int]:
        return (self.from_bus, self.to_bus)


@dataclass(frozen=True)
class RadialNetwork:
    """Immutable rooted tree feeder.

    Construction does not validate; call :func:`validate_radial` (``parse_case``
    does). ``children`` and ``parent`` are derived from branch orientation.
    """

    root: int
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    base_mva: float = 1.0
    base_kv: float = 1.0
    children: Mapping[int, tuple[int, ...]] = field(init=False, repr=False, compare=False)
    parent: Mapping[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        kids: dict[int, list[int]] = {b.id: [] for b in self.buses}
        parent: dict[int, int] = {}
        for br in self.branches:
            kids.setdefault(br.from_bus, []).append(br.to_bus)
            parent.setdefault(br.to_bus, br.from_bus)
        children = {k: tuple(sorted(v)) for k, v in kids.items()}
        object.__setattr__(self, "children", MappingProxyType(children))
        object.__setattr__(self, "parent", MappingProxyType(parent))
        object.__setattr__(self, "_bus_by_id", {b.id: b for b in self.buses})
        object.__setattr__(self, "_branch_by_edge", {br.edge: br for br in self.branches})
        object.__setattr__(self, "_branch_to", {br.to_bus: br for br in self.branches})

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [br.edge for br in self.branches]

    def bus(self, bus_id: int) -> Bus:
        try:
            return self._bus_by_id[bus_id]
        except KeyError:
            raise KeyError(f"unknown bus {bus_id}") from None

    def has_bus(self, bus_id: int) -> bool:
        return bus_id in self._bus_by_id

    def branch(self, edge: tuple[int, int]) -> Branch:
        return self._branch_by_edge[edge]

    def parent_branch(self, bus_id: int) -> Branch | None:
        """Branch feeding ``bus_id`` (None at the root)."""
        return self._branch_to.get(bus_id)

    def child_edges(self, bus_id: int) -> list[tuple[int, int]]:
        return [(bus_id, j) for j in self.children.get(bus_id, ())]

    def path_to(self, bus_id: int) -> list[int]:
        """Bus ids from the root down to ``bus_id``."""
        self.bus(bus_id)
        path = [bus_id]
        while path[-1] != self.root:
            path.append(self.parent[path[-1]])
        return path[::-1]

    def leaves(self) -> list[int]:
        return [b for b in sorted(self._bus_by_id) if not self.children.get(b)]

    def with_loads(self, loads: Mapping[int, tuple[float, float]]) -> "RadialNetwork":
        """Copy with per-bus (P, Q) loads replaced for the given buses."""
        buses = []
        for b in self.buses:
            if b.id in loads:
                p, q = loads[b.id]
                b = replace(b, load_p=float(p), load_q=float(q))
            buses.append(b)
        return RadialNetwork(self.root, tuple(buses), self.branches, self.base_mva, self.base_kv)

    def scale_load(self, bus_id: int, factor: float) -> "RadialNetwork":
        b = self.bus(bus_id)
        return self.with_loads({bus_id: (b.load_p * factor, b.load_q * factor)})


def validate_radial(net: RadialNetwork) -> list[str]:
    """Return the list of violated network invariants (empty when valid)."""
    out: list[str] = []
    ids = [b.id for b in net.buses]
    if len(set(ids)) != len(ids):
        out.append("duplicate bus id")
    idset = set(ids)
    if ids and sorted(idset) != list(range(min(idset), min(idset) + len(idset))):
        out.append("bus ids not contiguous")
    if net.root not in idset:
        out.append(f"root bus {net.root} not in bus list")

    for b in net.buses:
        vals = (b.load_p, b.load_q, b.v_min, b.v_max, b.v_nom)
        if not all(v == v and abs(v) != float("inf") for v in vals):
            out.append(f"bus {b.id}: non-finite data")
            continue
        if b.v_min <= 0:
            out.append(f"bus {b.id}: v_min must be positive")
        if b.id == net.root:
            ok = b.v_min <= b.v_nom <= b.v_max
        else:
            ok = b.v_min < b.v_nom <= b.v_max
        if not ok:
            out.append(f"bus {b.id}: voltage band violates v_min < v_nom <= v_max")

    n_edges = 0
    for br in net.branches:
        if not br.in_service:
            out.append(f"branch {br.edge}: out of service branch in network")
            continue
        n_edges += 1
        if br.r < 0 or br.x < 0:
            out.append(f"branch {br.edge}: negative impedance")
        for end in br.edge:
            if end not in idset:
                out.append(f"branch {br.edge}: unknown bus {end}")
    if n_edges > len(ids) - 1:
        out.append("branch count exceeds N-1")
    elif n_edges < len(ids) - 1:
        out.append(f"branch count below N-1 ({n_edges} < {len(ids) - 1})")

    in_deg: dict[int, int] = {}
    for br in net.branches:
        in_deg[br.to_bus] = in_deg.get(br.to_bus, 0) + 1
    if in_deg.get(net.root, 0):
        out.append("branch oriented into the root")
    for bid, d in sorted(in_deg.items()):
        if d > 1:
            out.append(f"bus {bid}: more than one parent")

    # reachability along branch orientation
    seen = {net.root} if net.root in idset else set()
    queue = deque(seen)
    while queue:
        i = queue.popleft()
        for j in net.children.get(i, ()):
            if j not in seen:
                seen.add(j)
                queue.append(j)
    for bid in sorted(idset - seen):
        out.append(f"disconnected bus {bid}")
    return out


def subtree_order(net: RadialNetwork) -> list[int]:
    """Parents before children; ties broken by ascending bus id (BFS)."""
    order = [net.root]
    queue = deque([net.root])
    while queue:
        i = queue.popleft()
        for j in net.children.get(i, ()):
            order.append(j)
            queue.append(j)
    return order


def orient_from_root(root: int, buses: Iterable[Bus], branches: Iterable[Branch],
                     base_mva: float = 1.0, base_kv: float = 1.0) -> RadialNetwork:
    """Build a network from undirected in-service branches, pointing each away from ``root``.

    Raises ValidationError if the in-service topology is not a spanning tree.
    """
    buses = tuple(buses)
    live = [br for br in branches if br.in_service]
    adj: dict[int, list[tuple[int, Branch]]] = {b.id: [] for b in buses}
    bad = []
    for br in live:
        if br.from_bus not in adj or br.to_bus not in adj:
            bad.append(f"branch {br.edge}: unknown bus")
            continue
        adj[br.from_bus].append((br.to_bus, br))
        adj[br.to_bus].append((br.from_bus, br))
    if bad:
        raise ValidationError(bad)
    if len(live) > len(buses) - 1:
        raise ValidationError(["branch count exceeds N-1"])

    oriented = []
    seen = {root}
    queue = deque([root])
    while queue:
        i = queue.popleft()
        for j, br in sorted(adj[i], key=lambda t: t[0]):
            if j in seen:
                continue
            seen.add(j)
            queue.append(j)
            if br.from_bus == i:
                oriented.append(br)
            else:
                oriented.append(replace(br, from_bus=i, to_bus=j))
    missing = sorted(set(adj) - seen)
    if missing:
        raise ValidationError([f"disconnected bus {b}" for b in missing])
    net = RadialNetwork(root, buses, tuple(oriented), base_mva, base_kv)
    violations = validate_radial(net)
    if violations:
        raise ValidationError(violations)
    return net


# ---------------------------------------------------------------------------
# Matpower case text

_MATRIX_START = re.compile(r"^\s*mpc\.(\w+)\s*=\s*\[(.*)$")
_SCALAR = re.compile(r"^\s*mpc\.baseMVA\s*=\s*([^;%]+);?")
_LOAD_SCALE = re.compile(
    r"mpc\.bus\(\s*:\s*,\s*\[\s*PD\s*,?\s*QD\s*\]\s*\)\s*=\s*"
    r"mpc\.bus\(\s*:\s*,\s*\[\s*PD\s*,?\s*QD\s*\]\s*\)\s*/\s*([0-9.eE+-]+)")
_OHMS = re.compile(
    r"mpc\.branch\(\s*:\s*,\s*\[\s*BR_R\s*,?\s*BR_X\s*\]\s*\)\s*=\s*"
    r"mpc\.branch\(\s*:\s*,\s*\[\s*BR_R\s*,?\s*BR_X\s*\]\s*\)\s*/\s*\(\s*Vbase\s*\^\s*2\s*/\s*Sbase\s*\)")


def _strip_comment(line: str) -> str:
    i = line.find("%")
    return line if i < 0 else line[:i]


def _read_matrices(text: str) -> tuple[dict[str, list[tuple[int, list[float]]]], float | None]:
    """Return ``{name: [(lineno, row), ...]}`` for every ``mpc.<name> = [...]`` block."""
    blocks: dict[str, list[tuple[int, list[float]]]] = {}
    base_mva = None
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if current is None:
            m = _SCALAR.match(line)
            if m:
                try:
                    base_mva = float(m.group(1))
                except ValueError:
                    raise CaseFormatError(f"bad baseMVA value {m.group(1).strip()!r}", lineno) from None
                continue
            m = _MATRIX_START.match(line)
            if not m:
                continue
            current = m.group(1)
            if current in blocks:
                raise CaseFormatError(f"duplicate mpc.{current} block", lineno)
            blocks[current] = []
            line = m.group(2)
        closed = "]" in line
        if closed:
            line = line[: line.index("]")]
        for chunk in line.split(";"):
            fields = chunk.replace(",", " ").split()
            if not fields:
                continue
            if current in ("bus", "branch"):
                try:
                    row = [float(f) for f in fields]
                except ValueError:
                    raise CaseFormatError(f"non-numeric field in mpc.{current}", lineno) from None
                blocks[current].append((lineno, row))
        if closed:
            current = None
    if current is not None:
        raise CaseFormatError(f"unterminated mpc.{current} block")
    return blocks, base_mva


def parse_case(text: str) -> RadialNetwork:
    """Parse Matpower case text into a validated, root-oriented network (per-unit).

    Honors the kW -> MW and ohm -> p.u. conversion statements that some
    distribution cases (e.g. case33bw) carry after the data blocks.
    """
    blocks, base_mva = _read_matrices(text)
    if base_mva is None:
        raise CaseFormatError("missing mpc.baseMVA")
    if base_mva <= 0:
        raise CaseFormatError("baseMVA must be positive")
    for name in ("bus", "branch"):
        if name not in blocks:
            raise CaseFormatError(f"missing mpc.{name} block")
        if not blocks[name]:
            raise CaseFormatError(f"empty mpc.{name} block")

    code = "\n".join(_strip_comment(l) for l in text.splitlines())
    m = _LOAD_SCALE.search(code)
    load_div = float(m.group(1)) if m else 1.0
    ohms = _OHMS.search(code) is not None

    bus_rows = blocks["bus"]
    width = len(bus_rows[0][1])
    if width < 13:
        raise CaseFormatError(f"bus rows need 13 columns, got {width}", bus_rows[0][0])
    buses = []
    roots = []
    for lineno, row in bus_rows:
        if len(row) != width:
            raise CaseFormatError(f"bus row has {len(row)} columns, expected {width}", lineno)
        bid = int(row[_BUS_I])
        if bid != row[_BUS_I]:
            raise CaseFormatError("bus number must be an integer", lineno)
        if int(row[_BUS_TYPE]) == _REF_TYPE:
            roots.append(bid)
        v_nom = row[_VM] or 1.0
        v_max = row[_VMAX] or DEFAULT_V_MAX
        v_min = row[_VMIN] or DEFAULT_V_MIN
        p = row[_PD] / load_div / base_mva
        q = row[_QD] / load_div / base_mva
        buses.append(Bus(bid, p, q, v_min, v_max, v_nom))
    if len(roots) != 1:
        raise CaseFormatError(f"expected exactly one reference bus, found {len(roots)}")
    if len({b.id for b in buses}) != len(buses):
        raise ValidationError(["duplicate bus id"])
    root = roots[0]
    base_kv = bus_rows[[b.id for b in buses].index(root)][1][_BASE_KV] or 1.0

    z_base = base_kv ** 2 / base_mva if ohms else 1.0
    branch_rows = blocks["branch"]
    bwidth = len(branch_rows[0][1])
    if bwidth < 11:
        raise CaseFormatError(f"branch rows need 11 columns, got {bwidth}", branch_rows[0][0])
    branches = []
    for lineno, row in branch_rows:
        if len(row) != bwidth:
            raise CaseFormatError(f"branch row has {len(row)} columns, expected {bwidth}", lineno)
        if row[_TAP] not in (0.0, 1.0):
            raise CaseFormatError("off-nominal transformer taps are not supported", lineno)
        status = row[_BR_STATUS] != 0
        branches.append(Branch(int(row[_F_BUS]), int(row[_T_BUS]),
                               row[_BR_R] / z_base, row[_BR_X] / z_base, status))
    dropped = sum(not b.in_service for b in branches)
    if dropped:
        log.debug("dropping %d out-of-service branches", dropped)
    return orient_from_root(root, buses, branches, base_mva, base_kv)


def load_case(path) -> RadialNetwork:
    with open(path, encoding="utf-8") as fh:
        return parse_case(fh.read())


def case33bw() -> RadialNetwork:
    """The Baran & Wu 33-bus feeder shipped with the package."""
    from importlib.resources import files
    return parse_case(files("ccdopf.data").joinpath("case33bw.m").read_text(encoding="utf-8"))


def to_case_text(net: RadialNetwork) -> str:
    """Serialize to Matpower case text with loads in MW and impedances in p.u."""
    lines = [
        "function mpc = case_export",
        "mpc.version = '2';",
        f"mpc.baseMVA = {net.base_mva!r};",
        "%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin",
        "mpc.bus = [",
    ]
    for b in net.buses:
        typ = _REF_TYPE if b.id == net.root else 1
        lines.append(
            f"\t{b.id}\t{typ}\t{b.load_p * net.base_mva!r}\t{b.load_q * net.base_mva!r}\t0\t0\t1"
            f"\t{b.v_nom!r}\t0\t{net.base_kv!r}\t1\t{b.v_max!r}\t{b.v_min!r};")
    lines += ["];", "%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus", "mpc.branch = ["]
    for br in net.branches:
        lines.append(f"\t{br.from_bus}\t{br.to_bus}\t{br.r!r}\t{br.x!r}\t0\t0\t0\t0\t0\t0"
                     f"\t{int(br.in_service)};")
    lines.append("];")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# canonical line-oriented dump

def dump_network(net: RadialNetwork) -> str:
    lines = [f"network root={net.root} base_mva={net.base_mva!r} base_kv={net.base_kv!r}"]
    for b in net.buses:
        lines.append(f"bus id={b.id} load_p={b.load_p!r} load_q={b.load_q!r} "
                     f"v_min={b.v_min!r} v_max={b.v_max!r} v_nom={b.v_nom!r}")
    for br in net.branches:
        lines.append(f"branch from={br.from_bus} to={br.to_bus} r={br.r!r} x={br.x!r}")
    return "\n".join(lines) + "\n"


def _kv(fields: list[str], lineno: int) -> dict[str, str]:
    out = {}
    for f in fields:
        if "=" not in f:
            raise CaseFormatError(f"expected key=value, got {f!r}", lineno)
        k, v = f.split("=", 1)
        out[k] = v
    return out


def load_network_dump(text: str) -> RadialNetwork:
    header = None
    buses, branches = [], []
    try:
        for lineno, line in enumerate(text.splitlines(), start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            kind, kv = parts[0], _kv(parts[1:], lineno)
            if kind == "network":
                header = (int(kv["root"]), float(kv["base_mva"]), float(kv["base_kv"]))
            elif kind == "bus":
                buses.append(Bus(int(kv["id"]), float(kv["load_p"]), float(kv["load_q"]),
                                 float(kv["v_min"]), float(kv["v_max"]), float(kv["v_nom"])))
            elif kind == "branch":
                branches.append(Branch(int(kv["from"]), int(kv["to"]), float(kv["r"]), float(kv["x"])))
            else:
                raise CaseFormatError(f"unknown record {kind!r}", lineno)
    except KeyError as exc:
        raise CaseFormatError(f"missing field {exc.args[0]!r}", lineno) from None
    except ValueError as exc:
        if isinstance(exc, CaseFormatError):
            raise
        raise CaseFormatError(str(exc), lineno) from None
    if header is None:
        raise CaseFormatError("missing network header")
    net = RadialNetwork(header[0], tuple(buses), tuple(branches), header[1], header[2])
    violations = validate_radial(net)
    if violations:
        raise ValidationError(violations)
    return net
