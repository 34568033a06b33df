"""Line-oriented PV fleet configuration.

Global settings are ``key = value`` lines; each inverter is one ``pv`` line of
``key=value`` fields::

    # comment
    scale = 0.035
    epsilon = 0.05
    sigma_frac = 0.1
    pv node=2 p_mw=1.9 s_mva=2.09 pf=0.95

``scale`` multiplies every MW/MVA/MVAr figure in the file. Physical values are
converted to per-unit on the network's base at load time.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

from .netmodel import RadialNetwork
from .policies import InverterSpec
from .uncertainty import UncertaintyModel


class ConfigError(ValueError):
    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}" if lineno is not None else message)


GLOBAL_KEYS = {"scale", "epsilon", "sigma_frac", "sigma_mode", "range_frac", "droop"}
PV_KEYS = {"node", "p_mw", "s_mva", "pf", "q_ref_mvar", "headroom_mw", "droop", "sigma_frac", "eps"}
PV_REQUIRED = {"node", "p_mw", "s_mva"}


@dataclass(frozen=True)
class PvEntry:
    node: int
    p_mw: float
    s_mva: float
    pf: float = 1.0
    q_ref_mvar: float = 0.0
    headroom_mw: float = 0.0
    droop: float | None = None
    sigma_frac: float | None = None
    eps: float | None = None


@dataclass(frozen=True)
class PvConfig:
    entries: tuple[PvEntry, ...]
    scale: float = 1.0
    epsilon: float = 0.05
    sigma_frac: float = 0.1
    sigma_mode: str = "std"
    droop: float = 0.0
    range_frac: float | None = None  # forecast range mean*(1 -/+ range_frac); None = unbounded

    @property
    def nodes(self) -> list[int]:
        return [e.node for e in self.entries]

    def specs(self, net: RadialNetwork) -> list[InverterSpec]:
        """Inverter specs in per-unit on ``net``'s base."""
        base = net.base_mva
        out = []
        for e in self.entries:
            if not net.has_bus(e.node):
                raise ConfigError(f"inverter at unknown bus {e.node}")
            k = self.droop if e.droop is None else e.droop
            out.append(InverterSpec(e.node, e.s_mva * self.scale / base, e.p_mw * self.scale / base,
                                    q_ref=e.q_ref_mvar * self.scale / base, droop_p=k, droop_q=k, pf=e.pf,
                                    p_headroom=e.headroom_mw * self.scale / base))
        return out

    def model(self, net: RadialNetwork, epsilon: float | None = None,
              sigma_frac: float | None = None) -> UncertaintyModel:
        """Gaussian forecast model around each inverter's p_mw; per-line sigma/eps override the globals."""
        frac = self.sigma_frac if sigma_frac is None else sigma_frac
        mean = {e.node: e.p_mw * self.scale / net.base_mva for e in self.entries}
        lo = hi = None
        if self.range_frac is not None:
            lo = {n: mu * (1 - self.range_frac) for n, mu in mean.items()}
            hi = {n: mu * (1 + self.range_frac) for n, mu in mean.items()}
        m = UncertaintyModel.from_forecast(mean, frac, self.epsilon if epsilon is None else epsilon,
                                           sigma_mode=self.sigma_mode, forecast_lo=lo, forecast_hi=hi)
        per_node = {e.node: e.sigma_frac for e in self.entries if e.sigma_frac is not None}
        if per_node and sigma_frac is None:
            sig = dict(m.sigma)
            for n, f in per_node.items():
                sig[n] = _sigma(mean[n], f, self.sigma_mode)
            m = replace(m, sigma=sig)
        overrides = {e.node: e.eps for e in self.entries if e.eps is not None}
        if overrides and epsilon is None:
            m = replace(m, eps_override=overrides)
        return m


def _sigma(mean: float, frac: float, mode: str) -> float:
    return frac * mean if mode == "std" else math.sqrt(frac * mean)


def _number(text: str, key: str, lineno: int) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ConfigError(f"{key}: not a number: {text!r}", lineno) from None
    if not math.isfinite(v):
        raise ConfigError(f"{key}: must be finite", lineno)
    return v


def parse_pv_config(text: str) -> PvConfig:
    settings: dict[str, float | str] = {}
    entries: list[PvEntry] = []
    seen: set[int] = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("pv ") or line == "pv":
            fields = {}
            for tok in line.split()[1:]:
                key, sep, val = tok.partition("=")
                if not sep:
                    raise ConfigError(f"expected key=value, got {tok!r}", lineno)
                if key not in PV_KEYS:
                    raise ConfigError(f"unknown pv field {key!r}", lineno)
                if key in fields:
                    raise ConfigError(f"duplicate pv field {key!r}", lineno)
                fields[key] = val
            missing = PV_REQUIRED - fields.keys()
            if missing:
                raise ConfigError(f"pv line missing {sorted(missing)}", lineno)
            try:
                node = int(fields.pop("node"))
            except ValueError:
                raise ConfigError("node must be an integer", lineno) from None
            if node in seen:
                raise ConfigError(f"bus {node} listed twice", lineno)
            seen.add(node)
            vals = {k: _number(v, k, lineno) for k, v in fields.items()}
            if vals["s_mva"] < vals["p_mw"] or vals["p_mw"] < 0:
                raise ConfigError("need 0 <= p_mw <= s_mva", lineno)
            if "pf" in vals and not 0 < vals["pf"] <= 1:
                raise ConfigError("pf must lie in (0, 1]", lineno)
            entries.append(PvEntry(node, **vals))
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep:
            raise ConfigError(f"expected 'key = value' or a pv line, got {line!r}", lineno)
        if key not in GLOBAL_KEYS:
            raise ConfigError(f"unknown setting {key!r}", lineno)
        if key in settings:
            raise ConfigError(f"duplicate setting {key!r}", lineno)
        if key == "sigma_mode":
            if val not in ("std", "variance"):
                raise ConfigError("sigma_mode must be 'std' or 'variance'", lineno)
            settings[key] = val
        else:
            settings[key] = _number(val, key, lineno)
    if not entries:
        raise ConfigError("no pv lines")
    eps = settings.get("epsilon", 0.05)
    if not 0 < eps < 0.5:
        raise ConfigError("epsilon must lie in (0, 0.5)")
    scale = settings.get("scale", 1.0)
    if not scale > 0:
        raise ConfigError("scale must be positive")
    range_frac = settings.get("range_frac")
    if range_frac is not None and not 0 <= range_frac < 1:
        raise ConfigError("range_frac must lie in [0, 1)")
    return PvConfig(tuple(entries), scale, eps, settings.get("sigma_frac", 0.1),
                    settings.get("sigma_mode", "std"), settings.get("droop", 0.0), range_frac)


def load_pv_config(path) -> PvConfig:
    return parse_pv_config(Path(path).read_text(encoding="utf-8"))


def bundled(name: str) -> Path:
    """Path of a config shipped in the package data directory."""
    return Path(str(resources.files("ccdopf.data").joinpath(name)))


def fleet_config() -> PvConfig:
    return load_pv_config(bundled("pv_fleet.cfg"))


def node5_config() -> PvConfig:
    return load_pv_config(bundled("pv_node5.cfg"))
