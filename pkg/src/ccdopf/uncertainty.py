"""Gaussian PV forecast errors, chance-constraint tightening and Monte Carlo checks."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

# Acklam's rational approximation coefficients
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425

MC_CHUNK = 8192


def norm_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def inv_norm_cdf(p: float) -> float:
    """Standard normal quantile: Acklam's approximation plus one Halley step."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability {p} outside (0, 1)")
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    elif p <= 1.0 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log1p(-p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    # refine against the erfc-based CDF; evaluate the smaller tail for accuracy
    if p < 0.5:
        e = norm_cdf(x) - p
    else:
        e = (1.0 - p) - norm_cdf(-x)
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def quantile(epsilon: float) -> float:
    """Phi^-1(1 - epsilon), the safety factor of a one-sided Gaussian chance constraint."""
    return inv_norm_cdf(1.0 - epsilon)


def tighten_scalar(coeff: float, mu: float, sigma: float, bound: float, epsilon: float) -> float:
    """Margin of P(coeff * xi <= bound) >= 1 - eps for xi ~ N(mu, sigma^2); feasible iff >= 0."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    return bound - coeff * mu - quantile(epsilon) * abs(coeff) * sigma


def tighten_soc(x, mu, cov, bound: float, epsilon: float) -> float:
    """Margin of b - mu'x - Phi^-1(1-eps) ||cov^(1/2) x|| for a Gaussian vector."""
    x = np.asarray(x, dtype=float)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    return float(bound - np.asarray(mu, dtype=float) @ x - quantile(epsilon) * math.sqrt(max(x @ cov @ x, 0.0)))


def soc_form(x, mu, cov, bound: float, epsilon: float) -> tuple[float, float]:
    """Split the tightened constraint into the cone and the linear part.

    Returns (t, residual) where t = ||cov^(1/2) x||_2 satisfies the cone with
    equality and residual = mu'x + Phi^-1(1-eps) t - b must be <= 0.
    """
    x = np.asarray(x, dtype=float)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    w, v = np.linalg.eigh(cov)
    half = v @ np.diag(np.sqrt(np.clip(w, 0.0, None))) @ v.T
    t = float(np.linalg.norm(half @ x))
    return t, float(np.asarray(mu, dtype=float) @ x + quantile(epsilon) * t - bound)


@dataclass(frozen=True)
class UncertaintyModel:
    """Independent Gaussian forecast errors on PV active output (p.u.)."""

    mean: Mapping[int, float]
    sigma: Mapping[int, float]
    forecast_lo: Mapping[int, float] = field(default_factory=dict)
    forecast_hi: Mapping[int, float] = field(default_factory=dict)
    epsilon: float = 0.05
    eps_override: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self):
        for eps in [self.epsilon, *self.eps_override.values()]:
            if not 0.0 < eps < 0.5:
                raise ValueError(f"epsilon {eps} outside (0, 0.5)")
        for n, s in self.sigma.items():
            if s < 0:
                raise ValueError(f"node {n}: negative sigma")
            if n not in self.mean:
                raise ValueError(f"node {n}: sigma without mean")
        for n, mu in self.mean.items():
            lo = self.forecast_lo.get(n, -math.inf)
            hi = self.forecast_hi.get(n, math.inf)
            if not lo <= mu <= hi:
                raise ValueError(f"node {n}: mean outside forecast range")

    @classmethod
    def from_forecast(cls, mean: Mapping[int, float], sigma_frac: float = 0.10, epsilon: float = 0.05,
                      sigma_mode: str = "std", forecast_lo=None, forecast_hi=None) -> "UncertaintyModel":
        """sigma_mode 'std': sigma = frac * mean; 'variance': sigma^2 = frac * mean."""
        if sigma_mode == "std":
            sigma = {n: sigma_frac * mu for n, mu in mean.items()}
        elif sigma_mode == "variance":
            sigma = {n: math.sqrt(sigma_frac * mu) for n, mu in mean.items()}
        else:
            raise ValueError(f"unknown sigma mode {sigma_mode!r}")
        return cls(dict(mean), sigma, dict(forecast_lo or {}), dict(forecast_hi or {}), epsilon)

    @property
    def nodes(self) -> list[int]:
        return sorted(self.mean)

    def eps(self, node: int) -> float:
        return self.eps_override.get(node, self.epsilon)

    def with_epsilon(self, epsilon: float) -> "UncertaintyModel":
        return UncertaintyModel(self.mean, self.sigma, self.forecast_lo, self.forecast_hi, epsilon, {})

    def deterministic(self) -> "UncertaintyModel":
        return UncertaintyModel(self.mean, {n: 0.0 for n in self.mean}, self.forecast_lo,
                                self.forecast_hi, self.epsilon, self.eps_override)


def forecast_range_check(model: UncertaintyModel) -> dict[int, list[str]]:
    """Per node, the violated tightened forecast-range constraints (empty list when ok)."""
    out = {}
    for n in model.nodes:
        mu, sd = model.mean[n], model.sigma.get(n, 0.0)
        z = quantile(model.eps(n))
        bad = []
        hi = model.forecast_hi.get(n)
        lo = model.forecast_lo.get(n)
        if hi is not None and mu + z * sd > hi:
            bad.append(f"upper: {mu + z * sd!r} > {hi!r}")
        if lo is not None and mu - z * sd < lo:
            bad.append(f"lower: {mu - z * sd!r} < {lo!r}")
        out[n] = bad
    return out


def pf_reactive_range(node: int, model: UncertaintyModel, pf: float) -> float:
    """Half-width r of the tightened coupling |q+ - q- + Q| <= r (cos(phi) * p, p Gaussian)."""
    return pf * model.mean[node] - quantile(model.eps(node)) * pf * model.sigma.get(node, 0.0)


def tighten_pf_coupling(node: int, model: UncertaintyModel, q_plus: float, q_minus: float,
                        load_q: float, pf: float) -> tuple[float, float]:
    """Margins of the two power-factor coupling chance constraints (both >= 0 iff they hold)."""
    y = q_plus - q_minus + load_q
    r = pf_reactive_range(node, model, pf)
    return r - y, y + r


def pf_coupling_rows(node: int, model: UncertaintyModel, load_q: float, pf: float):
    """The two tightened rows as (coef_q_plus, coef_q_minus, rhs) meaning a*q+ + b*q- <= rhs."""
    r = pf_reactive_range(node, model, pf)
    return [(1.0, -1.0, r - load_q), (-1.0, 1.0, r + load_q)]


# ---------------------------------------------------------------------------
# Monte Carlo

def _chunk_normals(seed: int, chunk: int, rows: int, dim: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, 0, chunk]))
    return rng.standard_normal((rows, dim))


def sample_pv(model: UncertaintyModel, n_samples: int, seed: int, workers: int = 1) -> np.ndarray:
    """(n_samples, n_nodes) draws of PV output in ``model.nodes`` order.

    Draws are produced in fixed-size chunks, each from its own counter-based
    stream, so the result does not depend on ``workers``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    nodes = model.nodes
    mu = np.array([model.mean[n] for n in nodes])
    sd = np.array([model.sigma.get(n, 0.0) for n in nodes])
    n_chunks = -(-n_samples // MC_CHUNK)
    sizes = [min(MC_CHUNK, n_samples - i * MC_CHUNK) for i in range(n_chunks)]

    def work(i):
        return _chunk_normals(seed, i, sizes[i], len(nodes))

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(work, range(n_chunks)))
    else:
        parts = [work(i) for i in range(n_chunks)]
    z = np.vstack(parts) if parts else np.zeros((0, len(nodes)))
    return mu + z * sd


def monte_carlo_violation(model: UncertaintyModel, q_inj: Mapping[int, float], pf: Mapping[int, float],
                          n_samples: int, seed: int, net=None, workers: int = 1) -> dict[str, float]:
    """Empirical violation rate of every chance constraint at a fixed reactive dispatch.

    Keys: ``range_hi[n]``, ``range_lo[n]``, ``pf_upper[n]``, ``pf_lower[n]`` and,
    when ``net`` is given, ``v_max[b]``/``v_min[b]`` for every non-root bus
    (voltages re-evaluated by LinDistFlow per sample).
    """
    nodes = model.nodes
    draws = sample_pv(model, n_samples, seed, workers)
    rates: dict[str, float] = {}
    for k, n in enumerate(nodes):
        p = draws[:, k]
        if n in model.forecast_hi:
            rates[f"range_hi[{n}]"] = float(np.mean(p > model.forecast_hi[n]))
        if n in model.forecast_lo:
            rates[f"range_lo[{n}]"] = float(np.mean(p < model.forecast_lo[n]))
        if n in q_inj:
            q = q_inj[n]
            cphi = pf[n]
            rates[f"pf_upper[{n}]"] = float(np.mean(q - cphi * p > 0))
            rates[f"pf_lower[{n}]"] = float(np.mean(-q - cphi * p > 0))
    if net is not None:
        rates.update(_voltage_rates(net, nodes, draws, q_inj))
    return rates


def _voltage_rates(net, nodes, draws, q_inj) -> dict[str, float]:
    from .distflow import InjectionSet, solve_lindistflow

    base = solve_lindistflow(net, InjectionSet({}, dict(q_inj)))
    ids = [b for b in net.bus_ids if b != net.root]
    u0 = np.array([base.u[b] for b in ids])
    # u is affine in active injections: build the sensitivity column per PV node
    sens = np.zeros((len(nodes), len(ids)))
    for k, n in enumerate(nodes):
        st = solve_lindistflow(net, InjectionSet({n: 1.0}, dict(q_inj)))
        sens[k] = np.array([st.u[b] for b in ids]) - u0
    u = u0 + draws @ sens
    out = {}
    for j, b in enumerate(ids):
        bus = net.bus(b)
        out[f"v_max[{b}]"] = float(np.mean(u[:, j] > bus.v_max ** 2))
        out[f"v_min[{b}]"] = float(np.mean(u[:, j] < bus.v_min ** 2))
    return out


def binomial_tolerance(epsilon: float, n: int, k: float = 3.0) -> float:
    return k * math.sqrt(epsilon * (1.0 - epsilon) / n)
