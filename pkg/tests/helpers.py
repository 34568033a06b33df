"""Shared fixtures: random feeders and a dense LinDistFlow oracle."""
import numpy as np

from ccdopf.netmodel import Branch, Bus, orient_from_root
from ccdopf.policies import InverterSpec


def random_feeder(rng, n_min=4, n_max=12, r=(0.005, 0.05), x=(0.005, 0.05), load_p=(0.0, 0.1),
                  load_q=(0.0, 0.06)):
    n = int(rng.integers(n_min, n_max + 1))
    buses = [Bus(1)] + [Bus(i, float(rng.uniform(*load_p)), float(rng.uniform(*load_q)))
                        for i in range(2, n + 1)]
    branches = [Branch(int(rng.integers(1, i)), i, float(rng.uniform(*r)), float(rng.uniform(*x)))
                for i in range(2, n + 1)]
    return orient_from_root(1, buses, branches)


def dense_lindistflow(net, pv_p=None, pv_q=None):
    """Solve the LinDistFlow equations as one dense linear system.

    Unknowns: p and q for each edge, then u for each bus. Returns dicts.
    """
    pv_p, pv_q = pv_p or {}, pv_q or {}
    edges = net.edges
    ids = net.bus_ids
    ne, nb = len(edges), len(ids)
    col_p = {e: k for k, e in enumerate(edges)}
    col_q = {e: ne + k for k, e in enumerate(edges)}
    col_u = {b: 2 * ne + k for k, b in enumerate(ids)}
    n = 2 * ne + nb
    A = np.zeros((n, n))
    rhs = np.zeros(n)
    row = 0
    for (i, j) in edges:
        bus = net.bus(j)
        for col, load, inj in ((col_p, bus.load_p, pv_p.get(j, 0.0)), (col_q, bus.load_q, pv_q.get(j, 0.0))):
            A[row, col[(i, j)]] = 1.0
            for e in net.child_edges(j):
                A[row, col[e]] = -1.0
            rhs[row] = load - inj
            row += 1
    for (i, j) in edges:
        br = net.branch((i, j))
        A[row, col_u[j]] = 1.0
        A[row, col_u[i]] = -1.0
        A[row, col_p[(i, j)]] = 2 * br.r
        A[row, col_q[(i, j)]] = 2 * br.x
        row += 1
    A[row, col_u[net.root]] = 1.0
    rhs[row] = net.bus(net.root).v_nom ** 2
    sol = np.linalg.solve(A, rhs)
    return ({e: sol[col_p[e]] for e in edges}, {e: sol[col_q[e]] for e in edges},
            {b: sol[col_u[b]] for b in ids})


def equivalence_feeders(seed, count=50):
    """Small feeders with deterministic PV used to compare ADMM with the central solve."""
    rng = np.random.default_rng(seed)
    for _ in range(count):
        n = int(rng.integers(2, 9))
        buses = [Bus(1)] + [Bus(i, float(rng.uniform(0.01, 0.05)), float(rng.uniform(0.005, 0.03)))
                            for i in range(2, n + 1)]
        branches = [Branch(int(rng.integers(1, i)), i, float(rng.uniform(0.02, 0.1)),
                           float(rng.uniform(0.02, 0.1))) for i in range(2, n + 1)]
        net = orient_from_root(1, buses, branches)
        pv = sorted(rng.choice(np.arange(2, n + 1), size=int(rng.integers(1, n)), replace=False).tolist())
        specs = []
        for b in pv:
            # PV kept below the local load so network losses stay well away from zero
            p = float(rng.uniform(0, 0.6)) * net.bus(b).load_p
            specs.append(InverterSpec(b, p * float(rng.uniform(1.02, 1.3)) + 1e-3, p))
        yield net, specs


def two_bus(load_p=0.1, load_q=0.05, r=0.01, x=0.02):
    return orient_from_root(1, [Bus(1), Bus(2, load_p, load_q)], [Branch(1, 2, r, x)])


def dual_gradient_bound(Q, c, G, h, A, b, target, tol=1e-7, max_iter=200_000):
    """Best dual value of a strictly convex QP, by projected gradient ascent.

    Accelerated with function-value restarts. Stops once within ``tol`` of
    ``target`` (weak duality makes the result a lower bound on the optimum).
    """
    Qi = np.linalg.inv(Q)
    M = np.vstack([G, A])
    rhs = np.concatenate([h, b])
    mi = G.shape[0]
    L = max(np.linalg.eigvalsh(M @ Qi @ M.T)[-1], 1e-12) if M.size else 1.0

    def value(y):
        w = c + M.T @ y
        return -0.5 * w @ Qi @ w - rhs @ y, M @ (-Qi @ w) - rhs

    y = np.zeros(M.shape[0])
    z, t = y.copy(), 1.0
    best, v_y = value(y)[0], value(y)[0]
    for _ in range(max_iter):
        if target - best <= tol:
            break
        _, g = value(z)
        yn = z + g / L
        yn[:mi] = np.maximum(yn[:mi], 0.0)
        vn = value(yn)[0]
        best = max(best, vn)
        if vn < v_y:
            z, t = y.copy(), 1.0
            continue
        tn = (1 + np.sqrt(1 + 4 * t * t)) / 2
        z = yn + (t - 1) / tn * (yn - y)
        y, v_y, t = yn, vn, tn
    return best


def box_gradient_bracket(Q, c, lo, hi, tol=5e-7, max_iter=20_000):
    """(lower, upper) bracket on min 0.5 x'Qx + c'x over a box, by projected gradient.

    The upper end is the objective at the iterate, the lower end adds the
    linearized gap min over the box of grad'(y - x).
    """
    L = max(np.linalg.eigvalsh(Q)[-1], 1e-12)
    x = np.clip(np.zeros_like(c), lo, hi)
    z, t = x.copy(), 1.0
    f = lambda v: 0.5 * v @ Q @ v + c @ v  # noqa: E731
    lower, upper = -np.inf, f(x)
    for _ in range(max_iter):
        g = Q @ x + c
        corner = np.where(g > 0, lo, hi)
        lower = max(lower, f(x) + g @ (corner - x))
        upper = min(upper, f(x))
        if upper - lower <= tol:
            break
        xn = np.clip(z - (Q @ z + c) / L, lo, hi)
        if f(xn) > f(x):
            z, t = x.copy(), 1.0
            continue
        tn = (1 + np.sqrt(1 + 4 * t * t)) / 2
        z = xn + (t - 1) / tn * (xn - x)
        x, t = xn, tn
    return lower, upper


def random_qp(rng, kind):
    """Random program with dim <= 8 around a feasible point.

    kind 'pd': strictly convex with general rows, equalities and bounds;
    'psd_box': rank-deficient Hessian with box bounds only;
    'psd': rank-deficient Hessian with everything.
    """
    n = int(rng.integers(1, 9))
    x0 = rng.normal(size=n)
    c = rng.normal(size=n)
    lo = x0 - rng.uniform(0.1, 2, n)
    hi = x0 + rng.uniform(0.1, 2, n)
    if kind == "pd":
        B = rng.normal(size=(n, n))
        Q = B @ B.T + 0.5 * np.eye(n)
    else:
        B = rng.normal(size=(int(rng.integers(0, n)) if kind == "psd_box" else int(rng.integers(1, n + 1)), n))
        Q = B.T @ B
    if kind == "psd_box":
        return dict(hessian=Q, linear=c, lo=lo, hi=hi)
    mi = int(rng.integers(0, 2 * n + 1))
    G = rng.normal(size=(mi, n))
    h = G @ x0 + rng.uniform(0, 1, mi)
    me = int(rng.integers(0, n))
    A = rng.normal(size=(me, n))
    return dict(hessian=Q, linear=c, ineq_a=G, ineq_b=h, eq_a=A, eq_b=A @ x0, lo=lo, hi=hi)
