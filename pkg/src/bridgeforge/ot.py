"""Entropic and exact optimal transport between uniform point clouds.

Training uses the debiased Sinkhorn divergence with squared-Euclidean cost,
computed by log-domain iterations.  On the autodiff tape the iteration count
is fixed and the whole scheme is differentiated exactly by replaying the
dual updates in reverse (potentials are stored per iteration; the softmax
kernels are recomputed on the way back, so memory stays linear in the
iteration count).  Off tape the iterations run until the marginal violation
drops below tolerance.

Evaluation uses exact EMD: an assignment solve for equal-size clouds and a
transport LP otherwise.  Point clouds are (n, d) arrays with uniform
weights throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog

from . import autodiff as ad
from .autodiff import Node, value_of

__all__ = [
    "SinkhornConfig",
    "SinkhornResult",
    "sinkhorn_cost",
    "sinkhorn_divergence",
    "emd_exact",
    "mdd",
    "cdd",
    "auto_epsilon",
    "pairwise_sqdist",
    "write_metrics_csv",
]


@dataclass
class SinkhornConfig:
    """``epsilon=None`` scales the regularization to 5% of the median
    pairwise squared distance of the target cloud, recomputed per call.

    ``train_iters`` is the fixed unrolled schedule used on the autodiff
    tape; ``self_iters`` bounds the debiasing self-terms there (they are
    far better conditioned, so a fraction of the budget suffices)."""
    epsilon: float | None = None
    max_iters: int = 5000
    tol: float = 1e-9
    train_iters: int = 200
    self_iters: int | None = None

    def __post_init__(self):
        if self.epsilon is not None and self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_iters < 1 or self.train_iters < 1:
            raise ValueError("iteration counts must be >= 1")

    @property
    def self_schedule(self) -> int:
        if self.self_iters is not None:
            return self.self_iters
        return max(10, self.train_iters // 3)


@dataclass
class SinkhornResult:
    value: object             # float, or Node when computed on the tape
    converged: bool
    marginal_error: float
    iterations: int

    def __float__(self):
        return float(value_of(self.value))


def auto_epsilon(target_rows: np.ndarray) -> float:
    """5% of the median off-diagonal pairwise squared distance."""
    b = np.asarray(target_rows, dtype=np.float64)
    n = len(b)
    if n < 2:
        return 1e-3
    sq = _sqdist_values(b, b)
    med = float(np.median(sq[~np.eye(n, dtype=bool)]))
    return max(0.05 * med, 1e-6 * (1.0 + med))


def _sqdist_values(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = np.sum(a * a, axis=1)[:, None]
    bb = np.sum(b * b, axis=1)[None, :]
    sq = aa + bb - 2.0 * (a @ b.T)
    np.maximum(sq, 0.0, out=sq)
    return sq


def pairwise_sqdist(a, b=None):
    """Squared-Euclidean cost matrix between row clouds; tracked in ``a``.

    ``b=None`` means the self cost matrix of ``a`` (both slots receive
    adjoints)."""
    av = value_of(a)
    if b is None:
        sq = _sqdist_values(av, av)
        if not isinstance(a, Node):
            return sq

        def pull(g):
            s = g.sum(axis=1) + g.sum(axis=0)
            return 2.0 * (av * s[:, None] - (g + g.T) @ av)

        return Node(sq, [(a, pull)])
    bv = value_of(b)
    sq = _sqdist_values(av, bv)
    pulls = []
    if isinstance(a, Node):
        pulls.append((a, lambda g: 2.0 * (av * g.sum(axis=1)[:, None] - g @ bv)))
    if isinstance(b, Node):
        pulls.append((b, lambda g: 2.0 * (bv * g.sum(axis=0)[:, None] - g.T @ av)))
    if not pulls:
        return sq
    return Node(sq, pulls)


# ---------------------------------------------------------------------------
# log-domain dual updates

def _update(other_pot: np.ndarray, C: np.ndarray, eps: float, logw: float,
            axis: int) -> np.ndarray:
    """One half-iteration: new potential on the opposite side of ``axis``.

    axis=0 folds the row potential (n,1) into a column potential (1,m);
    axis=1 the reverse.
    """
    arg = (other_pot - C) / eps + logw
    top = arg.max(axis=axis, keepdims=True)
    return -eps * (top + np.log(np.exp(arg - top).sum(axis=axis, keepdims=True)))


def _marginal_error(f, g, C, eps, n, m) -> float:
    P = np.exp((f + g - C) / eps) / (n * m)
    return float(np.abs(P.sum(axis=0) - 1.0 / m).sum()
                 + np.abs(P.sum(axis=1) - 1.0 / n).sum())


def _plan(f, g, C, eps, n, m) -> np.ndarray:
    return np.exp((f + g - C) / eps) / (n * m)


def _primal_value(f, g, C, eps, n, m) -> float:
    """Sharp transport cost <P, C> of the current scaling."""
    return float(np.sum(_plan(f, g, C, eps, n, m) * C))


def _anneal_schedule(C: np.ndarray, eps: float):
    """Epsilon ladder from the cost scale down to the target (halving)."""
    top = float(np.max(C))
    if top <= 0:
        return [eps]
    levels = []
    cur = max(top * 0.5, eps)
    while cur > eps * 1.0001:
        levels.append(cur)
        cur *= 0.5
    levels.append(eps)
    return levels


def _sinkhorn_plain(C: np.ndarray, eps: float, max_iters: int, tol: float):
    """Convergence-checked solve: epsilon annealing, then damped parallel
    (Jacobi) updates at the target epsilon.

    Parallel damping keeps the two potentials exactly equal on symmetric
    problems, so the debiased divergence of identical clouds cancels to
    machine precision."""
    n, m = C.shape
    la, lb = np.log(1.0 / n), np.log(1.0 / m)
    f = np.zeros((n, 1))
    g = np.zeros((1, m))
    total_it = 0
    for level in _anneal_schedule(C, eps):
        for _ in range(5):
            f_new = 0.5 * (f + _update(g, C, level, lb, axis=1))
            g_new = 0.5 * (g + _update(f, C, level, la, axis=0))
            f, g = f_new, g_new
            total_it += 1
    err = np.inf
    while total_it < max_iters:
        f_new = 0.5 * (f + _update(g, C, eps, lb, axis=1))
        g_new = 0.5 * (g + _update(f, C, eps, la, axis=0))
        f, g = f_new, g_new
        total_it += 1
        if total_it % 10 == 0 or total_it >= max_iters:
            err = _marginal_error(f, g, C, eps, n, m)
            if err < tol:
                break
    if not np.isfinite(err):
        err = _marginal_error(f, g, C, eps, n, m)
    value = _primal_value(f, g, C, eps, n, m)
    return value, f, g, err, total_it


def _update_scaled(other_scaled: np.ndarray, Ce: np.ndarray, logw: float,
                   axis: int) -> np.ndarray:
    """Half-iteration in the eps-scaled domain: returns the new potential
    divided by -eps (i.e. the raw LSE)."""
    arg = (other_scaled + logw) - Ce
    top = arg.max(axis=axis, keepdims=True)
    return top + np.log(np.exp(arg - top).sum(axis=axis, keepdims=True))


def _kernel_scaled(f_scaled, g_scaled, Ce, logw) -> np.ndarray:
    return np.exp((f_scaled + g_scaled - Ce) + logw)


def _sinkhorn_traced(C: Node, eps: float, n_iters: int):
    """Fixed-iteration Sinkhorn with exact reverse-replay differentiation.

    The sharp primal cost <P, C> heads the tape; its adjoints with respect
    to the final potentials seed a reverse sweep over the stored dual
    updates (softmax kernels are recomputed per step).  Potentials are kept
    in the eps-scaled domain so each update touches the cost matrix once.
    """
    Cv = C.value
    n, m = Cv.shape
    la, lb = np.log(1.0 / n), np.log(1.0 / m)
    Ce = Cv / eps
    g = np.zeros((1, m))          # g / eps
    history = []
    f = None
    for _ in range(n_iters):
        g_prev = g
        f = -_update_scaled(g_prev, Ce, lb, axis=1)   # f / eps, (n, 1)
        g = -_update_scaled(f, Ce, la, axis=0)        # g / eps, (1, m)
        history.append((g_prev, f, g))
    P = _kernel_scaled(f, g, Ce, la + lb)
    value = float(np.sum(P * Cv))
    err = float(np.abs(P.sum(axis=0) - 1.0 / m).sum()
                + np.abs(P.sum(axis=1) - 1.0 / n).sum())

    def pull(out_grad):
        s = float(out_grad)
        T = P * Cv
        gbar = s * T.sum(axis=0, keepdims=True) / eps
        fseed = s * T.sum(axis=1, keepdims=True) / eps
        Cbar = s * (P - T / eps)
        for g_prev, f_k, g_k in reversed(history):
            # g_k = -eps LSE_rows((f_k - C)/eps + la)
            W = _kernel_scaled(f_k, g_k, Ce, la)      # cols sum to 1
            Wg = W * gbar
            Cbar += Wg
            # only the final f feeds the value head directly; earlier
            # iterates receive adjoint solely through their g update
            fbar = fseed - Wg.sum(axis=1, keepdims=True)
            fseed = np.zeros((n, 1))
            # f_k = -eps LSE_cols((g_prev - C)/eps + lb)
            V = _kernel_scaled(f_k, g_prev, Ce, lb)   # rows sum to 1
            Vf = V * fbar
            Cbar += Vf
            gbar = -Vf.sum(axis=0, keepdims=True)
        return Cbar

    node = Node(np.asarray(value), [(C, pull)])
    return node, err


def _sinkhorn_self_plain(C: np.ndarray, eps: float, max_iters: int, tol: float):
    """Self OT via the same damped parallel updates (f = g throughout)."""
    value, f, g, err, it = _sinkhorn_plain(C, eps, max_iters, tol)
    return value, g, err, it


def _sinkhorn_self_traced(C: Node, eps: float, n_iters: int):
    Cv = C.value
    n = Cv.shape[0]
    lw = np.log(1.0 / n)
    Ce = Cv / eps
    p = np.zeros((1, n))          # p / eps
    history = []
    for _ in range(n_iters):
        q = -_update_scaled(p, Ce, lw, axis=1).T
        history.append((p, q))
        p = 0.5 * (p + q)
    P = _kernel_scaled(p.T, p, Ce, 2.0 * lw)
    value = float(np.sum(P * Cv))
    err = float(np.abs(P.sum(axis=0) - 1.0 / n).sum()
                + np.abs(P.sum(axis=1) - 1.0 / n).sum())

    def pull(out_grad):
        s = float(out_grad)
        T = P * Cv
        pbar = s * (T.sum(axis=0, keepdims=True) + T.sum(axis=1, keepdims=True).T) / eps
        Cbar = s * (P - T / eps)
        for p_prev, q in reversed(history):
            qbar = 0.5 * pbar
            # q^T = -eps LSE_cols((p_prev - C)/eps + lw): rows of V sum to 1
            V = _kernel_scaled(q.T, p_prev, Ce, lw)
            Vq = V * qbar.T
            Cbar += Vq
            pbar = 0.5 * pbar - Vq.sum(axis=0, keepdims=True)
        return Cbar

    node = Node(np.asarray(value), [(C, pull)])
    return node, err


def _sinkhorn_self_fixed(C: np.ndarray, eps: float, n_iters: int) -> tuple[float, float]:
    """Untracked self term on the training schedule (constant side of the
    divergence; value only)."""
    n = C.shape[0]
    lw = np.log(1.0 / n)
    Ce = C / eps
    p = np.zeros((1, n))
    for _ in range(n_iters):
        p = 0.5 * (p - _update_scaled(p, Ce, lw, axis=1).T)
    P = _kernel_scaled(p.T, p, Ce, 2.0 * lw)
    err = float(np.abs(P.sum(axis=0) - 1.0 / n).sum()
                + np.abs(P.sum(axis=1) - 1.0 / n).sum())
    return float(np.sum(P * C)), err


def sinkhorn_cost(a, b, cfg: SinkhornConfig | None = None) -> SinkhornResult:
    """Entropic OT cost between uniform clouds (rows are samples).

    ``a`` may be a tape Node; the result is then a Node computed with the
    fixed ``train_iters`` unrolled schedule."""
    cfg = cfg or SinkhornConfig()
    eps = cfg.epsilon if cfg.epsilon is not None else auto_epsilon(value_of(b))
    C = pairwise_sqdist(a, b)
    if isinstance(C, Node):
        node, err = _sinkhorn_traced(C, eps, cfg.train_iters)
        return SinkhornResult(node, err < max(cfg.tol, 1e-6), err, cfg.train_iters)
    value, _, _, err, it = _sinkhorn_plain(C, eps, cfg.max_iters, cfg.tol)
    return SinkhornResult(value, err < cfg.tol, err, it)


def _self_cost(a, cfg: SinkhornConfig, eps: float, fixed_schedule: bool) -> tuple:
    C = pairwise_sqdist(a, None)
    if isinstance(C, Node):
        node, err = _sinkhorn_self_traced(C, eps, cfg.self_schedule)
        return node, err, cfg.self_schedule
    if fixed_schedule:
        value, err = _sinkhorn_self_fixed(C, eps, cfg.self_schedule)
        return value, err, cfg.self_schedule
    value, _, err, it = _sinkhorn_self_plain(C, eps, cfg.max_iters, cfg.tol)
    return value, err, it


def sinkhorn_divergence(a, b, cfg: SinkhornConfig | None = None) -> SinkhornResult:
    """Debiased divergence OT(a,b) - (OT(a,a) + OT(b,b)) / 2; zero iff the
    clouds coincide."""
    cfg = cfg or SinkhornConfig()
    eps = cfg.epsilon if cfg.epsilon is not None else auto_epsilon(value_of(b))
    local = SinkhornConfig(epsilon=eps, max_iters=cfg.max_iters, tol=cfg.tol,
                           train_iters=cfg.train_iters, self_iters=cfg.self_iters)
    training_mode = isinstance(a, Node)
    ab = sinkhorn_cost(a, b, local)
    aa_val, aa_err, aa_it = _self_cost(a, local, eps, training_mode)
    bb_val, bb_err, bb_it = _self_cost(value_of(b), local, eps, training_mode)
    value = ad.sub(ab.value, ad.scale(ad.add(aa_val, bb_val), 0.5))
    err = max(ab.marginal_error, aa_err, bb_err)
    converged = ab.converged and err < max(cfg.tol, 1e-6)
    return SinkhornResult(value, converged, err, max(ab.iterations, aa_it, bb_it))


# ---------------------------------------------------------------------------
# exact transport

def emd_exact(a: np.ndarray, b: np.ndarray, cost: str = "sqeuclidean") -> float:
    """Exact OT cost between uniform empirical measures.

    Equal sizes reduce to an assignment problem; unequal sizes solve the
    transport LP.  ``cost`` is 'sqeuclidean' or 'euclidean'.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    C = _sqdist_values(a, b)
    if cost == "euclidean":
        C = np.sqrt(C)
    elif cost != "sqeuclidean":
        raise ValueError(f"unknown cost {cost!r}")
    n, m = C.shape
    if n == m:
        rows, cols = linear_sum_assignment(C)
        return float(C[rows, cols].mean())
    # transport LP: marginals uniform, variables vectorized row-major
    A_eq = np.zeros((n + m, n * m))
    for i in range(n):
        A_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        A_eq[n + j, j::m] = 1.0
    b_eq = np.concatenate([np.full(n, 1.0 / n), np.full(m, 1.0 / m)])
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def mdd(ground: np.ndarray, predicted: np.ndarray) -> float:
    """Marginal discrepancy: sqrt of the exact squared-Euclidean OT cost."""
    return float(np.sqrt(emd_exact(ground, predicted, "sqeuclidean")))


def cdd(sim_model, sim_truth, initial_points: np.ndarray, eval_times,
        n_traj: int = 20, seed_model: int = 1, seed_truth: int = 2,
        threads: int = 1) -> np.ndarray:
    """Conditional discrepancy per eval time.

    For each initial sample, ``n_traj`` trajectories are generated under
    both dynamics; the per-time EMD-L2 between the two conditional clouds is
    averaged over initial samples.  A simulator maps
    ``(replicated_start (k, d), eval_times, stream_seed)`` to a (T, k, d)
    array.
    """
    initial_points = np.atleast_2d(initial_points)
    eval_times = list(eval_times)
    totals = np.zeros(len(eval_times))

    def one(i):
        start = np.repeat(initial_points[i][None, :], n_traj, axis=0)
        cloud_a = sim_model(start, eval_times, (seed_model, i))
        cloud_b = sim_truth(start, eval_times, (seed_truth, i))
        return np.array([
            np.sqrt(emd_exact(cloud_a[k], cloud_b[k], "sqeuclidean"))
            for k in range(len(eval_times))
        ])

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for res in pool.map(one, range(len(initial_points))):
                totals += res
    else:
        for i in range(len(initial_points)):
            totals += one(i)
    return totals / len(initial_points)


def write_metrics_csv(path, rows) -> None:
    """Rows of (metric, time, mean, std, n_runs)."""
    with open(path, "w") as fh:
        fh.write("metric,time,mean,std,n_runs\n")
        for metric, t, mean, std, n_runs in rows:
            fh.write(f"{metric},{t:.17g},{mean:.17g},{std:.17g},{int(n_runs)}\n")


def read_metrics_csv(path):
    import csv

    out = []
    with open(path) as fh:
        for rec in csv.DictReader(fh):
            out.append({"metric": rec["metric"], "time": float(rec["time"]),
                        "mean": float(rec["mean"]), "std": float(rec["std"]),
                        "n_runs": int(rec["n_runs"])})
    return out
