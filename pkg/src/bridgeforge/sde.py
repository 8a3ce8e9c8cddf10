"""Euler-Maruyama simulation of the neural SDE and its augmented form.

The augmented state carries, along with the positions, two per-sample
running integrals evaluated at the left endpoint of every step: the action
cost (the Lagrangian along the path) and the absolute HJB residual.  Both
ride on the autodiff tape whenever the supplied evaluator returns tracked
values, so loss gradients flow through the unrolled solver.

Noise is counter-based: each (trajectory id, stream tag) pair owns an
independent Philox stream, so batches can be simulated in any order, split,
or parallelized and still see bit-identical increments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import value_of

DIVERGENCE_LIMIT = 1e6

_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)


class SimulationDivergedError(RuntimeError):
    def __init__(self, step: int, t: float, worst: float):
        super().__init__(
            f"simulation diverged at step {step} (t={t:.6g}, max |y|={worst:.3g})")
        self.step = step
        self.t = t


def _fold64(parts) -> np.uint64:
    acc = _FNV_OFFSET
    with np.errstate(over="ignore"):
        for part in parts:
            if isinstance(part, str):
                data = part.encode("utf-8")
            else:
                data = int(part).to_bytes(8, "little", signed=True)
            for byte in data:
                acc = np.uint64(acc ^ np.uint64(byte))
                acc = np.uint64(acc * _FNV_PRIME)
    return acc


class NoisePlan:
    """Deterministic per-(trajectory, tag) Gaussian increments.

    ``tag`` identifies the simulation segment (interval index, epoch, ...);
    trajectory ids select independent streams within it.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def normals(self, ids, tag, n_steps: int, d: int) -> np.ndarray:
        """Standard normals of shape (n_steps, d, len(ids))."""
        ids = np.asarray(ids, dtype=np.int64)
        folded = _fold64(tuple(tag) if isinstance(tag, (tuple, list)) else (tag,))
        k0 = np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF) ^ folded
        out = np.empty((len(ids), n_steps, d))
        for j, tid in enumerate(ids):
            bitgen = np.random.Philox(key=np.array([k0, np.uint64(tid)], dtype=np.uint64))
            out[j] = np.random.Generator(bitgen).standard_normal((n_steps, d))
        return out.transpose(1, 2, 0)


@dataclass
class AugmentedBatchState:
    """Positions plus running action-cost and HJB-residual accumulators."""
    y: object                 # (d, n), possibly tracked
    re: object = None         # (1, n) running action cost
    rh: object = None         # (1, n) running absolute HJB residual
    t: float = 0.0


@dataclass
class StepEval:
    """Per-step model evaluation at the current (positions, time)."""
    drift: object             # (d, n)
    gdiag: object = None      # (d, n) or None for deterministic dynamics
    ell: object = None        # (1, n) Lagrangian values, None if untracked
    hjb: object = None        # (1, n) absolute HJB residual, None if untracked


def step_grid(t0: float, t1: float, dt: float):
    """Step sizes covering [t0, t1] with a final partial step so the right
    endpoint is hit exactly."""
    span = t1 - t0
    if span <= 0:
        raise ValueError(f"empty interval [{t0}, {t1}]")
    if dt <= 0:
        raise ValueError("dt must be positive")
    n_full = int(np.floor(span / dt + 1e-9))
    rem = span - n_full * dt
    sizes = [dt] * n_full
    if rem > 1e-9 * max(1.0, abs(span)):
        sizes.append(rem)
    return sizes


def _check_finite(y_value: np.ndarray, step: int, t: float) -> None:
    worst = float(np.max(np.abs(y_value))) if y_value.size else 0.0
    if not np.isfinite(worst) or worst > DIVERGENCE_LIMIT:
        raise SimulationDivergedError(step, t, worst)


def em_step(state: AugmentedBatchState, dt: float, evaluation: StepEval,
            dW: np.ndarray | None, step_index: int = 0) -> AugmentedBatchState:
    """One Euler-Maruyama step; accumulators use the pre-step evaluation."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    y = ad.add(state.y, ad.scale(evaluation.drift, dt))
    if evaluation.gdiag is not None and dW is not None:
        y = ad.add(y, ad.mul(evaluation.gdiag, dW))
    _check_finite(value_of(y), step_index, state.t)
    re = state.re
    if evaluation.ell is not None:
        re = ad.add(re, ad.scale(evaluation.ell, dt)) if re is not None \
            else ad.scale(evaluation.ell, dt)
    rh = state.rh
    if evaluation.hjb is not None:
        rh = ad.add(rh, ad.scale(evaluation.hjb, dt)) if rh is not None \
            else ad.scale(evaluation.hjb, dt)
    return AugmentedBatchState(y=y, re=re, rh=rh, t=state.t + dt)


def simulate_interval(step_eval, y0, t0: float, t1: float, dt: float,
                      noise: NoisePlan | None = None, tag=0, ids=None,
                      record_path: bool = False):
    """Integrate the augmented SDE over [t0, t1].

    ``step_eval(x, t)`` returns a :class:`StepEval`; positions may be tape
    Nodes.  Returns ``(y1, re_mean, rh_mean, path)`` where the means are the
    batch averages of the accumulators (scalar, tracked when the inputs
    are) and ``path`` is the list of (t, positions) visited when
    ``record_path`` is set.
    """
    d, n = value_of(y0).shape
    sizes = step_grid(t0, t1, dt)
    increments = None
    if noise is not None:
        if ids is None:
            ids = np.arange(n)
        increments = noise.normals(ids, tag, len(sizes), d)
    state = AugmentedBatchState(y=y0, re=None, rh=None, t=t0)
    path = [(t0, value_of(y0).copy())] if record_path else None
    t = t0
    for k, h in enumerate(sizes):
        evaluation = step_eval(state.y, t)
        dW = None
        if increments is not None and evaluation.gdiag is not None:
            dW = np.sqrt(h) * increments[k]
        state = em_step(state, h, evaluation, dW, step_index=k)
        t = t0 + sum(sizes[:k + 1])
        state.t = t
        if record_path:
            path.append((t, value_of(state.y).copy()))
    zero = np.zeros(())
    re_mean = ad.amean(state.re) if state.re is not None else zero
    rh_mean = ad.amean(state.rh) if state.rh is not None else zero
    return state.y, re_mean, rh_mean, path


def simulate_to_times(step_eval, y0, t0: float, times, dt: float,
                      noise: NoisePlan | None = None, tag_base=("eval",),
                      ids=None) -> list[np.ndarray]:
    """Forward marginals: clouds (d, n) recorded at each requested time.

    Times must be sorted and >= t0; a time equal to t0 echoes the initial
    cloud.
    """
    times = list(times)
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("eval times must be sorted")
    out = []
    y = y0
    t_cur = t0
    for j, t_next in enumerate(times):
        if t_next < t0 - 1e-12:
            raise ValueError(f"eval time {t_next} precedes start {t0}")
        if t_next > t_cur + 1e-12:
            y, _, _, _ = simulate_interval(
                step_eval, y, t_cur, t_next, dt, noise=noise,
                tag=tuple(tag_base) + (j,), ids=ids)
            t_cur = t_next
        out.append(value_of(y).copy())
    return out


def simulate_reverse(step_eval, corrector_eval, y1, t1: float, t0: float,
                     dt: float, noise: NoisePlan | None = None, tag=("rev",),
                     ids=None, record_path: bool = False):
    """Reverse-time simulation with a learned correction drift.

    Steps dy = (f - u)(-dt) + g dW~ downward from t1 to t0, with f, g from
    ``step_eval`` and u from ``corrector_eval`` both evaluated at the
    current (positions, time).
    """
    if t1 <= t0:
        raise ValueError("reverse simulation needs t1 > t0")
    d, n = value_of(y1).shape
    sizes = step_grid(t0, t1, dt)
    increments = None
    if noise is not None:
        if ids is None:
            ids = np.arange(n)
        increments = noise.normals(ids, tag, len(sizes), d)
    y = y1
    t = t1
    path = [(t1, value_of(y1).copy())] if record_path else None
    for k, h in enumerate(sizes):
        fwd = step_eval(y, t)
        corr = corrector_eval(y, t)
        net = ad.sub(fwd.drift, corr)
        y = ad.sub(y, ad.scale(net, h))
        if fwd.gdiag is not None and increments is not None:
            y = ad.add(y, ad.mul(fwd.gdiag, np.sqrt(h) * increments[k]))
        _check_finite(value_of(y), k, t)
        t = t1 - sum(sizes[:k + 1])
        if record_path:
            path.append((t, value_of(y).copy()))
    return (y, path) if record_path else (y, None)


def simulate_reverse_to_times(step_eval, corrector_eval, y1, t1: float, times,
                              dt: float, noise: NoisePlan | None = None,
                              tag_base=("rev",), ids=None) -> list[np.ndarray]:
    """Reverse marginals recorded at each requested time (sorted descending)."""
    times = list(times)
    if any(b > a for a, b in zip(times, times[1:])):
        raise ValueError("reverse eval times must be sorted descending")
    out = []
    y = y1
    t_cur = t1
    for j, t_next in enumerate(times):
        if t_next > t1 + 1e-12:
            raise ValueError(f"eval time {t_next} exceeds start {t1}")
        if t_next < t_cur - 1e-12:
            y, _ = simulate_reverse(step_eval, corrector_eval, y, t_cur, t_next,
                                    dt, noise=noise, tag=tuple(tag_base) + (j,),
                                    ids=ids)
            t_cur = t_next
        out.append(value_of(y).copy())
    return out


# ---------------------------------------------------------------------------
# trajectory dump (one JSON record per trajectory per recorded time)

def write_trajectories(path, times, clouds, traj_ids=None) -> None:
    """``clouds`` is a sequence of (d, n) arrays aligned with ``times``."""
    times = list(times)
    n = value_of(clouds[0]).shape[1]
    if traj_ids is None:
        traj_ids = list(range(n))
    with open(path, "w") as fh:
        for t, cloud in zip(times, clouds):
            arr = value_of(cloud)
            for j, tid in enumerate(traj_ids):
                rec = {"traj_id": int(tid), "t": float(t), "y": arr[:, j].tolist()}
                fh.write(json.dumps(rec) + "\n")


def read_trajectories(path):
    """Inverse of :func:`write_trajectories`; returns (times, clouds, ids)."""
    by_time: dict[float, dict[int, list[float]]] = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            by_time.setdefault(rec["t"], {})[rec["traj_id"]] = rec["y"]
    times = sorted(by_time)
    ids = sorted(by_time[times[0]])
    clouds = []
    for t in times:
        group = by_time[t]
        clouds.append(np.array([group[i] for i in ids]).T)
    return times, clouds, ids
