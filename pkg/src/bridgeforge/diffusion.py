"""Learned diagonal diffusion coefficient.

A two-layer network with a LipSwish hidden layer and a tanh output keeps
every diffusion entry bounded by ``scale``:

    g(x, t) = scale * tanh(W2 lipswish(W1 s + c1) + c2),   s = (x, t)

Only the diagonal matters downstream: simulation uses g elementwise on the
Wiener increments and the HJB residual uses D = 0.5 * g^2 entrywise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import value_of


@dataclass
class DiffusionParams:
    W1: object
    c1: object
    W2: object
    c2: object
    scale: float = 1.0

    @property
    def dim(self) -> int:
        return value_of(self.W2).shape[0]


def init_params(d: int, hidden: int = 16, scale: float = 1.0,
                rng: np.random.Generator | None = None) -> DiffusionParams:
    if hidden < 1:
        raise ValueError("hidden width must be >= 1")
    if scale <= 0:
        raise ValueError("scale must be positive")
    rng = rng or np.random.default_rng(0)
    din = d + 1
    return DiffusionParams(
        W1=rng.normal(0.0, din ** -0.5, size=(hidden, din)),
        c1=np.zeros((hidden, 1)),
        W2=rng.normal(0.0, hidden ** -0.5, size=(d, hidden)),
        c2=np.zeros((d, 1)),
        scale=float(scale))


def param_arrays(p: DiffusionParams, prefix: str = "g_") -> dict[str, np.ndarray]:
    return {prefix + "W1": value_of(p.W1), prefix + "c1": value_of(p.c1),
            prefix + "W2": value_of(p.W2), prefix + "c2": value_of(p.c2)}


def params_from(mapping, scale: float, prefix: str = "g_") -> DiffusionParams:
    get = mapping.__getitem__
    return DiffusionParams(W1=get(prefix + "W1"), c1=get(prefix + "c1"),
                           W2=get(prefix + "W2"), c2=get(prefix + "c2"),
                           scale=scale)


def g_diag(p: DiffusionParams, x, t):
    """Diagonal diffusion entries for a (d, n) batch; returns (d, n)."""
    xv = value_of(x)
    trow = np.full((1, xv.shape[1]), float(t))
    s = ad.concat_rows(x, trow)
    hidden = ad.lipswish(ad.add(ad.matmul(p.W1, s), p.c1))
    return ad.scale(ad.tanh(ad.add(ad.matmul(p.W2, hidden), p.c2)), p.scale)


def big_d_diag(p: DiffusionParams, x, t):
    """Entrywise 0.5 * g^2 (the diagonal of D = 0.5 g g^T)."""
    return ad.scale(ad.square(g_diag(p, x, t)), 0.5)


def g_diag_naive(p: DiffusionParams, x_col: np.ndarray, t: float) -> np.ndarray:
    """Loop-based single-sample reference used by the tests."""
    s = np.concatenate([np.asarray(x_col, dtype=float).ravel(), [float(t)]])
    W1, c1 = value_of(p.W1), value_of(p.c1).ravel()
    W2, c2 = value_of(p.W2), value_of(p.c2).ravel()
    hidden = np.empty(W1.shape[0])
    for i in range(W1.shape[0]):
        z = float(W1[i] @ s + c1[i])
        hidden[i] = z / (1.0 + np.exp(-z)) / 1.1
    out = np.empty(W2.shape[0])
    for i in range(W2.shape[0]):
        out[i] = p.scale * np.tanh(float(W2[i] @ hidden + c2[i]))
    return out
