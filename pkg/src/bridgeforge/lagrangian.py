"""Transport cost (Lagrangian) family and the induced drift/Hamiltonian maps.

The general convex-quadratic cost

    L(t, x, u) = 0.5 (u - v)^T R (u - v) + c^T (u - m) - U(x, t)

covers all presets: the Legendre transform gives the drift map
f = -2 (R + R^T)^{-1} (grad_phi + c) + v and the Hamiltonian value
H* = <-grad_phi, f> - L(t, x, f) used by the HJB residual.  Named presets
(potential-free, cellular, random-dynamical, opinion) use their closed
forms directly rather than re-deriving them from coefficients.

Also here: the data-driven ingredients of the cellular preset (Gaussian
mixture log-density with BIC model selection, k-NN reference velocity
field) and the mean-field polarization drift for opinion dynamics.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import value_of

PRESETS = ("potential_free", "cellular", "random_dynamical", "general", "opinion")

LOGP_CLIP = -50.0  # floor on GMM log-density; keeps far-field costs finite


class ConfigurationError(ValueError):
    pass


def _check_spd(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise ConfigurationError(f"R must be square, got {R.shape}")
    if not np.allclose(R, R.T, atol=1e-12):
        raise ConfigurationError("R must be symmetric")
    if np.linalg.eigvalsh(R).min() <= 0:
        raise ConfigurationError("R must be positive definite")
    return R


@dataclass
class LagrangianSpec:
    """One member of the cost family.

    ``v_field`` and ``m_field`` map a (d, n) batch and a time to (d, n)
    arrays; ``u_field`` maps (batch, t) to ``(values (1, n), grad (d, n))``.
    Fields default to zero.  Specs are immutable in spirit: construct a new
    one rather than mutating.
    """

    preset: str
    R: np.ndarray | None = None
    c: np.ndarray | None = None
    v_field: object = None
    m_field: object = None
    u_field: object = None
    _minv: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {self.preset!r}")
        if self.R is not None:
            self.R = _check_spd(self.R)
            self._minv = 2.0 * np.linalg.inv(self.R + self.R.T)
        if self.c is not None:
            self.c = np.asarray(self.c, dtype=np.float64).reshape(-1, 1)

    # --- field evaluation (tape-aware in x) -------------------------------
    def _v(self, x, t):
        if self.v_field is None:
            return None
        return ad.vector_field(x, lambda xv: self.v_field(xv, t))

    def _m_const(self, x, t):
        if self.m_field is None:
            return None
        return self.m_field(value_of(x), t)

    def _u_pot(self, x, t):
        if self.u_field is None:
            return None
        return ad.scalar_field(x, lambda xv: self.u_field(xv, t))


def potential_free() -> LagrangianSpec:
    return LagrangianSpec("potential_free")


def cellular(v_field=None, u_field=None) -> LagrangianSpec:
    return LagrangianSpec("cellular", v_field=v_field, u_field=u_field)


def random_dynamical(R, u_field=None) -> LagrangianSpec:
    return LagrangianSpec("random_dynamical", R=R, u_field=u_field)


def general(R, c=None, v_field=None, m_field=None, u_field=None) -> LagrangianSpec:
    return LagrangianSpec("general", R=R, c=c, v_field=v_field,
                          m_field=m_field, u_field=u_field)


def opinion(polarize_field, u_field=None) -> LagrangianSpec:
    """Opinion-dynamics cost 0.5 ||f_pol + u||^2 - U; ``polarize_field``
    maps (X (d, n), t) to the polarization drift (d, n)."""
    return LagrangianSpec("opinion", v_field=polarize_field, u_field=u_field)


def _colsum(x):
    return ad.asum(x, axis=0, keepdims=True)


def cost(spec: LagrangianSpec, t, x, u):
    """L(t, x, u) per sample: (d, n) batches in, (1, n) out."""
    du = value_of(u).shape[0]
    dx = value_of(x).shape[0]
    if du != dx:
        raise ConfigurationError(f"velocity dim {du} != position dim {dx}")
    preset = spec.preset
    if preset == "potential_free":
        quad = ad.scale(_colsum(ad.square(u)), 0.5)
    elif preset == "cellular":
        energy = ad.scale(_colsum(ad.square(u)), 0.5)
        v = spec._v(x, t)
        dev = u if v is None else ad.sub(u, v)
        quad = ad.add(energy, ad.scale(_colsum(ad.square(dev)), 0.5))
    elif preset == "random_dynamical":
        quad = ad.scale(_colsum(ad.mul(u, ad.matmul(spec.R, u))), 0.5)
    elif preset == "opinion":
        fp = spec._v(x, t)
        dev = u if fp is None else ad.add(u, fp)
        quad = ad.scale(_colsum(ad.square(dev)), 0.5)
    else:  # general
        v = spec._v(x, t)
        dev = u if v is None else ad.sub(u, v)
        quad = ad.scale(_colsum(ad.mul(dev, ad.matmul(spec.R, dev))), 0.5)
        if spec.c is not None:
            m = spec._m_const(x, t)
            um = u if m is None else ad.sub(u, m)
            quad = ad.add(quad, _colsum(ad.mul(spec.c, um)))
    pot = spec._u_pot(x, t)
    if pot is not None:
        quad = ad.sub(quad, pot)
    return quad


def drift_from_potential(spec: LagrangianSpec, t, x, grad_phi):
    """f = grad_z H(t, x, -grad_phi): the drift induced by the potential."""
    preset = spec.preset
    if preset == "potential_free":
        return ad.neg(grad_phi)
    if preset == "cellular":
        v = spec._v(x, t)
        inner = ad.neg(grad_phi) if v is None else ad.sub(v, grad_phi)
        return ad.scale(inner, 0.5)
    if preset == "random_dynamical":
        return ad.neg(ad.matmul(spec._minv, grad_phi))
    if preset == "opinion":
        fp = spec._v(x, t)
        base = ad.neg(grad_phi)
        return base if fp is None else ad.sub(base, fp)
    # general
    arg = grad_phi if spec.c is None else ad.add(grad_phi, spec.c)
    out = ad.neg(ad.matmul(spec._minv, arg))
    v = spec._v(x, t)
    return out if v is None else ad.add(out, v)


def hamiltonian_star(spec: LagrangianSpec, t, x, grad_phi):
    """H evaluated at momentum -grad_phi: <-grad_phi, f> - L(t, x, f)."""
    f = drift_from_potential(spec, t, x, grad_phi)
    pairing = _colsum(ad.mul(ad.neg(grad_phi), f))
    return ad.sub(pairing, cost(spec, t, x, f))


def as_general(spec: LagrangianSpec, d: int) -> LagrangianSpec:
    """Rewrite a preset as explicit general-form coefficients (used to check
    preset consistency; the cellular double-quadratic folds into R = 2I with
    a half-weighted reference velocity)."""
    eye = np.eye(d)
    if spec.preset == "potential_free":
        return general(eye)
    if spec.preset == "cellular":
        vf = spec.v_field

        def half_v(xv, t):
            return 0.5 * vf(xv, t) if vf is not None else np.zeros_like(xv)

        # 0.5||u||^2 + 0.5||u - v||^2 = (u - v/2)^T I (u - v/2) + ||v||^2/4
        # the constant offset does not affect drift; fold it into U.
        uf = spec.u_field

        def u_shift(xv, t):
            vals = np.zeros((1, xv.shape[1]))
            grad = np.zeros_like(xv)
            if uf is not None:
                vals, grad = uf(xv, t)
            if vf is not None:
                v = vf(xv, t)
                vals = vals - 0.25 * np.sum(v * v, axis=0, keepdims=True)
            return vals, grad

        return general(2.0 * eye, v_field=half_v if vf is not None else None,
                       u_field=u_shift)
    if spec.preset == "random_dynamical":
        return general(spec.R, u_field=spec.u_field)
    if spec.preset == "opinion":
        vf = spec.v_field

        def neg_v(xv, t):
            return -vf(xv, t)

        return general(eye, v_field=neg_v if vf is not None else None,
                       u_field=spec.u_field)
    return spec


# ---------------------------------------------------------------------------
# Gaussian-mixture log-density potential

def gmm_fit(data_a: np.ndarray, data_b: np.ndarray, max_components: int = 10,
            seed: int = 0):
    """EM fit on the union of two snapshots; component count minimizes BIC.

    Returns ``(weights, means, covariances, n_components)``.
    """
    from sklearn.mixture import GaussianMixture

    data = np.vstack([np.atleast_2d(data_a), np.atleast_2d(data_b)])
    n, d = data.shape
    if n < 2 * d:
        raise ConfigurationError(f"need at least {2 * d} samples to fit a GMM, got {n}")
    best = None
    best_bic = np.inf
    for k in range(1, min(max_components, n) + 1):
        gm = GaussianMixture(n_components=k, covariance_type="full",
                             max_iter=200, tol=1e-6, reg_covar=1e-6,
                             init_params="k-means++", n_init=1,
                             random_state=seed)
        gm.fit(data)
        bic = gm.bic(data)
        if bic < best_bic:
            best_bic = bic
            best = gm
    for cov in best.covariances_:
        if np.linalg.eigvalsh(cov).min() <= 2e-6:
            warnings.warn("near-singular mixture covariance repaired with 1e-6 ridge")
            break
    return best.weights_.copy(), best.means_.copy(), best.covariances_.copy(), best.n_components


@dataclass
class GmmDensity:
    """Piecewise-in-time mixture density with U(x, t) = c_dens * log p(x; theta_t),
    log p floored at LOGP_CLIP."""

    grid: np.ndarray
    mixtures: list            # per interval: dict with weights/means/covs
    c_dens: float = 10.0

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self._prep = []
        for mix in self.mixtures:
            w = np.asarray(mix["weights"], dtype=np.float64)
            means = np.asarray(mix["means"], dtype=np.float64)
            covs = np.asarray(mix["covs"], dtype=np.float64)
            chols = np.linalg.cholesky(covs)
            logdets = 2.0 * np.sum(np.log(np.diagonal(chols, axis1=1, axis2=2)), axis=1)
            self._prep.append((np.log(w), means, covs, chols, logdets))

    def interval_index(self, t: float) -> int:
        idx = int(np.searchsorted(self.grid, t, side="right") - 1)
        return min(max(idx, 0), len(self.mixtures) - 1)

    def log_density(self, x: np.ndarray, t: float) -> np.ndarray:
        """log p(x; theta_t) for a (d, n) batch -> (1, n)."""
        logw, means, covs, chols, logdets = self._prep[self.interval_index(t)]
        d, n = x.shape
        comps = np.empty((len(logw), n))
        for k in range(len(logw)):
            diff = x - means[k][:, None]
            y = np.linalg.solve(chols[k], diff)
            comps[k] = logw[k] - 0.5 * d * np.log(2 * np.pi) - 0.5 * logdets[k] \
                - 0.5 * np.sum(y * y, axis=0)
        top = comps.max(axis=0, keepdims=True)
        return (top + np.log(np.exp(comps - top).sum(axis=0, keepdims=True)))

    def log_density_grad(self, x: np.ndarray, t: float):
        """(log p, grad log p) for a (d, n) batch."""
        logw, means, covs, chols, logdets = self._prep[self.interval_index(t)]
        d, n = x.shape
        K = len(logw)
        comps = np.empty((K, n))
        pulls = np.empty((K, d, n))
        for k in range(K):
            diff = x - means[k][:, None]
            y = np.linalg.solve(chols[k], diff)
            comps[k] = logw[k] - 0.5 * d * np.log(2 * np.pi) - 0.5 * logdets[k] \
                - 0.5 * np.sum(y * y, axis=0)
            pulls[k] = -np.linalg.solve(chols[k].T, y)   # -Sigma^{-1} (x - mu)
        top = comps.max(axis=0, keepdims=True)
        weights = np.exp(comps - top)
        total = weights.sum(axis=0, keepdims=True)
        logp = top + np.log(total)
        gamma = weights / total
        grad = np.einsum("kn,kdn->dn", gamma, pulls)
        return logp, grad

    def field(self):
        """U-field closure: (X, t) -> (values (1, n), grad (d, n))."""

        def u_field(xv: np.ndarray, t: float):
            logp, grad = self.log_density_grad(xv, t)
            clipped = logp <= LOGP_CLIP
            vals = self.c_dens * np.maximum(logp, LOGP_CLIP)
            grad = self.c_dens * np.where(clipped, 0.0, grad)
            return vals, grad

        return u_field

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.tolist(),
            "c_dens": self.c_dens,
            "mixtures": [
                {"weights": np.asarray(m["weights"]).tolist(),
                 "means": np.asarray(m["means"]).tolist(),
                 "covs": np.asarray(m["covs"]).tolist()}
                for m in self.mixtures
            ],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "GmmDensity":
        return cls(grid=np.asarray(payload["grid"]),
                   mixtures=payload["mixtures"],
                   c_dens=float(payload["c_dens"]))

    @classmethod
    def fit(cls, snapshots: list[np.ndarray], grid, max_components: int = 10,
            seed: int = 0, c_dens: float = 10.0) -> "GmmDensity":
        """Fit one mixture per interval on consecutive snapshot pairs."""
        mixtures = []
        for k in range(len(snapshots) - 1):
            w, means, covs, _ = gmm_fit(snapshots[k], snapshots[k + 1],
                                        max_components=max_components, seed=seed)
            mixtures.append({"weights": w, "means": means, "covs": covs})
        return cls(grid=np.asarray(grid, dtype=float), mixtures=mixtures,
                   c_dens=c_dens)


# ---------------------------------------------------------------------------
# reference velocity field (k-NN interpolation over a (position, velocity) table)

@dataclass
class VelocityField:
    points: np.ndarray     # (n, d)
    velocities: np.ndarray  # (n, d)
    k: int = 5

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.velocities = np.atleast_2d(np.asarray(self.velocities, dtype=np.float64))
        if self.points.shape != self.velocities.shape:
            raise ConfigurationError("velocity table: position/velocity shapes differ")
        self._tree = cKDTree(self.points)

    def __call__(self, x: np.ndarray, t: float = 0.0) -> np.ndarray:
        """(d, n) query -> (d, n) mean velocity of the k nearest table rows."""
        k = min(self.k, len(self.points))
        _, idx = self._tree.query(x.T, k=k)
        idx = np.atleast_2d(idx)
        if idx.ndim == 1:
            idx = idx[:, None]
        return self.velocities[idx].mean(axis=1).T

    @classmethod
    def from_csv(cls, path, k: int = 5) -> "VelocityField":
        raw = np.loadtxt(path, delimiter=",", ndmin=2)
        if raw.shape[1] % 2 != 0:
            raise ConfigurationError(
                f"velocity table must have 2*d columns, got {raw.shape[1]}")
        d = raw.shape[1] // 2
        return cls(points=raw[:, :d], velocities=raw[:, d:], k=k)


# ---------------------------------------------------------------------------
# opinion-dynamics polarization drift

def _half_normalize(v: np.ndarray, axis: int) -> np.ndarray:
    """v / ||v||^(1/2) along ``axis`` with 0 preserved."""
    norm = np.sqrt(np.sum(v * v, axis=axis, keepdims=True))
    root = np.sqrt(norm)
    out = np.divide(v, root, out=np.zeros_like(v), where=root > 0)
    return out


def polarize_drift(batch: np.ndarray, xi: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Mean-field polarization drift of the party model.

    ``batch`` is the (n, d) population, ``xi`` the (d,) random information
    vector, ``x`` either a single (d,) opinion or a (d, m) batch of query
    points.  Agreement is +1 when <x, xi> and <y, xi> share a sign (the sign
    of 0 counts as +), else -1.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    xi = np.asarray(xi, dtype=np.float64).ravel()
    single = np.asarray(x).ndim == 1
    X = np.asarray(x, dtype=np.float64).reshape(-1, 1) if single else np.asarray(x, dtype=np.float64)

    ybar = _half_normalize(batch, axis=1)                     # (n, d)
    sign_y = np.where(batch @ xi >= 0, 1.0, -1.0)             # (n,)
    sign_x = np.where(X.T @ xi >= 0, 1.0, -1.0)               # (m,)
    agree = sign_y[:, None] * sign_x[None, :]                 # (n, m)
    f = (ybar.T @ agree) / len(batch)                         # (d, m)
    out = _half_normalize(f, axis=0)
    return out[:, 0] if single else out


def polarize_field(batch: np.ndarray, xi: np.ndarray):
    """Freeze the population snapshot into a (X, t) -> (d, n) drift field."""
    batch = np.array(batch, dtype=np.float64)
    xi = np.array(xi, dtype=np.float64)

    def field(xv: np.ndarray, t: float = 0.0) -> np.ndarray:
        return polarize_drift(batch, xi, xv)

    return field
