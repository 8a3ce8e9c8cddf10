"""Training loop for the regularized neural SDE.

Each optimizer step walks the snapshot intervals: simulate the augmented SDE
from the ground-truth minibatch at t_k to t_{k+1} on the autodiff tape, add
the Sinkhorn divergence to the t_{k+1} minibatch plus the interval-weighted
action-cost and HJB regularizers, and accumulate gradients; one Adam update
follows per step.  Early stopping monitors the mean one-interval-ahead
EMD-L2 on the validation split and the best checkpoint is kept.

The reverse-time corrector is trained afterwards with the forward weights
frozen: each snapshot interval is simulated backwards from the data at its
later endpoint and only the correction drift's parameters receive gradients
from the Sinkhorn fit at the earlier endpoint; validation scores the full
backward rollout from the final snapshot.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import diffusion, lagrangian, potential, sde
from .autodiff import ParamStore, value_of
from .datasets import SnapshotDataset
from .ot import SinkhornConfig, mdd, sinkhorn_divergence

VERSION = "0.1.0"


class TrainingAbortedError(RuntimeError):
    """Raised after repeated consecutive simulation divergences."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    grid: tuple = (0.0, 1.0, 2.0, 3.0, 4.0)
    lambda_e: tuple = (0.3, 0.1, 0.01, 0.01)
    lambda_h: tuple = (0.2, 0.01, 0.0001, 0.0001)
    batch_size: int = 512
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    dt: float = 0.01
    max_epochs: int = 100
    patience: int = 20
    seed: int = 0
    hjb_sign: float = 1.0      # +1 subtracts H* in the residual; -1 adds it
    preset: str = "potential_free"
    lagrangian_options: dict = field(default_factory=dict)
    pot_width: int = 2
    pot_depth: int = 2
    pot_step: float = 1.0
    pot_rank: int = 10
    diff_hidden: int = 16
    diff_scale: float = 1.0
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)

    def __post_init__(self):
        grid = tuple(float(t) for t in self.grid)
        if len(grid) < 2 or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError("time grid must be strictly increasing with K >= 2")
        self.grid = grid
        n_int = len(grid) - 1
        self.lambda_e = _expand_lambda(self.lambda_e, n_int, "lambda_e")
        self.lambda_h = _expand_lambda(self.lambda_h, n_int, "lambda_h")
        if self.hjb_sign not in (1.0, -1.0, 1, -1):
            raise ConfigError("hjb_sign must be +1 or -1")
        if isinstance(self.sinkhorn, dict):
            self.sinkhorn = SinkhornConfig(**self.sinkhorn)
        if self.preset not in lagrangian.PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.dt <= 0 or self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("dt, lr and batch_size must be positive")
        if self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("max_epochs must be >= 0 and patience >= 1")

    def to_dict(self) -> dict:
        out = asdict(self)
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        payload = dict(payload)
        for key in ("grid", "lambda_e", "lambda_h"):
            value = payload.get(key)
            if value is not None and not np.isscalar(value):
                payload[key] = tuple(value)
        return cls(**payload)


def _expand_lambda(values, n_int: int, name: str) -> tuple:
    if np.isscalar(values):
        values = (float(values),) * n_int
    values = tuple(float(v) for v in values)
    if len(values) != n_int:
        raise ConfigError(f"{name} needs one weight per interval ({n_int}), got {len(values)}")
    if any(v < 0 for v in values):
        raise ConfigError(f"{name} must be non-negative")
    return values


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: dict
    v: dict
    step_count: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(v) for k, v in params.items()},
                   v={k: np.zeros_like(v) for k, v in params.items()})


def adam_update(state: AdamState, store: ParamStore, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam step over every parameter in the store."""
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, node in store.items():
        g = node.grad
        if g is None:
            g = np.zeros_like(node.value)
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        mhat = state.m[name] / c1
        vhat = state.v[name] / c2
        node.value = node.value - lr * mhat / (np.sqrt(vhat) + eps)


# ---------------------------------------------------------------------------
# model assembly

def init_param_store(d: int, config: TrainConfig) -> ParamStore:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 17]))
    pot = potential.init_params(d, m=config.pot_width, depth=config.pot_depth,
                                h=config.pot_step, rank=config.pot_rank, rng=rng)
    dif = diffusion.init_params(d, hidden=config.diff_hidden,
                                scale=config.diff_scale, rng=rng)
    store = ParamStore(potential.param_arrays(pot))
    for name, arr in diffusion.param_arrays(dif).items():
        store.add(name, arr)
    return store


def potential_view(params, config: TrainConfig, prefix: str = "") -> potential.PotentialParams:
    return potential.params_from(params, h=config.pot_step,
                                 depth=config.pot_depth, prefix=prefix)


def diffusion_view(params, config: TrainConfig) -> diffusion.DiffusionParams:
    return diffusion.params_from(params, scale=config.diff_scale)


def make_step_eval(pot_params, diff_params, spec, lam_e: float, lam_h: float,
                   hjb_sign: float = 1.0, track_cost: bool = False):
    """Fused per-step evaluator: drift, diffusion and (when weighted) the
    Lagrangian value and absolute HJB residual."""
    want_ell = track_cost or lam_e > 0 or lam_h > 0
    want_hess = lam_h > 0

    def step_eval(x, t):
        ev = potential.evaluate(pot_params, x, t, need_hess=want_hess)
        f = lagrangian.drift_from_potential(spec, t, x, ev.grad_x)
        g = diffusion.g_diag(diff_params, x, t)
        ell = lagrangian.cost(spec, t, x, f) if want_ell else None
        hjb = None
        if want_hess:
            pairing = ad.asum(ad.mul(ad.neg(ev.grad_x), f), axis=0, keepdims=True)
            hstar = ad.sub(pairing, ell)
            dterm = ad.asum(ad.mul(ad.scale(ad.square(g), 0.5), ev.hessdiag_x),
                            axis=0, keepdims=True)
            resid = ad.sub(ad.add(ev.dphi_dt, dterm), ad.scale(hstar, hjb_sign))
            hjb = ad.absval(resid)
        return sde.StepEval(drift=f, gdiag=g,
                            ell=ell if (lam_e > 0 or track_cost) else None,
                            hjb=hjb)

    return step_eval


def make_dynamics_eval(pot_params, diff_params, spec):
    """Evaluator without regularizer tracking (plain simulation)."""

    def step_eval(x, t):
        ev = potential.evaluate(pot_params, x, t)
        f = lagrangian.drift_from_potential(spec, t, x, ev.grad_x)
        return sde.StepEval(drift=f, gdiag=diffusion.g_diag(diff_params, x, t))

    return step_eval


def make_corrector_eval(corr_params):
    """Correction drift u = -grad_x Phi of the corrector network."""

    def corr_eval(x, t):
        return ad.neg(potential.evaluate(corr_params, x, t).grad_x)

    return corr_eval


def build_spec(config: TrainConfig, d: int, dataset: SnapshotDataset | None = None,
               gmm: lagrangian.GmmDensity | None = None, u_field=None):
    """Assemble the Lagrangian from config options (fitting the mixture
    density from the training split when the cellular preset asks for it)."""
    opts = dict(config.lagrangian_options)
    preset = config.preset
    v_field = None
    if opts.get("velocity_csv"):
        v_field = lagrangian.VelocityField.from_csv(opts["velocity_csv"])
    if u_field is None and opts.get("scenario"):
        from .datasets import SCENARIO_POTENTIALS
        u_field = SCENARIO_POTENTIALS.get(opts["scenario"])
    if preset == "potential_free":
        return lagrangian.potential_free(), gmm
    if preset == "cellular":
        if gmm is None and opts.get("density", False):
            if dataset is None:
                raise ConfigError("cellular density term needs a dataset or stored mixture")
            gmm = lagrangian.GmmDensity.fit(
                dataset.by_split("train"), dataset.grid,
                max_components=int(opts.get("gmm_max_components", 10)),
                seed=config.seed, c_dens=float(opts.get("c_dens", 10.0)))
        uf = gmm.field() if gmm is not None else u_field
        return lagrangian.cellular(v_field=v_field, u_field=uf), gmm
    if preset == "random_dynamical":
        R = np.asarray(opts.get("R"), dtype=float) if opts.get("R") is not None else None
        if R is None:
            raise ConfigError("random_dynamical preset requires R")
        return lagrangian.random_dynamical(R, u_field=u_field), gmm
    if preset == "opinion":
        if dataset is None and "xi" not in opts:
            raise ConfigError("opinion preset requires xi and a reference population")
        xi = np.asarray(opts.get("xi", [1.0, 0.0]), dtype=float)
        ref = dataset.group(0, "train") if dataset is not None else np.zeros((1, d))
        pol = lagrangian.polarize_field(ref, xi)
        return lagrangian.opinion(pol, u_field=u_field), gmm
    R = np.asarray(opts.get("R", np.eye(d)), dtype=float)
    c = np.asarray(opts["c"], dtype=float) if opts.get("c") is not None else None
    return lagrangian.general(R, c=c, v_field=v_field, u_field=u_field), gmm


# ---------------------------------------------------------------------------
# loss

def loss_step(store: ParamStore, config: TrainConfig, spec, batches,
              noise: sde.NoisePlan, tag_prefix=()):
    """One pass of Algorithm-style interval losses with gradient accumulation.

    ``batches`` holds one (n, d) minibatch per grid time.  Returns the total
    loss and a per-interval breakdown; leaf gradients are accumulated into
    ``store`` (call ``store.zero_grads`` before an optimizer step).
    """
    grid = config.grid
    pot_params = potential_view(store, config)
    diff_params = diffusion_view(store, config)
    total = 0.0
    breakdown = []
    for k in range(len(grid) - 1):
        lam_e = config.lambda_e[k]
        lam_h = config.lambda_h[k]
        step_eval = make_step_eval(pot_params, diff_params, spec, lam_e, lam_h,
                                   hjb_sign=config.hjb_sign)
        y0 = np.ascontiguousarray(batches[k].T)
        y1, re_mean, rh_mean, _ = sde.simulate_interval(
            step_eval, y0, grid[k], grid[k + 1], config.dt,
            noise=noise, tag=tuple(tag_prefix) + (k,), ids=np.arange(y0.shape[1]))
        res = sinkhorn_divergence(ad.transpose(y1), batches[k + 1], config.sinkhorn)
        loss_k = res.value
        if lam_e > 0:
            loss_k = ad.add(loss_k, ad.scale(re_mean, lam_e))
        if lam_h > 0:
            loss_k = ad.add(loss_k, ad.scale(rh_mean, lam_h))
        if isinstance(loss_k, ad.Node):
            ad.backward(loss_k)
        entry = {
            "interval": k,
            "sinkhorn": float(value_of(res.value)),
            "re": float(value_of(re_mean)),
            "rh": float(value_of(rh_mean)),
            "loss": float(value_of(loss_k)),
        }
        breakdown.append(entry)
        total += entry["loss"]
    return total, breakdown


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    config: TrainConfig
    potential: dict
    diffusion: dict
    corrector: dict | None = None
    gmm: dict | None = None
    val_metric: float = float("nan")
    version: str = VERSION

    @property
    def dim(self) -> int:
        return self.potential["K0"].shape[1] - 1

    def store(self) -> ParamStore:
        store = ParamStore(self.potential)
        for name, arr in self.diffusion.items():
            store.add(name, arr)
        return store

    def potential_params(self) -> potential.PotentialParams:
        return potential_view(self.potential, self.config)

    def diffusion_params(self) -> diffusion.DiffusionParams:
        return diffusion_view(self.diffusion, self.config)

    def corrector_params(self) -> potential.PotentialParams | None:
        if self.corrector is None:
            return None
        return potential_view(self.corrector, self.config)

    def gmm_density(self) -> lagrangian.GmmDensity | None:
        return lagrangian.GmmDensity.from_dict(self.gmm) if self.gmm else None

    def save(self, path) -> None:
        payload = {
            "version": self.version,
            "config": self.config.to_dict(),
            "val_metric": self.val_metric,
            "potential": {k: v.tolist() for k, v in self.potential.items()},
            "diffusion": {k: v.tolist() for k, v in self.diffusion.items()},
            "corrector": ({k: v.tolist() for k, v in self.corrector.items()}
                          if self.corrector else None),
            "gmm": self.gmm,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path) as fh:
            payload = json.load(fh)
        return cls(
            config=TrainConfig.from_dict(payload["config"]),
            potential={k: np.asarray(v) for k, v in payload["potential"].items()},
            diffusion={k: np.asarray(v) for k, v in payload["diffusion"].items()},
            corrector=({k: np.asarray(v) for k, v in payload["corrector"].items()}
                       if payload.get("corrector") else None),
            gmm=payload.get("gmm"),
            val_metric=payload.get("val_metric", float("nan")),
            version=payload.get("version", "unknown"),
        )


def _split_store(store: ParamStore):
    values = store.values_dict()
    pot = {k: v for k, v in values.items() if not k.startswith("g_")}
    dif = {k: v for k, v in values.items() if k.startswith("g_")}
    return pot, dif


# ---------------------------------------------------------------------------
# training drivers

def _minibatch_plan(rng, group_sizes, batch_size):
    """Index blocks per time point: without replacement within an epoch,
    topped up with replacement when a group is smaller than the batch."""
    n_steps = max(1, min(group_sizes) // batch_size)
    perms = [rng.permutation(n) for n in group_sizes]
    plans = []
    for step in range(n_steps):
        block = []
        for perm, n in zip(perms, group_sizes):
            lo = step * batch_size
            if lo + batch_size <= n:
                idx = perm[lo:lo + batch_size]
            else:
                extra = rng.integers(0, n, size=lo + batch_size - n)
                idx = np.concatenate([perm[lo:], extra])
            block.append(idx)
        plans.append(block)
    return plans


def validation_metric(store_values: dict, config: TrainConfig, spec,
                      val_groups, noise: sde.NoisePlan) -> float:
    """Mean one-interval-ahead EMD-L2 over non-initial observation times.

    A diverging validation rollout scores infinity instead of aborting: the
    checkpoint simply cannot become the best one."""
    pot_params = potential_view(store_values, config)
    diff_params = diffusion_view(store_values, config)
    dyn = make_dynamics_eval(pot_params, diff_params, spec)
    grid = config.grid
    scores = []
    for k in range(len(grid) - 1):
        y0 = np.ascontiguousarray(val_groups[k].T)
        try:
            y1, _, _, _ = sde.simulate_interval(
                dyn, y0, grid[k], grid[k + 1], config.dt, noise=noise,
                tag=("val", k), ids=np.arange(y0.shape[1]))
        except sde.SimulationDivergedError:
            return float("inf")
        scores.append(mdd(val_groups[k + 1], value_of(y1).T))
    return float(np.mean(scores))


def train(dataset: SnapshotDataset, config: TrainConfig, spec=None,
          log_path=None, quiet: bool = True) -> tuple[Checkpoint, list]:
    """Fit drift and diffusion; returns the best-validation checkpoint and
    the per-epoch history rows."""
    grid = np.asarray(config.grid, dtype=float)
    if len(grid) != len(dataset.grid) or not np.allclose(grid, dataset.grid):
        raise ConfigError(
            f"config grid {list(grid)} does not match dataset grid {list(dataset.grid)}")
    train_groups = dataset.by_split("train")
    val_groups = dataset.by_split("val")
    for k, g in enumerate(train_groups):
        if len(g) == 0:
            raise ConfigError(f"empty training snapshot at t={grid[k]:g}")
    if any(len(g) == 0 for g in val_groups):
        val_groups = train_groups

    d = dataset.dim
    gmm = None
    if spec is None:
        spec, gmm = build_spec(config, d, dataset=dataset)
    store = init_param_store(d, config)
    adam = AdamState.for_params(store.values_dict())
    noise = sde.NoisePlan(config.seed)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 29]))

    val0 = validation_metric(store.values_dict(), config, spec, val_groups, noise)
    best_val = val0
    best_values = store.values_dict()
    history = []
    consecutive_failures = 0
    since_best = 0

    for epoch in range(config.max_epochs):
        t0 = time.time()
        plans = _minibatch_plan(rng, [len(g) for g in train_groups], config.batch_size)
        ep_total, ep_skh, ep_re, ep_rh = 0.0, 0.0, 0.0, 0.0
        n_done = 0
        for step, plan in enumerate(plans):
            batches = [g[idx] for g, idx in zip(train_groups, plan)]
            store.zero_grads()
            try:
                total, brk = loss_step(store, config, spec, batches, noise,
                                       tag_prefix=(epoch, step))
            except sde.SimulationDivergedError as exc:
                consecutive_failures += 1
                warnings.warn(f"epoch {epoch} step {step}: {exc}; step skipped")
                if consecutive_failures >= 5:
                    raise TrainingAbortedError(
                        "five consecutive simulation divergences",
                        {"epoch": epoch, "step": step, "error": str(exc)})
                continue
            consecutive_failures = 0
            adam_update(adam, store, config.lr, config.beta1, config.beta2,
                        config.eps_adam)
            ep_total += total
            ep_skh += sum(b["sinkhorn"] for b in brk)
            ep_re += sum(b["re"] for b in brk)
            ep_rh += sum(b["rh"] for b in brk)
            n_done += 1
        values = store.values_dict()
        val = validation_metric(values, config, spec, val_groups, noise)
        row = {
            "epoch": epoch,
            "total_loss": ep_total / max(n_done, 1),
            "sinkhorn": ep_skh / max(n_done, 1),
            "re": ep_re / max(n_done, 1),
            "rh": ep_rh / max(n_done, 1),
            "val_metric": val,
            "seconds": time.time() - t0,
        }
        history.append(row)
        if not quiet:
            print(f"epoch {epoch:4d} loss {row['total_loss']:.4f} val {val:.4f}"
                  f" ({row['seconds']:.1f}s)")
        if val < best_val:
            best_val = val
            best_values = values
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    if config.max_epochs == 0:
        history.append({"epoch": -1, "total_loss": float("nan"), "sinkhorn": float("nan"),
                        "re": float("nan"), "rh": float("nan"), "val_metric": val0,
                        "seconds": 0.0})

    pot_values = {k: v for k, v in best_values.items() if not k.startswith("g_")}
    dif_values = {k: v for k, v in best_values.items() if k.startswith("g_")}
    ckpt = Checkpoint(config=config, potential=pot_values, diffusion=dif_values,
                      gmm=gmm.to_dict() if gmm is not None else None,
                      val_metric=float(best_val))
    if log_path:
        write_training_log(log_path, history)
    return ckpt, history


def write_training_log(path, history) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,total_loss,sinkhorn,re,rh,val_metric,seconds\n")
        for row in history:
            fh.write(f"{row['epoch']},{row['total_loss']:.10g},{row['sinkhorn']:.10g},"
                     f"{row['re']:.10g},{row['rh']:.10g},{row['val_metric']:.10g},"
                     f"{row['seconds']:.3f}\n")


def reverse_loss_step(corr_store: ParamStore, ckpt: Checkpoint, spec,
                      batches, noise: sde.NoisePlan, tag_prefix=()):
    """Sinkhorn losses at every non-terminal observation time under reverse
    simulation; only corrector parameters are tracked.

    Mirroring the forward algorithm, each interval restarts from the
    ground-truth snapshot at its later endpoint: gradients stay well
    conditioned instead of threading the whole multi-interval rollout
    (training the chained rollout directly stalls at this scale; the
    all-step behaviour is still what validation and evaluation measure).
    """
    config = ckpt.config
    grid = config.grid
    fwd = make_dynamics_eval(ckpt.potential_params(), ckpt.diffusion_params(), spec)
    corr_params = potential_view(corr_store, config)
    corr = make_corrector_eval(corr_params)
    total = 0.0
    breakdown = []
    for k in range(len(grid) - 2, -1, -1):
        y0 = np.ascontiguousarray(batches[k + 1].T)
        y, _ = sde.simulate_reverse(
            fwd, corr, y0, grid[k + 1], grid[k], config.dt, noise=noise,
            tag=tuple(tag_prefix) + (k,), ids=np.arange(y0.shape[1]))
        res = sinkhorn_divergence(ad.transpose(y), batches[k], config.sinkhorn)
        if isinstance(res.value, ad.Node):
            ad.backward(res.value)
        breakdown.append({"time_index": k, "sinkhorn": float(value_of(res.value))})
        total += float(value_of(res.value))
    return total, breakdown


def reverse_validation_metric(corr_values, ckpt: Checkpoint, spec, val_groups,
                              noise: sde.NoisePlan) -> float:
    config = ckpt.config
    grid = config.grid
    fwd = make_dynamics_eval(ckpt.potential_params(), ckpt.diffusion_params(), spec)
    corr = make_corrector_eval(potential_view(corr_values, config))
    y = np.ascontiguousarray(val_groups[-1].T)
    scores = []
    for k in range(len(grid) - 2, -1, -1):
        y, _ = sde.simulate_reverse(fwd, corr, y, grid[k + 1], grid[k], config.dt,
                                    noise=noise, tag=("rval", k),
                                    ids=np.arange(value_of(y).shape[1]))
        scores.append(mdd(val_groups[k], value_of(y).T))
    return float(np.mean(scores))


def train_reverse_corrector(ckpt: Checkpoint, dataset: SnapshotDataset,
                            max_epochs: int | None = None, lr: float | None = None,
                            log_path=None, quiet: bool = True) -> tuple[Checkpoint, list]:
    """Fit the reverse-time correction drift against the frozen forward model.

    ``lr`` overrides the forward run's learning rate; the correction starts
    from a fresh neutral network and usually tolerates a larger step."""
    config = ckpt.config
    lr = config.lr if lr is None else float(lr)
    grid = np.asarray(config.grid, dtype=float)
    if len(grid) != len(dataset.grid) or not np.allclose(grid, dataset.grid):
        raise ConfigError("checkpoint grid does not match dataset grid")
    spec, _ = build_spec(config, dataset.dim, dataset=dataset,
                         gmm=ckpt.gmm_density())
    train_groups = dataset.by_split("train")
    val_groups = dataset.by_split("val")
    if any(len(g) == 0 for g in val_groups):
        val_groups = train_groups

    d = dataset.dim
    rng_init = np.random.default_rng(np.random.SeedSequence([config.seed, 71]))
    corr0 = potential.init_params(d, m=config.pot_width, depth=config.pot_depth,
                                  h=config.pot_step, rank=config.pot_rank,
                                  rng=rng_init)
    corr_store = ParamStore(potential.param_arrays(corr0))
    adam = AdamState.for_params(corr_store.values_dict())
    noise = sde.NoisePlan(config.seed + 1)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 31]))
    epochs = config.max_epochs if max_epochs is None else max_epochs

    best_val = reverse_validation_metric(corr_store.values_dict(), ckpt, spec,
                                         val_groups, noise)
    best_values = corr_store.values_dict()
    history = []
    since_best = 0
    consecutive_failures = 0
    for epoch in range(epochs):
        t0 = time.time()
        plans = _minibatch_plan(rng, [len(g) for g in train_groups], config.batch_size)
        ep_total = 0.0
        n_done = 0
        for step, plan in enumerate(plans):
            batches = [g[idx] for g, idx in zip(train_groups, plan)]
            corr_store.zero_grads()
            try:
                total, _ = reverse_loss_step(corr_store, ckpt, spec, batches,
                                             noise, tag_prefix=(epoch, step))
            except sde.SimulationDivergedError as exc:
                consecutive_failures += 1
                warnings.warn(f"reverse epoch {epoch} step {step}: {exc}; skipped")
                if consecutive_failures >= 5:
                    raise TrainingAbortedError(
                        "five consecutive reverse-simulation divergences",
                        {"epoch": epoch, "step": step, "error": str(exc)})
                continue
            consecutive_failures = 0
            adam_update(adam, corr_store, lr, config.beta1, config.beta2,
                        config.eps_adam)
            ep_total += total
            n_done += 1
        val = reverse_validation_metric(corr_store.values_dict(), ckpt, spec,
                                        val_groups, noise)
        row = {"epoch": epoch, "total_loss": ep_total / max(n_done, 1),
               "sinkhorn": ep_total / max(n_done, 1), "re": 0.0, "rh": 0.0,
               "val_metric": val, "seconds": time.time() - t0}
        history.append(row)
        if not quiet:
            print(f"reverse epoch {epoch:4d} loss {row['total_loss']:.4f} val {val:.4f}")
        if val < best_val:
            best_val = val
            best_values = corr_store.values_dict()
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    out = Checkpoint(config=config, potential=dict(ckpt.potential),
                     diffusion=dict(ckpt.diffusion), corrector=best_values,
                     gmm=ckpt.gmm, val_metric=ckpt.val_metric)
    if log_path:
        write_training_log(log_path, history)
    return out, history


# ---------------------------------------------------------------------------
# simulation helpers shared by evaluation and the CLI

def forward_simulator(ckpt: Checkpoint, spec=None, dt: float | None = None):
    """Wrap a checkpoint as ``sim(starts (n, d), eval_times, stream) ->
    (T, n, d)`` for the metric protocols."""
    config = ckpt.config
    if spec is None:
        spec, _ = build_spec(config, ckpt.dim, gmm=ckpt.gmm_density())
    dyn = make_dynamics_eval(ckpt.potential_params(), ckpt.diffusion_params(), spec)
    dt = dt or config.dt
    t0 = config.grid[0]

    def sim(starts: np.ndarray, eval_times, stream) -> np.ndarray:
        starts = np.atleast_2d(starts)
        noise = sde.NoisePlan(_stream_seed(config.seed, stream))
        clouds = sde.simulate_to_times(dyn, np.ascontiguousarray(starts.T), t0,
                                       eval_times, dt, noise=noise,
                                       tag_base=("fwd",), ids=np.arange(len(starts)))
        return np.stack([c.T for c in clouds])

    return sim


def reverse_simulator(ckpt: Checkpoint, spec=None, dt: float | None = None):
    if ckpt.corrector is None:
        raise ConfigError("checkpoint has no trained reverse corrector")
    config = ckpt.config
    if spec is None:
        spec, _ = build_spec(config, ckpt.dim, gmm=ckpt.gmm_density())
    dyn = make_dynamics_eval(ckpt.potential_params(), ckpt.diffusion_params(), spec)
    corr = make_corrector_eval(ckpt.corrector_params())
    dt = dt or config.dt
    t_end = config.grid[-1]

    def sim(starts: np.ndarray, eval_times, stream) -> np.ndarray:
        starts = np.atleast_2d(starts)
        noise = sde.NoisePlan(_stream_seed(config.seed, stream))
        clouds = sde.simulate_reverse_to_times(
            dyn, corr, np.ascontiguousarray(starts.T), t_end, eval_times, dt,
            noise=noise, tag_base=("rev",), ids=np.arange(len(starts)))
        return np.stack([c.T for c in clouds])

    return sim


def _stream_seed(base_seed: int, stream) -> int:
    parts = stream if isinstance(stream, (tuple, list)) else (stream,)
    return int(sde._fold64((base_seed,) + tuple(parts)) & 0x7FFFFFFF)
