"""Population trajectory inference from cross-sectional snapshots.

A regularized neural SDE is fitted to snapshot data: the drift derives from
a scalar potential network through the Hamiltonian of a user-chosen
transport cost, the diagonal diffusion is learned jointly, and training
penalizes the path action cost and the absolute HJB residual alongside a
debiased Sinkhorn fit of every observed marginal.
"""

from . import autodiff, datasets, diffusion, lagrangian, ot, potential, sde, training
from .datasets import OuConfig, SnapshotDataset, generate_endpoints_2d, generate_ou
from .lagrangian import (GmmDensity, LagrangianSpec, VelocityField, cellular,
                         cost, drift_from_potential, gmm_fit, hamiltonian_star,
                         opinion, polarize_drift, potential_free, random_dynamical)
from .ot import SinkhornConfig, cdd, emd_exact, mdd, sinkhorn_cost, sinkhorn_divergence
from .sde import AugmentedBatchState, NoisePlan, SimulationDivergedError
from .training import (Checkpoint, TrainConfig, train, train_reverse_corrector)

__version__ = "0.1.0"
