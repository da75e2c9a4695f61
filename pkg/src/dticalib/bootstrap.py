"""Wild-bootstrap uncertainty for least-squares fits, plus the dyadic
orientation statistics shared by every replicate-based method.

Replicates from any source (wild bootstrap, dropout sampling, Monte-Carlo
noise draws) are reduced the same way: population std of FA and MD, and a
cone angle taken as the 95th percentile of angles between each replicate's
principal direction and the mean dyadic axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import (
    DiffusionTensor,
    GradientScheme,
    eigh3_batch,
    elements_to_matrices,
    fa_md_from_eigenvalues,
)
from .fitting import SIGNAL_FLOOR, fit_cwlls, fit_cwlls_batch
from .rng import rng_from_key


@dataclass
class TensorSampleSet:
    """Replicate tensors from one voxel, stored as (k, 6) element rows."""

    elements: np.ndarray  # (k, 6)
    source: str  # wild_bootstrap | mc_dropout | monte_carlo_oracle

    def __post_init__(self):
        self.elements = np.asarray(self.elements, dtype=np.float64)
        if self.elements.ndim != 2 or self.elements.shape[1] != 6:
            raise ValueError("expected (k, 6) replicate elements")
        if not np.all(np.isfinite(self.elements)):
            raise ValueError("non-finite replicate tensors")

    def __len__(self):
        return len(self.elements)

    @classmethod
    def from_tensors(cls, tensors: list[DiffusionTensor], source: str):
        return cls(np.stack([t.elements for t in tensors]), source)


@dataclass
class UncertaintyBundle:
    theta95: float  # degrees, in [0, 90]
    sigma_fa: float
    sigma_md: float  # mm^2/s
    aleatoric_u: Optional[float] = None  # log-scale, DL only


class SaturatedLeverageError(ValueError):
    pass


def wild_bootstrap(
    signals, scheme: GradientScheme, iterations: int = 1000, seed: int = 0
) -> TensorSampleSet:
    """Wild-bootstrap replicates of the constrained WLLS fit of one voxel.

    The base fit supplies fitted log-signals, residuals and leverage. Each
    replicate flips residual signs with Rademacher draws and rescales them
    by 1/sqrt(1-h) before refitting, which keeps the resampling valid under
    heteroscedastic noise.
    """
    if iterations < 2:
        raise ValueError("iterations must be >= 2")
    signals = np.asarray(signals, dtype=np.float64)
    base = fit_cwlls(signals, scheme)
    h = base.leverage
    if np.any(h >= 1.0 - 1e-9):
        raise SaturatedLeverageError("saturated leverage")
    y_obs = np.log(np.maximum(signals, SIGNAL_FLOOR))
    y_hat = y_obs - base.residuals_log
    scaled = base.residuals_log / np.sqrt(1.0 - h)
    rng = rng_from_key(seed)
    signs = rng.integers(0, 2, size=(iterations, len(signals))) * 2 - 1
    y_star = y_hat[None, :] + signs * scaled[None, :]
    beta, _, _, _ = fit_cwlls_batch(np.exp(y_star), scheme)
    return TensorSampleSet(beta[:, :6], "wild_bootstrap")


def principal_axes(samples: TensorSampleSet) -> np.ndarray:
    """(k, 3) principal eigenvectors of the replicate tensors."""
    _, evecs = eigh3_batch(elements_to_matrices(samples.elements))
    return evecs[:, 0, :]


def mean_dyadic(samples: TensorSampleSet) -> np.ndarray:
    """Principal axis of the mean outer product of replicate directions.

    The dyad v v^T is blind to the sign of v, so per-replicate sign flips
    cannot move the result.
    """
    axes = principal_axes(samples)
    dyad = np.einsum("ki,kj->ij", axes, axes) / len(axes)
    evals, evecs = eigh3_batch(dyad[None])
    return evecs[0, 0]


def cone_angle_95(samples: TensorSampleSet) -> float:
    """95th percentile (linear interpolation) of angles to the mean dyadic axis.

    Angles fold the eigenvector sign ambiguity via |dot|, so they live in
    [0, 90] degrees. Meaningful for k >= 20 or so; smaller sets are allowed
    (identical replicates give exactly 0).
    """
    axes = principal_axes(samples)
    mean_axis = mean_dyadic(samples)
    cosines = np.clip(np.abs(axes @ mean_axis), 0.0, 1.0)
    angles = np.degrees(np.arccos(cosines))
    return float(np.percentile(angles, 95, method="linear"))


def summarize_uncertainty(
    samples: TensorSampleSet, aleatoric_u: Optional[float] = None
) -> UncertaintyBundle:
    """Population std of replicate FA/MD plus the 95% cone angle."""
    if len(samples) < 2:
        raise ValueError("need at least 2 replicates")
    evals, _ = eigh3_batch(elements_to_matrices(samples.elements))
    fa, md = fa_md_from_eigenvalues(evals)
    return UncertaintyBundle(
        theta95=cone_angle_95(samples),
        sigma_fa=float(np.std(fa)),
        sigma_md=float(np.std(md)),
        aleatoric_u=aleatoric_u,
    )


def sample_estimates(samples: TensorSampleSet):
    """Mean tensor elements, FA and MD of the per-replicate scalars.

    Returns (mean_elements (6,), mean_fa, mean_md).
    """
    evals, _ = eigh3_batch(elements_to_matrices(samples.elements))
    fa, md = fa_md_from_eigenvalues(evals)
    return samples.elements.mean(axis=0), float(fa.mean()), float(md.mean())
