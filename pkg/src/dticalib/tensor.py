"""Core diffusion tensor math: signal model, 3x3 symmetric eigensolver, scalar maps.

Conventions used throughout the package:

* tensor elements are ordered (Dxx, Dyy, Dzz, Dxy, Dxz, Dyz), units mm^2/s
* the fitted parameter vector is those 6 elements followed by ln(S0)
* eigenvalues are sorted descending; eigenvectors are returned as rows
* eigenvector signs are arbitrary; downstream code must not depend on them
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DIRECTION_NORM_TOL = 1e-9


@dataclass
class GradientScheme:
    """Acquisition table: one (direction, b-value) pair per measurement.

    Directions are unit vectors; b=0 entries may carry the zero vector.
    """

    directions: np.ndarray  # (m, 3)
    bvalues: np.ndarray  # (m,), s/mm^2

    def __post_init__(self):
        self.directions = np.asarray(self.directions, dtype=np.float64)
        self.bvalues = np.asarray(self.bvalues, dtype=np.float64)
        if self.directions.ndim != 2 or self.directions.shape[1] != 3:
            raise ValueError("directions must be an (m, 3) array")
        if self.bvalues.shape != (self.directions.shape[0],):
            raise ValueError("bvalues length must match directions")
        if np.any(self.bvalues < 0):
            raise ValueError("bvalues must be nonnegative")
        norms = np.linalg.norm(self.directions, axis=1)
        weighted = self.bvalues > 0
        if np.any(np.abs(norms[weighted] - 1.0) > DIRECTION_NORM_TOL):
            raise ValueError("weighted directions must have unit norm")
        zero_ok = (np.abs(norms - 1.0) <= DIRECTION_NORM_TOL) | (norms == 0.0)
        if not np.all(zero_ok):
            raise ValueError("b=0 directions must be unit or zero vectors")

    def __len__(self):
        return len(self.bvalues)

    @property
    def n_measurements(self) -> int:
        return len(self.bvalues)


@dataclass
class DiffusionTensor:
    """Symmetric 3x3 diffusion tensor stored as its 6 unique elements plus ln(S0)."""

    elements: np.ndarray  # (6,): Dxx, Dyy, Dzz, Dxy, Dxz, Dyz
    ln_s0: float = 0.0

    def __post_init__(self):
        self.elements = np.asarray(self.elements, dtype=np.float64).reshape(6)

    def as_matrix(self) -> np.ndarray:
        xx, yy, zz, xy, xz, yz = self.elements
        return np.array([[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]])

    @classmethod
    def from_matrix(cls, mat: np.ndarray, ln_s0: float = 0.0) -> "DiffusionTensor":
        mat = np.asarray(mat, dtype=np.float64)
        elems = np.array(
            [mat[0, 0], mat[1, 1], mat[2, 2], mat[0, 1], mat[0, 2], mat[1, 2]]
        )
        return cls(elems, ln_s0)


@dataclass
class TensorScalars:
    """Eigen-system of a tensor plus the derived rotation-invariant scalars."""

    eigenvalues: np.ndarray  # (3,), descending
    eigenvectors: np.ndarray  # (3, 3), rows are unit eigenvectors
    fa: float
    md: float
    principal_direction: np.ndarray = field(init=False)

    def __post_init__(self):
        self.principal_direction = self.eigenvectors[0]


def signal_quadratic_form(tensor: DiffusionTensor, scheme: GradientScheme) -> np.ndarray:
    """b * g^T D g per measurement (the log-attenuation, sign flipped)."""
    g = scheme.directions
    d = tensor.as_matrix()
    return scheme.bvalues * np.einsum("ij,jk,ik->i", g, d, g)


def predict_signal(tensor: DiffusionTensor, scheme: GradientScheme) -> np.ndarray:
    """Normalized diffusion signal S/S0 = exp(-b g^T D g) per measurement.

    b=0 entries give exactly 1.
    """
    if not np.all(np.isfinite(tensor.elements)):
        raise ValueError("non-finite input")
    return np.exp(-signal_quadratic_form(tensor, scheme))


def design_matrix(scheme: GradientScheme) -> np.ndarray:
    """(m, 7) log-linear design: X @ (elements, ln_s0) == ln S for noiseless data."""
    g = scheme.directions
    b = scheme.bvalues
    gx, gy, gz = g[:, 0], g[:, 1], g[:, 2]
    return np.stack(
        [
            -b * gx * gx,
            -b * gy * gy,
            -b * gz * gz,
            -2 * b * gx * gy,
            -2 * b * gx * gz,
            -2 * b * gy * gz,
            np.ones_like(b),
        ],
        axis=1,
    )


# Cyclic Jacobi sweeps on batches of symmetric 3x3 matrices. Chosen over the
# analytic closed form: rotations stay orthogonal to machine precision even
# for (near-)degenerate eigenvalues.

_JACOBI_PAIRS = ((0, 1), (0, 2), (1, 2))
_JACOBI_MAX_SWEEPS = 30


def eigh3_batch(mats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decompose a batch of symmetric 3x3 matrices by cyclic Jacobi.

    Args:
        mats: (n, 3, 3) symmetric matrices.

    Returns:
        eigenvalues (n, 3) sorted descending, eigenvectors (n, 3, 3) with
        rows as eigenvectors (evecs[i, k] pairs with evals[i, k]).
    """
    a = np.array(mats, dtype=np.float64)
    if a.ndim != 3 or a.shape[1:] != (3, 3):
        raise ValueError("expected (n, 3, 3) input")
    n = a.shape[0]
    v = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    scale = np.maximum(np.abs(a).max(axis=(1, 2)), 1e-300)
    for _ in range(_JACOBI_MAX_SWEEPS):
        off = a[:, 0, 1] ** 2 + a[:, 0, 2] ** 2 + a[:, 1, 2] ** 2
        if np.all(off <= (1e-15 * scale) ** 2):
            break
        for p, q in _JACOBI_PAIRS:
            apq = a[:, p, q]
            rotate = np.abs(apq) > 1e-300 * scale
            tau = (a[:, q, q] - a[:, p, p]) / np.where(rotate, 2.0 * apq, 1.0)
            t = np.sign(tau) / (np.abs(tau) + np.hypot(1.0, tau))
            t = np.where(tau == 0.0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            c = np.where(rotate, c, 1.0)
            s = np.where(rotate, s, 0.0)
            # Two-sided rotation on (p, q); only rows/cols p, q change.
            ap = a[:, p, :].copy()
            aq = a[:, q, :].copy()
            a[:, p, :] = c[:, None] * ap - s[:, None] * aq
            a[:, q, :] = s[:, None] * ap + c[:, None] * aq
            ap = a[:, :, p].copy()
            aq = a[:, :, q].copy()
            a[:, :, p] = c[:, None] * ap - s[:, None] * aq
            a[:, :, q] = s[:, None] * ap + c[:, None] * aq
            vp = v[:, :, p].copy()
            vq = v[:, :, q].copy()
            v[:, :, p] = c[:, None] * vp - s[:, None] * vq
            v[:, :, q] = s[:, None] * vp + c[:, None] * vq
    evals = np.stack([a[:, 0, 0], a[:, 1, 1], a[:, 2, 2]], axis=1)
    order = np.argsort(-evals, axis=1, kind="stable")
    evals = np.take_along_axis(evals, order, axis=1)
    # Columns of v are eigenvectors; reorder and flip to row layout.
    evecs = np.take_along_axis(v, order[:, None, :], axis=2).transpose(0, 2, 1)
    return evals, evecs


def fa_md_from_eigenvalues(evals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """FA and MD from eigenvalue triples (last axis of length 3).

    FA of the all-zero tensor is defined as 0; FA is clipped to [0, 1]
    (unconstrained fits with negative eigenvalues can nominally exceed 1).
    """
    evals = np.asarray(evals, dtype=np.float64)
    md = evals.mean(axis=-1)
    dev = evals - md[..., None]
    denom = np.sum(evals * evals, axis=-1)
    num = 1.5 * np.sum(dev * dev, axis=-1)
    fa = np.sqrt(np.divide(num, denom, out=np.zeros_like(num), where=denom > 0))
    return np.clip(fa, 0.0, 1.0), md


def eig3_sym(tensor: DiffusionTensor) -> TensorScalars:
    """Eigen-system, FA and MD of one tensor."""
    if not np.all(np.isfinite(tensor.elements)):
        raise ValueError("non-finite input")
    evals, evecs = eigh3_batch(tensor.as_matrix()[None])
    fa, md = fa_md_from_eigenvalues(evals[0])
    return TensorScalars(evals[0], evecs[0], float(fa), float(md))


def principal_directions(tensors_elements: np.ndarray) -> np.ndarray:
    """Principal eigenvectors for a (n, 6) batch of tensor element rows."""
    mats = elements_to_matrices(tensors_elements)
    _, evecs = eigh3_batch(mats)
    return evecs[:, 0, :]


def elements_to_matrices(elements: np.ndarray) -> np.ndarray:
    """(n, 6) element rows -> (n, 3, 3) symmetric matrices."""
    e = np.asarray(elements, dtype=np.float64)
    mats = np.empty(e.shape[:-1] + (3, 3))
    mats[..., 0, 0] = e[..., 0]
    mats[..., 1, 1] = e[..., 1]
    mats[..., 2, 2] = e[..., 2]
    mats[..., 0, 1] = mats[..., 1, 0] = e[..., 3]
    mats[..., 0, 2] = mats[..., 2, 0] = e[..., 4]
    mats[..., 1, 2] = mats[..., 2, 1] = e[..., 5]
    return mats


def matrices_to_elements(mats: np.ndarray) -> np.ndarray:
    """(n, 3, 3) symmetric matrices -> (n, 6) element rows."""
    m = np.asarray(mats, dtype=np.float64)
    return np.stack(
        [
            m[..., 0, 0],
            m[..., 1, 1],
            m[..., 2, 2],
            m[..., 0, 1],
            m[..., 0, 2],
            m[..., 1, 2],
        ],
        axis=-1,
    )
