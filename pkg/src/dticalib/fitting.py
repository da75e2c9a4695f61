"""Least-squares tensor estimation on log-transformed signals.

Three estimators share one QR-based solve path:

* ``fit_ols``   -- unweighted solve of ln S = X beta
* ``fit_wlls``  -- two-pass: OLS, then weights exp(2 * predicted ln S)
* ``fit_cwlls`` -- WLLS followed by an eigenvalue floor (SPD projection)

All three are pure per-voxel functions; batched variants (one scheme, many
signal rows) back the bootstrap and Monte-Carlo machinery.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    DiffusionTensor,
    GradientScheme,
    design_matrix,
    eigh3_batch,
    elements_to_matrices,
    matrices_to_elements,
)

SIGNAL_FLOOR = 1e-8  # clamp before log; Rician magnitudes can be ~0
CONDITION_LIMIT = 1e12
EIGENVALUE_FLOOR_REL = 1e-6
EIGENVALUE_FLOOR_MD_MIN = 1e-5  # mm^2/s


class DegenerateSchemeError(ValueError):
    pass


@dataclass
class FitResult:
    tensor: DiffusionTensor
    residuals_log: np.ndarray  # observed ln S minus fitted ln S
    leverage: np.ndarray  # hat-matrix diagonal of the (weighted) design
    constrained: bool
    condition_number: float


def _qr_solve_batch(design: np.ndarray, rhs: np.ndarray):
    """Least-squares via thin QR for a (k, m, 7) stack of designs.

    Returns (beta (k, 7), leverage (k, m)). Leverage is the squared row
    norm of Q, i.e. the hat-matrix diagonal.
    """
    q, r = np.linalg.qr(design)
    beta = np.linalg.solve(r, np.einsum("kmj,km->kj", q, rhs)[..., None])[..., 0]
    leverage = np.einsum("kmj,kmj->km", q, q)
    return beta, leverage


def _prepare(signals: np.ndarray, scheme: GradientScheme) -> np.ndarray:
    signals = np.asarray(signals, dtype=np.float64)
    if signals.ndim == 1:
        signals = signals[None]
    if signals.shape[1] != scheme.n_measurements:
        raise ValueError("signal count does not match scheme")
    if scheme.n_measurements < 7:
        raise ValueError("need at least 7 measurements for a full fit")
    return signals


def _check_condition(design: np.ndarray) -> float:
    cond = float(np.linalg.cond(design))
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise DegenerateSchemeError("degenerate gradient scheme")
    return cond


def fit_ols_batch(signals: np.ndarray, scheme: GradientScheme):
    """OLS on ln S for a (k, m) signal batch.

    Returns (beta (k, 7), residuals (k, m), leverage (k, m), cond).
    """
    x = design_matrix(scheme)
    cond = _check_condition(x)
    y = np.log(np.maximum(signals, SIGNAL_FLOOR))
    k = signals.shape[0]
    beta, leverage = _qr_solve_batch(np.broadcast_to(x, (k,) + x.shape), y)
    residuals = y - beta @ x.T
    return beta, residuals, leverage, cond


def fit_wlls_batch(signals: np.ndarray, scheme: GradientScheme):
    """Two-pass weighted solve; weights are squared OLS-predicted signals.

    Returns (beta, residuals, leverage, cond) where leverage and the
    condition number refer to the weighted design.
    """
    x = design_matrix(scheme)
    _check_condition(x)
    y = np.log(np.maximum(signals, SIGNAL_FLOOR))
    k = signals.shape[0]
    beta0, _ = _qr_solve_batch(np.broadcast_to(x, (k,) + x.shape), y)
    sqrt_w = np.exp(beta0 @ x.T)  # predicted signals = sqrt of weights exp(2*yhat)
    xw = sqrt_w[:, :, None] * x
    conds = np.linalg.cond(xw)
    if np.any(~np.isfinite(conds)) or np.any(conds > CONDITION_LIMIT):
        raise DegenerateSchemeError("degenerate gradient scheme")
    beta, leverage = _qr_solve_batch(xw, sqrt_w * y)
    residuals = y - beta @ x.T
    return beta, residuals, leverage, float(conds.max())


def floor_eigenvalues_batch(elements: np.ndarray):
    """Project (k, 6) tensor rows onto the SPD cone by flooring eigenvalues.

    The floor is EIGENVALUE_FLOOR_REL * max(MD, EIGENVALUE_FLOOR_MD_MIN),
    per tensor. Eigenvectors are preserved.
    """
    evals, evecs = eigh3_batch(elements_to_matrices(elements))
    md = evals.mean(axis=1)
    floor = EIGENVALUE_FLOOR_REL * np.maximum(md, EIGENVALUE_FLOOR_MD_MIN)
    flo = np.maximum(evals, floor[:, None])
    changed = np.any(flo != evals, axis=1)
    out = np.array(elements, dtype=np.float64, copy=True)
    if np.any(changed):
        mats = np.einsum(
            "kji,kj,kjl->kil", evecs[changed], flo[changed], evecs[changed]
        )
        out[changed] = matrices_to_elements(mats)
    return out, changed


def fit_cwlls_batch(signals: np.ndarray, scheme: GradientScheme):
    """WLLS then SPD projection for a (k, m) signal batch.

    Residuals are recomputed against the projected tensor so that
    fitted + residual reproduces the observed log-signal.
    """
    beta, residuals, leverage, cond = fit_wlls_batch(signals, scheme)
    floored, changed = floor_eigenvalues_batch(beta[:, :6])
    if np.any(changed):
        beta = beta.copy()
        beta[:, :6] = floored
        y_obs = np.log(np.maximum(signals, SIGNAL_FLOOR))
        residuals = y_obs - beta @ design_matrix(scheme).T
    return beta, residuals, leverage, cond


def _result_from_batch(beta, residuals, leverage, cond, constrained) -> FitResult:
    tensor = DiffusionTensor(beta[:6], float(beta[6]))
    return FitResult(tensor, residuals, leverage, constrained, cond)


def fit_ols(signals, scheme: GradientScheme) -> FitResult:
    """Ordinary least squares on the log-signal for one voxel."""
    signals = _prepare(signals, scheme)
    beta, res, lev, cond = fit_ols_batch(signals, scheme)
    return _result_from_batch(beta[0], res[0], lev[0], cond, False)


def fit_wlls(signals, scheme: GradientScheme) -> FitResult:
    """Weighted linear least squares for one voxel."""
    signals = _prepare(signals, scheme)
    beta, res, lev, cond = fit_wlls_batch(signals, scheme)
    return _result_from_batch(beta[0], res[0], lev[0], cond, False)


def fit_cwlls(signals, scheme: GradientScheme) -> FitResult:
    """Constrained WLLS (eigenvalue-floored) for one voxel."""
    signals = _prepare(signals, scheme)
    beta, res, lev, cond = fit_cwlls_batch(signals, scheme)
    return _result_from_batch(beta[0], res[0], lev[0], cond, True)


ESTIMATORS = {"ols": fit_ols, "wlls": fit_wlls, "cwlls": fit_cwlls}
