"""Reweighted transfer-operator ridge baseline on a shared dictionary.

The lag-t covariance pair is

    C   = (1/n) sum w_l z(x_l) z(x_l)^T
    C_t = (1/n) sum w_l z(x_l) z(y_l)^T   (then symmetrized)

and eigenvalues mu of C_t v = mu (C + gamma I) v map to generator estimates
lambda = ln(mu)/t for mu > 0.  Symmetrizing C_t is valid for time-reversible
dynamics and keeps the spectrum real.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .data import LaggedPairs
from .errors import ConfigurationError, NumericError
from .features import FeatureEval
from .genlearn import _fix_signs


@dataclass
class TransferEigenpairSet:
    """Transfer-operator eigenpairs; lambda is NaN where mu <= 0 (flagged
    invalid rather than dropped)."""

    mus: np.ndarray       # (m,) descending
    lambdas: np.ndarray   # (m,) ln(mu)/lag where valid, else NaN
    valid: np.ndarray     # (m,) bool, mu > 0
    coeffs: np.ndarray    # (m, m)
    lag: float
    gamma: float
    mean_weight: float
    meta: dict = field(default_factory=dict)


def transfer_covariances(pairs: LaggedPairs, feval_x: FeatureEval,
                         feval_y: FeatureEval):
    """Weighted (C, C_t) with weights from the x-side state of each pair."""
    if feval_x.values.shape != feval_y.values.shape:
        raise ConfigurationError("x/y feature evaluations differ in shape")
    if feval_x.n != pairs.n:
        raise ConfigurationError("feature evaluation and pair count differ")
    Zx, Zy = feval_x.values, feval_y.values
    w = pairs.weights
    n = pairs.n
    wz = w[:, None] * Zx
    C = (wz.T @ Zx) / n
    Ct = (wz.T @ Zy) / n
    C = 0.5 * (C + C.T)
    Ct = 0.5 * (Ct + Ct.T)
    if not (np.all(np.isfinite(C)) and np.all(np.isfinite(Ct))):
        raise NumericError("non-finite transfer covariance entries")
    return C, Ct


def transfer_covariances_streaming(dictionary, pairs: LaggedPairs,
                                   chunk: int = 1 << 16):
    """Chunked (C, C_t) assembly; never materializes full feature arrays."""
    m = dictionary.m
    n = pairs.n
    C = np.zeros((m, m))
    Ct = np.zeros((m, m))
    w_all = pairs.weights
    for i in range(0, n, chunk):
        sl = slice(i, min(i + chunk, n))
        Zx = dictionary.evaluate(pairs.x[sl]).values
        Zy = dictionary.evaluate(pairs.y[sl]).values
        wz = w_all[sl][:, None] * Zx
        C += wz.T @ Zx
        Ct += wz.T @ Zy
    C /= n
    Ct /= n
    C = 0.5 * (C + C.T)
    Ct = 0.5 * (Ct + Ct.T)
    if not (np.all(np.isfinite(C)) and np.all(np.isfinite(Ct))):
        raise NumericError("non-finite transfer covariance entries")
    return C, Ct


def transfer_eigensolve(C: np.ndarray, Ct: np.ndarray, gamma: float,
                        lag: float, mean_weight: float = 1.0) -> TransferEigenpairSet:
    """Solve C_t v = mu (C + gamma I) v; mu sorted descending."""
    if gamma < 0:
        raise ConfigurationError("gamma must be >= 0")
    if lag < 0:
        raise ConfigurationError("lag must be >= 0")
    B = C + gamma * np.eye(C.shape[0])
    try:
        mus, V = sla.eigh(Ct, B)
    except (sla.LinAlgError, np.linalg.LinAlgError) as err:
        raise NumericError(
            f"regularized C not positive definite ({err}); increase gamma") from err
    order = np.argsort(mus)[::-1]
    mus, V = mus[order], V[:, order]

    valid = mus > 0
    lambdas = np.full_like(mus, np.nan)
    if lag > 0:
        lambdas[valid] = np.log(mus[valid]) / lag
    else:
        # at lag 0 the transfer operator is the identity: mu = 1, lambda = 0
        lambdas[valid] = 0.0

    norms = np.sqrt(np.abs(np.einsum("mr,mn,nr->r", V, C, V)) / mean_weight)
    ok = norms > 0
    V = V.copy()
    V[:, ok] = V[:, ok] / norms[ok]
    V = _fix_signs(V)
    return TransferEigenpairSet(mus=mus, lambdas=lambdas, valid=valid,
                                coeffs=V, lag=lag, gamma=gamma,
                                mean_weight=mean_weight)
