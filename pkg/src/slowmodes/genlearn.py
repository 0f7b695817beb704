"""Weighted covariance assembly and the ridge resolvent eigensolver.

For features z with Jacobians J and importance weights w = exp(beta V):

    C_ij = (1/n) sum_l w_l z_i z_j
    W_ij = (1/n) sum_l [ eta w_l z_i z_j + (1/beta) sum_k D_ik D_jk ],
    D_ik = sqrt(w_l) (J_ik + (beta/2) (d_k V) z_i)

The generalized symmetric problem C v = nu (W + eta*gamma*I) v then yields
generator eigenvalues through lambda = eta - 1/nu.  Unweighted assembly
(w == 1, grad V == 0) gives the variant usable without reweighting.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .data import WeightedDataset
from .errors import ConfigurationError, EmptyDatasetError, NumericError
from .features import FeatureDictionary, FeatureEval

_CHUNK = 1 << 16


@dataclass
class CovariancePair:
    C: np.ndarray
    W: np.ndarray
    eta: float
    beta: float
    n: int
    weighted: bool
    mean_weight: float

    @property
    def m(self) -> int:
        return self.C.shape[0]


@dataclass
class EigenpairSet:
    """Retained eigenpairs of the ridge resolvent estimator.

    ``coeffs[:, i]`` are expansion coefficients of the i-th eigenfunction in
    the dictionary; each column is scaled to unit weighted empirical L2 norm
    and sign-fixed so its largest-magnitude entry is positive.
    """

    nus: np.ndarray       # (r,) descending resolvent eigenvalues
    lambdas: np.ndarray   # (r,) generator eigenvalues eta - 1/nu
    coeffs: np.ndarray    # (m, r)
    norms: np.ndarray     # (r,) pre-normalization weighted L2 norms
    eta: float
    gamma: float
    n_dropped: int
    mean_weight: float
    meta: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.nus)

    def to_json(self) -> dict:
        return {
            "eta": self.eta, "gamma": self.gamma,
            "nus": self.nus.tolist(), "lambdas": self.lambdas.tolist(),
            "coeffs": self.coeffs.tolist(), "norms": self.norms.tolist(),
            "n_dropped": self.n_dropped, "mean_weight": self.mean_weight,
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "EigenpairSet":
        return cls(
            nus=np.asarray(doc["nus"], dtype=float),
            lambdas=np.asarray(doc["lambdas"], dtype=float),
            coeffs=np.asarray(doc["coeffs"], dtype=float),
            norms=np.asarray(doc["norms"], dtype=float),
            eta=float(doc["eta"]), gamma=float(doc["gamma"]),
            n_dropped=int(doc["n_dropped"]),
            mean_weight=float(doc["mean_weight"]),
            meta=doc.get("meta", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "EigenpairSet":
        return cls.from_json(json.loads(Path(path).read_text()))


def _accumulate(C, G, fe: FeatureEval, w, bias_grads, beta, weighted):
    """Add one chunk's contribution to n*C and the n*gradient-gram G."""
    Z, J = fe.values, fe.jacobians
    if weighted:
        wz = w[:, None] * Z
        C += wz.T @ Z
        D = J
        if bias_grads is not None:
            D = J + (0.5 * beta) * bias_grads[:, None, :] * Z[:, :, None]
        D = np.sqrt(w)[:, None, None] * D
        G += np.einsum("nik,njk->ij", D, D)
    else:
        C += Z.T @ Z
        G += np.einsum("nik,njk->ij", J, J)


def assemble_covariances(feval: FeatureEval, dataset: WeightedDataset,
                         bias_grads: np.ndarray | None = None, eta: float = 0.1,
                         weighted: bool = True) -> CovariancePair:
    """Empirical (C, W) from pre-evaluated features on a weighted dataset."""
    if eta <= 0:
        raise ConfigurationError("eta must be positive")
    n, m = feval.values.shape
    if n != dataset.n:
        raise ConfigurationError("feature evaluation and dataset sizes differ")
    if n == 0:
        raise EmptyDatasetError("cannot assemble covariances from zero samples")
    if bias_grads is None:
        bias_grads = dataset.bias_grads
    if weighted and bias_grads is not None and bias_grads.shape != dataset.states.shape:
        raise ConfigurationError("bias_grads shape mismatch")

    bad = ~np.isfinite(feval.values).all(axis=1)
    if bad.any():
        raise NumericError(f"non-finite feature value at sample {int(np.flatnonzero(bad)[0])}")

    C = np.zeros((m, m))
    G = np.zeros((m, m))
    w = dataset.weights if weighted else np.ones(n)
    _accumulate(C, G, feval, w, bias_grads if weighted else None,
                dataset.beta, weighted)
    C /= n
    G /= n
    W = eta * C + G / dataset.beta
    C = 0.5 * (C + C.T)
    W = 0.5 * (W + W.T)
    if not (np.all(np.isfinite(C)) and np.all(np.isfinite(W))):
        raise NumericError("non-finite covariance entries")
    return CovariancePair(C=C, W=W, eta=eta, beta=dataset.beta, n=n,
                          weighted=weighted, mean_weight=float(np.mean(w)))


def assemble_covariances_streaming(dictionary: FeatureDictionary,
                                   dataset: WeightedDataset,
                                   eta: float, weighted: bool = True,
                                   chunk: int = _CHUNK) -> CovariancePair:
    """Chunked (C, W) assembly evaluating the dictionary on the fly.

    Equivalent to :func:`assemble_covariances` on the full evaluation, with
    deterministic chunk order, but never materializes (n, m, d) arrays.
    """
    if eta <= 0:
        raise ConfigurationError("eta must be positive")
    n, m = dataset.n, dictionary.m
    if n == 0:
        raise EmptyDatasetError("cannot assemble covariances from zero samples")
    C = np.zeros((m, m))
    G = np.zeros((m, m))
    w_all = dataset.weights if weighted else np.ones(n)
    grads = dataset.bias_grads if weighted else None
    for i in range(0, n, chunk):
        sl = slice(i, min(i + chunk, n))
        fe = dictionary.evaluate(dataset.states[sl])
        if not np.all(np.isfinite(fe.values)):
            raise NumericError(f"non-finite feature value in chunk starting {i}")
        _accumulate(C, G, fe, w_all[sl],
                    None if grads is None else grads[sl], dataset.beta, weighted)
    C /= n
    G /= n
    W = eta * C + G / dataset.beta
    C = 0.5 * (C + C.T)
    W = 0.5 * (W + W.T)
    return CovariancePair(C=C, W=W, eta=eta, beta=dataset.beta, n=n,
                          weighted=weighted, mean_weight=float(np.mean(w_all)))


def ridge_eigensolve(cov: CovariancePair, gamma: float,
                     nu_tol_rel: float = 1e-12) -> EigenpairSet:
    """Solve C v = nu (W + eta*gamma*I) v and map to generator eigenvalues.

    Uses the symmetric-definite generalized solver (Cholesky reduction of the
    regularized W).  Pairs with nu below ``nu_tol_rel * nu_max`` are dropped
    and counted in ``n_dropped``.
    """
    if gamma < 0:
        raise ConfigurationError("gamma must be >= 0")
    B = cov.W + cov.eta * gamma * np.eye(cov.m)
    try:
        nus, V = sla.eigh(cov.C, B)
    except (sla.LinAlgError, np.linalg.LinAlgError) as err:
        raise NumericError(
            f"regularized W not positive definite ({err}); increase gamma") from err
    order = np.argsort(nus)[::-1]
    nus, V = nus[order], V[:, order]

    nu_floor = max(nus.max(), 0.0) * nu_tol_rel
    keep = nus > nu_floor
    n_dropped = int(np.sum(~keep))
    nus, V = nus[keep], V[:, keep]
    if nus.size == 0:
        raise NumericError("all resolvent eigenvalues numerically null")

    lambdas = cov.eta - 1.0 / nus

    # unit weighted empirical L2 norm: eigh returns B-orthonormal columns, so
    # v^T C v = nu exactly and <f,f>_w = nu / mean(w)
    norms = np.sqrt(nus / cov.mean_weight)
    V = V / norms
    V = _fix_signs(V)
    return EigenpairSet(
        nus=nus, lambdas=lambdas, coeffs=V, norms=norms, eta=cov.eta,
        gamma=gamma, n_dropped=n_dropped, mean_weight=cov.mean_weight,
        meta={"n": cov.n, "weighted": cov.weighted},
    )


def _fix_signs(V: np.ndarray) -> np.ndarray:
    """Flip columns so the largest-magnitude coefficient is positive."""
    V = V.copy()
    for i in range(V.shape[1]):
        j = np.argmax(np.abs(V[:, i]))
        if V[j, i] < 0:
            V[:, i] = -V[:, i]
    return V


def evaluate_eigenfunction(dictionary: FeatureDictionary, eig: EigenpairSet,
                           i: int, X: np.ndarray) -> np.ndarray:
    """f_i(x) = z(x)^T v_i at each row of X."""
    if not 0 <= i < eig.k:
        raise ConfigurationError(f"eigenfunction index {i} out of range [0, {eig.k})")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out = np.empty(X.shape[0])
    for a in range(0, X.shape[0], _CHUNK):
        sl = slice(a, min(a + _CHUNK, X.shape[0]))
        out[sl] = dictionary.evaluate(X[sl]).values @ eig.coeffs[:, i]
    return out


def sin_angle(f: np.ndarray, g: np.ndarray, weights: np.ndarray | None = None) -> float:
    """Sign-free angle between functions sampled on common points:
    sqrt(1 - <f,g>^2 / (|f|^2 |g|^2)) under the weighted inner product."""
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    w = np.ones_like(f) if weights is None else np.asarray(weights, dtype=float)
    sw = w.sum()
    fg = float(np.sum(w * f * g) / sw)
    ff = float(np.sum(w * f * f) / sw)
    gg = float(np.sum(w * g * g) / sw)
    if ff <= 0.0 or gg <= 0.0:
        raise NumericError("sin_angle needs inputs with positive norm")
    cos2 = min(fg * fg / (ff * gg), 1.0)
    return float(np.sqrt(1.0 - cos2))
