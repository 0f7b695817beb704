"""Ground-truth generator spectra on 1D/2D grids, plus the analytic
Ornstein-Uhlenbeck ladder.

The generator L = -grad(U).grad + (1/beta) Laplacian is discretized through
its Dirichlet form: stiffness entries use the Boltzmann density at edge
midpoints, the (lumped) mass uses node densities.  This keeps the discrete
operator exactly symmetric in the pi-weighted inner product, negative
semi-definite, and gives an exact zero mode with constant eigenfunction
(zero-flux boundaries).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigurationError, NumericError
from .potentials import Potential

# exp(-x) underflows to exactly 0 near 745; clip so far-out grid nodes keep a
# tiny positive mass instead of producing a singular mass matrix.
_EXP_CLIP = 700.0
_BOUNDARY_TOL = 1e-8


@dataclass(frozen=True)
class GridSpec:
    lo: np.ndarray
    hi: np.ndarray
    n_points: np.ndarray
    beta: float

    def __post_init__(self):
        object.__setattr__(self, "lo", np.atleast_1d(np.asarray(self.lo, dtype=float)))
        object.__setattr__(self, "hi", np.atleast_1d(np.asarray(self.hi, dtype=float)))
        object.__setattr__(self, "n_points",
                           np.atleast_1d(np.asarray(self.n_points, dtype=int)))
        if not (self.lo.shape == self.hi.shape == self.n_points.shape):
            raise ConfigurationError("grid lo/hi/n_points must share a shape")
        if np.any(self.hi <= self.lo):
            raise ConfigurationError("grid needs hi > lo in every dimension")
        if np.any(self.n_points < 32):
            raise ConfigurationError("grid needs at least 32 points per dimension")
        if self.beta <= 0:
            raise ConfigurationError("grid beta must be positive")

    @property
    def dim(self) -> int:
        return len(self.n_points)

    def axes(self):
        return [np.linspace(self.lo[k], self.hi[k], self.n_points[k])
                for k in range(self.dim)]


@dataclass
class GridEigenpairs:
    """Leading eigenpairs of the discretized generator.

    ``functions`` holds pi-orthonormal eigenfunctions as columns over the
    flattened grid; ``pi`` is the normalized stationary probability of each
    node (usable as quadrature weights for inner products).
    """

    lambdas: np.ndarray          # (k,) descending, lambdas[0] ~ 0
    functions: np.ndarray        # (n_nodes, k)
    nodes: np.ndarray            # (n_nodes, d)
    pi: np.ndarray               # (n_nodes,)
    grid: GridSpec
    meta: dict = field(default_factory=dict)

    def interpolate(self, i: int, X: np.ndarray) -> np.ndarray:
        """Evaluate eigenfunction i at arbitrary points by linear interpolation."""
        from scipy.interpolate import RegularGridInterpolator

        axes = self.grid.axes()
        shape = tuple(self.grid.n_points)
        f = self.functions[:, i].reshape(shape)
        itp = RegularGridInterpolator(axes, f, bounds_error=False, fill_value=None)
        return itp(np.atleast_2d(np.asarray(X, dtype=float)))


def ou_spectrum(k: int) -> np.ndarray:
    """Generator eigenvalues 0, -1, ..., -(k-1) of the unit-stiffness OU process."""
    if k < 1:
        raise ConfigurationError("ou_spectrum needs k >= 1")
    return -np.arange(k, dtype=float)


def _boundary_check(E: np.ndarray) -> None:
    # E = beta * (U - Umin) on the grid; boundary mass must be negligible so
    # reflecting truncation does not distort the spectrum.
    if E.ndim == 1:
        edge = min(E[0], E[-1])
    else:
        edge = min(E[0, :].min(), E[-1, :].min(), E[:, 0].min(), E[:, -1].min())
    if np.exp(-min(edge, _EXP_CLIP)) > _BOUNDARY_TOL:
        raise ConfigurationError(
            f"grid box too small: boundary density {np.exp(-edge):.2e} "
            f"exceeds {_BOUNDARY_TOL:.0e} of the maximum")


def grid_generator_eig(potential: Potential, grid: GridSpec, k: int) -> GridEigenpairs:
    """Top-k eigenpairs (lambda_i <= 0, pi-orthonormal f_i) of the generator."""
    if grid.dim != potential.dim:
        raise ConfigurationError("grid dimension does not match the potential")
    if grid.dim not in (1, 2):
        raise ConfigurationError("grid oracle supports d in {1, 2}")
    n_nodes = int(np.prod(grid.n_points))
    if k < 1 or k > n_nodes:
        raise ConfigurationError("k out of range for this grid")

    axes = grid.axes()
    if grid.dim == 1:
        nodes = axes[0][:, None]
    else:
        X, Y = np.meshgrid(axes[0], axes[1], indexing="ij")
        nodes = np.column_stack([X.ravel(), Y.ravel()])

    beta = grid.beta
    U = potential.value(nodes)
    U0 = U.min()
    E = beta * (U - U0)
    _boundary_check(E.reshape(tuple(grid.n_points)))
    h = [(ax[1] - ax[0]) for ax in axes]
    cell = float(np.prod(h))
    mass = np.exp(-np.clip(E, 0.0, _EXP_CLIP)) * cell

    if grid.dim == 1:
        lam, F = _eig_1d(potential, axes[0], beta, mass, k)
    else:
        lam, F = _eig_2d(potential, axes, beta, mass, k)

    # pi-orthonormal and sign-fixed: largest pi-weighted magnitude positive
    total = mass.sum()
    F = F * np.sqrt(total)
    pi = mass / total
    for i in range(F.shape[1]):
        j = np.argmax(np.abs(F[:, i]) * np.sqrt(pi))
        if F[j, i] < 0:
            F[:, i] = -F[:, i]

    return GridEigenpairs(
        lambdas=lam, functions=F, nodes=nodes, pi=pi, grid=grid,
        meta={"potential": potential.id_string(), "k": k},
    )


def _eig_1d(potential, xs, beta, mass, k):
    n = len(xs)
    h = xs[1] - xs[0]
    mid = (0.5 * (xs[:-1] + xs[1:]))[:, None]
    Um = potential.value(mid)
    U0 = potential.value(xs[:, None]).min()
    ce = np.exp(-np.clip(beta * (Um - U0), 0.0, _EXP_CLIP)) / (beta * h * h) * h

    diag = np.zeros(n)
    diag[:-1] += ce
    diag[1:] += ce
    A_diag = diag / mass
    A_off = -ce / np.sqrt(mass[:-1] * mass[1:])
    Asym = np.zeros((2, n))
    Asym[0, 1:] = A_off
    Asym[1, :] = A_diag
    w, V = sla.eig_banded(Asym, lower=False, select="i", select_range=(0, k - 1))
    lam = -w
    F = V / np.sqrt(mass)[:, None]
    return lam, F


def _eig_2d(potential, axes, beta, mass, k):
    xs, ys = axes
    nx, ny = len(xs), len(ys)
    hx, hy = xs[1] - xs[0], ys[1] - ys[0]
    cell = hx * hy
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    Umin = potential.value(np.column_stack([X.ravel(), Y.ravel()])).min()

    def coeff(mid_x, mid_y, h):
        pts = np.column_stack([mid_x.ravel(), mid_y.ravel()])
        Em = beta * (potential.value(pts) - Umin)
        return (np.exp(-np.clip(Em, 0.0, _EXP_CLIP)) / (beta * h * h) * cell)

    N = nx * ny
    rows, cols, vals = [], [], []
    diag = np.zeros(N)

    # x-direction edges
    ce = coeff(0.5 * (X[:-1, :] + X[1:, :]), Y[:-1, :], hx)
    ii, jj = np.meshgrid(np.arange(nx - 1), np.arange(ny), indexing="ij")
    p = (ii * ny + jj).ravel()
    q = ((ii + 1) * ny + jj).ravel()
    np.add.at(diag, p, ce)
    np.add.at(diag, q, ce)
    rows += [p, q]
    cols += [q, p]
    vals += [-ce, -ce]

    # y-direction edges
    ce = coeff(X[:, :-1], 0.5 * (Y[:, :-1] + Y[:, 1:]), hy)
    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny - 1), indexing="ij")
    p = (ii * ny + jj).ravel()
    q = (ii * ny + jj + 1).ravel()
    np.add.at(diag, p, ce)
    np.add.at(diag, q, ce)
    rows += [p, q]
    cols += [q, p]
    vals += [-ce, -ce]

    rows = np.concatenate(rows + [np.arange(N)])
    cols = np.concatenate(cols + [np.arange(N)])
    vals = np.concatenate(vals + [diag])
    K = sp.coo_matrix((vals, (rows, cols)), shape=(N, N)).tocsc()

    dinv = 1.0 / np.sqrt(mass)
    Asym = (sp.diags(dinv) @ K @ sp.diags(dinv)).tocsc()
    asym = abs(Asym - Asym.T)
    rel_asym = (asym.max() / max(abs(Asym).max(), 1e-300)) if asym.nnz else 0.0
    if rel_asym > 1e-12:
        raise NumericError(f"discretized generator asymmetric: {rel_asym:.2e}")

    # shift-invert around zero: A is PSD with an exact null vector, so shift
    # slightly negative to keep the factorization definite
    w, V = spla.eigsh(Asym, k=k, sigma=-1e-8, which="LM")
    order = np.argsort(w)
    lam = -w[order][:k]
    F = (V[:, order] * dinv[:, None])[:, :k]
    return lam, F
