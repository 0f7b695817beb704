"""Dataset construction: reweighting, lagged pairs, splits, Kabsch alignment.

Weights are kept in the log domain with a recorded max-shift: beta*V can
reach hundreds in long metadynamics runs, and the downstream eigenproblem is
invariant to a common weight scale (at zero ridge), so only log_weights - max
is ever exponentiated.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import Trajectory
from .errors import (AlignmentError, ConfigurationError, EmptyDatasetError,
                     InvalidInputError)
from .potentials import Bias, MetadynamicsBias

_CHUNK = 1 << 16


@dataclass
class WeightedDataset:
    """States with log-domain importance weights w_i = exp(beta V(x_i) - shift)."""

    states: np.ndarray       # (n, d)
    bias_values: np.ndarray  # (n,)
    log_weights: np.ndarray  # (n,) = beta * V - shift
    shift: float
    beta: float
    bias_grads: np.ndarray | None = None  # (n, d) grad V at each state
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def d(self) -> int:
        return self.states.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def subset(self, idx: np.ndarray) -> "WeightedDataset":
        return WeightedDataset(
            states=self.states[idx],
            bias_values=self.bias_values[idx],
            log_weights=self.log_weights[idx],
            shift=self.shift,
            beta=self.beta,
            bias_grads=None if self.bias_grads is None else self.bias_grads[idx],
            meta=dict(self.meta),
        )


@dataclass
class LaggedPairs:
    """Consecutive state pairs (x_i, y_i = x_{i+stride}) with x-side weights."""

    x: np.ndarray            # (n, d)
    y: np.ndarray            # (n, d)
    lag: float
    log_weights: np.ndarray  # (n,)
    shift: float

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)


def compute_weights(traj: Trajectory, beta: float, bias: Bias | None = None,
                    include_buildup: bool = False, shift: bool = True) -> WeightedDataset:
    """Weights w = exp(beta V) from a trajectory, shifted so max(log w) = 0.

    With a metadynamics ``bias``, states recorded before the freeze step saw a
    still-growing potential; they are dropped by default so the weights refer
    to the time-homogeneous frozen bias.  Pass ``include_buildup=True`` to keep
    them (their bias values are then re-evaluated under the final bias).
    Providing any ``bias`` also attaches grad V at each kept state.
    """
    if not np.all(np.isfinite(traj.bias_values)):
        raise InvalidInputError("trajectory has non-finite bias values")
    keep = slice(None)
    values = traj.bias_values
    states = traj.states
    steps = traj.steps
    if isinstance(bias, MetadynamicsBias) and not include_buildup:
        mask = steps >= bias.freeze_step
        if not mask.any():
            raise EmptyDatasetError("no states recorded after the bias freeze step")
        states, values, steps = states[mask], values[mask], steps[mask]
    elif isinstance(bias, MetadynamicsBias) and include_buildup:
        # re-evaluate the build-up segment under the final frozen bias
        values = _batched_value(bias, states)

    grads = None
    if bias is not None:
        grads = _batched_gradient(bias, states)

    log_w = beta * values
    s = float(log_w.max()) if (shift and log_w.size) else 0.0
    return WeightedDataset(
        states=states.copy(), bias_values=values.copy(), log_weights=log_w - s,
        shift=s, beta=beta, bias_grads=grads,
        meta={"steps": steps.copy(), "source": dict(traj.meta)},
    )


def _batched_value(bias: Bias, states: np.ndarray) -> np.ndarray:
    out = np.empty(states.shape[0])
    for i in range(0, states.shape[0], _CHUNK):
        out[i:i + _CHUNK] = bias.value(states[i:i + _CHUNK])
    return out


def _batched_gradient(bias: Bias, states: np.ndarray) -> np.ndarray:
    out = np.empty_like(states)
    for i in range(0, states.shape[0], _CHUNK):
        out[i:i + _CHUNK] = bias.gradient(states[i:i + _CHUNK])
    return out


def make_lagged_pairs(traj: Trajectory, stride: int, beta: float,
                      shift: bool = True) -> LaggedPairs:
    """Pairs (x_i, x_{i+stride}) with weights attached from the x-side state."""
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    if traj.n <= stride:
        raise EmptyDatasetError(
            f"trajectory of length {traj.n} too short for stride {stride}")
    dsteps = np.diff(traj.steps)
    if dsteps.size and not np.all(dsteps == dsteps[0]):
        raise ConfigurationError("lagged pairs need a constant saved stride")
    dt_saved = (traj.times[-1] - traj.times[0]) / (traj.n - 1)
    log_w = beta * traj.bias_values[:-stride]
    s = float(log_w.max()) if (shift and log_w.size) else 0.0
    return LaggedPairs(
        x=traj.states[:-stride].copy(),
        y=traj.states[stride:].copy(),
        lag=float(stride * dt_saved),
        log_weights=log_w - s,
        shift=s,
    )


def split(dataset: WeightedDataset, fraction: float, seed: int):
    """Disjoint random (train, validation) partition with ceil(f n) train rows."""
    if not 0.0 < fraction < 1.0:
        raise ConfigurationError("split fraction must be in (0, 1)")
    n = dataset.n
    if n < 2:
        raise EmptyDatasetError("need at least 2 samples to split")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(np.ceil(fraction * n))
    return dataset.subset(perm[:n_train]), dataset.subset(perm[n_train:])


# ---------------------------------------------------------------------------
# rigid-body alignment for ingested molecular frames


def kabsch_align(frames: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Center and rotate each frame onto the centered reference (min RMSD).

    ``frames`` has shape (n, 3k) with coordinates grouped per atom; the
    rotation uses the SVD construction with the determinant sign correction,
    so reflections are never applied.
    """
    frames = np.asarray(frames, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if frames.ndim == 1:
        frames = frames[None, :]
    n, m = frames.shape
    if m % 3 != 0 or m != reference.shape[0]:
        raise ConfigurationError("frames must be (n, 3k) matching the reference")
    k = m // 3

    ref = reference.reshape(k, 3)
    ref = ref - ref.mean(axis=0)
    if np.linalg.matrix_rank(ref, tol=1e-10 * max(1.0, np.abs(ref).max())) < 2:
        raise AlignmentError("reference is degenerate (collinear atoms)")

    pts = frames.reshape(n, k, 3)
    pts = pts - pts.mean(axis=1, keepdims=True)

    h = np.einsum("nki,kj->nij", pts, ref)  # (n, 3, 3) covariance
    u, s, vt = np.linalg.svd(h)
    if np.any(s[:, 1] <= 1e-12 * np.maximum(s[:, 0], 1e-300)):
        raise AlignmentError("degenerate frame covariance (rank < 2)")
    det = np.linalg.det(np.einsum("nij,njk->nik", u, vt))
    u[:, :, 2] *= np.sign(det)[:, None]
    rot = np.einsum("nij,njk->nik", u, vt)  # proper rotations, det = +1
    aligned = np.einsum("nki,nij->nkj", pts, rot)
    return aligned.reshape(n, m)


# ---------------------------------------------------------------------------
# external file ingestion


def read_table(path) -> dict[str, np.ndarray]:
    """Read a whitespace- or comma-separated table with a header naming columns.

    Accepts PLUMED-COLVAR style headers (``#! FIELDS name1 name2 ...``) and
    plain one-line headers (optionally starting with '#').
    """
    path = Path(path)
    with open(path) as fh:
        first = fh.readline().strip()
        if first.startswith("#!"):
            names = first.split()[2:]
        else:
            names = first.lstrip("# ").replace(",", " ").split()
        delim = "," if ("," in fh.readline()) else None
        fh.seek(0)
        fh.readline()
        data = np.loadtxt(fh, delimiter=delim, ndmin=2)
    if data.shape[1] != len(names):
        raise ConfigurationError(
            f"{path}: header names {len(names)} columns, data has {data.shape[1]}")
    return {name: data[:, i] for i, name in enumerate(names)}


def dataset_from_table(columns: dict[str, np.ndarray], state_names: list[str],
                       bias_name: str | None, beta: float,
                       shift: bool = True) -> WeightedDataset:
    """Assemble a weighted dataset from named columns of an ingested table."""
    try:
        states = np.column_stack([columns[c] for c in state_names])
    except KeyError as err:
        raise ConfigurationError(f"missing state column {err}") from None
    if bias_name is None:
        values = np.zeros(states.shape[0])
    elif bias_name in columns:
        values = np.asarray(columns[bias_name], dtype=float)
    else:
        raise ConfigurationError(f"missing bias column {bias_name!r}")
    log_w = beta * values
    s = float(log_w.max()) if (shift and log_w.size) else 0.0
    return WeightedDataset(states=states, bias_values=values,
                           log_weights=log_w - s, shift=s, beta=beta)
