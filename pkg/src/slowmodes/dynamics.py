"""Euler-Maruyama integration of overdamped Langevin dynamics.

The integrator samples dX = -grad(U + V) dt + sqrt(2/beta) dW and records
every ``save_stride``-th state together with the bias value under the bias
in force at recording time.  Runs are deterministic given the seed (PCG64
via ``numpy.random.default_rng``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, SimulationDivergenceError
from .potentials import Bias, MetadynamicsBias, Potential

_NOISE_BLOCK = 8192


@dataclass(frozen=True)
class SimulationParams:
    beta: float
    dt: float
    n_steps: int
    x0: np.ndarray
    seed: int
    save_stride: int = 1
    domain_radius: float = 1e3

    def __post_init__(self):
        object.__setattr__(self, "x0", np.atleast_1d(np.asarray(self.x0, dtype=float)))
        if self.beta <= 0 or self.dt <= 0:
            raise ConfigurationError("beta and dt must be positive")
        if self.n_steps < 1 or self.save_stride < 1:
            raise ConfigurationError("n_steps and save_stride must be >= 1")


@dataclass
class Trajectory:
    """Saved states with times, recording steps and recorded bias values."""

    states: np.ndarray      # (n, d)
    times: np.ndarray       # (n,)
    bias_values: np.ndarray  # (n,)
    steps: np.ndarray       # (n,) integer step index of each saved state
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.states.shape[0]
        if not (len(self.times) == len(self.bias_values) == len(self.steps) == n):
            raise ConfigurationError("trajectory arrays have mismatched lengths")
        if n > 1 and not np.all(np.diff(self.times) > 0):
            raise ConfigurationError("trajectory times must be strictly increasing")

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def d(self) -> int:
        return self.states.shape[1]

    def save_csv(self, path) -> None:
        """Write `step,time,x0..x{d-1},bias` rows; floats exact at 17 digits."""
        meta = self.meta
        header = (f"# d={self.d} beta={meta.get('beta', 'nan'):.17g} "
                  f"dt={meta.get('dt', 'nan'):.17g} seed={meta.get('seed', 0)}")
        cols = ["step", "time"] + [f"x{k}" for k in range(self.d)] + ["bias"]
        body = np.column_stack([self.times, self.states, self.bias_values])
        with open(path, "w") as fh:
            fh.write(header + "\n")
            fh.write(",".join(cols) + "\n")
            for s, row in zip(self.steps, body):
                fh.write("%d," % s + ",".join("%.17g" % v for v in row) + "\n")

    @classmethod
    def load_csv(cls, path) -> "Trajectory":
        with open(path) as fh:
            header = fh.readline().strip()
            fh.readline()  # column names
            raw = np.loadtxt(fh, delimiter=",", ndmin=2)
        if not header.startswith("# "):
            raise ConfigurationError(f"{path}: missing trajectory header")
        meta = {}
        for tok in header[2:].split():
            key, val = tok.split("=")
            meta[key] = val
        d = int(meta.pop("d"))
        if raw.shape[1] != d + 3:
            raise ConfigurationError(f"{path}: expected {d + 3} columns")
        return cls(
            states=raw[:, 2:2 + d],
            times=raw[:, 1],
            bias_values=raw[:, 2 + d],
            steps=raw[:, 0].astype(np.int64),
            meta={"beta": float(meta["beta"]), "dt": float(meta["dt"]),
                  "seed": int(meta["seed"])},
        )


def em_step(x, total_gradient, dt: float, beta: float, noise):
    """One Euler-Maruyama update: x - grad dt + sqrt(2 dt / beta) noise."""
    return x - total_gradient * dt + np.sqrt(2.0 * dt / beta) * noise


def simulate(potential: Potential, bias: Bias, params: SimulationParams) -> Trajectory:
    """Integrate under U + V, depositing metadynamics Gaussians on the fly.

    With a metadynamics bias, a Gaussian is deposited at the current state
    after every ``pace``-th step up to and including ``freeze_step``; the
    caller's bias object accumulates the centers.  Recorded bias values are
    taken after any deposit at that step.
    """
    d = params.x0.shape[0]
    if potential.dim != d:
        raise ConfigurationError(
            f"x0 dimension {d} != potential dim {potential.dim}")
    meta_bias = bias if isinstance(bias, MetadynamicsBias) else None
    if meta_bias is not None and meta_bias.dim != d:
        raise ConfigurationError("metadynamics bias dimension mismatch")

    rng = np.random.default_rng(params.seed)
    dt, beta, stride = params.dt, params.beta, params.save_stride
    sigma_dt = np.sqrt(2.0 * dt / beta)
    radius2 = params.domain_radius**2

    n_save = params.n_steps // stride
    states = np.empty((n_save, d))
    times = np.empty(n_save)
    bias_vals = np.empty(n_save)
    steps = np.empty(n_save, dtype=np.int64)

    x = params.x0.copy()
    grad_u = potential.gradient(x)
    bias_v, grad_v = bias.value_and_grad(x)
    k_save = 0
    noise = None
    for step in range(1, params.n_steps + 1):
        j = (step - 1) % _NOISE_BLOCK
        if j == 0:
            noise = rng.standard_normal((min(_NOISE_BLOCK, params.n_steps - step + 1), d))
        x = x - (grad_u + grad_v) * dt + sigma_dt * noise[j]
        # NaN fails the comparison too, so one dot product guards both cases
        if not x @ x <= radius2:
            raise SimulationDivergenceError(step)
        if (meta_bias is not None and step % meta_bias.pace == 0
                and step <= meta_bias.freeze_step):
            meta_bias.deposit(x, step)
        grad_u = potential.gradient(x)
        bias_v, grad_v = bias.value_and_grad(x)
        if step % stride == 0:
            states[k_save] = x
            times[k_save] = step * dt
            bias_vals[k_save] = bias_v
            steps[k_save] = step
            k_save += 1

    return Trajectory(
        states=states, times=times, bias_values=bias_vals, steps=steps,
        meta={
            "beta": beta, "dt": dt, "seed": params.seed,
            "potential": potential.id_string(), "bias": bias.id_string(),
        },
    )
