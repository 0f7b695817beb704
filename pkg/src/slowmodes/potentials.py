"""Analytic potentials and bias potentials with exact gradients.

All evaluators accept points of shape ``(d,)`` or batches ``(n, d)`` and
broadcast accordingly: values come back with the leading batch shape,
gradients with a trailing axis of length ``d``.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FrozenBiasError, InvalidInputError


class Potential:
    """Base class for analytic potentials."""

    kind = "base"
    dim: int

    def value(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def value_and_grad(self, x: np.ndarray):
        return self.value(x), self.gradient(x)

    def to_config(self) -> dict:
        raise NotImplementedError

    def id_string(self) -> str:
        return json.dumps(self.to_config(), sort_keys=True, separators=(",", ":"))


class DoubleWellTarget(Potential):
    """Two wells near x = +-0.35 separated by a Gaussian barrier of ~6 at x = 0.

    U(x) = 4 (1.5 exp(-80 x^2) + x^8).  The simulation companion
    :class:`DoubleWellSim` differs only in the barrier prefactor, so their
    difference is the attractive bias -4 exp(-80 x^2).
    """

    kind = "double_well_target"
    dim = 1
    barrier_coeff = 1.5

    def value(self, x):
        x = np.asarray(x, dtype=float)[..., 0]
        return 4.0 * (self.barrier_coeff * np.exp(-80.0 * x**2) + x**8)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)[..., 0]
        g = 4.0 * (self.barrier_coeff * (-160.0 * x) * np.exp(-80.0 * x**2) + 8.0 * x**7)
        return g[..., None]

    def value_and_grad(self, x):
        x = np.asarray(x, dtype=float)[..., 0]
        e = self.barrier_coeff * np.exp(-80.0 * x**2)
        x4 = x**4
        v = 4.0 * (e + x4 * x4)
        g = 4.0 * (-160.0 * x * e + 8.0 * x4 * x * x * x)
        return v, g[..., None]

    def to_config(self):
        return {"kind": self.kind}


class DoubleWellSim(DoubleWellTarget):
    """Double well with the barrier lowered from ~6 to ~2 for faster mixing."""

    kind = "double_well_sim"
    barrier_coeff = 0.5


class Harmonic(Potential):
    """U(x) = stiffness * ||x - center||^2 / 2 in any dimension."""

    kind = "harmonic"

    def __init__(self, stiffness: float = 1.0, dim: int = 1, center=None):
        if stiffness <= 0:
            raise ConfigurationError("harmonic stiffness must be positive")
        self.stiffness = float(stiffness)
        self.dim = int(dim)
        self.center = np.zeros(self.dim) if center is None else np.asarray(center, dtype=float)
        if self.center.shape != (self.dim,):
            raise ConfigurationError("harmonic center does not match dim")

    def value(self, x):
        d = np.asarray(x, dtype=float) - self.center
        return 0.5 * self.stiffness * np.sum(d * d, axis=-1)

    def gradient(self, x):
        d = np.asarray(x, dtype=float) - self.center
        return self.stiffness * d

    def value_and_grad(self, x):
        d = np.asarray(x, dtype=float) - self.center
        return 0.5 * self.stiffness * np.sum(d * d, axis=-1), self.stiffness * d

    def to_config(self):
        return {
            "kind": self.kind,
            "stiffness": self.stiffness,
            "dim": self.dim,
            "center": self.center.tolist(),
        }


# Standard Mueller-Brown constants; `scale` multiplies the whole surface so
# barrier heights can be expressed in units of 1/beta.
_MB_A = np.array([-200.0, -100.0, -170.0, 15.0])
_MB_a = np.array([-1.0, -1.0, -6.5, 0.7])
_MB_b = np.array([0.0, 0.0, 11.0, 0.6])
_MB_c = np.array([-10.0, -10.0, -6.5, 0.7])
_MB_x0 = np.array([1.0, 0.0, -0.5, -1.0])
_MB_y0 = np.array([0.0, 0.5, 1.5, 1.0])


class MuellerBrown(Potential):
    """Mueller-Brown surface: four anisotropic Gaussians, three minima."""

    kind = "mueller_brown"
    dim = 2

    def __init__(self, scale: float = 1.0):
        if scale <= 0:
            raise ConfigurationError("mueller_brown scale must be positive")
        self.scale = float(scale)

    def _terms(self, x):
        x = np.asarray(x, dtype=float)
        dx = x[..., 0:1] - _MB_x0
        dy = x[..., 1:2] - _MB_y0
        e = _MB_A * np.exp(_MB_a * dx * dx + _MB_b * dx * dy + _MB_c * dy * dy)
        return dx, dy, e

    def value(self, x):
        _, _, e = self._terms(x)
        return self.scale * np.sum(e, axis=-1)

    def gradient(self, x):
        dx, dy, e = self._terms(x)
        gx = np.sum(e * (2.0 * _MB_a * dx + _MB_b * dy), axis=-1)
        gy = np.sum(e * (_MB_b * dx + 2.0 * _MB_c * dy), axis=-1)
        return self.scale * np.stack([gx, gy], axis=-1)

    def value_and_grad(self, x):
        dx, dy, e = self._terms(x)
        v = self.scale * np.sum(e, axis=-1)
        gx = np.sum(e * (2.0 * _MB_a * dx + _MB_b * dy), axis=-1)
        gy = np.sum(e * (_MB_b * dx + 2.0 * _MB_c * dy), axis=-1)
        return v, self.scale * np.stack([gx, gy], axis=-1)

    def to_config(self):
        return {"kind": self.kind, "scale": self.scale}


class SumPotential(Potential):
    """Linear combination sum_i coef_i * U_i of potentials on the same space."""

    kind = "sum"

    def __init__(self, terms):
        terms = [(float(c), p) for c, p in terms]
        if not terms:
            raise ConfigurationError("sum potential needs at least one term")
        dims = {p.dim for _, p in terms}
        if len(dims) != 1:
            raise ConfigurationError(f"sum potential mixes dimensions {dims}")
        self.terms = terms
        self.dim = dims.pop()

    def value(self, x):
        return sum(c * p.value(x) for c, p in self.terms)

    def gradient(self, x):
        return sum(c * p.gradient(x) for c, p in self.terms)

    def value_and_grad(self, x):
        v = g = None
        for c, p in self.terms:
            vi, gi = p.value_and_grad(x)
            v = c * vi if v is None else v + c * vi
            g = c * gi if g is None else g + c * gi
        return v, g

    def to_config(self):
        return {
            "kind": self.kind,
            "terms": [{"coef": c, "potential": p.to_config()} for c, p in self.terms],
        }


def double_well_bias() -> SumPotential:
    """The analytic bias U_sim - U_target = -4 exp(-80 x^2)."""
    return SumPotential([(1.0, DoubleWellSim()), (-1.0, DoubleWellTarget())])


_POTENTIALS = {
    "double_well_target": DoubleWellTarget,
    "double_well_sim": DoubleWellSim,
    "mueller_brown": MuellerBrown,
    "harmonic": Harmonic,
    "sum": SumPotential,
}


def potential_from_config(cfg: dict) -> Potential:
    """Build a potential from its JSON-style configuration dict."""
    if not isinstance(cfg, dict) or "kind" not in cfg:
        raise ConfigurationError("potential config must be a dict with a 'kind'")
    kind = cfg["kind"]
    if kind not in _POTENTIALS:
        raise ConfigurationError(f"unknown potential kind {kind!r}")
    if kind == "sum":
        terms = [
            (t.get("coef", 1.0), potential_from_config(t["potential"]))
            for t in cfg.get("terms", [])
        ]
        return SumPotential(terms)
    kwargs = {k: v for k, v in cfg.items() if k != "kind"}
    return _POTENTIALS[kind](**kwargs)


# ---------------------------------------------------------------------------
# bias potentials


class Bias:
    """Base class for bias potentials V added on top of the target potential."""

    kind = "base"

    def value(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def value_and_grad(self, x: np.ndarray):
        return self.value(x), self.gradient(x)

    def to_config(self) -> dict:
        raise NotImplementedError

    def id_string(self) -> str:
        return json.dumps(self.to_config(), sort_keys=True, separators=(",", ":"))


class NoBias(Bias):
    kind = "none"

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1])

    def gradient(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def to_config(self):
        return {"kind": "none"}


class AnalyticBias(Bias):
    """A fixed analytic bias, expressed through a potential object."""

    kind = "static_analytic"

    def __init__(self, potential: Potential):
        self.potential = potential

    def value(self, x):
        return self.potential.value(x)

    def gradient(self, x):
        return self.potential.gradient(x)

    def value_and_grad(self, x):
        return self.potential.value_and_grad(x)

    def to_config(self):
        return {"kind": self.kind, "potential": self.potential.to_config()}


class MetadynamicsBias(Bias):
    """Sum of repulsive Gaussians deposited along the trajectory.

    V(x) = height * sum_i exp(-||x - c_i||^2 / (2 sigma^2)).  Deposition is
    append-only and refused after ``freeze_step`` so the production part of a
    run sees a time-independent potential.  Only the simulation loop that owns
    the object may deposit; evaluation is read-only.
    """

    kind = "metadynamics"

    def __init__(self, height: float, sigma: float, pace: int, freeze_step: int,
                 dim: int, centers=None):
        if sigma <= 0:
            raise ConfigurationError("metadynamics sigma must be positive")
        if height <= 0:
            raise ConfigurationError("metadynamics height must be positive")
        if pace < 1 or freeze_step < 0:
            raise ConfigurationError("metadynamics pace/freeze_step out of range")
        self.height = float(height)
        self.sigma = float(sigma)
        self.pace = int(pace)
        self.freeze_step = int(freeze_step)
        self.dim = int(dim)
        if centers is None:
            self._centers = np.zeros((0, self.dim))
        else:
            self._centers = np.asarray(centers, dtype=float).reshape(-1, self.dim).copy()

    @property
    def centers(self) -> np.ndarray:
        return self._centers

    @property
    def n_centers(self) -> int:
        return self._centers.shape[0]

    def deposit(self, center, step: int) -> "MetadynamicsBias":
        """Append one Gaussian at ``center``; rejected past the freeze step."""
        if step > self.freeze_step:
            raise FrozenBiasError(
                f"deposit at step {step} after freeze_step {self.freeze_step}")
        c = np.asarray(center, dtype=float).reshape(1, self.dim)
        self._centers = np.concatenate([self._centers, c], axis=0)
        return self

    def value(self, x):
        # same operation order as value_and_grad so recorded trajectory bias
        # values reproduce bit-exactly
        x = np.asarray(x, dtype=float)
        if self.n_centers == 0:
            return np.zeros(x.shape[:-1])
        d = x[..., None, :] - self._centers
        r2 = np.sum(d * d, axis=-1)
        e = self.height * np.exp(-r2 / (2.0 * self.sigma**2))
        return np.sum(e, axis=-1)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        if self.n_centers == 0:
            return np.zeros_like(x)
        d = x[..., None, :] - self._centers
        r2 = np.sum(d * d, axis=-1)
        e = self.height * np.exp(-r2 / (2.0 * self.sigma**2))
        return -np.sum(e[..., None] * d, axis=-2) / self.sigma**2

    def value_and_grad(self, x):
        x = np.asarray(x, dtype=float)
        if self.n_centers == 0:
            return np.zeros(x.shape[:-1]), np.zeros_like(x)
        d = x[..., None, :] - self._centers
        r2 = np.sum(d * d, axis=-1)
        e = self.height * np.exp(-r2 / (2.0 * self.sigma**2))
        return np.sum(e, axis=-1), -np.sum(e[..., None] * d, axis=-2) / self.sigma**2

    def to_config(self):
        return {
            "kind": self.kind,
            "height": self.height,
            "sigma": self.sigma,
            "pace": self.pace,
            "freeze_step": self.freeze_step,
            "dim": self.dim,
            "centers": self._centers.tolist(),
        }


def bias_from_config(cfg: dict) -> Bias:
    if not isinstance(cfg, dict) or "kind" not in cfg:
        raise ConfigurationError("bias config must be a dict with a 'kind'")
    kind = cfg["kind"]
    if kind == "none":
        return NoBias()
    if kind == "static_analytic":
        return AnalyticBias(potential_from_config(cfg["potential"]))
    if kind == "metadynamics":
        kwargs = {k: v for k, v in cfg.items() if k != "kind"}
        return MetadynamicsBias(**kwargs)
    raise ConfigurationError(f"unknown bias kind {kind!r}")


def save_bias(bias: Bias, path) -> None:
    Path(path).write_text(json.dumps(bias.to_config(), indent=1))


def load_bias(path) -> Bias:
    return bias_from_config(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# validated operation surface


def eval_potential(potential: Potential, x):
    """Validated (value, gradient) evaluation of a potential."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != potential.dim:
        raise ConfigurationError(
            f"point dimension {x.shape[-1]} != potential dim {potential.dim}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("non-finite input point")
    return potential.value_and_grad(x)


def eval_bias(bias: Bias, x):
    """Validated (value, gradient) evaluation of a bias potential."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("non-finite input point")
    return bias.value_and_grad(x)


def deposit_gaussian(bias: Bias, center, step: int) -> MetadynamicsBias:
    """Append one metadynamics Gaussian; only valid for metadynamics biases."""
    if not isinstance(bias, MetadynamicsBias):
        raise ConfigurationError("deposit_gaussian requires a metadynamics bias")
    return bias.deposit(center, step)
