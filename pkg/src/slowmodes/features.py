"""Feature dictionaries z = (z_1..z_m) with batched values and exact
input-Jacobians: Gaussian RBF, random Fourier, and tanh multilayer
perceptrons (m independent single-output heads).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, NumericError


@dataclass
class FeatureEval:
    values: np.ndarray     # (n, m)
    jacobians: np.ndarray  # (n, m, d)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]


class FeatureDictionary:
    """Base class; concrete kinds implement `_evaluate` on (n, d) input."""

    kind = "base"
    d: int
    include_constant: bool = False

    @property
    def m(self) -> int:
        """Total number of features, constant included when requested."""
        return self._m_raw() + int(self.include_constant)

    def _m_raw(self) -> int:
        raise NotImplementedError

    def _evaluate(self, X: np.ndarray) -> FeatureEval:
        raise NotImplementedError

    def evaluate(self, X: np.ndarray) -> FeatureEval:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.d:
            raise ConfigurationError(
                f"input dimension {X.shape[1]} != dictionary dim {self.d}")
        fe = self._evaluate(X)
        if self.include_constant:
            n = X.shape[0]
            values = np.concatenate([np.ones((n, 1)), fe.values], axis=1)
            jac = np.concatenate([np.zeros((n, 1, self.d)), fe.jacobians], axis=1)
            fe = FeatureEval(values, jac)
        return fe

    def to_config(self) -> dict:
        raise NotImplementedError


class RbfDictionary(FeatureDictionary):
    """z_j(x) = exp(-||x - c_j||^2 / (2 l^2)) on fixed centers."""

    kind = "rbf"

    def __init__(self, centers: np.ndarray, lengthscale: float,
                 include_constant: bool = False):
        if lengthscale <= 0:
            raise ConfigurationError("rbf lengthscale must be positive")
        self.centers = np.atleast_2d(np.asarray(centers, dtype=float))
        self.lengthscale = float(lengthscale)
        self.d = self.centers.shape[1]
        self.include_constant = bool(include_constant)

    def _m_raw(self):
        return self.centers.shape[0]

    def _evaluate(self, X):
        diff = X[:, None, :] - self.centers[None, :, :]   # (n, mc, d)
        r2 = np.sum(diff * diff, axis=-1)
        vals = np.exp(-r2 / (2.0 * self.lengthscale**2))
        jac = -vals[:, :, None] * diff / self.lengthscale**2
        return FeatureEval(vals, jac)

    def to_config(self):
        return {"kind": self.kind, "lengthscale": self.lengthscale,
                "include_constant": self.include_constant,
                "centers": self.centers.tolist()}


class FourierDictionary(FeatureDictionary):
    """z_j(x) = cos(w_j . x + phi_j) with Gaussian frequencies."""

    kind = "fourier"

    def __init__(self, freqs: np.ndarray, phases: np.ndarray,
                 include_constant: bool = False):
        self.freqs = np.atleast_2d(np.asarray(freqs, dtype=float))
        self.phases = np.asarray(phases, dtype=float)
        if self.phases.shape[0] != self.freqs.shape[0]:
            raise ConfigurationError("fourier freqs/phases length mismatch")
        self.d = self.freqs.shape[1]
        self.include_constant = bool(include_constant)

    def _m_raw(self):
        return self.freqs.shape[0]

    def _evaluate(self, X):
        phase = X @ self.freqs.T + self.phases
        vals = np.cos(phase)
        jac = -np.sin(phase)[:, :, None] * self.freqs[None, :, :]
        return FeatureEval(vals, jac)

    def to_config(self):
        return {"kind": self.kind, "include_constant": self.include_constant,
                "freqs": self.freqs.tolist(), "phases": self.phases.tolist()}


class MlpDictionary(FeatureDictionary):
    """m independent tanh MLP heads with one linear output each.

    Parameters are stacked over heads: weights[l] has shape
    (heads, out_l, in_l), biases[l] has shape (heads, out_l).  Hidden layers
    use tanh; the output layer is linear.  Jacobians follow the layer chain
    J_l = diag(1 - a_l^2) W_l J_{l-1}.
    """

    kind = "mlp"

    def __init__(self, weights, biases, include_constant: bool = False):
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ConfigurationError("mlp needs matching weight/bias lists")
        heads = self.weights[0].shape[0]
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 3 or b.ndim != 2 or w.shape[0] != heads \
                    or w.shape[1] != b.shape[1]:
                raise ConfigurationError("inconsistent mlp parameter shapes")
        if self.weights[-1].shape[1] != 1:
            raise ConfigurationError("mlp heads must have a single output")
        self.heads = heads
        self.d = self.weights[0].shape[2]
        self.include_constant = bool(include_constant)

    def _m_raw(self):
        return self.heads

    @property
    def widths(self):
        return [w.shape[1] for w in self.weights[:-1]]

    def _evaluate(self, X):
        n = X.shape[0]
        a = np.broadcast_to(X[:, None, :], (n, self.heads, self.d))
        jac = np.broadcast_to(np.eye(self.d)[None, None], (n, self.heads, self.d, self.d))
        n_layers = len(self.weights)
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            pre = np.einsum("moi,nmi->nmo", w, a) + b
            jpre = np.einsum("moi,nmid->nmod", w, jac)
            if l < n_layers - 1:
                a = np.tanh(pre)
                if not np.all(np.isfinite(a)):
                    raise NumericError(f"non-finite activation in mlp layer {l}")
                jac = (1.0 - a * a)[..., None] * jpre
            else:
                a, jac = pre, jpre
        return FeatureEval(a[:, :, 0], jac[:, :, 0, :])

    def to_config(self):
        return {"kind": self.kind, "include_constant": self.include_constant,
                "heads": self.heads, "d": self.d,
                "widths": self.widths,
                "weights": [w.tolist() for w in self.weights],
                "biases": [b.tolist() for b in self.biases]}


# ---------------------------------------------------------------------------
# constructors


def make_rbf(centers, lengthscale: float, include_constant: bool = False) -> RbfDictionary:
    return RbfDictionary(centers, lengthscale, include_constant)


def make_fourier(d: int, m: int, lengthscale: float, seed: int,
                 include_constant: bool = False) -> FourierDictionary:
    """Random Fourier features: freqs ~ N(0, 1/l^2), phases ~ U[0, 2pi)."""
    if lengthscale <= 0:
        raise ConfigurationError("fourier lengthscale must be positive")
    rng = np.random.default_rng(seed)
    freqs = rng.standard_normal((m, d)) / lengthscale
    phases = rng.uniform(0.0, 2.0 * np.pi, size=m)
    return FourierDictionary(freqs, phases, include_constant)


def make_mlp(d: int, heads: int, hidden=(20, 20), seed: int = 0,
             include_constant: bool = False) -> MlpDictionary:
    """Glorot-uniform initialized tanh heads with zero biases."""
    rng = np.random.default_rng(seed)
    sizes = [d, *hidden, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(heads, fan_out, fan_in)))
        biases.append(np.zeros((heads, fan_out)))
    return MlpDictionary(weights, biases, include_constant)


def rbf_centers_from_data(X: np.ndarray, m: int, bins_per_dim: int | None = None) -> np.ndarray:
    """Deterministic stratified centers: bin the data, average points per
    occupied bin, then thin evenly to at most m centers."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, d = X.shape
    if m < 1:
        raise ConfigurationError("need at least one center")
    if bins_per_dim is None:
        bins_per_dim = max(4, int(np.ceil((4 * m) ** (1.0 / d))))
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    ix = np.minimum((bins_per_dim * (X - lo) / span).astype(np.int64), bins_per_dim - 1)
    flat = ix @ (bins_per_dim ** np.arange(d - 1, -1, -1, dtype=np.int64))
    order = np.argsort(flat, kind="stable")
    flat_sorted = flat[order]
    starts = np.flatnonzero(np.concatenate([[True], np.diff(flat_sorted) != 0]))
    counts = np.diff(np.concatenate([starts, [n]]))
    sums = np.add.reduceat(X[order], starts, axis=0)
    centers = sums / counts[:, None]
    if centers.shape[0] > m:
        pick = np.linspace(0, centers.shape[0] - 1, m).round().astype(int)
        centers = centers[pick]
    return centers


_KINDS = {"rbf": RbfDictionary, "fourier": FourierDictionary, "mlp": MlpDictionary}


def dictionary_from_config(cfg: dict) -> FeatureDictionary:
    if not isinstance(cfg, dict) or "kind" not in cfg:
        raise ConfigurationError("dictionary config must be a dict with a 'kind'")
    kind = cfg["kind"]
    if kind == "rbf":
        return RbfDictionary(np.asarray(cfg["centers"]), cfg["lengthscale"],
                             cfg.get("include_constant", False))
    if kind == "fourier":
        return FourierDictionary(np.asarray(cfg["freqs"]), np.asarray(cfg["phases"]),
                                 cfg.get("include_constant", False))
    if kind == "mlp":
        return MlpDictionary(cfg["weights"], cfg["biases"],
                             cfg.get("include_constant", False))
    raise ConfigurationError(f"unknown dictionary kind {kind!r}")


def save_dictionary(dictionary: FeatureDictionary, path) -> None:
    Path(path).write_text(json.dumps(dictionary.to_config()))


def load_dictionary(path) -> FeatureDictionary:
    return dictionary_from_config(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# validated operation surface


def evaluate(dictionary: FeatureDictionary, X) -> FeatureEval:
    """Batched (values, jacobians) of every feature at every row of X."""
    return dictionary.evaluate(X)


def mlp_forward_jac(dictionary: MlpDictionary, X) -> FeatureEval:
    """Forward pass with layer-wise Jacobian chain; mlp dictionaries only."""
    if not isinstance(dictionary, MlpDictionary):
        raise ConfigurationError("mlp_forward_jac requires an mlp dictionary")
    return dictionary.evaluate(X)
