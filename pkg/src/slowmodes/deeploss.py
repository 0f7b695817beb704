"""Training of the MLP feature dictionary by the two-batch spectral loss.

The loss on batch pair (1, 2) with per-batch weighted covariances (C^k, W^k)
and mean weights wb^k is

    tr[ (C^1 L W^2 L + C^2 L W^1 L)/2 - wb^1 C^2 L - wb^2 C^1 L
        + alpha (C^1 - wb^1 I)(C^2 - wb^2 I) ],

with L = diag(1/(eta - lambda_i)) and trainable lambda_i = -softplus(s_i).
Gradients flow through the feature Jacobians inside W (mixed second
derivatives of the network); they are exact up to floating point and are
checked against central finite differences on demand.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import WeightedDataset, split as split_dataset
from .errors import ConfigurationError, GradientCheckError, NumericError
from .features import MlpDictionary, make_mlp

torch.set_grad_enabled(True)
_DTYPE = torch.float64
_VAL_CAP = 8192


@dataclass
class SpectralModel:
    """MLP dictionary plus trainable eigenvalue parameters.

    lambda_i = -softplus(s_i) keeps every trainable eigenvalue strictly
    negative, so the diagonal resolvent weights 1/(eta - lambda_i) stay in
    (0, 1/eta).
    """

    dictionary: MlpDictionary
    s: np.ndarray
    eta: float
    alpha: float

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=float)
        if self.s.shape != (self.dictionary.m,):
            raise ConfigurationError("s must have one entry per feature")
        if self.eta <= 0 or self.alpha < 0:
            raise ConfigurationError("need eta > 0 and alpha >= 0")

    @property
    def lambdas(self) -> np.ndarray:
        return -np.logaddexp(0.0, self.s)

    def clone(self) -> "SpectralModel":
        d = self.dictionary
        dict_copy = MlpDictionary([w.copy() for w in d.weights],
                                  [b.copy() for b in d.biases], d.include_constant)
        return SpectralModel(dict_copy, self.s.copy(), self.eta, self.alpha)


def make_spectral_model(d: int, heads: int, eta: float, alpha: float,
                        hidden=(20, 20), seed: int = 0,
                        include_constant: bool = False) -> SpectralModel:
    """Glorot-initialized heads; s_i spread so lambda_i = -(i+1) eta."""
    dictionary = make_mlp(d, heads, hidden=hidden, seed=seed,
                          include_constant=include_constant)
    target = np.arange(1, dictionary.m + 1) * eta
    s = np.log(np.expm1(target))  # softplus inverse
    return SpectralModel(dictionary, s, eta, alpha)


@dataclass
class TrainConfig:
    learning_rate: float
    batch_size: int
    max_steps: int
    seed: int
    grad_check_every: int = 0
    val_every: int = 100
    early_stop: int = 0  # patience in validation rounds; 0 disables

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.batch_size < 4 or self.batch_size % 2:
            raise ConfigurationError("batch_size must be even and >= 4")
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be >= 1")


@dataclass
class TrainHistory:
    steps: np.ndarray
    loss: np.ndarray
    val_loss: np.ndarray   # most recent validation value at each step
    lambdas: np.ndarray    # (n_steps, m)
    best_step: int = -1
    meta: dict = field(default_factory=dict)

    def save_csv(self, path) -> None:
        m = self.lambdas.shape[1]
        cols = ["step", "loss", "val_loss"] + [f"lambda{i}" for i in range(m)]
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for i in range(len(self.steps)):
                row = [f"{self.steps[i]:d}", "%.17g" % self.loss[i],
                       "%.17g" % self.val_loss[i]]
                row += ["%.17g" % v for v in self.lambdas[i]]
                fh.write(",".join(row) + "\n")


# ---------------------------------------------------------------------------
# torch graph


def _to_torch(model: SpectralModel, requires_grad: bool):
    d = model.dictionary
    ws = [torch.tensor(w, dtype=_DTYPE, requires_grad=requires_grad) for w in d.weights]
    bs = [torch.tensor(b, dtype=_DTYPE, requires_grad=requires_grad) for b in d.biases]
    s = torch.tensor(model.s, dtype=_DTYPE, requires_grad=requires_grad)
    return ws, bs, s


def _sync_back(model: SpectralModel, ws, bs, s) -> SpectralModel:
    dictionary = MlpDictionary([w.detach().numpy().copy() for w in ws],
                               [b.detach().numpy().copy() for b in bs],
                               model.dictionary.include_constant)
    return SpectralModel(dictionary, s.detach().numpy().copy(), model.eta, model.alpha)


def _forward_jac(ws, bs, X, include_constant: bool):
    n, d = X.shape
    heads = ws[0].shape[0]
    a = X[:, None, :].expand(n, heads, d)
    jac = torch.eye(d, dtype=X.dtype)[None, None].expand(n, heads, d, d)
    last = len(ws) - 1
    for l, (w, b) in enumerate(zip(ws, bs)):
        pre = torch.einsum("moi,nmi->nmo", w, a) + b
        jpre = torch.einsum("moi,nmid->nmod", w, jac)
        if l < last:
            a = torch.tanh(pre)
            jac = (1.0 - a * a)[..., None] * jpre
        else:
            a, jac = pre, jpre
    z, J = a[:, :, 0], jac[:, :, 0, :]
    if include_constant:
        z = torch.cat([torch.ones(n, 1, dtype=X.dtype), z], dim=1)
        J = torch.cat([torch.zeros(n, 1, d, dtype=X.dtype), J], dim=1)
    return z, J


def _batch_cov(ws, bs, batch: WeightedDataset, bias_grads, eta, include_constant):
    X = torch.tensor(batch.states, dtype=_DTYPE)
    w = torch.tensor(batch.weights, dtype=_DTYPE)
    g = None
    if bias_grads is not None:
        g = torch.tensor(np.asarray(bias_grads), dtype=_DTYPE)
    elif batch.bias_grads is not None:
        g = torch.tensor(batch.bias_grads, dtype=_DTYPE)
    z, J = _forward_jac(ws, bs, X, include_constant)
    n = z.shape[0]
    beta = batch.beta
    C = torch.einsum("n,ni,nj->ij", w, z, z) / n
    D = J if g is None else J + (0.5 * beta) * g[:, None, :] * z[:, :, None]
    D = torch.sqrt(w)[:, None, None] * D
    W = eta * C + torch.einsum("nik,njk->ij", D, D) / (n * beta)
    return C, W, w.mean()


def _loss_graph(model, ws, bs, s, batch1, batch2, bias_grads1, bias_grads2):
    if batch1.d != model.dictionary.d or batch2.d != model.dictionary.d:
        raise ConfigurationError("batch dimension does not match the dictionary")
    eta, alpha = model.eta, model.alpha
    inc = model.dictionary.include_constant
    C1, W1, wb1 = _batch_cov(ws, bs, batch1, bias_grads1, eta, inc)
    C2, W2, wb2 = _batch_cov(ws, bs, batch2, bias_grads2, eta, inc)
    lam = torch.diag(1.0 / (eta + torch.nn.functional.softplus(s)))
    L1 = lam @ C1 @ lam
    L2 = lam @ C2 @ lam
    loss = 0.5 * ((L1 * W2).sum() + (L2 * W1).sum())
    loss = loss - wb1 * (torch.diagonal(C2) * torch.diagonal(lam)).sum()
    loss = loss - wb2 * (torch.diagonal(C1) * torch.diagonal(lam)).sum()
    if alpha > 0:
        eye = torch.eye(C1.shape[0], dtype=_DTYPE)
        loss = loss + alpha * ((C1 - wb1 * eye) * (C2 - wb2 * eye)).sum()
    return loss


def loss_biased(model: SpectralModel, batch1: WeightedDataset,
                batch2: WeightedDataset, bias_grads1=None, bias_grads2=None) -> float:
    """Two-batch empirical spectral loss (scalar)."""
    with torch.no_grad():
        ws, bs, s = _to_torch(model, requires_grad=False)
        loss = _loss_graph(model, ws, bs, s, batch1, batch2, bias_grads1, bias_grads2)
    val = float(loss)
    if not np.isfinite(val):
        raise NumericError(
            f"non-finite loss (batch sizes {batch1.n}/{batch2.n}, "
            f"max |log w| {np.abs(batch1.log_weights).max():.3g})")
    return val


def loss_gradient(model: SpectralModel, batch1: WeightedDataset,
                  batch2: WeightedDataset, bias_grads1=None, bias_grads2=None):
    """Exact gradients of :func:`loss_biased` for every parameter block.

    Returns ``{"weights": [...], "biases": [...], "s": array}`` matching the
    shapes of the dictionary parameters.
    """
    ws, bs, s = _to_torch(model, requires_grad=True)
    loss = _loss_graph(model, ws, bs, s, batch1, batch2, bias_grads1, bias_grads2)
    if not torch.isfinite(loss):
        raise NumericError("non-finite loss in gradient evaluation")
    loss.backward()
    grad = lambda t: np.zeros(tuple(t.shape)) if t.grad is None else t.grad.numpy().copy()
    return {"weights": [grad(w) for w in ws],
            "biases": [grad(b) for b in bs],
            "s": grad(s)}


def grad_check(model: SpectralModel, batch1: WeightedDataset,
               batch2: WeightedDataset, bias_grads1=None, bias_grads2=None,
               n_probe: int = 3, tol: float = 1e-4, seed: int = 0) -> float:
    """Probe random entries of every parameter block against central
    differences; raises GradientCheckError beyond ``tol`` relative error."""
    rng = np.random.default_rng(seed)
    analytic = loss_gradient(model, batch1, batch2, bias_grads1, bias_grads2)

    def loss_at(m):
        return loss_biased(m, batch1, batch2, bias_grads1, bias_grads2)

    worst = 0.0
    blocks = []
    nl = len(model.dictionary.weights)
    for l in range(nl):
        blocks.append((f"weights[{l}]",
                       lambda m, l=l: m.dictionary.weights[l], analytic["weights"][l]))
        blocks.append((f"biases[{l}]",
                       lambda m, l=l: m.dictionary.biases[l], analytic["biases"][l]))
    blocks.append(("s", lambda m: m.s, analytic["s"]))

    for name, get, g_block in blocks:
        flat_size = g_block.size
        probes = rng.choice(flat_size, size=min(n_probe, flat_size), replace=False)
        for p in probes:
            idx = np.unravel_index(p, g_block.shape)
            work = model.clone()
            theta = get(work)
            h = 1e-6 * (1.0 + abs(theta[idx]))
            theta[idx] += h
            up = loss_at(work)
            theta[idx] -= 2 * h
            down = loss_at(work)
            theta[idx] += h
            fd = (up - down) / (2 * h)
            an = g_block[idx]
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
            worst = max(worst, rel)
            if rel > tol:
                raise GradientCheckError(
                    f"{name}{list(idx)}: analytic {an:.6e} vs fd {fd:.6e} "
                    f"(rel {rel:.2e} > {tol:.0e})")
    return worst


# ---------------------------------------------------------------------------
# training loop


def train(dataset: WeightedDataset, model: SpectralModel, cfg: TrainConfig,
          val_dataset: WeightedDataset | None = None):
    """Adam on shuffled disjoint half-batch pairs; returns the model with the
    best validation loss plus the full per-step history.

    Deterministic given ``cfg.seed`` (batching, initialization and the Adam
    updates all derive from it).
    """
    if dataset.n < 2 * cfg.batch_size:
        raise ConfigurationError("dataset smaller than two batches")
    if val_dataset is None:
        dataset, val_dataset = split_dataset(dataset, 0.8, cfg.seed)

    rng = np.random.default_rng(cfg.seed)
    ws, bs, s = _to_torch(model, requires_grad=True)
    params = [*ws, *bs, s]
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)

    # fixed validation batch pair
    vperm = np.random.default_rng(cfg.seed + 1).permutation(val_dataset.n)
    half_v = min(val_dataset.n // 2, _VAL_CAP)
    vb1 = val_dataset.subset(vperm[:half_v])
    vb2 = val_dataset.subset(vperm[half_v:2 * half_v])

    def val_loss_now():
        with torch.no_grad():
            return float(_loss_graph(model, ws, bs, s, vb1, vb2, None, None))

    half = cfg.batch_size // 2
    n = dataset.n
    hist_loss = np.empty(cfg.max_steps)
    hist_val = np.empty(cfg.max_steps)
    hist_lam = np.empty((cfg.max_steps, model.dictionary.m))
    best_val = np.inf
    best_state = [p.detach().clone() for p in params]
    best_step = -1
    last_val = val_loss_now()
    stall = 0
    done = 0

    for step in range(cfg.max_steps):
        idx = rng.permutation(n)[:cfg.batch_size]
        b1 = dataset.subset(idx[:half])
        b2 = dataset.subset(idx[half:])

        if cfg.grad_check_every and step % cfg.grad_check_every == 0:
            snap = _sync_back(model, ws, bs, s)
            grad_check(snap, b1, b2, seed=cfg.seed + step)

        opt.zero_grad()
        loss = _loss_graph(model, ws, bs, s, b1, b2, None, None)
        if not torch.isfinite(loss):
            raise NumericError(f"training loss diverged at step {step}")
        loss.backward()
        opt.step()

        hist_loss[step] = loss.item()
        with torch.no_grad():
            hist_lam[step] = (-torch.nn.functional.softplus(s)).numpy()
        done = step + 1

        if (step + 1) % cfg.val_every == 0 or step == cfg.max_steps - 1:
            last_val = val_loss_now()
            if last_val < best_val:
                best_val = last_val
                best_state = [p.detach().clone() for p in params]
                best_step = step
                stall = 0
            else:
                stall += 1
                if cfg.early_stop and stall >= cfg.early_stop:
                    hist_val[step] = last_val
                    break
        hist_val[step] = last_val

    if best_step < 0:
        best_state, best_step = [p.detach().clone() for p in params], done - 1
    with torch.no_grad():
        for p, q in zip(params, best_state):
            p.copy_(q)
    trained = _sync_back(model, ws, bs, s)
    history = TrainHistory(
        steps=np.arange(done, dtype=np.int64), loss=hist_loss[:done],
        val_loss=hist_val[:done], lambdas=hist_lam[:done], best_step=best_step,
        meta={"best_val": best_val, "config": cfg.__dict__.copy()},
    )
    return trained, history


def sweep_alpha(dataset: WeightedDataset, model: SpectralModel, cfg: TrainConfig,
                alphas) -> list[dict]:
    """Train clones of ``model`` across orthonormality weights; returns one
    record per alpha with the trained model and its best validation loss."""
    out = []
    for alpha in alphas:
        m = replace(model.clone(), alpha=float(alpha))
        trained, history = train(dataset, m, cfg)
        out.append({"alpha": float(alpha), "model": trained,
                    "best_val": history.meta["best_val"], "history": history})
    return out


# ---------------------------------------------------------------------------
# checkpointing


def save_model(model: SpectralModel, path) -> None:
    doc = {"dictionary": model.dictionary.to_config(), "s": model.s.tolist(),
           "eta": model.eta, "alpha": model.alpha}
    Path(path).write_text(json.dumps(doc))


def load_model(path) -> SpectralModel:
    from .features import dictionary_from_config

    doc = json.loads(Path(path).read_text())
    dictionary = dictionary_from_config(doc["dictionary"])
    if not isinstance(dictionary, MlpDictionary):
        raise ConfigurationError("spectral model checkpoint must hold an mlp dictionary")
    return SpectralModel(dictionary, np.asarray(doc["s"]), doc["eta"], doc["alpha"])
