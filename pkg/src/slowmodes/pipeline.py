"""End-to-end experiment stages: simulate -> weight -> (train) -> fit ->
oracle -> compare.

Each stage reads its inputs from files in the output directory (or paths
named in the config) and writes its own artifacts, so running the `pipeline`
subcommand is byte-equivalent to composing the stage subcommands with the
same configuration.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import transfer_covariances_streaming, transfer_eigensolve
from .data import WeightedDataset, compute_weights, make_lagged_pairs
from .deeploss import (SpectralModel, TrainConfig, load_model,
                       make_spectral_model, save_model, train)
from .dynamics import SimulationParams, Trajectory, simulate
from .errors import ConfigurationError
from .features import (FeatureDictionary, MlpDictionary, dictionary_from_config,
                       load_dictionary, make_fourier, make_rbf,
                       rbf_centers_from_data, save_dictionary)
from .genlearn import (EigenpairSet, assemble_covariances_streaming,
                       evaluate_eigenfunction, ridge_eigensolve, sin_angle)
from .oracle import GridEigenpairs, GridSpec, grid_generator_eig
from .potentials import (Bias, MetadynamicsBias, bias_from_config, load_bias,
                         potential_from_config, save_bias)

_FILES = {
    "trajectory": "trajectory.csv",
    "bias": "bias.json",
    "dictionary": "dictionary.json",
    "model": "model.json",
    "history": "history.csv",
    "eigenpairs": "eigenpairs.json",
    "eigenfunctions": "eigenfunctions.csv",
    "oracle": "oracle.json",
    "oracle_functions": "oracle_eigenfunctions.csv",
    "comparison": "comparison.csv",
    "results": "results.json",
}


@dataclass
class ResultsBundle:
    outdir: Path
    results: dict
    files: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# configuration


_DEFAULTS = {
    "seed": 0,
    "bias": {"kind": "none"},
    "dataset": {"trajectory": None, "include_buildup": False},
    "generator": {"gamma": 1e-5, "weighted": True},
    "outputs": {"eigenfunction_grid": 512},
}


def resolve_config(cfg: dict) -> dict:
    """Validate and normalize a pipeline configuration document."""
    if not isinstance(cfg, dict):
        raise ConfigurationError("config must be a JSON object")
    out = json.loads(json.dumps(cfg))  # deep copy, JSON-typed
    for key, val in _DEFAULTS.items():
        if isinstance(val, dict):
            merged = dict(val)
            merged.update(out.get(key, {}))
            out[key] = merged
        else:
            out.setdefault(key, val)

    if "potential" not in out:
        raise ConfigurationError("config needs a 'potential' section")
    potential_from_config(out["potential"])  # raises on malformed kinds

    has_sim = "simulation" in out
    has_traj = out["dataset"].get("trajectory") is not None
    if not has_sim and not has_traj:
        raise ConfigurationError(
            "config needs either a 'simulation' section or dataset.trajectory")

    dict_cfg = out.get("dictionary")
    if dict_cfg is not None:
        source = dict_cfg.get("source")
        if source not in ("build", "load", "train"):
            raise ConfigurationError("dictionary.source must be build|load|train")
        if source == "build" and "build" not in dict_cfg:
            raise ConfigurationError("dictionary.source=build needs a 'build' section")
        if source == "load":
            path = dict_cfg.get("load", {}).get("path")
            if not path or not Path(path).exists():
                raise ConfigurationError(f"dictionary file not found: {path}")
        if source == "train" and "training" not in out:
            raise ConfigurationError("dictionary.source=train needs a 'training' section")

    gen = out.get("generator")
    if gen is not None:
        if "eta" not in gen or gen["eta"] <= 0:
            raise ConfigurationError("generator.eta must be set and positive")
        if gen["gamma"] < 0:
            raise ConfigurationError("generator.gamma must be >= 0")
    return out


def load_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigurationError(f"cannot read config {path}: {err}") from err
    return resolve_config(doc)


def _beta_of(cfg: dict, traj: Trajectory) -> float:
    if "simulation" in cfg:
        return float(cfg["simulation"]["beta"])
    return float(traj.meta["beta"])


# ---------------------------------------------------------------------------
# stages


def stage_simulate(cfg: dict, outdir: Path) -> Path:
    """Run the configured simulation; writes trajectory.csv and bias.json."""
    if "simulation" not in cfg:
        raise ConfigurationError("no 'simulation' section to run")
    sim = cfg["simulation"]
    potential = potential_from_config(cfg["potential"])
    bias = bias_from_config(cfg["bias"])
    params = SimulationParams(
        beta=sim["beta"], dt=sim["dt"], n_steps=int(sim["n_steps"]),
        x0=sim["x0"], seed=int(sim.get("seed", cfg["seed"])),
        save_stride=int(sim.get("save_stride", 1)),
        domain_radius=float(sim.get("domain_radius", 1e3)),
    )
    traj = simulate(potential, bias, params)
    traj.save_csv(outdir / _FILES["trajectory"])
    save_bias(bias, outdir / _FILES["bias"])
    return outdir / _FILES["trajectory"]


def _load_traj_bias(cfg: dict, outdir: Path):
    traj_path = cfg["dataset"].get("trajectory") or outdir / _FILES["trajectory"]
    if not Path(traj_path).exists():
        raise ConfigurationError(f"trajectory not found: {traj_path}; run simulate first")
    traj = Trajectory.load_csv(traj_path)
    bias_path = outdir / _FILES["bias"]
    if bias_path.exists():
        bias = load_bias(bias_path)
    else:
        bias = bias_from_config(cfg["bias"])
    return traj, bias


def _dataset(cfg: dict, outdir: Path) -> WeightedDataset:
    traj, bias = _load_traj_bias(cfg, outdir)
    beta = _beta_of(cfg, traj)
    return compute_weights(traj, beta, bias=bias,
                           include_buildup=bool(cfg["dataset"]["include_buildup"]))


def _production_trajectory(traj: Trajectory, bias: Bias, include_buildup: bool) -> Trajectory:
    if isinstance(bias, MetadynamicsBias) and not include_buildup:
        mask = traj.steps >= bias.freeze_step
        return Trajectory(states=traj.states[mask], times=traj.times[mask],
                          bias_values=traj.bias_values[mask],
                          steps=traj.steps[mask], meta=dict(traj.meta))
    return traj


def stage_train(cfg: dict, outdir: Path) -> Path:
    """Train the MLP dictionary on the weighted dataset; writes model.json
    and history.csv."""
    tr = cfg.get("training")
    if tr is None:
        raise ConfigurationError("no 'training' section configured")
    dataset = _dataset(cfg, outdir)
    eta = float(cfg["generator"]["eta"])
    heads = int(tr["heads"])
    model = make_spectral_model(
        d=dataset.d, heads=heads, eta=eta,
        alpha=float(tr.get("alpha", 0.01 * heads)),
        hidden=tuple(tr.get("hidden", (20, 20))),
        seed=int(tr.get("seed", cfg["seed"])),
    )
    tcfg = TrainConfig(
        learning_rate=float(tr["learning_rate"]),
        batch_size=int(tr["batch_size"]),
        max_steps=int(tr["max_steps"]),
        seed=int(tr.get("seed", cfg["seed"])),
        grad_check_every=int(tr.get("grad_check_every", 0)),
        val_every=int(tr.get("val_every", 100)),
        early_stop=int(tr.get("early_stop", 0)),
    )
    trained, history = train(dataset, model, tcfg)
    save_model(trained, outdir / _FILES["model"])
    history.save_csv(outdir / _FILES["history"])
    return outdir / _FILES["model"]


def _resolve_dictionary(cfg: dict, outdir: Path,
                        dataset: WeightedDataset) -> FeatureDictionary:
    dcfg = cfg.get("dictionary")
    if dcfg is None:
        raise ConfigurationError("no 'dictionary' section configured")
    source = dcfg["source"]
    if source == "load":
        return load_dictionary(dcfg["load"]["path"])
    if source == "train":
        model_path = outdir / _FILES["model"]
        if not model_path.exists():
            raise ConfigurationError("model.json not found; run train first")
        model = load_model(model_path)
        dictionary = model.dictionary
        if cfg.get("training", {}).get("include_constant_in_fit", True):
            dictionary = MlpDictionary(dictionary.weights, dictionary.biases,
                                       include_constant=True)
        return dictionary
    build = dcfg["build"]
    kind = build.get("kind", "rbf")
    if kind == "rbf":
        centers = rbf_centers_from_data(dataset.states, int(build["m"]))
        return make_rbf(centers, float(build["lengthscale"]),
                        include_constant=bool(build.get("include_constant", False)))
    if kind == "fourier":
        return make_fourier(dataset.d, int(build["m"]), float(build["lengthscale"]),
                            seed=int(build.get("seed", cfg["seed"])),
                            include_constant=bool(build.get("include_constant", False)))
    raise ConfigurationError(f"cannot build dictionary of kind {kind!r}")


def _eigenfunction_grid(cfg: dict, dataset: WeightedDataset) -> np.ndarray:
    pts = int(cfg["outputs"]["eigenfunction_grid"])
    if "oracle" in cfg:
        lo = np.asarray(cfg["oracle"]["lo"], dtype=float)
        hi = np.asarray(cfg["oracle"]["hi"], dtype=float)
    else:
        lo, hi = dataset.states.min(axis=0), dataset.states.max(axis=0)
    d = len(lo)
    if d == 1:
        return np.linspace(lo[0], hi[0], pts)[:, None]
    per_dim = max(2, int(np.sqrt(pts)))
    axes = [np.linspace(lo[k], hi[k], per_dim) for k in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def stage_fit(cfg: dict, outdir: Path) -> Path:
    """Assemble covariances on the full dataset and solve the ridge
    eigenproblem; writes dictionary.json, eigenpairs.json, eigenfunctions.csv."""
    dataset = _dataset(cfg, outdir)
    dictionary = _resolve_dictionary(cfg, outdir, dataset)
    gen = cfg["generator"]
    cov = assemble_covariances_streaming(dictionary, dataset,
                                         eta=float(gen["eta"]),
                                         weighted=bool(gen["weighted"]))
    eig = ridge_eigensolve(cov, gamma=float(gen["gamma"]))
    save_dictionary(dictionary, outdir / _FILES["dictionary"])
    eig.save(outdir / _FILES["eigenpairs"])

    grid = _eigenfunction_grid(cfg, dataset)
    cols = [grid[:, k] for k in range(grid.shape[1])]
    k_dump = min(eig.k, 8)
    for i in range(k_dump):
        cols.append(evaluate_eigenfunction(dictionary, eig, i, grid))
    names = [f"x{k}" for k in range(grid.shape[1])] + [f"f{i}" for i in range(k_dump)]
    _write_csv(outdir / _FILES["eigenfunctions"], names, np.column_stack(cols))
    return outdir / _FILES["eigenpairs"]


def stage_oracle(cfg: dict, outdir: Path) -> Path:
    """Grid ground truth for the configured potential; writes oracle.json and
    oracle_eigenfunctions.csv."""
    ocfg = cfg.get("oracle")
    if ocfg is None:
        raise ConfigurationError("no 'oracle' section configured")
    potential = potential_from_config(cfg["potential"])
    beta = float(cfg["simulation"]["beta"]) if "simulation" in cfg else float(ocfg["beta"])
    grid = GridSpec(lo=ocfg["lo"], hi=ocfg["hi"], n_points=ocfg["n_points"], beta=beta)
    eig = grid_generator_eig(potential, grid, int(ocfg.get("k", 3)))
    doc = {"lambdas": eig.lambdas.tolist(), "beta": beta,
           "lo": grid.lo.tolist(), "hi": grid.hi.tolist(),
           "n_points": grid.n_points.tolist(), "k": int(ocfg.get("k", 3))}
    (outdir / _FILES["oracle"]).write_text(json.dumps(doc))
    cols = [eig.nodes[:, k] for k in range(eig.nodes.shape[1])]
    cols.append(eig.pi)
    for i in range(eig.lambdas.size):
        cols.append(eig.functions[:, i])
    names = ([f"x{k}" for k in range(eig.nodes.shape[1])] + ["pi"]
             + [f"f{i}" for i in range(eig.lambdas.size)])
    _write_csv(outdir / _FILES["oracle_functions"], names, np.column_stack(cols))
    return outdir / _FILES["oracle"]


def _load_oracle(outdir: Path):
    doc = json.loads((outdir / _FILES["oracle"]).read_text())
    table = _read_csv(outdir / _FILES["oracle_functions"])
    d = len(doc["lo"])
    nodes = np.column_stack([table[f"x{k}"] for k in range(d)])
    k = int(doc["k"])
    funcs = np.column_stack([table[f"f{i}"] for i in range(k)])
    return (np.asarray(doc["lambdas"]), nodes, table["pi"], funcs)


def stage_compare(cfg: dict, outdir: Path) -> ResultsBundle:
    """Join generator, baseline and oracle results into comparison.csv and a
    self-describing results.json."""
    dataset = _dataset(cfg, outdir)
    dictionary = load_dictionary(outdir / _FILES["dictionary"])
    eig = EigenpairSet.load(outdir / _FILES["eigenpairs"])

    results: dict = {
        "config": cfg,
        "versions": _versions(),
        "generator": {"lambdas": eig.lambdas.tolist(), "nus": eig.nus.tolist(),
                      "eta": eig.eta, "gamma": eig.gamma,
                      "n_dropped": eig.n_dropped},
    }
    rows = []

    oracle_data = None
    if (outdir / _FILES["oracle"]).exists():
        oracle_data = _load_oracle(outdir)
        results["oracle"] = {"lambdas": oracle_data[0].tolist()}

    # generator vs oracle
    if oracle_data is not None:
        olam, nodes, pi, funcs = oracle_data
        k = min(eig.k, funcs.shape[1])
        gen_rows = []
        for i in range(k):
            vals = evaluate_eigenfunction(dictionary, eig, i, nodes)
            ang = sin_angle(vals, funcs[:, i], pi)
            gen_rows.append({"index": i, "lambda": float(eig.lambdas[i]),
                             "oracle_lambda": float(olam[i]), "sin_angle": ang})
            rows.append(("generator", "", i, eig.lambdas[i], olam[i], ang))
        results["generator"]["vs_oracle"] = gen_rows

    # transfer baseline on the same dictionary
    bcfg = cfg.get("baseline")
    if bcfg is not None:
        traj, bias = _load_traj_bias(cfg, outdir)
        beta = _beta_of(cfg, traj)
        prod = _production_trajectory(traj, bias, bool(cfg["dataset"]["include_buildup"]))
        dt_saved = float(prod.times[1] - prod.times[0])
        baseline_out = []
        for lag in bcfg.get("lags", []):
            stride = int(round(lag / dt_saved))
            if stride < 1 or abs(stride * dt_saved - lag) > 1e-9 * max(lag, dt_saved):
                raise ConfigurationError(
                    f"baseline lag {lag} is not a multiple of the saved step {dt_saved}")
            pairs = make_lagged_pairs(prod, stride, beta)
            C, Ct = transfer_covariances_streaming(dictionary, pairs)
            teig = transfer_eigensolve(C, Ct, float(bcfg.get("gamma", 1e-5)), pairs.lag,
                                       mean_weight=float(np.mean(pairs.weights)))
            entry = {"lag": lag, "mus": teig.mus.tolist(),
                     "lambdas": [None if not v else float(l)
                                 for l, v in zip(teig.lambdas, teig.valid)]}
            if oracle_data is not None:
                olam, nodes, pi, funcs = oracle_data
                k = min(len(teig.mus), funcs.shape[1])
                angs = []
                fvals = dictionary.evaluate(nodes).values
                for i in range(k):
                    ang = sin_angle(fvals @ teig.coeffs[:, i], funcs[:, i], pi)
                    angs.append(ang)
                    lam_i = float(teig.lambdas[i]) if teig.valid[i] else np.nan
                    rows.append(("transfer", lag, i, lam_i, olam[i], ang))
                entry["vs_oracle_sin_angle"] = angs
            baseline_out.append(entry)
        results["baseline"] = baseline_out

    if rows:
        arr = [(m, str(l), i, "%.17g" % lam, "%.17g" % ol, "%.17g" % a)
               for m, l, i, lam, ol, a in rows]
        with open(outdir / _FILES["comparison"], "w") as fh:
            fh.write("method,lag,index,lambda,oracle_lambda,sin_angle\n")
            for r in arr:
                fh.write(",".join(str(v) for v in r) + "\n")

    results["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    (outdir / _FILES["results"]).write_text(
        json.dumps(results, sort_keys=True, indent=1))
    return ResultsBundle(outdir=outdir, results=results,
                         files={k: str(outdir / v) for k, v in _FILES.items()
                                if (outdir / v).exists()})


def run_pipeline(cfg: dict, outdir) -> ResultsBundle:
    """All configured stages in order, sharing one output directory."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    if "simulation" in cfg and cfg["dataset"].get("trajectory") is None:
        stage_simulate(cfg, outdir)
    if cfg.get("dictionary", {}).get("source") == "train":
        stage_train(cfg, outdir)
    if cfg.get("dictionary") is not None:
        stage_fit(cfg, outdir)
    if cfg.get("oracle") is not None:
        stage_oracle(cfg, outdir)
    return stage_compare(cfg, outdir)


# ---------------------------------------------------------------------------
# small IO helpers


def _versions() -> dict:
    import scipy
    import torch

    return {"slowmodes": __version__, "numpy": np.__version__,
            "scipy": scipy.__version__, "torch": torch.__version__}


def _write_csv(path, names, array: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(names) + "\n")
        for row in np.atleast_2d(array):
            fh.write(",".join("%.17g" % v for v in row) + "\n")


def _read_csv(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        names = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return {n: data[:, i] for i, n in enumerate(names)}
