"""Pipeline steps behind the CLI subcommands.

Each step reads what it needs from an ExperimentConfig, writes its outputs
under the config's out_dir, and refreshes the run manifest. All randomness
derives from the config seed through keyed streams, so reruns are
byte-identical.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import bootstrap as bs
from . import calibration as cal
from . import dataio, mlp, simulation
from .config import ConfigError, ExperimentConfig
from .fitting import ESTIMATORS, fit_cwlls
from .rng import rng_from_key, worker_count
from .tensor import GradientScheme, eigh3_batch, elements_to_matrices, fa_md_from_eigenvalues

PARAMETERS = ("fa", "md", "theta")


def _ensure_out_dir(cfg: ExperimentConfig) -> Path:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _refresh_manifest(cfg: ExperimentConfig, out_dir: Path):
    outputs = [
        p
        for p in sorted(out_dir.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    ]
    dataio.write_manifest(out_dir, cfg.text, cfg.seed, outputs)


def _resolve(cfg: ExperimentConfig, dotted: str, default_name: str = None) -> Path:
    raw = cfg.get(dotted)
    if raw is None:
        if default_name is None:
            raise ConfigError(f"missing config key: {dotted}")
        return cfg.out_dir / default_name
    path = Path(str(raw))
    if not path.is_absolute():
        base = cfg.path.parent if cfg.path is not None else Path(".")
        path = (base / path).resolve()
    return path


def load_scheme(cfg: ExperimentConfig) -> GradientScheme:
    bvec = cfg.get("scheme.bvec")
    bval = cfg.get("scheme.bval")
    if bvec and bval:
        return dataio.read_bvec_bval(
            _resolve(cfg, "scheme.bvec"), _resolve(cfg, "scheme.bval")
        )
    n_dirs = cfg.get("scheme.n_directions")
    if n_dirs is None:
        raise ConfigError("scheme needs bvec/bval paths or n_directions")
    return simulation.make_scheme(
        int(n_dirs),
        float(cfg.get("scheme.bvalue", 1000.0)),
        int(cfg.get("scheme.n_b0", 2)),
    )


def _phantom_spec(cfg: ExperimentConfig, scheme: GradientScheme) -> simulation.PhantomSpec:
    snr = cfg.get("phantom.snr_db", 30.0)
    eig_lo = float(cfg.get("phantom.eig_min", 0.1e-3))
    eig_hi = float(cfg.get("phantom.eig_max", 3.0e-3))
    return simulation.PhantomSpec(
        n_voxels=int(cfg.get("phantom.n_voxels", required=True)),
        scheme=scheme,
        generator=str(cfg.get("phantom.generator", "prolate")),
        fa_target=float(cfg.get("phantom.fa_target", 0.8)),
        md=float(cfg.get("phantom.md", 0.9e-3)),
        eig_range=(eig_lo, eig_hi),
        shift=float(cfg.get("phantom.shift", 1.8)),
        orientation=str(cfg.get("phantom.orientation", "uniform")),
        snr_db=float(snr),
        seed=cfg.seed,
    )


def run_simulate(cfg: ExperimentConfig) -> Path:
    out = _ensure_out_dir(cfg)
    scheme = load_scheme(cfg)
    spec = _phantom_spec(cfg, scheme)
    records = simulation.make_phantom(spec)
    signals = np.stack([r.signals for r in records])
    truth = np.stack([r.truth.elements for r in records])
    dataio.write_bvec_bval(out / "scheme.bvec", out / "scheme.bval", scheme)
    path = out / "dataset.bin"
    dataio.write_dataset(path, signals, "scheme", truth_elements=truth, seed=cfg.seed)
    _refresh_manifest(cfg, out)
    return path


def run_fit(cfg: ExperimentConfig) -> Path:
    out = _ensure_out_dir(cfg)
    _, signals, _, _, scheme = dataio.read_dataset(_resolve(cfg, "dataset.path", "dataset.bin"))
    name = str(cfg.get("fit.estimator", "cwlls"))
    if name not in ESTIMATORS:
        raise ConfigError(f"unknown estimator {name!r}")
    fit = ESTIMATORS[name]

    def one(voxel: int) -> np.ndarray:
        result = fit(signals[voxel], scheme)
        return np.concatenate([result.tensor.elements, [result.tensor.ln_s0]])

    params = np.stack(list(_map_voxels(one, len(signals))))
    path = out / "fits.bin"
    dataio.write_fits(path, params, name)
    _refresh_manifest(cfg, out)
    return path


def _map_voxels(fn, n: int):
    workers = worker_count()
    if workers <= 1:
        return [fn(v) for v in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n)))


def run_bootstrap(cfg: ExperimentConfig) -> Path:
    out = _ensure_out_dir(cfg)
    _, signals, _, _, scheme = dataio.read_dataset(_resolve(cfg, "dataset.path", "dataset.bin"))
    iterations = int(cfg.get("bootstrap.iterations", 1000))
    seed = cfg.seed

    def one(voxel: int) -> np.ndarray:
        base = fit_cwlls(signals[voxel], scheme)
        samples = bs.wild_bootstrap(
            signals[voxel], scheme, iterations=iterations, seed=_voxel_seed(seed, voxel)
        )
        bundle = bs.summarize_uncertainty(samples)
        evals, evecs = eigh3_batch(base.tensor.as_matrix()[None])
        fa, md = fa_md_from_eigenvalues(evals[0])
        return np.array(
            [fa, md, *evecs[0, 0], bundle.theta95, bundle.sigma_fa, bundle.sigma_md, np.nan]
        )

    table = np.stack(list(_map_voxels(one, len(signals))))
    path = out / "predictions_wbs.bin"
    dataio.write_predictions(path, table, "wbs", meta={"iterations": iterations})
    _refresh_manifest(cfg, out)
    return path


def _voxel_seed(seed: int, voxel: int) -> int:
    # fold (seed, voxel) into one integer key; wild_bootstrap keys off it
    return int(np.random.SeedSequence([seed, voxel]).generate_state(1)[0])


def _train_arrays(cfg: ExperimentConfig):
    _, signals, truth, _, scheme = dataio.read_dataset(
        _resolve(cfg, "dataset.path", "dataset.bin")
    )
    if truth is None:
        raise ConfigError("training requires a dataset with ground truth")
    inputs = mlp.normalize_signals(signals, scheme)
    return inputs, truth, scheme


def run_train(cfg: ExperimentConfig) -> Path:
    out = _ensure_out_dir(cfg)
    inputs, truth, scheme = _train_arrays(cfg)
    population = cfg.get("train.population")
    if population is not None:
        half = len(inputs) // 2
        rows = slice(0, half) if int(population) == 0 else slice(half, len(inputs))
        inputs, truth = inputs[rows], truth[rows]
    spec = mlp.MlpSpec(
        input_dim=scheme.n_measurements,
        hidden_widths=tuple(_int_list(cfg.get("train.hidden_widths", [64, 64, 64]))),
        uncertainty_widths=tuple(_int_list(cfg.get("train.uncertainty_widths", [32, 32]))),
        dropout_rate=float(cfg.get("train.dropout_rate", 0.5)),
    )
    tcfg = mlp.TrainConfig(
        penalty=float(cfg.get("train.penalty", 1.0)),
        learning_rate=float(cfg.get("train.learning_rate", 1e-3)),
        batch_size=int(cfg.get("train.batch_size", 256)),
        epochs=int(cfg.get("train.epochs", 100)),
        seed=cfg.seed,
        val_fraction=float(cfg.get("train.val_fraction", 0.15)),
        eval_every=int(cfg.get("train.eval_every", 10)),
        stop_patience=int(cfg.get("train.stop_patience", 2)),
    )
    model, history = mlp.train(inputs, truth, spec, tcfg)
    path = out / "model.bin"
    mlp.save_checkpoint(path, model, tcfg, epoch=history.stopped_epoch)
    _refresh_manifest(cfg, out)
    return path


def _int_list(value):
    if isinstance(value, (int, float)):
        return [int(value)]
    return [int(v) for v in value]


def run_predict(cfg: ExperimentConfig) -> Path:
    out = _ensure_out_dir(cfg)
    _, signals, _, _, scheme = dataio.read_dataset(_resolve(cfg, "dataset.path", "dataset.bin"))
    model, _ = mlp.load_checkpoint(_resolve(cfg, "predict.model", "model.bin"))
    n_samples = int(cfg.get("predict.samples", 100))
    inputs = mlp.normalize_signals(signals, scheme)
    seed = cfg.seed

    def one(voxel: int) -> np.ndarray:
        samples, u = mlp.predict_mc_dropout(
            model, inputs[voxel], n_samples=n_samples, seed=_voxel_seed(seed, voxel)
        )
        bundle = bs.summarize_uncertainty(samples, aleatoric_u=u)
        point, _ = model.predict(inputs[voxel])
        evals, evecs = eigh3_batch(elements_to_matrices(point))
        fa, md = fa_md_from_eigenvalues(evals[0])
        return np.array(
            [fa, md, *evecs[0, 0], bundle.theta95, bundle.sigma_fa, bundle.sigma_md, u]
        )

    table = np.stack(list(_map_voxels(one, len(signals))))
    path = out / "predictions_dl.bin"
    dataio.write_predictions(path, table, "mc_dropout", meta={"samples": n_samples})
    _refresh_manifest(cfg, out)
    return path


def truth_scalars(truth_elements: np.ndarray):
    evals, evecs = eigh3_batch(elements_to_matrices(truth_elements))
    fa, md = fa_md_from_eigenvalues(evals)
    return fa, md, evecs[:, 0, :]


def angular_error_deg(v_hat: np.ndarray, v_true: np.ndarray) -> np.ndarray:
    cosines = np.clip(np.abs(np.sum(v_hat * v_true, axis=1)), 0.0, 1.0)
    return np.degrees(np.arccos(cosines))


def triples_by_parameter(table: np.ndarray, truth_elements: np.ndarray, uncertainty="epistemic"):
    """Per-parameter PredictionTriple lists from a prediction table.

    theta uses the angular error as the deviation and theta95/2 as the
    sigma proxy (a 95th percentile of a folded normal sits near 2 sigma).
    With uncertainty="aleatoric", exp(u) replaces the per-parameter sigma.
    """
    fa_true, md_true, v_true = truth_scalars(truth_elements)
    v_hat = table[:, 2:5]
    theta_err = angular_error_deg(v_hat, v_true)
    if uncertainty == "aleatoric":
        if np.any(~np.isfinite(table[:, 8])):
            raise ValueError("aleatoric sigma requested but u column is not finite")
        sig_fa = sig_md = sig_theta = np.exp(table[:, 8])
    else:
        sig_fa = table[:, 6]
        sig_md = table[:, 7]
        sig_theta = table[:, 5] / 2.0
    return {
        "fa": cal.triples_from_arrays(fa_true, table[:, 0], sig_fa),
        "md": cal.triples_from_arrays(md_true, table[:, 1], sig_md),
        "theta": cal.triples_from_arrays(theta_err, np.zeros(len(table)), sig_theta),
    }


def _metric_params(cfg: ExperimentConfig):
    bins = int(cfg.get("metrics.bins", cal.DEFAULT_BINS))
    grid = int(cfg.get("metrics.grid_size", cal.DEFAULT_GRID_SIZE))
    caps = {
        p: float(cfg.get(f"metrics.mpiw_cap.{p}", cal.MPIW_CAPS[p])) for p in PARAMETERS
    }
    return bins, grid, caps


def _metrics_for_table(table, truth, bins, grid, caps, uncertainty):
    fa_true, md_true, v_true = truth_scalars(truth)
    errors = {
        "fa": np.abs(table[:, 0] - fa_true),
        "md": np.abs(table[:, 1] - md_true),
        "theta": angular_error_deg(table[:, 2:5], v_true),
    }
    out = {}
    triples = triples_by_parameter(table, truth, uncertainty)
    for p in PARAMETERS:
        entry = {
            "n": int(len(table)),
            "bins": bins,
            "median_abs_error": float(np.median(errors[p])),
        }
        sigmas = np.array([t.sigma for t in triples[p]])
        if np.all(sigmas > 0):
            entry["ence"] = cal.ence(cal.bin_rmv_rmse(triples[p], bins))
            entry["aucc"] = cal.picp_mpiw_curve(triples[p], caps[p], grid).aucc
        else:
            entry["ence"] = None
            entry["aucc"] = None
        out[p] = entry
    return out


def _load_table_for_eval(path):
    """Predictions table from either a predictions file or a fits file."""
    with open(path, "rb") as f:
        kind = json.loads(f.readline().decode("utf-8")).get("kind")
    if kind == "predictions":
        _, table = dataio.read_predictions(path)
        return table
    if kind == "fits":
        _, params = dataio.read_fits(path)
        evals, evecs = eigh3_batch(elements_to_matrices(params[:, :6]))
        fa, md = fa_md_from_eigenvalues(evals)
        n = len(params)
        zeros = np.zeros(n)
        return np.column_stack(
            [fa, md, evecs[:, 0, :], zeros, zeros, zeros, np.full(n, np.nan)]
        )
    raise dataio.DataFormatError(f"{path}: cannot evaluate file of kind {kind!r}")


def run_evaluate(cfg: ExperimentConfig) -> Path:
    out = _ensure_out_dir(cfg)
    _, _, truth, _, _ = dataio.read_dataset(_resolve(cfg, "dataset.path", "dataset.bin"))
    if truth is None:
        raise dataio.DataFormatError("evaluate requires ground-truth tensors")
    table = _load_table_for_eval(_resolve(cfg, "evaluate.predictions", "predictions_wbs.bin"))
    bins, grid, caps = _metric_params(cfg)
    uncertainty = str(cfg.get("evaluate.uncertainty", "epistemic"))
    recal_path = cfg.get("evaluate.recalibrated")
    if recal_path is not None:
        header, recal_table = dataio.read_predictions(_resolve(cfg, "evaluate.recalibrated"))
        holdout = np.array(header["meta"]["holdout"], dtype=int)
        metrics = {
            "before": _metrics_for_table(
                table[holdout], truth[holdout], bins, grid, caps, uncertainty
            ),
            "after": _metrics_for_table(
                recal_table, truth[holdout], bins, grid, caps, uncertainty
            ),
        }
    else:
        metrics = _metrics_for_table(table, truth, bins, grid, caps, uncertainty)
    path = out / "metrics.json"
    dataio.write_metrics_json(path, metrics)
    _refresh_manifest(cfg, out)
    return path


def run_calibrate(cfg: ExperimentConfig) -> Path:
    """Fit isotonic maps on a calibration split; recalibrate the held-out rows.

    The split shuffles voxel indices with the config seed and assigns by
    parity (a stand-in for the held-out-scan split real cohorts would use);
    a calibrate.split fraction other than 0.5 takes a prefix of the shuffle
    instead.
    """
    out = _ensure_out_dir(cfg)
    _, _, truth, _, _ = dataio.read_dataset(_resolve(cfg, "dataset.path", "dataset.bin"))
    if truth is None:
        raise dataio.DataFormatError("calibrate requires ground-truth tensors")
    pred_path = _resolve(cfg, "calibrate.predictions", "predictions_wbs.bin")
    header, table = dataio.read_predictions(pred_path)
    bins, _, _ = _metric_params(cfg)
    uncertainty = str(cfg.get("evaluate.uncertainty", "epistemic"))

    n = len(table)
    split = float(cfg.get("calibrate.split", 0.5))
    if not 0.0 < split < 1.0:
        raise ConfigError("calibrate.split must be in (0, 1)")
    perm = rng_from_key(cfg.seed, 2).permutation(n)
    if split == 0.5:
        cal_idx, holdout = np.sort(perm[0::2]), np.sort(perm[1::2])
    else:
        cut = int(round(split * n))
        cal_idx, holdout = np.sort(perm[:cut]), np.sort(perm[cut:])

    triples_cal = triples_by_parameter(table[cal_idx], truth[cal_idx], uncertainty)
    maps = {p: cal.fit_isotonic(triples_cal[p], bins) for p in PARAMETERS}

    recal = table[holdout].copy()
    recal[:, 6] = np.sqrt(maps["fa"](recal[:, 6] ** 2))
    recal[:, 7] = np.sqrt(maps["md"](recal[:, 7] ** 2))
    recal[:, 5] = 2.0 * np.sqrt(maps["theta"]((recal[:, 5] / 2.0) ** 2))

    maps_json = {
        p: {"breakpoints": maps[p].breakpoints.tolist(), "values": maps[p].values.tolist()}
        for p in PARAMETERS
    }
    dataio.write_metrics_json(out / "calibration_maps.json", maps_json)
    path = out / "predictions_recalibrated.bin"
    dataio.write_predictions(
        path,
        recal,
        header["method"],
        meta={"recalibrated": True, "holdout": [int(i) for i in holdout]},
    )
    _refresh_manifest(cfg, out)
    return path


def run_curves(cfg: ExperimentConfig) -> list:
    out = _ensure_out_dir(cfg)
    _, _, truth, _, _ = dataio.read_dataset(_resolve(cfg, "dataset.path", "dataset.bin"))
    if truth is None:
        raise dataio.DataFormatError("curves require ground-truth tensors")
    _, table = dataio.read_predictions(
        _resolve(cfg, "curves.predictions", "predictions_wbs.bin")
    )
    bins, grid, caps = _metric_params(cfg)
    uncertainty = str(cfg.get("evaluate.uncertainty", "epistemic"))
    triples = triples_by_parameter(table, truth, uncertainty)
    paths = []
    for p in PARAMETERS:
        curve = cal.picp_mpiw_curve(triples[p], caps[p], grid)
        path = out / f"curves_{p}.csv"
        dataio.write_curve_csv(path, curve)
        paths.append(path)
    _refresh_manifest(cfg, out)
    return paths
