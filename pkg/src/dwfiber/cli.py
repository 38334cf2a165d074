"""Command-line front end: ``dwfiber <subcommand> [--config file.json] [overrides]``."""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import time
from contextlib import nullcontext
from dataclasses import asdict
from pathlib import Path

import numpy as np

from dwfiber import __version__
from dwfiber.evaluation import (
    HeatmapConfig,
    crossing_test_set,
    evaluate_predictions,
    heatmap,
    summarize,
    write_summary,
)
from dwfiber.mlp import (
    TrainConfig,
    detect_plateau,
    hyperparameter_grid,
    init_model,
    neighborhood_layer_dims,
    sweep,
    train,
    train_config_from_dict,
    voxel_layer_dims,
    write_sweep_csv,
    SweepPreset,
)
from dwfiber.modelio import MODEL_FORMAT, ModelFormatError, ModelManifest, load_model, save_model
from dwfiber.nifti import NiftiError, load_nifti, save_nifti
from dwfiber.nnls import build_signal_dictionary, nnls_solve, predict_nnls
from dwfiber.protocol import (
    ProtocolError,
    load_protocol,
    normalize_signals,
    save_protocol,
    synthetic_protocol,
)
from dwfiber.sphere import SphereDictionary, build_dictionary
from dwfiber.synth import DATASET_FORMAT, SynthConfig, SynthDataset, generate_dataset, synthetic_volume
from dwfiber.volume import Volume4D

log = logging.getLogger("dwfiber")


class ConfigError(ValueError):
    pass


# Defaults per subcommand.  Every key a config file may set appears here;
# anything else is rejected.
_PROTOCOL = {"bvals": None, "bvecs": None, "n_directions": 150, "bvalue": 2000.0, "n_b0": 10}
_DICTIONARY = {"path": None, "m": 362, "seed": 0}

DEFAULTS = {
    "dict": {"seed": 0, "out": "dictionary", "m": 362, "max_iter": 5000},
    "simulate": {
        "seed": 0, "out": "dataset", "workers": 1,
        "protocol": _PROTOCOL, "dictionary": _DICTIONARY,
        "synth": {"count": 100000, "snr_range": [20.0, 30.0], "sigma_r": 0.14, "t_policy": "fixed3",
                  "label_sigma": 0.1, "store": "center", "lambdas": [0.0014, 0.00029, 0.00029]},
        "volume": None,  # e.g. {"shape": [5, 5, 5], "snr": 30, "s0": 100}
    },
    "train": {
        "seed": 0, "out": "model", "dataset": None, "mode": "voxel",
        "hidden_activation": "relu", "output_activation": "sigmoid", "dropout": 0.2, "layer_dims": None,
        "train": {"loss": "mse", "optimizer": "adam", "learning_rate": None, "lr_decay": 1e-6,
                  "batch_size": 256, "epochs": 100, "validation_fraction": 0.1},
    },
    "predict": {
        "seed": 0, "out": "prediction", "model": None, "input": None, "bvals": None, "bvecs": None,
        "mask": None, "mode": None, "peaks": True, "batch_voxels": 32768,
    },
    "baseline-nnls": {
        "seed": 0, "out": "nnls", "input": None, "bvals": None, "bvecs": None, "mask": None,
        "dictionary": _DICTIONARY, "lambdas": [0.0014, 0.00029, 0.00029], "include_isotropic": False,
    },
    "eval": {
        "seed": 0, "out": "evaluation", "model": None, "nnls": True,
        "protocol": _PROTOCOL, "dictionary": _DICTIONARY, "lambdas": [0.0014, 0.00029, 0.00029],
        "test": {"count": 2000, "angle_range": [60.0, 90.0], "alphas": [0.5, 0.5], "snr": 30.0},
        "top_k": 2,
    },
    "heatmap": {
        "seed": 0, "out": "heatmap", "model": None, "method": "model", "grid": "default",
        "protocol": _PROTOCOL, "dictionary": _DICTIONARY,
        "heatmap": {"alphas": [1 / 3, 1 / 3, 1 / 3], "snr": 30.0, "k_noise": 25,
                    "lambdas": [0.0014, 0.00029, 0.00029]},
    },
    "sweep": {
        "seed": 0, "out": "sweep", "dataset": None, "repeats": 5, "epochs": 30, "batch_size": 256,
        "learning_rate": 1e-4, "lr_decay": 1e-6, "zero_lr_control": True, "presets": None,
    },
}

GRIDS = {
    "default": (tuple(range(0, 91, 5)), tuple(range(0, 91, 5))),
    "coarse": (tuple(range(0, 91, 30)), tuple(range(0, 91, 30))),
}


def _merge(defaults, given, where):
    if defaults is None:
        return copy.deepcopy(given)
    if not isinstance(given, dict):
        raise ConfigError(f"{where}: expected an object, got {type(given).__name__}")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"{where}.{key}: unknown key (allowed: {', '.join(sorted(defaults))})")
        if isinstance(defaults[key], dict) and value is not None:
            out[key] = _merge(defaults[key], value, f"{where}.{key}")
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(command: str, args) -> dict:
    """Defaults <- config file <- command-line flags; paths made absolute."""
    given = {}
    if args.config:
        path = Path(args.config)
        try:
            given = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read ({exc.strerror})") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    cfg = _merge(DEFAULTS[command], given, args.config or "<config>")
    for flag in ("seed", "out", "mode", "model", "input", "bvals", "bvecs", "mask", "dataset", "method", "grid"):
        value = getattr(args, flag, None)
        if value is not None:
            if flag not in cfg:
                raise ConfigError(f"--{flag} does not apply to '{command}'")
            cfg[flag] = value
    for key in ("out", "model", "input", "bvals", "bvecs", "mask", "dataset"):
        if cfg.get(key):
            cfg[key] = str(Path(cfg[key]).resolve())
    for section in ("protocol", "dictionary"):
        sec = cfg.get(section)
        if isinstance(sec, dict):
            for key in ("bvals", "bvecs", "path"):
                if sec.get(key):
                    sec[key] = str(Path(sec[key]).resolve())
    return cfg


def _require(cfg, *keys):
    for key in keys:
        if not cfg.get(key):
            raise ConfigError(f"'{key}' is required (set it in the config file or with --{key})")


def _write_run(out: Path, command: str, cfg: dict, extra=None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    record = {"command": command, "version": __version__, "model_format": MODEL_FORMAT,
              "dataset_format": DATASET_FORMAT, "config": cfg}
    if extra:
        record.update(extra)
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True))


def _protocol_from(section: dict):
    if section.get("bvals") or section.get("bvecs"):
        if not (section.get("bvals") and section.get("bvecs")):
            raise ConfigError("protocol needs both 'bvals' and 'bvecs'")
        return load_protocol(section["bvals"], section["bvecs"])
    return synthetic_protocol(int(section["n_directions"]), float(section["bvalue"]), int(section["n_b0"]))


def _dictionary_from(section: dict) -> SphereDictionary:
    if section.get("path"):
        return SphereDictionary.from_json(section["path"])
    return build_dictionary(int(section["m"]), int(section["seed"]))


def _threads(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


# -- subcommands ---------------------------------------------------------------

def cmd_dict(cfg, args):
    out = Path(cfg["out"])
    d = build_dictionary(int(cfg["m"]), int(cfg["seed"]), int(cfg["max_iter"]))
    out.mkdir(parents=True, exist_ok=True)
    d.to_json(out / "dictionary.json")
    stats = {"m": d.m, "converged": d.converged, "max_nn_angle_deg": float(np.rad2deg(d.max_nn_angle)),
             "min_pair_angle_deg": float(np.rad2deg(d.min_pair_angle)), "sha256": d.digest()}
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True))
    _write_run(out, "dict", cfg)
    print(json.dumps(stats))


def cmd_simulate(cfg, args):
    out = Path(cfg["out"])
    proto = _protocol_from(cfg["protocol"])
    dictionary = _dictionary_from(cfg["dictionary"])
    synth = dict(cfg["synth"])
    try:
        scfg = SynthConfig(master_seed=int(cfg["seed"]), **synth)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synth: {exc}") from exc
    out.mkdir(parents=True, exist_ok=True)
    ds = generate_dataset(proto.weighted(), dictionary, scfg, out_dir=out, workers=int(cfg["workers"]))
    dictionary.to_json(out / "dictionary.json")
    save_protocol(proto, out / "protocol.bvals", out / "protocol.bvecs")
    if cfg.get("volume"):
        vol_cfg = _merge({"shape": [5, 5, 5], "snr": 30.0, "s0": 100.0}, cfg["volume"], "volume")
        rng = np.random.default_rng([int(cfg["seed"]), 7])
        data, truths = synthetic_volume(proto, vol_cfg["shape"], rng, s0=float(vol_cfg["s0"]),
                                        snr=float(vol_cfg["snr"]), lambdas=scfg.lambdas)
        save_nifti(Volume4D(data), out / "dwi.nii")
        (out / "dwi_truth.json").write_text(json.dumps([t.to_dict() for t in truths]))
    _write_run(out, "simulate", cfg)
    print(f"wrote {len(ds)} samples to {out}")


def cmd_train(cfg, args):
    _require(cfg, "dataset")
    out = Path(cfg["out"])
    mode = cfg["mode"] or "voxel"
    ds_dir = Path(cfg["dataset"])
    ds = SynthDataset.load(ds_dir, mmap=True, with_truth=False)
    dictionary = SphereDictionary.from_json(ds_dir / "dictionary.json")
    try:
        inputs = ds.model_inputs(mode)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    tdict = dict(cfg["train"])
    if tdict.get("learning_rate") is None:
        tdict["learning_rate"] = 1e-4 if mode == "voxel" else 1e-5
    try:
        tcfg = train_config_from_dict(dict(tdict, seed=int(cfg["seed"])))
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from exc
    n, m = inputs.shape[1], ds.labels.shape[1]
    if cfg["layer_dims"]:
        dims = [int(d) for d in cfg["layer_dims"]]
    elif mode == "voxel":
        dims = voxel_layer_dims(n, m)
    else:
        dims = neighborhood_layer_dims(n // 27, m)
    model = init_model(dims, cfg["hidden_activation"], cfg["output_activation"], float(cfg["dropout"]),
                       seed=int(cfg["seed"]))
    model, hist = train(model, np.asarray(inputs), np.asarray(ds.labels), tcfg)
    manifest = ModelManifest.for_model(model, ds.manifest["protocol_sha256"], mode,
                                       train=asdict(tcfg), dictionary_sha256=ds.manifest["dictionary_sha256"])
    save_model(model, manifest, out, dictionary)
    for name in ("protocol.bvals", "protocol.bvecs"):
        if (ds_dir / name).exists():
            (out / name).write_bytes((ds_dir / name).read_bytes())
    hist.write_csv(out / "history.csv")
    from dwfiber.plotting import plot_loss_curves

    plot_loss_curves({"train": hist.train_loss, "validation": hist.val_loss}, out / "loss.png",
                     title=f"{mode} model")
    _write_run(out, "train", cfg, {"plateau": detect_plateau(hist.val_loss)})
    print(f"final validation loss {hist.val_loss[-1]:.6g}; model in {out}")


def _load_normalized(cfg):
    _require(cfg, "input", "bvals", "bvecs")
    proto = load_protocol(cfg["bvals"], cfg["bvecs"])
    raw = load_nifti(cfg["input"])
    vol, _, valid = normalize_signals(raw, proto)
    mask = valid
    if cfg.get("mask"):
        user = load_nifti(cfg["mask"]).data[..., 0] > 0
        if user.shape != valid.shape:
            raise ConfigError(f"mask shape {user.shape} does not match volume {valid.shape}")
        mask = mask & user
    return proto, vol, mask


def cmd_predict(cfg, args):
    from dwfiber.inference import predict, write_peaks

    _require(cfg, "model")
    model, manifest = load_model(cfg["model"])
    proto, vol, mask = _load_normalized(cfg)
    if proto.weighted().digest() != manifest.protocol_hash:
        log.warning("input protocol differs from the one the model was trained on")
    mode = cfg["mode"] or manifest.mode
    if mode != manifest.mode:
        raise ConfigError(f"--mode {mode} conflicts with the {manifest.mode} model")
    deterministic = args.threads is not None and int(args.threads) == 1
    coeffs, report = predict(model, vol, mode, mask=mask, batch_voxels=int(cfg["batch_voxels"]),
                             deterministic=deterministic)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_nifti(coeffs, out / "coefficients.nii")
    if cfg["peaks"]:
        dict_path = Path(cfg["model"]) / "dictionary.json"
        if dict_path.exists():
            write_peaks(out / "peaks.txt", SphereDictionary.from_json(dict_path), coeffs, mask)
    _write_run(out, "predict", cfg, {"mode": mode, "voxels": report.voxels, "seconds": report.seconds})
    print(f"{report.voxels} voxels in {report.seconds:.2f}s ({mode})")


def cmd_baseline_nnls(cfg, args):
    proto, vol, mask = _load_normalized(cfg)
    dictionary = _dictionary_from(cfg["dictionary"])
    sig = build_signal_dictionary(proto.weighted(), dictionary, cfg["lambdas"], bool(cfg["include_isotropic"]))
    coeffs, report = predict_nnls(vol, sig, mask)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_nifti(coeffs, out / "coefficients.nii")
    _write_run(out, "baseline-nnls", cfg, {"voxels": report.voxels, "seconds": report.seconds,
                                           "capped": report.capped})
    print(f"{report.voxels} voxels in {report.seconds:.2f}s (nnls)")


def _model_predictor(model, deterministic=False):
    from dwfiber.mlp import forward

    def run(signals):
        out = forward(model, np.asarray(signals, dtype=np.float32), deterministic=deterministic)
        return np.maximum(out, 0.0)
    return run


def _nnls_predictor(sig):
    def run(signals):
        return np.array([nnls_solve(sig.atoms, s)[: sig.m] for s in np.asarray(signals, dtype=np.float64)])
    return run


def _model_protocol(model_dir: Path, fallback: dict):
    if (model_dir / "protocol.bvals").exists():
        return load_protocol(model_dir / "protocol.bvals", model_dir / "protocol.bvecs")
    return _protocol_from(fallback)


def cmd_eval(cfg, args):
    out = Path(cfg["out"])
    rng = np.random.default_rng([int(cfg["seed"]), 11])
    model = None
    if cfg.get("model"):
        model, manifest = load_model(cfg["model"])
        if manifest.mode != "voxel":
            raise ConfigError("eval works on single-voxel test signals and needs a voxel model")
        proto = _model_protocol(Path(cfg["model"]), cfg["protocol"]).weighted()
        dictionary = SphereDictionary.from_json(Path(cfg["model"]) / "dictionary.json")
    else:
        proto = _protocol_from(cfg["protocol"]).weighted()
        dictionary = _dictionary_from(cfg["dictionary"])
    test = cfg["test"]
    signals, truths = crossing_test_set(proto, int(test["count"]), rng, tuple(test["angle_range"]),
                                        tuple(test["alphas"]), float(test["snr"]), cfg["lambdas"])
    top_k = cfg["top_k"]
    records = []
    if model is not None:
        t0 = time.perf_counter()
        pred = _model_predictor(model)(signals)
        records.append(evaluate_predictions(dictionary, truths, pred, "mlp", time.perf_counter() - t0, top_k))
    if cfg["nnls"]:
        sig = build_signal_dictionary(proto, dictionary, cfg["lambdas"])
        t0 = time.perf_counter()
        pred = _nnls_predictor(sig)(signals)
        records.append(evaluate_predictions(dictionary, truths, pred, "nnls", time.perf_counter() - t0, top_k))
    if not records:
        raise ConfigError("nothing to evaluate: give --model and/or set nnls=true")
    rows = summarize(records)
    out.mkdir(parents=True, exist_ok=True)
    write_summary(rows, out / "summary.csv", out / "summary.json")
    with (out / "per_voxel.csv").open("w") as fh:
        fh.write("method,voxel,emd_deg,worst_angle_deg\n")
        for r in records:
            for v, (e, w) in enumerate(zip(r.emd, r.worst_error)):
                fh.write(f"{r.method},{v},{e:.6f},{w:.6f}\n")
    _write_run(out, "eval", cfg)
    for row in rows:
        print(f"{row['method']}: mean EMD {row['emd_mean']:.3f} deg, success@15 {row['success_15']:.3f}")


def cmd_heatmap(cfg, args):
    from dwfiber.plotting import plot_heatmap

    if cfg["grid"] not in GRIDS:
        raise ConfigError(f"unknown grid {cfg['grid']!r} (choose from {', '.join(GRIDS)})")
    theta1, theta_plane = GRIDS[cfg["grid"]]
    hcfg = HeatmapConfig(theta1=theta1, theta_plane=theta_plane, seed=int(cfg["seed"]),
                         alphas=tuple(cfg["heatmap"]["alphas"]), snr=float(cfg["heatmap"]["snr"]),
                         k_noise=int(cfg["heatmap"]["k_noise"]), lambdas=tuple(cfg["heatmap"]["lambdas"]))
    deterministic = args.threads is not None and int(args.threads) == 1
    if cfg["method"] == "model":
        _require(cfg, "model")
        model, manifest = load_model(cfg["model"])
        if manifest.mode != "voxel":
            raise ConfigError("heatmaps use single-voxel signals and need a voxel model")
        proto = _model_protocol(Path(cfg["model"]), cfg["protocol"]).weighted()
        dictionary = SphereDictionary.from_json(Path(cfg["model"]) / "dictionary.json")
        predictor = _model_predictor(model, deterministic)
    elif cfg["method"] == "nnls":
        proto = _protocol_from(cfg["protocol"]).weighted()
        dictionary = _dictionary_from(cfg["dictionary"])
        predictor = _nnls_predictor(build_signal_dictionary(proto, dictionary, hcfg.lambdas))
    else:
        raise ConfigError(f"unknown method {cfg['method']!r} (model or nnls)")
    grid = heatmap(predictor, proto, dictionary, hcfg)
    grid.meta["method"] = cfg["method"]
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    grid.write_csv(out / "heatmap.csv")
    plot_heatmap(grid, out / "heatmap.svg", title=f"{cfg['method']}: mean EMD (deg)")
    plot_heatmap(grid, out / "heatmap.png", title=f"{cfg['method']}: mean EMD (deg)")
    _write_run(out, "heatmap", cfg)
    print(f"heatmap {grid.mean.shape[0]}x{grid.mean.shape[1]}, mean {grid.mean.mean():.3f} deg")


def cmd_sweep(cfg, args):
    from dwfiber.plotting import plot_loss_curves

    _require(cfg, "dataset")
    ds = SynthDataset.load(cfg["dataset"], mmap=False, with_truth=False)
    base = TrainConfig(learning_rate=float(cfg["learning_rate"]), lr_decay=float(cfg["lr_decay"]),
                       batch_size=int(cfg["batch_size"]), epochs=int(cfg["epochs"]))
    presets = hyperparameter_grid(base)
    if cfg["presets"]:
        wanted = set(cfg["presets"])
        unknown = wanted - {p.name for p in presets}
        if unknown:
            raise ConfigError(f"presets: unknown names {sorted(unknown)}")
        presets = [p for p in presets if p.name in wanted]
    if cfg["zero_lr_control"]:
        from dataclasses import replace

        presets.append(SweepPreset("control-zero-lr", replace(base, learning_rate=0.0), "sigmoid"))
    inputs, targets = ds.model_inputs("voxel"), ds.labels
    rows, runs = sweep(presets, inputs, targets, repeats=int(cfg["repeats"]), base_seed=int(cfg["seed"]))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, out / "sweep.csv")
    summary = [{k: v for k, v in r.items() if k != "history"} for r in runs]
    (out / "runs.json").write_text(json.dumps(summary, indent=2))
    curves = {}
    for r in runs:
        curves.setdefault(r["preset"], []).append(r["history"].val_loss)
    plot_loss_curves(curves, out / "val_loss.png", title="validation loss (min-max over repeats)")
    plot_loss_curves(curves, out / "val_loss.svg", title="validation loss (min-max over repeats)")
    _write_run(out, "sweep", cfg)
    flagged = sorted({r["preset"] for r in runs if r["plateau"]})
    print(f"{len(runs)} runs; plateau flagged for: {', '.join(flagged) or 'none'}")


COMMANDS = {
    "dict": cmd_dict,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "predict": cmd_predict,
    "baseline-nnls": cmd_baseline_nnls,
    "eval": cmd_eval,
    "heatmap": cmd_heatmap,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dwfiber", description=__doc__)
    parser.add_argument("--version", action="version",
                        version=f"dwfiber {__version__} (model format {MODEL_FORMAT}, dataset format {DATASET_FORMAT})")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, help="BLAS threads; 1 also selects deterministic math")
        p.add_argument("--mode", choices=("voxel", "neighborhood"))
        if name in ("predict", "eval", "heatmap"):
            p.add_argument("--model", help="model directory")
        if name in ("predict", "baseline-nnls"):
            p.add_argument("--in", dest="input", help="DW volume (.nii)")
            p.add_argument("--bvals")
            p.add_argument("--bvecs")
            p.add_argument("--mask", help="optional brain mask (.nii)")
        if name in ("train", "sweep"):
            p.add_argument("--dataset", help="dataset directory from 'simulate'")
        if name == "heatmap":
            p.add_argument("--method", choices=("model", "nnls"))
            p.add_argument("--grid", help="default (0-90 by 5) or coarse (0-90 by 30)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        with _threads(args.threads):
            COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"dwfiber {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except (ProtocolError, NiftiError, ModelFormatError, OSError, ValueError, RuntimeError) as exc:
        print(f"dwfiber {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
