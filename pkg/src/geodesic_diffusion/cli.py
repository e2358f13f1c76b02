"""``gdm``: schedules, diagnostics, training, sampling and evaluation from the shell.

Every command reads a flat ``key = value`` config (``--config``), lets
``--key value`` flags override it, rejects unknown keys, and writes
``manifest.json`` with the fully resolved config into ``--out``. Passing a
manifest back as ``--config`` repeats the run.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import __version__
from .engine import TrainingConfig, TrainResult, train, write_loss_csv
from .errors import ConfigError, GeodesicDiffusionError, LengthMismatch, MissingCondition, NumericalError
from .geometry import compare_energies
from .metrics import psnr_pm1, ssim_pm1
from .mlp import MlpDenoiser, load_checkpoint, save_checkpoint
from .pgm import read_pgm, write_pgm
from .sampler import FULL, SamplerConfig, dump_json, make_time_grid, sample, write_vectors_csv
from .schedules import (
    BoundaryConditions,
    CosineAlpha,
    ExponentialVE,
    LinearBeta,
    LinearSigma,
    MatchedBaseline,
    make_schedule,
    schedule_table,
    write_schedule_csv,
)
from .testbed import (
    ConditionalGaussianOracle,
    ConditionalGaussianTask,
    GaussianOracle,
    GaussianTarget,
    ToyImageTask,
    load_image_dataset,
    make_toy_images,
    save_image_dataset,
    task_to_dict,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

# terminal (sigma1, alpha1) pairs of the schedule-family sweep, alpha0 = 1
TERMINAL_FAMILY = ((80.0, 1.0), (72.0, 0.9), (56.0, 0.7), (40.0, 0.5), (24.0, 0.3), (8.0, 0.1), (1.0, 0.0125))


# --------------------------------------------------------------------------
# config schema


def _bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ratio(s):
    v = str(s).strip().lower()
    return FULL if v == FULL else float(v)


def _auto_float(s):
    v = str(s).strip().lower()
    return None if v in ("auto", "", "none") else float(v)


def _ints(s):
    return [int(p) for p in str(s).split(",") if p.strip()]


def _floats(s):
    return [float(p) for p in str(s).split(",") if p.strip()]


@dataclass(frozen=True)
class Key:
    parse: object
    default: object
    help: str


COMMON = {
    "seed": Key(int, 0, "random seed"),
    "out": Key(str, "run", "output directory"),
}

SCHEDULE = {
    "kind": Key(str, "geodesic", "geodesic | exponential_ve | linear_sigma | linear_beta | cosine_alpha"),
    "alpha0": Key(float, 1.0, "alpha at t=0"),
    "sigma0": Key(float, 0.002, "sigma at t=0"),
    "alpha1": Key(float, 1.0, "alpha at t=1"),
    "sigma1": Key(float, 80.0, "sigma at t=1"),
    "A": Key(_auto_float, None, "data norm for the geodesic (auto = sqrt(n))"),
    "n": Key(int, 1, "data dimension seen by the geodesic"),
    "beta_min": Key(float, 0.1, "linear_beta: beta at t=0"),
    "beta_max": Key(float, 20.0, "linear_beta: beta at t=1"),
    "cosine_offset": Key(float, 0.008, "cosine_alpha: offset s"),
}

RECIPE = {
    "data": Key(str, "", "dataset directory; empty generates the toy task"),
    "side": Key(int, 16, "toy image side"),
    "mode": Key(str, "denoise", "toy task: denoise | triple"),
    "noise_std": Key(float, 0.4, "toy degradation noise std"),
    "max_shapes": Key(int, 3, "toy shapes per image"),
    "train_count": Key(int, 2000, "toy training images"),
    "val_count": Key(int, 100, "toy validation images"),
    "test_count": Key(int, 100, "toy test images"),
    "data_seed": Key(int, 0, "toy dataset seed"),
}

MODEL = {
    "hidden": Key(_ints, [256, 256, 256], "hidden widths, comma separated"),
    "time_dim": Key(int, 16, "sinusoidal time features"),
    "sigma_data": Key(float, 0.5, "preconditioning data scale"),
    "centre_on_condition": Key(_bool, True, "centre the skip term on the mean condition"),
    "zero_init_output": Key(_bool, False, "start the last layer at zero"),
    "linear_skip": Key(_bool, False, "add a linear input-to-output path"),
}

OPTIM = {
    "batch_size": Key(int, 16, "batch size"),
    "lr": Key(float, 2e-4, "Adam learning rate"),
    "beta1": Key(float, 0.9, "Adam first-moment decay"),
    "beta2": Key(float, 0.999, "Adam second-moment decay"),
    "eps": Key(float, 1e-8, "Adam epsilon"),
    "iterations": Key(int, 5000, "training iterations"),
    "resume": Key(str, "", "checkpoint to resume from"),
}

SAMPLER = {
    "steps": Key(int, 6, "Euler steps N"),
    "ratio": Key(_ratio, 3.0, "truncation noise ratio sigma/alpha at t_N, or 'full'"),
    "checkpoint": Key(str, "", "trained model checkpoint"),
    "oracle": Key(_bool, False, "use the analytic Gaussian denoiser instead of a checkpoint"),
    "oracle_mean": Key(float, 0.0, "oracle: per-component data mean"),
    "oracle_var": Key(float, 1.0, "oracle: per-component data variance"),
    "cond_noise": Key(float, 0.0, "oracle: condition noise std (0 = unconditional oracle)"),
    "dim": Key(int, 2, "oracle: vector length when no data is given"),
    "count": Key(int, 0, "samples to draw (0 = all conditions, or 16 unconditional)"),
    "data": Key(str, "", "dataset directory supplying conditions"),
}

SCHEMAS = {
    "schedule": {**COMMON, **SCHEDULE, "grid": Key(int, 101, "grid points")},
    "diagnose": {
        **COMMON,
        **{k: v for k, v in SCHEDULE.items() if k != "kind"},
        "kinds": Key(str, "geodesic,linear_sigma", "comma separated kinds; *_matched for rescaled baselines"),
        "samples": Key(int, 100, "speed samples"),
        "quadrature": Key(int, 4096, "quadrature intervals"),
    },
    "train": {**COMMON, **SCHEDULE, **RECIPE, **MODEL, **OPTIM},
    "sample": {**COMMON, **SCHEDULE, **SAMPLER},
    "eval": {
        **COMMON,
        "pred": Key(str, "", "directory of predicted greymaps"),
        "truth": Key(str, "", "dataset directory (index.json) or directory of greymaps"),
    },
    "sweep": {
        **COMMON,
        **SCHEDULE,
        **SAMPLER,
        "what": Key(str, "steps", "steps | ratios | family"),
        "steps_list": Key(_ints, [3, 4, 5, 6, 7, 8, 9], "step counts for what=steps"),
        "ratio_list": Key(_floats, [3.0, 5.0, 10.0, 20.0], "ratios for what=ratios"),
        "grid": Key(int, 101, "grid points for what=family"),
    },
}


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines (``#`` comments) or a JSON manifest into raw strings."""
    with open(path) as fh:
        text = fh.read()
    if text.lstrip().startswith("{"):
        doc = json.loads(text)
        cfg = doc.get("config", doc)
        return {k: _unparse(v) for k, v in cfg.items()}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = value
    return out


def _unparse(v):
    if v is None:
        return "auto"
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    return str(v)


def resolve(command: str, file_values: dict, overrides: dict) -> dict:
    schema = SCHEMAS[command]
    unknown = sorted(set(file_values) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    raw = {**file_values, **{k: v for k, v in overrides.items() if v is not None}}
    cfg = {}
    for key, spec in schema.items():
        if key not in raw:
            cfg[key] = spec.default
            continue
        try:
            cfg[key] = spec.parse(raw[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {raw[key]!r} ({exc})") from None
    return cfg


# --------------------------------------------------------------------------
# builders


def boundary(cfg) -> BoundaryConditions:
    return BoundaryConditions(cfg["alpha0"], cfg["sigma0"], cfg["alpha1"], cfg["sigma1"])


def build_schedule(cfg, kind=None):
    kind = kind or cfg["kind"]
    if kind == "geodesic":
        return make_schedule(boundary(cfg), cfg["A"], cfg["n"])
    if kind == "exponential_ve":
        return ExponentialVE(cfg["sigma0"], cfg["sigma1"], cfg["alpha0"])
    if kind == "linear_sigma":
        return LinearSigma(boundary(cfg))
    if kind == "linear_beta":
        return LinearBeta(cfg["beta_min"], cfg["beta_max"])
    if kind == "cosine_alpha":
        return CosineAlpha(cfg["cosine_offset"])
    if kind in ("linear_beta_matched", "cosine_alpha_matched"):
        base = build_schedule(cfg, kind[: -len("_matched")])
        return MatchedBaseline(base, cfg["sigma0"], cfg["sigma1"], cfg["alpha0"])
    raise ConfigError(f"unknown schedule kind {kind!r}")


def toy_task(cfg) -> ToyImageTask:
    return ToyImageTask(side=cfg["side"], mode=cfg["mode"], noise_std=cfg["noise_std"],
                        max_shapes=cfg["max_shapes"], train=cfg["train_count"], val=cfg["val_count"],
                        test=cfg["test_count"], seed=cfg["data_seed"])


def _condition_rows(data):
    return data.cond if data.n_cond else None


def build_denoiser(cfg, data):
    """Return (denoiser, schedule) for sampling."""
    if cfg["oracle"]:
        schedule = build_schedule(cfg)
        n = data.n if data is not None else cfg["dim"]
        mean = np.full(n, cfg["oracle_mean"])
        var = np.full(n, cfg["oracle_var"])
        if cfg["cond_noise"] > 0:
            return ConditionalGaussianOracle(ConditionalGaussianTask(mean, var, cfg["cond_noise"]), schedule), schedule
        return GaussianOracle(GaussianTarget(mean, var), schedule), schedule
    if not cfg["checkpoint"]:
        raise ConfigError("sampling needs checkpoint=PATH or oracle=true")
    model, _, _ = load_checkpoint(cfg["checkpoint"])
    return model, model.schedule if model.schedule is not None else build_schedule(cfg)


# --------------------------------------------------------------------------
# commands


def _manifest(command, cfg, out, **extra):
    doc = {"command": command, "version": __version__, "config": cfg, **extra}
    dump_json(doc, os.path.join(out, "manifest.json"))
    return doc


def cmd_schedule(cfg):
    """Tabulate one schedule on a uniform grid."""
    sched = build_schedule(cfg)
    os.makedirs(cfg["out"], exist_ok=True)
    write_schedule_csv(schedule_table(sched, cfg["grid"]), os.path.join(cfg["out"], "schedule.csv"))
    _manifest("schedule", cfg, cfg["out"], schedule=sched.to_dict(), outputs=["schedule.csv"])


def cmd_diagnose(cfg):
    """Fisher-Rao length, energy and speed diagnostics for paths with shared endpoints."""
    kinds = [k.strip() for k in cfg["kinds"].split(",") if k.strip()]
    if not kinds:
        raise ConfigError("kinds is empty")
    schedules = [build_schedule(cfg, k) for k in kinds]
    diags = compare_energies(schedules, cfg["A"], cfg["n"], cfg["quadrature"], cfg["samples"])
    os.makedirs(cfg["out"], exist_ok=True)
    report = {"paths": [d.to_json() for d in diags]}
    for d in report["paths"]:
        print(f"{d['kind']:24s} length={d['length']:.10g} energy={d['energy']:.10g} "
              f"E/(l^2/2)={d['energy_over_half_length_sq']:.10g}")
    dump_json(report, os.path.join(cfg["out"], "diagnostics.json"))
    _manifest("diagnose", cfg, cfg["out"], outputs=["diagnostics.json"])


def _training_data(cfg):
    """Return (train, val, recipe) and persist generated splits under out/data."""
    if cfg["data"]:
        return load_image_dataset(cfg["data"]), None, {"data": cfg["data"]}
    task = toy_task(cfg)
    splits = make_toy_images(task)
    recipe = task_to_dict(task)
    for name, split in splits.items():
        save_image_dataset(split, os.path.join(cfg["out"], "data", name), extra=recipe)
    return splits["train"], splits["val"], recipe


def cmd_train(cfg):
    """Train the conditional noise predictor; writes a checkpoint and the loss trace."""
    os.makedirs(cfg["out"], exist_ok=True)
    data, _, recipe = _training_data(cfg)
    resume = None
    if cfg["resume"]:
        model, state, extra = load_checkpoint(cfg["resume"])
        if state is None or "rng_state" not in extra:
            raise ConfigError(f"{cfg['resume']} carries no optimizer state to resume from")
        resume = TrainResult(model, np.empty(0), state, extra["rng_state"], int(extra["iteration"]))
        schedule = model.schedule
    else:
        schedule = build_schedule(cfg)
        model = MlpDenoiser(data.n, data.n_cond, cfg["hidden"], cfg["time_dim"], schedule=schedule,
                            sigma_data=cfg["sigma_data"], linear_skip=cfg["linear_skip"],
                            centre_on_condition=cfg["centre_on_condition"],
                            zero_init_output=cfg["zero_init_output"], seed=cfg["seed"])
    config = TrainingConfig(cfg["batch_size"], cfg["lr"], cfg["beta1"], cfg["beta2"], cfg["eps"],
                            cfg["iterations"], cfg["seed"], schedule)
    result = train(model, data, config, resume=resume)
    start = result.iteration - len(result.losses)
    write_loss_csv(result.losses, os.path.join(cfg["out"], "loss.csv"), start)
    save_checkpoint(os.path.join(cfg["out"], "checkpoint.gdm"), result.model, result.optimizer,
                    {"rng_state": result.rng_state, "iteration": result.iteration})
    if len(result.losses):
        print(f"iterations {start}..{result.iteration - 1}: loss {result.losses[0]:.6g} -> {result.losses[-1]:.6g}")
    _manifest("train", cfg, cfg["out"], recipe=recipe, schedule=schedule.to_dict(),
              parameters=result.model.parameter_count, outputs=["checkpoint.gdm", "loss.csv"])


def _run_sampler(cfg, out):
    data = load_image_dataset(cfg["data"]) if cfg["data"] else None
    denoiser, schedule = build_denoiser(cfg, data)
    config = SamplerConfig(cfg["steps"], schedule, cfg["ratio"], cfg["seed"])
    cond = None
    if data is not None and data.n_cond:
        cond = data.cond
        if cfg["count"]:
            cond = cond[: cfg["count"]]
    if cond is None and config.truncated:
        raise MissingCondition("truncated sampling needs conditions (data=DIR) or ratio=full")
    n = data.n if data is not None else cfg["dim"]
    batch = cfg["count"] or 16
    x = sample(config, denoiser, cond, batch=batch, n=n)
    os.makedirs(out, exist_ok=True)
    write_vectors_csv(x, os.path.join(out, "samples.csv"))
    outputs = ["samples.csv"]
    if data is not None and data.shape is not None:
        for i, row in enumerate(x):
            write_pgm(os.path.join(out, "images", f"{i:05d}.pgm"), row.reshape(data.shape))
        outputs.append("images/")
    knots = [float(k) for k in make_time_grid(config).knots]
    _manifest("sample", cfg, out, schedule=schedule.to_dict(), knots=knots, outputs=outputs)
    return x


def cmd_sample(cfg):
    """Euler sampling from a checkpoint or the analytic oracle."""
    _run_sampler(cfg, cfg["out"])


def _image_stack(directory):
    """Clean images of a dataset directory, or every .pgm in a plain directory, sorted by name."""
    if os.path.exists(os.path.join(directory, "index.json")):
        data = load_image_dataset(directory)
        return data.x0.reshape(-1, *data.shape), data
    names = sorted(f for f in os.listdir(directory) if f.endswith(".pgm"))
    if not names:
        raise FileNotFoundError(f"no .pgm files in {directory}")
    return np.stack([read_pgm(os.path.join(directory, f)) for f in names]), None


def evaluate(pred_dir, truth_dir) -> dict:
    if os.path.isdir(os.path.join(pred_dir, "images")):
        pred_dir = os.path.join(pred_dir, "images")
    pred, _ = _image_stack(pred_dir)
    truth, data = _image_stack(truth_dir)
    if len(pred) != len(truth):
        raise LengthMismatch(f"{len(pred)} predictions vs {len(truth)} ground-truth images")
    if pred.shape != truth.shape:
        raise LengthMismatch(f"image shapes differ: {pred.shape[1:]} vs {truth.shape[1:]}")
    p = [psnr_pm1(a, b) for a, b in zip(pred, truth)]
    s = [ssim_pm1(a, b) for a, b in zip(pred, truth)]
    report = {
        "count": len(pred),
        "psnr": {"mean": float(np.mean(p)), "median": float(np.median(p)), "per_image": p},
        "ssim": {"mean": float(np.mean(s)), "median": float(np.median(s)), "per_image": s},
    }
    if data is not None and data.n_cond:
        degraded = data.cond.mean(axis=1).reshape(truth.shape)
        d = [psnr_pm1(a, b) for a, b in zip(degraded, truth)]
        report["degraded_psnr"] = {"mean": float(np.mean(d)), "median": float(np.median(d))}
        report["median_psnr_gain"] = float(np.median(np.subtract(p, d)))
    return report


def cmd_eval(cfg):
    """PSNR and SSIM of sampled images against ground truth."""
    if not (cfg["pred"] and cfg["truth"]):
        raise ConfigError("eval needs pred=DIR and truth=DIR")
    report = evaluate(cfg["pred"], cfg["truth"])
    os.makedirs(cfg["out"], exist_ok=True)
    dump_json(report, os.path.join(cfg["out"], "metrics.json"))
    print(f"PSNR median {report['psnr']['median']:.3f} dB, SSIM median {report['ssim']['median']:.4f}")
    _manifest("eval", cfg, cfg["out"], outputs=["metrics.json"])


def _threads():
    raw = os.environ.get("GDM_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"GDM_THREADS must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"GDM_THREADS must be a positive integer, got {raw!r}")
    return value


def _sweep_child(job):
    """One isolated sweep run; returns its summary row."""
    what, value, cfg = job
    out = cfg["out"]
    if what == "family":
        cmd_schedule(cfg)
        return {"sigma1": cfg["sigma1"], "alpha1": cfg["alpha1"], "csv": os.path.join(os.path.basename(out), "schedule.csv")}
    x = _run_sampler(cfg, out)
    row = {what: value}
    if cfg["data"] and os.path.exists(os.path.join(cfg["data"], "index.json")):
        truth = load_image_dataset(cfg["data"]).x0[: len(x)]
        row["rms_error"] = float(np.sqrt(np.mean((x - truth) ** 2)))
        if os.path.isdir(os.path.join(out, "images")):
            report = evaluate(out, cfg["data"])
            row["psnr_median"] = report["psnr"]["median"]
            row["ssim_median"] = report["ssim"]["median"]
    return row


def cmd_sweep(cfg):
    """Repeat sampling over step counts or ratios, or tabulate the terminal-parameter family."""
    what = cfg["what"]
    base = {k: v for k, v in cfg.items() if k in SCHEMAS["sample"]}
    if what == "family":
        base = {k: v for k, v in cfg.items() if k in SCHEMAS["schedule"]}
        jobs = [("family", i, {**base, "alpha1": a1, "sigma1": s1, "kind": "geodesic",
                               "out": os.path.join(cfg["out"], f"row{i}_sigma1_{s1:g}_alpha1_{a1:g}")})
                for i, (s1, a1) in enumerate(TERMINAL_FAMILY, 1)]
    elif what == "steps":
        jobs = [("steps", n, {**base, "steps": n, "out": os.path.join(cfg["out"], f"steps_{n}")})
                for n in cfg["steps_list"]]
    elif what == "ratios":
        jobs = [("ratio", r, {**base, "ratio": r, "out": os.path.join(cfg["out"], f"ratio_{r:g}")})
                for r in cfg["ratio_list"]]
    else:
        raise ConfigError(f"unknown sweep {what!r}; choose steps, ratios or family")
    if not jobs:
        raise ConfigError("sweep list is empty")
    workers = min(_threads(), len(jobs))
    if workers == 1:
        rows = [_sweep_child(j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_sweep_child, jobs))
    os.makedirs(cfg["out"], exist_ok=True)
    dump_json({"rows": rows}, os.path.join(cfg["out"], "sweep.json"))
    children = [os.path.relpath(j[2]["out"], cfg["out"]) for j in jobs]
    _manifest("sweep", cfg, cfg["out"], outputs=["sweep.json", *children])
    for row in rows:
        print(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))


COMMANDS = {
    "schedule": cmd_schedule,
    "diagnose": cmd_diagnose,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


# --------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser():
    parser = _Parser(prog="gdm", description="Geodesic diffusion schedules, training and sampling.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name, help=COMMANDS[name].__doc__)
        p.add_argument("--config", help="key = value file or a manifest.json")
        for key, spec in schema.items():
            flags = [f"--{key}"]
            if "_" in key:
                flags.append(f"--{key.replace('_', '-')}")
            p.add_argument(*flags, dest=key, default=None, metavar=key.upper(), help=f"{spec.help} [{spec.default}]")
    return parser


def run(argv=None) -> int:
    """Parse ``argv``, run the command, and map failures to exit codes."""
    try:
        args = build_parser().parse_args(argv)
        values = vars(args)
        command = values.pop("command")
        path = values.pop("config")
        file_values = read_config_file(path) if path else {}
        cfg = resolve(command, file_values, values)
        COMMANDS[command](cfg)
    except ConfigError as exc:
        print(f"gdm: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, ArithmeticError, FloatingPointError) as exc:
        print(f"gdm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, json.JSONDecodeError) as exc:
        print(f"gdm: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except GeodesicDiffusionError as exc:
        print(f"gdm: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
