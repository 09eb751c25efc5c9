"""Command-line surface: analyze / train / sample / verify.

Every run resolves its parameters (command line over ``--config`` file over
defaults), writes the resolved set as ``run_config.json`` next to its
outputs, and re-running from that file reproduces the outputs byte for
byte under the same binary.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O or
format error.
"""

import argparse
import csv
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .dataio import FormatError, load_idx, load_image_dir, write_image
from .diffusion import ddpm_sample, sample
from .rng import make_rng
from .schedule import cosine_schedule
from .spectral import (
    radial_profile_from_magnitude,
    squared_magnitude,
    to_pixel,
    to_spectral,
)
from .stats import (
    RunningMoments,
    count_invariant,
    load_stats_json,
    power_law_fit,
    save_stats_json,
)
from .training import (
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    save_loss_csv,
    train_loop,
)
from .verify import run_suite

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3

_CONFIG_KEYS = {
    "analyze": {
        "data", "labels", "per_class", "threshold", "bins", "pad_to",
        "k_min", "k_max", "out", "seed", "threads", "quiet",
    },
    "train": {
        "data", "labels", "pad_to", "n_steps", "terminal_eps", "iterations",
        "batch_size", "learning_rate", "variance_floor", "stats_scope",
        "hidden", "time_features", "out_dir", "seed", "threads", "quiet",
        "checkpoint_every",
    },
    "sample": {
        "stats", "ckpt", "n", "label", "steps", "trajectory", "baseline",
        "out", "seed", "threads", "quiet", "terminal_eps",
    },
    "verify": {"suite", "out", "seed", "threads", "quiet"},
}


class _Abort(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _say(args, message):
    if not args.quiet:
        print(message, file=sys.stderr)


def _load_config_file(path, command):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise _Abort(EXIT_IO, f"cannot read config {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise _Abort(EXIT_USAGE, f"config {path} is not valid JSON: {exc}")
    doc.pop("command", None)
    unknown = set(doc) - _CONFIG_KEYS[command]
    if unknown:
        raise _Abort(
            EXIT_USAGE,
            f"config {path} has unknown keys for {command}: {sorted(unknown)}",
        )
    return doc


def _resolve(args, command, defaults):
    """Merge CLI values, config file values and defaults; CLI wins."""
    config = {}
    if getattr(args, "config", None):
        config = _load_config_file(args.config, command)
    resolved = {}
    for key, default in defaults.items():
        cli_value = getattr(args, key, None)
        if cli_value is not None and cli_value is not False:
            resolved[key] = cli_value
        elif key in config and config[key] is not None:
            resolved[key] = config[key]
        else:
            resolved[key] = default
    return resolved


def _write_run_config(out_dir, command, resolved):
    doc = {"command": command}
    doc.update(resolved)
    path = Path(out_dir) / "run_config.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def _load_dataset(data, labels=None, pad_to=None):
    path = Path(data)
    if not path.exists():
        raise _Abort(EXIT_IO, f"dataset path does not exist: {data}")
    try:
        if path.is_dir():
            return load_image_dir(path, pad_to=pad_to)
        return load_idx(path, labels_path=labels, pad_to=pad_to)
    except FormatError as exc:
        raise _Abort(EXIT_IO, str(exc))
    except OSError as exc:
        raise _Abort(EXIT_IO, f"cannot read dataset: {exc}")


# ---------------------------------------------------------------- analyze

def _cmd_analyze(args):
    resolved = _resolve(args, "analyze", {
        "data": None, "labels": None, "per_class": False, "threshold": 1e-3,
        "bins": 24, "pad_to": None, "k_min": 1.0, "k_max": None,
        "out": "stats.json", "seed": 0, "threads": 1, "quiet": False,
    })
    if resolved["data"] is None:
        raise _Abort(EXIT_USAGE, "analyze requires --data")
    handle = _load_dataset(resolved["data"], resolved["labels"],
                           resolved["pad_to"])
    if resolved["per_class"] and handle.labels is None:
        raise _Abort(EXIT_USAGE, "--per-class requires a labeled dataset")

    out_path = Path(resolved["out"])
    out_dir = out_path.parent if out_path.parent != Path("") else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)

    pooled = RunningMoments()
    per_class = {}
    mag_mean = RunningMoments()
    per_class_mag = {}
    for i, image in enumerate(handle.iter_images()):
        field = to_spectral(image)
        pooled.update(field)
        mag_mean.update(squared_magnitude(field))
        if resolved["per_class"]:
            label = int(handle.labels[i])
            per_class.setdefault(label, RunningMoments()).update(field)
            per_class_mag.setdefault(label, RunningMoments()).update(
                squared_magnitude(field)
            )

    stats_list = [pooled.finalize()]
    for label in sorted(per_class):
        stats_list.append(per_class[label].finalize(label=label))

    grid = handle.image_shape[-2:]
    k_max = resolved["k_max"] or min(grid) / 2
    profile = radial_profile_from_magnitude(mag_mean.mean, resolved["bins"])
    try:
        fit = power_law_fit(profile, resolved["k_min"], k_max)
        fit_doc = {
            "exponent": fit.exponent, "k_min": fit.k_min,
            "k_max": fit.k_max, "residual": fit.residual,
        }
    except ValueError as exc:
        fit_doc = {"error": str(exc)}
        _say(args, f"power-law fit skipped: {exc}")

    extra = {"power_law": fit_doc, "source": handle.source}
    if handle.padded_from is not None:
        extra["padded_from"] = list(handle.padded_from)
    save_stats_json(out_path, stats_list, extra=extra)

    inv_path = out_dir / "invariance.csv"
    with open(inv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "threshold", "exact_zero", "near_zero"])
        for stats in stats_list:
            report = count_invariant(stats, resolved["threshold"])
            writer.writerow([
                "all" if stats.label is None else stats.label,
                report.threshold, report.count_exact_zero,
                report.count_near_zero,
            ])

    prof_path = out_dir / "radial_profile.csv"
    with open(prof_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "radius", "power", "count"])
        for radius, power, count in profile.rows():
            writer.writerow(["all", repr(radius), repr(power), count])
        for label in sorted(per_class_mag):
            class_profile = radial_profile_from_magnitude(
                per_class_mag[label].mean, resolved["bins"]
            )
            for radius, power, count in class_profile.rows():
                writer.writerow([label, repr(radius), repr(power), count])

    _write_run_config(out_dir, "analyze", resolved)
    _say(args, f"analyzed {handle.n_items} images -> {out_path}, "
               f"{inv_path}, {prof_path}")
    return EXIT_OK


# ------------------------------------------------------------------ train

def _cmd_train(args):
    resolved = _resolve(args, "train", {
        "data": None, "labels": None, "pad_to": None, "n_steps": 100,
        "terminal_eps": 1e-5, "iterations": 500, "batch_size": 8,
        "learning_rate": 0.05, "variance_floor": 1e-3,
        "stats_scope": "global", "hidden": 16, "time_features": 8,
        "out_dir": "train_out", "seed": None, "threads": 1, "quiet": False,
        "checkpoint_every": 500,
    })
    if resolved["data"] is None:
        raise _Abort(EXIT_USAGE, "train requires a data path (--data or config)")
    if resolved["seed"] is None:
        raise _Abort(EXIT_USAGE, "train requires --seed")
    handle = _load_dataset(resolved["data"], resolved["labels"],
                           resolved["pad_to"])
    if resolved["stats_scope"] == "per-class" and handle.labels is None:
        raise _Abort(EXIT_USAGE, "per-class training requires labels")

    out_dir = Path(resolved["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    sched = cosine_schedule(resolved["n_steps"], resolved["terminal_eps"])
    config = TrainConfig(
        iterations=resolved["iterations"],
        batch_size=resolved["batch_size"],
        learning_rate=resolved["learning_rate"],
        variance_floor=resolved["variance_floor"],
        seed=resolved["seed"],
        stats_scope=resolved["stats_scope"],
        hidden=resolved["hidden"],
        time_features=resolved["time_features"],
        checkpoint_path=str(out_dir / "checkpoint.ckpt"),
        checkpoint_every=resolved["checkpoint_every"],
    )
    _say(args, f"training on {handle.n_items} images for "
               f"{config.iterations} iterations")
    denoiser, history, stats = train_loop(
        config, handle.images.astype(np.float64), sched,
        labels=handle.labels, log=lambda m: _say(args, m),
    )
    save_checkpoint(out_dir / "checkpoint.ckpt", denoiser,
                    iteration=config.iterations, seed=config.seed)
    save_loss_csv(out_dir / "loss.csv", history)
    with open(out_dir / "schedule.json", "w", encoding="utf-8") as fh:
        fh.write(sched.to_json())
        fh.write("\n")

    if isinstance(stats, dict):
        # Per-class training: still ship pooled statistics so unconditional
        # sampling from this stats file is well-defined.
        pooled = RunningMoments()
        for image in handle.iter_images():
            pooled.update(to_spectral(image))
        stats_list = [pooled.finalize()] + [stats[k] for k in sorted(stats)]
    else:
        stats_list = [stats]
    extra = {"source": handle.source}
    if handle.padded_from is not None:
        extra["padded_from"] = list(handle.padded_from)
    save_stats_json(out_dir / "stats.json", stats_list, extra=extra)
    _write_run_config(out_dir, "train", resolved)
    _say(args, f"wrote checkpoint, loss history and stats to {out_dir}")
    return EXIT_OK


# ----------------------------------------------------------------- sample

def _spectral_l2(a, b):
    return float(np.sqrt(np.sum((a - b) ** 2)))


def _cmd_sample(args):
    resolved = _resolve(args, "sample", {
        "stats": None, "ckpt": None, "n": 16, "label": None, "steps": None,
        "trajectory": False, "baseline": "spectral", "out": "samples",
        "seed": None, "threads": 1, "quiet": False, "terminal_eps": 1e-5,
    })
    for required in ("stats", "ckpt"):
        if resolved[required] is None:
            raise _Abort(EXIT_USAGE, f"sample requires --{required}")
    if resolved["seed"] is None:
        raise _Abort(EXIT_USAGE, "sample requires --seed")
    if resolved["baseline"] not in ("spectral", "ddpm"):
        raise _Abort(EXIT_USAGE, f"unknown baseline {resolved['baseline']!r}")

    try:
        stats_list, _ = load_stats_json(resolved["stats"])
        denoiser, header = load_checkpoint(resolved["ckpt"])
    except (OSError, ValueError, KeyError) as exc:
        raise _Abort(EXIT_IO, f"cannot load inputs: {exc}")

    label = resolved["label"]
    if label is None:
        candidates = [s for s in stats_list if s.label is None] or stats_list
    else:
        candidates = [s for s in stats_list if s.label == label]
        if not candidates:
            raise _Abort(
                EXIT_USAGE,
                f"stats file has no entry for label {label!r}; available: "
                f"{[s.label for s in stats_list]}",
            )
    stats = candidates[0]

    n_steps = resolved["steps"] or 100
    sched = cosine_schedule(n_steps, resolved["terminal_eps"])
    out_dir = Path(resolved["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = resolved["seed"]
    record = bool(resolved["trajectory"])

    def one(index):
        rng = make_rng(seed, "sample", index)
        if resolved["baseline"] == "ddpm":
            return ddpm_sample(denoiser, stats.mu.shape, sched, rng), None
        if record:
            image, traj = sample(denoiser, stats, sched, rng,
                                 record_trajectory=True)
            return image, traj
        return sample(denoiser, stats, sched, rng), None

    n = resolved["n"]
    if resolved["threads"] > 1:
        with ThreadPoolExecutor(max_workers=resolved["threads"]) as pool:
            results = list(pool.map(one, range(n)))
    else:
        results = [one(i) for i in range(n)]

    manifest = {
        "label": label,
        "seed": seed,
        "n_steps": n_steps,
        "baseline": resolved["baseline"],
        "checkpoint_iteration": header["iteration"],
        "images": [],
    }
    for index, (image, trajectory) in enumerate(results):
        name = f"sample_{index:04d}.pgm" if image.shape[0] == 1 \
            else f"sample_{index:04d}.ppm"
        write_image(out_dir / name, np.clip(image, 0.0, 1.0))
        entry = {"index": index, "file": name}
        if trajectory is not None:
            target = to_spectral(image)
            traj_dir = out_dir / f"trajectory_{index:04d}"
            traj_dir.mkdir(exist_ok=True)
            frames = []
            for step, field in trajectory:
                frame_name = f"step_{step:04d}.pgm" if image.shape[0] == 1 \
                    else f"step_{step:04d}.ppm"
                write_image(traj_dir / frame_name,
                            np.clip(to_pixel(field), 0.0, 1.0))
                frames.append({
                    "step": step,
                    "file": f"{traj_dir.name}/{frame_name}",
                    "spectral_l2_to_target": _spectral_l2(field, target),
                })
            entry["trajectory"] = frames
        manifest["images"].append(entry)

    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    _write_run_config(out_dir, "sample", resolved)
    _say(args, f"wrote {n} samples to {out_dir}")
    return EXIT_OK


# ----------------------------------------------------------------- verify

def _cmd_verify(args):
    resolved = _resolve(args, "verify", {
        "suite": "all", "out": None, "seed": 0, "threads": 1, "quiet": False,
    })
    try:
        reports = run_suite(resolved["suite"], seed=resolved["seed"])
    except ValueError as exc:
        raise _Abort(EXIT_USAGE, str(exc))
    lines = [report.to_json() for report in reports]
    for line in lines:
        print(line)
    if resolved["out"]:
        out_path = Path(resolved["out"])
        if out_path.parent != Path(""):
            out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        _write_run_config(out_path.parent, "verify", resolved)
    failed = [r for r in reports if not r.passed]
    if failed:
        _say(args, f"{len(failed)} of {len(reports)} checks failed")
        return EXIT_CHECK_FAILED
    _say(args, f"all {len(reports)} checks passed")
    return EXIT_OK


# ------------------------------------------------------------------ main

def _build_parser():
    parser = argparse.ArgumentParser(
        prog="spectraldiff",
        description="Feature-preserving spectral diffusion toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="root seed for all random streams")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads for independent trajectories")
    common.add_argument("--quiet", action="store_true", default=False)
    common.add_argument("--config", type=str, default=None,
                        help="JSON file with resolved run parameters")

    p = sub.add_parser("analyze", parents=[common],
                       help="fit spectral statistics and invariance reports")
    p.add_argument("--data", type=str)
    p.add_argument("--labels", type=str)
    p.add_argument("--per-class", dest="per_class", action="store_true",
                   default=False)
    p.add_argument("--threshold", type=float)
    p.add_argument("--bins", type=int)
    p.add_argument("--pad-to", dest="pad_to", type=int)
    p.add_argument("--k-min", dest="k_min", type=float)
    p.add_argument("--k-max", dest="k_max", type=float)
    p.add_argument("--out", type=str)

    p = sub.add_parser("train", parents=[common],
                       help="train the built-in denoiser")
    p.add_argument("--data", type=str)
    p.add_argument("--labels", type=str)
    p.add_argument("--pad-to", dest="pad_to", type=int)
    p.add_argument("--n-steps", dest="n_steps", type=int)
    p.add_argument("--terminal-eps", dest="terminal_eps", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--variance-floor", dest="variance_floor", type=float)
    p.add_argument("--stats-scope", dest="stats_scope",
                   choices=["global", "per-class"])
    p.add_argument("--hidden", type=int)
    p.add_argument("--time-features", dest="time_features", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--out-dir", dest="out_dir", type=str)

    p = sub.add_parser("sample", parents=[common],
                       help="generate images from a trained model")
    p.add_argument("--stats", type=str)
    p.add_argument("--ckpt", type=str)
    p.add_argument("--n", type=int)
    p.add_argument("--label", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--trajectory", action="store_true", default=False)
    p.add_argument("--baseline", choices=["spectral", "ddpm"])
    p.add_argument("--terminal-eps", dest="terminal_eps", type=float)
    p.add_argument("--out", type=str)

    p = sub.add_parser("verify", parents=[common],
                       help="run the verification oracles")
    p.add_argument("--suite",
                   choices=["all", "forward", "posterior", "terminal", "drift"])
    p.add_argument("--out", type=str)
    return parser


_COMMANDS = {
    "analyze": _cmd_analyze,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "verify": _cmd_verify,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return _COMMANDS[args.command](args)
    except _Abort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
