"""Command-line surface: simulate, train, evaluate, search, sweep, export.

Every command is deterministic given its inputs and seed, so rerunning
with identical arguments rewrites identical files; wall-clock fields in
report files are the one exception and should be excluded from any
content hashing.  Structured outputs are JSON with CSV mirrors for
plotting.  Units inside files are meters, Hz, and radians; flags accept
degrees with an explicit ``deg`` suffix.

Exit codes: 0 success, 2 bad input, 3 training divergence, 4 missing
dependency product, 5 invalid or untrained model, 6 resource guard.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
import time
from dataclasses import fields as dc_fields

import numpy as np

from .core import FrequencyConfig
from .field import density_grid
from .io import (
    dump_json,
    load_checkpoint,
    load_dataset,
    load_json,
    load_raysearch,
    load_scene,
    save_dataset,
    save_raysearch,
)
from .mlp import TrainingDiverged
from .raysearch import run_raysearch
from .sim import (
    MATERIALS,
    Dataset,
    generate_dataset,
    longest_path_length,
    make_shoebox,
)
from .train import ResourceGuardError, TrainConfig, evaluate, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_MISSING_PRODUCT = 4
EXIT_INVALID_MODEL = 5
EXIT_RESOURCE = 6

# density_grid enforces the same cap; checking here keeps the exit code
# distinct from ordinary bad input.
DENSITY_CELL_CAP = 2_000_000

EXPERIMENT_AXES = (
    "train_fraction",
    "material",
    "frequency",
    "subcarrier",
    "noise_snr_db",
)


class CliError(Exception):
    """Failure that should terminate the process with a specific code."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


def _finite_or_none(value) -> float | None:
    v = float(value)
    return v if math.isfinite(v) else None


def _parse_vector(text: str, n: int = 3) -> np.ndarray:
    try:
        parts = [float(p) for p in str(text).split(",")]
    except ValueError:
        parts = []
    if len(parts) != n:
        raise CliError(
            EXIT_USAGE, f"expected {n} comma-separated numbers, got {text!r}"
        )
    return np.array(parts, dtype=np.float64)


def _parse_angle(value) -> float:
    """Radians from a flag value; a trailing ``deg`` marks degrees."""
    if not isinstance(value, str):
        return float(value)
    t = value.strip().lower()
    try:
        if t.endswith("deg"):
            return math.radians(float(t[:-3]))
        if t.endswith("rad"):
            return float(t[:-3])
        return float(t)
    except ValueError:
        raise CliError(EXIT_USAGE, f"cannot parse angle {value!r}")


def _parse_subcarriers(text: str) -> tuple[int, int]:
    lo, sep, hi = text.partition("..")
    try:
        if not sep:
            raise ValueError
        k_lo, k_hi = int(lo), int(hi)
    except ValueError:
        raise CliError(
            EXIT_USAGE, f"subcarrier range must look like -26..26, got {text!r}"
        )
    if k_lo > k_hi:
        raise CliError(EXIT_USAGE, "subcarrier range must be ascending")
    return k_lo, k_hi


def _parse_resolution(text: str) -> tuple[int, int, int]:
    try:
        parts = [int(p) for p in str(text).split(",")]
    except ValueError:
        parts = []
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3 or min(parts) < 1:
        raise CliError(
            EXIT_USAGE, f"resolution must be one or three positive integers, got {text!r}"
        )
    return tuple(parts)


def _load_config(args) -> dict:
    if args.config is None:
        return {}
    if not os.path.exists(args.config):
        raise CliError(EXIT_USAGE, f"config file not found: {args.config}")
    cfg = load_json(args.config)
    if not isinstance(cfg, dict):
        raise CliError(EXIT_USAGE, "config file must hold a JSON object")
    return cfg


def _setting(args, cfg: dict, key: str, default):
    """Flag value if given, else config-file value, else the default."""
    value = getattr(args, key, None)
    if value is None:
        value = cfg.get(key, default)
    return value


def _out_dir(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _load_dataset_file(path: str) -> Dataset:
    if not os.path.exists(path):
        raise CliError(EXIT_USAGE, f"dataset not found: {path}")
    try:
        return load_dataset(path)
    except Exception as exc:
        raise CliError(EXIT_USAGE, f"cannot read dataset {path}: {exc}")


def _load_model(path: str):
    """Checkpoint loader mapping failures to the invalid-model exit code."""
    if not os.path.exists(path):
        raise CliError(EXIT_USAGE, f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except Exception as exc:
        raise CliError(EXIT_INVALID_MODEL, f"not a usable checkpoint: {exc}")


def _write_csv(path: str, header: list, rows: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))

    scene_file = _setting(args, cfg, "scene", None)
    shoebox = _setting(args, cfg, "shoebox", None)
    if (scene_file is None) == (shoebox is None):
        raise CliError(EXIT_USAGE, "give exactly one of --scene or --shoebox")
    if scene_file is not None:
        if not os.path.exists(scene_file):
            raise CliError(EXIT_USAGE, f"scene not found: {scene_file}")
        try:
            scene = load_scene(scene_file)
        except Exception as exc:
            raise CliError(EXIT_USAGE, f"cannot read scene {scene_file}: {exc}")
    else:
        dims = (
            _parse_vector(shoebox)
            if isinstance(shoebox, str)
            else np.asarray(shoebox, dtype=np.float64)
        )
        material = _setting(args, cfg, "material", "pec")
        if material not in MATERIALS:
            known = ", ".join(sorted(MATERIALS))
            raise CliError(
                EXIT_USAGE, f"unknown material {material!r} (known: {known})"
            )
        tx = _setting(args, cfg, "transmitter", None)
        if tx is None:
            raise CliError(EXIT_USAGE, "--shoebox needs --transmitter")
        tx = _parse_vector(tx) if isinstance(tx, str) else np.asarray(tx, dtype=np.float64)
        scene = make_shoebox(dims, MATERIALS[material], tx)

    k = int(_setting(args, cfg, "subcarrier_range", 26))
    frequency = FrequencyConfig(
        carrier_hz=float(_setting(args, cfg, "frequency", 2.412e9)),
        subcarrier_spacing_hz=float(_setting(args, cfg, "subcarrier_spacing", 312.5e3)),
        subcarrier_range=(-k, k),
    )
    dataset = generate_dataset(
        scene,
        frequency,
        n_receivers=int(_setting(args, cfg, "receivers", 400)),
        train_fraction=float(_setting(args, cfg, "train_fraction", 0.8)),
        seed=seed,
        max_order=int(_setting(args, cfg, "max_order", 2)),
        min_clearance=float(_setting(args, cfg, "min_clearance", 0.1)),
    )
    path = os.path.join(out, "dataset.json")
    save_dataset(path, dataset)
    _say(
        args,
        f"wrote {path}: {len(dataset.measurements)} measurements, "
        f"{dataset.density_per_ft3:.3f} per cubic foot",
    )
    return EXIT_OK


def _train_config_from(args, cfg: dict, dataset: Dataset, quiet: bool) -> TrainConfig:
    known = {f.name for f in dc_fields(TrainConfig)}
    unknown = sorted(set(cfg) - known)
    if unknown and not quiet:
        print(f"ignoring unknown config keys: {', '.join(unknown)}")
    merged = {k: v for k, v in cfg.items() if k in known}
    for key in known:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    if args.seed is not None:
        merged["seed"] = args.seed
    if "t_far" not in merged:
        # far bound reaching the most distant contributing virtual
        # transmitter, with 5% headroom
        merged["t_far"] = float(math.ceil(1.05 * longest_path_length(dataset)))
    try:
        return TrainConfig(**merged)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_USAGE, f"bad training config: {exc}")


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    dataset = _load_dataset_file(args.dataset)
    config = _train_config_from(args, cfg, dataset, args.quiet)
    if args.resume is not None and not os.path.exists(args.resume):
        raise CliError(EXIT_USAGE, f"resume checkpoint not found: {args.resume}")

    checkpoint = os.path.join(out, "checkpoint.rfb")
    report_path = os.path.join(out, "train_report.json")
    try:
        model, report = train(
            dataset,
            config,
            resume_from=args.resume,
            checkpoint_path=checkpoint,
            log_path=os.path.join(out, "train_log.jsonl"),
        )
    except TrainingDiverged as exc:
        if exc.report is not None:
            dump_json(report_path, exc.report.to_dict())
        raise CliError(EXIT_DIVERGED, f"training diverged: {exc}")
    dump_json(report_path, report.to_dict())
    _say(
        args,
        f"wrote {checkpoint}: {report.iterations_run} iterations, "
        f"final loss {report.final_loss:.3e}, stop: {report.stop_reason}",
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    out = _out_dir(args)
    dataset = _load_dataset_file(args.dataset)
    model, _ = _load_model(args.checkpoint)

    doa_source = "ground_truth"
    predictor = None
    if args.doa == "raysearch":
        doa_source = "raysearch"
        if args.raysearch is None:
            raise CliError(
                EXIT_MISSING_PRODUCT,
                "--doa raysearch needs --raysearch FILE (run the raysearch command first)",
            )
        if not os.path.exists(args.raysearch):
            raise CliError(
                EXIT_MISSING_PRODUCT,
                f"ray-search product not found: {args.raysearch}",
            )
        predictor = load_raysearch(args.raysearch).doa_predictor()

    base = evaluate(
        model, dataset, split=args.split, doa_source=doa_source, doa_predictor=predictor
    )
    ids = dataset.indices(args.split)
    positions = dataset.positions()[ids]

    base_dict = base.to_dict()
    for key in ("nmse", "snr_db"):
        base_dict[key] = _finite_or_none(base_dict[key])
    report = {
        "format": "radfield-eval",
        "version": 1,
        "base": base_dict,
        "measurements": [
            {
                "index": int(ids[i]),
                "position": [float(v) for v in positions[i]],
                "truth": [base.truths[i].real, base.truths[i].imag],
                "prediction": [base.predictions[i].real, base.predictions[i].imag],
            }
            for i in range(len(ids))
        ],
    }
    _write_csv(
        os.path.join(out, "eval_measurements.csv"),
        ["index", "x", "y", "z", "truth_re", "truth_im", "pred_re", "pred_im"],
        [
            [
                int(ids[i]),
                positions[i][0],
                positions[i][1],
                positions[i][2],
                base.truths[i].real,
                base.truths[i].imag,
                base.predictions[i].real,
                base.predictions[i].imag,
            ]
            for i in range(len(ids))
        ],
    )

    if args.subcarriers is not None:
        k_lo, k_hi = _parse_subcarriers(args.subcarriers)
        rows = []
        for k in range(k_lo, k_hi + 1):
            f_k = dataset.frequency.subcarrier_frequency(k)
            rep = evaluate(
                model,
                dataset,
                split=args.split,
                doa_source=doa_source,
                doa_predictor=predictor,
                frequency_hz=f_k,
            )
            rows.append(
                {
                    "k": k,
                    "frequency_hz": f_k,
                    "nmse": _finite_or_none(rep.nmse),
                    "snr_db": _finite_or_none(rep.snr_db),
                }
            )
        report["subcarriers"] = rows
        _write_csv(
            os.path.join(out, "eval_subcarriers.csv"),
            ["k", "frequency_hz", "nmse", "snr_db"],
            [[r["k"], r["frequency_hz"], r["nmse"], r["snr_db"]] for r in rows],
        )

    dump_json(os.path.join(out, "eval_report.json"), report)
    _say(
        args,
        f"{args.split} split: NMSE {base.nmse:.4e}, SNR {base.snr_db:.2f} dB "
        f"over {base.n_measurements} measurements",
    )
    return EXIT_OK


def cmd_raysearch(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    dataset = _load_dataset_file(args.dataset)
    model, _ = _load_model(args.checkpoint)

    kwargs = {}
    for key, cast in (("w_min", float), ("eps", float), ("min_pts", int), ("k_neighbors", int)):
        value = _setting(args, cfg, key, None)
        if value is not None:
            kwargs[key] = cast(value)
    angle = _setting(args, cfg, "angle_tol", None)
    if angle is not None:
        kwargs["angle_tol"] = _parse_angle(angle)
    if args.seed is not None:
        kwargs["seed"] = args.seed

    try:
        result = run_raysearch(model, dataset, **kwargs)
    except RuntimeError as exc:
        raise CliError(
            EXIT_INVALID_MODEL, f"ray search found no usable density (untrained model?): {exc}"
        )

    path = os.path.join(out, "raysearch.json")
    save_raysearch(path, result)
    vts = result.transmitters
    for i, c in enumerate(vts.centroids):
        _say(
            args,
            f"virtual transmitter {i}: ({c[0]:.3f}, {c[1]:.3f}, {c[2]:.3f}) m, "
            f"{int(vts.member_counts[i])} members",
        )
    _say(
        args,
        f"wrote {path}: {len(vts.member_counts)} virtual transmitters, "
        f"matched fraction {result.assignments.matched_fraction():.3f}",
    )
    return EXIT_OK


def cmd_export_density(args) -> int:
    out = _out_dir(args)
    model, _ = _load_model(args.checkpoint)

    if args.bounds is not None:
        v = _parse_vector(args.bounds, n=6)
        bounds = (v[:3], v[3:])
    elif args.dataset is not None:
        bounds = _load_dataset_file(args.dataset).scene.bounds
    else:
        bounds = (model.box_min, model.box_max)
    if np.any(np.asarray(bounds[1]) <= np.asarray(bounds[0])):
        raise CliError(EXIT_USAGE, "bounds must have positive extent")

    res = _parse_resolution(args.resolution)
    n_cells = res[0] * res[1] * res[2]
    if n_cells > DENSITY_CELL_CAP:
        raise CliError(
            EXIT_RESOURCE,
            f"grid of {n_cells} cells exceeds the cap of {DENSITY_CELL_CAP}",
        )

    centers, sigma = density_grid(model, bounds, res, which=args.which)
    mask = sigma >= args.threshold
    points = centers[mask]
    values = sigma[mask]
    path = os.path.join(out, "density.csv")
    _write_csv(
        path,
        ["x", "y", "z", "sigma"],
        [[points[i, 0], points[i, 1], points[i, 2], values[i]] for i in range(len(values))],
    )
    _say(
        args,
        f"wrote {path}: {len(values)} of {n_cells} cells at sigma >= {args.threshold}",
    )
    return EXIT_OK


def _generate_from_base(base: dict, seed: int, material=None, carrier_hz=None) -> Dataset:
    """Dataset from an experiment base config (shoebox scenes only)."""
    name = material if material is not None else base.get("material", "pec")
    if name not in MATERIALS:
        raise ValueError(f"unknown material {name!r}")
    if "shoebox" not in base or "transmitter" not in base:
        raise ValueError("experiment base needs 'shoebox' and 'transmitter' (or a 'dataset' file)")
    scene = make_shoebox(
        np.asarray(base["shoebox"], dtype=np.float64),
        MATERIALS[name],
        np.asarray(base["transmitter"], dtype=np.float64),
    )
    k = int(base.get("subcarrier_range", 26))
    frequency = FrequencyConfig(
        carrier_hz=float(carrier_hz if carrier_hz is not None else base.get("frequency", 2.412e9)),
        subcarrier_spacing_hz=float(base.get("subcarrier_spacing", 312.5e3)),
        subcarrier_range=(-k, k),
    )
    return generate_dataset(
        scene,
        frequency,
        n_receivers=int(base.get("receivers", 400)),
        train_fraction=float(base.get("train_fraction", 0.8)),
        seed=seed,
        max_order=int(base.get("max_order", 2)),
        min_clearance=float(base.get("min_clearance", 0.1)),
    )


def _subset_train(dataset: Dataset, fraction: float, row_seed: int) -> Dataset:
    """Keep a seed-chosen fraction of the train split; the test split stays."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"train_fraction value {fraction} outside (0, 1]")
    train_ids = dataset.indices("train")
    n_keep = math.floor(len(train_ids) * fraction)
    if n_keep < 1:
        raise ValueError(f"fraction {fraction} keeps no training measurements")
    rng = np.random.default_rng(np.random.SeedSequence(row_seed, spawn_key=(2, 0)))
    keep = set(train_ids[rng.permutation(len(train_ids))[:n_keep]].tolist())
    measurements, split = [], []
    for i, m in enumerate(dataset.measurements):
        if dataset.split[i] == "test":
            measurements.append(m)
            split.append("test")
        elif i in keep:
            measurements.append(m)
            split.append("train")
    return Dataset(
        scene=dataset.scene,
        frequency=dataset.frequency,
        measurements=measurements,
        split=split,
        seed=row_seed,
        max_order=dataset.max_order,
    )


def _row_train_config(base: dict, axis: str, value, seed: int, dataset: Dataset) -> TrainConfig:
    known = {f.name for f in dc_fields(TrainConfig)}
    merged = {k: v for k, v in dict(base.get("train", {})).items() if k in known}
    merged["seed"] = seed
    if axis == "noise_snr_db":
        merged["noise_snr_db"] = float(value)
    if "t_far" not in merged:
        merged["t_far"] = float(math.ceil(1.05 * longest_path_length(dataset)))
    return TrainConfig(**merged)


def _experiment_row(axis: str, value, base: dict, base_seed: int, row_seed: int) -> dict:
    """One sweep row: build data, train, score. Failures land in 'error'."""
    row = {
        "value": value,
        "seed": row_seed,
        "train_snr_db": None,
        "test_snr_db": None,
        "runtime_seconds": None,
        "error": None,
    }
    t0 = time.perf_counter()
    try:
        if axis == "material":
            dataset = _generate_from_base(base, seed=row_seed, material=str(value))
        elif axis == "frequency":
            dataset = _generate_from_base(base, seed=row_seed, carrier_hz=float(value))
        else:
            dataset = (
                load_dataset(base["dataset"])
                if "dataset" in base
                else _generate_from_base(base, seed=base_seed)
            )
            if axis == "train_fraction":
                dataset = _subset_train(dataset, float(value), row_seed)
        config = _row_train_config(base, axis, value, row_seed, dataset)
        model, _ = train(dataset, config)
        row["train_snr_db"] = _finite_or_none(evaluate(model, dataset, split="train").snr_db)
        row["test_snr_db"] = _finite_or_none(evaluate(model, dataset, split="test").snr_db)
    except Exception as exc:  # recorded, the sweep continues
        row["error"] = f"{type(exc).__name__}: {exc}"
    row["runtime_seconds"] = time.perf_counter() - t0
    return row


def _subcarrier_rows(values: list, base: dict, base_seed: int) -> list[dict]:
    """Shared-model sweep: train once, render each subcarrier frequency."""
    dataset = (
        load_dataset(base["dataset"])
        if "dataset" in base
        else _generate_from_base(base, seed=base_seed)
    )
    config = _row_train_config(base, "subcarrier", None, base_seed, dataset)
    model, _ = train(dataset, config)
    rows = []
    for k in sorted(int(v) for v in values):
        row = {
            "value": k,
            "seed": base_seed,
            "train_snr_db": None,
            "test_snr_db": None,
            "runtime_seconds": None,
            "error": None,
        }
        t0 = time.perf_counter()
        try:
            f_k = dataset.frequency.subcarrier_frequency(k)
            row["train_snr_db"] = _finite_or_none(
                evaluate(model, dataset, split="train", frequency_hz=f_k).snr_db
            )
            row["test_snr_db"] = _finite_or_none(
                evaluate(model, dataset, split="test", frequency_hz=f_k).snr_db
            )
        except Exception as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
        row["runtime_seconds"] = time.perf_counter() - t0
        rows.append(row)
    return rows


def _row_line(row: dict) -> str:
    if row["error"]:
        return f"  {row['value']}: FAILED ({row['error']})"
    return (
        f"  {row['value']}: train {row['train_snr_db']:.2f} dB, "
        f"test {row['test_snr_db']:.2f} dB, {row['runtime_seconds']:.1f} s"
    )


def cmd_experiment(args) -> int:
    out = _out_dir(args)
    if not os.path.exists(args.spec):
        raise CliError(EXIT_USAGE, f"spec not found: {args.spec}")
    spec = load_json(args.spec)
    if not isinstance(spec, dict):
        raise CliError(EXIT_USAGE, "experiment spec must be a JSON object")
    axis = spec.get("axis")
    if axis not in EXPERIMENT_AXES:
        raise CliError(EXIT_USAGE, f"axis must be one of: {', '.join(EXPERIMENT_AXES)}")
    values = spec.get("values")
    if not isinstance(values, list) or not values:
        raise CliError(EXIT_USAGE, "spec needs a non-empty 'values' list")
    base = spec.get("base")
    if not isinstance(base, dict):
        raise CliError(EXIT_USAGE, "spec needs a 'base' object")
    base_seed = args.seed if args.seed is not None else int(spec.get("seed", 0))
    name = spec.get("name", f"{axis}-sweep")

    try:
        values = sorted(values)
    except TypeError:
        raise CliError(EXIT_USAGE, "values must be mutually comparable")

    if axis == "subcarrier":
        rows = _subcarrier_rows(values, base, base_seed)
    else:
        # per-row seeds derive from the base seed by sorted position
        jobs = [(axis, v, base, base_seed, base_seed + 1 + i) for i, v in enumerate(values)]
        if args.parallel > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=args.parallel) as pool:
                rows = list(pool.map(_experiment_row, *zip(*jobs)))
        else:
            rows = [_experiment_row(*job) for job in jobs]

    for row in rows:
        _say(args, _row_line(row))
    dump_json(
        os.path.join(out, "experiment.json"),
        {
            "format": "radfield-experiment",
            "version": 1,
            "name": name,
            "axis": axis,
            "seed": base_seed,
            "rows": rows,
        },
    )
    _write_csv(
        os.path.join(out, "experiment.csv"),
        ["value", "train_snr_db", "test_snr_db", "runtime_seconds", "seed", "error"],
        [
            [
                r["value"],
                r["train_snr_db"],
                r["test_snr_db"],
                r["runtime_seconds"],
                r["seed"],
                r["error"] or "",
            ]
            for r in rows
        ],
    )
    failures = sum(1 for r in rows if r["error"])
    _say(args, f"wrote experiment.json and experiment.csv ({len(rows)} rows, {failures} failed)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="base random seed")
    common.add_argument("--config", default=None, help="JSON file with defaults for this command")
    common.add_argument("--out", default=None, help="output directory (default: current)")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    parser = argparse.ArgumentParser(
        prog="radfield",
        description="Reconstruct wireless radiation fields from sparse channel measurements.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("simulate", parents=[common], help="generate a multipath dataset")
    p.add_argument("--scene", default=None, help="scene geometry JSON file")
    p.add_argument("--shoebox", default=None, help="room dimensions in meters, e.g. 6,5,3")
    p.add_argument("--material", default=None, help="wall material name for --shoebox")
    p.add_argument("--transmitter", default=None, help="transmitter position, e.g. 1,1.2,1.5")
    p.add_argument("--frequency", type=float, default=None, help="carrier frequency in Hz")
    p.add_argument("--receivers", type=int, default=None, help="number of measurement positions")
    p.add_argument("--train-fraction", type=float, default=None)
    p.add_argument("--max-order", type=int, default=None, help="maximum reflection order")
    p.add_argument("--min-clearance", type=float, default=None)
    p.add_argument("--subcarrier-spacing", type=float, default=None, help="Hz between subcarriers")
    p.add_argument("--subcarrier-range", type=int, default=None, help="symmetric subcarrier bound")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", parents=[common], help="fit a field to a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--t-far", type=float, default=None, help="far render bound in meters")
    p.add_argument("--t-near", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--n-iterations", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--n-coarse", type=int, default=None, help="coarse samples per ray")
    p.add_argument("--n-fine", type=int, default=None, help="fine samples per ray")
    p.add_argument("--n-random-rays", type=int, default=None)
    p.add_argument("--dtype", choices=("float32", "float64"), default=None)
    p.add_argument("--noise-snr-db", type=float, default=None)
    p.add_argument("--noise-mode", choices=("fixed", "per_draw"), default=None)
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--eval-split", choices=("train", "test"), default=None)
    p.add_argument("--early-stop-snr-db", type=float, default=None)
    p.add_argument("--log-every", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint against a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--doa", choices=("gt", "raysearch"), default="gt",
                   help="ray direction source")
    p.add_argument("--raysearch", default=None, help="ray-search product for --doa raysearch")
    p.add_argument("--subcarriers", default=None, help="index range like -26..26")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("raysearch", parents=[common], help="recover virtual transmitters")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--w-min", type=float, default=None, help="peak weight threshold")
    p.add_argument("--eps", type=float, default=None, help="clustering radius in meters")
    p.add_argument("--min-pts", type=int, default=None)
    p.add_argument("--angle-tol", default=None, help="assignment tolerance, radians or e.g. 2deg")
    p.add_argument("--k-neighbors", type=int, default=None)
    p.set_defaults(func=cmd_raysearch)

    p = sub.add_parser("experiment", parents=[common], help="run a one-axis sweep")
    p.add_argument("--spec", required=True, help="experiment spec JSON")
    p.add_argument("--parallel", type=int, default=0,
                   help="worker processes (default: sequential)")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("export-density", parents=[common], help="dump the density grid as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--resolution", default="32", help="cells per axis, one int or nx,ny,nz")
    p.add_argument("--threshold", type=float, default=1.0, help="minimum density to keep")
    p.add_argument("--which", choices=("coarse", "fine"), default="fine")
    p.add_argument("--bounds", default=None, help="x0,y0,z0,x1,y1,z1 in meters")
    p.add_argument("--dataset", default=None, help="dataset whose scene bounds to use")
    p.set_defaults(func=cmd_export_density)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "func", None) is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ResourceGuardError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
