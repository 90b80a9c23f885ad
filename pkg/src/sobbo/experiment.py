"""Experiment driver behind the command line: configs, staged outputs, manifest and reports.

An experiment lives in one output directory::

    config.resolved.json        every setting, defaults filled in
    manifest.json               sha256 of every other file in the directory
    data/repeat_###.csv (+.json)
    train/<method>/repeat_###/{trace.csv, ckpt_######.npz}
    eval/{gradients_long.csv, gradients_summary.csv, cos_sim.png, norm_dist.png}
    optimize/{optimization.csv, optimization.json}
    ablate/<axis>/{sweep.csv, summary.csv, <axis>.png}

Repeat ``r`` uses seed ``seed + r`` for its dataset and its training run.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import (
    GradientEstimator,
    GradientProbe,
    InferenceConfig,
    TrueValueOracle,
    baseline_dataset_oracle,
    baseline_random_search,
    normalize_score,
    optimize_design,
    reference_optimum,
)
from .losses import LossConfig
from .models import load_model
from .paths import QuadratureSpec
from .problems import PROBLEM_NAMES, OfflineDataset, generate_dataset, get_problem
from .training import METHODS, TrainConfig, checkpoint_path, train, variant_loss_config, write_trace

OUTPUT_ROOT_ENV = "SOBBO_OUTPUT_ROOT"

ABLATION_GRIDS = {
    "balance_weight": [0.0, 1.0, 10.0, 100.0, 1000.0],
    "num_paths": [0, 1, 4, 16, 64, 128],
    "integration_steps": [8, 32, 128, 512],
    "noise": ["inf", 2.0, 1.0, 0.2, 0.1, 0.05],
}

DEFAULTS = {
    "name": None,
    "problem": None,
    "regime": "scarce",
    "n": None,
    "s3nr": None,
    "repeats": None,
    "seed": 0,
    "output_dir": None,
    "methods": ["ETD", "DGI-full"],
    "train": {
        "learning_rate": 5e-4,
        "batch_size": 32,
        "steps": None,
        "eval_every": 20,
        "hidden": [500, 500, 500],
        "activation": "tanh",
        "balance_weight": 10.0,
        "num_paths": 64,
        "path_degree": 10,
        "integration_steps": 512,
        "balance_pairs": None,
        "trace_metrics": True,
    },
    "evaluation": {"n_thetas": 1000, "x_subset_size": None},
    "inference": {
        "gd_steps": 200,
        "gd_lr": 0.01,
        "attempts": 128,
        "x_subset_size": 128,
        "true_value_samples": 10000,
        "reference_starts": 16,
        "reference_steps": 500,
    },
    "ablation": {"axis": "balance_weight", "grid": None, "method": "DGI-full"},
}

REGIME_DEFAULTS = {
    "scarce": {"n": 128, "s3nr": 0.5, "repeats": 50, "steps": 2000},
    "large": {"n": 20000, "s3nr": 0.2, "repeats": 20, "steps": 20000},
}


class ConfigError(ValueError):
    """Invalid or inconsistent configuration, or missing inputs for a stage (exit code 2)."""


class OrphanFileError(ConfigError):
    pass


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


def _merge(base: dict, override: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{where}{k} must be an object")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def resolve_config(raw: dict, seed: int | None = None) -> dict:
    """Fill every default explicitly and validate. ``seed`` overrides the master seed."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULTS, raw, "")
    if cfg["problem"] not in PROBLEM_NAMES:
        raise ConfigError(f"unknown problem {cfg['problem']!r}; known: {', '.join(PROBLEM_NAMES)}")
    if cfg["regime"] not in REGIME_DEFAULTS:
        raise ConfigError("regime must be 'scarce' or 'large'")
    spec = get_problem(cfg["problem"])
    reg = dict(REGIME_DEFAULTS[cfg["regime"]])
    if cfg["regime"] == "large":
        reg["n"] = spec.default_n if spec.default_n > 128 else reg["n"]
    if spec.kind == "simulator":
        reg["s3nr"] = "inf"
    for key in ("n", "s3nr", "repeats"):
        if cfg[key] is None:
            cfg[key] = reg[key]
    if cfg["train"]["steps"] is None:
        cfg["train"]["steps"] = reg["steps"]
    if seed is not None:
        cfg["seed"] = int(seed)
    if cfg["name"] is None:
        cfg["name"] = f"{cfg['problem']}_{cfg['regime']}"
    if cfg["output_dir"] is None:
        cfg["output_dir"] = cfg["name"]
    if not isinstance(cfg["repeats"], int) or cfg["repeats"] < 1:
        raise ConfigError("repeats must be an integer >= 1")
    if not isinstance(cfg["n"], int) or cfg["n"] < 2:
        raise ConfigError("n must be an integer >= 2")
    _s3nr(cfg["s3nr"])
    if not cfg["methods"]:
        raise ConfigError("methods must be non-empty")
    for m in cfg["methods"]:
        if m not in METHODS or m == "DGI-custom":
            raise ConfigError(f"unknown method {m!r}")
    axis = cfg["ablation"]["axis"]
    if axis not in ABLATION_GRIDS:
        raise ConfigError(f"unknown ablation axis {axis!r}; known: {', '.join(ABLATION_GRIDS)}")
    if cfg["ablation"]["method"] not in METHODS or cfg["ablation"]["method"] in ("ETD", "DGI-custom"):
        raise ConfigError(f"ablation.method must be a named DGI variant, got {cfg['ablation']['method']!r}")
    if cfg["ablation"]["grid"] is None:
        cfg["ablation"]["grid"] = list(ABLATION_GRIDS[axis])
    try:
        for m in cfg["methods"]:
            train_config(cfg, m, 0)
        InferenceConfig("R", cfg["inference"]["gd_steps"], cfg["inference"]["gd_lr"], cfg["inference"]["x_subset_size"], cfg["inference"]["attempts"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _s3nr(v) -> float:
    if v in ("inf", "Infinity", math.inf):
        return math.inf
    try:
        v = float(v)
    except (TypeError, ValueError):
        raise ConfigError(f"s3nr must be a positive number or 'inf', got {v!r}") from None
    if not v > 0:
        raise ConfigError("s3nr must be > 0")
    return v


def load_config(path, seed: int | None = None) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return resolve_config(raw, seed)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def output_dir(cfg: dict, root=None) -> Path:
    out = Path(cfg["output_dir"])
    if out.is_absolute():
        return out
    base = root if root is not None else os.environ.get(OUTPUT_ROOT_ENV, "runs")
    return Path(base) / out


def train_config(cfg: dict, method: str, repeat: int, **override) -> TrainConfig:
    t = {**cfg["train"], **override}
    seed = cfg["seed"] + repeat
    loss_cfg = None
    if method != "ETD":
        quad = QuadratureSpec(int(t["integration_steps"]))
        if method == "DGI-custom":
            loss_cfg = LossConfig(float(t["balance_weight"]), int(t["num_paths"]), int(t["path_degree"]), quad, t["balance_pairs"])
        else:
            loss_cfg = variant_loss_config(method, float(t["balance_weight"]), int(t["path_degree"]), quad, t["balance_pairs"])
    return TrainConfig(
        method,
        float(t["learning_rate"]),
        int(t["batch_size"]),
        int(t["steps"]),
        loss_cfg,
        int(t["eval_every"]),
        seed,
        tuple(t["hidden"]),
        t["activation"],
    )


def method_slug(method: str) -> str:
    return method.replace("/", "_")


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _rel(out: Path, p) -> str:
    return Path(p).relative_to(out).as_posix()


def update_manifest(out: Path, cfg: dict, stage: str, produced, seeds: dict) -> dict:
    """Replace the stage's entries with ``produced`` and check that no file is unaccounted for."""
    path = out / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {"files": {}, "seeds": {}}
    manifest["config_hash"] = config_hash(cfg)
    manifest["code_version"] = __version__
    prefix = f"{stage}/"
    files = {k: v for k, v in manifest["files"].items() if not k.startswith(prefix)}
    files["config.resolved.json"] = sha256_file(out / "config.resolved.json")
    for p in produced:
        rel = _rel(out, p)
        if rel in files:
            raise ConfigError(f"file {rel} produced twice")
        files[rel] = sha256_file(p)
    manifest["files"] = dict(sorted(files.items()))
    manifest["seeds"] = {**manifest.get("seeds", {}), stage: seeds}
    manifest["seeds"] = dict(sorted(manifest["seeds"].items()))
    on_disk = {_rel(out, p) for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"}
    orphans = sorted(on_disk - set(files))
    missing = sorted(set(files) - on_disk)
    if orphans:
        raise OrphanFileError(f"files not listed in the manifest: {', '.join(orphans)}")
    if missing:
        raise ConfigError(f"manifest lists missing files: {', '.join(missing)}")
    path.write_text(canonical_json(manifest))
    return manifest


def verify_manifest(out: Path) -> list[str]:
    """Files whose checksum no longer matches the manifest, plus orphans."""
    manifest = json.loads((out / "manifest.json").read_text())
    bad = [k for k, v in manifest["files"].items() if not (out / k).exists() or sha256_file(out / k) != v]
    on_disk = {_rel(out, p) for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"}
    return sorted(bad + sorted(on_disk - set(manifest["files"])))


def _prepare(cfg: dict, stage: str, force: bool, root=None) -> Path:
    out = output_dir(cfg, root)
    out.mkdir(parents=True, exist_ok=True)
    resolved = out / "config.resolved.json"
    text = canonical_json(cfg)
    if resolved.exists() and resolved.read_text() != text and not force:
        raise ConfigError(f"{out} holds a different experiment config; use --force to overwrite")
    stage_dir = out / stage
    if stage_dir.exists():
        if not force:
            raise ConfigError(f"{stage_dir} already exists; use --force to overwrite")
        shutil.rmtree(stage_dir)
    resolved.write_text(text)
    stage_dir.mkdir(parents=True)
    return out


def _map(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def dataset_path(out: Path, repeat: int) -> Path:
    return out / "data" / f"repeat_{repeat:03d}.csv"


def _generate_job(job):
    problem, n, s3nr, seed, path = job
    ds = generate_dataset(problem, n, s3nr, seed)
    sidecar = ds.to_csv(path)
    return [str(path), str(sidecar)]


def cmd_generate(cfg: dict, force: bool = False, workers: int = 1, root=None) -> Path:
    out = _prepare(cfg, "data", force, root)
    s3nr = _s3nr(cfg["s3nr"])
    jobs = [(cfg["problem"], cfg["n"], s3nr, cfg["seed"] + r, dataset_path(out, r)) for r in range(cfg["repeats"])]
    produced = [p for files in _map(_generate_job, jobs, workers) for p in files]
    update_manifest(out, cfg, "data", produced, {"datasets": [j[3] for j in jobs]})
    return out


def load_datasets(cfg: dict, out: Path) -> list[OfflineDataset]:
    paths = [dataset_path(out, r) for r in range(cfg["repeats"])]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise ConfigError(f"datasets missing (run 'generate' first): {', '.join(missing)}")
    return [OfflineDataset.from_csv(p) for p in paths]


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def probe_for(cfg: dict, dataset: OfflineDataset, repeat: int) -> GradientProbe:
    ev = cfg["evaluation"]
    rng = np.random.default_rng([cfg["seed"], repeat, 2])
    return GradientProbe(cfg["problem"], dataset.x, ev["n_thetas"], ev["x_subset_size"], rng)


def run_dir(out: Path, stage: str, method: str, repeat: int) -> Path:
    return out / stage / method_slug(method) / f"repeat_{repeat:03d}"


def _train_job(job):
    cfg, method, repeat, data_path, directory, overrides = job
    ds = OfflineDataset.from_csv(data_path)
    tcfg = train_config(cfg, method, repeat, **overrides)
    evaluator = probe_for(cfg, ds, repeat) if cfg["train"]["trace_metrics"] else None
    result = train(ds, tcfg, evaluator=evaluator, checkpoint_dir=directory)
    trace = Path(directory) / "trace.csv"
    write_trace(result.trace, trace)
    return [str(trace)] + [str(p) for p in result.checkpoints], [[r.step, r.loss, r.cos_sim, r.norm_dist] for r in result.trace]


def cmd_train(cfg: dict, force: bool = False, workers: int = 1, root=None) -> Path:
    out = output_dir(cfg, root)
    load_datasets(cfg, out)
    out = _prepare(cfg, "train", force, root)
    for m in cfg["methods"]:
        if m == "ETD" and cfg["train"]["num_paths"] != DEFAULTS["train"]["num_paths"]:
            print("warning: ETD ignores path settings")
    jobs = [
        (cfg, m, r, dataset_path(out, r), run_dir(out, "train", m, r), {})
        for m in cfg["methods"]
        for r in range(cfg["repeats"])
    ]
    results = _map(_train_job, jobs, workers)
    produced = [p for files, _ in results for p in files]
    update_manifest(out, cfg, "train", produced, {"train": [cfg["seed"] + r for r in range(cfg["repeats"])]})
    return out


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

LONG_COLUMNS = ("method", "step", "metric", "value", "seed")


def _checkpoints(directory: Path) -> list[tuple[int, Path]]:
    found = sorted(directory.glob("ckpt_*.npz"))
    return [(int(p.stem.split("_")[1]), p) for p in found]


def _evaluate_job(job):
    cfg, method, repeat, data_path, directory = job
    ds = OfflineDataset.from_csv(data_path)
    probe = probe_for(cfg, ds, repeat)
    rows = []
    for step, path in _checkpoints(Path(directory)):
        cs, nd = probe(load_model(path))
        rows.append((method, step, "cos_sim", cs, cfg["seed"] + repeat))
        rows.append((method, step, "norm_dist", nd, cfg["seed"] + repeat))
    return rows


def write_long_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LONG_COLUMNS)
        for method, step, metric, value, seed in rows:
            w.writerow([method, step, metric, repr(float(value)), seed])


def read_long_csv(path) -> list[tuple]:
    with open(path) as fh:
        return [(r["method"], int(r["step"]), r["metric"], float(r["value"]), int(r["seed"])) for r in csv.DictReader(fh)]


def summarize(rows, key=("method", "step", "metric")) -> list[dict]:
    """Mean, std and count of ``value`` per (method, step, metric), NaNs excluded."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r[0], r[1], r[2]), []).append(r[3])
    out = []
    for (method, step, metric), vals in sorted(groups.items()):
        v = np.array(vals)
        v = v[np.isfinite(v)]
        out.append(
            {
                "method": method,
                "step": step,
                "metric": metric,
                "mean": float(v.mean()) if len(v) else math.nan,
                "std": float(v.std()) if len(v) else math.nan,
                "count": int(len(v)),
            }
        )
    return out


def write_rows(rows: list[dict], path, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


def cmd_evaluate(cfg: dict, force: bool = False, workers: int = 1, root=None) -> Path:
    out = output_dir(cfg, root)
    load_datasets(cfg, out)
    jobs = []
    for m in cfg["methods"]:
        for r in range(cfg["repeats"]):
            d = run_dir(out, "train", m, r)
            if not _checkpoints(d):
                raise ConfigError(f"no checkpoints in {d} (run 'train' first)")
            jobs.append((cfg, m, r, dataset_path(out, r), d))
    out = _prepare(cfg, "eval", force, root)
    rows = [row for chunk in _map(_evaluate_job, jobs, workers) for row in chunk]
    long_path = out / "eval" / "gradients_long.csv"
    write_long_csv(rows, long_path)
    summary = summarize(rows)
    summary_path = out / "eval" / "gradients_summary.csv"
    write_rows(summary, summary_path, ("method", "step", "metric", "mean", "std", "count"))
    from .plotting import plot_metric_curves

    plots = [plot_metric_curves(long_path, metric, out / "eval" / f"{metric}.png") for metric in ("cos_sim", "norm_dist")]
    update_manifest(out, cfg, "eval", [long_path, summary_path, *plots], {"probe": [[cfg["seed"], r, 2] for r in range(cfg["repeats"])]})
    return out


# ---------------------------------------------------------------------------
# optimize
# ---------------------------------------------------------------------------

TABLE_COLUMNS = ("row", "raw_mean", "raw_std", "score_mean", "score_std", "abs_fallback", "repeats")


def row_labels(methods) -> dict:
    dgi = [m for m in methods if m != "ETD"]
    return {m: ("ETD" if m == "ETD" else ("DGI" if len(dgi) == 1 else m)) for m in methods}


def _inference(cfg: dict, init: str) -> InferenceConfig:
    inf = cfg["inference"]
    return InferenceConfig(init, inf["gd_steps"], inf["gd_lr"], inf["x_subset_size"], inf["attempts"])


def _optimize_job(job):
    cfg, repeat, data_path, model_paths = job
    spec = get_problem(cfg["problem"])
    inf = cfg["inference"]
    ds = OfflineDataset.from_csv(data_path)
    oracle = TrueValueOracle(spec, inf["true_value_samples"], seed=cfg["seed"] + 7919)
    rng = np.random.default_rng([cfg["seed"], repeat, 3])
    out = {"RS": baseline_random_search(spec, inf["attempts"], oracle, rng), "OC": baseline_dataset_oracle(ds, oracle)}
    labels = row_labels(cfg["methods"])
    for m in cfg["methods"]:
        est = GradientEstimator.from_model(load_model(model_paths[m]), spec.d_theta, ds.x)
        for init in ("R", "G"):
            entry = optimize_design(est, ds, spec, _inference(cfg, init), oracle, rng, method=m)
            out[f"{labels[m]}({init})"] = entry.mean
    return out


def reference_value(cfg: dict, datasets) -> float:
    spec = get_problem(cfg["problem"])
    inf = cfg["inference"]
    oracle = TrueValueOracle(spec, inf["true_value_samples"], seed=cfg["seed"] + 7919)
    best = [d.theta[int(np.argmin(d.y))] for d in datasets]
    val, _ = reference_optimum(
        spec, oracle, inf["reference_starts"], inf["reference_steps"], inf["gd_lr"], extra_starts=np.array(best), seed=cfg["seed"]
    )
    return val


def cmd_optimize(cfg: dict, force: bool = False, workers: int = 1, root=None) -> Path:
    out = output_dir(cfg, root)
    datasets = load_datasets(cfg, out)
    jobs = []
    for r in range(cfg["repeats"]):
        paths = {}
        for m in cfg["methods"]:
            ck = _checkpoints(run_dir(out, "train", m, r))
            if not ck:
                raise ConfigError(f"no checkpoints for {m} repeat {r} (run 'train' first)")
            paths[m] = str(ck[-1][1])
        jobs.append((cfg, r, str(dataset_path(out, r)), paths))
    out = _prepare(cfg, "optimize", force, root)
    per_repeat = _map(_optimize_job, jobs, workers)
    x_star = reference_value(cfg, datasets)
    labels = row_labels(cfg["methods"])
    order = ["RS", "OC"] + [f"{labels[m]}({i})" for m in cfg["methods"] for i in ("R", "G")]
    table = []
    for row in order:
        raw = np.array([rep[row] for rep in per_repeat])
        scored = [normalize_score(v, x_star) for v in raw]
        scores = np.array([s for s, _ in scored])
        table.append(
            {
                "row": row,
                "raw_mean": float(raw.mean()),
                "raw_std": float(raw.std()),
                "score_mean": float(scores.mean()),
                "score_std": float(scores.std()),
                "abs_fallback": bool(scored[0][1]),
                "repeats": len(raw),
            }
        )
    csv_path = out / "optimize" / "optimization.csv"
    write_rows(table, csv_path, TABLE_COLUMNS)
    json_path = out / "optimize" / "optimization.json"
    report = {
        "problem": cfg["problem"],
        "reference_optimum": x_star,
        "g_init_perturbation": "attempt j adds uniform noise of radius 0.01*j/M box widths to the best-y design",
        "table": table,
        "per_repeat": per_repeat,
    }
    json_path.write_text(canonical_json(report))
    update_manifest(out, cfg, "optimize", [csv_path, json_path], {"optimize": [[cfg["seed"], r, 3] for r in range(cfg["repeats"])]})
    return out


def read_table(out: Path) -> dict:
    with open(out / "optimize" / "optimization.csv") as fh:
        return {r["row"]: r for r in csv.DictReader(fh)}


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = ("axis", "value", "method", "step", "metric", "metric_value", "seed")


def _point_overrides(cfg: dict, axis: str, value) -> dict:
    """Training overrides for one grid point of a DGI-custom sweep.

    The balance-weight sweep fixes one sampled path; the path-count sweep
    turns the balance loss off; the integration sweep starts from the
    ``ablation.method`` variant.
    """
    if axis == "balance_weight":
        return {"balance_weight": float(value), "num_paths": 1}
    if axis == "num_paths":
        return {"balance_weight": 0.0, "num_paths": int(value)}
    ref = variant_loss_config(cfg["ablation"]["method"], float(cfg["train"]["balance_weight"]))
    return {"balance_weight": ref.balance_weight, "num_paths": ref.num_paths, "integration_steps": int(value)}


def cmd_ablate(cfg: dict, force: bool = False, workers: int = 1, root=None) -> Path:
    ab = cfg["ablation"]
    axis, grid = ab["axis"], ab["grid"]
    if not grid:
        raise ConfigError("ablation grid is empty")
    out = _prepare(cfg, "ablate", force, root)
    base = out / "ablate" / axis
    base.mkdir(parents=True)
    jobs = []
    files = []
    for k, value in enumerate(grid):
        point = base / f"point_{k:02d}"
        point.mkdir()
        if axis == "noise":
            methods = cfg["methods"]
            s3nr = _s3nr(value)
        else:
            methods = ["DGI-custom"]
            s3nr = _s3nr(cfg["s3nr"])
        for r in range(cfg["repeats"]):
            data = point / f"repeat_{r:03d}.csv"
            files += _generate_job((cfg["problem"], cfg["n"], s3nr, cfg["seed"] + r, data))
            for m in methods:
                over = _point_overrides(cfg, axis, value) if m == "DGI-custom" else {}
                jobs.append((cfg, m, r, data, point / method_slug(m) / f"repeat_{r:03d}", over, value))
    results = _map(_ablate_job, jobs, workers)
    rows = []
    for (job, (produced, trace)) in zip(jobs, results):
        files += produced
        cfg_, m, r, _, _, _, value = job
        for step, loss, cs, nd in trace:
            rows.append({"axis": axis, "value": str(value), "method": m, "step": step, "metric": "cos_sim", "metric_value": cs, "seed": cfg["seed"] + r})
            rows.append({"axis": axis, "value": str(value), "method": m, "step": step, "metric": "norm_dist", "metric_value": nd, "seed": cfg["seed"] + r})
            rows.append({"axis": axis, "value": str(value), "method": m, "step": step, "metric": "loss", "metric_value": loss, "seed": cfg["seed"] + r})
    sweep = base / "sweep.csv"
    write_rows(rows, sweep, SWEEP_COLUMNS)
    final = _final_summary(rows)
    summary = base / "summary.csv"
    write_rows(final, summary, ("value", "method", "metric", "mean", "std", "count"))
    from .plotting import plot_sweep

    plot = plot_sweep(summary, axis, base / f"{axis}.png")
    update_manifest(out, cfg, "ablate", files + [sweep, summary, plot], {"ablate": [cfg["seed"] + r for r in range(cfg["repeats"])]})
    return out


def _ablate_job(job):
    cfg, m, r, data, directory, over, _ = job
    return _train_job((cfg, m, r, data, directory, over))


def _final_summary(rows) -> list[dict]:
    last: dict = {}
    for row in rows:
        key = (row["value"], row["method"], row["seed"])
        last[key] = max(last.get(key, -1), row["step"])
    groups: dict = {}
    order = []
    for row in rows:
        if row["step"] != last[(row["value"], row["method"], row["seed"])] or row["metric"] == "loss":
            continue
        key = (row["value"], row["method"], row["metric"])
        if key not in groups:
            order.append(key)
        groups.setdefault(key, []).append(row["metric_value"])
    out = []
    for key in order:
        v = np.array(groups[key])
        v = v[np.isfinite(v)]
        out.append(
            {
                "value": key[0],
                "method": key[1],
                "metric": key[2],
                "mean": float(v.mean()) if len(v) else math.nan,
                "std": float(v.std()) if len(v) else math.nan,
                "count": int(len(v)),
            }
        )
    return out


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "optimize": cmd_optimize,
    "ablate": cmd_ablate,
}
