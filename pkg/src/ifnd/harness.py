"""Experiment configuration, data synthesis and orchestration.

A run is described by a nested mapping with ``dataset``, ``train`` and
``schedule`` sections (see ``examples`` in the README). Grids expand a base
run over declared axes and optional named variants.
"""
from __future__ import annotations

import copy
import csv
import itertools
import json
import logging
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .embedding import read_matrix, write_matrix
from .errors import ConfigError
from .metrics import MetricRecord, write_metrics_csv
from .pseudo_labels import AcceptanceSchedule
from .trainer import Dataset, TrainConfig, TrainResult, load_checkpoint, train

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

DEFAULT_DATASET = {"classes": 5, "per_class": 200, "dim": 2, "spread": 0.15, "seed": 0}
SUMMARY_HEADER = ("name", "objective", "scheme", "initial_rate", "final_rate", "classes", "seed",
                  "status", "mtpr", "mtnr", "nmi", "probe_acc")
GAP_HEADER = ("classes", "seed", "oracle_acc", "inst_acc", "elim_acc",
              "gap_oracle_inst", "gap_oracle_elim")

AXIS_KEYS = {
    "objective": ("train", "objective"),
    "scheme": ("schedule", "scheme"),
    "initial_rate": ("schedule", "initial_rate"),
    "final_rate": ("schedule", "final_rate"),
    "step_epoch": ("schedule", "step_epoch"),
    "classes": ("dataset", "classes"),
    "tau": ("train", "tau"),
}


def synth_blobs(classes: int, per_class: int, dim: int, spread: float, seed: int) -> Dataset:
    """Gaussian blobs around class means drawn uniformly on the unit sphere."""
    if classes < 1 or per_class < 1 or dim < 2:
        raise ConfigError("synth_blobs needs classes >= 1, per_class >= 1, dim >= 2")
    if spread < 0:
        raise ConfigError("spread must be nonnegative")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(classes, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    samples = np.repeat(means, per_class, axis=0)
    if spread > 0:
        samples = samples + rng.normal(0.0, spread, size=samples.shape)
    return Dataset(samples, np.repeat(np.arange(classes), per_class))


def read_labels(path) -> np.ndarray:
    with open(path) as fh:
        return np.asarray([int(ln) for ln in fh if ln.strip()], dtype=np.int64)


def write_labels(labels, path) -> None:
    with open(path, "w") as fh:
        fh.writelines(f"{int(v)}\n" for v in labels)


def load_dataset(section: dict, base_dir: Path = Path(".")) -> Dataset:
    if "features" in section:
        feats = read_matrix(base_dir / section["features"]).values
        if "labels" not in section:
            raise ConfigError("external features need a parallel labels file")
        labels = read_labels(base_dir / section["labels"])
        if len(labels) != len(feats):
            raise ConfigError("feature and label files differ in length")
        return Dataset(feats, labels)
    params = {**DEFAULT_DATASET, **section}
    return synth_blobs(int(params["classes"]), int(params["per_class"]), int(params["dim"]),
                       float(params["spread"]), int(params["seed"]))


def pca_2d(x, iters: int = 1000, tol: float = 1e-12) -> np.ndarray:
    """Project onto the first two principal components found by power iteration with deflation."""
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / max(1, len(x) - 1)
    rng = np.random.default_rng(0)
    comps = []
    for _ in range(min(2, x.shape[1])):
        vec = rng.normal(size=x.shape[1])
        vec /= np.linalg.norm(vec)
        for _ in range(iters):
            nxt = cov @ vec
            norm = np.linalg.norm(nxt)
            if norm < 1e-300:
                break
            nxt /= norm
            done = np.linalg.norm(nxt - vec) < tol
            vec = nxt
            if done:
                break
        if vec[np.argmax(np.abs(vec))] < 0:
            vec = -vec
        comps.append(vec)
        lam = vec @ cov @ vec
        cov = cov - lam * np.outer(vec, vec)
    proj = centered @ np.stack(comps, axis=1)
    if proj.shape[1] < 2:
        proj = np.hstack([proj, np.zeros((len(x), 2 - proj.shape[1]))])
    return proj


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--tags", "--dirty"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def apply_override(cfg: dict, assignment: str) -> dict:
    """Apply one ``section.key=value`` override; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    path, raw = assignment.split("=", 1)
    keys = path.strip().split(".")
    out = copy.deepcopy(cfg)
    node = out
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {path}: {k} is not a section")
    node[keys[-1]] = yaml.safe_load(raw)
    return out


def resolve_k(k, classes) -> int:
    """Cluster counts may be written as ``"3x"``: a multiple of the dataset's class count."""
    if isinstance(k, str) and k.endswith("x"):
        if classes is None:
            raise ConfigError(f"cluster count {k!r} needs a synthetic dataset class count")
        try:
            return max(1, int(round(float(k[:-1]) * int(classes))))
        except ValueError as exc:
            raise ConfigError(f"bad cluster count {k!r}") from exc
    try:
        return int(k)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad cluster count {k!r}") from exc


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a mapping")
    cfg.setdefault("_base_dir", str(Path(path).resolve().parent))
    return cfg


@dataclass
class ExperimentSpec:
    name: str
    dataset: dict
    train: TrainConfig
    output_dir: Path
    base_dir: Path = Path(".")
    axes: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: dict, name: Optional[str] = None,
                    output_dir=None) -> "ExperimentSpec":
        known = {"name", "dataset", "train", "schedule", "output_dir", "_base_dir", "_axes"}
        unknown = set(cfg) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        train_section = dict(cfg.get("train") or {})
        sched = dict(cfg.get("schedule") or {})
        epochs = int(train_section.get("total_epochs", TrainConfig.total_epochs))
        if "ks" in train_section:
            classes = {**DEFAULT_DATASET, **(cfg.get("dataset") or {})}.get("classes")
            train_section["ks"] = [resolve_k(k, classes) for k in train_section["ks"]]
        try:
            schedule = AcceptanceSchedule(total_epochs=epochs, **sched)
            tc = TrainConfig(schedule=schedule, **train_section)
        except TypeError as exc:
            raise ConfigError(f"bad train/schedule key: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        nm = name or cfg.get("name") or "run"
        out = Path(output_dir or cfg.get("output_dir") or Path("runs") / nm)
        return cls(name=nm, dataset=dict(cfg.get("dataset") or {}), train=tc, output_dir=out,
                   base_dir=Path(cfg.get("_base_dir", ".")), axes=dict(cfg.get("_axes") or {}))

    def resolved(self) -> dict:
        tc = self.train.to_dict()
        schedule = tc.pop("schedule")
        schedule.pop("total_epochs")
        return {
            "name": self.name,
            "dataset": {**({} if "features" in self.dataset else DEFAULT_DATASET), **self.dataset},
            "train": tc,
            "schedule": schedule,
            "output_dir": str(self.output_dir),
        }


@dataclass
class RunOutcome:
    status: int
    records: list
    files: dict
    error: Optional[str] = None


def run(spec: ExperimentSpec, resume=None) -> RunOutcome:
    """Train one experiment and write metrics, checkpoint, 2-D dump, resolved config and manifest."""
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "metrics": out / "metrics.csv",
        "checkpoint": out / "checkpoint.json",
        "embedding_2d": out / "embedding_2d.txt",
        "config": out / "config.yaml",
        "manifest": out / "manifest.json",
    }
    with open(files["config"], "w") as fh:
        yaml.safe_dump(spec.resolved(), fh, sort_keys=True)
    try:
        dataset = load_dataset(spec.dataset, spec.base_dir)
        resume_state = load_checkpoint(resume) if resume else None
        result: TrainResult = train(dataset, spec.train, resume=resume_state,
                                    checkpoint_path=files["checkpoint"])
    except ConfigError:
        raise
    except Exception as exc:  # noqa: BLE001 - reported through the exit status
        log.error("run %s failed: %s", spec.name, exc)
        return RunOutcome(EXIT_RUNTIME, [], {}, f"{type(exc).__name__}: {exc}")

    write_metrics_csv(result.records, files["metrics"])
    write_matrix(pca_2d(result.features), files["embedding_2d"])
    manifest = {
        "name": spec.name,
        "version": version_string(),
        "config": spec.resolved(),
        "schedule": spec.train.schedule.describe(),
        "objective": spec.train.objective.value,
        "files": {k: p.name for k, p in files.items()},
        "final": result.records[-1].__dict__ if result.records else None,
    }
    with open(files["manifest"], "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return RunOutcome(EXIT_OK, result.records, files)


@dataclass
class GridSpec:
    specs: list

    @classmethod
    def from_config(cls, cfg: dict, output_dir=None) -> "GridSpec":
        """Expand ``variants`` x cartesian(``axes``) over ``base``.

        Axis names: objective, scheme, initial_rate, final_rate, step_epoch,
        classes, tau and seed (which sets both the dataset and training seed).
        """
        base = dict(cfg.get("base") or {})
        base.setdefault("_base_dir", cfg.get("_base_dir", "."))
        axes = dict(cfg.get("axes") or {})
        variants = cfg.get("variants") or [{"name": None}]
        for ax in axes:
            if ax not in AXIS_KEYS and ax != "seed":
                raise ConfigError(f"unknown grid axis {ax!r}")
        root = Path(output_dir or cfg.get("output_dir") or "runs/grid")
        prefix = cfg.get("name", "grid")
        names = list(axes)
        specs = []
        for variant in variants:
            variant = dict(variant)
            vname = variant.pop("name", None)
            for combo in itertools.product(*(axes[a] for a in names)):
                run_cfg = deep_merge(base, variant)
                labels = {}
                for ax, val in zip(names, combo):
                    if ax == "seed":
                        run_cfg = deep_merge(run_cfg, {"dataset": {"seed": val}, "train": {"seed": val}})
                    else:
                        sec, key = AXIS_KEYS[ax]
                        run_cfg = deep_merge(run_cfg, {sec: {key: val}})
                    labels[ax] = val
                parts = [prefix] + ([vname] if vname else []) + [f"{k}-{v}" for k, v in labels.items()]
                name = "_".join(str(p) for p in parts)
                run_cfg["_axes"] = labels
                specs.append(ExperimentSpec.from_config(run_cfg, name=name, output_dir=root / name))
        seen = set()
        for s in specs:
            if s.name in seen:
                raise ConfigError(f"duplicate experiment name {s.name!r} in grid")
            seen.add(s.name)
        return cls(specs)


def _run_one(spec: ExperimentSpec):
    try:
        outcome = run(spec)
    except Exception as exc:  # noqa: BLE001 - a failing spec must not stop the grid
        return RunOutcome(EXIT_RUNTIME, [], {}, f"{type(exc).__name__}: {exc}")
    return outcome


def _summary_row(spec: ExperimentSpec, outcome: RunOutcome) -> dict:
    ds = {**DEFAULT_DATASET, **spec.dataset}
    row = {
        "name": spec.name,
        "objective": spec.train.objective.value,
        "scheme": spec.train.schedule.scheme.value,
        "initial_rate": spec.train.schedule.initial_rate,
        "final_rate": spec.train.schedule.final_rate,
        "classes": ds.get("classes", ""),
        "seed": spec.train.seed,
    }
    if outcome.status != EXIT_OK or not outcome.records:
        row.update(status="FAILED", mtpr="", mtnr="", nmi="", probe_acc="")
    else:
        last: MetricRecord = outcome.records[-1]
        row.update(status="OK", mtpr=last.mtpr, mtnr=last.mtnr, nmi=last.nmi, probe_acc=last.probe_acc)
    return row


def gap_table(rows: list) -> list:
    """Probe-accuracy gaps (oracle minus method) per (class count, seed)."""
    acc = {}
    for r in rows:
        if r["status"] == "OK":
            acc[(r["classes"], r["seed"], r["objective"])] = r["probe_acc"]
    out = []
    keys = sorted({(c, s) for c, s, _ in acc})
    for c, s in keys:
        oracle = acc.get((c, s, "attr_oracle"))
        inst = acc.get((c, s, "inst"))
        elim = acc.get((c, s, "elim"))
        if oracle is None or (inst is None and elim is None):
            continue
        out.append({
            "classes": c, "seed": s, "oracle_acc": oracle,
            "inst_acc": "" if inst is None else inst,
            "elim_acc": "" if elim is None else elim,
            "gap_oracle_inst": "" if inst is None else oracle - inst,
            "gap_oracle_elim": "" if elim is None else oracle - elim,
        })
    return out


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_table(rows: list, header, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(r[h]) for h in header])


def read_table(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_grid(grid: GridSpec, parallel_jobs: int = 1, output_dir=None) -> list:
    """Run every spec and write ``summary.csv`` and ``gaps.csv``; failed specs are marked FAILED."""
    if parallel_jobs > 1 and len(grid.specs) > 1:
        with ProcessPoolExecutor(max_workers=parallel_jobs) as pool:
            outcomes = list(pool.map(_run_one, grid.specs))
    else:
        outcomes = [_run_one(s) for s in grid.specs]
    rows = [_summary_row(s, o) for s, o in zip(grid.specs, outcomes)]
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_table(rows, SUMMARY_HEADER, out / "summary.csv")
        write_table(gap_table(rows), GAP_HEADER, out / "gaps.csv")
    return rows


def preset(name: str) -> dict:
    """Built-in grids: ``table6`` (schedule/objective ablation) and ``false-negatives`` (class-count sweep)."""
    if name == "table6":
        rows = [
            ("a", "inst", "constant", 0.0, 0.0),
            ("b", "elim", "constant", 1.0, 1.0),
            ("c", "elim", "step", 0.0, 1.0),
            ("d", "elim", "linear", 0.0, 0.25),
            ("e", "elim", "linear", 0.0, 0.5),
            ("f", "elim", "linear", 0.0, 0.75),
            ("g", "elim", "linear", 0.0, 1.0),
            ("h", "attr", "linear", 0.0, 1.0),
        ]
        epochs = DESK_TRAIN["total_epochs"]
        variants = []
        for tag, obj, scheme, init, final in rows:
            sched = {"scheme": scheme, "initial_rate": init, "final_rate": final}
            if scheme == "step":
                sched["step_epoch"] = epochs // 10
            variants.append({"name": tag, "train": {"objective": obj}, "schedule": sched})
        return {"name": "table6", "base": {"dataset": dict(DESK_DATASET), "train": dict(DESK_TRAIN)},
                "variants": variants, "axes": {"seed": [0]}}
    if name == "false-negatives":
        return {"name": "fn", "base": {"dataset": dict(SWEEP_DATASET), "train": dict(SWEEP_TRAIN),
                                       "schedule": {"scheme": "linear", "initial_rate": 0.0,
                                                    "final_rate": 1.0}},
                "axes": {"classes": [4, 16, 64], "seed": [0, 1, 2, 3, 4],
                         "objective": ["inst", "elim", "attr_oracle"]}}
    raise ConfigError(f"unknown grid preset {name!r}")


DESK_DATASET = {"classes": 5, "per_class": 200, "dim": 2, "spread": 0.15}
DESK_TRAIN = {"total_epochs": 200, "batch_m": 128, "tau": 0.2, "ks": [5, 15], "refresh_every": 10,
              "learning_rate": 0.5, "noise": 0.1, "encoder_widths": [32], "head_widths": [16]}
SWEEP_DATASET = {"per_class": 40, "dim": 8, "spread": 0.3}
SWEEP_TRAIN = {"total_epochs": 60, "batch_m": 128, "tau": 0.2, "ks": ["1x"], "refresh_every": 10,
               "learning_rate": 0.5, "noise": 0.1, "encoder_widths": [32], "head_widths": [16]}
