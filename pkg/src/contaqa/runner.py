"""Run configuration, experiment execution and result export.

Every file a run writes lives under its run directory and carries the config
hash: CSVs in a leading ``#`` comment, JSON files as a field, loss logs on
every line and checkpoints in their metadata.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import PerformanceMatrix, summarize
from .synthbench import VARIANTS, default_suite, generate_suite, resolve_variant, task_order, variant_config
from .training import ContinualTrainer, TrainerConfig, build_performance_matrix

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "CONTAQA_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Invalid or unreadable run configuration."""


class TaskDefaults(BaseModel):
    """Generator settings shared by every task of the suite."""

    model_config = ConfigDict(extra="forbid")

    n_steps: int = Field(8, ge=1)
    n_joints: int = Field(5, ge=1)
    dim: int = Field(16, ge=1)
    n_train: int = Field(120, ge=1)
    n_test: int = Field(40, ge=2)
    gamma: float = Field(0.4, ge=0.0, le=1.0)
    noise: float = Field(0.05, ge=0.0)
    signal: float = Field(2.0, ge=0.0)
    nuisance: float = Field(2.0, ge=0.0)
    domain_gap: float = Field(0.5, ge=0.0)
    n_nuisance: int = Field(6, ge=0)
    mask_density: float = Field(0.4, gt=0.0, le=1.0)


class SuiteConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_tasks: int = Field(5, ge=1)
    suite_seed: int = Field(0, ge=0)
    order_seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3], min_length=1)
    task: TaskDefaults = Field(default_factory=TaskDefaults)

    @field_validator("order_seeds")
    @classmethod
    def _unique(cls, v):
        if len(set(v)) != len(v) or min(v) < 0:
            raise ValueError("order seeds must be distinct and non-negative")
        return v

    def build(self):
        return default_suite(self.n_tasks, self.suite_seed, tuple(self.order_seeds),
                             **self.task.model_dump())


class RunConfig(BaseModel):
    """Everything that determines a run. ``output_dir`` does not enter the hash."""

    model_config = ConfigDict(extra="forbid")

    suite: SuiteConfig = Field(default_factory=SuiteConfig)
    variant: str = "full"
    metric: Literal["srcc", "pairwise_accuracy"] = "srcc"
    trainer: dict = Field(default_factory=dict)
    checkpoint_every_stage: bool = True
    output_dir: str | None = None

    @field_validator("variant")
    @classmethod
    def _variant(cls, v):
        return resolve_variant(v)

    @field_validator("trainer")
    @classmethod
    def _trainer(cls, v):
        try:
            cfg = TrainerConfig(**v)
        except TypeError as exc:
            raise ValueError(f"bad trainer settings: {exc}") from exc
        return dataclasses.asdict(cfg)

    @property
    def trainer_config(self) -> TrainerConfig:
        return TrainerConfig(**self.trainer)

    def hashed_dict(self) -> dict:
        return self.model_dump(exclude={"output_dir"})

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.hashed_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_json(self) -> str:
        return json.dumps(self.model_dump(), indent=2, sort_keys=True) + "\n"


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        return RunConfig.model_validate_json(text)
    except ValueError as exc:  # pydantic's ValidationError subclasses ValueError
        raise ConfigError(f"{source}: {exc}") from exc


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def resolve_run_dir(config: RunConfig, override: str | Path | None = None) -> Path:
    """Explicit override, then ``config.output_dir``, then ``<root>/<variant>-<hash>``.

    Relative paths are taken relative to the output root.
    """
    chosen = override or config.output_dir
    if chosen is None:
        safe = {"+GS": "gs", "+GS+Diff": "gs_diff"}.get(config.variant, config.variant)
        chosen = f"{safe}-{config.config_hash}"
    path = Path(chosen)
    return path if path.is_absolute() else output_root() / path


# --------------------------------------------------------------------------- #
# per-seed execution


def _matrix_header(config: RunConfig, seed: int, order: list[int]) -> str:
    return (f"config_hash={config.config_hash} variant={config.variant} metric={config.metric} "
            f"order_seed={seed} task_order={','.join(str(i) for i in order)}")


def parse_header(text: str) -> dict[str, str]:
    first = text.splitlines()[0] if text else ""
    if not first.startswith("#"):
        return {}
    return dict(part.split("=", 1) for part in first[1:].split() if "=" in part)


def checkpoint_path(run_dir: Path, seed: int, stage: int) -> Path:
    return run_dir / "checkpoints" / f"seed{seed}_stage{stage}.ckpt"


def _continue_seed(config: RunConfig, seed: int, run_dir: Path, trainer: ContinualTrainer,
                   matrix: PerformanceMatrix, start_stage: int, loss_file: Path) -> dict:
    """Train the remaining stages of one order seed and write its outputs."""
    suite = config.suite.build()
    sequence = generate_suite(dataclasses.replace(suite, order_seeds=(seed,)))[seed]
    chash = config.config_hash
    mode = "a" if start_stage else "w"
    with loss_file.open(mode) as fh:
        def on_record(rec):
            fh.write(json.dumps({"config_hash": chash, "order_seed": seed, **rec}) + "\n")

        def on_stage(i, tr, P):
            if config.checkpoint_every_stage:
                save_checkpoint(checkpoint_path(run_dir, seed, i + 1), tr,
                                extra={"config": config.hashed_dict(), "config_hash": chash,
                                       "order_seed": seed, "stages_done": i + 1},
                                arrays={"matrix": P.values})
            log.info("seed %d stage %d/%d done", seed, i + 1, len(sequence))

        P = build_performance_matrix(trainer, sequence, config.metric, on_stage=on_stage,
                                     on_record=on_record, start_stage=start_stage, matrix=matrix)
    order = [t.task_id for t in sequence]
    (run_dir / f"matrix_seed{seed}.csv").write_text(P.to_csv(_matrix_header(config, seed, order)))
    preds = []
    for ds in sequence:
        pred = trainer.predict(ds.test, ds.task_id)
        preds += [(seed, ds.task_id, c.index, float(p), c.score) for c, p in zip(ds.test, pred)]
    return {"seed": seed, "values": P.values, "predictions": preds}


def _run_seed(config_json: str, seed: int, run_dir: str) -> dict:
    config = parse_config(config_json)
    run_dir = Path(run_dir)
    suite = config.suite.build()
    trainer = ContinualTrainer(suite.n_joints, suite.dim,
                               variant_config(config.variant, config.trainer_config, seed))
    matrix = PerformanceMatrix(suite_size(config), config.metric)
    return _continue_seed(config, seed, run_dir, trainer, matrix, 0, run_dir / f"losses_seed{seed}.jsonl")


def suite_size(config: RunConfig) -> int:
    return config.suite.n_tasks


def _write_predictions(path: Path, chash: str, rows) -> None:
    buf = io.StringIO()
    buf.write(f"# config_hash={chash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["order_seed", "task_id", "item", "predicted", "truth"])
    for seed, task, item, pred, truth in rows:
        w.writerow([seed, task, item, repr(pred), repr(truth)])
    path.write_text(buf.getvalue())


def _metrics_payload(config: RunConfig, per_seed: dict[int, np.ndarray]) -> dict:
    summaries = {str(s): summarize(PerformanceMatrix(len(v), config.metric, v)) for s, v in per_seed.items()}
    keys = next(iter(summaries.values())).keys()
    return {
        "config_hash": config.config_hash,
        "variant": config.variant,
        "metric": config.metric,
        "order_seeds": [int(s) for s in per_seed],
        "per_seed": summaries,
        "mean": {k: float(np.mean([s[k] for s in summaries.values()])) for k in keys},
    }


def _mean_matrix(config: RunConfig, per_seed: dict[int, np.ndarray]) -> PerformanceMatrix:
    return PerformanceMatrix(suite_size(config), config.metric, np.mean(list(per_seed.values()), axis=0))


def run_experiment(config: RunConfig, run_dir: str | Path | None = None, jobs: int = 1) -> Path:
    """Run every order seed; returns the run directory.

    Outputs: ``config.json``, ``matrix_seed<s>.csv``, ``matrix.csv`` (mean
    over seeds, stage position order), ``metrics.json``, ``predictions.csv``,
    ``losses_seed<s>.jsonl``, ``manifest.json`` and one checkpoint per seed and stage.
    """
    run_dir = resolve_run_dir(config, run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(config.to_json())
    start = time.perf_counter()
    seeds = list(config.suite.order_seeds)
    blob = config.model_dump_json()
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(seeds))) as pool:
            results = list(pool.map(_run_seed, [blob] * len(seeds), seeds, [str(run_dir)] * len(seeds)))
    else:
        results = [_run_seed(blob, s, str(run_dir)) for s in seeds]
    return _finish(config, run_dir, results, time.perf_counter() - start)


def _finish(config: RunConfig, run_dir: Path, results: list[dict], wall: float) -> Path:
    per_seed = {r["seed"]: r["values"] for r in results}
    chash = config.config_hash
    mean = _mean_matrix(config, per_seed)
    (run_dir / "matrix.csv").write_text(mean.to_csv(f"config_hash={chash} variant={config.variant} "
                                                    f"metric={config.metric} order_seed=mean"))
    metrics = _metrics_payload(config, per_seed)
    (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    _write_predictions(run_dir / "predictions.csv", chash, [p for r in results for p in r["predictions"]])
    suite = config.suite.build()
    manifest = {
        "config_hash": chash,
        "variant": config.variant,
        "order_seeds": [int(s) for s in per_seed],
        "task_orders": {str(s): task_order(len(suite.tasks), s) for s in per_seed},
        "trainer_seed": config.trainer_config.seed,
        "suite_seed": config.suite.suite_seed,
        "wall_time_s": round(wall, 3),
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "resolved_config": config.model_dump(),
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("run %s finished in %.1fs: %s", chash, wall, metrics["mean"])
    return run_dir


def run_ablation_suite(config: RunConfig, run_dir: str | Path | None = None,
                       variants: list[str] | None = None, jobs: int = 1) -> tuple[Path, dict]:
    """One sub-run per variant plus ``ablation.json`` / ``ablation.csv`` summaries."""
    names = [resolve_variant(v) for v in (variants or list(VARIANTS))]
    root = Path(run_dir or config.output_dir or f"ablation-{config.config_hash}")
    root = root if root.is_absolute() else output_root() / root
    root.mkdir(parents=True, exist_ok=True)
    table = {}
    for name in names:
        sub = config.model_copy(update={"variant": name, "output_dir": None})
        safe = {"+GS": "gs", "+GS+Diff": "gs_diff"}.get(name, name)
        out = run_experiment(sub, root / safe, jobs)
        table[name] = json.loads((out / "metrics.json").read_text())["mean"]
    summary = {"base_config_hash": config.config_hash, "variants": table}
    (root / "ablation.json").write_text(json.dumps(summary, indent=2) + "\n")
    buf = io.StringIO()
    buf.write(f"# config_hash={config.config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "AP", "NBT", "MF"])
    for name, row in table.items():
        w.writerow([name] + [repr(row.get(k, float("nan"))) for k in ("AP", "NBT", "MF")])
    (root / "ablation.csv").write_text(buf.getvalue())
    return root, summary


# --------------------------------------------------------------------------- #
# reading results back


def read_matrix(path: str | Path) -> tuple[PerformanceMatrix, dict[str, str]]:
    text = Path(path).read_text()
    header = parse_header(text)
    return PerformanceMatrix.from_csv(text, header.get("metric", "srcc")), header


def recompute_metrics(target: str | Path) -> dict:
    """Summary metrics from saved matrix CSVs (a run directory or single files)."""
    target = Path(target)
    if target.is_dir():
        files = sorted(target.glob("matrix_seed*.csv"))
        if not files:
            raise FileNotFoundError(f"no matrix_seed*.csv files in {target}")
    elif target.is_file():
        files = [target]
    else:
        raise FileNotFoundError(f"{target} does not exist")
    out = {}
    for f in files:
        P, header = read_matrix(f)
        out[header.get("order_seed", f.stem)] = summarize(P)
    keys = next(iter(out.values())).keys()
    return {"per_seed": out, "mean": {k: float(np.mean([v[k] for v in out.values()])) for k in keys}}


def export_plot_data(run_dir: str | Path, out_dir: str | Path | None = None) -> dict[str, Path]:
    """Per-stage curves and prediction scatter tables as CSV.

    ``curves.csv``: one row per (order seed, stage) with the mean over seen
    tasks and every task's value (``NA`` when unseen); seed ``mean`` rows come
    from ``matrix.csv``. ``scatter.csv``: one (predicted, truth) row per test
    item and order seed.
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory {run_dir} does not exist")
    files = sorted(run_dir.glob("matrix_seed*.csv"))
    if not files or not (run_dir / "predictions.csv").exists():
        raise FileNotFoundError(f"{run_dir} holds no finished run")
    out_dir = Path(out_dir) if out_dir else run_dir / "plots"
    out_dir.mkdir(parents=True, exist_ok=True)
    chash = None
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    sources = files + ([run_dir / "matrix.csv"] if (run_dir / "matrix.csv").exists() else [])
    for i, f in enumerate(sources):
        P, header = read_matrix(f)
        chash = chash or header.get("config_hash", "")
        if i == 0:
            w.writerow(["order_seed", "stage", "mean_seen"] + [f"task_{j + 1}" for j in range(P.n_tasks)])
        for stage in range(P.n_tasks):
            row = P.values[stage]
            seen = row[~np.isnan(row)]
            w.writerow([header.get("order_seed", f.stem), stage + 1,
                        repr(float(seen.mean())) if seen.size else "NA"]
                       + ["NA" if np.isnan(v) else repr(float(v)) for v in row])
    curves = out_dir / "curves.csv"
    curves.write_text(f"# config_hash={chash}\n" + buf.getvalue())
    scatter = out_dir / "scatter.csv"
    scatter.write_text((run_dir / "predictions.csv").read_text())
    return {"curves": curves, "scatter": scatter}


def resume_from_checkpoint(path: str | Path, run_dir: str | Path | None = None) -> dict:
    """Finish the order seed stored in a checkpoint; writes its matrix and losses.

    Output goes to ``run_dir`` (default: the directory holding ``checkpoints/``).
    """
    path = Path(path)
    trainer, extra, arrays = load_checkpoint(path)
    if "config" not in extra:
        raise ConfigError(f"{path} was not written by a run and carries no config")
    config = RunConfig.model_validate(extra["config"])
    if config.config_hash != extra.get("config_hash"):
        raise ConfigError(f"{path}: stored config does not match its hash")
    seed = int(extra["order_seed"])
    run_dir = Path(run_dir) if run_dir else path.parent.parent
    run_dir.mkdir(parents=True, exist_ok=True)
    matrix = PerformanceMatrix(suite_size(config), config.metric, arrays["matrix"])
    done = int(extra["stages_done"])
    losses = run_dir / f"losses_seed{seed}.jsonl"
    if losses.exists():
        # drop records an interrupted run wrote after the checkpoint
        kept = [ln for ln in losses.read_text().splitlines() if json.loads(ln)["stage"] <= done]
        losses.write_text("".join(ln + "\n" for ln in kept))
    return _continue_seed(config, seed, run_dir, trainer, matrix, done, losses)


__all__ = [
    "OUTPUT_ROOT_ENV", "ConfigError", "RunConfig", "SuiteConfig", "TaskDefaults", "load_config",
    "parse_config", "resolve_run_dir", "run_experiment", "run_ablation_suite", "recompute_metrics",
    "export_plot_data", "resume_from_checkpoint", "read_matrix", "checkpoint_path",
]
