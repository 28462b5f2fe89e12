"""Synthetic continual score-regression suites with a known quality signal.

Every item has a latent quality ``q ~ U[0, 1]`` mapped linearly onto the
task's score range. Patch features carry ``q`` along a quality pattern that
mixes a suite-wide direction (weight ``gamma``) with a task-specific
joint-pair pattern (weight ``1 - gamma``). Each item also varies, independently
of its score, along nuisance patterns that are again a ``gamma`` mix of
suite-wide and task-specific directions. A regressor fitted to one task only
learns to ignore that task's nuisance, which is what makes sequential
fine-tuning forget; ``gamma = 1`` removes every difference between tasks.
"""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import FeatureClip, TaskDataset
from .metrics import PerformanceMatrix, summarize
from .training import ContinualTrainer, TrainerConfig, build_performance_matrix

FORMAT_VERSION = 1
_MAGIC = b"CAQADATA"


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    seed: int
    suite_seed: int = 0
    n_steps: int = 8
    n_joints: int = 5
    dim: int = 16
    n_train: int = 120
    n_test: int = 40
    score_min: float = 0.0
    score_max: float = 10.0
    gamma: float = 0.4
    noise: float = 0.05
    signal: float = 2.0
    nuisance: float = 2.0
    domain_gap: float = 0.5
    n_nuisance: int = 6
    mask_density: float = 0.4

    def __post_init__(self):
        if min(self.n_steps, self.n_joints, self.dim) < 1:
            raise ValueError("tensor dimensions must be positive")
        if self.n_train < 1 or self.n_test < 0:
            raise ValueError("need at least one training item")
        if not self.score_min < self.score_max:
            raise ValueError("score range is empty")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.noise < 0 or self.nuisance < 0 or self.n_nuisance < 0 or self.domain_gap < 0:
            raise ValueError("noise levels must be non-negative")
        if not 0.0 < self.mask_density <= 1.0:
            raise ValueError("mask density must lie in (0, 1]")


@dataclass(frozen=True)
class SuiteSpec:
    tasks: tuple[TaskSpec, ...]
    order_seeds: tuple[int, ...] = (0, 1, 2, 3)

    def __post_init__(self):
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("task ids must be unique")
        dims = {(t.n_steps, t.n_joints, t.dim, t.suite_seed) for t in self.tasks}
        if len(dims) > 1:
            raise ValueError("all tasks in a suite must share T, J, D and the suite seed")
        if not self.tasks:
            raise ValueError("a suite needs at least one task")

    @property
    def n_joints(self) -> int:
        return self.tasks[0].n_joints

    @property
    def dim(self) -> int:
        return self.tasks[0].dim

    def to_dict(self) -> dict:
        return {"tasks": [asdict(t) for t in self.tasks], "order_seeds": list(self.order_seeds)}

    @classmethod
    def from_dict(cls, d: dict) -> "SuiteSpec":
        return cls(tuple(TaskSpec(**t) for t in d["tasks"]), tuple(d.get("order_seeds", (0, 1, 2, 3))))


def default_suite(n_tasks: int = 5, suite_seed: int = 0, order_seeds: Sequence[int] = (0, 1, 2, 3),
                  **overrides) -> SuiteSpec:
    """Tasks with disjoint score ranges: task k scores in [10k, 10k + 10]."""
    tasks = tuple(
        TaskSpec(task_id=k, seed=1000 * suite_seed + k, suite_seed=suite_seed,
                 score_min=10.0 * k, score_max=10.0 * k + 10.0, **overrides)
        for k in range(1, n_tasks + 1)
    )
    return SuiteSpec(tasks, tuple(order_seeds))


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x)
    return x / n if n > 0 else x


@dataclass
class _SuiteBasis:
    shared_pattern: np.ndarray     # (J, D)
    shared_offset: np.ndarray      # (J, D)
    joint_rows: np.ndarray         # (J, D); patterns are mask @ joint_rows
    nuisance: np.ndarray           # (R, J, D)
    scene_proj: np.ndarray         # (D, D)
    profile: np.ndarray            # (T,)


def _nuisance_patterns(rng: np.random.Generator, spec: TaskSpec) -> np.ndarray:
    J, D = spec.n_joints, spec.dim
    out = [_unit(rng.normal(size=(J, D))) * np.sqrt(J) for _ in range(spec.n_nuisance)]
    return np.array(out).reshape(spec.n_nuisance, J, D)


def _suite_basis(spec: TaskSpec) -> _SuiteBasis:
    J, D, T = spec.n_joints, spec.dim, spec.n_steps
    rng = np.random.default_rng([spec.suite_seed, J, D, T, 7])
    return _SuiteBasis(
        shared_pattern=_unit(rng.normal(size=(J, D))) * np.sqrt(J),
        shared_offset=rng.normal(size=(J, D)),
        joint_rows=rng.normal(size=(J, D)) / np.sqrt(D),
        nuisance=_nuisance_patterns(rng, spec),
        scene_proj=rng.normal(size=(D, D)) / np.sqrt(D),
        profile=np.linspace(0.5, 1.5, T),
    )


def task_pattern(spec: TaskSpec) -> dict[str, np.ndarray]:
    """Joint-pair mask (J, J), quality pattern and offset (J, D), nuisance patterns (R, J, D)."""
    basis = _suite_basis(spec)
    J, D = spec.n_joints, spec.dim
    rng = np.random.default_rng([spec.seed, 11])
    mask = (rng.random((J, J)) < spec.mask_density).astype(float)
    if not mask.any():
        mask[rng.integers(J), rng.integers(J)] = 1.0
    specific = _unit(mask @ basis.joint_rows) * np.sqrt(J)
    offset = rng.normal(size=(J, D))
    nuisance = _nuisance_patterns(rng, spec)
    g = spec.gamma
    return {
        "mask": mask,
        "pattern": g * basis.shared_pattern + (1 - g) * specific,
        "offset": spec.domain_gap * (g * basis.shared_offset + (1 - g) * offset),
        "nuisance": g * basis.nuisance + (1 - g) * nuisance,
    }


def generate_task(spec: TaskSpec) -> TaskDataset:
    """Deterministic dataset for one task; identical specs give identical arrays."""
    basis = _suite_basis(spec)
    parts = task_pattern(spec)
    pattern, offset = parts["pattern"], parts["offset"]
    rng = np.random.default_rng([spec.seed, 23])
    n = spec.n_train + spec.n_test
    T, J, D = spec.n_steps, spec.n_joints, spec.dim
    q = rng.random(n)
    z = rng.normal(size=(n, spec.n_nuisance))
    noise_p = rng.normal(size=(n, T, J, D))
    noise_w = rng.normal(size=(n, T, D))
    prof = basis.profile[None, :, None, None]
    quality = spec.signal * (q - 0.5)[:, None, None, None] * prof * pattern[None, None]
    nuis = spec.nuisance * np.einsum("nr,rjd->njd", z, parts["nuisance"])[:, None] * prof
    patches = offset[None, None] + quality + nuis + spec.noise * noise_p
    scene = patches.mean(axis=2) @ basis.scene_proj + spec.noise * noise_w
    scores = spec.score_min + q * (spec.score_max - spec.score_min)
    clips = [
        FeatureClip(scene[i], patches[i], float(scores[i]), spec.task_id, index=i)
        for i in range(n)
    ]
    return TaskDataset(
        task_id=spec.task_id,
        train=clips[: spec.n_train],
        test=clips[spec.n_train:],
        score_range=(spec.score_min, spec.score_max),
        meta={"quality": q, "mask": parts["mask"]},
    )


def task_order(n_tasks: int, order_seed: int) -> list[int]:
    """Permutation (0-based positions) of the suite's tasks for one order seed."""
    return [int(i) for i in np.random.default_rng(order_seed).permutation(n_tasks)]


def generate_suite(spec: SuiteSpec) -> dict[int, list[TaskDataset]]:
    """One ordered task sequence per order seed; datasets are generated once and shared."""
    datasets = [generate_task(t) for t in spec.tasks]
    return {s: [datasets[i] for i in task_order(len(datasets), s)] for s in spec.order_seeds}


# --------------------------------------------------------------------------- #
# dataset cache


def fingerprint(spec: TaskSpec) -> str:
    blob = json.dumps(asdict(spec), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_dataset(ds: TaskDataset, spec: TaskSpec, path: str | Path) -> None:
    arrays = {
        "train_w": np.stack([c.whole_scene for c in ds.train]),
        "train_p": np.stack([c.patches for c in ds.train]),
        "train_s": ds.train_scores,
    }
    if ds.test:
        arrays.update(test_w=np.stack([c.whole_scene for c in ds.test]),
                      test_p=np.stack([c.patches for c in ds.test]), test_s=ds.test_scores)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    header = json.dumps({"format_version": FORMAT_VERSION, "fingerprint": fingerprint(spec),
                         "spec": asdict(spec)}).encode()
    Path(path).write_bytes(_MAGIC + len(header).to_bytes(4, "little") + header + buf.getvalue())


def load_dataset(path: str | Path, spec: TaskSpec | None = None) -> TaskDataset:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path} is not a cached dataset")
    n = int.from_bytes(raw[len(_MAGIC):len(_MAGIC) + 4], "little")
    header = json.loads(raw[len(_MAGIC) + 4:len(_MAGIC) + 4 + n])
    if header["format_version"] != FORMAT_VERSION:
        raise ValueError(f"dataset format {header['format_version']} != supported {FORMAT_VERSION}")
    stored = TaskSpec(**header["spec"])
    if spec is not None and fingerprint(spec) != header["fingerprint"]:
        raise ValueError("cached dataset was generated from a different TaskSpec")
    data = np.load(io.BytesIO(raw[len(_MAGIC) + 4 + n:]))

    def clips(prefix, offset):
        if f"{prefix}_s" not in data:
            return []
        return [FeatureClip(w, p, float(s), stored.task_id, index=offset + i)
                for i, (w, p, s) in enumerate(zip(data[f"{prefix}_w"], data[f"{prefix}_p"], data[f"{prefix}_s"]))]

    train = clips("train", 0)
    return TaskDataset(stored.task_id, train, clips("test", len(train)),
                       (stored.score_min, stored.score_max))


def cached_task(spec: TaskSpec, cache_dir: str | Path | None) -> TaskDataset:
    if cache_dir is None:
        return generate_task(spec)
    path = Path(cache_dir) / f"task{spec.task_id}_{fingerprint(spec)}.caqa"
    if path.exists():
        return load_dataset(path, spec)
    ds = generate_task(spec)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, spec, path)
    return ds


def with_tasks(suite: SuiteSpec, **overrides) -> SuiteSpec:
    return SuiteSpec(tuple(replace(t, **overrides) for t in suite.tasks), suite.order_seeds)


# --------------------------------------------------------------------------- #
# ablation variants

# Trainer flags fixed by each variant; other hyperparameters come from the base config.
VARIANTS: dict[str, dict] = {
    "finetune": dict(use_memory=False, fd_mode="none", use_diff=False, use_asg=False,
                     lambda_fd=0.0, lambda_diff=0.0),
    "naive_fd": dict(use_memory=False, fd_mode="naive", use_diff=False, use_asg=False),
    "+GS": dict(use_memory=True, sampler="grouping", fd_mode="naive", use_diff=False, use_asg=False),
    "+GS+Diff": dict(use_memory=True, sampler="grouping", fd_mode="naive", use_diff=True, use_asg=False),
    "full": dict(use_memory=True, sampler="grouping", fd_mode="agsg", use_diff=True, use_asg=True),
}
ALIASES = {"gs": "+GS", "gs_diff": "+GS+Diff", "gs+diff": "+GS+Diff"}
VARIANT_ORDER = tuple(VARIANTS)


def resolve_variant(name: str) -> str:
    key = ALIASES.get(name.lower(), name) if name not in VARIANTS else name
    if key not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
    return key


def variant_config(variant: str, base: TrainerConfig | None = None, order_seed: int = 0) -> TrainerConfig:
    """Trainer config for one variant; the trainer seed is offset by the order seed."""
    base = base or TrainerConfig()
    return base.replace(seed=base.seed + order_seed, **VARIANTS[resolve_variant(variant)])


@dataclass
class AblationResult:
    variant: str
    matrices: dict[int, PerformanceMatrix]
    per_seed: dict[int, dict[str, float]]

    @property
    def summary(self) -> dict[str, float]:
        keys = next(iter(self.per_seed.values())).keys()
        return {k: float(np.mean([s[k] for s in self.per_seed.values()])) for k in keys}


def run_ablation(suite: SuiteSpec, variant: str, base: TrainerConfig | None = None,
                 sequences: dict[int, list[TaskDataset]] | None = None, kind: str = "srcc",
                 on_record=None) -> AblationResult:
    """Run the continual protocol for one variant on every order seed of ``suite``.

    ``on_record(order_seed, record)`` receives each per-iteration loss record.
    """
    name = resolve_variant(variant)
    sequences = sequences or generate_suite(suite)
    matrices, per_seed = {}, {}
    for seed in suite.order_seeds:
        trainer = ContinualTrainer(suite.n_joints, suite.dim, variant_config(name, base, seed))
        hook = None if on_record is None else (lambda rec, s=seed: on_record(s, rec))
        P = build_performance_matrix(trainer, sequences[seed], kind, on_record=hook)
        matrices[seed] = P
        per_seed[seed] = summarize(P)
    return AblationResult(name, matrices, per_seed)


def run_joint(suite: SuiteSpec, base: TrainerConfig | None = None, kind: str = "srcc",
              order_seed: int = 0) -> PerformanceMatrix:
    """Upper-bound reference: one stage on the union of all tasks, filling only the final row."""
    base = (base or TrainerConfig()).replace(use_memory=False, use_diff=False, fd_mode="none")
    sequence = generate_suite(replace(suite, order_seeds=(order_seed,)))[order_seed]
    trainer = ContinualTrainer(suite.n_joints, suite.dim, base.replace(seed=base.seed + order_seed))
    trainer.train_joint(sequence)
    P = PerformanceMatrix(len(sequence), kind, task_ids=[d.task_id for d in sequence])
    last = len(sequence) - 1
    for j, ds in enumerate(sequence):
        P.values[last, j] = trainer.evaluate(ds.test, ds.task_id, kind)
    return P


__all__ = [
    "TaskSpec", "SuiteSpec", "default_suite", "generate_task", "generate_suite", "task_order",
    "task_pattern", "save_dataset", "load_dataset", "cached_task", "fingerprint", "with_tasks",
    "VARIANTS", "resolve_variant", "variant_config", "AblationResult", "run_ablation", "run_joint",
]
