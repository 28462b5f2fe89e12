"""Continual training loop: score regression, feature distillation and rehearsal."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import metrics
from . import numerics as nx
from .agsg import Extractor, GraphSet, init_asg, init_extractor_params
from .data import FeatureClip, TaskDataset, stack_clips
from .fscar import (
    ExemplarStore,
    HelperSet,
    fs_augment,
    grouping_sample,
    herding_sample,
    random_sample,
    rebalance_memory,
    select_helpers_anchor,
    select_helpers_random,
)
from .numerics import OptimizerState, ParamSet, Tensor

log = logging.getLogger(__name__)

SAMPLERS = ("grouping", "random", "herding")
FD_MODES = ("none", "naive", "agsg")
HELPER_MODES = ("random", "anchor")


@dataclass
class TrainerConfig:
    feature_dim: int = 64
    hidden: int = 64
    alpha: float = 0.5
    sigma: float = 0.3
    n_helpers: int = 7
    memory: int = 30
    lambda_fd: float = 0.01
    lambda_diff: float = 1.0
    batch_size: int = 8
    iterations: int = 200
    lr_graph: float = 0.01
    lr_other: float = 0.001
    weight_decay: float = 1e-5
    use_memory: bool = True
    sampler: str = "grouping"
    fd_mode: str = "agsg"
    use_diff: bool = True
    use_asg: bool = True
    helper_selection: str = "random"
    same_frame_spatial: bool = False
    eps_clip: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")
        if self.fd_mode not in FD_MODES:
            raise ValueError(f"fd_mode must be one of {FD_MODES}")
        if self.helper_selection not in HELPER_MODES:
            raise ValueError(f"helper_selection must be one of {HELPER_MODES}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.lambda_fd < 0 or self.lambda_diff < 0:
            raise ValueError("loss weights must be non-negative")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        for name in ("feature_dim", "hidden", "n_helpers", "memory", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.lr_graph <= 0 or self.lr_other <= 0 or self.weight_decay < 0:
            raise ValueError("learning rates must be positive and weight decay non-negative")
        if self.eps_clip is not None and self.eps_clip <= 0:
            raise ValueError("eps_clip must be positive when set")
        if self.use_diff and not self.use_memory:
            raise ValueError("the difference loss needs rehearsal memory")

    def replace(self, **changes) -> "TrainerConfig":
        return dataclasses.replace(self, **changes)


class Regressor:
    """Two-layer head, ``relu(x W1 + b1) W2 + b2``, returning shape (B,)."""

    def __init__(self, params: ParamSet, prefix: str):
        self.params = params
        self.prefix = prefix

    @staticmethod
    def init(params: ParamSet, prefix: str, n_in: int, hidden: int, rng: np.random.Generator) -> "Regressor":
        lim1, lim2 = 1.0 / np.sqrt(n_in), 1.0 / np.sqrt(hidden)
        params.add(f"{prefix}.w1", rng.uniform(-lim1, lim1, (n_in, hidden)))
        params.add(f"{prefix}.b1", rng.uniform(-lim1, lim1, hidden))
        params.add(f"{prefix}.w2", rng.uniform(-lim2, lim2, (hidden, 1)))
        params.add(f"{prefix}.b2", rng.uniform(-lim2, lim2, 1))
        return Regressor(params, prefix)

    @property
    def n_in(self) -> int:
        return self.params[f"{self.prefix}.w1"].shape[0]

    def __call__(self, x) -> Tensor:
        p, pre = self.params, self.prefix
        h = nx.relu(nx.linear(x, p[f"{pre}.w1"], p[f"{pre}.b1"]))
        out = nx.linear(h, p[f"{pre}.w2"], p[f"{pre}.b2"])
        return nx.reshape(out, out.shape[:-1])


# --------------------------------------------------------------------------- #
# loss pieces


def aqa_loss(predicted, target) -> Tensor:
    """Mean squared error between predicted and ground-truth scores."""
    pred = nx.as_tensor(predicted)
    tgt = np.broadcast_to(np.asarray(target, dtype=np.float64), pred.shape)
    return nx.mse(pred, tgt)


def feature_distill_loss(current: Sequence, snapshot: Sequence) -> Tensor:
    """Sum over graphs of squared distances between current and snapshot features.

    ``current[g]`` / ``snapshot[g]`` are features of the same item(s) under the
    g-th previous task's graph. Batched inputs (B, D_f) give the batch mean.
    """
    if len(current) == 0:
        raise ValueError("distillation needs at least one previous task")
    if len(current) != len(snapshot):
        raise ValueError("current and snapshot feature lists differ in length")
    total = None
    n = 1
    for f_cur, f_old in zip(current, snapshot):
        f_cur = nx.as_tensor(f_cur)
        n = f_cur.shape[0] if f_cur.ndim == 2 else 1
        term = nx.sq_error(f_cur, np.asarray(nx.as_tensor(f_old).data))
        total = term if total is None else nx.add(total, term)
    return nx.scale(total, 1.0 / n)


def naive_distill_loss(f_cur, f_old) -> Tensor:
    """Squared distance between current and snapshot features under the clip's own graph."""
    return feature_distill_loss([f_cur], [f_old])


def total_loss(l_aqa, l_fd, l_diff, lambda_fd: float, lambda_diff: float, base_step: bool) -> Tensor:
    if lambda_fd < 0 or lambda_diff < 0:
        raise ValueError("loss weights must be non-negative")
    out = nx.as_tensor(l_aqa)
    if base_step:
        return out
    if l_fd is not None:
        out = nx.add(out, nx.scale(l_fd, lambda_fd))
    if l_diff is not None:
        out = nx.add(out, nx.scale(l_diff, lambda_diff))
    return out


def _select_rows(features: dict[int, Tensor], tasks: np.ndarray) -> Tensor:
    """Row i taken from ``features[tasks[i]]``; exact because masks are 0/1."""
    keys = sorted(set(int(t) for t in tasks))
    if len(keys) == 1:
        return features[keys[0]]
    out = None
    for k in keys:
        mask = (tasks == k).astype(np.float64)[:, None]
        term = nx.mul(features[k], mask)
        out = term if out is None else nx.add(out, term)
    return out


# --------------------------------------------------------------------------- #


class ContinualTrainer:
    """Holds the model, optimizer, rehearsal memory and task bookkeeping."""

    def __init__(self, n_joints: int, dim: int, config: TrainerConfig | None = None):
        self.config = cfg = config or TrainerConfig()
        self.n_joints, self.dim = n_joints, dim
        self.rng = np.random.default_rng(cfg.seed)
        self.params = ParamSet()
        init_extractor_params(self.params, n_joints, dim, cfg.feature_dim, self.rng)
        self.rs = Regressor.init(self.params, "rs", cfg.feature_dim, cfg.hidden, self.rng)
        self.rd = Regressor.init(self.params, "rd", 2 * cfg.feature_dim, cfg.hidden, self.rng)
        self.graphs = self._graphset(self.params)
        self.extractor = Extractor(self.params, self.graphs)
        self.opt = OptimizerState(weight_decay=cfg.weight_decay)
        self.store = ExemplarStore(cfg.memory) if cfg.use_memory else None
        self.task_stats: dict[int, tuple[float, float]] = {}
        self.stage = 0
        self.snapshot: ParamSet | None = None
        self.last_batch: dict = {}

    def _graphset(self, params: ParamSet) -> GraphSet:
        cfg = self.config
        return GraphSet(params, self.n_joints, cfg.alpha if cfg.use_asg else 1.0,
                        cfg.use_asg, cfg.same_frame_spatial)

    @property
    def seen_tasks(self) -> list[int]:
        return list(self.graphs.tasks)

    @property
    def lr_map(self) -> dict[str, float]:
        return {"graph": self.config.lr_graph, "other": self.config.lr_other}

    def standardize(self, task: int, scores) -> np.ndarray:
        mu, sd = self.task_stats[task]
        return (np.asarray(scores, dtype=np.float64) - mu) / sd

    def _snapshot_extractor(self) -> Extractor:
        frozen = self.params.frozen_copy()
        graphs = self._graphset(frozen)
        graphs.tasks = list(self.graphs.tasks)
        self.snapshot = frozen
        return Extractor(frozen, graphs)

    def features(self, clips: Sequence[FeatureClip], task: int, extractor: Extractor | None = None,
                 chunk: int = 256) -> np.ndarray:
        ex = extractor or self.extractor
        out = []
        for lo in range(0, len(clips), chunk):
            v_w, v_p, _ = stack_clips(clips[lo:lo + chunk])
            out.append(ex(v_w, v_p, task).data)
        return np.concatenate(out)

    def predict(self, clips: Sequence[FeatureClip], task: int) -> np.ndarray:
        f = self.features(clips, task)
        z = self.rs(f).data
        mu, sd = self.task_stats[task]
        return z * sd + mu

    def evaluate(self, clips: Sequence[FeatureClip], task: int, kind: str = "srcc") -> float:
        pred = self.predict(clips, task)
        return metrics.METRICS[kind](pred, [c.score for c in clips])

    # ------------------------------------------------------------------ #

    def train_task(self, dataset: TaskDataset, on_record: Callable[[dict], None] | None = None,
                   on_step: Callable[["ContinualTrainer"], None] | None = None) -> list[dict]:
        cfg = self.config
        task = dataset.task_id
        if task in self.graphs.tasks:
            raise ValueError(f"task {task} was already trained")
        t = self.stage + 1
        base = t == 1
        prev_tasks = list(self.graphs.tasks)
        use_prev = cfg.use_memory and not base
        if use_prev and (self.store is None or len(self.store) == 0):
            raise ValueError("rehearsal memory is empty at a continual step")
        train = dataset.train
        scores = dataset.train_scores
        sd = float(scores.std())
        self.task_stats[task] = (float(scores.mean()), sd if sd > 0 else 1.0)
        y_train = self.standardize(task, scores)

        init_asg(self.graphs, task, base_step=base)
        distill = not base and cfg.fd_mode != "none"
        snap = self._snapshot_extractor() if not base else None

        stored = self.store.all() if use_prev else []
        store_tasks = np.array([e.task for e in stored], dtype=int)
        y_store = np.array([self.standardize(e.task, e.score) for e in stored])
        snap_store_own = snap_cur = snap_store = None
        if snap is not None:
            fd_graphs = prev_tasks if cfg.fd_mode == "agsg" else [task]
            if distill:
                snap_cur = {n: self.features(train, n, snap) for n in fd_graphs}
            if stored:
                needed = sorted(set(prev_tasks) | set(store_tasks.tolist()))
                stored_clips = [e.clip for e in stored]
                by_graph = {n: self.features(stored_clips, n, snap) for n in needed}
                snap_store = by_graph
                snap_store_own = np.stack([by_graph[int(k)][i] for i, k in enumerate(store_tasks)])
        sorted_pos = None
        if stored and cfg.helper_selection == "anchor":
            order = np.argsort(y_store, kind="stable")
            sorted_pos = np.empty(len(order), dtype=int)
            sorted_pos[order] = np.arange(len(order))

        records = []
        b = min(cfg.batch_size, len(train))
        for it in range(cfg.iterations):
            idx = self.rng.choice(len(train), size=b, replace=False)
            batch = {"idx": idx}
            if stored:
                pj = self.rng.integers(0, len(stored), size=b)
                batch["prev"] = pj
                if cfg.use_diff:
                    batch["helpers"] = [self._helpers(len(stored), int(j), sorted_pos) for j in pj]
                    batch["eps"] = self.rng.normal(0.0, cfg.sigma, size=b) if cfg.sigma > 0 else np.zeros(b)
            self.last_batch = batch

            cur = [train[i] for i in idx]
            cw, cp, _ = stack_clips(cur)
            cur_graphs = (prev_tasks + [task]) if (distill and cfg.fd_mode == "agsg") else [task]
            f_cur_by = {n: self.extractor(cw, cp, n) for n in cur_graphs}
            f_cur = f_cur_by[task]
            sq_cur = nx.sq_error(self.rs(f_cur), y_train[idx])

            l_fd = l_diff = None
            if stored:
                pj = batch["prev"]
                prev_items = [stored[j] for j in pj]
                pw, pp, _ = stack_clips([e.clip for e in prev_items])
                taus = store_tasks[pj]
                pre_graphs = prev_tasks if cfg.fd_mode == "agsg" else sorted(set(taus.tolist()))
                f_pre_by = {n: self.extractor(pw, pp, n) for n in pre_graphs}
                f_pre = _select_rows(f_pre_by, taus)
                sq_pre = nx.sq_error(self.rs(f_pre), y_store[pj])
                l_aqa = nx.scale(nx.add(sq_cur, sq_pre), 1.0 / (2 * b))
            else:
                l_aqa = nx.scale(sq_cur, 1.0 / b)

            if distill:
                if cfg.fd_mode == "agsg":
                    fd_cur = feature_distill_loss([f_cur_by[n] for n in prev_tasks],
                                                  [snap_cur[n][idx] for n in prev_tasks])
                else:
                    fd_cur = naive_distill_loss(f_cur, snap_cur[task][idx])
                if stored:
                    if cfg.fd_mode == "agsg":
                        fd_pre = feature_distill_loss([f_pre_by[n] for n in prev_tasks],
                                                      [snap_store[n][pj] for n in prev_tasks])
                    else:
                        fd_pre = naive_distill_loss(f_pre, snap_store_own[pj])
                    l_fd = nx.scale(nx.add(fd_cur, fd_pre), 0.5)
                else:
                    l_fd = fd_cur

            if stored and cfg.use_diff:
                aug_f = np.empty((b, snap_store_own.shape[1]))
                d = np.empty(b)
                for r, (j, hl, eps) in enumerate(zip(pj, batch["helpers"], batch["eps"])):
                    helpers = HelperSet(snap_store_own[hl], y_store[hl])
                    aug_f[r], s_aug, _ = fs_augment(snap_store_own[j], y_store[j], helpers,
                                                    cfg.sigma, eps=float(eps), clip=cfg.eps_clip)
                    d[r] = s_aug - y_store[j]
                pred_d = self.rd(nx.concat([nx.Tensor(aug_f), f_pre], axis=-1))
                l_diff = nx.mse(pred_d, d)

            loss = total_loss(l_aqa, l_fd, l_diff, cfg.lambda_fd, cfg.lambda_diff, base)
            self.params.zero_grad()
            loss.backward()
            grads = self.params.grads()
            self.params.zero_grad()
            nx.adam_update(self.params, grads, self.opt, self.lr_map)

            rec = {
                "task": task, "stage": t, "iteration": it,
                "aqa": l_aqa.item(),
                "fd": None if l_fd is None else l_fd.item(),
                "diff": None if l_diff is None else l_diff.item(),
                "total": loss.item(),
            }
            records.append(rec)
            if on_record is not None:
                on_record(rec)
            if on_step is not None:
                on_step(self)

        if cfg.use_memory:
            rebalance_memory(self.store, task, train, cfg.memory, self._selector(task))
        self.snapshot = None
        self.stage = t
        return records

    def _helpers(self, n_items: int, anchor_item: int, sorted_pos) -> np.ndarray:
        k = self.config.n_helpers
        if sorted_pos is None:
            return np.array(select_helpers_random(n_items, k, self.rng, exclude=anchor_item))
        inv = np.argsort(sorted_pos)
        picks = select_helpers_anchor(n_items, k, int(sorted_pos[anchor_item]) + 1, self.rng)
        return inv[np.array(picks)]

    def _selector(self, task: int):
        kind = self.config.sampler
        if kind == "grouping":
            return lambda clips, m: grouping_sample([c.score for c in clips], m)
        if kind == "random":
            return lambda clips, m: random_sample(len(clips), m, self.rng)
        return lambda clips, m: herding_sample(self.features(clips, task), m)

    # ------------------------------------------------------------------ #

    def train_joint(self, datasets: Sequence[TaskDataset], on_record=None) -> list[dict]:
        """Single-stage training on the union of all tasks (upper-bound reference)."""
        cfg = self.config
        if self.stage:
            raise ValueError("joint training starts from a fresh trainer")
        pool: list[FeatureClip] = []
        targets = []
        for k, ds in enumerate(datasets):
            s = ds.train_scores
            sd = float(s.std())
            self.task_stats[ds.task_id] = (float(s.mean()), sd if sd > 0 else 1.0)
            init_asg(self.graphs, ds.task_id, base_step=(k == 0))
            pool.extend(ds.train)
            targets.append(self.standardize(ds.task_id, s))
        y = np.concatenate(targets)
        tasks = np.array([c.task_id for c in pool])
        records = []
        b = min(cfg.batch_size, len(pool))
        for it in range(cfg.iterations * len(datasets)):
            idx = self.rng.choice(len(pool), size=b, replace=False)
            v_w, v_p, _ = stack_clips([pool[i] for i in idx])
            feats = {n: self.extractor(v_w, v_p, n) for n in sorted(set(tasks[idx].tolist()))}
            loss = aqa_loss(self.rs(_select_rows(feats, tasks[idx])), y[idx])
            self.params.zero_grad()
            loss.backward()
            grads = self.params.grads()
            nx.adam_update(self.params, grads, self.opt, self.lr_map)
            rec = {"task": -1, "stage": 1, "iteration": it, "aqa": loss.item(),
                   "fd": None, "diff": None, "total": loss.item()}
            records.append(rec)
            if on_record is not None:
                on_record(rec)
        self.stage = 1
        return records


def build_performance_matrix(trainer: ContinualTrainer, sequence: Sequence[TaskDataset],
                             kind: str = "srcc", on_stage=None, on_record=None,
                             start_stage: int = 0, matrix: metrics.PerformanceMatrix | None = None
                             ) -> metrics.PerformanceMatrix:
    """Train through ``sequence`` and fill row i with every seen task's test metric.

    ``start_stage``/``matrix`` resume a partially completed sequence.
    """
    P = matrix or metrics.PerformanceMatrix(len(sequence), kind, task_ids=[d.task_id for d in sequence])
    for i in range(start_stage, len(sequence)):
        trainer.train_task(sequence[i], on_record=on_record)
        for j in range(i + 1):
            P.set(i, j, trainer.evaluate(sequence[j].test, sequence[j].task_id, kind))
        if on_stage is not None:
            on_stage(i, trainer, P)
    return P
