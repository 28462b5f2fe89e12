"""Rank metrics for score regression and the continual-learning summary metrics."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

NA = "NA"


def _pair(predicted, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predicted, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} targets")
    if p.size < 2:
        raise ValueError("need at least two items")
    return p, t


def srcc(predicted, truth) -> float:
    """Spearman correlation: Pearson correlation of average ranks."""
    p, t = _pair(predicted, truth)
    x = rankdata(p) - (p.size + 1) / 2.0
    y = rankdata(t) - (t.size + 1) / 2.0
    denom = math.sqrt(float(np.dot(x, x)) * float(np.dot(y, y)))
    if denom == 0.0:
        raise ValueError("rank correlation undefined for a constant series")
    return float(np.clip(np.dot(x, y) / denom, -1.0, 1.0))


def pairwise_accuracy(predicted, truth) -> float:
    """Fraction of unordered pairs ranked alike; a tie on exactly one side scores 1/2."""
    p, t = _pair(predicted, truth)
    sp = np.sign(p[:, None] - p[None, :])
    st = np.sign(t[:, None] - t[None, :])
    agree = np.where(sp == st, 1.0, np.where((sp == 0) | (st == 0), 0.5, 0.0))
    iu = np.triu_indices(p.size, k=1)
    return float(agree[iu].mean())


METRICS = {"srcc": srcc, "pairwise_accuracy": pairwise_accuracy}


@dataclass
class PerformanceMatrix:
    """``values[i][j]`` is performance on task j after stage i (0-based); NaN when undefined."""

    n_tasks: int
    kind: str = "srcc"
    values: np.ndarray = field(default=None)  # type: ignore[assignment]
    task_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in METRICS:
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.values is None:
            self.values = np.full((self.n_tasks, self.n_tasks), np.nan)
        self.values = np.asarray(self.values, dtype=np.float64)

    def set(self, stage: int, task: int, value: float) -> None:
        if task > stage:
            raise IndexError(f"task {task} is not seen at stage {stage}")
        lo, hi = (-1.0, 1.0) if self.kind == "srcc" else (0.0, 1.0)
        if not lo <= value <= hi:
            raise ValueError(f"{self.kind} value {value} outside [{lo}, {hi}]")
        self.values[stage, task] = value

    def defined(self, stage: int, task: int) -> bool:
        return not np.isnan(self.values[stage, task])

    @property
    def stages_done(self) -> int:
        rows = [i for i in range(self.n_tasks) if self.defined(i, 0)]
        return len(rows)

    def to_csv(self, header: str | None = None) -> str:
        buf = io.StringIO()
        if header:
            buf.write(f"# {header}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage"] + [f"task_{j + 1}" for j in range(self.n_tasks)])
        for i in range(self.n_tasks):
            row = [NA if np.isnan(v) else repr(float(v)) for v in self.values[i]]
            w.writerow([i + 1] + row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, kind: str = "srcc") -> "PerformanceMatrix":
        lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        rows = list(csv.reader(lines))[1:]
        vals = np.array([[np.nan if c == NA else float(c) for c in r[1:]] for r in rows])
        return cls(n_tasks=vals.shape[1], kind=kind, values=vals)


def _last_row(P: PerformanceMatrix) -> np.ndarray:
    last = P.values[P.n_tasks - 1]
    if np.isnan(last).any():
        raise ValueError("final row of the performance matrix is incomplete")
    return last


def average_performance(P: PerformanceMatrix) -> float:
    last = _last_row(P)
    return float(sum(last.tolist()) / len(last))


def negative_backward_transfer(P: PerformanceMatrix) -> float:
    T = P.n_tasks
    if T < 2:
        raise ValueError("backward transfer needs at least two tasks")
    last = _last_row(P)
    drops = [max(0.0, P.values[t, t] - last[t]) for t in range(T - 1)]
    return float(sum(drops) / (T - 1))


def maximum_forgetting(P: PerformanceMatrix) -> float:
    """Mean over old tasks of (best value in the column) minus (worst value off the diagonal).

    Only rows where the column is defined (stage >= task) take part. Nothing
    is clamped; each term is still >= 0 because the maximum ranges over the
    rows the minimum sees.
    """
    T = P.n_tasks
    if T < 2:
        raise ValueError("maximum forgetting needs at least two tasks")
    _last_row(P)
    total = 0.0
    for t in range(T - 1):
        col = P.values[t:, t]
        if np.isnan(col).any():
            raise ValueError(f"column {t} has undefined entries at or below the diagonal")
        total += float(np.max(col) - np.min(col[1:]))
    return total / (T - 1)


def summarize(P: PerformanceMatrix) -> dict[str, float]:
    out = {"AP": average_performance(P)}
    if P.n_tasks >= 2:
        out["NBT"] = negative_backward_transfer(P)
        out["MF"] = maximum_forgetting(P)
    return out
