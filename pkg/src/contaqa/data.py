"""Clip and task containers shared by every module."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True, eq=False)
class FeatureClip:
    """One pre-extracted video: whole-scene (T, D) and joint patches (T, J, D)."""

    whole_scene: np.ndarray
    patches: np.ndarray
    score: float
    task_id: int
    index: int = -1

    def __post_init__(self):
        ws = np.asarray(self.whole_scene, dtype=np.float64)
        vp = np.asarray(self.patches, dtype=np.float64)
        if ws.ndim != 2 or vp.ndim != 3:
            raise ValueError(f"expected (T,D) and (T,J,D), got {ws.shape} and {vp.shape}")
        if ws.shape[0] < 1 or ws.shape[0] != vp.shape[0] or ws.shape[1] != vp.shape[2]:
            raise ValueError(f"inconsistent clip shapes {ws.shape} and {vp.shape}")
        object.__setattr__(self, "whole_scene", ws)
        object.__setattr__(self, "patches", vp)
        object.__setattr__(self, "score", float(self.score))

    @property
    def key(self) -> tuple[int, int]:
        return (self.task_id, self.index)

    @property
    def n_steps(self) -> int:
        return self.patches.shape[0]

    @property
    def n_joints(self) -> int:
        return self.patches.shape[1]

    @property
    def dim(self) -> int:
        return self.patches.shape[2]


def stack_clips(clips) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch clips into (B,T,D), (B,T,J,D) and a (B,) score vector."""
    clips = list(clips)
    if not clips:
        raise ValueError("no clips to stack")
    v_w = np.stack([c.whole_scene for c in clips])
    v_p = np.stack([c.patches for c in clips])
    s = np.array([c.score for c in clips], dtype=np.float64)
    return v_w, v_p, s


@dataclass
class TaskDataset:
    task_id: int
    train: list[FeatureClip]
    test: list[FeatureClip]
    score_range: tuple[float, float]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.train:
            raise ValueError(f"task {self.task_id} has no training clips")
        lo, hi = self.score_range
        for c in (*self.train, *self.test):
            if c.task_id != self.task_id:
                raise ValueError(f"clip from task {c.task_id} inside task {self.task_id}")
            if not lo <= c.score <= hi:
                raise ValueError(f"score {c.score} outside [{lo}, {hi}] for task {self.task_id}")

    @property
    def train_scores(self) -> np.ndarray:
        return np.array([c.score for c in self.train])

    @property
    def test_scores(self) -> np.ndarray:
        return np.array([c.score for c in self.test])
