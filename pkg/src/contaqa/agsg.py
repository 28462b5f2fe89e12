"""Feature extractor with action-general and action-specific joint graphs.

Each task ``g`` sees the joint graph ``alpha * G + (1 - alpha) * S[g]`` where
``G`` is shared by every task and ``S[g]`` belongs to task ``g`` alone. There is
one such pair for spatial aggregation and one for temporal aggregation.

Per time step the extractor concatenates the whole-scene feature, the
flattened patch features, the commonality features and the two difference
features, mean-pools the result over time and applies ``relu(x W + b)``.
Flattening is joint-major: a (J, D) block becomes ``J * D`` consecutive values.
"""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from .data import FeatureClip
from .numerics import ParamSet, ShapeError, Tensor

AGG_SPATIAL = "agg.spatial"
AGG_TEMPORAL = "agg.temporal"
NEIGHBOUR_WEIGHTS = "graph.w"
HEAD_WEIGHT = "head.weight"
HEAD_BIAS = "head.bias"


def asg_name(kind: str, task: int) -> str:
    return f"asg.{kind}.{task}"


def combine_graph(general, specific, alpha: float) -> Tensor:
    """Convex mix ``alpha * general + (1 - alpha) * specific``."""
    general, specific = nx.as_tensor(general), nx.as_tensor(specific)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if general.shape != specific.shape or general.ndim != 2 or general.shape[0] != general.shape[1]:
        raise ShapeError("combine_graph", f"graphs {general.shape} and {specific.shape} differ or are not square")
    if alpha == 1.0:
        return general
    if alpha == 0.0:
        return specific
    return nx.add(nx.scale(general, alpha), nx.scale(specific, 1.0 - alpha))


def _check_graph(name: str, v_p: Tensor, graph: Tensor) -> None:
    n_joints = v_p.shape[-2]
    if graph.shape != (n_joints, n_joints):
        raise ShapeError(name, f"graph {graph.shape} does not match {n_joints} joints of patches {v_p.shape}")


def commonality_features(v_p, graph) -> Tensor:
    """Mix joints per time step: ``H[t] = A @ v_p[t]``. Works on (..., T, J, D)."""
    v_p, graph = nx.as_tensor(v_p), nx.as_tensor(graph)
    if v_p.ndim < 3:
        raise ShapeError("commonality_features", f"patches need (..., T, J, D), got {v_p.shape}")
    _check_graph("commonality_features", v_p, graph)
    return nx.matmul(graph, v_p)


def previous_frames(v_p: Tensor) -> Tensor:
    """Shift patches one step forward in time; the first step sees zeros."""
    time_axis = v_p.ndim - 3
    pad_shape = list(v_p.shape)
    pad_shape[time_axis] = 1
    idx = [slice(None)] * v_p.ndim
    idx[time_axis] = slice(0, v_p.shape[time_axis] - 1)
    return nx.concat([Tensor(np.zeros(pad_shape)), nx.take(v_p, tuple(idx))], axis=time_axis)


def difference_features(v_p, graph, weights, mode: str = "temporal", same_frame: bool = False) -> Tensor:
    """``out[t, i] = sum_j A[i, j] * (v_p[t, i] - v_p[t-1, j]) * w[j]``.

    With ``same_frame=True`` (spatial mode only) the subtrahend is
    ``v_p[t, j]`` instead of the previous frame.
    """
    if mode not in ("spatial", "temporal"):
        raise ValueError(f"mode must be 'spatial' or 'temporal', got {mode!r}")
    v_p, graph, weights = nx.as_tensor(v_p), nx.as_tensor(graph), nx.as_tensor(weights)
    if v_p.ndim < 3:
        raise ShapeError("difference_features", f"patches need (..., T, J, D), got {v_p.shape}")
    _check_graph("difference_features", v_p, graph)
    n_joints = v_p.shape[-2]
    if weights.shape != (n_joints,):
        raise ShapeError("difference_features", f"weights {weights.shape} != ({n_joints},)")
    weighted = nx.mul(graph, nx.reshape(weights, (1, n_joints)))
    row_total = nx.reshape(nx.tsum(weighted, axis=1), (n_joints, 1))
    own = nx.mul(v_p, row_total)
    other = v_p if (same_frame and mode == "spatial") else previous_frames(v_p)
    return nx.sub(own, nx.matmul(weighted, other))


def concat_step_features(v_w, v_p, common, diff_s, diff_r) -> Tensor:
    """Per-step concatenation; output (..., T, D + 4 * J * D)."""
    v_w = nx.as_tensor(v_w)
    parts = [v_w]
    for t in (v_p, common, diff_s, diff_r):
        t = nx.as_tensor(t)
        if t.shape[:-2] != v_w.shape[:-1]:
            raise ShapeError("concat_step_features", f"patch block {t.shape} vs whole-scene {v_w.shape}")
        parts.append(nx.reshape(t, t.shape[:-2] + (t.shape[-2] * t.shape[-1],)))
    return nx.concat(parts, axis=-1)


def concat_width(n_joints: int, dim: int) -> int:
    return dim + 4 * n_joints * dim


class GraphSet:
    """Graph parameters living inside a :class:`ParamSet`, keyed by task id."""

    def __init__(self, params: ParamSet, n_joints: int, alpha: float = 0.5,
                 use_asg: bool = True, same_frame_spatial: bool = False):
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
        if n_joints < 1:
            raise ValueError("need at least one joint")
        self.params = params
        self.n_joints = n_joints
        self.alpha = alpha
        self.use_asg = use_asg
        self.same_frame_spatial = same_frame_spatial
        self.tasks: list[int] = []

    def has_task(self, task: int) -> bool:
        return task in self.tasks

    def graphs(self, task: int) -> tuple[Tensor, Tensor]:
        """Combined (spatial, temporal) graph used for ``task``."""
        g_s, g_r = self.params[AGG_SPATIAL], self.params[AGG_TEMPORAL]
        if not self.use_asg:
            return g_s, g_r
        if task not in self.tasks:
            raise KeyError(f"no action-specific graph for task {task}")
        return (
            combine_graph(g_s, self.params[asg_name("spatial", task)], self.alpha),
            combine_graph(g_r, self.params[asg_name("temporal", task)], self.alpha),
        )

    @property
    def weights(self) -> Tensor:
        return self.params[NEIGHBOUR_WEIGHTS]


def init_asg(graphs: GraphSet, task: int, base_step: bool) -> GraphSet:
    """Register ``task`` and create its action-specific graphs.

    At the base step they copy the general graphs so the mixed graph equals the
    graph a model without specific graphs would start from. Later tasks copy
    the most recently added task's specific graphs.
    """
    if task in graphs.tasks:
        raise KeyError(f"task {task} already has graphs")
    if graphs.use_asg:
        if base_step or not graphs.tasks:
            src_s, src_r = AGG_SPATIAL, AGG_TEMPORAL
        else:
            last = graphs.tasks[-1]
            src_s, src_r = asg_name("spatial", last), asg_name("temporal", last)
        p = graphs.params
        p.add(asg_name("spatial", task), p[src_s].data, group="graph")
        p.add(asg_name("temporal", task), p[src_r].data, group="graph")
    graphs.tasks.append(task)
    return graphs


def init_extractor_params(params: ParamSet, n_joints: int, dim: int, feature_dim: int,
                          rng: np.random.Generator) -> None:
    bound = 1.0 / n_joints
    params.add(AGG_SPATIAL, rng.uniform(-bound, bound, (n_joints, n_joints)), group="graph")
    params.add(AGG_TEMPORAL, rng.uniform(-bound, bound, (n_joints, n_joints)), group="graph")
    params.add(NEIGHBOUR_WEIGHTS, np.ones(n_joints))
    width = concat_width(n_joints, dim)
    lim = 1.0 / np.sqrt(width)
    params.add(HEAD_WEIGHT, rng.uniform(-lim, lim, (width, feature_dim)))
    params.add(HEAD_BIAS, rng.uniform(-lim, lim, feature_dim))


class Extractor:
    """Maps batched clips to latent features for a given task's graphs."""

    def __init__(self, params: ParamSet, graphs: GraphSet):
        self.params = params
        self.graphs = graphs

    @property
    def feature_dim(self) -> int:
        return self.params[HEAD_WEIGHT].shape[1]

    def step_features(self, v_w, v_p, task: int) -> Tensor:
        a_s, a_r = self.graphs.graphs(task)
        v_p = nx.as_tensor(v_p)
        w = self.graphs.weights
        common = commonality_features(v_p, a_s)
        d_s = difference_features(v_p, a_s, w, "spatial", self.graphs.same_frame_spatial)
        d_r = difference_features(v_p, a_r, w, "temporal")
        return concat_step_features(v_w, v_p, common, d_s, d_r)

    def __call__(self, v_w, v_p, task: int) -> Tensor:
        """(B, T, D) and (B, T, J, D) to (B, D_f)."""
        pooled = nx.mean(self.step_features(v_w, v_p, task), axis=-2)
        return nx.relu(nx.linear(pooled, self.params[HEAD_WEIGHT], self.params[HEAD_BIAS]))


def extract_features(clip: FeatureClip, extractor: Extractor, task: int) -> np.ndarray:
    """Latent feature of one clip under ``task``'s graphs."""
    out = extractor(clip.whole_scene[None], clip.patches[None], task)
    return out.data[0].copy()
