"""Versioned, checksummed trainer checkpoints.

Layout: 8-byte magic, little-endian uint32 format version, 32-byte sha256 of
the payload, then the payload (an ``.npz`` archive). The archive holds every
array (parameters, Adam moments, stored clips) and one JSON blob with the
rest: config, RNG state, bookkeeping and caller-supplied ``extra`` data.
"""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
from pathlib import Path

import numpy as np

from .agsg import Extractor
from .data import FeatureClip
from .fscar import Exemplar, ExemplarStore
from .numerics import OptimizerState, ParamSet
from .training import ContinualTrainer, Regressor, TrainerConfig

FORMAT_VERSION = 1
MAGIC = b"CAQACKPT"
_HEAD = len(MAGIC) + 4 + 32


class CheckpointError(RuntimeError):
    pass


def _pack(trainer: ContinualTrainer, extra: dict | None, arrays_extra: dict | None) -> bytes:
    arrays: dict[str, np.ndarray] = {}
    for name, value in trainer.params.arrays().items():
        arrays[f"param/{name}"] = value
    opt = trainer.opt
    for name, value in opt.m.items():
        arrays[f"adam_m/{name}"] = value
        arrays[f"adam_v/{name}"] = opt.v[name]
    layout = []
    if trainer.store is not None:
        clips = [e.clip for e in trainer.store.all()]
        layout = [[task, len(items)] for task, items in trainer.store.per_task.items()]
        if clips:
            arrays["store/whole_scene"] = np.stack([c.whole_scene for c in clips])
            arrays["store/patches"] = np.stack([c.patches for c in clips])
            arrays["store/score"] = np.array([c.score for c in clips])
            arrays["store/index"] = np.array([c.index for c in clips], dtype=np.int64)
    for name, value in (arrays_extra or {}).items():
        arrays[f"extra/{name}"] = np.asarray(value)
    meta = {
        "config": dataclasses.asdict(trainer.config),
        "n_joints": trainer.n_joints,
        "dim": trainer.dim,
        "stage": trainer.stage,
        "graph_tasks": list(trainer.graphs.tasks),
        "task_stats": [[k, mu, sd] for k, (mu, sd) in trainer.task_stats.items()],
        "param_order": list(trainer.params),
        "param_groups": trainer.params.groups(),
        "rng": trainer.rng.bit_generator.state,
        "optimizer": {"beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
                      "weight_decay": opt.weight_decay, "step": opt.step},
        "store": None if trainer.store is None else {"capacity": trainer.store.capacity,
                                                     "layout": layout},
        "extra": extra or {},
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def save_checkpoint(path: str | Path, trainer: ContinualTrainer, extra: dict | None = None,
                    arrays: dict | None = None) -> str:
    """Write ``trainer`` to ``path`` atomically; returns the payload digest."""
    payload = _pack(trainer, extra, arrays)
    digest = hashlib.sha256(payload)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(MAGIC + FORMAT_VERSION.to_bytes(4, "little") + digest.digest() + payload)
    tmp.replace(path)
    return digest.hexdigest()


def _read(path: str | Path) -> tuple[dict, dict[str, np.ndarray], str]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD or not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = int.from_bytes(raw[len(MAGIC):len(MAGIC) + 4], "little")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, "
                              f"this build reads version {FORMAT_VERSION}")
    stored = raw[len(MAGIC) + 4:_HEAD]
    payload = raw[_HEAD:]
    if hashlib.sha256(payload).digest() != stored:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupted")
    try:
        with np.load(io.BytesIO(payload)) as npz:
            arrays = {k: npz[k] for k in npz.files}
        meta = json.loads(arrays.pop("meta").tobytes())
    except Exception as exc:  # checksum passed, so this is a writer bug
        raise CheckpointError(f"{path}: unreadable payload ({exc})") from exc
    return meta, arrays, stored.hex()


def inspect_checkpoint(path: str | Path) -> dict:
    """Metadata summary without rebuilding the trainer."""
    meta, arrays, digest = _read(path)
    return {
        "format_version": FORMAT_VERSION,
        "sha256": digest,
        "stage": meta["stage"],
        "tasks": meta["graph_tasks"],
        "optimizer_step": meta["optimizer"]["step"],
        "n_parameters": int(sum(v.size for k, v in arrays.items() if k.startswith("param/"))),
        "memory": 0 if meta["store"] is None else sum(n for _, n in meta["store"]["layout"]),
        "extra": meta["extra"],
    }


def load_checkpoint(path: str | Path) -> tuple[ContinualTrainer, dict, dict[str, np.ndarray]]:
    """Rebuild a trainer; returns ``(trainer, extra, extra_arrays)``."""
    meta, arrays, _ = _read(path)
    config = TrainerConfig(**meta["config"])
    trainer = ContinualTrainer(meta["n_joints"], meta["dim"], config)

    params = ParamSet.from_arrays({k: arrays[f"param/{k}"] for k in meta["param_order"]},
                                  meta["param_groups"])
    trainer.params = params
    trainer.rs = Regressor(params, "rs")
    trainer.rd = Regressor(params, "rd")
    trainer.graphs = trainer._graphset(params)
    trainer.graphs.tasks = [int(t) for t in meta["graph_tasks"]]
    trainer.extractor = Extractor(params, trainer.graphs)

    o = meta["optimizer"]
    trainer.opt = OptimizerState(
        beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], weight_decay=o["weight_decay"], step=o["step"],
        m={k[len("adam_m/"):]: v for k, v in arrays.items() if k.startswith("adam_m/")},
        v={k[len("adam_v/"):]: v for k, v in arrays.items() if k.startswith("adam_v/")},
    )
    trainer.rng.bit_generator.state = meta["rng"]
    trainer.task_stats = {int(k): (mu, sd) for k, mu, sd in meta["task_stats"]}
    trainer.stage = meta["stage"]

    if meta["store"] is not None:
        store = ExemplarStore(meta["store"]["capacity"])
        pos = 0
        for task, n in meta["store"]["layout"]:
            items = []
            for i in range(pos, pos + n):
                clip = FeatureClip(arrays["store/whole_scene"][i], arrays["store/patches"][i],
                                   float(arrays["store/score"][i]), int(task), int(arrays["store/index"][i]))
                items.append(Exemplar.of(clip))
            store.per_task[int(task)] = items
            pos += n
        trainer.store = store
    extra_arrays = {k[len("extra/"):]: v for k, v in arrays.items() if k.startswith("extra/")}
    return trainer, meta["extra"], extra_arrays


__all__ = ["FORMAT_VERSION", "CheckpointError", "save_checkpoint", "load_checkpoint", "inspect_checkpoint"]
