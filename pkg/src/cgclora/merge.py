"""Per-task weight fusion, the cluster registry and batch-by-task greedy inference."""

from __future__ import annotations

import threading
import time
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import base_digest, load_model, load_tensors, save_tensors
from .data import BOS, DEFAULT_TOKENIZER, wrap_input
from .exceptions import RegistryConflictError, TaskNotRegisteredError
from .model import ToyTransformer, greedy_generate


@dataclass
class MergedWeights:
    task_id: object
    weights: dict = field(default_factory=dict)  # wrapped layer name -> fused matrix

    def __getitem__(self, name):
        return self.weights[name]

    def __iter__(self):
        return iter(self.weights)


def task_weights(model: ToyTransformer, layer, task_id) -> np.ndarray:
    """Normalized expert weights a layer applies to ``task_id`` (same values as training)."""
    row = model.row(task_id)
    return model.weight_table(layer).data[row]


def merge_task_weights(layer, gate, task_id, n_weights_table=None) -> np.ndarray:
    """Fused ``W_j`` for one layer.

    ``gate`` is a TaskGate, or ``None`` for fixed uniform weights;
    ``n_weights_table`` may supply a precomputed row of weights instead.
    """
    if n_weights_table is not None:
        w = np.asarray(n_weights_table)
    elif gate is not None:
        w = gate.table().data[gate.row(task_id)]
    else:
        w = np.full(layer.n_weights, 1.0 / layer.n_weights)
    return layer.merged_weight(task_id, w)


def merge_model(model: ToyTransformer, task_id) -> MergedWeights:
    model.row(task_id)
    return MergedWeights(
        task_id,
        {name: layer.merged_weight(task_id, task_weights(model, layer, task_id)) for name, layer in model.layers.items()},
    )


def retrieve_all(model: ToyTransformer) -> dict:
    return {t: merge_model(model, t) for t in model.task_ids}


def save_merged(merged: MergedWeights, path, meta: dict | None = None) -> Path:
    info = {"kind": "merged", "task_id": merged.task_id}
    info.update(meta or {})
    return save_tensors(path, [(n, "merged", w) for n, w in merged.weights.items()], info)


def load_merged(path) -> MergedWeights:
    meta, tensors = load_tensors(path)
    return MergedWeights(meta["task_id"], {n: arr for n, (_, arr) in tensors.items()})


@dataclass
class ClusterEntry:
    cluster_id: str
    task_ids: list
    model: ToyTransformer
    merged: dict = field(default_factory=dict)
    checkpoint: str | None = None


class AdapterRegistry:
    """One frozen central model plus N clusters of task adapters.

    Merged weights are computed eagerly at registration; ``merge_count`` counts
    fused-weight computations and ``access_counts`` counts every parameter
    lookup per cluster.
    """

    def __init__(self, specs=None, tokenizer=DEFAULT_TOKENIZER):
        self.clusters: "OrderedDict[str, ClusterEntry]" = OrderedDict()
        self.task_to_cluster: dict = {}
        self.specs = {s.task_id: s for s in (specs or [])}
        self.tokenizer = tokenizer
        self.merge_count = 0
        self.access_counts: Counter = Counter()
        self._base_digest: str | None = None
        self._lock = threading.Lock()

    def register_cluster(self, cluster_id, task_ids, checkpoint, merged: dict | None = None) -> None:
        """Add a cluster. ``checkpoint`` is a model or a path to a model checkpoint."""
        with self._lock:
            if cluster_id in self.clusters:
                raise RegistryConflictError(f"cluster {cluster_id!r} is already registered")
            task_ids = list(task_ids)
            clash = [t for t in task_ids if t in self.task_to_cluster]
            if clash or len(set(task_ids)) != len(task_ids):
                raise RegistryConflictError(f"tasks {clash or task_ids} already belong to a cluster")
            path = None
            if isinstance(checkpoint, (str, Path)):
                path = str(checkpoint)
                model, _ = load_model(checkpoint)
            else:
                model = checkpoint
            missing = [t for t in task_ids if t not in model.task_ids]
            if missing:
                raise TaskNotRegisteredError(missing[0], model.task_ids)
            digest = base_digest(model)
            if self._base_digest is not None and digest != self._base_digest:
                raise RegistryConflictError(f"cluster {cluster_id!r} was trained on a different base model")
            self._base_digest = digest
            entry = ClusterEntry(cluster_id, task_ids, model, checkpoint=path)
            for t in task_ids:
                if merged and t in merged:
                    entry.merged[t] = merged[t]
                else:
                    entry.merged[t] = merge_model(model, t)
                    self.merge_count += 1
            self.clusters[cluster_id] = entry
            for t in task_ids:
                self.task_to_cluster[t] = cluster_id

    @property
    def tasks(self) -> list:
        return list(self.task_to_cluster)

    def route(self, task_id, cluster_id=None) -> ClusterEntry:
        owner = self.task_to_cluster.get(task_id)
        if owner is None:
            raise TaskNotRegisteredError(task_id, self.tasks)
        if cluster_id is not None and cluster_id != owner:
            raise TaskNotRegisteredError(task_id, self.clusters[cluster_id].task_ids if cluster_id in self.clusters else [])
        self.access_counts[owner] += 1
        return self.clusters[owner]

    def prompt_for(self, task_id, text: str) -> list[int]:
        spec = self.specs.get(task_id)
        prompt = wrap_input(spec, text) if spec is not None else text
        return [BOS] + self.tokenizer.tokenize(prompt)

    def infer_batch(self, records, max_new_tokens: int = 48, use_merged: bool = True) -> list[dict]:
        """Greedy generation, grouped by task so each task's fused weights are fetched once.

        Records are dicts with ``task_id``, ``text`` and optionally ``cluster_id``.
        Bad records produce ``{"error": ...}`` entries; output order follows input.
        """
        results: list = [None] * len(records)
        groups: "OrderedDict[tuple, list]" = OrderedDict()
        for i, rec in enumerate(records):
            groups.setdefault((rec.get("cluster_id"), rec.get("task_id")), []).append(i)
        for (cluster_id, task_id), idxs in groups.items():
            try:
                entry = self.route(task_id, cluster_id)
            except TaskNotRegisteredError as exc:
                for i in idxs:
                    results[i] = {"task_id": task_id, "cluster_id": cluster_id, "error": str(exc)}
                continue
            merged = entry.merged[task_id].weights if use_merged else None
            for i in idxs:
                start = time.perf_counter()
                try:
                    prompt = self.prompt_for(task_id, records[i]["text"])
                    ids = greedy_generate(entry.model, prompt, task_id, max_new_tokens, merged=merged)
                except Exception as exc:  # per-record failure, batch continues
                    results[i] = {"task_id": task_id, "cluster_id": entry.cluster_id, "error": str(exc)}
                    continue
                results[i] = {
                    "task_id": task_id,
                    "cluster_id": entry.cluster_id,
                    "text": self.tokenizer.detokenize(ids),
                    "token_count": len(ids),
                    "latency_ms": (time.perf_counter() - start) * 1000.0,
                }
        return results


def infer_batch(registry: AdapterRegistry, records, max_new_tokens: int = 48, use_merged: bool = True):
    return registry.infer_batch(records, max_new_tokens=max_new_tokens, use_merged=use_merged)


def register_cluster(registry: AdapterRegistry, cluster_id, task_ids, checkpoint) -> None:
    registry.register_cluster(cluster_id, task_ids, checkpoint)
