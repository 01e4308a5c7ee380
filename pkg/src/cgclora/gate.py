"""Task-motivated gate: expert weights that depend on the task id alone."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, concat, matmul, parameter, softmax
from .exceptions import ConfigurationError, TaskNotRegisteredError

SHARING_MODES = ("single_shared", "per_layer")


class TaskGate:
    """Task embedding ``E`` plus linear maps to common-expert and specific-expert logits.

    ``E`` has one row per task (in ``task_ids`` order), ``WC`` is ``n_common x d_task``
    and ``WS`` is ``1 x d_task``.
    """

    def __init__(self, E, WC, WS, task_ids, name="gate"):
        self.E = parameter(E, name=f"{name}.task_embedding")
        self.WC = parameter(WC, name=f"{name}.common_transform")
        self.WS = parameter(WS, name=f"{name}.specific_transform")
        self.task_ids = list(task_ids)
        self.name = name
        if self.E.shape[0] != len(self.task_ids):
            raise ConfigurationError(f"E has {self.E.shape[0]} rows for {len(self.task_ids)} tasks")
        if self.WC.shape[1] != self.E.shape[1] or self.WS.shape != (1, self.E.shape[1]):
            raise ConfigurationError("gate transforms disagree with the task-embedding width")
        self._rows = {t: i for i, t in enumerate(self.task_ids)}

    @classmethod
    def init(cls, task_ids, n_common, d_task, rng, std=0.02, name="gate"):
        task_ids = list(task_ids)
        E = rng.normal(0.0, std, size=(len(task_ids), d_task))
        WC = rng.normal(0.0, std, size=(n_common, d_task))
        WS = rng.normal(0.0, std, size=(1, d_task))
        return cls(E, WC, WS, task_ids, name=name)

    @property
    def d_task(self) -> int:
        return self.E.shape[1]

    @property
    def n_common(self) -> int:
        return self.WC.shape[0]

    def row(self, task_id) -> int:
        try:
            return self._rows[task_id]
        except KeyError:
            raise TaskNotRegisteredError(task_id, self.task_ids) from None

    def parameters(self) -> list[Tensor]:
        return [self.E, self.WC, self.WS]

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def table(self) -> Tensor:
        """Normalized weights for every registered task, one row each."""
        logits = concat([matmul(self.E, self.WC.transpose()), matmul(self.E, self.WS.transpose())], axis=1)
        return softmax(logits, axis=1)


def gate_weights(task_id, gate: TaskGate) -> Tensor:
    """``softmax([WC e_j, WS e_j])``: common weights first, specific weight last."""
    e = gate.E[gate.row(task_id)]
    logits = concat([matmul(gate.WC, e), matmul(gate.WS, e)], axis=0)
    return softmax(logits)


def uniform_weights(n_common: int) -> Tensor:
    if n_common < 0:
        raise ConfigurationError("n_common must be >= 0")
    return Tensor(np.full(n_common + 1, 1.0 / (n_common + 1)))


def uniform_table(n_tasks: int, n_weights: int) -> Tensor:
    return Tensor(np.full((n_tasks, n_weights), 1.0 / n_weights))


def make_gates(sharing, layer_count, task_ids, n_common, d_task, seed) -> list[TaskGate]:
    """One gate object per wrapped layer; ``single_shared`` repeats the same instance."""
    if sharing not in SHARING_MODES:
        raise ConfigurationError(f"sharing must be one of {SHARING_MODES}, got {sharing!r}")
    if layer_count < 1:
        raise ConfigurationError("layer_count must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if sharing == "single_shared":
        gate = TaskGate.init(task_ids, n_common, d_task, rng)
        return [gate] * layer_count
    return [TaskGate.init(task_ids, n_common, d_task, rng, name=f"gate{i}") for i in range(layer_count)]


def unique_gates(gates) -> list[TaskGate]:
    seen, out = set(), []
    for g in gates:
        if g is not None and id(g) not in seen:
            seen.add(id(g))
            out.append(g)
    return out


def gate_parameter_overhead(n_tasks: int, n_common: int, d_task: int) -> int:
    return n_tasks * d_task + n_common * d_task + d_task


__all__ = [
    "TaskGate",
    "gate_weights",
    "uniform_weights",
    "uniform_table",
    "make_gates",
    "unique_gates",
    "gate_parameter_overhead",
]
