"""Low-rank adapters: vanilla LoRA and the CGC-LoRA expert layer.

Shape convention: ``x`` has ``d_in`` entries, ``W0`` is ``d_out x d_in``,
``B`` is ``d_out x r`` and ``A`` is ``r x d_in`` so that
``h = W0 x + (alpha / r) B A x`` type-checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, as_tensor, concat, matmul, parameter
from .exceptions import ConfigurationError, ContractError, DimensionError, TaskNotRegisteredError

INIT_STD = 0.02


@dataclass
class LoraAdapter:
    """A paired ``(B, A)`` low-rank update, also used as a single CGC expert."""

    B: Tensor
    A: Tensor
    alpha: float = 1.0

    def __post_init__(self):
        if self.B.shape[1] != self.A.shape[0]:
            raise DimensionError(f"rank mismatch: B {self.B.shape} vs A {self.A.shape}")

    @property
    def r(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    def delta(self) -> np.ndarray:
        return self.B.data @ self.A.data

    def parameters(self) -> list[Tensor]:
        return [self.A, self.B]


def _expert(d_in: int, d_out: int, r: int, rng: np.random.Generator, name: str, alpha=1.0):
    A = parameter(rng.normal(0.0, INIT_STD, size=(r, d_in)), name=f"{name}.A")
    B = parameter(np.zeros((d_out, r)), name=f"{name}.B")
    return LoraAdapter(B=B, A=A, alpha=alpha)


def init_lora(d_in: int, d_out: int, r: int, alpha: float, seed) -> LoraAdapter:
    """Gaussian ``A`` (std 0.02), zero ``B``; deterministic for a given seed."""
    if r < 1 or r > min(d_in, d_out):
        raise ConfigurationError(f"rank {r} must lie in [1, min(d_in, d_out)={min(d_in, d_out)}]")
    if alpha <= 0:
        raise ConfigurationError("alpha must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return _expert(d_in, d_out, r, rng, "lora", alpha=alpha)


def lora_forward(x, W0, adapter: LoraAdapter) -> Tensor:
    x, W0 = as_tensor(x), as_tensor(W0)
    if W0.shape != (adapter.d_out, adapter.d_in) or x.shape[-1] != adapter.d_in:
        raise DimensionError(
            f"shapes disagree: x {x.shape}, W0 {W0.shape}, A {adapter.A.shape}, B {adapter.B.shape}"
        )
    base = matmul(x, Tensor(W0.data.T))
    low = matmul(matmul(x, adapter.A.transpose()), adapter.B.transpose())
    return base + low * (adapter.alpha / adapter.r)


def split_ranks(r_total: int, n_experts: int, overrides=None) -> list[int]:
    if n_experts < 1:
        raise ConfigurationError("need at least one expert")
    if overrides is None:
        if r_total % n_experts:
            raise ConfigurationError(
                f"total rank {r_total} does not split evenly over {n_experts} experts; "
                "pass explicit rank overrides"
            )
        return [r_total // n_experts] * n_experts
    ranks = [int(v) for v in overrides]
    if len(ranks) != n_experts:
        raise ConfigurationError(f"expected {n_experts} rank overrides, got {len(ranks)}")
    if any(v < 1 for v in ranks):
        raise ConfigurationError(f"every expert rank must be >= 1, got {ranks}")
    if sum(ranks) != r_total:
        raise ConfigurationError(f"rank overrides sum to {sum(ranks)}, expected {r_total}")
    return ranks


@dataclass
class ExpertBank:
    """``common`` experts shared by every task plus one ``specific`` expert per task.

    Ranks are listed common-first, then specifics in task order.
    """

    common: list[LoraAdapter]
    specific: dict = field(default_factory=dict)

    @classmethod
    def build(cls, d_in, d_out, n_common, task_ids, ranks, rng, prefix="bank"):
        task_ids = list(task_ids)
        if len(ranks) != n_common + len(task_ids):
            raise ConfigurationError(
                f"{len(ranks)} ranks given for {n_common} common + {len(task_ids)} specific experts"
            )
        common = [
            _expert(d_in, d_out, ranks[i], rng, f"{prefix}.common{i}") for i in range(n_common)
        ]
        specific = {
            t: _expert(d_in, d_out, ranks[n_common + k], rng, f"{prefix}.task{t}")
            for k, t in enumerate(task_ids)
        }
        return cls(common=common, specific=specific)

    @property
    def n_common(self) -> int:
        return len(self.common)

    @property
    def n_specific(self) -> int:
        return len(self.specific)

    @property
    def task_ids(self) -> list:
        return list(self.specific)

    @property
    def experts(self) -> list[LoraAdapter]:
        return self.common + list(self.specific.values())

    @property
    def ranks(self) -> list[int]:
        return [e.r for e in self.experts]

    def parameters(self) -> list[Tensor]:
        return [p for e in self.experts for p in e.parameters()]

    def roles(self) -> list[tuple[str, LoraAdapter]]:
        out = [(f"common:{i}", e) for i, e in enumerate(self.common)]
        out += [(f"task:{t}", e) for t, e in self.specific.items()]
        return out


def expert_param_count(bank: ExpertBank, d_in: int, d_out: int) -> int:
    return sum(r * (d_in + d_out) for r in bank.ranks)


class CgcLoraLayer:
    """A frozen base matrix carrying a bank of task-common and task-specific experts.

    ``gate_ref`` indexes the gate that serves this layer; ``None`` means the layer
    is driven by fixed weights (uniform, or ``[1]`` for the single-expert LoRA form).
    """

    def __init__(self, W0, bank: ExpertBank, alpha: float, gate_ref=None, name: str = "layer"):
        W0 = np.array(W0, dtype=np.float64)
        self.W0 = Tensor(W0, requires_grad=False, name=f"{name}.W0")
        self.bank = bank
        self.alpha = float(alpha)
        self.r = sum(bank.ranks)
        self.gate_ref = gate_ref
        self.name = name
        d_out, d_in = W0.shape
        for e in bank.experts:
            if e.d_in != d_in or e.d_out != d_out:
                raise DimensionError(f"expert shape {e.B.shape}x{e.A.shape} does not fit W0 {W0.shape}")

    @property
    def d_in(self) -> int:
        return self.W0.shape[1]

    @property
    def d_out(self) -> int:
        return self.W0.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.r

    @property
    def n_weights(self) -> int:
        return self.bank.n_common + (1 if self.bank.n_specific else 0)

    def parameters(self) -> list[Tensor]:
        return self.bank.parameters()

    def check_weights(self, weights) -> np.ndarray:
        w = np.asarray(weights.data if isinstance(weights, Tensor) else weights)
        if w.shape[-1] != self.n_weights:
            raise ContractError(f"expected {self.n_weights} gate weights, got {w.shape[-1]}")
        return w

    def base(self, x: Tensor) -> Tensor:
        return matmul(x, Tensor(self.W0.data.T))

    def forward_mixed(self, x: Tensor, task_rows: np.ndarray, weight_table: Tensor, task_ids) -> Tensor:
        """Batched forward for samples of mixed tasks.

        ``x`` is ``(batch, seq, d_in)``; ``weight_table`` holds one gate-weight row
        per task in ``task_ids`` order and ``task_rows`` picks each sample's row.
        All experts are stacked along the rank axis; each sample scales the rank
        columns of experts it does not use by exactly zero, so other tasks'
        specific experts contribute neither output nor gradient.
        """
        self.check_weights(weight_table)
        experts = self.bank.experts
        A = concat([e.A for e in experts], axis=0)
        Bm = concat([e.B for e in experts], axis=1)
        n_c = self.bank.n_common
        spec_ids = self.bank.task_ids
        # column of the weight table used by each rank slot
        cols, owner = [], []
        for i, e in enumerate(experts):
            cols += [min(i, n_c)] * e.r
            owner += [None if i < n_c else spec_ids[i - n_c]] * e.r
        cols = np.asarray(cols)
        scale_rows = weight_table[:, cols]  # (n_tasks, R)
        mask = np.ones((len(task_ids), len(cols)))
        for k, t in enumerate(task_ids):
            for c, o in enumerate(owner):
                if o is not None and o != t:
                    mask[k, c] = 0.0
        per_sample = (scale_rows * (mask * self.scale))[task_rows]  # (batch, R), alpha/r folded in
        low = matmul(x, A.transpose()) * per_sample.reshape(len(task_rows), 1, -1)
        return self.base(x) + matmul(low, Bm.transpose())

    def merged_weight(self, task_id, weights) -> np.ndarray:
        """Fused matrix ``W0 + (alpha/r) * sum_k w_k B_k A_k`` for one task."""
        w = self.check_weights(weights).reshape(-1)
        delta = np.zeros_like(self.W0.data)
        for i, e in enumerate(self.bank.common):
            delta += w[i] * (e.B.data @ e.A.data)
        if self.bank.n_specific:
            if task_id not in self.bank.specific:
                raise TaskNotRegisteredError(task_id, self.bank.task_ids)
            e = self.bank.specific[task_id]
            delta += w[-1] * (e.B.data @ e.A.data)
        return self.W0.data + self.scale * delta


def cgc_forward(x, task_id, layer: CgcLoraLayer, weights) -> Tensor:
    """Single-task CGC-LoRA forward, written expert by expert.

    ``weights`` lists the common-expert weights first and the task's own
    specific-expert weight last (absent when the bank has no specific experts).
    """
    x = as_tensor(x)
    if x.shape[-1] != layer.d_in:
        raise DimensionError(f"input width {x.shape[-1]} does not match d_in={layer.d_in}")
    if layer.bank.n_specific and task_id not in layer.bank.specific:
        raise TaskNotRegisteredError(task_id, layer.bank.task_ids)
    layer.check_weights(weights)
    w = as_tensor(weights)
    acc = None
    for i, e in enumerate(layer.bank.common):
        term = matmul(matmul(x, e.A.transpose()), e.B.transpose()) * w[i]
        acc = term if acc is None else acc + term
    if layer.bank.n_specific:
        e = layer.bank.specific[task_id]
        term = matmul(matmul(x, e.A.transpose()), e.B.transpose()) * w[-1]
        acc = term if acc is None else acc + term
    out = layer.base(x)
    return out if acc is None else out + acc * layer.scale
