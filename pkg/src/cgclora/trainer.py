"""Masked conditional-LM objective, epoch sampler, optimizers and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autograd import Tensor, backward, log_softmax
from .data import PAD
from .exceptions import ConfigurationError, DegenerateSampleError, NumericError
from .model import ModelConfig, ToyTransformer, build_model

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_steps: int = 2000
    learning_rate: float = 1e-2
    seed: int = 0
    eval_every: int = 500
    eval_samples: int = 20
    optimizer: str = "adam"
    grad_clip: float | None = 1.0
    schedule: str = "constant"
    warmup_steps: int = 0

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ConfigurationError("train.batch_size must be >= 1")
        if self.max_steps < 0:
            raise ConfigurationError("train.max_steps must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigurationError("train.learning_rate must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"train.optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigurationError("train.grad_clip must be > 0 or null")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigurationError(f"train.schedule must be 'constant' or 'cosine', got {self.schedule!r}")
        if self.warmup_steps < 0:
            raise ConfigurationError("train.warmup_steps must be >= 0")
        return self

    def lr_at(self, step: int) -> float:
        """Learning rate for the 0-based ``step``: linear warmup, then constant or cosine decay."""
        if step < self.warmup_steps:
            return self.learning_rate * (step + 1) / self.warmup_steps
        if self.schedule == "constant" or self.max_steps <= self.warmup_steps:
            return self.learning_rate
        frac = (step - self.warmup_steps) / (self.max_steps - self.warmup_steps)
        return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * frac))


def clip_gradients(params, max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if norm > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad *= max_norm / norm
    return norm


def lm_loss(logits: Tensor, targets, loss_mask) -> Tensor:
    """Mean negative log-likelihood over the masked target positions."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(loss_mask, dtype=bool)
    if logits.shape[:-1] != targets.shape or mask.shape != targets.shape:
        raise ValueError(f"logits {logits.shape} do not line up with targets {targets.shape}")
    idx = np.nonzero(mask)
    if len(idx[0]) == 0:
        raise DegenerateSampleError("loss mask selects no target tokens")
    logp = log_softmax(logits, axis=-1)
    picked = logp[idx + (targets[idx],)]
    return -picked.sum() * (1.0 / len(idx[0]))


def collate(samples) -> tuple[np.ndarray, np.ndarray, np.ndarray, list]:
    """Right-padded (inputs, targets, mask, task_ids) for next-token prediction."""
    T = max(len(s.token_ids) for s in samples) - 1
    inputs = np.full((len(samples), T), PAD, dtype=np.int64)
    targets = np.full((len(samples), T), PAD, dtype=np.int64)
    mask = np.zeros((len(samples), T), dtype=bool)
    for i, s in enumerate(samples):
        ids = np.asarray(s.token_ids)
        n = len(ids) - 1
        inputs[i, :n] = ids[:-1]
        targets[i, :n] = ids[1:]
        mask[i, :n] = np.asarray(s.loss_mask[1:], dtype=bool)
    return inputs, targets, mask, [s.task_id for s in samples]


def sample_batches(datasets, batch_size: int, seed):
    """Yield one epoch of mixed-task batches: pooled, shuffled, each sample once."""
    pool = [s for task in (datasets.values() if isinstance(datasets, dict) else datasets) for s in task]
    if not pool:
        raise ConfigurationError("no training samples to draw batches from")
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    order = rng.permutation(len(pool))
    for start in range(0, len(pool), batch_size):
        yield [pool[i] for i in order[start : start + batch_size]]


class SGD:
    def __init__(self, params, lr):
        self.params, self.lr = list(params), lr
        self.state = {}

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params, self.lr, self.betas, self.eps = list(params), lr, betas, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainState:
    step: int = 0
    losses: list = field(default_factory=list)
    records: list = field(default_factory=list)
    gradient_seen: dict = field(default_factory=dict)

    @property
    def final_loss(self) -> float | None:
        return self.losses[-1] if self.losses else None


def _diagnostics(model, step, task_ids):
    mix = {str(t): task_ids.count(t) for t in sorted(set(task_ids))}
    norms = {name: float(np.linalg.norm(t.data)) for name, _, t in model.named_trainable()}
    return {"step": step, "batch_task_mix": mix, "parameter_norms": norms}


def _check_frozen(params, frozen_ids) -> None:
    if any(id(p) in frozen_ids for p in params):
        raise ConfigurationError("a frozen base tensor leaked into the trainable set")


def train(model: ToyTransformer, datasets, config: TrainConfig, evaluator=None, sink=None) -> TrainState:
    """Run the training loop; only ``model.trainable_parameters()`` are updated.

    ``datasets`` maps task id to training samples. ``evaluator(model)`` (optional)
    returns ``{task_id: (metric_name, value)}`` every ``eval_every`` steps.
    ``sink`` receives each metrics record as a dict.
    """
    config.validate()
    params = model.trainable_parameters()
    frozen_ids = {id(t) for t in [model.tok_emb, model.pos_emb]} | {id(l.W0) for l in model.layers.values()}
    _check_frozen(params, frozen_ids)
    opt = Adam(params, config.learning_rate) if config.optimizer == "adam" else SGD(params, config.learning_rate)
    rng = np.random.default_rng([config.seed, 7])
    state = TrainState(gradient_seen={id(p): False for p in params})
    emit = sink or (lambda rec: None)

    while state.step < config.max_steps:
        for batch in sample_batches(datasets, config.batch_size, rng):
            if state.step >= config.max_steps:
                break
            inputs, targets, mask, task_ids = collate(batch)
            for p in params:
                p.grad = None
            try:
                loss = lm_loss(model.forward(inputs, task_ids), targets, mask)
            except NumericError as exc:
                diag = _diagnostics(model, state.step, task_ids)
                raise NumericError(f"{exc} at step {state.step}: {json.dumps(diag)}") from exc
            value = float(loss.data)
            if not math.isfinite(value):
                diag = _diagnostics(model, state.step, task_ids)
                raise NumericError(f"non-finite loss at step {state.step}: {json.dumps(diag)}")
            backward(loss)
            for p in params:
                if p.grad is not None and np.any(p.grad != 0):
                    state.gradient_seen[id(p)] = True
            if config.grad_clip is not None:
                clip_gradients(params, config.grad_clip)
            lr = config.lr_at(state.step)
            opt.lr = lr
            _check_frozen(opt.params, frozen_ids)
            opt.step()
            state.step += 1
            state.losses.append(value)
            rec = {"step": state.step, "loss": value, "lr": lr}
            state.records.append(rec)
            emit(rec)
            if evaluator is not None and config.eval_every and state.step % config.eval_every == 0:
                for task_id, (metric, val) in evaluator(model).items():
                    rec = {"step": state.step, "task": task_id, "metric_name": metric, "value": val}
                    state.records.append(rec)
                    emit(rec)
            if state.step % 100 == 0:
                log.info("step %d loss %.4f", state.step, value)
    return state


def variant_config(base: ModelConfig, variant: str) -> ModelConfig:
    return replace(base, adapter=replace(base.adapter, variant=variant))


def run_variant(variant: str, model_config: ModelConfig, datasets, train_config: TrainConfig, evaluator=None, sink=None):
    """Build and train one ablation variant; returns ``(model, state)``."""
    model = build_model(variant_config(model_config, variant))
    state = train(model, datasets, train_config, evaluator=evaluator, sink=sink)
    return model, state


def config_dict(cfg) -> dict:
    return asdict(cfg)
