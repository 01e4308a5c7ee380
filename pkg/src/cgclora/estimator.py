"""scikit-learn style front end: ``fit`` on (task, text) pairs, ``predict`` generated answers."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_consistent_length

from .data import DEFAULT_TASKS, DEFAULT_TOKENIZER, BOS, Sample, encode_sample, wrap_input
from .exceptions import ConfigurationError, NotFittedError, TaskNotRegisteredError
from .merge import merge_model
from .model import AdapterConfig, ModelConfig, build_model, greedy_generate
from .trainer import TrainConfig, train


def check_records(X) -> tuple[list, list[str]]:
    """Split ``X`` into task ids and raw texts.

    Accepts dicts with ``task_id``/``text`` keys or ``(task_id, text)`` pairs.
    """
    if isinstance(X, np.ndarray) and X.ndim != 2:
        raise ValueError(f"expected a 2-column array of (task_id, text), got shape {X.shape}")
    task_ids, texts = [], []
    for i, rec in enumerate(X):
        if isinstance(rec, dict):
            try:
                t, text = rec["task_id"], rec["text"]
            except KeyError as exc:
                raise ValueError(f"record {i} lacks {exc.args[0]!r}") from None
        else:
            if len(rec) != 2:
                raise ValueError(f"record {i} must be a (task_id, text) pair")
            t, text = rec
        if not isinstance(text, str):
            raise ValueError(f"record {i}: text must be a string, got {type(text).__name__}")
        task_ids.append(t.item() if isinstance(t, np.generic) else t)
        texts.append(text)
    if not texts:
        raise ValueError("X is empty")
    return task_ids, texts


def check_targets(y) -> list[str]:
    y = list(y)
    bad = [i for i, v in enumerate(y) if not isinstance(v, str)]
    if bad:
        raise ValueError(f"targets must be strings; entry {bad[0]} is {type(y[bad[0]]).__name__}")
    return y


class CgcLoraLM(BaseEstimator):
    """Toy transformer with multi-task low-rank experts, trained on prompt/answer text.

    ``X`` holds ``(task_id, raw_text)`` pairs; ``y`` the answer sentences.
    Raw text is wrapped in the task's prompt template before training and
    generation. ``tasks`` defaults to the built-in synthetic suite.
    """

    def __init__(
        self,
        variant="cgc_lora",
        r_total=16,
        alpha=16.0,
        n_common=4,
        d_task=8,
        d_model=32,
        n_layers=2,
        n_heads=2,
        d_ff=64,
        base_init_std=0.18,
        out_init_std=0.5,
        max_steps=2000,
        batch_size=64,
        learning_rate=1e-2,
        max_new_tokens=48,
        seed=0,
        tasks=None,
    ):
        self.variant = variant
        self.r_total = r_total
        self.alpha = alpha
        self.n_common = n_common
        self.d_task = d_task
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.base_init_std = base_init_std
        self.out_init_std = out_init_std
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.max_new_tokens = max_new_tokens
        self.seed = seed
        self.tasks = tasks

    def _specs(self) -> dict:
        return {s.task_id: s for s in (self.tasks if self.tasks is not None else DEFAULT_TASKS)}

    def _model_config(self, task_ids) -> ModelConfig:
        adapter = AdapterConfig(
            r_total=self.r_total, alpha=self.alpha, n_common=self.n_common, d_task=self.d_task, variant=self.variant
        )
        return ModelConfig(
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            base_init_std=self.base_init_std,
            out_init_std=self.out_init_std,
            adapter=adapter,
            task_ids=list(task_ids),
            seed=self.seed,
        )

    def _prompt(self, task_id, text) -> str:
        spec = self._specs().get(task_id)
        if spec is None:
            raise TaskNotRegisteredError(task_id, sorted(self._specs()))
        return wrap_input(spec, text)

    def fit(self, X, y):
        task_ids, texts = check_records(X)
        y = check_targets(y)
        check_consistent_length(texts, y)
        order = list(dict.fromkeys(task_ids))  # first-appearance order fixes the gate's row layout
        datasets = {t: [] for t in order}
        for t, text, target in zip(task_ids, texts, y):
            s = Sample(task_id=t, raw_input=text, wrapped_input=self._prompt(t, text), target_text=target, gold=target)
            datasets[t].append(encode_sample(s))
        self.model_ = build_model(self._model_config(order))
        self.train_state_ = train(
            self.model_, datasets, TrainConfig(batch_size=self.batch_size, max_steps=self.max_steps,
                                               learning_rate=self.learning_rate, seed=self.seed, eval_every=0)
        )
        self.task_ids_ = order
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")

    def predict(self, X) -> np.ndarray:
        """Greedy answers, computed task by task with fused per-task weights."""
        self._check_fitted()
        task_ids, texts = check_records(X)
        out = np.empty(len(texts), dtype=object)
        merged = {}
        for i, (t, text) in enumerate(zip(task_ids, texts)):
            if t not in self.task_ids_:
                raise TaskNotRegisteredError(t, self.task_ids_)
            if t not in merged:
                merged[t] = merge_model(self.model_, t).weights
            prompt = [BOS] + DEFAULT_TOKENIZER.tokenize(self._prompt(t, text))
            ids = greedy_generate(self.model_, prompt, t, self.max_new_tokens, merged=merged[t])
            out[i] = DEFAULT_TOKENIZER.detokenize(ids)
        return out

    def score(self, X, y) -> float:
        """Exact-sequence accuracy of :meth:`predict` against ``y``."""
        y = check_targets(y)
        pred = self.predict(X)
        check_consistent_length(pred, y)
        return float(np.mean([p == t for p, t in zip(pred, y)]))

    def fit_from_corpus(self, corpus, split="train"):
        """Fit on a ``{task_id: {split: [Sample]}}`` corpus as produced by the data module."""
        if not corpus:
            raise ConfigurationError("empty corpus")
        X = [(s.task_id, s.raw_input) for t in corpus for s in corpus[t][split]]
        y = [s.target_text for t in corpus for s in corpus[t][split]]
        return self.fit(X, y)
