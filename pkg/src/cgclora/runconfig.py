"""JSON run configuration: one versioned file drives every CLI subcommand.

Schema (every key optional, unknown keys rejected)::

    {
      "version": 1,
      "variant": "cgc_lora",
      "model":  {vocab_size, d_model, n_layers, n_heads, d_ff, max_seq_len,
                 base_init_std, out_init_std, seed,
                 "adapter": {r_total, alpha, n_common, d_task, sharing,
                             rank_overrides, wrap_output}},
      "train":  {batch_size, max_steps, learning_rate, seed, eval_every,
                 eval_samples, optimizer, grad_clip, schedule, warmup_steps},
      "data":   {suite_seed, sizes: {train, val, test}, tasks: [names]},
      "eval":   {split, samples, max_new_tokens},
      "clusters": {cluster_id: [task names or ids]},
      "sweep":  {axis, values, expert_rank, n_common, parallel}
    }

Task ids are not configured directly; they follow from the corpus (or the
selected cluster).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .data import DEFAULT_TASKS, SPLITS
from .exceptions import ConfigurationError
from .model import VARIANTS, AdapterConfig, ModelConfig
from .trainer import TrainConfig

CONFIG_VERSION = 1
SWEEP_AXES = ("n_common", "expert_rank")
SWEEP_GRIDS = {"n_common": [2, 4, 8, 16], "expert_rank": [1, 2, 4]}


@dataclass
class DataConfig:
    suite_seed: int = 0
    sizes: dict = field(default_factory=lambda: {"train": 1000, "val": 100, "test": 100})
    tasks: list = field(default_factory=lambda: [t.name for t in DEFAULT_TASKS])


@dataclass
class EvalConfig:
    split: str = "test"
    samples: int | None = None
    max_new_tokens: int = 48


@dataclass
class SweepConfig:
    axis: str = "n_common"
    values: list | None = None
    expert_rank: int = 2
    n_common: int = 4
    parallel: int = 1


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    variant: str = "cgc_lora"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    clusters: dict = field(default_factory=dict)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def validate(self) -> "RunConfig":
        if self.version != CONFIG_VERSION:
            raise ConfigurationError(f"version: expected {CONFIG_VERSION}, got {self.version!r}")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        known = {t.name for t in DEFAULT_TASKS}
        bad = [t for t in self.data.tasks if t not in known]
        if bad or not self.data.tasks:
            raise ConfigurationError(f"data.tasks must name tasks from {sorted(known)}, got {self.data.tasks!r}")
        for split in SPLITS:
            n = self.data.sizes.get(split)
            if not isinstance(n, int) or isinstance(n, bool) or n < 1:
                raise ConfigurationError(f"data.sizes.{split} must be a positive integer, got {n!r}")
        extra = set(self.data.sizes) - set(SPLITS)
        if extra:
            raise ConfigurationError(f"data.sizes has unknown splits {sorted(extra)}")
        if self.eval.split not in SPLITS:
            raise ConfigurationError(f"eval.split must be one of {SPLITS}")
        if self.eval.samples is not None and self.eval.samples < 1:
            raise ConfigurationError("eval.samples must be >= 1 or null")
        if self.eval.max_new_tokens < 1:
            raise ConfigurationError("eval.max_new_tokens must be >= 1")
        if self.sweep.axis not in SWEEP_AXES:
            raise ConfigurationError(f"sweep.axis must be one of {SWEEP_AXES}")
        if self.sweep.expert_rank < 1 or self.sweep.n_common < 0 or self.sweep.parallel < 1:
            raise ConfigurationError("sweep.expert_rank and sweep.parallel must be >= 1, sweep.n_common >= 0")
        for cid, members in self.clusters.items():
            if not isinstance(members, list) or not members:
                raise ConfigurationError(f"clusters.{cid} must be a non-empty list of tasks")
        self.train.validate()
        self.model_config([0]).validate()
        return self

    def model_config(self, task_ids) -> ModelConfig:
        """The model section with the run's variant and the given task ids filled in."""
        return replace(self.model, task_ids=list(task_ids), adapter=replace(self.model.adapter, variant=self.variant))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"].pop("task_ids")
        d["model"]["adapter"].pop("variant")
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# task ids come from the corpus and the variant is a top-level key
_EXCLUDED = {ModelConfig: {"task_ids"}, AdapterConfig: {"variant"}}
_NESTED = {
    RunConfig: {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "eval": EvalConfig, "sweep": SweepConfig},
    ModelConfig: {"adapter": AdapterConfig},
}


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path or 'config'} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)} - _EXCLUDED.get(cls, set())
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigurationError(f"unknown config key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get(cls, {}).get(key)
        kwargs[key] = _build(sub, value, f"{path}.{key}" if path else key) if sub else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"{path or 'config'}: {exc}") from None


def parse_config(data: dict) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def load_config(path=None) -> tuple[RunConfig, str]:
    """Return the parsed config and its verbatim text (defaults when ``path`` is None)."""
    if path is None:
        cfg = RunConfig().validate()
        return cfg, cfg.dumps()
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: not valid JSON ({exc})") from None
    return parse_config(data), text
