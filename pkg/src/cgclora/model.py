"""A small decoder-only transformer whose projections carry CGC-LoRA layers."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .adapters import CgcLoraLayer, ExpertBank, split_ranks
from .autograd import Tensor, gelu, layer_norm, masked_fill, matmul, no_grad, softmax
from .exceptions import ConfigurationError, LengthError, TaskNotRegisteredError
from .gate import SHARING_MODES, make_gates, uniform_table, unique_gates

VARIANTS = ("cgc_lora", "lora_full", "wo_gate", "multi_gate")
PROJECTIONS = ("q", "k", "v", "o", "ff1", "ff2")


@dataclass
class AdapterConfig:
    r_total: int = 16
    alpha: float = 16.0
    n_common: int = 4
    d_task: int = 8
    sharing: str = "single_shared"
    rank_overrides: list | None = None
    variant: str = "cgc_lora"
    wrap_output: bool = False


@dataclass
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    max_seq_len: int = 128
    base_init_std: float = 0.18
    out_init_std: float = 0.5
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    task_ids: list = field(default_factory=lambda: [0, 1, 2, 3])
    seed: int = 0

    def validate(self) -> "ModelConfig":
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"model.{name} must be >= 1")
        if self.base_init_std <= 0 or self.out_init_std <= 0:
            raise ConfigurationError("model.base_init_std and model.out_init_std must be > 0")
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        a = self.adapter
        if a.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {a.variant!r}")
        if a.sharing not in SHARING_MODES:
            raise ConfigurationError(f"sharing must be one of {SHARING_MODES}, got {a.sharing!r}")
        if a.r_total < 1 or a.alpha <= 0:
            raise ConfigurationError("adapter.r_total must be >= 1 and adapter.alpha > 0")
        if not self.task_ids or len(set(self.task_ids)) != len(self.task_ids):
            raise ConfigurationError("task_ids must be a non-empty list of distinct ids")
        if a.variant != "lora_full" and a.n_common < 0:
            raise ConfigurationError("adapter.n_common must be >= 0")
        return self

    def effective(self) -> "ModelConfig":
        """Resolve the variant switch into concrete expert/gate settings."""
        a = self.adapter
        if a.variant == "lora_full":
            a = replace(a, n_common=1, rank_overrides=None)
        elif a.variant == "multi_gate":
            a = replace(a, sharing="per_layer")
        return replace(self, adapter=a)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        adapter = AdapterConfig(**d.pop("adapter", {}))
        return cls(adapter=adapter, **d)


class ToyTransformer:
    """Pre-norm transformer with frozen random base weights and trainable adapters."""

    def __init__(self, config: ModelConfig):
        self.config = config.validate()
        eff = config.effective()
        a = eff.adapter
        self.variant = a.variant
        self.task_ids = list(config.task_ids)
        self._rows = {t: i for i, t in enumerate(self.task_ids)}
        rng = np.random.default_rng(config.seed)
        std = config.base_init_std
        d, f = config.d_model, config.d_ff

        def frozen(shape, name):
            return Tensor(rng.normal(0.0, std, size=shape), name=name)

        self.tok_emb = Tensor(rng.normal(0.0, 1.0, size=(config.vocab_size, d)), name="tok_emb")
        self.pos_emb = Tensor(rng.normal(0.0, 1.0, size=(config.max_seq_len, d)), name="pos_emb")
        shapes = {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d), "ff1": (f, d), "ff2": (d, f)}
        base = {}
        for layer in range(config.n_layers):
            for p in PROJECTIONS:
                base[f"blocks.{layer}.{p}"] = frozen(shapes[p], f"blocks.{layer}.{p}.W0").data
        # untied on purpose: a tied frozen readout biases every position toward repeating its own token
        base["out"] = rng.normal(0.0, config.out_init_std, size=(config.vocab_size, d))

        wrapped_names = [n for n in base if n != "out" or a.wrap_output]
        adapter_rng = np.random.default_rng([config.seed, 1])
        if a.variant == "lora_full":
            n_common, spec_tasks = 1, []
        else:
            n_common, spec_tasks = a.n_common, self.task_ids
        ranks = split_ranks(a.r_total, n_common + len(spec_tasks), a.rank_overrides)
        self.layers: dict[str, CgcLoraLayer] = {}
        for name in wrapped_names:
            W0 = base[name]
            if min(W0.shape) < max(ranks):
                raise ConfigurationError(f"expert rank {max(ranks)} exceeds dimensions of {name} {W0.shape}")
            bank = ExpertBank.build(W0.shape[1], W0.shape[0], n_common, spec_tasks, ranks, adapter_rng, prefix=name)
            self.layers[name] = CgcLoraLayer(W0, bank, a.alpha, gate_ref=None, name=name)
        self.out = self.layers.get("out") or Tensor(base["out"], name="out.W0")

        self.gates = []
        if a.variant in ("cgc_lora", "multi_gate"):
            self.gates = make_gates(
                a.sharing, len(self.layers), self.task_ids, n_common, a.d_task, np.random.default_rng([config.seed, 2])
            )
            for k, layer in enumerate(self.layers.values()):
                layer.gate_ref = k

    # bookkeeping -----------------------------------------------------------
    def row(self, task_id) -> int:
        try:
            return self._rows[task_id]
        except KeyError:
            raise TaskNotRegisteredError(task_id, self.task_ids) from None

    def gate_for(self, layer: CgcLoraLayer):
        return None if layer.gate_ref is None else self.gates[layer.gate_ref]

    def base_weights(self) -> dict[str, np.ndarray]:
        out = {"tok_emb": self.tok_emb.data, "pos_emb": self.pos_emb.data}
        for name, layer in self.layers.items():
            out[name] = layer.W0.data
        if isinstance(self.out, Tensor):
            out["out"] = self.out.data
        return out

    def weight_table(self, layer: CgcLoraLayer) -> Tensor:
        """Normalized expert weights for every task, one row per task."""
        gate = self.gate_for(layer)
        if gate is not None:
            return gate.table()
        return uniform_table(len(self.task_ids), layer.n_weights)

    # forward -------------------------------------------------------------
    def _project(self, name, x, task_rows, tables, merged, adapters):
        layer = self.layers.get(name)
        if layer is None:
            return matmul(x, Tensor(self.out.data.T))
        if merged is not None:
            return matmul(x, Tensor(merged[name].T))
        if not adapters:
            return layer.base(x)
        return layer.forward_mixed(x, task_rows, tables[name], self.task_ids)

    def forward(self, tokens, task_ids, merged=None, adapters: bool = True) -> Tensor:
        """Logits of shape ``(batch, seq, vocab)``.

        ``merged`` maps wrapped-layer names to fused weight matrices of a single
        task and replaces the expert computation entirely.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        bsz, T = tokens.shape
        if T > self.config.max_seq_len:
            raise LengthError(f"sequence length {T} exceeds max_seq_len={self.config.max_seq_len}")
        if np.ndim(task_ids) == 0:
            task_ids = [task_ids] * bsz
        task_rows = np.array([self.row(t) for t in task_ids], dtype=np.int64)
        tables = {}
        if merged is None and adapters:
            cache = {}
            for name, layer in self.layers.items():
                gate = self.gate_for(layer)
                key = id(gate) if gate is not None else ("fixed", layer.n_weights)
                if key not in cache:
                    cache[key] = self.weight_table(layer)
                tables[name] = cache[key]
        cfg = self.config
        H = cfg.n_heads
        dh = cfg.d_model // H
        x = Tensor(self.tok_emb.data[tokens] + self.pos_emb.data[:T][None])
        causal = np.triu(np.ones((T, T), dtype=bool), k=1)
        proj = lambda name, h: self._project(name, h, task_rows, tables, merged, adapters)
        for layer in range(cfg.n_layers):
            pre = f"blocks.{layer}"
            h = layer_norm(x)
            q = proj(f"{pre}.q", h).reshape(bsz, T, H, dh).transpose(0, 2, 1, 3)
            k = proj(f"{pre}.k", h).reshape(bsz, T, H, dh).transpose(0, 2, 3, 1)
            v = proj(f"{pre}.v", h).reshape(bsz, T, H, dh).transpose(0, 2, 1, 3)
            scores = masked_fill(matmul(q, k) * (1.0 / np.sqrt(dh)), causal, -np.inf)
            att = matmul(softmax(scores, axis=-1), v).transpose(0, 2, 1, 3).reshape(bsz, T, cfg.d_model)
            x = x + proj(f"{pre}.o", att)
            h = layer_norm(x)
            x = x + proj(f"{pre}.ff2", gelu(proj(f"{pre}.ff1", h)))
        return proj("out", layer_norm(x))

    # parameters ------------------------------------------------------------
    def trainable_parameters(self) -> list[Tensor]:
        params = [p for layer in self.layers.values() for p in layer.parameters()]
        for g in unique_gates(self.gates):
            params += g.parameters()
        return params

    def named_trainable(self) -> list[tuple[str, str, Tensor]]:
        """``(name, role, tensor)`` triples for every trainable tensor."""
        out = []
        for name, layer in self.layers.items():
            for role, e in layer.bank.roles():
                out.append((f"{name}.{role}.A", role, e.A))
                out.append((f"{name}.{role}.B", role, e.B))
        for i, g in enumerate(unique_gates(self.gates)):
            out.append((f"gate{i}.E", "task_embedding", g.E))
            out.append((f"gate{i}.WC", "common_transform", g.WC))
            out.append((f"gate{i}.WS", "specific_transform", g.WS))
        return out

    def n_trainable(self) -> int:
        return sum(p.data.size for p in self.trainable_parameters())


def build_model(config: ModelConfig) -> ToyTransformer:
    return ToyTransformer(config)


def forward_lm(model: ToyTransformer, tokens, task_id, merged=None) -> Tensor:
    """Causal logits ``(len, vocab)`` for a single sequence."""
    return model.forward(np.asarray(tokens)[None, :], [task_id], merged=merged)[0]


def trainable_parameters(model: ToyTransformer) -> list[Tensor]:
    return model.trainable_parameters()


def greedy_generate(model, prompt, task_id, max_new_tokens=48, merged=None, eos=2) -> list[int]:
    """Greedy continuation of one prompt; stops at EOS or the length limit."""
    seq = list(prompt)
    out = []
    with no_grad():
        for _ in range(max_new_tokens):
            if len(seq) >= model.config.max_seq_len:
                break
            logits = model.forward(np.asarray(seq)[None, :], [task_id], merged=merged)
            nxt = int(np.argmax(logits.data[0, -1]))
            if nxt == eos:
                break
            out.append(nxt)
            seq.append(nxt)
    return out
