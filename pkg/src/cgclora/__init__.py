"""Multi-task low-rank expert fine-tuning (task-common plus task-specific experts behind a task gate)."""

from .adapters import CgcLoraLayer, ExpertBank, LoraAdapter, cgc_forward, expert_param_count, init_lora, lora_forward, split_ranks
from .autograd import Tensor, backward, grad_check, matmul, softmax
from .data import DEFAULT_TASKS, TaskSpec, gen_synthetic, parse_output, read_corpus, wrap_input, write_corpus
from .estimator import CgcLoraLM
from .gate import TaskGate, gate_weights, make_gates, uniform_weights
from .merge import AdapterRegistry, infer_batch, merge_model, register_cluster
from .metrics import EvalReport, evaluate, macro_f1, micro_f1, rouge_l
from .model import AdapterConfig, ModelConfig, ToyTransformer, build_model, forward_lm, greedy_generate
from .trainer import TrainConfig, lm_loss, run_variant, sample_batches, train

__version__ = "0.1.0"
