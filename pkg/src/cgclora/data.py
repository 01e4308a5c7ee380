"""Prompt wrapping, answer parsing, a character tokenizer and the synthetic task suite."""

from __future__ import annotations

import json
import string
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, PlaceholderError, UnknownTokenError

PLACEHOLDER = "[Text]"
ANSWER_SLOT = "[Answer]"
ENTITY_DELIMITER = ", "

METRIC_FOR_SCHEMA = {"entity_list": "micro_f1", "label": "macro_f1", "free_text": "rouge_l"}

PAD, BOS, EOS = 0, 1, 2
SPECIALS = ("<pad>", "<bos>", "<eos>")
ALPHABET = " " + string.ascii_lowercase + string.ascii_uppercase + ":,.=?!'-"


class CharTokenizer:
    """Character-level tokenizer; ids 0-2 are reserved for PAD, BOS and EOS."""

    def __init__(self, alphabet: str = ALPHABET):
        if len(set(alphabet)) != len(alphabet):
            raise ConfigurationError("tokenizer alphabet has duplicate characters")
        self.alphabet = alphabet
        self._ids = {c: i + len(SPECIALS) for i, c in enumerate(alphabet)}

    @property
    def vocab_size(self) -> int:
        return len(SPECIALS) + len(self.alphabet)

    def tokenize(self, text: str) -> list[int]:
        bad = sorted({c for c in text if c not in self._ids})
        if bad:
            raise UnknownTokenError(f"characters outside the tokenizer alphabet: {bad!r}")
        return [self._ids[c] for c in text]

    def detokenize(self, ids) -> str:
        n = len(SPECIALS)
        return "".join(self.alphabet[i - n] for i in ids if i >= n)


DEFAULT_TOKENIZER = CharTokenizer()


def tokenize(text: str) -> list[int]:
    return DEFAULT_TOKENIZER.tokenize(text)


def detokenize(ids) -> str:
    return DEFAULT_TOKENIZER.detokenize(ids)


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    name: str
    prompt_template: str
    answer_template: str = ANSWER_SLOT
    answer_schema: str = "free_text"
    metric_kind: str = "rouge_l"
    labels: tuple = ()

    def __post_init__(self):
        if self.prompt_template.count(PLACEHOLDER) != 1:
            raise ConfigurationError(f"template of {self.name!r} must contain exactly one {PLACEHOLDER}")
        if self.answer_template.count(ANSWER_SLOT) != 1:
            raise ConfigurationError(f"answer template of {self.name!r} must contain exactly one {ANSWER_SLOT}")
        expected = METRIC_FOR_SCHEMA.get(self.answer_schema)
        if expected is None:
            raise ConfigurationError(f"unknown answer schema {self.answer_schema!r}")
        if expected != self.metric_kind:
            raise ConfigurationError(
                f"schema {self.answer_schema!r} is scored with {expected!r}, not {self.metric_kind!r}"
            )
        if self.answer_schema == "label" and not self.labels:
            raise ConfigurationError(f"label task {self.name!r} needs a label set")

    def render_answer(self, gold) -> str:
        if self.answer_schema == "entity_list":
            body = ENTITY_DELIMITER.join(gold)
        else:
            body = str(gold)
        return self.answer_template.replace(ANSWER_SLOT, body)


@dataclass
class Sample:
    task_id: int
    raw_input: str
    wrapped_input: str
    target_text: str
    gold: object
    split: str = "train"
    token_ids: list = field(default_factory=list)
    loss_mask: list = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "task_id": self.task_id,
            "split": self.split,
            "input": self.raw_input,
            "target": self.target_text,
            "gold": self.gold,
        }


@dataclass
class ParsedAnswer:
    value: object
    failed: bool = False


def wrap_input(spec: TaskSpec, raw_text: str) -> str:
    if PLACEHOLDER in raw_text:
        raise PlaceholderError(f"raw input may not contain the literal {PLACEHOLDER}")
    return spec.prompt_template.replace(PLACEHOLDER, raw_text)


def parse_output(spec: TaskSpec, generated_text: str) -> ParsedAnswer:
    """Turn a generated sentence back into the task's structured answer.

    Failures yield an empty answer with ``failed=True`` so that scoring treats
    them as misses.
    """
    prefix, suffix = spec.answer_template.split(ANSWER_SLOT)
    text = generated_text.strip()
    if spec.answer_schema == "free_text":
        return ParsedAnswer(generated_text)
    if not text.startswith(prefix.strip()) or not text.endswith(suffix.strip()):
        return ParsedAnswer([] if spec.answer_schema == "entity_list" else None, failed=True)
    body = text[len(prefix.strip()) : len(text) - len(suffix.strip())].strip()
    if spec.answer_schema == "label":
        if body in spec.labels:
            return ParsedAnswer(body)
        return ParsedAnswer(None, failed=True)
    items = []
    for part in body.split(ENTITY_DELIMITER.strip()):
        part = part.strip()
        if part and part not in items:
            items.append(part)
    return ParsedAnswer(items, failed=not items)


def encode_sample(sample: Sample, tokenizer: CharTokenizer = DEFAULT_TOKENIZER) -> Sample:
    """Fill ``token_ids`` (BOS + prompt + target + EOS) and the target-span mask."""
    prompt = tokenizer.tokenize(sample.wrapped_input)
    target = tokenizer.tokenize(sample.target_text)
    sample.token_ids = [BOS] + prompt + target + [EOS]
    sample.loss_mask = [0] * (1 + len(prompt)) + [1] * (len(target) + 1)
    return sample


def prompt_ids(sample: Sample, tokenizer: CharTokenizer = DEFAULT_TOKENIZER) -> list[int]:
    return [BOS] + tokenizer.tokenize(sample.wrapped_input)


def make_sample(spec: TaskSpec, raw: str, gold, split: str = "train") -> Sample:
    s = Sample(
        task_id=spec.task_id,
        raw_input=raw,
        wrapped_input=wrap_input(spec, raw),
        target_text=spec.render_answer(gold),
        gold=gold,
        split=split,
    )
    return encode_sample(s)


# synthetic suite --------------------------------------------------------

NER_EXAMPLE = TaskSpec(
    task_id=-1,
    name="ner",
    prompt_template="Please recognize the name entity in the following sentence: [Text]",
    answer_template="The text has the following entities: [Answer]",
    answer_schema="entity_list",
    metric_kind="micro_f1",
)

DEFAULT_TASKS = (
    TaskSpec(0, "copy", "copy: [Text] =", answer_schema="free_text", metric_kind="rouge_l"),
    TaskSpec(1, "reverse", "reverse: [Text] =", answer_schema="free_text", metric_kind="rouge_l"),
    TaskSpec(
        2,
        "extract_caps",
        "caps: [Text] =",
        answer_template="entities: [Answer]",
        answer_schema="entity_list",
        metric_kind="micro_f1",
    ),
    TaskSpec(
        3,
        "parity_label",
        "parity: [Text] =",
        answer_schema="label",
        metric_kind="macro_f1",
        labels=("even", "odd"),
    ),
)

TASK_BY_NAME = {t.name: t for t in DEFAULT_TASKS}
SPLITS = ("train", "val", "test")
_LETTERS = "abcdefghijkl"


def _draw_copy(rng):
    n = int(rng.integers(3, 7))
    return "".join(rng.choice(list(_LETTERS), size=n, replace=False))


def _draw_caps(rng):
    n = int(rng.integers(2, 5))
    words = []
    for _ in range(n):
        w = "".join(rng.choice(list(_LETTERS[:8]), size=2, replace=False))
        words.append(w.capitalize() if rng.random() < 0.5 else w)
    if not any(w[0].isupper() for w in words):
        k = int(rng.integers(n))
        words[k] = words[k].capitalize()
    return " ".join(words)


def _draw_parity(rng):
    n = int(rng.integers(3, 9))
    return "".join(rng.choice(list(_LETTERS), size=n))


def gold_for(task: TaskSpec, raw: str):
    if task.name == "copy":
        return raw
    if task.name == "reverse":
        return raw[::-1]
    if task.name == "extract_caps":
        out = []
        for w in raw.split():
            if w[0].isupper() and w not in out:
                out.append(w)
        return out
    if task.name == "parity_label":
        return "even" if sum(c.isalpha() for c in raw) % 2 == 0 else "odd"
    raise ConfigurationError(f"no generator for task {task.name!r}")


_DRAWERS = {"copy": _draw_copy, "reverse": _draw_copy, "extract_caps": _draw_caps, "parity_label": _draw_parity}


def gen_synthetic(suite_seed: int, sizes: dict | None = None, tasks=DEFAULT_TASKS) -> dict:
    """Deterministic corpus: ``{task_id: {split: [Sample, ...]}}`` with disjoint splits."""
    sizes = dict(sizes or {"train": 1000, "val": 100, "test": 100})
    for split in SPLITS:
        n = sizes.get(split)
        if not isinstance(n, int) or n < 1:
            raise ConfigurationError(f"sizes.{split} must be a positive integer, got {n!r}")
    corpus = {}
    for task in tasks:
        rng = np.random.default_rng([int(suite_seed), int(task.task_id)])
        draw = _DRAWERS[task.name]
        total = sum(sizes[s] for s in SPLITS)
        seen, raws = set(), []
        attempts = 0
        while len(raws) < total:
            attempts += 1
            if attempts > 50 * total:
                raise ConfigurationError(f"task {task.name!r} cannot supply {total} distinct inputs")
            raw = draw(rng)
            if raw not in seen:
                seen.add(raw)
                raws.append(raw)
        per_split, start = {}, 0
        for split in SPLITS:
            chunk = raws[start : start + sizes[split]]
            start += sizes[split]
            per_split[split] = [make_sample(task, r, gold_for(task, r), split) for r in chunk]
        corpus[task.task_id] = per_split
    return corpus


def write_corpus(corpus: dict, out_dir, tasks=DEFAULT_TASKS, meta: dict | None = None) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_id = {t.task_id: t for t in tasks}
    paths = []
    for task_id, splits in corpus.items():
        path = out_dir / f"{by_id[task_id].name}.jsonl"
        with path.open("w", encoding="utf-8") as fh:
            for split in SPLITS:
                for s in splits[split]:
                    fh.write(json.dumps(s.to_record(), sort_keys=True) + "\n")
        paths.append(path)
    manifest = {
        "tasks": [asdict(by_id[t]) for t in corpus],
        "sizes": {by_id[t].name: {k: len(v) for k, v in s.items()} for t, s in corpus.items()},
    }
    if meta:
        manifest.update(meta)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths


def read_corpus(corpus_dir) -> tuple[dict, list[TaskSpec]]:
    corpus_dir = Path(corpus_dir)
    manifest_path = corpus_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no corpus manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    tasks = [TaskSpec(**{**t, "labels": tuple(t.get("labels", ()))}) for t in manifest["tasks"]]
    corpus = {}
    for task in tasks:
        per_split = {s: [] for s in SPLITS}
        with (corpus_dir / f"{task.name}.jsonl").open(encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                per_split[rec["split"]].append(make_sample(task, rec["input"], rec["gold"], rec["split"]))
        corpus[task.task_id] = per_split
    return corpus, tasks
