"""``cgclora`` command line: gen-data, train, merge, infer, eval and sweep.

Exit codes: 0 success, 2 usage or configuration problem, 3 numeric failure.
Output directories are append-only; a subcommand refuses to write into a
directory that already has content.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

from .checkpoint import base_digest, load_model, save_model
from .data import DEFAULT_TASKS, DEFAULT_TOKENIZER, TaskSpec, gen_synthetic, prompt_ids, read_corpus, write_corpus
from .exceptions import CgcLoraError, ConfigurationError, NumericError
from .merge import AdapterRegistry, load_merged, merge_model, save_merged
from .metrics import evaluate, format_table
from .model import build_model, greedy_generate
from .runconfig import SWEEP_GRIDS, RunConfig, load_config
from .trainer import train

log = logging.getLogger("cgclora")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


def _fresh_dir(path) -> Path:
    path = Path(path)
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        raise ConfigurationError(f"{path} already exists and is not empty; run directories are never overwritten")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_jsonl(path, records) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _read_jsonl(path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _load_corpus(corpus_dir):
    try:
        return read_corpus(corpus_dir)
    except FileNotFoundError as exc:
        raise ConfigurationError(str(exc)) from None


def _select_tasks(cfg: RunConfig, specs, cluster: str | None) -> list[TaskSpec]:
    if cluster is None:
        return list(specs)
    if cluster not in cfg.clusters:
        raise ConfigurationError(f"cluster {cluster!r} is not defined in the config (known: {sorted(cfg.clusters)})")
    wanted = cfg.clusters[cluster]
    chosen = [s for s in specs if s.name in wanted or s.task_id in wanted]
    found = {s.name for s in chosen} | {s.task_id for s in chosen}
    missing = [t for t in wanted if t not in found]
    if missing:
        raise ConfigurationError(f"cluster {cluster!r} names tasks missing from the corpus: {missing}")
    return chosen


def _spec_records(specs) -> list[dict]:
    return [{**asdict(s), "labels": list(s.labels)} for s in specs]


def _specs_from_meta(meta) -> list[TaskSpec]:
    return [TaskSpec(**{**t, "labels": tuple(t.get("labels", ()))}) for t in meta.get("tasks", [])]


def generator(model, max_new_tokens: int, merged_by_task: dict | None = None):
    """``generate(task_id, samples)`` callable for :func:`metrics.evaluate`."""

    def generate(task_id, samples):
        merged = merged_by_task[task_id].weights if merged_by_task else None
        return [
            DEFAULT_TOKENIZER.detokenize(greedy_generate(model, prompt_ids(s), task_id, max_new_tokens, merged=merged))
            for s in samples
        ]

    return generate


# subcommands -------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, out_dir) -> list[Path]:
    out = _fresh_dir(out_dir)
    tasks = [t for t in DEFAULT_TASKS if t.name in cfg.data.tasks]
    corpus = gen_synthetic(cfg.data.suite_seed, cfg.data.sizes, tasks)
    return write_corpus(corpus, out, tasks, meta={"suite_seed": cfg.data.suite_seed})


def describe_model(model) -> dict:
    layer = next(iter(model.layers.values()))
    bank = layer.bank
    info = {
        "variant": model.variant,
        "wrapped_layers": len(model.layers),
        "n_common": bank.n_common,
        "n_specific": bank.n_specific,
        "ranks": bank.ranks,
        "r_total": layer.r,
        "gates": len({id(g) for g in model.gates}),
        "trainable_parameters": model.n_trainable(),
    }
    if model.variant == "lora_full":
        info["note"] = f"wrapped 1 common expert of full rank {layer.r}"
    return info


def train_run(cfg: RunConfig, corpus, specs, out, config_text: str | None = None) -> dict:
    """Train one configuration into the (fresh) directory ``out``; returns the summary."""
    model = build_model(cfg.model_config([s.task_id for s in specs]))
    out = _fresh_dir(out)
    (out / "config.json").write_text(config_text if config_text is not None else cfg.dumps(), encoding="utf-8")
    (out / "resolved_config.json").write_text(cfg.dumps(), encoding="utf-8")
    datasets = {s.task_id: corpus[s.task_id]["train"] for s in specs}

    def evaluator(m):
        n = cfg.train.eval_samples
        return evaluate(generator(m, cfg.eval.max_new_tokens), {t: corpus[t]["val"][:n] for t in datasets}, specs).per_task

    metrics_path = out / "metrics.jsonl"
    with metrics_path.open("w", encoding="utf-8") as fh:
        sink = lambda rec: fh.write(json.dumps(rec, sort_keys=True) + "\n")
        state = train(model, datasets, cfg.train, evaluator=evaluator if cfg.train.eval_every else None, sink=sink)
    save_model(model, out / "checkpoint.ckpt", meta={"tasks": _spec_records(specs)})
    summary = {**describe_model(model), "steps": state.step, "final_loss": state.final_loss}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def cmd_train(cfg: RunConfig, corpus_dir, out_dir, cluster=None, config_text=None) -> dict:
    corpus, specs = _load_corpus(corpus_dir)
    return train_run(cfg, corpus, _select_tasks(cfg, specs, cluster), out_dir, config_text)


def cmd_merge(checkpoint, out_dir) -> Path:
    model, meta = load_model(checkpoint)
    out = _fresh_dir(out_dir)
    files = {}
    for t in model.task_ids:
        name = f"task-{t}.ckpt"
        save_merged(merge_model(model, t), out / name, meta={"base_digest": meta["base_digest"]})
        files[str(t)] = name
    manifest = {"checkpoint": str(checkpoint), "base_digest": meta["base_digest"], "tasks": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def _read_merged_dir(merged_dir) -> tuple[str, dict]:
    manifest = json.loads((Path(merged_dir) / "manifest.json").read_text(encoding="utf-8"))
    merged = {}
    for _, name in manifest["tasks"].items():
        mw = load_merged(Path(merged_dir) / name)
        merged[mw.task_id] = mw
    return manifest["base_digest"], merged


def build_registry(clusters: dict, merged_dirs: dict | None = None) -> AdapterRegistry:
    """``clusters`` maps cluster id to checkpoint path; ``merged_dirs`` optionally to cmd_merge output."""
    specs = []
    loaded = {}
    for cid, path in clusters.items():
        model, meta = load_model(path)
        loaded[cid] = model
        specs += _specs_from_meta(meta)
    registry = AdapterRegistry(specs)
    for cid, model in loaded.items():
        merged = None
        if merged_dirs and cid in merged_dirs:
            digest, merged = _read_merged_dir(merged_dirs[cid])
            if digest != base_digest(model):
                raise ConfigurationError(f"merged weights in {merged_dirs[cid]} belong to a different base model")
        registry.register_cluster(cid, model.task_ids, model, merged=merged)
    return registry


def cmd_infer(clusters: dict, input_path, output_path, merged_dirs=None, use_merged=True, max_new_tokens=48):
    """Run inference over JSONL records; returns ``(results, registry)``."""
    registry = build_registry(clusters, merged_dirs)
    records = _read_jsonl(input_path)
    results = registry.infer_batch(records, max_new_tokens=max_new_tokens, use_merged=use_merged)
    output_path = Path(output_path)
    if output_path.exists():
        raise ConfigurationError(f"{output_path} already exists; outputs are never overwritten")
    output_path.parent.mkdir(parents=True, exist_ok=True)
    _write_jsonl(output_path, results)
    return results, registry


def cmd_eval(checkpoint, corpus_dir, out_dir, split="test", samples=None, max_new_tokens=48, generations=None):
    """Score a checkpoint (or precomputed ``generations`` JSONL) on a corpus split."""
    corpus, specs = _load_corpus(corpus_dir)
    test_sets = {s.task_id: corpus[s.task_id][split][:samples] for s in specs}
    if generations is not None:
        by_task: dict = {}
        for rec in _read_jsonl(generations):
            by_task.setdefault(rec["task_id"], []).append(rec["text"])
        specs = [s for s in specs if s.task_id in by_task]

        def generate(task_id, samples_):
            texts = by_task[task_id]
            if len(texts) != len(samples_):
                raise ConfigurationError(f"task {task_id}: {len(texts)} generations for {len(samples_)} samples")
            return texts

    else:
        model, _ = load_model(checkpoint)
        specs = [s for s in specs if s.task_id in model.task_ids]
        merged = {t: merge_model(model, t) for t in model.task_ids}
        generate = generator(model, max_new_tokens, merged)
    produced = []

    def recording(task_id, samples_):
        texts = generate(task_id, samples_)
        produced.extend({"task_id": task_id, "text": t} for t in texts)
        return texts

    report = evaluate(recording, test_sets, specs)
    out = _fresh_dir(out_dir)
    (out / "report.json").write_text(json.dumps(report.to_record(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "report.txt").write_text(format_table([(Path(str(checkpoint or generations)).parent.name, report)]), encoding="utf-8")
    _write_jsonl(out / "generations.jsonl", produced)
    return report


def sweep_settings(cfg: RunConfig, axis: str, values, n_tasks: int) -> list[tuple[str, RunConfig | None, str]]:
    """One ``(label, config or None, skip reason)`` per value.

    ``n_common`` keeps the per-expert rank at ``sweep.expert_rank``; ``expert_rank``
    keeps the common-expert count at ``sweep.n_common``. Either way the total
    rank is ``rank * (n_common + n_tasks)`` so every expert gets the same rank.
    """
    out = []
    limit = min(cfg.model.d_model, cfg.model.d_ff)
    for v in values:
        if axis == "n_common":
            n_common, rank, label = int(v), cfg.sweep.expert_rank, f"N_C={v}"
        else:
            n_common, rank, label = cfg.sweep.n_common, int(v), f"rank={v}"
        if n_common < 0 or rank < 1:
            out.append((label, None, "values must be non-negative counts and positive ranks"))
            continue
        if rank > limit:
            out.append((label, None, f"expert rank {rank} exceeds layer dimension {limit}"))
            continue
        adapter = replace(cfg.model.adapter, n_common=n_common, r_total=rank * (n_common + n_tasks), rank_overrides=None)
        out.append((label, replace(cfg, model=replace(cfg.model, adapter=adapter)), ""))
    return out


def cmd_sweep(cfg: RunConfig, corpus_dir, out_dir, axis=None, values=None, parallel=None):
    """Train and evaluate one run per sweep value; writes ``sweep.txt`` and ``sweep.jsonl``."""
    corpus, specs = _load_corpus(corpus_dir)
    axis = axis or cfg.sweep.axis
    if axis not in SWEEP_GRIDS:
        raise ConfigurationError(f"sweep axis must be one of {sorted(SWEEP_GRIDS)}, got {axis!r}")
    values = values or cfg.sweep.values or SWEEP_GRIDS[axis]
    out = _fresh_dir(out_dir)
    settings = sweep_settings(cfg, axis, values, len(specs))

    def run(item):
        label, run_cfg, reason = item
        if run_cfg is None:
            return label, None, reason
        run_dir = out / label.replace("=", "-")
        try:
            train_run(run_cfg, corpus, specs, run_dir)
            report = cmd_eval(run_dir / "checkpoint.ckpt", corpus_dir, run_dir / "eval", cfg.eval.split,
                              cfg.eval.samples, cfg.eval.max_new_tokens)
        except ConfigurationError as exc:
            return label, None, str(exc)
        return label, report, ""

    workers = parallel or cfg.sweep.parallel
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, settings))
    else:
        rows = [run(s) for s in settings]
    table = format_table([(label, rep) for label, rep, _ in rows], row_label=axis)
    skipped = [f"{label}: skipped ({reason})" for label, rep, reason in rows if rep is None]
    (out / "sweep.txt").write_text(table + "".join(s + "\n" for s in skipped), encoding="utf-8")
    _write_jsonl(
        out / "sweep.jsonl",
        [{"setting": label, "report": rep.to_record() if rep else None, "skipped": reason or None} for label, rep, reason in rows],
    )
    return rows


# argument parsing ----------------------------------------------------------


def _cluster_pairs(items) -> dict:
    out = {}
    for item in items or []:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise ConfigurationError(f"--cluster expects NAME=PATH, got {item!r}")
        out[name] = path
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cgclora", description="Multi-task low-rank expert fine-tuning on a toy transformer.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the synthetic task corpus")
    g.add_argument("--config")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one variant and write a run directory")
    t.add_argument("--config")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--variant")
    t.add_argument("--cluster", help="train only the tasks of this config cluster")
    t.add_argument("--max-steps", type=int)
    t.add_argument("--seed", type=int, help="sets both the model and training seeds")

    m = sub.add_parser("merge", help="write per-task fused weights")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--out", required=True)

    i = sub.add_parser("infer", help="greedy generation for JSONL records {cluster_id, task_id, text}")
    i.add_argument("--cluster", action="append", required=True, metavar="NAME=CHECKPOINT")
    i.add_argument("--merged", action="append", metavar="NAME=DIR", help="precomputed cmd_merge output")
    i.add_argument("--input", required=True)
    i.add_argument("--output", required=True)
    i.add_argument("--no-merge", action="store_true", help="run the expert form instead of fused weights")
    i.add_argument("--max-new-tokens", type=int, default=48)

    e = sub.add_parser("eval", help="score a checkpoint on a corpus split")
    e.add_argument("--checkpoint")
    e.add_argument("--generations", help="score these JSONL generations instead of a checkpoint")
    e.add_argument("--corpus", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config")
    e.add_argument("--split")
    e.add_argument("--samples", type=int)

    s = sub.add_parser("sweep", help="train one run per value of a sweep axis")
    s.add_argument("--config")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--axis", choices=sorted(SWEEP_GRIDS))
    s.add_argument("--values", type=int, nargs="+")
    s.add_argument("--max-steps", type=int)
    s.add_argument("--parallel", type=int, help="number of worker threads")
    return p


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "variant", None):
        cfg = replace(cfg, variant=args.variant)
    if getattr(args, "max_steps", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, max_steps=args.max_steps))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, model=replace(cfg.model, seed=args.seed), train=replace(cfg.train, seed=args.seed))
    return cfg.validate()


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    cfg, text = load_config(getattr(args, "config", None))
    overridden = _apply_overrides(cfg, args)
    if overridden != cfg:
        cfg, text = overridden, None

    if args.command == "gen-data":
        for path in cmd_gen_data(cfg, args.out):
            print(path)
    elif args.command == "train":
        summary = cmd_train(cfg, args.corpus, args.out, args.cluster, text)
        print(json.dumps(summary, sort_keys=True))
    elif args.command == "merge":
        print(cmd_merge(args.checkpoint, args.out))
    elif args.command == "infer":
        results, registry = cmd_infer(
            _cluster_pairs(args.cluster), args.input, args.output, _cluster_pairs(args.merged),
            use_merged=not args.no_merge, max_new_tokens=args.max_new_tokens,
        )
        failed = sum("error" in r for r in results)
        print(f"{len(results) - failed} ok, {failed} failed, {registry.merge_count} merges")
        if results and failed == len(results):
            return EXIT_USAGE
    elif args.command == "eval":
        if (args.checkpoint is None) == (args.generations is None):
            raise ConfigurationError("eval needs exactly one of --checkpoint or --generations")
        report = cmd_eval(args.checkpoint, args.corpus, args.out, args.split or cfg.eval.split,
                          args.samples or cfg.eval.samples, cfg.eval.max_new_tokens, args.generations)
        print(report.to_table(row_name="eval"), end="")
    elif args.command == "sweep":
        rows = cmd_sweep(cfg, args.corpus, args.out, args.axis, args.values, args.parallel)
        print(format_table([(label, rep) for label, rep, _ in rows], row_label=args.axis or cfg.sweep.axis), end="")
    return EXIT_OK


def main(argv=None) -> int:
    try:
        return run(argv)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CgcLoraError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
