"""Task scores: Micro-F1, Macro-F1, Rouge-L and the cross-task average."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import TaskSpec, parse_output


def _f1(tp: int, fp: int, fn: int) -> float:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def micro_f1(pred_sets, gold_sets) -> float:
    """F1 over TP/FP/FN pooled across samples (set semantics within each sample)."""
    if len(pred_sets) != len(gold_sets):
        raise ValueError(f"{len(pred_sets)} predictions for {len(gold_sets)} gold answers")
    tp = fp = fn = 0
    for pred, gold in zip(pred_sets, gold_sets):
        pred, gold = set(pred or ()), set(gold or ())
        tp += len(pred & gold)
        fp += len(pred - gold)
        fn += len(gold - pred)
    return _f1(tp, fp, fn)


def macro_f1(pred_labels, gold_labels, label_set) -> float:
    """Unweighted mean of per-class F1 over the classes present in the gold labels.

    A ``None`` prediction (parse failure) counts as a miss for its gold class.
    """
    if len(pred_labels) != len(gold_labels):
        raise ValueError(f"{len(pred_labels)} predictions for {len(gold_labels)} gold labels")
    labels = set(label_set)
    for lab in list(pred_labels) + list(gold_labels):
        if lab is not None and lab not in labels:
            raise ValueError(f"label {lab!r} is not in the label set {sorted(labels)}")
    classes = sorted(set(gold_labels))
    if not classes:
        return 0.0
    scores = []
    for c in classes:
        tp = sum(p == c and g == c for p, g in zip(pred_labels, gold_labels))
        fp = sum(p == c and g != c for p, g in zip(pred_labels, gold_labels))
        fn = sum(p != c and g == c for p, g in zip(pred_labels, gold_labels))
        scores.append(_f1(tp, fp, fn))
    return float(np.mean(scores))


def lcs_length(a, b) -> int:
    """Length of the longest common subsequence (two-row dynamic programme)."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate_tokens, reference_tokens) -> float:
    lcs = lcs_length(candidate_tokens, reference_tokens)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate_tokens)
    r = lcs / len(reference_tokens)
    return 2 * p * r / (p + r)


def exact_match(preds, golds) -> float:
    if not golds:
        return 0.0
    return sum(p == g for p, g in zip(preds, golds)) / len(golds)


@dataclass
class EvalReport:
    per_task: dict = field(default_factory=dict)  # task name -> (metric name, value)
    extras: dict = field(default_factory=dict)

    @property
    def average(self) -> float:
        vals = [v for _, v in self.per_task.values()]
        return float(np.mean(vals)) if vals else 0.0

    def to_record(self) -> dict:
        return {
            "per_task": {k: {"metric_name": m, "value": v} for k, (m, v) in self.per_task.items()},
            "average": self.average,
            "extras": self.extras,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "EvalReport":
        per = {k: (v["metric_name"], v["value"]) for k, v in rec["per_task"].items()}
        return cls(per_task=per, extras=rec.get("extras", {}))

    def to_table(self, row_label: str = "setting", row_name: str = "") -> str:
        return format_table([(row_name, self)], row_label=row_label)


def format_table(rows, row_label: str = "setting") -> str:
    """Aligned text table: one row per report, tasks as columns, average last."""
    tasks = []
    for _, rep in rows:
        if rep is None:
            continue
        for t in rep.per_task:
            if t not in tasks:
                tasks.append(t)
    header = [row_label] + tasks + ["Avg."]
    body = []
    for name, rep in rows:
        if rep is None:
            body.append([str(name)] + ["-"] * (len(tasks) + 1))
            continue
        cells = [str(name)]
        for t in tasks:
            cells.append(f"{rep.per_task[t][1]:.4f}" if t in rep.per_task else "-")
        cells.append(f"{rep.average:.4f}")
        body.append(cells)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    line = lambda cells: " | ".join(c.rjust(w) for c, w in zip(cells, widths))
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([line(header), sep] + [line(r) for r in body]) + "\n"


def score_task(spec: TaskSpec, generations, samples) -> tuple[str, float, float]:
    """Parse ``generations`` and score them; returns (metric name, value, exact match)."""
    golds = [s.gold for s in samples]
    parsed = [parse_output(spec, g).value for g in generations]
    if spec.metric_kind == "rouge_l":
        vals = [rouge_l(list(g), list(s.target_text)) for g, s in zip(generations, samples)]
        value = float(np.mean(vals)) if vals else 0.0
    elif spec.metric_kind == "micro_f1":
        value = micro_f1(parsed, golds)
    else:
        value = macro_f1(parsed, golds, spec.labels)
    exact = exact_match(list(generations), [s.target_text for s in samples])
    return spec.metric_kind, value, exact


def evaluate(generate, test_sets: dict, specs) -> EvalReport:
    """Score every task.

    ``generate(task_id, samples)`` returns one generated string per sample;
    ``test_sets`` maps task id to samples and ``specs`` lists the TaskSpecs.
    """
    report = EvalReport()
    for spec in specs:
        samples = test_sets.get(spec.task_id)
        if not samples:
            continue
        gens = generate(spec.task_id, samples)
        metric, value, exact = score_task(spec, gens, samples)
        report.per_task[spec.name] = (metric, value)
        report.extras[spec.name] = {"exact_match": exact}
    return report
