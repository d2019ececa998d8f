"""Report emission: human-readable summary plus line-delimited data files.

The machine-readable file carries confusion cells, per-instance activation
statistics (with the full activation row, so stats can be recomputed on
reload), and per-prototype activation profiles listed in the global
prototype order. Routing decisions serialize separately as
{id, raw_logit, delta_theta, use_think, predicted_gap} records.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .codebook import activation_stats, global_prototype_order
from .errors import PreconditionError
from .evaluate import EvalReport, ExampleOutcome


@dataclass
class ActivationRecord:
    instance_id: str
    activation: np.ndarray        # (M,) probability vector
    class_id: int
    class_salient: list[int]


def collect_activation_data(model, tasks, reduction: str = "mean") -> list[ActivationRecord]:
    """Activation rows per instance with class-mean salient sets.

    reduction "mean" averages the attention over the K queries; "per_query"
    emits one record per (instance, query).
    """
    import torch
    with torch.no_grad():
        A = model.thinking().A.detach().cpu().numpy()
    rows_per_task = A.mean(axis=0, keepdims=True) if reduction == "mean" else A

    by_class: dict[int, list[np.ndarray]] = {}
    pending = []
    for task in tasks:
        for qi in range(rows_per_task.shape[0]):
            row = rows_per_task[qi]
            suffix = "" if reduction == "mean" else f"#q{qi}"
            pending.append((f"{task.id}{suffix}", task.strategy_id, row))
            by_class.setdefault(task.strategy_id, []).append(row)

    salient = {}
    for cls, rows in by_class.items():
        mean = np.mean(rows, axis=0)
        salient[cls] = activation_stats(mean / mean.sum()).top_indices

    return [ActivationRecord(instance_id=iid, activation=row, class_id=cls,
                             class_salient=salient[cls])
            for iid, cls, row in pending]


def emit_report(report: EvalReport, activation_data: list[ActivationRecord],
                out_dir, outcomes: list[ExampleOutcome] | None = None) -> dict[str, str]:
    """Write summary.txt and report.jsonl under out_dir; returns the paths."""
    if report.total < 1:
        raise PreconditionError("refusing to emit a report over zero examples")
    os.makedirs(out_dir, exist_ok=True)
    summary_path = os.path.join(out_dir, "summary.txt")
    data_path = os.path.join(out_dir, "report.jsonl")

    with open(summary_path, "w", encoding="utf-8") as f:
        f.write("evaluation summary\n")
        f.write(f"  examples          {report.total}\n")
        f.write(f"  accuracy          {report.accuracy:.4f}\n")
        f.write(f"  avg generation    {report.avg_gen_len:.2f} tokens\n")
        f.write(f"  escalation rate   {report.escalation_rate:.4f}\n")
        f.write("  confusion cells\n")
        f.write(f"    fast correct    {report.fast_correct}\n")
        f.write(f"    fast wrong      {report.fast_wrong}\n")
        f.write(f"    slow correct    {report.slow_correct}\n")
        f.write(f"    slow wrong      {report.slow_wrong}\n")
        if activation_data:
            stats = [activation_stats(r.activation, r.class_salient) for r in activation_data]
            f.write("  codebook activations\n")
            f.write(f"    mean top-10 mass  {np.mean([s.top10_mass for s in stats]):.4f}\n")
            f.write(f"    mean sparsity     {np.mean([s.sparsity for s in stats]):.4f}\n")
            f.write(f"    overlap>0 share   "
                    f"{np.mean([s.overlap_at_10 > 0 for s in stats]):.4f}\n")

    with open(data_path, "w", encoding="utf-8") as f:
        for cell in ("fast_correct", "fast_wrong", "slow_correct", "slow_wrong"):
            f.write(json.dumps({"kind": "confusion", "cell": cell,
                                "count": getattr(report, cell)}) + "\n")
        f.write(json.dumps({"kind": "meta", "total": report.total,
                            "accuracy": report.accuracy,
                            "avg_gen_len": report.avg_gen_len,
                            "escalation_rate": report.escalation_rate}) + "\n")
        for rec in activation_data:
            s = activation_stats(rec.activation, rec.class_salient)
            f.write(json.dumps({
                "kind": "instance_stats", "id": rec.instance_id,
                "class": rec.class_id, "t10": s.top10_mass, "sparsity": s.sparsity,
                "overlap_at_10": s.overlap_at_10,
                "activation": [float(v) for v in rec.activation],
            }) + "\n")
        if len(activation_data) >= 2:
            rows = [rec.activation for rec in activation_data]
            order = global_prototype_order(rows)
            profiles = np.stack(rows, axis=0)
            for rank, proto in enumerate(order):
                f.write(json.dumps({
                    "kind": "prototype_profile", "rank": rank, "prototype": int(proto),
                    "profile": [float(v) for v in profiles[:, proto]],
                }) + "\n")
    return {"summary": summary_path, "data": data_path}


def write_routing_records(outcomes: list[ExampleOutcome], path) -> None:
    """Line-delimited routing decisions for escalation analysis."""
    with open(path, "w", encoding="utf-8") as f:
        for o in outcomes:
            if o.decision is None:
                continue
            f.write(json.dumps({
                "id": o.task_id,
                "raw_logit": o.decision.raw_logit,
                "delta_theta": o.decision.delta_theta,
                "use_think": o.decision.use_think,
                "predicted_gap": o.decision.predicted_gap,
            }) + "\n")


def load_report_rows(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rows.append(json.loads(line))
    return rows
