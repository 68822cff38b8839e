"""Recall@k at temporal-IoU thresholds, plus ablation and window-length sweeps."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig
from .core import GroundingError, Span, iou_matrix
from .pipeline import ground_all
from .training import train_models

DEFAULT_KS = (1, 5)
DEFAULT_THETAS = (0.3, 0.5)


class EmptyQuerySet(GroundingError, ValueError):
    pass


class MissingCheckpoint(GroundingError, KeyError):
    pass


def _hit_ious(preds: list[Span], gt: Span) -> np.ndarray:
    if not preds:
        return np.zeros(0)
    return iou_matrix([p.start for p in preds], [p.end for p in preds], [gt.start], [gt.end])[:, 0]


def _hits(ious, theta, strict):
    return ious > theta if strict else ious >= theta


def recall_at_k(predictions, gts, k: int, theta: float, strict: bool = True) -> float:
    """Percentage of queries with a top-``k`` prediction whose IoU with the ground truth exceeds ``theta``.

    ``predictions`` maps query id to a ranked list of spans; ``gts`` maps query
    id to its single ground-truth span. Queries without predictions count as misses.
    """
    if not gts:
        raise EmptyQuerySet("no queries to evaluate")
    hit = 0
    for qid, gt in gts.items():
        ious = _hit_ious(list(predictions.get(qid, []))[:k], gt)
        hit += bool(np.any(_hits(ious, theta, strict)))
    return 100.0 * hit / len(gts)


@dataclass
class EvalReport:
    recalls: dict[tuple[int, float], float]
    num_queries: int
    first_hit_rank: dict[float, dict[str, int | None]] = field(default_factory=dict)

    def get(self, k: int, theta: float) -> float:
        return self.recalls[(k, theta)]

    def row(self) -> dict:
        return {f"R{k}@{theta}": v for (k, theta), v in sorted(self.recalls.items())}

    def to_json(self, config: dict | None = None) -> str:
        payload = {
            "num_queries": self.num_queries,
            "recall": self.row(),
            "first_hit_rank": {str(t): ranks for t, ranks in self.first_hit_rank.items()},
        }
        if config is not None:
            payload["config"] = config
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["k", "theta", "recall"])
        for (k, theta), v in sorted(self.recalls.items()):
            writer.writerow([k, theta, f"{v:.4f}"])
        return buf.getvalue()


def evaluate(predictions, gts, ks=DEFAULT_KS, thetas=DEFAULT_THETAS, strict: bool = True) -> EvalReport:
    if not gts:
        raise EmptyQuerySet("no queries to evaluate")
    recalls = {(k, t): recall_at_k(predictions, gts, k, t, strict) for k in ks for t in thetas}
    first = {}
    for t in thetas:
        ranks = {}
        for qid, gt in gts.items():
            hits = np.nonzero(_hits(_hit_ious(list(predictions.get(qid, [])), gt), t, strict))[0]
            ranks[qid] = int(hits[0]) + 1 if hits.size else None
        first[t] = ranks
    return EvalReport(recalls, len(gts), first)


def outputs_to_predictions(instances, outputs) -> dict[str, list[Span]]:
    return {inst.query_id: [p.span for p in out.predictions] for inst, out in zip(instances, outputs)}


def ground_truths(instances) -> dict[str, Span]:
    return {inst.query_id: inst.gt for inst in instances}


def evaluate_models(instances, cfg: PipelineConfig, scorer, adapter, threads: int = 1) -> EvalReport:
    outputs = ground_all(instances, cfg, scorer, adapter, threads=threads)
    return evaluate(outputs_to_predictions(instances, outputs), ground_truths(instances), strict=cfg.strict_iou)


# Cumulative ablation rows: each removes one more component than the row above.
ABLATION_VARIANTS = {
    "full": {},
    "-adapter": {"use_adapter": False},
    "-fusion": {"use_adapter": False, "use_fusion": False},
    "-con": {"use_adapter": False, "use_fusion": False, "lambda_con": 0.0},
    "baseline": {"use_adapter": False, "use_fusion": False, "lambda_con": 0.0, "top_k_windows": None},
}


def _training_key(cfg: PipelineConfig) -> tuple:
    return (cfg.use_adapter, cfg.lambda_con, cfg.joint_training, cfg.window_length)


def variant_config(base: PipelineConfig, overrides: dict, num_windows: int) -> PipelineConfig:
    changes = dict(overrides)
    if "top_k_windows" in changes and changes["top_k_windows"] is None:
        changes["top_k_windows"] = max(1, num_windows)
    return base.replace(**changes)


def run_ablation(train, test, base: PipelineConfig, variants=None, checkpoints=None, threads: int = 1):
    """Evaluate each variant on ``test``; returns ``[(name, config, report), ...]``.

    Variants that share training settings share one trained model. When
    ``checkpoints`` (``{name: (adapter, scorer)}``) is given, nothing is
    trained and every variant must be present.
    """
    from .windowing import slice_windows

    variants = variants or ABLATION_VARIANTS
    max_windows = max(len(slice_windows(len(i.video), base.window_length)) for i in test)
    trained: dict[tuple, tuple] = {}
    rows = []
    for name, overrides in variants.items():
        cfg = variant_config(base, overrides, max_windows)
        if checkpoints is not None:
            if name not in checkpoints:
                raise MissingCheckpoint(name)
            adapter, scorer = checkpoints[name]
        else:
            key = _training_key(cfg)
            if key not in trained:
                trained[key] = train_models(train, cfg)
            adapter, scorer = trained[key]
        rows.append((name, cfg, evaluate_models(test, cfg, scorer, adapter, threads)))
    return rows


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    metric_names = list(rows[0][2].row()) if rows else []
    writer.writerow(["variant", "use_adapter", "use_fusion", "lambda_con", "top_k_windows", *metric_names, "queries"])
    for name, cfg, report in rows:
        metrics = report.row()
        writer.writerow(
            [name, cfg.use_adapter, cfg.use_fusion, cfg.lambda_con, cfg.top_k_windows]
            + [f"{metrics[m]:.4f}" for m in metric_names]
            + [report.num_queries]
        )
    return buf.getvalue()


def sweep_window_length(train, test, base: PipelineConfig, lengths, threads: int = 1):
    """Retrain and evaluate at each window length; returns ``[(length, report), ...]``."""
    out = []
    for length in lengths:
        cfg = base.replace(window_length=int(length))
        adapter, scorer = train_models(train, cfg)
        out.append((int(length), evaluate_models(test, cfg, scorer, adapter, threads)))
    return out


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    metric_names = list(rows[0][1].row()) if rows else []
    writer.writerow(["window_length", *metric_names])
    for length, report in rows:
        metrics = report.row()
        writer.writerow([length] + [f"{metrics[m]:.4f}" for m in metric_names])
    return buf.getvalue()
