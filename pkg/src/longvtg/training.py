"""Training driver: adapter on NCE, then the scoring head (or both jointly)."""

from __future__ import annotations

import logging
import math

import numpy as np

from .adapter import AdapterParams, AdapterTrainConfig, train_adapter
from .config import PipelineConfig
from .scorer import JointTrainConfig, ScorerParams, train_scorer

log = logging.getLogger(__name__)


def gt_frames(instance) -> np.ndarray:
    fps = instance.video.fps
    b = int(math.floor(instance.gt.start * fps + 1e-9))
    e = max(b + 1, int(math.ceil(instance.gt.end * fps - 1e-9)))
    return instance.video.vectors[b : min(e, len(instance.video))].astype(np.float64)


def adapter_config(cfg: PipelineConfig) -> AdapterTrainConfig:
    return AdapterTrainConfig(
        learning_rate=cfg.adapter_learning_rate,
        batch_size=cfg.batch_size,
        max_epochs=cfg.adapter_epochs,
        early_stop_patience=cfg.early_stop_patience,
        seed=cfg.stage_seed("adapter"),
        lambda_adapt=cfg.lambda_adapt,
        bottleneck=cfg.adapter_bottleneck or None,
        optimizer=cfg.optimizer,
    )


def scorer_config(cfg: PipelineConfig) -> JointTrainConfig:
    return JointTrainConfig(
        learning_rate=cfg.scorer_learning_rate,
        lambda_con=cfg.lambda_con,
        lambda_adapt=cfg.lambda_adapt,
        positive_iou_threshold=cfg.positive_iou_threshold,
        t_min=cfg.iou_t_min,
        t_max=cfg.iou_t_max,
        batch_size=cfg.batch_size,
        seed=cfg.stage_seed("scorer"),
        epochs=cfg.scorer_epochs,
        joint=cfg.joint_training,
        adapter_learning_rate=cfg.adapter_learning_rate,
        optimizer=cfg.optimizer,
    )


def train_models(instances, cfg: PipelineConfig):
    """Return ``(adapter or None, scorer)`` trained per the configuration."""
    instances = list(instances)
    adapter = None
    if cfg.use_adapter:
        acfg = adapter_config(cfg)
        if cfg.joint_training:
            adapter = AdapterParams.initial(instances[0].video.dim, acfg.bottleneck, acfg.seed)
        else:
            items = [(gt_frames(inst), inst.query.cls) for inst in instances]
            adapter, hist = train_adapter(items, acfg)
            log.info("adapter trained: best epoch %d, val loss %.4f", hist.best_epoch, min(hist.val_loss))
    scfg = scorer_config(cfg)
    scorer, adapter_out, hist = train_scorer(instances, adapter, scfg, cfg.window_length)
    if cfg.joint_training and adapter_out is not None:
        adapter = adapter_out
    log.info("scorer trained: final loss %.4f", hist.train_loss[-1])
    return adapter, scorer


def untrained_scorer(dim: int) -> ScorerParams:
    return ScorerParams.zeros(dim)
