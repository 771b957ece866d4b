"""Training loop for the toy decoder under any matching scheme.

Matching and losses run in numpy per scene; their analytic gradients are
fed back into the decoder as upstream gradients of the predicted
probabilities and boxes. Validation always reports the one-to-one loss and
AP of the main query group, whatever the training scheme.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from ..errors import ConfigError, DegenerateGeometryError, DivergenceError, InvalidGeometryError
from ..evaluation import Detection, average_precision, predictions_to_detections
from ..losses import (
    LossBreakdown,
    hybrid_epoch_loss,
    hybrid_layer_loss,
    naive_hybrid_loss,
    one2one_loss,
    optimized_hybrid_loss,
)
from ..matching import HybridConfig, LayerPredictions, MatchWeights, one2many_epochs
from .decoder import ToyDecoder, collate, upstream_pairs

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "scheme", "train_total", "val_one2one_total", "val_AP50", "positive_count")


@dataclass
class OptimizerParams:
    name: str = "sgd"
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 8
    grad_clip: Optional[float] = None


@dataclass
class ModelParams:
    d: int = 32
    heads: int = 2
    ffn: int = 64


@dataclass
class EpochLog:
    epoch: int
    scheme: str
    train_total: float
    val_one2one_total: float
    val_AP50: float
    positive_count: int


@dataclass
class TrainResult:
    model: ToyDecoder
    logs: list
    step_totals: list = field(default_factory=list)
    step_one2one: list = field(default_factory=list)
    switch_epoch: Optional[int] = None


def make_optimizer(model: torch.nn.Module, op: OptimizerParams) -> torch.optim.Optimizer:
    if op.name == "sgd":
        return torch.optim.SGD(model.parameters(), lr=op.lr, momentum=op.momentum, weight_decay=op.weight_decay)
    if op.name == "adamw":
        return torch.optim.AdamW(model.parameters(), lr=op.lr, weight_decay=op.weight_decay)
    raise ConfigError(f"unknown optimizer {op.name!r}; expected 'sgd' or 'adamw'")


def build_model(cfg: HybridConfig, C: int, mp: ModelParams = ModelParams(), seed: int = 0) -> ToyDecoder:
    return ToyDecoder(d=mp.d, C=C, n=cfg.one2one_queries, T=cfg.one2many_queries, L=cfg.L, heads=mp.heads,
                      ffn=mp.ffn, sharing=cfg.sharing, seed=seed)


def scene_loss(cfg: HybridConfig, main: Sequence[LayerPredictions], aux: Sequence[LayerPredictions], truth,
               epoch: int, total_epochs: int, w: MatchWeights = MatchWeights(),
               optimized: bool = True) -> LossBreakdown:
    if cfg.scheme == "baseline":
        return one2one_loss(main, truth, w)
    if cfg.scheme == "hybrid_branch":
        fn = optimized_hybrid_loss if optimized else naive_hybrid_loss
        return fn(main, aux, truth, cfg, w)
    if cfg.scheme == "hybrid_epoch":
        return hybrid_epoch_loss(main, truth, cfg, epoch, total_epochs, w)
    return hybrid_layer_loss(main, truth, cfg, w)


def _batch_predictions(outputs: dict) -> dict:
    return {g: [(s.detach().numpy(), b.detach().numpy()) for s, b in layers] for g, layers in outputs.items()}


def _scene_predictions(arrays: dict, i: int) -> dict:
    return {g: [LayerPredictions(s[i], b[i], layer_index=l) for l, (s, b) in enumerate(layers)]
            for g, layers in arrays.items()}


def predict(model: ToyDecoder, scenes: Sequence, batch_size: int = 25) -> list[dict]:
    """Per-scene ``{"main": [...], "aux": [...]}`` layer predictions, no gradients."""
    out = []
    with torch.no_grad():
        for start in range(0, len(scenes), batch_size):
            chunk = scenes[start:start + batch_size]
            arrays = _batch_predictions(model.run(*collate(chunk)))
            out += [_scene_predictions(arrays, i) for i in range(len(chunk))]
    return out


def detections(preds: Sequence[dict], group: str = "main") -> list[list[Detection]]:
    """Detections from the last decoder layer of ``group``, one per query."""
    return [predictions_to_detections(p[group][-1].class_scores, p[group][-1].boxes) for p in preds]


def validate(model: ToyDecoder, scenes: Sequence, w: MatchWeights = MatchWeights()) -> tuple[float, Optional[float]]:
    """Mean one-to-one loss of the main group and its AP50 without NMS."""
    preds = predict(model, scenes)
    losses = [one2one_loss(p["main"], s.truth, w).total for p, s in zip(preds, scenes)]
    ap = average_precision(detections(preds), [s.truth for s in scenes], 0.5)
    return float(np.mean(losses)), ap


def train(cfg: HybridConfig, train_scenes: Sequence, val_scenes: Sequence, epochs: int,
          optimizer_params: OptimizerParams = OptimizerParams(), seed: int = 0,
          model_params: ModelParams = ModelParams(), weights: MatchWeights = MatchWeights(),
          num_classes: Optional[int] = None, optimized: bool = True,
          on_epoch: Optional[Callable[[EpochLog], None]] = None) -> TrainResult:
    """Train a fresh :class:`ToyDecoder` and log one :class:`EpochLog` per epoch.

    ``seed`` is split into a model-initialization seed and a shuffling seed.
    Raises :class:`DivergenceError` as soon as a step produces a non-finite loss
    or collapsed boxes.
    """
    try:
        return _train(cfg, train_scenes, val_scenes, epochs, optimizer_params, seed, model_params, weights,
                      num_classes, optimized, on_epoch)
    except (InvalidGeometryError, DegenerateGeometryError) as exc:
        raise DivergenceError(f"training diverged: {exc}") from exc


def _train(cfg, train_scenes, val_scenes, epochs, optimizer_params, seed, model_params, weights, num_classes,
           optimized, on_epoch) -> TrainResult:
    torch.use_deterministic_algorithms(True)
    C = num_classes or train_scenes[0].truth.num_classes
    init_seed, shuffle_seed = np.random.SeedSequence(seed).generate_state(2, dtype=np.uint64)
    model = build_model(cfg, C, model_params, int(init_seed))
    rng = np.random.default_rng(int(shuffle_seed))
    op = optimizer_params
    opt = make_optimizer(model, op)
    result = TrainResult(model, [])
    if cfg.scheme == "hybrid_epoch":
        result.switch_epoch = one2many_epochs(cfg.rho, epochs)
        log.info("hybrid_epoch: one-to-many for epochs [0, %d), one-to-one after", result.switch_epoch)

    for epoch in range(epochs):
        order = rng.permutation(len(train_scenes))
        epoch_total, positives = 0.0, 0
        for start in range(0, len(order), op.batch_size):
            batch = [train_scenes[i] for i in order[start:start + op.batch_size]]
            B = len(batch)
            outputs = model.run(*collate(batch))
            arrays = _batch_predictions(outputs)
            upstream = []
            step_total, step_o2o = 0.0, 0.0
            for i, scene in enumerate(batch):
                preds = _scene_predictions(arrays, i)
                br = scene_loss(cfg, preds["main"], preds["aux"], scene.truth, epoch, epochs, weights, optimized)
                if not math.isfinite(br.total):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, scene seed {scene.seed}")
                upstream.append({g: [gr.scaled(1.0 / B) for gr in lst] for g, lst in br.grads.items()})
                step_total += br.total / B
                step_o2o += (br.one2one.total if br.one2one is not None else br.total) / B
                positives += br.num_pairs
            epoch_total += step_total * B
            result.step_totals.append(step_total)
            result.step_one2one.append(step_o2o)

            tensors, grads = upstream_pairs(outputs, upstream)
            opt.zero_grad(set_to_none=False)
            torch.autograd.backward(tensors, grads)
            if op.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), op.grad_clip)
            opt.step()

        val_loss, val_ap = validate(model, val_scenes, weights)
        if not math.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        entry = EpochLog(epoch, cfg.scheme, epoch_total / len(train_scenes), val_loss,
                         float("nan") if val_ap is None else val_ap, positives)
        result.logs.append(entry)
        log.debug("epoch %d: %s", epoch, entry)
        if on_epoch:
            on_epoch(entry)
    return result


def write_log_csv(logs: Sequence[EpochLog], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(LOG_FIELDS)
        for e in logs:
            wr.writerow([e.epoch, e.scheme, repr(e.train_total), repr(e.val_one2one_total), repr(e.val_AP50),
                         e.positive_count])


def read_log_csv(path) -> list[EpochLog]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EpochLog(int(r["epoch"]), r["scheme"], float(r["train_total"]), float(r["val_one2one_total"]),
                     float(r["val_AP50"]), int(r["positive_count"])) for r in rows]
