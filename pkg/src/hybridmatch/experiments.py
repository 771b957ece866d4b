"""Toy experiments: train under one scheme, evaluate both branches, write artifacts.

Artifacts of :func:`write_artifacts` (all deterministic for a fixed config)::

    train_log.csv               one row per epoch
    eval_<branch>_<nms>.json    branch in {one2one, one2many}, nms in {nms, nonms}
    summary.txt                 one line of key=value pairs
    params.txt                  trained decoder parameters (text format)
"""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import torch

from .config import ExperimentConfig
from .evaluation import apply_nms, evaluate
from .matching import HybridConfig
from .toymodel import generate_dataset, predict, save_params, train, write_log_csv
from .toymodel.training import TrainResult, detections

log = logging.getLogger(__name__)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    train: TrainResult
    reports: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def final(self):
        return self.train.logs[-1]

    def summary(self) -> str:
        parts = [
            f"scheme={self.config.hybrid.scheme}",
            f"seed={self.config.seed}",
            f"epochs={self.config.epochs}",
            f"final_train_total={self.final.train_total!r}",
            f"final_val_one2one_total={self.final.val_one2one_total!r}",
        ]
        for name, rep in self.reports.items():
            parts.append(f"ap50_{name}={rep.ap50!r}")
        return " ".join(parts)


def datasets(cfg: ExperimentConfig):
    seeds = cfg.seeds()
    d = cfg.data
    kw = dict(m_range=(d.m_min, d.m_max), C=d.num_classes, d=cfg.model.d, distractor_count=d.distractors,
              noise=d.noise)
    return generate_dataset(seeds["train_data"], d.train_count, **kw), generate_dataset(seeds["val_data"],
                                                                                       d.val_count, **kw)


def run(cfg: ExperimentConfig, on_epoch=None) -> ExperimentResult:
    """Train and evaluate in reference mode (single-threaded, deterministic)."""
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    train_scenes, val_scenes = datasets(cfg)
    res = train(cfg.hybrid, train_scenes, val_scenes, cfg.epochs, cfg.optimizer, cfg.seeds()["train"],
                cfg.model, num_classes=cfg.data.num_classes, on_epoch=on_epoch)
    preds = predict(res.model, val_scenes)
    truths = [s.truth for s in val_scenes]
    groups = [("one2one", "main")] + ([("one2many", "aux")] if preds[0]["aux"] else [])
    reports = {}
    for branch, group in groups:
        raw = detections(preds, group)
        for tag, dets in (("nonms", raw), ("nms", apply_nms(raw, cfg.eval.nms_iou))):
            reports[f"{branch}_{tag}"] = evaluate(dets, truths, cfg.eval.score_cut, cfg.eval.nms_iou)
    return ExperimentResult(cfg, res, reports, time.perf_counter() - t0)


def write_artifacts(result: ExperimentResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_log_csv(result.train.logs, out / "train_log.csv")
    for name, rep in result.reports.items():
        (out / f"eval_{name}.json").write_text(rep.to_json() + "\n")
    (out / "summary.txt").write_text(result.summary() + "\n")
    save_params(result.train.model, out / "params.txt")
    return out


def with_overrides(cfg: ExperimentConfig, scheme: Optional[str] = None, seed: Optional[int] = None,
                   **matching) -> ExperimentConfig:
    """Copy of ``cfg`` with a different scheme, seed or matching fields."""
    h = dataclasses.asdict(cfg.hybrid)
    if scheme is not None:
        h["scheme"] = scheme
    h.update(matching)
    return dataclasses.replace(cfg, hybrid=HybridConfig(**h), seed=cfg.seed if seed is None else seed)


@dataclass
class BenchmarkRow:
    seed: int
    baseline_ap50: float
    hybrid_ap50: float
    hybrid_one2many_nms_ap50: float
    baseline_val_loss: float
    hybrid_val_loss: float


def directional_benchmark(base: ExperimentConfig = None, seeds: Iterable[int] = range(5)) -> list[BenchmarkRow]:
    """Baseline vs. hybrid_branch on the same data and initialization seed, per seed."""
    base = base or ExperimentConfig()
    rows = []
    for seed in seeds:
        b = run(with_overrides(base, "baseline", seed))
        h = run(with_overrides(base, "hybrid_branch", seed))
        rows.append(BenchmarkRow(
            seed=seed,
            baseline_ap50=_nan_if_none(b.reports["one2one_nonms"].ap50),
            hybrid_ap50=_nan_if_none(h.reports["one2one_nonms"].ap50),
            hybrid_one2many_nms_ap50=_nan_if_none(h.reports["one2many_nms"].ap50),
            baseline_val_loss=b.final.val_one2one_total,
            hybrid_val_loss=h.final.val_one2one_total,
        ))
        log.info("seed %d: %s (%.0fs + %.0fs)", seed, rows[-1], b.seconds, h.seconds)
    return rows


def _nan_if_none(x) -> float:
    return float("nan") if x is None else float(x)

