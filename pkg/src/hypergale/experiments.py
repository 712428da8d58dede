"""Held-out runs on planted-structure cohorts, shared by scripts/ and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data import SynthSpec, generate_synthetic, planted_block, split_stratified
from .interpret import roi_importance
from .metrics import MetricsReport, metrics_from_scores
from .training import TrainConfig, TrainResult, predict, train


@dataclass
class HoldoutRun:
    spec: SynthSpec
    metrics: MetricsReport
    result: TrainResult
    seconds: float
    block: np.ndarray
    top_rois: list[int]
    edge_weight_block: float
    edge_weight_rest: float

    @property
    def top_in_block_fraction(self) -> float:
        block = set(self.block.tolist())
        return sum(i in block for i in self.top_rois) / len(self.top_rois)

    def summary(self) -> dict:
        return {
            "seed": self.spec.seed,
            "effect_strength": self.spec.effect_strength,
            "accuracy": self.metrics.accuracy,
            "auc": self.metrics.auc,
            "best_epoch": self.result.best_epoch,
            "seconds": round(self.seconds, 2),
            "top_in_block_fraction": self.top_in_block_fraction,
            "edge_weight_block": self.edge_weight_block,
            "edge_weight_rest": self.edge_weight_rest,
        }


def holdout_run(
    spec: SynthSpec,
    config: TrainConfig | None = None,
    test_fraction: float = 0.2,
    val_fraction: float = 0.125,
    top_n: int | None = None,
) -> HoldoutRun:
    """Generate, split train/val/test (stratified), train, and score the test split.

    Training seed and split seeds follow ``spec.seed`` unless ``config`` is given.
    """
    config = config or TrainConfig(seed=spec.seed)
    records = generate_synthetic(spec)
    rest, test = split_stratified(records, test_fraction, spec.seed)
    tr, val = split_stratified(rest, val_fraction, spec.seed + 1)
    t0 = time.perf_counter()
    result = train(config, tr, val)
    seconds = time.perf_counter() - t0
    scores = predict(result.params, result.hyper, test)
    metrics = metrics_from_scores(scores, [r.label for r in test])

    block = planted_block(spec)
    top_n = top_n or spec.block_size
    ranking = roi_importance(result.params, result.hyper, test, group_by=None, top_n=top_n).rankings[0]
    w = result.params.effective_edge_weights()
    in_block = np.zeros(spec.n_rois, dtype=bool)
    in_block[block] = True
    return HoldoutRun(
        spec, metrics, result, seconds, block,
        [e.roi_index for e in ranking.entries],
        float(w[in_block].mean()), float(w[~in_block].mean()),
    )
