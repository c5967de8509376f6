"""Ablations over bits per dimension, residual weights and estimator type.

Learning rates were picked once per model family by validation loss on the
synthetic benchmark (seed 0) and are frozen here: binarized towers train well
around 0.5, while the tanh-only full-precision tower saturates above ~0.05.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from rbe.synthetic import make_benchmark
from rbe.trainer import Dataset, TrainConfig, train

BASE = TrainConfig(
    m=16,
    n=8,
    hash_dim=4096,
    gamma=10.0,
    epochs=30,
    learning_rate=0.5,
    lr_decay=0.5,
    lr_step=10,
    batch_size=64,
    group_size=11,
    patience=3,
)

VARIANTS: dict[str, dict] = {
    "1bit": dict(u=0, v=0),
    "2bit": dict(u=1, v=1),
    "2bit_unweighted": dict(u=1, v=1, use_residual_weights=False),
    "3bit_query": dict(u=2, v=1),
    "full_precision": dict(u=0, v=0, binarized=False, learning_rate=0.02),
    "2bit_annealing": dict(u=1, v=1, estimator="annealing_tanh"),
    "2bit_straight_through": dict(u=1, v=1, estimator="straight_through"),
}


def config_for(name: str, seed: int) -> TrainConfig:
    return replace(BASE, seed=seed, **VARIANTS[name])


@dataclass
class AblationRow:
    name: str
    seed: int
    auc: float
    valid_loss: float
    epochs: int


def run(names, seeds, dataset: Dataset | None = None) -> list[AblationRow]:
    dataset = dataset or make_benchmark()
    rows = []
    for name in names:
        for seed in seeds:
            result = train(dataset, config_for(name, seed))
            best = result.final
            rows.append(AblationRow(name, seed, best.auc, best.valid_loss, len(result.history) - 1))
    return rows


def mean_auc(rows: list[AblationRow]) -> dict[str, float]:
    out: dict[str, list[float]] = {}
    for r in rows:
        out.setdefault(r.name, []).append(r.auc)
    return {k: float(np.mean(v)) for k, v in out.items()}
