"""Sample groups, the group-softmax objective and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from rbe.features import DEFAULT_HASH_DIM, Featurizer
from rbe.model import RbeModelParams, SideParams, backward, forward, init_params

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-12


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ClickPair:
    query: str
    keyword: str


@dataclass(frozen=True)
class SampleGroup:
    positive: ClickPair
    negatives: tuple[ClickPair, ...]

    @property
    def pairs(self) -> tuple[ClickPair, ...]:
        return (self.positive,) + self.negatives


@dataclass
class TrainConfig:
    m: int = 288
    n: int = 64
    u: int = 1
    v: int = 1
    hash_dim: int = DEFAULT_HASH_DIM
    gamma: float = 10.0
    epochs: int = 20
    learning_rate: float = 0.5
    lr_decay: float = 0.5
    lr_step: int = 10
    batch_size: int = 64
    group_size: int = 11
    seed: int = 0
    estimator: str = "straight_through_variant"
    alpha_growth: float = 1.1
    use_residual_weights: bool = True
    use_bias: bool = True
    binarized: bool = True
    patience: int = 3

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")
        if self.batch_size < self.group_size:
            raise ValueError("batch_size must be at least group_size")
        if self.epochs < 0 or self.learning_rate < 0:
            raise ValueError("epochs and learning_rate must be nonnegative")

    @property
    def negatives(self) -> int:
        return self.group_size - 1

    def learning_rate_at(self, epoch: int) -> float:
        """Step decay; ``epoch`` counts from 0."""
        return self.learning_rate * self.lr_decay ** (epoch // max(self.lr_step, 1))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    auc: float


@dataclass
class Dataset:
    train: list[ClickPair]
    valid: list[ClickPair]
    test_pairs: list[ClickPair] = field(default_factory=list)
    test_labels: list[int] = field(default_factory=list)


@dataclass
class TrainResult:
    params: RbeModelParams
    history: list[EpochRecord]

    @property
    def final(self) -> EpochRecord:
        return min(self.history, key=lambda r: r.valid_loss)


# -- sampling -----------------------------------------------------------------


def cross_sample(pairs: Sequence[ClickPair], neg_per_pair: int, seed: int = 0) -> list[SampleGroup]:
    """One group per pair, negatives crossing its query with other keywords.

    Negative keywords are distinct strings taken from the other pairs of the
    batch and never equal the positive keyword.
    """
    if len(pairs) < 2:
        raise ValueError("cross sampling needs at least two pairs")
    if neg_per_pair < 1:
        raise ValueError("neg_per_pair must be at least 1")
    rng = np.random.default_rng(seed)
    keywords = list(dict.fromkeys(p.keyword for p in pairs))
    position = {k: i for i, k in enumerate(keywords)}
    if len(keywords) - 1 < neg_per_pair:
        raise ValueError(
            f"batch supplies only {len(keywords) - 1} distinct negative keywords, need {neg_per_pair}"
        )
    # random keys per (pair, pool slot); the smallest keys pick the negatives.
    # The pool excludes the pair's own keyword by shifting indices past it.
    keys = rng.random((len(pairs), len(keywords) - 1))
    picks = np.argsort(keys, axis=1, kind="stable")[:, :neg_per_pair]
    own = np.array([position[p.keyword] for p in pairs])
    picks += picks >= own[:, None]
    return [
        SampleGroup(pair, tuple(ClickPair(pair.query, keywords[i]) for i in row))
        for pair, row in zip(pairs, picks.tolist())
    ]


# -- objective ----------------------------------------------------------------


def group_probability(similarities: Sequence[float], positive_index: int, gamma: float) -> float:
    """Softmax with smoothing factor ``gamma`` evaluated at the positive slot."""
    sims = np.asarray(similarities, dtype=np.float64)
    if sims.size == 0:
        raise ValueError("empty group")
    if not 0 <= positive_index < sims.size:
        raise IndexError("positive index out of range")
    if not np.all(np.isfinite(sims)):
        raise ValueError("non-finite similarity")
    z = gamma * sims
    z -= z.max()
    w = np.exp(z)
    return float(w[positive_index] / w.sum())


def _normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.maximum(np.linalg.norm(x, axis=1), NORM_FLOOR)
    return x / norms[:, None], norms


def _normalize_backward(xn: np.ndarray, norms: np.ndarray, grad_xn: np.ndarray) -> np.ndarray:
    # cosine is undefined at the origin; zero rows get similarity 0 and no gradient
    proj = np.einsum("ij,ij->i", xn, grad_xn)
    grad = (grad_xn - xn * proj[:, None]) / norms[:, None]
    grad[norms <= NORM_FLOOR] = 0.0
    return grad


@dataclass
class _Batch:
    """Group structure over unique query and keyword rows."""

    queries: list[str]
    keywords: list[str]
    q_index: np.ndarray  # (groups,)
    k_index: np.ndarray  # (groups, group_size); column 0 is the positive


def _index_groups(groups: Sequence[SampleGroup]) -> _Batch:
    q_ids: dict[str, int] = {}
    k_ids: dict[str, int] = {}
    q_index = []
    k_index = []
    for g in groups:
        q_index.append(q_ids.setdefault(g.positive.query, len(q_ids)))
        k_index.append([k_ids.setdefault(p.keyword, len(k_ids)) for p in g.pairs])
    if len({len(row) for row in k_index}) != 1:
        raise ValueError("all groups must have the same size")
    return _Batch(list(q_ids), list(k_ids), np.asarray(q_index), np.asarray(k_index))


def group_loss(
    q_out: np.ndarray,
    k_out: np.ndarray,
    q_index: np.ndarray,
    k_index: np.ndarray,
    gamma: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean negative log probability of the positives, and its gradients.

    Returns ``(loss, dL/dq_out, dL/dk_out)``. Similarities are cosines of the
    tower outputs; column 0 of ``k_index`` holds each group's positive.
    """
    qn, q_norm = _normalize_rows(q_out)
    kn, k_norm = _normalize_rows(k_out)
    sims = np.einsum("gd,gsd->gs", qn[q_index], kn[k_index])
    z = gamma * sims
    z -= z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    groups = sims.shape[0]
    loss = float(-logp[:, 0].mean())
    grad_z = np.exp(logp)
    grad_z[:, 0] -= 1.0
    grad_sims = gamma * grad_z / groups
    grad_qn = np.zeros_like(qn)
    grad_kn = np.zeros_like(kn)
    np.add.at(grad_qn, q_index, np.einsum("gs,gsd->gd", grad_sims, kn[k_index]))
    np.add.at(grad_kn, k_index, grad_sims[:, :, None] * qn[q_index][:, None, :])
    return (
        loss,
        _normalize_backward(qn, q_norm, grad_qn),
        _normalize_backward(kn, k_norm, grad_kn),
    )


def _towers(params: RbeModelParams, batch: _Batch, featurizer: Featurizer, smooth: bool = False):
    q_trace = forward(params, "query", featurizer.batch(batch.queries), smooth=smooth)
    k_trace = forward(params, "keyword", featurizer.batch(batch.keywords), smooth=smooth)
    return q_trace, k_trace


def objective(groups: Sequence[SampleGroup], params: RbeModelParams) -> float:
    """Mean negative log probability of each group's positive pair."""
    if not groups:
        raise ValueError("no groups")
    batch = _index_groups(groups)
    q_trace, k_trace = _towers(params, batch, params.featurizer)
    loss, _, _ = group_loss(q_trace.output, k_trace.output, batch.q_index, batch.k_index, params.gamma)
    return loss


def loss_and_grads(
    groups: Sequence[SampleGroup], params: RbeModelParams, smooth: bool = False
) -> tuple[float, SideParams, SideParams]:
    batch = _index_groups(groups)
    q_trace, k_trace = _towers(params, batch, params.featurizer, smooth=smooth)
    loss, gq, gk = group_loss(q_trace.output, k_trace.output, batch.q_index, batch.k_index, params.gamma)
    return loss, backward(params, q_trace, gq), backward(params, k_trace, gk)


# -- metrics ------------------------------------------------------------------


def evaluate_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """ROC AUC via the Mann-Whitney U statistic; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative labels")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pair_scores(params: RbeModelParams, pairs: Sequence[ClickPair]) -> np.ndarray:
    """Cosine similarity of each pair's refined embeddings."""
    feat = params.featurizer
    q = forward(params, "query", feat.batch([p.query for p in pairs])).output
    k = forward(params, "keyword", feat.batch([p.keyword for p in pairs])).output
    qn, _ = _normalize_rows(q)
    kn, _ = _normalize_rows(k)
    return np.einsum("ij,ij->i", qn, kn)


# -- training loop ------------------------------------------------------------


def _batches(pairs: Sequence[ClickPair], size: int, rng: np.random.Generator | None):
    order = np.arange(len(pairs)) if rng is None else rng.permutation(len(pairs))
    for start in range(0, len(order), size):
        chunk = [pairs[i] for i in order[start : start + size]]
        if len(chunk) >= 2:
            yield chunk


def _fixed_groups(pairs: Sequence[ClickPair], config: TrainConfig, seed: int) -> list[list[SampleGroup]]:
    out = []
    for b, chunk in enumerate(_batches(pairs, config.batch_size, None)):
        try:
            out.append(cross_sample(chunk, config.negatives, seed + b))
        except ValueError:
            continue
    return out


def _mean_loss(group_batches: list[list[SampleGroup]], params: RbeModelParams) -> float:
    total = 0.0
    count = 0
    for groups in group_batches:
        total += objective(groups, params) * len(groups)
        count += len(groups)
    return total / count if count else float("nan")


def _sgd(side: SideParams, grads: SideParams, lr: float) -> None:
    for (_, p), (_, g) in zip(side.arrays(), grads.arrays()):
        p -= lr * g


def _check_finite(loss: float, epoch: int, step: int) -> None:
    if not math.isfinite(loss):
        raise TrainingDiverged(f"loss became {loss} at epoch {epoch}, step {step}")


def train(dataset: Dataset, config: TrainConfig, params: RbeModelParams | None = None) -> TrainResult:
    """Plain SGD over cross-sampled groups with early stopping on validation loss.

    Epoch 0 in the history is the untrained model. The returned parameters are
    those with the lowest validation loss.
    """
    if params is None:
        params = init_params(
            m=config.m,
            n=config.n,
            u=config.u,
            v=config.v,
            hash_dim=config.hash_dim,
            seed=config.seed,
            gamma=config.gamma,
            estimator=config.estimator,
            alpha_growth=config.alpha_growth,
            use_residual_weights=config.use_residual_weights,
            use_bias=config.use_bias,
            binarized=config.binarized,
        )
    else:
        params = params.copy()
    rng = np.random.default_rng(config.seed)
    train_eval = _fixed_groups(dataset.train, config, config.seed + 1_000_003)
    valid_groups = _fixed_groups(dataset.valid, config, config.seed + 2_000_003)

    def record(epoch: int, train_loss: float | None = None) -> EpochRecord:
        if train_loss is None:
            train_loss = _mean_loss(train_eval, params)
        valid_loss = _mean_loss(valid_groups, params) if valid_groups else float("nan")
        auc = float("nan")
        if dataset.test_pairs:
            auc = evaluate_auc(pair_scores(params, dataset.test_pairs), dataset.test_labels)
        return EpochRecord(epoch, train_loss, valid_loss, auc)

    history = [record(0)]
    best = params.copy()
    best_loss = history[0].valid_loss
    stale = 0
    for epoch in range(1, config.epochs + 1):
        lr = config.learning_rate_at(epoch - 1)
        running = 0.0
        seen = 0
        for step, chunk in enumerate(_batches(dataset.train, config.batch_size, rng)):
            try:
                groups = cross_sample(chunk, config.negatives, int(rng.integers(2**31)))
            except ValueError:
                continue
            loss, gq, gk = loss_and_grads(groups, params)
            _check_finite(loss, epoch, step)
            if lr:
                _sgd(params.query, gq, lr)
                _sgd(params.keyword, gk, lr)
            running += loss * len(groups)
            seen += len(groups)
        if params.estimator == "annealing_tanh":
            params.alpha *= config.alpha_growth
        rec = record(epoch, running / seen if seen else float("nan"))
        _check_finite(rec.valid_loss if valid_groups else rec.train_loss, epoch, -1)
        history.append(rec)
        log.info("epoch %d train %.4f valid %.4f auc %.4f", epoch, rec.train_loss, rec.valid_loss, rec.auc)
        if not valid_groups:
            best = params.copy()
            continue
        if rec.valid_loss < best_loss:
            best_loss = rec.valid_loss
            best = params.copy()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return TrainResult(best, history)


# -- I/O ----------------------------------------------------------------------


def read_pairs(path: str | Path) -> list[ClickPair]:
    """Tab-separated ``query<TAB>keyword`` lines, UTF-8."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
                raise ValueError(f"{path}:{lineno}: expected 'query<TAB>keyword'")
            pairs.append(ClickPair(parts[0], parts[1]))
    return pairs


def write_pairs(pairs: Iterable[ClickPair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(f"{p.query}\t{p.keyword}\n")


def read_labeled_pairs(path: str | Path) -> tuple[list[ClickPair], list[int]]:
    """``query<TAB>keyword<TAB>label`` lines with label 0 or 1."""
    pairs, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: expected 'query<TAB>keyword<TAB>0|1'")
            pairs.append(ClickPair(parts[0], parts[1]))
            labels.append(int(parts[2]))
    return pairs, labels


def write_labeled_pairs(pairs: Iterable[ClickPair], labels: Iterable[int], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p, y in zip(pairs, labels):
            fh.write(f"{p.query}\t{p.keyword}\t{int(y)}\n")


def write_history(history: Iterable[EpochRecord], path: str | Path) -> None:
    """One JSON object per line: epoch, train_loss, valid_loss, auc."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(asdict(rec)) + "\n")


def read_history(path: str | Path) -> list[EpochRecord]:
    with open(path, encoding="utf-8") as fh:
        return [EpochRecord(**json.loads(line)) for line in fh if line.strip()]


def split_pairs(pairs: Sequence[ClickPair], valid_fraction: float, seed: int) -> tuple[list, list]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    cut = int(round(len(pairs) * (1 - valid_fraction)))
    return [pairs[i] for i in order[:cut]], [pairs[i] for i in order[cut:]]

