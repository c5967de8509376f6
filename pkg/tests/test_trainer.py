import math
from itertools import permutations

import numpy as np
import pytest

from rbe import ablation
from rbe.model import init_params
from rbe.trainer import (
    ClickPair,
    Dataset,
    EpochRecord,
    SampleGroup,
    TrainConfig,
    TrainingDiverged,
    cross_sample,
    evaluate_auc,
    group_loss,
    group_probability,
    objective,
    read_history,
    read_labeled_pairs,
    read_pairs,
    split_pairs,
    train,
    write_history,
    write_labeled_pairs,
    write_pairs,
)
from conftest import ABLATION_SEEDS


def pairs_of(n, prefix="k"):
    return [ClickPair(f"query {i}", f"{prefix} {i}") for i in range(n)]


class TestCrossSample:
    def test_two_pairs(self):
        p = pairs_of(2)
        groups = cross_sample(p, 1, seed=0)
        assert [g.negatives for g in groups] == [
            (ClickPair("query 0", "k 1"),),
            (ClickPair("query 1", "k 0"),),
        ]

    def test_all_others_when_exhausted(self):
        p = pairs_of(11)
        for g in cross_sample(p, 10, seed=5):
            kws = {n.keyword for n in g.negatives}
            assert kws == {x.keyword for x in p} - {g.positive.keyword}
            assert all(n.query == g.positive.query for n in g.negatives)

    def test_duplicate_keyword_not_self_negative(self):
        p = [ClickPair("a", "shoes"), ClickPair("b", "shoes"), ClickPair("c", "hats"), ClickPair("d", "bags")]
        for seed in range(20):
            for g in cross_sample(p, 2, seed):
                assert g.positive.keyword not in {n.keyword for n in g.negatives}
                assert len({n.keyword for n in g.negatives}) == 2

    def test_deterministic_and_seeded(self):
        p = pairs_of(30)
        assert cross_sample(p, 5, 1) == cross_sample(p, 5, 1)
        assert cross_sample(p, 5, 1) != cross_sample(p, 5, 2)

    def test_group_size(self):
        for g in cross_sample(pairs_of(40), 10, 3):
            assert len(g.negatives) == 10 and len(g.pairs) == 11

    def test_too_small(self):
        with pytest.raises(ValueError):
            cross_sample(pairs_of(1), 1)
        with pytest.raises(ValueError, match="distinct"):
            cross_sample(pairs_of(5), 5)
        with pytest.raises(ValueError):
            cross_sample(pairs_of(5), 0)


class TestGroupProbability:
    def test_uniform(self):
        assert group_probability([0.3] * 11, 4, 10.0) == pytest.approx(1 / 11)

    def test_two_element(self):
        assert group_probability([1.0, 0.0], 0, 10.0) == pytest.approx(math.exp(10) / (math.exp(10) + 1))
        assert group_probability([1.0, 0.0], 0, 10.0) == pytest.approx(0.9999546, abs=1e-7)

    def test_temperature_washout(self):
        assert group_probability([0.9, -0.2, 0.4], 0, 1e-12) == pytest.approx(1 / 3)

    def test_rotations_sum_to_one(self, rng):
        sims = rng.uniform(-1, 1, 7)
        assert sum(group_probability(sims, i, 10.0) for i in range(7)) == pytest.approx(1.0)

    def test_monotone_gamma(self):
        sims = [0.8, 0.5, 0.79, -0.1]
        probs = [group_probability(sims, 0, g) for g in (0.5, 1, 2, 5, 10, 50)]
        assert all(a < b for a, b in zip(probs, probs[1:]))

    def test_stable_for_large_gamma(self):
        assert group_probability([1.0, -1.0], 0, 1e4) == 1.0

    def test_errors(self):
        with pytest.raises(ValueError):
            group_probability([], 0, 1.0)
        with pytest.raises(ValueError):
            group_probability([0.1, math.nan], 0, 1.0)
        with pytest.raises(IndexError):
            group_probability([0.1], 3, 1.0)


class TestObjective:
    def test_uniform_group(self):
        q = np.array([[1.0, 0.0]])
        k = np.tile([[1.0, 1.0]], (11, 1))
        loss, _, _ = group_loss(q, k, np.array([0]), np.arange(11)[None, :], 10.0)
        assert loss == pytest.approx(math.log(11))

    def test_saturated(self):
        q = np.array([[1.0, 0.0]])
        k = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
        loss, _, _ = group_loss(q, k, np.array([0]), np.array([[0, 1, 2]]), 200.0)
        assert loss < 1e-80

    def test_two_groups_mean_of_scalar_oracle(self, rng):
        q = rng.standard_normal((2, 3))
        k = rng.standard_normal((5, 3))
        k_index = np.array([[0, 1, 2], [3, 4, 0]])
        loss, _, _ = group_loss(q, k, np.array([0, 1]), k_index, 4.0)
        cos = lambda a, b: a @ b / np.linalg.norm(a) / np.linalg.norm(b)  # noqa: E731
        want = np.mean([-math.log(group_probability([cos(q[g], k[j]) for j in k_index[g]], 0, 4.0)) for g in range(2)])
        assert loss == pytest.approx(want)

    def test_gradient_finite_differences(self, rng):
        q = rng.standard_normal((3, 4))
        k = rng.standard_normal((6, 4))
        qi, ki = np.array([0, 1, 2]), np.array([[0, 1, 2], [3, 4, 5], [1, 3, 5]])
        _, dq, dk = group_loss(q, k, qi, ki, 3.0)
        eps = 1e-6
        for arr, grad in ((q, dq), (k, dk)):
            num = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                keep = arr[idx]
                arr[idx] = keep + eps
                hi = group_loss(q, k, qi, ki, 3.0)[0]
                arr[idx] = keep - eps
                lo = group_loss(q, k, qi, ki, 3.0)[0]
                arr[idx] = keep
                num[idx] = (hi - lo) / (2 * eps)
            assert np.linalg.norm(num - grad) / np.linalg.norm(num + grad) < 1e-6

    def test_zero_vector_gets_zero_gradient(self):
        q = np.array([[0.0, 0.0], [1.0, 0.0]])
        k = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss, dq, _ = group_loss(q, k, np.array([0, 1]), np.array([[0, 1], [1, 0]]), 10.0)
        assert math.isfinite(loss)
        assert not np.any(dq[0])

    def test_invariant_to_negative_order(self):
        params = init_params(m=4, n=8, u=1, v=1, hash_dim=64, seed=2)
        pos = ClickPair("cheap flights", "airline tickets")
        negs = [ClickPair("cheap flights", k) for k in ("red shoes", "garden hose", "tax help")]
        losses = {round(objective([SampleGroup(pos, tuple(p))], params), 12) for p in permutations(negs)}
        assert len(losses) == 1

    def test_no_groups(self):
        with pytest.raises(ValueError):
            objective([], init_params(m=4, n=4, hash_dim=8))


class TestAuc:
    def test_perfect(self):
        assert evaluate_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_hand_case(self):
        assert evaluate_auc([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0]) == 0.75

    def test_ties_count_half(self):
        assert evaluate_auc([0.5, 0.5], [1, 0]) == 0.5

    def test_random(self, rng):
        scores = rng.random(20000)
        labels = rng.integers(0, 2, 20000)
        assert evaluate_auc(scores, labels) == pytest.approx(0.5, abs=0.02)

    def test_pairwise_oracle(self, rng):
        scores = rng.integers(0, 5, 60).astype(float)
        labels = rng.integers(0, 2, 60)
        pos, neg = scores[labels == 1], scores[labels == 0]
        want = np.mean([(p > n) + 0.5 * (p == n) for p in pos for n in neg])
        assert evaluate_auc(scores, labels) == pytest.approx(want)

    def test_single_class(self):
        with pytest.raises(ValueError):
            evaluate_auc([0.1, 0.2], [1, 1])


class TestTrain:
    def test_validation_loss_drops(self, small_dataset):
        config = TrainConfig(m=16, n=8, u=1, v=1, hash_dim=1024, epochs=6, seed=0)
        result = train(small_dataset, config)
        first = result.history[0].valid_loss
        assert result.final.valid_loss <= 0.7 * first
        assert [r.epoch for r in result.history] == list(range(len(result.history)))

    def test_deterministic(self, small_dataset):
        config = TrainConfig(m=8, n=8, hash_dim=512, epochs=2, seed=4)
        a, b = train(small_dataset, config), train(small_dataset, config)
        assert a.history == b.history
        np.testing.assert_array_equal(a.params.query.encoder, b.params.query.encoder)

    def test_zero_learning_rate(self, small_dataset):
        config = TrainConfig(m=8, n=8, hash_dim=512, epochs=2, learning_rate=0.0, seed=1)
        start = init_params(m=8, n=8, u=1, v=1, hash_dim=512, seed=1)
        result = train(small_dataset, config, params=start)
        for side in ("query", "keyword"):
            for (_, a), (_, b) in zip(start.side(side).arrays(), result.params.side(side).arrays()):
                np.testing.assert_array_equal(a, b)

    def test_memorizes_one_group(self):
        pairs = [ClickPair(f"topic{i} alpha{i}", f"word{i} thing{i}") for i in range(11)]
        data = Dataset(pairs, pairs)
        config = TrainConfig(
            m=16, n=16, u=0, v=0, hash_dim=256, epochs=150, batch_size=11, group_size=11,
            learning_rate=0.02, lr_step=1000, patience=1000, binarized=False, seed=0,
        )
        result = train(data, config)
        assert result.history[-1].train_loss < 0.05 * result.history[0].train_loss

    def test_divergence_detected(self, small_dataset):
        params = init_params(m=4, n=4, u=0, v=0, hash_dim=256, binarized=False)
        params.query.encoder[:] = np.nan
        config = TrainConfig(m=4, n=4, u=0, v=0, hash_dim=256, epochs=2, binarized=False)
        with pytest.raises(TrainingDiverged):
            train(small_dataset, config, params=params)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(gamma=0)
        with pytest.raises(ValueError):
            TrainConfig(group_size=1)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=4, group_size=11)
        assert TrainConfig().negatives == 10

    def test_learning_rate_schedule(self):
        c = TrainConfig(learning_rate=0.4, lr_decay=0.5, lr_step=2)
        assert [c.learning_rate_at(e) for e in range(5)] == [0.4, 0.4, 0.2, 0.2, 0.1]


class TestIO:
    def test_pairs_roundtrip(self, tmp_path):
        pairs = pairs_of(5)
        write_pairs(pairs, tmp_path / "p.tsv")
        assert read_pairs(tmp_path / "p.tsv") == pairs

    def test_malformed_line(self, tmp_path):
        (tmp_path / "p.tsv").write_text("a\tb\nno tab here\n", encoding="utf-8")
        with pytest.raises(ValueError, match=":2:"):
            read_pairs(tmp_path / "p.tsv")

    def test_labeled_roundtrip(self, tmp_path):
        pairs = pairs_of(4)
        write_labeled_pairs(pairs, [1, 0, 0, 1], tmp_path / "t.tsv")
        assert read_labeled_pairs(tmp_path / "t.tsv") == (pairs, [1, 0, 0, 1])

    def test_history_roundtrip(self, tmp_path):
        hist = [EpochRecord(0, 2.3, 2.4, 0.5), EpochRecord(1, 1.0, 1.1, 0.8)]
        write_history(hist, tmp_path / "h.jsonl")
        assert read_history(tmp_path / "h.jsonl") == hist
        assert len((tmp_path / "h.jsonl").read_text().splitlines()) == 2

    def test_split(self):
        pairs = pairs_of(100)
        a, b = split_pairs(pairs, 0.2, 0)
        assert len(a) == 80 and len(b) == 20 and set(a) | set(b) == set(pairs)


@pytest.mark.slow
class TestAblationShape:
    """Per-seed orderings on the committed synthetic benchmark."""

    def _auc(self, rows, name):
        return {r.seed: r.auc for r in rows if r.name == name}

    def test_two_bit_beats_one_bit_every_seed(self, ablation_rows):
        one, two = self._auc(ablation_rows, "1bit"), self._auc(ablation_rows, "2bit")
        assert all(two[s] > one[s] for s in ABLATION_SEEDS)

    def test_full_precision_on_top_every_seed(self, ablation_rows):
        full = self._auc(ablation_rows, "full_precision")
        for name in ("1bit", "2bit", "2bit_unweighted"):
            other = self._auc(ablation_rows, name)
            assert all(full[s] >= other[s] for s in ABLATION_SEEDS)

    def test_weighted_beats_unweighted_on_average(self, ablation_rows):
        means = ablation.mean_auc(ablation_rows)
        assert means["2bit"] > means["2bit_unweighted"]
