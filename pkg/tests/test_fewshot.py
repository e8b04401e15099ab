import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import label_pool
from fssr.datasets import EpisodePool, SpeakerLabel
from fssr.errors import DimensionMismatch, EmptyClass
from fssr.fewshot import (
    argmax_random_ties,
    classify_query,
    compute_prototypes,
    evaluate_few_shot,
    mean_ci95,
    prototypical_loss,
)


def vector_pool(n_speakers, n_items, dim, noise, seed=0, speaker_free=False):
    """Items are noisy one-hot cluster centres (or pure noise when ``speaker_free``)."""
    rng = np.random.default_rng(seed)
    labels = [SpeakerLabel(i, f"s{i:02d}") for i in range(n_speakers)]
    table, items = {}, {}
    for i in range(n_speakers):
        items[i] = []
        for j in range(n_items):
            centre = np.zeros(dim) if speaker_free else np.eye(dim)[i % dim]
            table[(i, j)] = (centre + noise * rng.standard_normal(dim)).astype(np.float32)
            items[i].append((i, j))
    return EpisodePool(labels, items, table.__getitem__)


def one_hot_embedder(n):
    return lambda x: torch.nn.functional.one_hot(x.long().reshape(-1), n).double()


class TestPrototypes:
    def test_one_shot_prototype_is_the_embedding(self):
        e = torch.randn(3, 4, dtype=torch.float64)
        assert torch.equal(compute_prototypes(e, [0, 1, 2]).prototypes, e)

    def test_mean(self):
        e = torch.tensor([[1.0, 2.0], [3.0, 6.0], [10.0, 0.0]], dtype=torch.float64)
        p = compute_prototypes(e, [0, 0, 1]).prototypes
        assert torch.allclose(p, torch.tensor([[2.0, 4.0], [10.0, 0.0]], dtype=torch.float64))

    def test_permutation_invariant(self):
        e = torch.randn(10, 5, dtype=torch.float64)
        labels = torch.tensor([0, 1] * 5)
        perm = torch.randperm(10)
        a = compute_prototypes(e, labels).prototypes
        b = compute_prototypes(e[perm], labels[perm]).prototypes
        assert torch.allclose(a, b, atol=1e-12)

    def test_empty_class(self):
        with pytest.raises(EmptyClass):
            compute_prototypes(torch.zeros(2, 3), [0, 2])
        with pytest.raises(EmptyClass):
            compute_prototypes(torch.zeros(2, 3), [0, 1], n_classes=3)


class TestClassifier:
    def test_equidistant_two_classes(self):
        protos = compute_prototypes(torch.tensor([[1.0, 0.0], [-1.0, 0.0]], dtype=torch.float64), [0, 1])
        lp = classify_query(torch.tensor([0.0, 3.0], dtype=torch.float64), protos)
        assert torch.allclose(lp, torch.full((2,), math.log(0.5), dtype=torch.float64))

    def test_softmax_of_negative_distances(self):
        protos = compute_prototypes(torch.tensor([[1.0], [math.sqrt(2)], [2.0]], dtype=torch.float64), [0, 1, 2])
        p = classify_query(torch.zeros(1, dtype=torch.float64), protos).exp()
        w = np.exp(-np.array([1.0, 2.0, 4.0]))
        assert np.allclose(p.numpy(), w / w.sum(), atol=1e-12)

    def test_dimension_mismatch(self):
        protos = compute_prototypes(torch.zeros(2, 3), [0, 1])
        with pytest.raises(DimensionMismatch):
            classify_query(torch.zeros(4), protos)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 6), st.integers(1, 6), st.integers(0, 2 ** 31), st.floats(-100, 100))
    def test_translation_invariance(self, k, dim, seed, shift):
        g = torch.Generator().manual_seed(seed)
        s = torch.randn(k, dim, generator=g, dtype=torch.float64)
        q = torch.randn(4, dim, generator=g, dtype=torch.float64)
        c = torch.full((dim,), shift, dtype=torch.float64)
        a = classify_query(q, compute_prototypes(s, range(k)))
        b = classify_query(q + c, compute_prototypes(s + c, range(k)))
        assert torch.allclose(a, b, atol=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(st.permutations(list(range(5))), st.integers(0, 2 ** 31))
    def test_label_permutation_equivariance(self, perm, seed):
        g = torch.Generator().manual_seed(seed)
        s = torch.randn(5, 3, generator=g, dtype=torch.float64)
        q = torch.randn(2, 3, generator=g, dtype=torch.float64)
        base = classify_query(q, compute_prototypes(s, range(5)))
        relabelled = classify_query(q, compute_prototypes(s, perm))
        assert torch.allclose(relabelled[:, perm], base, atol=1e-12)

    def test_cosine_and_euclidean_distances(self):
        s = torch.tensor([[1.0, 0.0], [0.0, 2.0]], dtype=torch.float64)
        q = torch.tensor([[3.0, 0.0]], dtype=torch.float64)
        lp = classify_query(q, compute_prototypes(s, [0, 1], distance="cosine"))
        w = np.exp(-np.array([0.0, 1.0]))
        assert np.allclose(lp.exp().numpy(), w / w.sum())
        lp = classify_query(q, compute_prototypes(s, [0, 1], distance="euclidean"))
        w = np.exp(-np.array([2.0, math.sqrt(13.0)]))
        assert np.allclose(lp.exp().numpy(), w / w.sum())


class TestLoss:
    def test_two_class_scalar_closed_form(self):
        s = torch.tensor([[0.0], [1.0]], dtype=torch.float64)
        q = torch.tensor([[0.3]], dtype=torch.float64)
        res = prototypical_loss(s, [0, 1], q, [0])
        assert res.loss.item() == pytest.approx(math.log1p(math.exp(-0.4)), abs=1e-12)
        assert res.accuracy == 1.0

    def test_query_gradient_matches_finite_differences(self):
        g = torch.Generator().manual_seed(3)
        s = torch.randn(6, 4, generator=g, dtype=torch.float64)
        q = torch.randn(3, 4, generator=g, dtype=torch.float64, requires_grad=True)
        sl, ql = [0, 0, 1, 1, 2, 2], [2, 0, 1]
        prototypical_loss(s, sl, q, ql).loss.backward()
        fd = torch.zeros_like(q)
        eps = 1e-6
        with torch.no_grad():
            for idx in np.ndindex(*q.shape):
                plus, minus = q.clone(), q.clone()
                plus[idx] += eps
                minus[idx] -= eps
                fd[idx] = (prototypical_loss(s, sl, plus, ql).loss - prototypical_loss(s, sl, minus, ql).loss) / (2 * eps)
        assert ((q.grad - fd).norm() / fd.norm()).item() < 1e-4

    def test_support_gradient_flows(self):
        s = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
        q = torch.randn(2, 3, dtype=torch.float64)
        prototypical_loss(s, [0, 0, 1, 1], q, [0, 1]).loss.backward()
        assert s.grad.abs().sum() > 0

    def test_random_ties(self):
        rng = np.random.default_rng(0)
        picks = argmax_random_ties(np.zeros((4000, 4)), rng)
        counts = np.bincount(picks, minlength=4)
        assert np.abs(counts - 1000).max() < 3 * math.sqrt(4000 * 0.25 * 0.75)
        assert argmax_random_ties(np.array([[0.0, 2.0, 1.0]]), rng)[0] == 1


class TestEvaluation:
    def test_oracle_embedder_is_perfect(self):
        pool = label_pool(10, 20)
        res = evaluate_few_shot(one_hot_embedder(10), pool, 5, 1, n_query=5, n_episodes=200, seed=1)
        assert res.mean_accuracy == 1.0 and res.ci95 == 0.0

    def test_constant_embedder_is_at_chance(self):
        pool = label_pool(10, 20)
        n_way, n_query, episodes = 5, 5, 400
        res = evaluate_few_shot(lambda x: torch.zeros(x.shape[0], 3), pool, n_way, 1, n_query, episodes, seed=2)
        sigma = math.sqrt(0.2 * 0.8 / (episodes * n_way * n_query))
        assert abs(res.mean_accuracy - 1 / n_way) < 3 * sigma

    def test_random_embeddings_are_at_chance(self):
        pool = vector_pool(10, 20, 8, noise=1.0, speaker_free=True)
        n_way, n_query, episodes = 5, 5, 400
        res = evaluate_few_shot(lambda x: x, pool, n_way, 1, n_query, episodes, seed=3)
        # items are i.i.d. across episodes only approximately, so allow a looser 4 sigma
        sigma = math.sqrt(0.2 * 0.8 / (episodes * n_way * n_query))
        assert abs(res.mean_accuracy - 1 / n_way) < 4 * sigma

    def test_more_shots_help(self):
        pool = vector_pool(10, 30, 10, noise=0.6, seed=4)
        one = evaluate_few_shot(lambda x: x, pool, 5, 1, 10, 300, seed=5)
        five = evaluate_few_shot(lambda x: x, pool, 5, 5, 10, 300, seed=5)
        assert five.mean_accuracy > one.mean_accuracy + one.ci95

    def test_seeded_reproducibility(self):
        pool = vector_pool(8, 10, 8, noise=0.8, seed=6)
        a = evaluate_few_shot(lambda x: x, pool, 4, 1, 3, 100, seed=7)
        b = evaluate_few_shot(lambda x: x, pool, 4, 1, 3, 100, seed=7)
        c = evaluate_few_shot(lambda x: x, pool, 4, 1, 3, 100, seed=8)
        assert np.array_equal(a.accuracies, b.accuracies)
        assert not np.array_equal(a.accuracies, c.accuracies)

    def test_ci_formula(self):
        mean, ci = mean_ci95(np.array([0.0, 1.0, 0.0, 1.0]))
        assert mean == 0.5
        assert ci == pytest.approx(1.96 * np.std([0, 1, 0, 1], ddof=1) / 2)


class Tiny(nn.Module):
    def __init__(self):
        super().__init__()
        self.lin = nn.Linear(8, 4)

    def embed(self, x):
        return self.lin(x.flatten(1))


class TestFinetuneMode:
    def test_leaves_caller_model_untouched(self):
        torch.manual_seed(0)
        model = Tiny()
        before = {k: v.clone() for k, v in model.state_dict().items()}
        pool = vector_pool(6, 6, 8, noise=0.5, seed=9)
        res = evaluate_few_shot(model, pool, 3, 2, 2, n_episodes=5, seed=0, mode="finetune", finetune_steps=3)
        assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())
        assert 0.0 <= res.mean_accuracy <= 1.0
        assert model.training

    def test_deterministic(self):
        torch.manual_seed(0)
        model = Tiny()
        pool = vector_pool(6, 6, 8, noise=0.5, seed=9)
        a = evaluate_few_shot(model, pool, 3, 2, 2, n_episodes=4, seed=0, mode="finetune", finetune_steps=3)
        torch.manual_seed(123)
        b = evaluate_few_shot(model, pool, 3, 2, 2, n_episodes=4, seed=0, mode="finetune", finetune_steps=3)
        assert np.array_equal(a.accuracies, b.accuracies)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            evaluate_few_shot(Tiny(), vector_pool(4, 4, 8, 0.1), 2, 1, 1, 1, mode="bogus")
