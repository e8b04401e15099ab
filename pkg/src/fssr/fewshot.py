"""Prototypes, the distance-softmax classifier, prototypical loss and N-way K-shot evaluation."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datasets import EpisodePool, sample_episode_ids
from .errors import DimensionMismatch, EmptyClass

DISTANCES = ("sq_euclidean", "euclidean", "cosine")


@dataclass
class PrototypeSet:
    prototypes: torch.Tensor  # (K, M); row k is the mean support embedding of class k
    labels: List[int]
    distance: str = "sq_euclidean"

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]


@dataclass
class EpisodeResult:
    loss: torch.Tensor
    log_probs: torch.Tensor  # (n_queries, K)
    accuracy: float


@dataclass
class FewShotResult:
    mean_accuracy: float
    ci95: float
    accuracies: np.ndarray


def compute_prototypes(embeddings: torch.Tensor, labels: Union[Sequence[int], torch.Tensor],
                       n_classes: Optional[int] = None, distance: str = "sq_euclidean") -> PrototypeSet:
    """Class means of the support embeddings.

    Labels must be 0..K-1; ``n_classes`` defaults to ``max(label) + 1`` and a
    class without support raises :class:`EmptyClass`.
    """
    labels = torch.as_tensor(labels, dtype=torch.long, device=embeddings.device).reshape(-1)
    if embeddings.dim() != 2 or embeddings.shape[0] != labels.shape[0]:
        raise DimensionMismatch(f"{tuple(embeddings.shape)} embeddings for {labels.shape[0]} labels")
    k = int(labels.max().item()) + 1 if n_classes is None else n_classes
    counts = torch.bincount(labels, minlength=k)
    if (counts == 0).any():
        missing = torch.nonzero(counts == 0).flatten().tolist()
        raise EmptyClass(f"classes without support: {missing}")
    sums = torch.zeros(k, embeddings.shape[1], dtype=embeddings.dtype, device=embeddings.device)
    sums = sums.index_add(0, labels, embeddings)
    return PrototypeSet(sums / counts.unsqueeze(1).to(embeddings.dtype), list(range(k)), distance)


def pairwise_distance(q: torch.Tensor, protos: torch.Tensor, kind: str = "sq_euclidean") -> torch.Tensor:
    """(Q, M) x (K, M) -> (Q, K)."""
    if kind == "sq_euclidean":
        return ((q.unsqueeze(1) - protos.unsqueeze(0)) ** 2).sum(-1)
    if kind == "euclidean":
        return torch.sqrt(((q.unsqueeze(1) - protos.unsqueeze(0)) ** 2).sum(-1) + 1e-20)
    if kind == "cosine":
        return 1.0 - F.cosine_similarity(q.unsqueeze(1), protos.unsqueeze(0), dim=-1, eps=1e-12)
    raise ValueError(f"distance must be one of {DISTANCES}, got {kind!r}")


def classify_query(q: torch.Tensor, protos: PrototypeSet) -> torch.Tensor:
    """Log class probabilities ``-d(q, a_k) - logsumexp_k' -d(q, a_k')``.

    Accepts a single embedding (M,) or a batch (Q, M).
    """
    single = q.dim() == 1
    qq = q.unsqueeze(0) if single else q
    if qq.dim() != 2 or qq.shape[1] != protos.dim:
        raise DimensionMismatch(f"query dim {tuple(q.shape)} vs prototype dim {protos.dim}")
    out = torch.log_softmax(-pairwise_distance(qq, protos.prototypes, protos.distance), dim=1)
    return out[0] if single else out


def argmax_random_ties(scores: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Row-wise argmax; exact ties resolved uniformly at random."""
    scores = np.asarray(scores)
    best = scores.max(axis=1, keepdims=True)
    out = np.empty(scores.shape[0], dtype=np.int64)
    for i, row in enumerate(scores == best):
        idx = np.flatnonzero(row)
        out[i] = idx[0] if idx.size == 1 else rng.choice(idx)
    return out


def prototypical_loss(support: torch.Tensor, support_labels, query: torch.Tensor, query_labels,
                      distance: str = "sq_euclidean", rng: Optional[np.random.Generator] = None) -> EpisodeResult:
    """Mean negative log-probability of each query's true class."""
    protos = compute_prototypes(support, support_labels, distance=distance)
    qlab = torch.as_tensor(query_labels, dtype=torch.long, device=query.device).reshape(-1)
    log_p = classify_query(query, protos)
    loss = F.nll_loss(log_p, qlab)
    pred = argmax_random_ties(log_p.detach().cpu().numpy(), rng or np.random.default_rng(0))
    acc = float((pred == qlab.cpu().numpy()).mean())
    return EpisodeResult(loss, log_p, acc)


# ---------------------------------------------------------------------------
# evaluation

Embedder = Callable[[torch.Tensor], torch.Tensor]


def _stack(items) -> torch.Tensor:
    return torch.as_tensor(np.stack([np.asarray(i, dtype=np.float32) for i in items]))


def embed_items(embed: Embedder, items: Sequence, batch_size: int = 32) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for i in range(0, len(items), batch_size):
            outs.append(embed(_stack(items[i:i + batch_size])).to(torch.float64))
    return torch.cat(outs)


def _embedder(model) -> Embedder:
    if isinstance(model, nn.Module):
        return model.embed
    return model


def mean_ci95(accs: np.ndarray) -> tuple:
    accs = np.asarray(accs, dtype=np.float64)
    mean = float(accs.mean())
    if accs.size < 2:
        return mean, 0.0
    return mean, float(1.96 * accs.std(ddof=1) / math.sqrt(accs.size))


def evaluate_few_shot(model, pool: EpisodePool, n_way: int, k_shot: int, n_query: int = 15,
                      n_episodes: int = 1000, seed: int = 0, distance: str = "sq_euclidean",
                      mode: str = "frozen", finetune_steps: int = 10, finetune_lr: float = 1e-3,
                      batch_size: int = 32) -> FewShotResult:
    """Mean N-way K-shot accuracy over seeded episodes with a 95% normal-approximation half-width.

    ``model`` is an ``nn.Module`` with ``embed`` or any callable mapping a
    batch tensor to embeddings.  Each episode gets its own child seed, so the
    result does not depend on evaluation order.  In ``frozen`` mode every
    pool item is embedded once (in eval mode) and episodes are scored from
    that table.  ``finetune`` mode copies the model per episode and trains it
    on the support set with a temporary linear head before scoring; the
    caller's model is never modified.
    """
    if mode not in ("frozen", "finetune"):
        raise ValueError("mode must be 'frozen' or 'finetune'")
    children = np.random.SeedSequence(seed).spawn(n_episodes)
    was_training = model.training if isinstance(model, nn.Module) else None
    if isinstance(model, nn.Module):
        model.eval()
    try:
        if mode == "frozen":
            accs = _evaluate_frozen(model, pool, n_way, k_shot, n_query, children, distance, batch_size)
        else:
            accs = np.array([
                _finetune_episode(model, pool, n_way, k_shot, n_query, np.random.default_rng(c),
                                  distance, finetune_steps, finetune_lr)
                for c in children])
    finally:
        if was_training:
            model.train()
    mean, ci = mean_ci95(accs)
    return FewShotResult(mean, ci, accs)


def _evaluate_frozen(model, pool, n_way, k_shot, n_query, children, distance, batch_size):
    embed = _embedder(model)
    ids = [item for item, _ in pool.all_items()]
    row = {item: i for i, item in enumerate(ids)}
    table = embed_items(embed, [pool.load(i) for i in ids], batch_size)
    accs = np.empty(len(children))
    for e, child in enumerate(children):
        rng = np.random.default_rng(child)
        _, sup, qry = sample_episode_ids(pool, n_way, k_shot, n_query, rng)
        s = table[[row[i] for i in sup]]
        q = table[[row[i] for i in qry]]
        res = prototypical_loss(s, np.repeat(np.arange(n_way), k_shot), q,
                                np.repeat(np.arange(n_way), n_query), distance, rng)
        accs[e] = res.accuracy
    return accs


def _finetune_episode(model, pool, n_way, k_shot, n_query, rng, distance, steps, lr):
    _, sup, qry = sample_episode_ids(pool, n_way, k_shot, n_query, rng)
    xs = _stack([pool.load(i) for i in sup])
    xq = _stack([pool.load(i) for i in qry])
    ys = torch.as_tensor(np.repeat(np.arange(n_way), k_shot))
    local = copy.deepcopy(model)
    local.eval()
    with torch.no_grad():
        dim = local.embed(xs[:1]).shape[1]
    head = nn.Linear(dim, n_way)
    # head init comes from the episode seed, not torch's global generator
    g = torch.Generator().manual_seed(int(rng.integers(2 ** 62)))
    bound = 1.0 / math.sqrt(dim)
    with torch.no_grad():
        head.weight.uniform_(-bound, bound, generator=g)
        head.bias.uniform_(-bound, bound, generator=g)
    local.train()
    opt = torch.optim.Adam(list(local.parameters()) + list(head.parameters()), lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        F.cross_entropy(head(local.embed(xs)), ys).backward()
        opt.step()
    local.eval()
    with torch.no_grad():
        s = local.embed(xs).double()
        q = local.embed(xq).double()
    res = prototypical_loss(s, ys, q, np.repeat(np.arange(n_way), n_query), distance, rng)
    return res.accuracy
