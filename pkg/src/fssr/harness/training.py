"""Training loops and the experiment matrix."""

from __future__ import annotations

import copy
import logging
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..datasets import EpisodePool, sample_episode_ids
from ..errors import ConfigMismatch, DivergenceDetected, InsufficientData, NonFiniteActivation, ShapeMismatch
from ..fewshot import evaluate_few_shot, prototypical_loss
from ..models import (
    CapsuleNetM,
    CapsuleNetMA,
    ModelConfig,
    build_model,
    count_parameters,
    load_checkpoint,
    margin_loss,
    save_checkpoint,
)
from .config import TrainConfig
from .records import ExperimentRecord

log = logging.getLogger(__name__)


@dataclass
class TrainOutcome:
    model: nn.Module
    record: ExperimentRecord
    checkpoint: Optional[Path] = None


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))


def topk_accuracy(logits, labels, k: int) -> float:
    """Fraction of rows whose label is among the k highest scores.

    Equal scores rank by ascending class index.
    """
    scores = np.asarray(logits.detach().cpu() if torch.is_tensor(logits) else logits, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ShapeMismatch(f"logits {scores.shape} vs {labels.shape[0]} labels")
    if not 1 <= k <= scores.shape[1]:
        raise ShapeMismatch(f"k={k} outside 1..{scores.shape[1]}")
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return float((order == labels[:, None]).any(axis=1).mean())


def _stack(pool: EpisodePool, ids) -> torch.Tensor:
    return torch.as_tensor(np.stack([np.asarray(pool.load(i), dtype=np.float32) for i in ids]))


def _make_optimizer(cfg: TrainConfig, params):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate)
    return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum)


def _classifier_loss_kind(cfg: TrainConfig, model: nn.Module) -> str:
    capsule = isinstance(model, (CapsuleNetM, CapsuleNetMA))
    kind = cfg.loss or ("margin" if capsule else "cross_entropy")
    if kind not in ("cross_entropy", "margin"):
        raise ConfigMismatch(f"classifier training cannot use loss {kind!r}")
    if capsule != (kind == "margin"):
        raise ConfigMismatch(f"loss {kind!r} does not fit arch {model.config.arch}")
    return kind


def _class_vectors(model: nn.Module, x: torch.Tensor) -> torch.Tensor:
    return model.capsnet(x) if isinstance(model, CapsuleNetMA) else model(x)


def _batch_scores(model, kind, x):
    if kind == "margin":
        v = _class_vectors(model, x)
        return v, v.norm(dim=-1)
    logits, _ = model(x)
    return logits, logits


def _evaluate_topk(model: nn.Module, pool: EpisodePool, batch_size: int) -> dict:
    items = pool.all_items()
    model.eval()
    scores = []
    with torch.no_grad():
        for i in range(0, len(items), batch_size):
            scores.append(model.scores(_stack(pool, [it for it, _ in items[i:i + batch_size]])))
    scores = torch.cat(scores)
    labels = np.array([k for _, k in items])
    return {"top1": topk_accuracy(scores, labels, 1),
            "top5": topk_accuracy(scores, labels, min(5, scores.shape[1]))}


def _check_labels(model: nn.Module, pool: EpisodePool):
    n = model.config.n_classes
    idx = sorted(pool.items)
    if idx and (idx[0] < 0 or idx[-1] >= n):
        raise ConfigMismatch(f"pool speaker indices {idx[0]}..{idx[-1]} do not fit {n} model classes")


def train_classifier(cfg: TrainConfig, model: nn.Module, train_pool: EpisodePool,
                     test_pool: Optional[EpisodePool] = None, out_dir: Optional[Union[str, os.PathLike]] = None,
                     tag: str = "classify", dataset: str = "unknown") -> TrainOutcome:
    """Supervised training: cross-entropy for VGG/ResNet, margin loss for capsule nets.

    Runs ``max_epochs`` shuffled epochs (capped at ``max_steps`` batches if
    set) and reports top-1/top-5 on ``test_pool`` (the training pool if None).
    A non-finite loss restores the last good weights and raises
    :class:`DivergenceDetected`.
    """
    kind = _classifier_loss_kind(cfg, model)
    if len(train_pool.items) != model.config.n_classes:
        raise ConfigMismatch(
            f"model has {model.config.n_classes} classes, pool has {len(train_pool.items)} speakers")
    _check_labels(model, train_pool)
    seed_everything(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = _make_optimizer(cfg, model.parameters())
    items = train_pool.all_items()
    ckpt = Path(out_dir) / "model.pt" if out_dir is not None else None
    good_state = copy.deepcopy(model.state_dict())
    start = time.perf_counter()
    step, losses = 0, []
    done = False
    for epoch in range(cfg.max_epochs):
        model.train()
        order = rng.permutation(len(items))
        for b in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
            batch = [items[i] for i in order[b:b + cfg.batch_size]]
            if len(batch) < 2:
                continue  # BatchNorm needs two samples
            x = _stack(train_pool, [it for it, _ in batch])
            y = torch.as_tensor([k for _, k in batch])
            try:
                out, _ = _batch_scores(model, kind, x)
                loss = margin_loss(out, y) if kind == "margin" else F.cross_entropy(out, y)
            except NonFiniteActivation:
                loss = torch.tensor(float("nan"))
            if not torch.isfinite(loss):
                model.load_state_dict(good_state)
                if ckpt is not None:
                    save_checkpoint(ckpt, model, step=step, seed=cfg.seed)
                raise DivergenceDetected(f"loss became {loss.item()} at step {step}", ckpt)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.item()))
            step += 1
        good_state = copy.deepcopy(model.state_dict())
        if done:
            break
    metrics = _evaluate_topk(model, test_pool or train_pool, cfg.batch_size)
    record = ExperimentRecord(
        experiment_tag=tag, arch=model.config.arch, dataset=dataset, metrics=metrics,
        parameter_count=count_parameters(model), wall_time_s=time.perf_counter() - start,
        config={"train": cfg.to_dict(), "model": model.config.to_dict()},
        diagnostics={"steps": step, "first_loss": losses[0] if losses else None,
                     "final_loss": losses[-1] if losses else None},
    )
    if ckpt is not None:
        save_checkpoint(ckpt, model, step=step, seed=cfg.seed)
    return TrainOutcome(model, record, ckpt)


def episode_loss(model: nn.Module, x: torch.Tensor, n_support: int, support_labels, query_labels,
                 cfg: TrainConfig, rng: np.random.Generator, speaker_labels: Optional[torch.Tensor] = None):
    """Objective for one episode; returns ``(total, EpisodeResult, parts)``.

    ``speaker_labels`` (global speaker index per item) is only needed when the
    composite objective keeps a margin term on the capsule classes.
    """
    kind = cfg.loss or ("capsma_composite" if isinstance(model, CapsuleNetMA) else "prototypical")
    if kind == "capsma_composite" and not isinstance(model, CapsuleNetMA):
        raise ConfigMismatch("capsma_composite loss needs the capsnet_ma architecture")
    if kind not in ("prototypical", "capsma_composite"):
        raise ConfigMismatch(f"episodic training cannot use loss {kind!r}")
    parts = {}
    if isinstance(model, CapsuleNetMA):
        out = model(x)
        emb = out.embedding
    else:
        emb = model.embed(x)
    res = prototypical_loss(emb[:n_support], support_labels, emb[n_support:], query_labels, cfg.distance, rng)
    total = res.loss
    if kind == "capsma_composite":
        w = cfg.composite_weights
        total = w.proto * res.loss + w.recon * out.recon_loss + w.contractive * out.contractive_penalty
        parts = {"recon": out.recon_loss.item(), "contractive": out.contractive_penalty.item()}
        if w.margin > 0:
            if speaker_labels is None or int(speaker_labels.max()) >= out.class_vectors.shape[1]:
                raise ConfigMismatch("margin term needs speaker indices below the capsule class count")
            m = margin_loss(out.class_vectors, speaker_labels)
            total = total + w.margin * m
            parts["margin"] = m.item()
    return total, res, parts


def split_speakers(pool: EpisodePool, fraction: float, minimum: int, seed: int):
    """Hold out ``max(ceil(fraction * K), minimum)`` speakers, or None if too few remain."""
    names = sorted(pool.items)
    n_val = max(math.ceil(fraction * len(names)), minimum)
    if len(names) - n_val < minimum:
        return pool, None
    rng = np.random.default_rng(seed)
    val = sorted(rng.choice(names, n_val, replace=False).tolist())
    train = [k for k in names if k not in val]
    return pool.subset(train), pool.subset(val)


def episodic_train(cfg: TrainConfig, model: nn.Module, train_pool: EpisodePool, n_way: int, k_shot: int,
                   n_query: Optional[int] = None, val_pool: Optional[EpisodePool] = None,
                   out_dir: Optional[Union[str, os.PathLike]] = None, tag: str = "episodic",
                   dataset: str = "unknown", eval_n_way: Optional[int] = None,
                   eval_k_shot: Optional[int] = None) -> TrainOutcome:
    """Prototypical-loss training over sampled episodes.

    Trains for ``cfg.max_steps`` episodes.  Every ``eval_every`` steps the
    model is scored on held-out episodes from ``val_pool`` with a fixed seed;
    training stops after ``patience`` evaluations without improvement and
    the best weights are restored.  When ``val_pool`` is None a fraction of
    the training speakers is held out instead (if enough remain).
    """
    n_query = n_query or cfg.n_query
    eval_n_way = eval_n_way or n_way
    eval_k_shot = eval_k_shot or k_shot
    steps = cfg.max_steps if cfg.max_steps is not None else 2000
    if val_pool is None:
        train_pool, val_pool = split_speakers(train_pool, cfg.val_fraction, max(n_way, eval_n_way), cfg.seed)
    seed_everything(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = _make_optimizer(cfg, model.parameters())
    ckpt = Path(out_dir) / "model.pt" if out_dir is not None else None

    def evaluate():
        if val_pool is None:
            return None
        return evaluate_few_shot(model, val_pool, eval_n_way, eval_k_shot, cfg.eval_n_query,
                                 cfg.eval_episodes, seed=cfg.seed, distance=cfg.distance)

    start = time.perf_counter()
    sup_y = np.repeat(np.arange(n_way), k_shot)
    qry_y = np.repeat(np.arange(n_way), n_query)
    losses, history = [], []
    best_acc, best_state, stale = -1.0, None, 0
    initial_state = copy.deepcopy(model.state_dict())
    step = 0
    for step in range(1, steps + 1):
        model.train()
        speakers, sup, qry = sample_episode_ids(train_pool, n_way, k_shot, n_query, rng)
        x = _stack(train_pool, list(sup) + list(qry))
        spk = torch.as_tensor(np.concatenate([np.repeat(speakers, k_shot), np.repeat(speakers, n_query)]))
        try:
            total, res, _ = episode_loss(model, x, len(sup), sup_y, qry_y, cfg, rng, spk)
        except NonFiniteActivation:
            total = torch.tensor(float("nan"))
        if not torch.isfinite(total):
            model.load_state_dict(best_state if best_state is not None else initial_state)
            if ckpt is not None:
                save_checkpoint(ckpt, model, step=step, seed=cfg.seed)
            raise DivergenceDetected(f"episodic loss became {total.item()} at step {step}", ckpt)
        opt.zero_grad()
        total.backward()
        opt.step()
        losses.append(float(res.loss.item()))
        if val_pool is not None and (step % cfg.eval_every == 0 or step == steps):
            acc = evaluate().mean_accuracy
            history.append((step, acc))
            log.info("step %d loss %.4f held-out acc %.4f", step, losses[-1], acc)
            if acc > best_acc + 1e-9:
                best_acc, best_state, stale = acc, copy.deepcopy(model.state_dict()), 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    if best_state is not None:
        model.load_state_dict(best_state)
    final = evaluate()
    metrics = {}
    diagnostics = {"steps": step if steps else 0, "first_loss": losses[0] if losses else None,
                   "final_loss": losses[-1] if losses else None, "history": history}
    if final is not None:
        metrics[f"{eval_n_way}way_{eval_k_shot}shot"] = final.mean_accuracy
        diagnostics["ci95"] = final.ci95
    record = ExperimentRecord(
        experiment_tag=tag, arch=model.config.arch, dataset=dataset, metrics=metrics,
        parameter_count=count_parameters(model), wall_time_s=time.perf_counter() - start,
        config={"train": cfg.to_dict(), "model": model.config.to_dict(),
                "n_way": n_way, "k_shot": k_shot, "n_query": n_query},
        diagnostics=diagnostics,
    )
    if ckpt is not None:
        save_checkpoint(ckpt, model, step=step, seed=cfg.seed)
    return TrainOutcome(model, record, ckpt)


def limited_samples_sweep(archs: Sequence[str], train_pool: EpisodePool, test_pool: EpisodePool,
                          samples_per_class: Sequence[Optional[int]], cfg: TrainConfig,
                          model_config: Callable[[str, int], ModelConfig] = None,
                          dataset: str = "unknown") -> List[ExperimentRecord]:
    """Train each arch from scratch on ``n`` items per speaker, for every ``n``.

    ``None`` in ``samples_per_class`` means the full training pool.
    """
    model_config = model_config or (lambda arch, n: ModelConfig(arch, n))
    wanted = [n for n in samples_per_class if n is not None]
    smallest = min(len(v) for v in train_pool.items.values())
    if wanted and max(wanted) > smallest:
        raise InsufficientData(f"a speaker has only {smallest} training items, {max(wanted)} requested")
    n_classes = len(train_pool.items)
    records = []
    for arch in archs:
        for n in samples_per_class:
            pool = train_pool if n is None else train_pool.subset(
                per_speaker=n, rng=np.random.default_rng(cfg.seed))
            model = build_model(model_config(arch, n_classes), seed=cfg.seed)
            out = train_classifier(cfg, model, pool, test_pool, tag="limited_samples", dataset=dataset)
            out.record.config["samples_per_class"] = n if n is not None else smallest
            out.record.config["full"] = n is None
            records.append(out.record)
    return records


def transfer_finetune(checkpoint: Union[str, os.PathLike], target_train: EpisodePool,
                      target_test: Optional[EpisodePool], cfg: TrainConfig, zero_finetune: bool = False,
                      n_way: int = 5, k_shot: int = 1, n_query: int = 15, n_episodes: int = 1000,
                      out_dir=None, dataset: str = "unknown") -> TrainOutcome:
    """Fine-tune a pretrained backbone on a new corpus, or score it few-shot as is.

    The fine-tune path replaces the classification head to the target class
    count and trains on ``target_train``.  With ``zero_finetune`` the source
    model is frozen and evaluated with prototypes on ``target_test``
    (falling back to ``target_train``).
    """
    if zero_finetune:
        model, meta = load_checkpoint(checkpoint)
        start = time.perf_counter()
        pool = target_test or target_train
        res = evaluate_few_shot(model, pool, n_way, k_shot, n_query, n_episodes, seed=cfg.seed,
                                distance=cfg.distance)
        record = ExperimentRecord(
            experiment_tag="transfer_zero_finetune", arch=model.config.arch, dataset=dataset,
            metrics={f"{n_way}way_{k_shot}shot": res.mean_accuracy},
            parameter_count=count_parameters(model), wall_time_s=time.perf_counter() - start,
            config={"train": cfg.to_dict(), "model": model.config.to_dict(), "source": os.fspath(checkpoint)},
            diagnostics={"ci95": res.ci95},
        )
        return TrainOutcome(model, record, Path(checkpoint))
    model, _ = load_checkpoint(checkpoint, n_classes=len(target_train.items), allow_replace_head=True,
                               seed=cfg.seed)
    out = train_classifier(cfg, model, target_train, target_test, out_dir, tag="transfer_finetune",
                           dataset=dataset)
    out.record.config["source"] = os.fspath(checkpoint)
    return out
