"""Fast property checks runnable from the CLI (``fssr selftest``)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List

import numpy as np
import torch

from ..audio_dsp import AudioClip, compute_spectrogram
from ..datasets import EpisodePool, SpeakerLabel
from ..fewshot import PrototypeSet, classify_query, evaluate_few_shot, prototypical_loss
from ..gradcheck import check_gradient
from ..models import ContractiveAutoencoder, ModelConfig, build_model, count_parameters, dynamic_routing, margin_loss, squash

REFERENCE_PARAMETER_COUNTS = {"vgg_m": 8_291_634, "resnet34": 22_354_162, "capsnet_m": 8_196_864}
PARAMETER_TOLERANCE = {"vgg_m": 0.01, "resnet34": 0.01, "capsnet_m": 0.05}


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    detail: str


def _parameter_counts(seed):
    out = []
    for arch, target in REFERENCE_PARAMETER_COUNTS.items():
        n = count_parameters(build_model(ModelConfig(arch, 50), seed=seed))
        rel = abs(n - target) / target
        out.append(CheckResult(f"parameters[{arch}]", rel <= PARAMETER_TOLERANCE[arch], float(n),
                               f"{n:,} vs {target:,} (rel {rel:.2e})"))
    return out


def _spectrogram_shape(seed):
    rng = np.random.default_rng(seed)
    shapes = {compute_spectrogram(AudioClip(rng.uniform(-1, 1, 48000), 16000)).shape for _ in range(10)}
    return [CheckResult("spectrogram_shape", shapes == {(128, 300)}, float(len(shapes)), str(sorted(shapes)))]


def _routing(seed):
    g = torch.Generator().manual_seed(seed)
    worst_sum, worst_norm = 0.0, 0.0
    for _ in range(100):
        u = torch.randn(6, 4, 5, generator=g, dtype=torch.float64) * 3
        res = dynamic_routing(u, 3, return_couplings=True)
        for c in res.couplings:
            worst_sum = max(worst_sum, (c.sum(dim=1) - 1).abs().max().item())
        worst_norm = max(worst_norm, squash(u).norm(dim=-1).max().item())
    return [CheckResult("routing_coupling_sum", worst_sum < 1e-6, worst_sum, f"max |sum-1| = {worst_sum:.1e}"),
            CheckResult("squash_norm", worst_norm < 1.0, worst_norm, f"max norm = {worst_norm:.6f}")]


def _distance_softmax_oracle(seed):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(100):
        k, m = rng.integers(2, 8), rng.integers(1, 10)
        protos = rng.normal(size=(k, m))
        q = rng.normal(size=m)
        d = [sum((q[j] - protos[i, j]) ** 2 for j in range(m)) for i in range(k)]
        z = sum(math.exp(-di) for di in d)
        expect = [math.log(math.exp(-di) / z) for di in d]
        got = classify_query(torch.tensor(q), PrototypeSet(torch.tensor(protos), list(range(k)))).numpy()
        worst = max(worst, float(np.max(np.abs(got - expect))))
    return [CheckResult("distance_softmax_oracle", worst < 1e-10, worst, f"max |dlogp| = {worst:.1e}")]


def _gradients(seed):
    g = torch.Generator().manual_seed(seed)
    rnd = lambda *s: torch.randn(*s, generator=g, dtype=torch.float64)
    out = []
    v = (rnd(3, 4) * 0.4).requires_grad_()
    t = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
    out.append(("grad_margin", check_gradient(lambda: margin_loss(v, t), [v])))
    s, q = rnd(4, 3).requires_grad_(), rnd(4, 3).requires_grad_()
    out.append(("grad_prototypical",
                check_gradient(lambda: prototypical_loss(s, [0, 0, 1, 1], q, [0, 1, 0, 1]).loss, [s, q])))
    torch.manual_seed(seed)
    ae = ContractiveAutoencoder(4, (3,), 2).double()
    z = rnd(5, 4)
    out.append(("grad_reconstruction", check_gradient(lambda: ae(z).recon_loss, list(ae.parameters()))))
    enc = ContractiveAutoencoder(6, (3,), 2).double()
    z6 = rnd(5, 6).requires_grad_()
    params = [*enc.encoder.parameters(), z6]
    out.append(("grad_contractive", check_gradient(lambda: enc(z6).contractive_penalty, params)))
    return [CheckResult(name, err < 1e-4, err, f"rel err {err:.1e}") for name, err in out]


def _bounds(seed):
    labels = [SpeakerLabel(i, f"s{i}") for i in range(10)]
    pool = EpisodePool(labels, {i: [(i, j) for j in range(10)] for i in range(10)}, lambda item: item[0])
    onehot = lambda x: torch.nn.functional.one_hot(x.long().reshape(-1), 10).double()
    const = lambda x: torch.zeros(x.shape[0], 3, dtype=torch.float64)
    res = []
    acc = evaluate_few_shot(onehot, pool, 5, 1, 5, 100, seed).mean_accuracy
    res.append(CheckResult("oracle_embedder", acc == 1.0, acc, f"accuracy {acc}"))
    r = evaluate_few_shot(const, pool, 5, 1, 5, 400, seed)
    sigma = math.sqrt(0.2 * 0.8 / (400 * 25))
    ok = abs(r.mean_accuracy - 0.2) <= 3 * sigma
    res.append(CheckResult("constant_embedder", ok, r.mean_accuracy, f"accuracy {r.mean_accuracy:.4f}, 3 sigma {3 * sigma:.4f}"))
    return res


def _toy_training(seed):
    from ..synthetic import synthetic_pool
    from .config import TrainConfig
    from .training import episodic_train

    pool = synthetic_pool(8, 6, seed=seed)
    train, held = pool.subset(range(5)), pool.subset(range(5, 8))
    cfg = TrainConfig(learning_rate=1e-3, max_steps=5, n_query=2, eval_every=5, eval_episodes=20,
                      eval_n_query=3, seed=seed)
    model = build_model(ModelConfig("capsnet_ma", 8), seed=seed)
    out = episodic_train(cfg, model, train, 3, 1, val_pool=held)
    loss = out.record.diagnostics["final_loss"]
    return [CheckResult("toy_training", math.isfinite(loss), loss,
                        f"final loss {loss:.8f}, 3-way acc {out.record.metrics['3way_1shot']:.4f}")]


CHECKS: List[Callable[[int], List[CheckResult]]] = [
    _parameter_counts, _spectrogram_shape, _routing, _distance_softmax_oracle, _gradients, _bounds, _toy_training,
]


def run_selftest(seed: int = 0, quick: bool = False) -> List[CheckResult]:
    """Run every check; ``quick`` skips the toy training run."""
    torch.set_default_dtype(torch.float32)
    results = []
    for check in CHECKS:
        if quick and check is _toy_training:
            continue
        results.extend(check(seed))
    return results
