"""Central finite-difference gradients for checking autograd on small problems."""

from __future__ import annotations

from typing import Callable, Sequence

import torch


def central_difference(f: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], eps: float = 1e-6):
    """Numerical gradient of scalar ``f()`` w.r.t. each tensor in ``params`` (perturbed in place)."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(f())
                flat[i] = orig - eps
                down = float(f())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * eps)
            grads.append(g)
    return grads


def relative_error(analytic: Sequence[torch.Tensor], numeric: Sequence[torch.Tensor]) -> float:
    a = torch.cat([t.reshape(-1) for t in analytic])
    n = torch.cat([t.reshape(-1) for t in numeric])
    scale = max(a.norm().item(), n.norm().item(), 1e-12)
    return (a - n).norm().item() / scale


def check_gradient(f: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], eps: float = 1e-6) -> float:
    """Relative error between autograd and central differences (float64 expected)."""
    for p in params:
        p.grad = None
    f().backward()
    # parameters the objective ignores (e.g. the code-layer bias of the Jacobian) get no grad
    analytic = [torch.zeros_like(p) if p.grad is None else p.grad.detach().clone() for p in params]
    return relative_error(analytic, central_difference(f, params, eps))
