"""Capsule layers, routing-by-agreement, margin loss and the capsule+autoencoder model."""

from __future__ import annotations

import math
from typing import List, NamedTuple, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import NonFiniteActivation, ShapeMismatch
from .config import MarginLossParams, ModelConfig

# keeps sqrt differentiable at the origin; far below float32 resolution of any real norm
_TINY = 1e-20


def safe_norm(x: torch.Tensor, dim: int = -1, keepdim: bool = False) -> torch.Tensor:
    """Exact Euclidean norm whose gradient at the origin is zero rather than NaN."""
    return torch.linalg.vector_norm(x, dim=dim, keepdim=keepdim)


def squash(s: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Capsule nonlinearity ``|s|^2 / (1 + |s|^2) * s / |s|``; maps 0 to 0."""
    n2 = (s * s).sum(dim=dim, keepdim=True)
    return s * (torch.sqrt(n2 + _TINY) / (1.0 + n2))


def check_finite(t: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        bad = (~torch.isfinite(t)).sum().item()
        raise NonFiniteActivation(f"{bad} non-finite values in {where} (shape {tuple(t.shape)})")
    return t


class RoutingResult(NamedTuple):
    class_vectors: torch.Tensor
    couplings: List[torch.Tensor]


def dynamic_routing(predictions: torch.Tensor, iters: int = 3, return_couplings: bool = False):
    """Routing by agreement.

    ``predictions`` holds the votes u_hat with shape (n_in, n_out, dim) or
    (batch, n_in, n_out, dim).  Logits start at zero; each pass takes a
    softmax over output capsules, forms the coupling-weighted sum, squashes
    it, and adds the vote/output agreement back onto the logits.  Returns the
    output capsules (.., n_out, dim), plus the per-iteration couplings when
    ``return_couplings`` is set.
    """
    if iters < 1:
        raise ValueError("iters must be at least 1")
    unbatched = predictions.dim() == 3
    u = predictions.unsqueeze(0) if unbatched else predictions
    if u.dim() != 4:
        raise ShapeMismatch(f"predictions must be 3-D or 4-D, got {tuple(predictions.shape)}")
    check_finite(u, "routing predictions")
    b = torch.zeros(u.shape[:3], dtype=u.dtype, device=u.device)
    history = []
    for it in range(iters):
        c = torch.softmax(b, dim=2)
        history.append(c[0] if unbatched else c)
        v = squash((c.unsqueeze(-1) * u).sum(dim=1))
        check_finite(v, f"routing iteration {it}")
        if it < iters - 1:
            b = b + (u * v.unsqueeze(1)).sum(dim=-1)
    v = v[0] if unbatched else v
    if return_couplings:
        return RoutingResult(v, history)
    return v


def margin_loss(class_vectors: torch.Tensor, target: torch.Tensor,
                params: MarginLossParams = MarginLossParams()) -> torch.Tensor:
    """Capsule margin loss, summed over classes and averaged over the batch.

    ``class_vectors`` is (n_classes, dim) or (batch, n_classes, dim);
    ``target`` is the matching one-hot tensor, or integer class indices.
    """
    v = class_vectors.unsqueeze(0) if class_vectors.dim() == 2 else class_vectors
    if v.dim() != 3:
        raise ShapeMismatch(f"class_vectors must be 2-D or 3-D, got {tuple(class_vectors.shape)}")
    if not torch.is_floating_point(target):
        target = target.reshape(-1)
        if target.shape[0] != v.shape[0]:
            raise ShapeMismatch(f"{target.shape[0]} targets for batch of {v.shape[0]}")
        t = F.one_hot(target, v.shape[1]).to(v.dtype)
    else:
        t = target.unsqueeze(0) if target.dim() == 1 else target
        if t.shape != v.shape[:2]:
            raise ShapeMismatch(f"target shape {tuple(target.shape)} does not match {tuple(v.shape[:2])}")
        if not (((t == 0) | (t == 1)).all() and (t.sum(dim=1) == 1).all()):
            raise ShapeMismatch("target must be one-hot")
    norms = safe_norm(v)
    present = t * F.relu(params.m_plus - norms) ** 2
    absent = params.lam * (1 - t) * F.relu(norms - params.m_minus) ** 2
    return (present + absent).sum(dim=1).mean()


def _conv_out(n: int, kernel: int, stride: int, pad: int = 0) -> int:
    return (n + 2 * pad - kernel) // stride + 1


class CapsuleNetM(nn.Module):
    """Capsule network with stride-6 convolutions and no reconstruction decoder.

    conv (9x9, 256, stride 6) -> primary capsules (9x9, 32 x 8-d, stride 6)
    -> routed class capsules (n_classes x 16-d).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        cc = cfg.capsule
        self.conv1 = nn.Conv2d(1, cc.conv_channels, cc.conv_kernel, stride=cc.conv_stride)
        self.primary = nn.Conv2d(cc.conv_channels, cc.primary_channels * cc.primary_capsule_dim,
                                 cc.primary_kernel, stride=cc.primary_stride)
        h, w = cfg.input_shape
        h = _conv_out(_conv_out(h, cc.conv_kernel, cc.conv_stride), cc.primary_kernel, cc.primary_stride)
        w = _conv_out(_conv_out(w, cc.conv_kernel, cc.conv_stride), cc.primary_kernel, cc.primary_stride)
        if h < 1 or w < 1:
            raise ValueError(f"input {cfg.input_shape} too small for the capsule strides")
        self.n_primary = cc.primary_channels * h * w
        self.class_weights = nn.Parameter(torch.empty(
            self.n_primary, cfg.n_classes, cc.class_capsule_dim, cc.primary_capsule_dim))
        self.reset_head()

    def reset_head(self):
        # Routing starts with couplings 1/n_classes, so the votes must grow with
        # the class count.  The exponent is fitted so mean class capsule norms
        # start near 0.3 (between the margins) for 2..200 classes; much larger
        # scales saturate squash and stall the margin loss.
        n_out = self.class_weights.shape[1]
        std = (n_out / 2.0) ** 0.86 / math.sqrt(self.n_primary)
        nn.init.normal_(self.class_weights, std=std)

    @property
    def n_classes(self) -> int:
        return self.class_weights.shape[1]

    def primary_capsules(self, x: torch.Tensor) -> torch.Tensor:
        cc = self.config.capsule
        x = _as_batch(x, self.config.input_shape, exact=True)
        f = F.relu(self.conv1(x))
        p = self.primary(f)
        b, _, h, w = p.shape
        p = p.view(b, cc.primary_channels, cc.primary_capsule_dim, h, w)
        p = p.permute(0, 1, 3, 4, 2).reshape(b, -1, cc.primary_capsule_dim)
        return squash(p)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        u = self.primary_capsules(x)
        u_hat = torch.einsum("iodk,bik->biod", self.class_weights, u)
        v = dynamic_routing(u_hat, self.config.capsule.routing_iters)
        return check_finite(v, "class capsules")

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x).flatten(1)

    def scores(self, x: torch.Tensor) -> torch.Tensor:
        return safe_norm(self.forward(x))


class AEOutput(NamedTuple):
    embedding: torch.Tensor
    reconstruction: torch.Tensor
    recon_loss: torch.Tensor
    contractive_penalty: torch.Tensor


class ContractiveAutoencoder(nn.Module):
    """tanh MLP autoencoder whose penalty is the squared Frobenius norm of the encoder Jacobian.

    The encoder is ``linear -> tanh -> ... -> linear`` (no activation on the
    code); the decoder mirrors it.  Both losses are per-sample sums averaged
    over the batch.
    """

    def __init__(self, in_dim: int, hidden_dims: Sequence[int] = (512,), code_dim: int = 256):
        super().__init__()
        dims = [in_dim, *hidden_dims, code_dim]
        self.encoder = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        rdims = dims[::-1]
        self.decoder = nn.ModuleList(nn.Linear(a, b) for a, b in zip(rdims[:-1], rdims[1:]))

    def encode(self, z: torch.Tensor, keep_hidden: bool = False):
        hidden = []
        h = z
        for i, layer in enumerate(self.encoder):
            h = layer(h)
            if i < len(self.encoder) - 1:
                h = torch.tanh(h)
                hidden.append(h)
        return (h, hidden) if keep_hidden else h

    def decode(self, h: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.decoder):
            h = layer(h)
            if i < len(self.decoder) - 1:
                h = torch.tanh(h)
        return h

    def jacobian_penalty(self, hidden: List[torch.Tensor], batch: int) -> torch.Tensor:
        """Per-sample ``||dh/dz||_F^2`` given the tanh activations of the encoder."""
        weights = [layer.weight for layer in self.encoder]
        if not hidden:
            return (weights[0] ** 2).sum().expand(batch)
        if len(hidden) == 1:
            # ||W2 diag(d) W1||_F^2 = d^T ((W1 W1^T) * (W2^T W2)) d
            d = 1.0 - hidden[0] ** 2
            gram = (weights[0] @ weights[0].T) * (weights[1].T @ weights[1])
            return ((d @ gram) * d).sum(dim=1)
        jac = weights[0].unsqueeze(0) * (1.0 - hidden[0] ** 2).unsqueeze(-1)
        for w, a in zip(weights[1:-1], hidden[1:]):
            jac = (w @ jac) * (1.0 - a ** 2).unsqueeze(-1)
        jac = weights[-1] @ jac
        return (jac ** 2).sum(dim=(1, 2))

    def forward(self, z: torch.Tensor) -> AEOutput:
        h, hidden = self.encode(z, keep_hidden=True)
        z_hat = self.decode(h)
        recon = ((z - z_hat) ** 2).sum(dim=1).mean()
        penalty = self.jacobian_penalty(hidden, z.shape[0]).mean()
        return AEOutput(h, z_hat, recon, penalty)


class MAOutput(NamedTuple):
    embedding: torch.Tensor
    recon_loss: torch.Tensor
    contractive_penalty: torch.Tensor
    class_vectors: torch.Tensor


class CapsuleNetMA(nn.Module):
    """CapsuleNet-M whose concatenated class capsules feed a contractive autoencoder.

    The autoencoder code is the class-agnostic embedding used for prototypes.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.capsnet = CapsuleNetM(cfg)
        self.autoencoder = self._make_autoencoder(cfg.n_classes)

    def _make_autoencoder(self, n_classes: int) -> ContractiveAutoencoder:
        cfg = self.config
        return ContractiveAutoencoder(n_classes * cfg.capsule.class_capsule_dim,
                                      cfg.autoencoder.hidden_dims, cfg.embedding_dim)

    def forward(self, x: torch.Tensor) -> MAOutput:
        v = self.capsnet(x)
        out = self.autoencoder(v.flatten(1))
        check_finite(out.embedding, "autoencoder embedding")
        return MAOutput(out.embedding, out.recon_loss, out.contractive_penalty, v)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x).embedding

    def scores(self, x: torch.Tensor) -> torch.Tensor:
        return self.capsnet.scores(x)


def _as_batch(x: torch.Tensor, input_shape: Tuple[int, int], exact: bool) -> torch.Tensor:
    if x.dim() == 2:
        x = x.unsqueeze(0)
    if x.dim() == 3:
        x = x.unsqueeze(1)
    if x.dim() != 4 or x.shape[1] != 1:
        raise ShapeMismatch(f"expected (batch, 1, bins, frames), got {tuple(x.shape)}")
    if x.shape[2] != input_shape[0] or (exact and x.shape[3] != input_shape[1]):
        want = input_shape if exact else (input_shape[0], "T")
        raise ShapeMismatch(f"input spectrogram must be {want}, got {tuple(x.shape[2:])}")
    return x
