"""Embedding backbones, capsule machinery, parameter accounting and checkpoints."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional, Tuple, Union

import torch
import torch.nn as nn

from ..errors import CheckpointIncompatible
from .capsules import (
    CapsuleNetM,
    CapsuleNetMA,
    ContractiveAutoencoder,
    check_finite,
    dynamic_routing,
    margin_loss,
    safe_norm,
    squash,
)
from .config import ARCHS, AutoencoderConfig, CapsuleConfig, MarginLossParams, ModelConfig
from .resnet import ResNet34
from .vgg import VGGM

CHECKPOINT_FORMAT = "fssr-checkpoint"
CHECKPOINT_VERSION = 1

_REGISTRY = {"vgg_m": VGGM, "resnet34": ResNet34, "capsnet_m": CapsuleNetM, "capsnet_ma": CapsuleNetMA}


def build_model(cfg: ModelConfig, seed: Optional[int] = None) -> nn.Module:
    if seed is not None:
        torch.manual_seed(seed)
    return _REGISTRY[cfg.arch](cfg)


def count_parameters(model: nn.Module, trainable_only: bool = True) -> int:
    """Number of scalar parameters, biases and BatchNorm affine terms included."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def replace_head(model: nn.Module, n_classes: int, seed: Optional[int] = None) -> nn.Module:
    """Swap the class-dependent layers for freshly initialized ones.

    Everything else keeps its exact values.  For the capsule models the head
    is the class-capsule transform (and, for CapsuleNet-MA, the autoencoder,
    whose input width depends on the class count).
    """
    from dataclasses import replace

    if seed is not None:
        torch.manual_seed(seed)
    cfg = replace(model.config, n_classes=n_classes)
    if isinstance(model, (VGGM, ResNet34)):
        model.reset_head(n_classes)
        model.config = cfg
        return model
    caps = model.capsnet if isinstance(model, CapsuleNetMA) else model
    cc = cfg.capsule
    caps.class_weights = nn.Parameter(torch.empty(
        caps.n_primary, n_classes, cc.class_capsule_dim, cc.primary_capsule_dim))
    caps.config = cfg
    caps.reset_head()
    if isinstance(model, CapsuleNetMA):
        model.config = cfg
        model.autoencoder = model._make_autoencoder(n_classes)
    return model


def save_checkpoint(path: Union[str, os.PathLike], model: nn.Module, **metadata) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "metadata": metadata,
    }, os.fspath(path))


def load_checkpoint(path: Union[str, os.PathLike], n_classes: Optional[int] = None,
                    allow_replace_head: bool = False, seed: Optional[int] = None) -> Tuple[nn.Module, dict]:
    """Rebuild a model from a checkpoint.

    Asking for a different ``n_classes`` fails unless ``allow_replace_head``
    is set, in which case the head is re-initialized after loading.
    """
    try:
        blob = torch.load(os.fspath(path), map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointIncompatible(f"{path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointIncompatible(f"{path}: not an fssr checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointIncompatible(f"{path}: unsupported checkpoint version {blob.get('version')}")
    cfg = ModelConfig.from_dict(blob["config"])
    model = build_model(cfg)
    try:
        model.load_state_dict(blob["state_dict"])
    except RuntimeError as exc:
        raise CheckpointIncompatible(f"{path}: {exc}") from exc
    if n_classes is not None and n_classes != cfg.n_classes:
        if not allow_replace_head:
            raise CheckpointIncompatible(
                f"checkpoint has {cfg.n_classes} classes, {n_classes} requested; use replace-head")
        replace_head(model, n_classes, seed)
    return model, blob.get("metadata", {})


__all__ = [
    "ARCHS", "AutoencoderConfig", "CapsuleConfig", "CapsuleNetM", "CapsuleNetMA", "ContractiveAutoencoder",
    "MarginLossParams", "ModelConfig", "ResNet34", "VGGM", "build_model", "check_finite", "count_parameters",
    "dynamic_routing", "load_checkpoint", "margin_loss", "replace_head", "safe_norm", "save_checkpoint", "squash",
]
