"""Model hyperparameters."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Tuple

ARCHS = ("vgg_m", "resnet34", "capsnet_m", "capsnet_ma")


@dataclass(frozen=True)
class CapsuleConfig:
    conv_channels: int = 256
    conv_kernel: int = 9
    conv_stride: int = 6
    primary_channels: int = 32
    primary_capsule_dim: int = 8
    primary_kernel: int = 9
    primary_stride: int = 6
    class_capsule_dim: int = 16
    routing_iters: int = 3


@dataclass(frozen=True)
class AutoencoderConfig:
    hidden_dims: Tuple[int, ...] = (512,)
    contractive_weight: float = 1e-4
    recon_weight: float = 1.0


@dataclass(frozen=True)
class MarginLossParams:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lam: float = 0.5

    def __post_init__(self):
        if not 0 < self.m_minus < self.m_plus < 1:
            raise ValueError("need 0 < m_minus < m_plus < 1")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")


@dataclass(frozen=True)
class ModelConfig:
    arch: str
    n_classes: int
    embedding_dim: int = 256
    input_shape: Tuple[int, int] = (128, 300)
    capsule: CapsuleConfig = field(default_factory=CapsuleConfig)
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    # initial gamma of the BatchNorm feeding the VGG/ResNet embedding
    embedding_init_scale: float = 0.01

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if self.capsule.routing_iters < 1:
            raise ValueError("routing_iters must be at least 1")
        dims = [self.embedding_dim, *self.input_shape, *self.autoencoder.hidden_dims,
                self.capsule.class_capsule_dim, self.capsule.primary_capsule_dim]
        if any(d <= 0 for d in dims):
            raise ValueError("all dimensions must be positive")
        object.__setattr__(self, "input_shape", tuple(self.input_shape))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        cap = CapsuleConfig(**d.pop("capsule", {}))
        ae = d.pop("autoencoder", {})
        ae = AutoencoderConfig(**{**ae, "hidden_dims": tuple(ae.get("hidden_dims", (512,)))})
        return cls(capsule=cap, autoencoder=ae, **d)
