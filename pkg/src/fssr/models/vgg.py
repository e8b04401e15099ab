"""VGG-M adapted to single-channel spectrogram input."""

from __future__ import annotations

import torch
import torch.nn as nn

from .capsules import _as_batch, _conv_out, check_finite
from .config import ModelConfig


def _conv_bn(cin, cout, kernel, stride, pad):
    return nn.Sequential(nn.Conv2d(cin, cout, kernel, stride, pad), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class VGGM(nn.Module):
    """conv1..conv5 with max pooling, fc6 as a full-height conv, time average, fc7, fc8.

    fc6 spans whatever frequency height survives mpool5: 9 rows for 512-bin
    input, a single row for 128 bins.  ``forward`` returns ``(logits, embedding)``
    where the embedding is the 1024-d fc7 activation.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.features = nn.Sequential(
            _conv_bn(1, 96, 7, 2, 1),
            nn.MaxPool2d(3, 2),
            _conv_bn(96, 256, 5, 2, 1),
            nn.MaxPool2d(3, 2),
            _conv_bn(256, 384, 3, 1, 1),
            _conv_bn(384, 256, 3, 1, 1),
            _conv_bn(256, 256, 3, 1, 1),
            nn.MaxPool2d((5, 3), (3, 2)),
        )
        h = cfg.input_shape[0]
        for k, s, p in ((7, 2, 1), (3, 2, 0), (5, 2, 1), (3, 2, 0), (5, 3, 0)):
            h = _conv_out(h, k, s, p)
        if h < 1:
            raise ValueError(f"{cfg.input_shape[0]} frequency bins is too few for VGG-M")
        self.fc6 = _conv_bn(256, 4096, (h, 1), 1, 0)
        self.fc7 = nn.Sequential(nn.Linear(4096, 1024), nn.BatchNorm1d(1024), nn.ReLU(inplace=True))
        self.fc8 = nn.Linear(1024, cfg.n_classes)
        init_weights(self)
        nn.init.constant_(self.fc7[1].weight, cfg.embedding_init_scale)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        x = _as_batch(x, self.config.input_shape, exact=False)
        f = self.fc6(self.features(x))
        f = f.mean(dim=(2, 3))  # apool6 over the remaining time steps
        return check_finite(self.fc7(f), "VGG-M embedding")

    def forward(self, x: torch.Tensor):
        e = self.embed(x)
        return self.fc8(e), e

    def scores(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x)[0]

    def reset_head(self, n_classes: int):
        self.fc8 = nn.Linear(self.fc8.in_features, n_classes)
        init_weights(self.fc8)


def init_weights(module: nn.Module) -> None:
    """He fan-in normal for conv/linear weights, zero biases, unit BatchNorm."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
