"""ResNet-34 with a frequency-collapsing fc1 and average pooling over time."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .capsules import _as_batch, check_finite
from .config import ModelConfig
from .vgg import init_weights


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class ResNet34(nn.Module):
    """``forward`` returns ``(logits, embedding)``; the embedding is the time-pooled fc1 output (512-d)."""

    stages = ((64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2))

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.stem = nn.Sequential(
            nn.Conv2d(1, 64, 7, 2, 3, bias=False), nn.BatchNorm2d(64), nn.ReLU(inplace=True),
            nn.MaxPool2d(3, 2, 1),
        )
        layers, cin = [], 64
        for cout, blocks, stride in self.stages:
            for i in range(blocks):
                layers.append(BasicBlock(cin, cout, stride if i == 0 else 1))
                cin = cout
        self.blocks = nn.Sequential(*layers)
        h = cfg.input_shape[0]
        for _ in range(5):
            h = (h + 1) // 2
        # fc1 collapses the remaining frequency rows (4 for 128 bins)
        self.fc1 = nn.Sequential(nn.Conv2d(512, 512, (h, 1)), nn.BatchNorm2d(512), nn.ReLU(inplace=True))
        self.fc2 = nn.Linear(512, cfg.n_classes)
        init_weights(self)
        nn.init.constant_(self.fc1[1].weight, cfg.embedding_init_scale)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        x = _as_batch(x, self.config.input_shape, exact=False)
        f = self.fc1(self.blocks(self.stem(x)))
        e = f.mean(dim=(2, 3))  # pool time (10 steps for 300 frames)
        return check_finite(e, "ResNet-34 embedding")

    def forward(self, x: torch.Tensor):
        e = self.embed(x)
        return self.fc2(e), e

    def scores(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x)[0]

    def reset_head(self, n_classes: int):
        self.fc2 = nn.Linear(512, n_classes)
        init_weights(self.fc2)
