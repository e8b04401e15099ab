"""Training configuration and the layered ``key = value`` config files."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence

OPTIMIZERS = ("adam", "sgd_momentum")
LOSSES = ("cross_entropy", "margin", "prototypical", "capsma_composite")


@dataclass(frozen=True)
class CompositeWeights:
    proto: float = 1.0
    recon: float = 0.1
    contractive: float = 1e-4
    margin: float = 0.0  # >0 keeps the capsule margin loss in the composite objective


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 32
    max_epochs: int = 30
    max_steps: Optional[int] = None
    seed: int = 0
    loss: Optional[str] = None  # None picks the arch default
    composite_weights: CompositeWeights = field(default_factory=CompositeWeights)
    distance: str = "sq_euclidean"
    n_query: int = 5
    eval_every: int = 50
    eval_episodes: int = 100
    eval_n_query: int = 15
    patience: int = 5
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.loss is not None and self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if isinstance(self.composite_weights, dict):
            object.__setattr__(self, "composite_weights", CompositeWeights(**self.composite_weights))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


# Episodic runs default to a larger step size.
EPISODIC_DEFAULTS = {"learning_rate": 1e-3, "max_steps": 2000}


def _parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    low = text.lower()
    if low in ("none", "null"):
        return None
    if low in ("true", "false"):
        return low == "true"
    return text


def parse_assignments(lines: Iterable[str], source: str = "<overrides>") -> Dict[str, object]:
    """``key = value`` lines; ``#`` starts a comment; dotted keys nest."""
    out = {}
    for n, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{n}: expected key = value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


def _nest(flat: Dict[str, object]) -> dict:
    tree: dict = {}
    for key, value in flat.items():
        node = tree
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return tree


def _flatten(tree: dict, prefix: str = "") -> Dict[str, object]:
    flat = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(_flatten(v, key + "."))
        else:
            flat[key] = v
    return flat


def load_layers(paths: Sequence[os.PathLike] = (), overrides: Sequence[str] = (),
                base: Optional[Dict[str, object]] = None) -> dict:
    """Merge ``base``, then each file in order, then ``key=value`` overrides; later wins."""
    flat = dict(base or {})
    for p in paths:
        flat.update(parse_assignments(Path(p).read_text().splitlines(), os.fspath(p)))
    flat.update(parse_assignments(overrides))
    return _nest(flat)


def write_resolved(path: os.PathLike, tree: dict) -> None:
    lines = [f"{k} = {json.dumps(v)}" for k, v in sorted(_flatten(tree).items())]
    Path(path).write_text("\n".join(lines) + "\n")
