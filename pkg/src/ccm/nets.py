"""Teacher/student backbones, classifier, projector and predictor.

All five networks are plain MLPs (ReLU between layers, none after the last).
The student ``F_prime`` mirrors the teacher ``F`` and is only ever changed by
:func:`momentum_update`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blob import read_blob, write_blob
from .errors import ConfigError, FormatError, ShapeError

CHECKPOINT_FORMAT = "ccm-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MLPSpec:
    layer_widths: tuple[int, ...]

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ConfigError("need at least input and output widths", "layer_widths")
        if any(w <= 0 for w in widths):
            raise ConfigError("widths must be positive", "layer_widths")

    @property
    def in_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def out_dim(self) -> int:
        return self.layer_widths[-1]


@dataclass
class MLP:
    """Weights ``W_l`` (in x out) and biases ``b_l`` for each layer."""

    spec: MLPSpec
    layers: list[tuple[Tensor, Tensor]]

    @classmethod
    def init(cls, spec: MLPSpec, rng: np.random.Generator) -> "MLP":
        layers = []
        for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=(fan_out,))
            layers.append((Tensor(W, requires_grad=True), Tensor(b, requires_grad=True)))
        return cls(spec, layers)

    def parameters(self) -> Iterator[Tensor]:
        for W, b in self.layers:
            yield W
            yield b

    def signature(self) -> list[tuple[int, ...]]:
        return [p.shape for p in self.parameters()]

    def copy(self, requires_grad: bool = True) -> "MLP":
        layers = [
            (Tensor(W.data.copy(), requires_grad), Tensor(b.data.copy(), requires_grad))
            for W, b in self.layers
        ]
        return MLP(self.spec, layers)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.spec.in_dim:
            raise ShapeError("mlp", x.shape, (None, self.spec.in_dim))
        h = x
        last = len(self.layers) - 1
        for i, (W, b) in enumerate(self.layers):
            h = ad.matmul(h, W) + b
            if i < last:
                h = ad.relu(h)
        return h


@dataclass
class ModelBundle:
    spec: MLPSpec
    num_classes: int
    seed: int
    F: MLP
    F_prime: MLP
    C: MLP
    H: MLP
    G: MLP
    momentum_steps: int = field(default=0)

    @property
    def feature_dim(self) -> int:
        return self.spec.out_dim

    def trainable(self) -> dict[str, MLP]:
        return {"F": self.F, "C": self.C, "H": self.H, "G": self.G}

    def networks(self) -> dict[str, MLP]:
        return {"F": self.F, "F_prime": self.F_prime, "C": self.C, "H": self.H, "G": self.G}

    def parameters(self) -> list[Tensor]:
        """Parameters the optimizer is allowed to touch (never F_prime)."""
        return [p for net in self.trainable().values() for p in net.parameters()]

    def copy(self) -> "ModelBundle":
        return ModelBundle(
            self.spec,
            self.num_classes,
            self.seed,
            self.F.copy(),
            self.F_prime.copy(requires_grad=False),
            self.C.copy(),
            self.H.copy(),
            self.G.copy(),
            self.momentum_steps,
        )

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, net in self.networks().items():
            for i, (W, b) in enumerate(net.layers):
                out[f"{name}.{i}.W"] = W.data
                out[f"{name}.{i}.b"] = b.data
        return out

    def header(self) -> dict:
        return {
            "layer_widths": list(self.spec.layer_widths),
            "num_classes": self.num_classes,
            "seed": self.seed,
            "momentum_steps": self.momentum_steps,
        }


def _head_spec(widths: Sequence[int]) -> MLPSpec:
    return MLPSpec(tuple(widths))


def init_bundle(spec: MLPSpec, num_classes: int, seed: int) -> ModelBundle:
    """Seeded initialization; ``F_prime`` starts as an exact copy of ``F``."""
    d = spec.out_dim
    if d % 2:
        raise ConfigError(f"feature width {d} is odd; the projector halves it", "layer_widths")
    if num_classes < 1:
        raise ConfigError("must be positive", "num_classes")
    rng = np.random.default_rng(seed)
    F = MLP.init(spec, rng)
    C = MLP.init(_head_spec([d, num_classes]), rng)
    H = MLP.init(_head_spec([d, d // 2]), rng)
    G = MLP.init(_head_spec([d, num_classes]), rng)
    return ModelBundle(spec, num_classes, seed, F, F.copy(requires_grad=False), C, H, G)


def forward_features(net: MLP, batch, *, student: bool = False) -> Tensor:
    """Features of a batch. Student passes never record a graph."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if student:
        with ad.no_grad():
            return net(x)
    return net(x)


def classify(C: MLP, features: Tensor) -> Tensor:
    """Raw logits; the softmax belongs to the loss."""
    if features.ndim != 2 or features.shape[1] != C.spec.in_dim:
        raise ShapeError("classify", features.shape, (None, C.spec.in_dim))
    if features.shape[0] == 0:
        return Tensor(np.zeros((0, C.spec.out_dim)))
    return C(features)


def momentum_update(bundle: ModelBundle, alpha: float) -> MLP:
    """``p' <- alpha * p' + (1 - alpha) * p`` for every student parameter."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha={alpha} outside [0, 1]", "alpha")
    for s, t in zip(bundle.F_prime.parameters(), bundle.F.parameters()):
        s.data = alpha * s.data + (1.0 - alpha) * t.data
    bundle.momentum_steps += 1
    return bundle.F_prime


# ---------------------------------------------------------------- persistence


def _nets_from_arrays(header: dict, arrays: dict[str, np.ndarray]) -> ModelBundle:
    spec = MLPSpec(tuple(header["layer_widths"]))
    bundle = init_bundle(spec, int(header["num_classes"]), int(header["seed"]))
    for name, net in bundle.networks().items():
        for i, (W, b) in enumerate(net.layers):
            for key, t in ((f"{name}.{i}.W", W), (f"{name}.{i}.b", b)):
                if key not in arrays:
                    raise FormatError(f"checkpoint is missing array {key!r}")
                if arrays[key].shape != t.shape:
                    raise FormatError(f"{key}: shape {arrays[key].shape} != expected {t.shape}")
                t.data = arrays[key].copy()
    bundle.momentum_steps = int(header.get("momentum_steps", 0))
    return bundle


def save_bundle(path: str | Path, bundle: ModelBundle, extra_header: dict | None = None,
                extra_arrays: dict[str, np.ndarray] | None = None) -> None:
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "bundle": bundle.header()}
    if extra_header:
        header.update(extra_header)
    arrays = bundle.to_arrays()
    if extra_arrays:
        arrays.update(extra_arrays)
    write_blob(path, header, arrays)


def load_bundle(path: str | Path) -> tuple[ModelBundle, dict, dict[str, np.ndarray]]:
    """Returns the bundle, the full header and all arrays (for extension blocks)."""
    header, arrays = read_blob(path)
    if header.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a ccm checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('version')}")
    return _nets_from_arrays(header["bundle"], arrays), header, arrays
