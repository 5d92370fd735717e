"""Feature extractor, generator and domain discriminator.

Layer schedules follow the three implementation tables of the DINN design.
All forward passes take batched NHWC inputs (``N x 30 x 20 x 4`` CSI images,
``N x 4 x 3 x 128`` features).  Passing ``trace=[]`` collects
``(layer_name, per-sample output shape)`` pairs for shape auditing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

CSI_SHAPE = (30, 20, 4)
FEATURE_SHAPE = (4, 3, 128)
IMAGE_SHAPE = (120, 160, 1)

# (name, kernel, stride, c_out)
EXTRACTOR_LAYERS = [
    ("conv1", 3, 2, 8),
    ("conv2", 1, 1, 8),
    ("conv3", 3, 2, 32),
    ("conv4", 1, 1, 32),
    ("conv5", 3, 2, 128),
    ("conv6", 1, 1, 128),
]
# (name, kernel, c_out, resize target or None); layer7 ends in a sigmoid
GENERATOR_LAYERS = [
    ("layer1", 1, 64, (15, 20)),
    ("layer2", 1, 64, None),
    ("layer3", 3, 32, (30, 40)),
    ("layer4", 3, 32, None),
    ("layer5", 3, 8, (60, 80)),
    ("layer6", 3, 8, None),
    ("layer7", 3, 1, (120, 160)),
]
GENERATOR_SEED_SHAPE = (8, 10, 128)
DISCRIMINATOR_WIDTHS = [1024, 1024, 128]


@dataclass
class ModelConfig:
    num_domains: int = 4
    se_ratio: int = 16
    lrelu_alpha: float = 0.2
    dtype: str = "float32"


@dataclass
class ModelParams:
    """Named parameter sets for the three networks (``feature``, ``generator``, ``discriminator``)."""

    feature: dict[str, Tensor] = field(default_factory=dict)
    generator: dict[str, Tensor] = field(default_factory=dict)
    discriminator: dict[str, Tensor] = field(default_factory=dict)

    def groups(self) -> dict[str, dict[str, Tensor]]:
        return {"feature": self.feature, "generator": self.generator, "discriminator": self.discriminator}

    def named(self) -> list[tuple[str, Tensor]]:
        """All parameters as ``("group.layer.kind", tensor)`` in a fixed order."""
        return [(f"{g}.{k}", t) for g, d in self.groups().items() for k, t in d.items()]

    def count(self) -> dict[str, int]:
        return {g: sum(t.data.size for t in d.values()) for g, d in self.groups().items()}

    def copy(self) -> "ModelParams":
        def dup(d):
            return {k: Tensor(t.data.copy(), requires_grad=True) for k, t in d.items()}

        return ModelParams(dup(self.feature), dup(self.generator), dup(self.discriminator))

    @property
    def num_domains(self) -> int:
        return self.discriminator["out.bias"].shape[0]


def param_shapes(config: ModelConfig) -> dict[str, list[tuple[str, tuple[int, ...], str]]]:
    """``group -> [(name, shape, activation_after)]`` for every parameter."""
    feature, c_in = [], CSI_SHAPE[2]
    for name, k, _, c_out in EXTRACTOR_LAYERS:
        feature += [(f"{name}.kernel", (k, k, c_in, c_out), "relu"), (f"{name}.bias", (c_out,), "")]
        c_in = c_out
    c = FEATURE_SHAPE[2]
    if c % config.se_ratio:
        raise ValueError(f"SE ratio {config.se_ratio} must divide {c}")
    hidden = c // config.se_ratio
    feature += [
        ("se.squeeze.weights", (c, hidden), "relu"),
        ("se.squeeze.bias", (hidden,), ""),
        ("se.expand.weights", (hidden, c), "sigmoid"),
        ("se.expand.bias", (c,), ""),
    ]

    flat = int(np.prod(FEATURE_SHAPE))
    generator = [("fc.weights", (flat, int(np.prod(GENERATOR_SEED_SHAPE))), "relu"),
                 ("fc.bias", (int(np.prod(GENERATOR_SEED_SHAPE)),), "")]
    c_in = GENERATOR_SEED_SHAPE[2]
    for name, k, c_out, _ in GENERATOR_LAYERS:
        act = "sigmoid" if name == "layer7" else "lrelu"
        generator += [(f"{name}.kernel", (k, k, c_in, c_out), act), (f"{name}.bias", (c_out,), "")]
        c_in = c_out

    discriminator, n_in = [], flat
    for i, width in enumerate(DISCRIMINATOR_WIDTHS, start=1):
        discriminator += [(f"fc{i}.weights", (n_in, width), "lrelu"), (f"fc{i}.bias", (width,), "")]
        n_in = width
    discriminator += [("out.weights", (n_in, config.num_domains), "softmax"),
                      ("out.bias", (config.num_domains,), "")]
    return {"feature": feature, "generator": generator, "discriminator": discriminator}


def init_params(seed: int, config: ModelConfig | None = None) -> ModelParams:
    """He-normal weights ahead of ReLU/LReLU, LeCun-normal ahead of sigmoid/softmax, zero biases."""
    config = config or ModelConfig()
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    params = ModelParams()
    for group, entries in param_shapes(config).items():
        target = getattr(params, group)
        for name, shape, act in entries:
            if name.endswith("bias"):
                data = np.zeros(shape, dtype=dtype)
            else:
                fan_in = int(np.prod(shape[:-1]))
                gain = 2.0 if act in ("relu", "lrelu") else 1.0
                data = (rng.standard_normal(shape) * np.sqrt(gain / fan_in)).astype(dtype)
            target[name] = Tensor(data, requires_grad=True)
    return params


def _check(x: Tensor, expected: tuple[int, ...], what: str):
    if x.ndim != len(expected) + 1 or x.shape[1:] != expected:
        shape = "x".join(map(str, expected))
        raise ShapeError(f"{what} expects a batch of {shape} inputs, got {x.shape}")


def _record(trace, name, x: Tensor):
    if trace is not None:
        trace.append((name, x.shape[1:]))


def se_block(u: Tensor, p: dict[str, Tensor], trace=None) -> Tensor:
    """Squeeze-and-excitation gating: ``u * sigmoid(expand(relu(squeeze(gap(u)))))``."""
    s = T.global_avg_pool(u)
    s = T.relu(T.dense(s, p["se.squeeze.weights"], p["se.squeeze.bias"]))
    gate = T.sigmoid(T.dense(s, p["se.expand.weights"], p["se.expand.bias"]))
    out = T.channel_scale(u, gate)
    _record(trace, "se", out)
    return out


def feature_extractor_forward(x, params: ModelParams, trace=None) -> Tensor:
    p = params.feature
    x = T.as_tensor(x)
    _check(x, CSI_SHAPE, "feature extractor")
    if x.dtype != p["conv1.kernel"].dtype:
        x = Tensor(x.data.astype(p["conv1.kernel"].dtype))
    h = x
    for name, _, stride, _ in EXTRACTOR_LAYERS:
        h = T.relu(T.conv2d(h, p[f"{name}.kernel"], p[f"{name}.bias"], (stride, stride)))
        _record(trace, name, h)
    return se_block(h, p, trace)


def generator_forward(z: Tensor, params: ModelParams, alpha: float = 0.2, trace=None) -> Tensor:
    p = params.generator
    _check(z, FEATURE_SHAPE, "generator")
    h = T.relu(T.dense(z, p["fc.weights"], p["fc.bias"]))
    h = T.reshape(h, (z.shape[0],) + GENERATOR_SEED_SHAPE)
    _record(trace, "fc", h)
    for name, _, _, resize in GENERATOR_LAYERS:
        if resize is not None:
            h = T.resize_nearest(h, resize)
        h = T.conv2d(h, p[f"{name}.kernel"], p[f"{name}.bias"], (1, 1))
        h = T.sigmoid(h) if name == "layer7" else T.leaky_relu(h, alpha)
        _record(trace, name, h)
    return h


def discriminator_forward(z: Tensor, params: ModelParams, alpha: float = 0.2, trace=None) -> Tensor:
    p = params.discriminator
    _check(z, FEATURE_SHAPE, "discriminator")
    h = T.flatten(z)
    for i in range(1, len(DISCRIMINATOR_WIDTHS) + 1):
        h = T.leaky_relu(T.dense(h, p[f"fc{i}.weights"], p[f"fc{i}.bias"]), alpha)
        _record(trace, f"fc{i}", h)
    d = T.softmax(T.dense(h, p["out.weights"], p["out.bias"]))
    _record(trace, "out", d)
    return d
