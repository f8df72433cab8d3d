"""The embedding tower: three conv/relu/pool/LCN stages and two dense layers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import Tensor, relu
from .layers import conv2d, lcn, linear, maxpool2

IMAGE_SHAPE = (3, 48, 48)
PARAM_ORDER = ("conv1.W", "conv1.b", "conv2.W", "conv2.b", "conv3.W", "conv3.b",
               "fc1.W", "fc1.b", "fc2.W", "fc2.b")
KERNELS = (7, 4, 4)
LCN_KERNELS = (7, 7, 6)
PAD = 2


@dataclass(frozen=True)
class Architecture:
    """Layer widths.  The defaults are the full-size network; the layer
    topology, kernels and spatial shapes never change."""

    conv1: int = 150
    conv2: int = 200
    conv3: int = 300
    fc1: int = 350

    @property
    def flat_dim(self) -> int:
        return self.conv3 * 6 * 6

    def param_shapes(self, dim: int) -> dict[str, tuple[int, ...]]:
        c = (IMAGE_SHAPE[0], self.conv1, self.conv2, self.conv3)
        shapes = {}
        for i, k in enumerate(KERNELS, start=1):
            shapes[f"conv{i}.W"] = (c[i], c[i - 1], k, k)
            shapes[f"conv{i}.b"] = (c[i],)
        shapes["fc1.W"] = (self.fc1, self.flat_dim)
        shapes["fc1.b"] = (self.fc1,)
        shapes["fc2.W"] = (dim, self.fc1)
        shapes["fc2.b"] = (dim,)
        return shapes


FULL = Architecture()
# Narrow widths for CPU-scale experiments and tests.
DESK = Architecture(conv1=8, conv2=12, conv3=16, fc1=48)


class EmbedderParams:
    """Learnable weights of one tower, keyed by name in a fixed order."""

    def __init__(self, tensors: dict[str, Tensor]):
        missing = [n for n in PARAM_ORDER if n not in tensors]
        if missing:
            raise ValueError(f"missing parameters: {missing}")
        self.tensors = {n: tensors[n] for n in PARAM_ORDER}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    @property
    def dim(self) -> int:
        return self.tensors["fc2.b"].shape[0]

    @property
    def arch(self) -> Architecture:
        return Architecture(conv1=self["conv1.W"].shape[0], conv2=self["conv2.W"].shape[0],
                            conv3=self["conv3.W"].shape[0], fc1=self["fc1.W"].shape[0])

    def zero_grad(self) -> None:
        for t in self:
            t.grad = None

    def copy(self) -> "EmbedderParams":
        return EmbedderParams({n: Tensor(t.data.copy(), requires_grad=t.requires_grad)
                               for n, t in self.items()})

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self)


def init_params(seed: int | np.random.Generator, dim: int = 100,
                arch: Architecture = FULL) -> EmbedderParams:
    """Fan-in uniform init: W ~ U(-s, s), s = sqrt(1/fan_in); biases zero."""
    if dim < 1:
        raise ValueError(f"embedding dimension must be >= 1, got {dim}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tensors = {}
    for name, shape in arch.param_shapes(dim).items():
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            s = np.sqrt(1.0 / np.prod(shape[1:]))
            data = rng.uniform(-s, s, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return EmbedderParams(tensors)


def embed(params: EmbedderParams, images, return_fc1: bool = False):
    """Embed ``[3,48,48]`` or ``[N,3,48,48]`` images into D-dim vectors.

    With ``return_fc1`` also returns the post-ReLU fc1 activations.
    """
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.shape[-3:] != IMAGE_SHAPE or x.ndim not in (3, 4):
        raise ValueError(f"expected images of shape {IMAGE_SHAPE}, got {x.shape}")
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + IMAGE_SHAPE)
    for i, k in enumerate(LCN_KERNELS, start=1):
        x = conv2d(x, params[f"conv{i}.W"], params[f"conv{i}.b"], pad=PAD)
        x = lcn(maxpool2(relu(x)), kernel=k)
    x = x.reshape((x.shape[0], -1))
    fc1 = relu(linear(x, params["fc1.W"], params["fc1.b"]))
    out = linear(fc1, params["fc2.W"], params["fc2.b"])
    if single:
        out, fc1 = out.reshape((out.shape[1],)), fc1.reshape((fc1.shape[1],))
    return (out, fc1) if return_fc1 else out


def shape_trace(params: EmbedderParams, image) -> list[tuple[int, ...]]:
    """Per-stage output shapes of a single-image forward pass."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    trace = [x.shape]
    for i, k in enumerate(LCN_KERNELS, start=1):
        x = relu(conv2d(x, params[f"conv{i}.W"], params[f"conv{i}.b"], pad=PAD))
        trace.append(x.shape)
        x = maxpool2(x)
        trace.append(x.shape)
        x = lcn(x, kernel=k)
    fc1 = relu(linear(x.reshape((-1,)), params["fc1.W"], params["fc1.b"]))
    trace.append(fc1.shape)
    trace.append(linear(fc1, params["fc2.W"], params["fc2.b"]).shape)
    return trace
