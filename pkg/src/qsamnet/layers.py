"""Quaternion layers: convolution, split activations, instance norm, resampling, residual block.

Channel counts passed to the layer constructors are *quaternion* channel counts.  Each layer
also has a real-valued twin (``kind="real"``) that swaps the quaternion convolution for an
ordinary one over ``4*C`` real channels and the quaternion norm for a per-channel real norm;
the twin is used only for parameter accounting and quaternion-vs-real comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from qsamnet import autograd as ag
from qsamnet.autograd import Parameter, Tensor

QUATERNION = "quaternion"
REAL = "real"


# ---------------------------------------------------------------------------
# functional ops


def qconv2d(
    x: Tensor,
    w0: Tensor,
    w1: Tensor,
    w2: Tensor,
    w3: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int | None = None,
) -> Tensor:
    """Quaternion convolution ``Ŵ ⊗ q`` realised as one real convolution.

    ``x`` is ``(B, 4*Cin, H, W)`` in component-planar order, each bank ``(Cout, Cin, k, k)``,
    ``bias`` ``(4, Cout)`` (one quaternion per output channel).  ``padding`` defaults to
    ``k // 2``.
    """
    cout, cin, k, _ = w0.shape
    if k % 2 == 0:
        raise ValueError(f"quaternion kernels must have odd size, got {k}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if x.ndim != 4 or x.shape[1] != 4 * cin:
        raise ValueError(f"qconv2d expects {4 * cin} real input planes ({cin} quaternion channels), got {x.shape}")
    weight = ag.hamilton_weight(w0, w1, w2, w3)
    b = None if bias is None else ag.reshape(bias, (4 * cout,))
    return ag.conv2d(x, weight, b, stride=stride, padding=k // 2 if padding is None else padding)


def leaky_relu_split(x: Tensor, slope: float = 0.2) -> Tensor:
    """LeakyReLU applied independently to every quaternion component."""
    return ag.leaky_relu(x, slope)


def sigmoid_split(x: Tensor) -> Tensor:
    return ag.sigmoid(x)


def qinstance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Quaternion instance norm: component-wise mean, one pooled variance per (instance, channel)."""
    return ag.instance_norm(x, gamma, beta, eps, groups=4)


def nearest_upsample(x: Tensor) -> Tensor:
    return ag.upsample_nearest2x(x)


# ---------------------------------------------------------------------------
# modules


class Module:
    """Minimal parameter container; children and parameters are discovered from attributes."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = own.keys() - state.keys()
        unexpected = state.keys() - own.keys()
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match parameter {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def zero_(self) -> "Module":
        """Set every parameter (including norm scales) to zero."""
        for p in self.parameters():
            p.data = np.zeros_like(p.data)
        return self

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def init_bound(cin: int, k: int) -> float:
    """Uniform bound giving unit forward gain; the Hamilton product puts ``4*cin*k*k`` terms in each sum."""
    return float(np.sqrt(3.0 / (4 * cin * k * k)))


def _uniform(rng: np.random.Generator, bound: float, shape, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class QConv2d(Module):
    """Quaternion convolution with four real kernel banks and a quaternion bias."""

    def __init__(self, cin, cout, k=3, stride=1, bias=True, rng=None, dtype=np.float32):
        if k % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {k}")
        if stride < 1:
            raise ValueError("stride must be positive")
        rng = np.random.default_rng() if rng is None else rng
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        bound = init_bound(cin, k)
        self.W0 = Parameter(_uniform(rng, bound, (cout, cin, k, k), dtype))
        self.W1 = Parameter(_uniform(rng, bound, (cout, cin, k, k), dtype))
        self.W2 = Parameter(_uniform(rng, bound, (cout, cin, k, k), dtype))
        self.W3 = Parameter(_uniform(rng, bound, (cout, cin, k, k), dtype))
        self.bias = Parameter(np.zeros((4, cout), dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return qconv2d(x, self.W0, self.W1, self.W2, self.W3, self.bias, stride=self.stride)

    def weight_count(self) -> int:
        return 4 * self.cout * self.cin * self.k * self.k

    def twin_weight_count(self) -> int:
        return (4 * self.cout) * (4 * self.cin) * self.k * self.k


class RealConv2d(Module):
    """Real convolution over ``4*cin -> 4*cout`` planes; the structural twin of :class:`QConv2d`."""

    def __init__(self, cin, cout, k=3, stride=1, bias=True, rng=None, dtype=np.float32):
        if k % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {k}")
        rng = np.random.default_rng() if rng is None else rng
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        bound = init_bound(cin, k)
        self.weight = Parameter(_uniform(rng, bound, (4 * cout, 4 * cin, k, k), dtype))
        self.bias = Parameter(np.zeros(4 * cout, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ag.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.k // 2)

    def weight_count(self) -> int:
        return self.weight.data.size

    twin_weight_count = weight_count


class QInstanceNorm(Module):
    """``gamma`` is one real scale per channel, ``beta`` one quaternion shift per channel."""

    def __init__(self, channels, eps=1e-5, dtype=np.float32):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros((4, channels), dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return qinstance_norm(x, self.gamma, self.beta, self.eps)


class RealInstanceNorm(Module):
    def __init__(self, channels, eps=1e-5, dtype=np.float32):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.eps = eps
        self.gamma = Parameter(np.ones(4 * channels, dtype=dtype))
        self.beta = Parameter(np.zeros((1, 4 * channels), dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ag.instance_norm(x, self.gamma, self.beta, self.eps, groups=1)


@dataclass(frozen=True)
class LayerSpec:
    """Shared construction settings threaded through every block."""

    kind: str = QUATERNION
    slope: float = 0.2
    eps: float = 1e-5
    kernel: int = 3
    dtype: type = np.float32

    def conv(self, cin, cout, rng, stride=1, bias=True) -> Module:
        if self.kind not in (QUATERNION, REAL):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        cls = QConv2d if self.kind == QUATERNION else RealConv2d
        return cls(cin, cout, k=self.kernel, stride=stride, bias=bias, rng=rng, dtype=self.dtype)

    def norm(self, channels) -> Module:
        cls = QInstanceNorm if self.kind == QUATERNION else RealInstanceNorm
        return cls(channels, eps=self.eps, dtype=self.dtype)


class ResidualBlock(Module):
    """``x + norm(conv(act(norm(conv(x)))))``, channel count preserved.

    The convolutions carry no bias: the following instance norm subtracts it again.  The last
    norm starts with ``gamma = 0`` so a fresh block is the identity.
    """

    def __init__(self, channels, spec: LayerSpec, rng):
        self.slope = spec.slope
        self.conv1 = spec.conv(channels, channels, rng, bias=False)
        self.norm1 = spec.norm(channels)
        self.conv2 = spec.conv(channels, channels, rng, bias=False)
        self.norm2 = spec.norm(channels)
        self.norm2.gamma.data[...] = 0

    def forward(self, x: Tensor) -> Tensor:
        y = leaky_relu_split(self.norm1(self.conv1(x)), self.slope)
        return x + self.norm2(self.conv2(y))


class Downsample(Module):
    """3×3 stride-2 convolution doubling the channel count and halving the resolution."""

    def __init__(self, channels, spec: LayerSpec, rng):
        self.conv = spec.conv(channels, 2 * channels, rng, stride=2)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ValueError(f"downsample needs even spatial size, got {x.shape[2:]}")
        return self.conv(x)


class Upsample(Module):
    """Nearest 2× enlargement followed by a 3×3 convolution halving the channel count."""

    def __init__(self, channels, spec: LayerSpec, rng):
        if channels % 2:
            raise ValueError(f"upsample needs an even channel count, got {channels}")
        self.conv = spec.conv(channels, channels // 2, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(nearest_upsample(x))


def conv_modules(module: Module) -> list[Module]:
    return [m for m in module.modules() if isinstance(m, (QConv2d, RealConv2d))]
