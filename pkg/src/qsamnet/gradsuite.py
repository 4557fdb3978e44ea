"""Finite-difference checks for every layer operation and a miniature full network."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from qsamnet.autograd import Tensor, grad_check, probe_away_from_kinks
from qsamnet.layers import (
    Downsample,
    LayerSpec,
    Module,
    QConv2d,
    QInstanceNorm,
    ResidualBlock,
    Upsample,
    leaky_relu_split,
    sigmoid_split,
)
from qsamnet.model import CSFF, QSAM, Decoder, Encoder, NetConfig, QSAMNet

H = 1e-5


@dataclass
class CaseResult:
    name: str
    errors: list[float]
    draws: int

    @property
    def max_error(self) -> float:
        return max(self.errors)

    def passed(self, tol: float) -> bool:
        return self.max_error < tol


def _leaves(module: Module | None, inputs: dict[str, Tensor]) -> dict[str, Tensor]:
    leaves = dict(module.named_parameters()) if module is not None else {}
    leaves.update(inputs)
    return leaves


def _randomise(module: Module | None, inputs: dict[str, Tensor], rng: np.random.Generator) -> None:
    for t in inputs.values():
        t.data = rng.normal(size=t.shape)
    if module is not None:
        for name, p in module.named_parameters():
            if name.endswith("gamma"):
                p.data = rng.uniform(0.5, 1.5, size=p.shape)
            elif p.ndim == 4:
                fan_in = p.data.size // p.shape[0]
                p.data = rng.normal(scale=1.0 / np.sqrt(fan_in), size=p.shape)
            else:
                p.data = rng.normal(scale=0.5, size=p.shape)


def _case(
    name: str,
    module: Module | None,
    inputs: dict[str, tuple[int, ...]],
    forward: Callable[..., Tensor],
    probes: int,
    seed: int,
    coords: int,
) -> CaseResult:
    rng = np.random.default_rng(seed)
    tensors = {k: Tensor(np.zeros(shape)) for k, shape in inputs.items()}
    if module is not None:
        module.astype(np.float64)
    fn = lambda: forward(**tensors)  # noqa: E731
    errors, draws = [], 0
    for _ in range(probes):
        draws += probe_away_from_kinks(lambda r: _randomise(module, tensors, r), fn, rng, h=H)
        report = grad_check(fn, _leaves(module, tensors), h=H, coords_per_input=coords, rng=rng)
        errors.append(np.inf if report.nonfinite else report.max_rel_error)
    return CaseResult(name, errors, draws)


def run_suite(seed: int = 0, probes: int = 3, include_network: bool = True) -> list[CaseResult]:
    spec = LayerSpec(dtype=np.float64)
    mk = lambda: np.random.default_rng(seed)  # noqa: E731
    results = []

    conv = QConv2d(3, 2, k=3, rng=mk(), dtype=np.float64)
    results.append(_case("qconv2d 3x3", conv, {"x": (2, 12, 6, 6)}, lambda x: conv(x), probes, seed, 8))
    conv_s2 = QConv2d(2, 3, k=3, stride=2, rng=mk(), dtype=np.float64)
    results.append(_case("qconv2d stride 2", conv_s2, {"x": (1, 8, 6, 6)}, lambda x: conv_s2(x), probes, seed, 8))
    results.append(
        _case("leaky_relu_split", None, {"x": (2, 8, 4, 4)}, lambda x: leaky_relu_split(x, 0.2), probes, seed, 16)
    )
    results.append(_case("sigmoid_split", None, {"x": (2, 8, 4, 4)}, lambda x: sigmoid_split(x), probes, seed, 16))
    norm = QInstanceNorm(4, dtype=np.float64)
    results.append(_case("qinstance_norm", norm, {"x": (2, 16, 8, 8)}, lambda x: norm(x), probes, seed, 12))
    down = Downsample(2, spec, mk())
    results.append(_case("downsample", down, {"x": (1, 8, 8, 8)}, lambda x: down(x), probes, seed, 8))
    up = Upsample(4, spec, mk())
    results.append(_case("upsample", up, {"x": (1, 16, 4, 4)}, lambda x: up(x), probes, seed, 8))
    block = ResidualBlock(8, spec, mk())
    results.append(_case("residual_block", block, {"x": (1, 32, 8, 8)}, lambda x: block(x), probes, seed, 6))
    qsam = QSAM(4, spec, mk())
    results.append(
        _case(
            "qsam",
            qsam,
            {"f": (1, 16, 6, 6), "img": (1, 4, 6, 6)},
            lambda f, img: _pair_sum(qsam(f, img)),
            probes,
            seed,
            6,
        )
    )
    csff = CSFF((4, 8), spec, mk())
    results.append(
        _case(
            "csff_inject",
            csff,
            {"x": (1, 32, 4, 4), "e0": (1, 16, 8, 8), "e1": (1, 32, 4, 4), "d0": (1, 16, 8, 8), "d1": (1, 32, 4, 4)},
            lambda x, e0, e1, d0, d1: csff.inject(1, x, [e0, e1], [d0, d1]),
            probes,
            seed,
            6,
        )
    )
    enc = Encoder((4,), 1, spec, mk())
    results.append(_case("encoder (1 scale)", enc, {"x": (1, 16, 8, 8)}, lambda x: enc(x)[0], probes, seed, 4))
    enc2 = Encoder((16, 32), 1, spec, mk())
    dec2 = Decoder((16, 32), 1, spec, mk())
    pair = _Pair(enc2, dec2)
    results.append(
        _case("encoder+decoder", pair, {"x": (1, 64, 16, 16)}, lambda x: dec2(enc2(x))[0], probes, seed, 3)
    )
    if include_network:
        net = QSAMNet(NetConfig(widths=(4, 8), blocks=1, seed=seed), dtype=np.float64)
        results.append(
            _case("qsamnet (2 scales, width 4)", net, {"img": (1, 4, 8, 8)}, lambda img: _pair_sum(net(img)), probes, seed, 2)
        )
    return results


class _Pair(Module):
    def __init__(self, a, b):
        self.a, self.b = a, b


def _pair_sum(pair):
    """Contract both outputs with fixed random weights into one scalar."""
    a, b = pair
    ra = np.random.default_rng(7).normal(size=a.shape)
    rb = np.random.default_rng(8).normal(size=b.shape)
    return (a * ra).sum() + (b * rb).sum()
