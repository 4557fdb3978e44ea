"""Two-stage QSAM-Net: U-shaped encoder/decoder stages bridged by QSAM and CSFF."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from qsamnet.autograd import Tensor
from qsamnet.layers import (
    QUATERNION,
    REAL,
    Downsample,
    LayerSpec,
    Module,
    QConv2d,
    QInstanceNorm,
    RealConv2d,
    RealInstanceNorm,
    ResidualBlock,
    Upsample,
    sigmoid_split,
)


@dataclass
class NetConfig:
    widths: tuple[int, ...] = (16, 32, 64, 128, 256)
    blocks: int = 2
    kernel: int = 3
    slope: float = 0.2
    eps: float = 1e-5
    kind: str = QUATERNION
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not self.widths:
            raise ValueError("at least one scale is required")
        for a, b in zip(self.widths, self.widths[1:]):
            if b != 2 * a:
                raise ValueError(f"consecutive widths must double, got {self.widths}")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.blocks < 0:
            raise ValueError("blocks must be non-negative")
        if self.kind not in (QUATERNION, REAL):
            raise ValueError(f"kind must be {QUATERNION!r} or {REAL!r}")

    @property
    def divisor(self) -> int:
        """Input height and width must be multiples of this."""
        return 2 ** (len(self.widths) - 1)

    def layer_spec(self, dtype=np.float32) -> LayerSpec:
        return LayerSpec(kind=self.kind, slope=self.slope, eps=self.eps, kernel=self.kernel, dtype=dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def twin(self) -> "NetConfig":
        return NetConfig(**{**self.to_dict(), "kind": REAL})


class Encoder(Module):
    """Residual blocks per scale, a downsample between scales; emits one feature per scale."""

    def __init__(self, widths, blocks, spec: LayerSpec, rng):
        self.widths = tuple(widths)
        self.stages = [Scale([ResidualBlock(w, spec, rng) for _ in range(blocks)]) for w in widths]
        self.down = [Downsample(w, spec, rng) for w in widths[:-1]]

    def forward(self, x: Tensor, csff: "CSFF | None" = None, enc1=None, dec1=None) -> list[Tensor]:
        divisor = 2 ** (len(self.widths) - 1)
        if x.shape[2] % divisor or x.shape[3] % divisor:
            raise ValueError(f"spatial size {x.shape[2:]} not divisible by {divisor}")
        pyramid = []
        for s, stage in enumerate(self.stages):
            if csff is not None:
                x = csff.inject(s, x, enc1, dec1)
            x = stage(x)
            pyramid.append(x)
            if s < len(self.down):
                x = self.down[s](x)
        return pyramid


class Decoder(Module):
    """Deepest scale upward: blocks, upsample, add the same-scale encoder skip."""

    def __init__(self, widths, blocks, spec: LayerSpec, rng):
        self.widths = tuple(widths)
        self.stages = [Scale([ResidualBlock(w, spec, rng) for _ in range(blocks)]) for w in widths]
        self.up = [Upsample(w, spec, rng) for w in widths[1:]]

    def forward(self, pyramid: list[Tensor]) -> tuple[Tensor, list[Tensor]]:
        if len(pyramid) != len(self.widths):
            raise ValueError(f"decoder expects {len(self.widths)} scales, got {len(pyramid)}")
        feats: list[Tensor | None] = [None] * len(pyramid)
        x = pyramid[-1]
        for s in range(len(pyramid) - 1, -1, -1):
            if s < len(pyramid) - 1:
                x = self.up[s](x)
                if x.shape != pyramid[s].shape:
                    raise ValueError(f"skip mismatch at scale {s}: {x.shape} vs {pyramid[s].shape}")
                x = x + pyramid[s]
            x = self.stages[s](x)
            feats[s] = x
        return x, feats


class Scale(Module):
    def __init__(self, blocks):
        self.blocks = list(blocks)

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class QSAM(Module):
    """Supervised attention between stages.

    ``conv1`` enriches the features, ``conv2`` maps them to a one-quaternion residual that is
    added to the input image, and ``conv3`` turns the restored image into a sigmoid gate.
    """

    def __init__(self, channels, spec: LayerSpec, rng):
        self.conv1 = spec.conv(channels, channels, rng)
        self.conv2 = spec.conv(channels, 1, rng)
        self.conv3 = spec.conv(1, channels, rng)
        self.conv2.zero_()  # the residual head starts silent, so X1 = I at initialisation

    def forward(self, feats: Tensor, image: Tensor) -> tuple[Tensor, Tensor]:
        if feats.shape[2:] != image.shape[2:]:
            raise ValueError(f"QSAM spatial mismatch: features {feats.shape[2:]} vs image {image.shape[2:]}")
        enriched = self.conv1(feats)
        restored = image + self.conv2(feats)
        gate = sigmoid_split(self.conv3(restored))
        return enriched * gate + feats, restored


class CSFF(Module):
    """Width-preserving 3×3 convolutions carrying stage-1 encoder/decoder features into stage 2."""

    def __init__(self, widths, spec: LayerSpec, rng):
        self.enc = [spec.conv(w, w, rng) for w in widths]
        self.dec = [spec.conv(w, w, rng) for w in widths]

    def inject(self, s: int, x: Tensor, enc1: list[Tensor], dec1: list[Tensor]) -> Tensor:
        if len(enc1) != len(self.enc) or len(dec1) != len(self.dec):
            raise ValueError(
                f"CSFF expects {len(self.enc)}-scale pyramids, got {len(enc1)} encoder / {len(dec1)} decoder"
            )
        return x + self.enc[s](enc1[s]) + self.dec[s](dec1[s])


def csff_inject(csff: CSFF, enc1: list[Tensor], dec1: list[Tensor], x: Tensor, s: int) -> Tensor:
    return csff.inject(s, x, enc1, dec1)


class QSAMNet(Module):
    """Two-stage deraining network mapping a rainy quaternion image to two restorations."""

    def __init__(self, config: NetConfig | None = None, dtype=np.float32):
        self.config = config = NetConfig() if config is None else config
        rng = np.random.default_rng(config.seed)
        spec = config.layer_spec(dtype)
        w0 = config.widths[0]
        self.head1 = spec.conv(1, w0, rng)
        self.enc1 = Encoder(config.widths, config.blocks, spec, rng)
        self.dec1 = Decoder(config.widths, config.blocks, spec, rng)
        self.qsam = QSAM(w0, spec, rng)
        self.head2 = spec.conv(1, w0, rng)
        self.csff = CSFF(config.widths, spec, rng)
        self.enc2 = Encoder(config.widths, config.blocks, spec, rng)
        self.dec2 = Decoder(config.widths, config.blocks, spec, rng)
        self.tail2 = spec.conv(w0, 1, rng).zero_()

    def forward(self, image) -> tuple[Tensor, Tensor]:
        image = image if isinstance(image, Tensor) else Tensor(image)
        d = self.config.divisor
        if image.ndim != 4 or image.shape[1] != 4:
            raise ValueError(f"expected a (B, 4, H, W) quaternion image batch, got {image.shape}")
        if image.shape[2] % d or image.shape[3] % d:
            raise ValueError(f"input size {image.shape[2:]} must be divisible by {d}")
        enc1 = self.enc1(self.head1(image))
        feats1, dec1 = self.dec1(enc1)
        attended, restored1 = self.qsam(feats1, image)
        enc2 = self.enc2(self.head2(image) + attended, csff=self.csff, enc1=enc1, dec1=dec1)
        feats2, _ = self.dec2(enc2)
        restored2 = image + self.tail2(feats2)
        return restored1, restored2


@dataclass
class ParamCount:
    """Exact parameter accounting for a network and its real-valued twin."""

    total: int
    conv_weights: int
    conv_biases: int
    norm: int
    twin_total: int
    twin_conv_weights: int
    twin_conv_biases: int
    twin_norm: int
    per_conv_ratios: list[float] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return self.twin_total / self.total if self.total else float("nan")

    @property
    def conv_ratio(self) -> float:
        return self.twin_conv_weights / self.conv_weights if self.conv_weights else float("nan")


def count_params(net: Module) -> ParamCount:
    """Enumerate every weight bank, bias and norm parameter of ``net``.

    Twin figures follow the replacement rule quaternion conv ``Cin -> Cout`` ⇒ real conv
    ``4Cin -> 4Cout`` and quaternion instance norm over ``C`` ⇒ real instance norm over ``4C``.
    """
    conv_w = conv_b = norm = 0
    twin_w = twin_b = twin_norm = 0
    ratios = []
    for m in net.modules():
        if isinstance(m, (QConv2d, RealConv2d)):
            banks = (m.W0, m.W1, m.W2, m.W3) if isinstance(m, QConv2d) else (m.weight,)
            w = sum(b.data.size for b in banks)
            conv_w += w
            twin_w += m.twin_weight_count()
            ratios.append(m.twin_weight_count() / w)
            if m.bias is not None:
                conv_b += m.bias.data.size
                twin_b += 4 * m.cout
        elif isinstance(m, QInstanceNorm):
            c = m.gamma.data.size
            norm += m.gamma.data.size + m.beta.data.size
            twin_norm += 8 * c
        elif isinstance(m, RealInstanceNorm):
            norm += m.gamma.data.size + m.beta.data.size
            twin_norm += m.gamma.data.size + m.beta.data.size
    total = conv_w + conv_b + norm
    assert total == net.num_parameters(), "parameter enumeration missed a tensor"
    return ParamCount(total, conv_w, conv_b, norm, twin_w + twin_b + twin_norm, twin_w, twin_b, twin_norm, ratios)
