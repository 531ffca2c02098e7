"""ABC segmentation network.

Encoder: a convolution module at full resolution, then three CLFT blocks
(each after a 2x max-pool) doubling the channels C -> 2C -> 4C -> 8C.
Transition: UCDC at 1/16 resolution. Decoder: upsample, concatenate the
matching encoder output, then UCDC / convolution modules back down to C
channels, and a pointwise head producing one logit map.

Every feature convolution is followed by a per-sample group normalisation
(``normalization="group"``). Without it the plain ReLU stack is unstable
under Adam: sign-like updates on wide layers compound through ~40 layers
and the logits run off to large negative values within a few dozen steps.
Heads start from a small-target prior so the first updates are not spent
learning that almost every pixel is background.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .ops import (
    batched_matmul,
    conv2d,
    fully_connected,
    group_norm,
    maxpool2x2,
    pointwise_conv,
    scale,
    softmax,
    upsample_bilinear2x,
)
from .tensor import Tensor, add, concat, relu, reshape

PRESETS = {"S": 16, "B": 32, "L": 64}

ENCODER_FIRST = ("conv_module", "clft")
DECODER_FIRST = ("ucdc", "conv_module")
NORMALIZATIONS = ("group", "none")


@dataclass
class ABCConfig:
    input_dim: int = 64
    input_resolution: tuple[int, int] = (256, 256)
    encoder_first_layer: str = "conv_module"
    decoder_first_layer: str = "ucdc"
    dilation_rates: tuple[int, int, int] = (2, 4, 2)
    deep_supervision: bool = True
    normalization: str = "group"
    # initial foreground probability of every head; None leaves head biases at zero
    head_prior: Optional[float] = 0.01

    def __post_init__(self):
        self.input_resolution = tuple(int(v) for v in self.input_resolution)
        self.dilation_rates = tuple(int(v) for v in self.dilation_rates)
        h, w = self.input_resolution
        if h <= 0 or w <= 0 or h % 16 or w % 16:
            raise ValueError(f"input resolution must be positive multiples of 16, got {h}x{w}")
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.encoder_first_layer not in ENCODER_FIRST:
            raise ValueError(f"encoder_first_layer must be one of {ENCODER_FIRST}")
        if self.decoder_first_layer not in DECODER_FIRST:
            raise ValueError(f"decoder_first_layer must be one of {DECODER_FIRST}")
        if len(self.dilation_rates) != 3 or min(self.dilation_rates) < 1:
            raise ValueError(f"dilation_rates must be three positive ints, got {self.dilation_rates}")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
        if self.head_prior is not None and not 0.0 < self.head_prior < 1.0:
            raise ValueError(f"head_prior must be in (0, 1), got {self.head_prior}")
        if self.head_prior is not None:
            # held at float32 precision so the checkpointed config round-trips exactly
            self.head_prior = float(np.float32(self.head_prior))

    @classmethod
    def preset(cls, name: str, **kw) -> "ABCConfig":
        """ABC-S / ABC-B / ABC-L by input dimension 16 / 32 / 64."""
        return cls(input_dim=PRESETS[name.upper()], **kw)


class Module:
    """Minimal parameter container; parameters and children are found by attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _param(values) -> Tensor:
    return Tensor(values, requires_grad=True)


class Conv(Module):
    """k x k convolution with "same" zero padding (padding = dilation * (k - 1) / 2).

    With ``norm`` the output is group-normalised (one group per sample).
    """

    def __init__(self, cin: int, cout: int, k: int = 3, dilation: int = 1,
                 rng: Optional[np.random.Generator] = None, norm: bool = False):
        rng = rng or np.random.default_rng(0)
        fan_in = cin * k * k
        bound = np.sqrt(6.0 / fan_in)
        self.weight = _param(rng.uniform(-bound, bound, (cout, cin, k, k)))
        self.bias = _param(np.zeros(cout))
        self._k, self._dilation, self._norm = k, dilation, norm

    @property
    def dilation(self) -> int:
        return self._dilation

    def __call__(self, x: Tensor) -> Tensor:
        if self._k == 1:
            y = pointwise_conv(x, self.weight, self.bias)
        else:
            pad = self._dilation * (self._k - 1) // 2
            y = conv2d(x, self.weight, self.bias, padding=pad, dilation=self._dilation)
        return group_norm(y) if self._norm else y


class Linear(Module):
    def __init__(self, m: int, k: int, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        bound = np.sqrt(6.0 / m)
        self.weight = _param(rng.uniform(-bound, bound, (k, m)))
        self.bias = _param(np.zeros(k))

    def __call__(self, x: Tensor) -> Tensor:
        return fully_connected(x, self.weight, self.bias)


class ConvModule(Module):
    """Two 3x3 convolutions, ReLU after each; channels change at the first."""

    def __init__(self, cin: int, cout: int, rng=None, norm: bool = True):
        self.conv1 = Conv(cin, cout, 3, rng=rng, norm=norm)
        self.conv2 = Conv(cout, cout, 3, rng=rng, norm=norm)

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.conv2(relu(self.conv1(x))))


class BAM(Module):
    """Bilinear attention: per-channel H x H row-attention from two 1-channel projections.

    Each projection is a pointwise conv to one channel, flattened to H*W and
    mapped to H by a fully connected layer. Their outer product is lifted to C
    channels by a pointwise conv and softmax-normalised over the last axis.
    The FC widths bind the module to one feature-map resolution.
    """

    def __init__(self, channels: int, h: int, w: int, rng=None):
        self.pw_q = Conv(channels, 1, 1, rng=rng)
        self.pw_k = Conv(channels, 1, 1, rng=rng)
        self.fc_q = Linear(h * w, h, rng=rng)
        self.fc_k = Linear(h * w, h, rng=rng)
        self.pw_attn = Conv(1, channels, 1, rng=rng)
        self._h, self._w = h, w

    def __call__(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if (h, w) != (self._h, self._w):
            raise ValueError(f"BAM built for {self._h}x{self._w} feature maps, got {h}x{w}")
        q = self.fc_q(reshape(self.pw_q(x), (n, h * w)))
        k = self.fc_k(reshape(self.pw_k(x), (n, h * w)))
        raw = batched_matmul(reshape(q, (n, h, 1)), reshape(k, (n, 1, h)))
        lifted = self.pw_attn(reshape(raw, (n, 1, h, h)))
        return softmax(lifted, axis=-1)


class CLFT(Module):
    """Convolution linear fusion transformer block.

    v = ConvBranch(I) + DilatedBranch(I)
    O_hat = I + v + alpha * (attention @ v)
    O = Conv3x3(O_hat) + PW(O_hat)
    """

    def __init__(self, cin: int, cout: int, h: int, w: int,
                 dilation_rates=(2, 4, 2), rng=None, norm: bool = True):
        self.bam = BAM(cin, h, w, rng=rng)
        self.conv_branch = [Conv(cin, cin, 3, rng=rng, norm=norm) for _ in range(3)]
        self.dconv_branch = [Conv(cin, cin, 3, dilation=d, rng=rng, norm=norm) for d in dilation_rates]
        self.alpha = _param(np.zeros(1))
        self.ff_conv = Conv(cin, cout, 3, rng=rng, norm=norm)
        self.ff_pw = Conv(cin, cout, 1, rng=rng, norm=norm)

    @staticmethod
    def _stack(layers, x: Tensor) -> Tensor:
        x = layers[0](x)
        for layer in layers[1:]:
            x = layer(relu(x))
        return x

    def value(self, x: Tensor) -> Tensor:
        return add(self._stack(self.conv_branch, x), self._stack(self.dconv_branch, x))

    def attention(self, x: Tensor) -> Tensor:
        return self.bam(x)

    def fuse(self, x: Tensor) -> Tensor:
        v = self.value(x)
        o_att = batched_matmul(self.attention(x), v)
        return add(add(x, v), scale(o_att, self.alpha))

    def __call__(self, x: Tensor) -> Tensor:
        o_hat = self.fuse(x)
        return add(self.ff_conv(o_hat), self.ff_pw(o_hat))


class UCDC(Module):
    """U-shaped conv / dilated-conv block with additive skips.

    x1 = conv(I), x2 = dconv2(x1), x3 = dconv4(x2), x4 = dconv2(x3) + x2,
    out = conv(x4) + x1; ReLU follows every convolution.
    """

    def __init__(self, cin: int, cout: int, rng=None, norm: bool = True):
        self.conv1 = Conv(cin, cout, 3, rng=rng, norm=norm)
        self.dconv1 = Conv(cout, cout, 3, dilation=2, rng=rng, norm=norm)
        self.dconv2 = Conv(cout, cout, 3, dilation=4, rng=rng, norm=norm)
        self.dconv3 = Conv(cout, cout, 3, dilation=2, rng=rng, norm=norm)
        self.conv2 = Conv(cout, cout, 3, rng=rng, norm=norm)

    def __call__(self, x: Tensor) -> Tensor:
        x1 = relu(self.conv1(x))
        x2 = relu(self.dconv1(x1))
        x3 = relu(self.dconv2(x2))
        x4 = add(relu(self.dconv3(x3)), x2)
        return add(relu(self.conv2(x4)), x1)


def _upsample(x: Tensor, times: int) -> Tensor:
    for _ in range(times):
        x = upsample_bilinear2x(x)
    return x


class ABC(Module):
    """Full encoder-decoder. ``__call__`` returns (main_logits, aux_logits)."""

    def __init__(self, config: ABCConfig, seed: int = 0):
        self._config = config
        rng = np.random.default_rng(seed)
        c = config.input_dim
        h, w = config.input_resolution
        rates = config.dilation_rates
        norm = config.normalization == "group"
        if config.encoder_first_layer == "clft":
            self.enc0 = CLFT(1, c, h, w, rates, rng=rng, norm=norm)
        else:
            self.enc0 = ConvModule(1, c, rng=rng, norm=norm)
        self.enc1 = CLFT(c, 2 * c, h // 2, w // 2, rates, rng=rng, norm=norm)
        self.enc2 = CLFT(2 * c, 4 * c, h // 4, w // 4, rates, rng=rng, norm=norm)
        self.enc3 = CLFT(4 * c, 8 * c, h // 8, w // 8, rates, rng=rng, norm=norm)
        self.transition = UCDC(8 * c, 8 * c, rng=rng, norm=norm)
        if config.decoder_first_layer == "ucdc":
            self.dec3 = UCDC(16 * c, 4 * c, rng=rng, norm=norm)
        else:
            self.dec3 = ConvModule(16 * c, 4 * c, rng=rng, norm=norm)
        self.dec2 = ConvModule(8 * c, 2 * c, rng=rng, norm=norm)
        self.dec1 = ConvModule(4 * c, c, rng=rng, norm=norm)
        self.dec0 = ConvModule(2 * c, c, rng=rng, norm=norm)
        self.head = Conv(c, 1, 1, rng=rng)
        heads = [self.head]
        if config.deep_supervision:
            self.aux_heads = [Conv(4 * c, 1, 1, rng=rng), Conv(2 * c, 1, 1, rng=rng),
                              Conv(c, 1, 1, rng=rng)]
            heads += self.aux_heads
        if config.head_prior is not None:
            prior = config.head_prior
            for head in heads:
                head.bias.data[...] = np.log(prior / (1.0 - prior))

    @property
    def config(self) -> ABCConfig:
        return self._config

    def clft_blocks(self) -> list[CLFT]:
        return [m for m in (self.enc0, self.enc1, self.enc2, self.enc3) if isinstance(m, CLFT)]

    def __call__(self, image: Tensor) -> tuple[Tensor, list[Tensor]]:
        if image.ndim != 4 or image.shape[1] != 1:
            raise ValueError(f"expected (N, 1, H, W) input, got {image.shape}")
        if tuple(image.shape[2:]) != self._config.input_resolution:
            raise ValueError(f"model built for {self._config.input_resolution}, got {image.shape[2:]}")
        e0 = self.enc0(image)
        e1 = self.enc1(maxpool2x2(e0))
        e2 = self.enc2(maxpool2x2(e1))
        e3 = self.enc3(maxpool2x2(e2))
        t = self.transition(maxpool2x2(e3))
        d3 = self.dec3(concat([upsample_bilinear2x(t), e3]))
        d2 = self.dec2(concat([upsample_bilinear2x(d3), e2]))
        d1 = self.dec1(concat([upsample_bilinear2x(d2), e1]))
        d0 = self.dec0(concat([upsample_bilinear2x(d1), e0]))
        logits = self.head(d0)
        aux: list[Tensor] = []
        if self._config.deep_supervision:
            for head, feat, times in zip(self.aux_heads, (d3, d2, d1), (3, 2, 1)):
                aux.append(_upsample(head(feat), times))
        return logits, aux


def _conv(cin: int, cout: int, k: int, h: int, w: int) -> int:
    return 2 * k * k * cin * cout * h * w


def _conv_module(cin: int, cout: int, h: int, w: int) -> int:
    return _conv(cin, cout, 3, h, w) + _conv(cout, cout, 3, h, w)


def _ucdc(cin: int, cout: int, h: int, w: int) -> int:
    return _conv(cin, cout, 3, h, w) + 4 * _conv(cout, cout, 3, h, w)


def _clft(cin: int, cout: int, h: int, w: int) -> int:
    bam = (2 * _conv(cin, 1, 1, h, w)      # q / k projections
           + 2 * 2 * h * (h * w)             # two FC layers, H*W -> H
           + 2 * h * h                       # outer product q k^T
           + _conv(1, cin, 1, h, h))         # lift to C channels
    value = 6 * _conv(cin, cin, 3, h, w)
    attend = 2 * cin * h * h * w
    feedforward = _conv(cin, cout, 3, h, w) + _conv(cin, cout, 1, h, w)
    return bam + value + attend + feedforward


def count_flops(config: ABCConfig) -> int:
    """FLOPs (2 per multiply-accumulate) of one forward pass on a single image.

    Counts convolutions, fully connected layers and attention matrix products;
    elementwise ops, pooling, resampling and softmax are free.
    """
    c = config.input_dim
    h, w = config.input_resolution
    if config.encoder_first_layer == "clft":
        total = _clft(1, c, h, w)
    else:
        total = _conv_module(1, c, h, w)
    total += _clft(c, 2 * c, h // 2, w // 2)
    total += _clft(2 * c, 4 * c, h // 4, w // 4)
    total += _clft(4 * c, 8 * c, h // 8, w // 8)
    total += _ucdc(8 * c, 8 * c, h // 16, w // 16)
    if config.decoder_first_layer == "ucdc":
        total += _ucdc(16 * c, 4 * c, h // 8, w // 8)
    else:
        total += _conv_module(16 * c, 4 * c, h // 8, w // 8)
    total += _conv_module(8 * c, 2 * c, h // 4, w // 4)
    total += _conv_module(4 * c, c, h // 2, w // 2)
    total += _conv_module(2 * c, c, h, w)
    total += _conv(c, 1, 1, h, w)
    if config.deep_supervision:
        total += (_conv(4 * c, 1, 1, h // 8, w // 8) + _conv(2 * c, 1, 1, h // 4, w // 4)
                  + _conv(c, 1, 1, h // 2, w // 2))
    return total
