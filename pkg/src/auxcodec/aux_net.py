"""Auxiliary coarse network.

Encodes a coarse description of the image (hyper-latent ``z_aux`` plus
latent ``y_aux`` coded segment by segment) and decodes it into predicted
features at 1/1, 1/2, 1/4 and 1/16 scale for the main network.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .config import CodecConfig
from .entropy import FactorizedModel, GaussianConditional, split_channels
from .layers import (
    AdaptiveActivation,
    AttentionBlock,
    Conv2d,
    ConvTranspose2d,
    Module,
)


class SegmentOrderError(RuntimeError):
    """A segment's parameters were requested before its predecessors existed."""


@dataclass
class AuxLatents:
    y_aux: Tensor
    z_aux: Tensor


@dataclass
class MultiScaleFeatures:
    f1: Tensor
    f2: Tensor
    f4: Tensor
    f16: Tensor

    def __iter__(self):
        return iter((self.f1, self.f2, self.f4, self.f16))


def _down(cin, cout, rng):
    return Conv2d(cin, cout, 4, stride=2, padding=1, rng=rng)


def _up(cin, cout, rng):
    return ConvTranspose2d(cin, cout, 4, stride=2, padding=1, rng=rng)


class AuxEncoder(Module):
    """Four stride-2 4x4 convs with adaptive activations; attention at 1/4."""

    def __init__(self, cfg: CodecConfig, rng):
        c1, c2, c3 = cfg.aux_channels
        self.conv1 = _down(3, c1, rng)
        self.act1 = AdaptiveActivation(c1)
        self.conv2 = _down(c1, c2, rng)
        self.act2 = AdaptiveActivation(c2)
        self.afp = AttentionBlock(c2, cfg.attn_pool, rng)
        self.conv3 = _down(c2, c3, rng)
        self.act3 = AdaptiveActivation(c3)
        self.conv4 = _down(c3, cfg.m_aux, rng)

    def forward(self, x):
        h = self.act1(self.conv1(x))
        h = self.afp(self.act2(self.conv2(h)))
        h = self.act3(self.conv3(h))
        return self.conv4(h)


class HyperEncoder(Module):
    def __init__(self, cin, ch, rng):
        self.conv1 = Conv2d(cin, ch, 3, rng=rng)
        self.act1 = AdaptiveActivation(ch)
        self.conv2 = _down(ch, ch, rng)
        self.act2 = AdaptiveActivation(ch)
        self.conv3 = _down(ch, ch, rng)

    def forward(self, y):
        h = self.act1(self.conv1(y))
        return self.conv3(self.act2(self.conv2(h)))


class HyperDecoder(Module):
    def __init__(self, ch, cout, rng):
        self.up1 = _up(ch, ch, rng)
        self.act1 = AdaptiveActivation(ch)
        self.up2 = _up(ch, ch, rng)
        self.act2 = AdaptiveActivation(ch)
        self.conv = Conv2d(ch, cout, 3, rng=rng)

    def forward(self, z_hat):
        h = self.act1(self.up1(z_hat))
        return self.conv(self.act2(self.up2(h)))


class _SegmentHead(Module):
    def __init__(self, cin, hidden, cout, rng):
        self.conv1 = Conv2d(cin, hidden, 3, rng=rng)
        self.act = AdaptiveActivation(hidden)
        self.conv2 = Conv2d(hidden, 2 * cout, 3, rng=rng)
        self.conv2.weight.data *= 0.1
        # softplus(1.5) ~ 1.7: start with moderately wide scales
        self.conv2.bias.data[cout:] = 1.5
        self.cout = cout

    def forward(self, h):
        out = self.conv2(self.act(self.conv1(h)))
        return out[:, : self.cout], out[:, self.cout :]


class ParameterEstimator(Module):
    """Per-segment (mean, scale) prediction from a conditioning tensor and
    the already reconstructed earlier segments.

    Segment ``i`` sees ``concat(cond, y_hat_0, ..., y_hat_{i-1})`` and
    nothing else, which is what lets the decoder rebuild the same
    parameters one segment at a time.
    """

    def __init__(self, segments: Sequence[tuple[int, int]], cond_channels: int,
                 hidden: int, sigma_min: float, rng):
        self.segments = list(segments)
        self.cond_channels = cond_channels
        self.gaussian = GaussianConditional(sigma_min)
        self.heads = []
        seen = 0
        for a, b in self.segments:
            self.heads.append(_SegmentHead(cond_channels + seen, hidden, b - a, rng))
            seen += b - a

    def __len__(self):
        return len(self.segments)

    def forward(self, i: int, y_hat_prev: Sequence[Tensor], cond: Tensor):
        if not 0 <= i < len(self.segments):
            raise SegmentOrderError(f"segment {i} outside 0..{len(self.segments) - 1}")
        if len(y_hat_prev) != i:
            raise SegmentOrderError(
                f"segment {i} needs exactly {i} reconstructed segments, got {len(y_hat_prev)}"
            )
        if cond.shape[1] != self.cond_channels:
            raise ShapeError(f"conditioning has {cond.shape[1]} channels, expected "
                             f"{self.cond_channels}")
        for j, prev in enumerate(y_hat_prev):
            a, b = self.segments[j]
            if prev.shape[1] != b - a or prev.shape[2:] != cond.shape[2:]:
                raise ShapeError(f"segment {j} has shape {prev.shape}")
        h = ag.concat([cond, *y_hat_prev], axis=1) if i else cond
        mu, raw = self.heads[i](h)
        return mu, self.gaussian.scale(raw)


class AuxDecoder(Module):
    """Mirror of :class:`AuxEncoder` that taps a feature at every scale."""

    def __init__(self, cfg: CodecConfig, rng):
        c1f, c2f, c4f, c16f = cfg.feat_channels
        _, _, c3 = cfg.aux_channels
        self.to_f16 = Conv2d(cfg.m_aux, c16f, 3, rng=rng)
        self.act16 = AdaptiveActivation(c16f)
        self.up8 = _up(c16f, c3, rng)
        self.act8 = AdaptiveActivation(c3)
        self.up4 = _up(c3, c4f, rng)
        self.act4 = AdaptiveActivation(c4f)
        self.afp = AttentionBlock(c4f, cfg.attn_pool, rng)
        self.up2 = _up(c4f, c2f, rng)
        self.act2 = AdaptiveActivation(c2f)
        self.up1 = _up(c2f, c1f, rng)
        self.act1 = AdaptiveActivation(c1f)

    def forward(self, y_hat_aux) -> MultiScaleFeatures:
        f16 = self.to_f16(y_hat_aux)
        h = self.act8(self.up8(self.act16(f16)))
        f4 = self.afp(self.act4(self.up4(h)))
        f2 = self.act2(self.up2(f4))
        f1 = self.act1(self.up1(f2))
        return MultiScaleFeatures(f1, f2, f4, f16)


class AuxCoarseNet(Module):
    def __init__(self, cfg: CodecConfig, rng=None):
        rng = rng or np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.encoder = AuxEncoder(cfg, rng)
        self.hyper_encoder = HyperEncoder(cfg.m_aux, cfg.aux_hyper, rng)
        self.hyper_decoder = HyperDecoder(cfg.aux_hyper, cfg.aux_hyper, rng)
        self.prior = FactorizedModel(cfg.aux_hyper, rng=rng)
        self.estimator = ParameterEstimator(
            split_channels(cfg.m_aux, cfg.n_aux_segments),
            cfg.aux_hyper, cfg.pe_hidden, cfg.sigma_min, rng,
        )
        self.decoder = AuxDecoder(cfg, rng)

    @property
    def segments(self):
        return self.estimator.segments

    def encode(self, x) -> AuxLatents:
        """x: [B, 3, H, W] with H, W multiples of 64."""
        _check_padded(x, self.cfg.pad_multiple)
        y = self.encoder(x)
        return AuxLatents(y, self.hyper_encoder(y))

    def pe_segment(self, i, y_hat_prev, z_apm):
        return self.estimator(i, y_hat_prev, z_apm)

    def decode(self, y_hat_aux) -> MultiScaleFeatures:
        return self.decoder(y_hat_aux)


def _check_padded(x, multiple: int):
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected [B, 3, H, W] image, got {x.shape}")
    H, W = x.shape[2:]
    if H % multiple or W % multiple or H == 0 or W == 0:
        raise ShapeError(f"image {H}x{W} is not padded to a multiple of {multiple}")
