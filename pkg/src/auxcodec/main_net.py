"""Main network: codes the residual between the image features and the
auxiliary network's multi-scale prediction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .aux_net import (
    HyperDecoder,
    HyperEncoder,
    MultiScaleFeatures,
    ParameterEstimator,
    _check_padded,
    _down,
    _up,
)
from .config import CodecConfig
from .entropy import FactorizedModel, split_channels
from .layers import AdaptiveActivation, AttentionBlock, Conv2d, Module, ResidualBlock


@dataclass
class MainLatents:
    y: Tensor
    z: Tensor


@dataclass
class ContextJunctionState:
    refined_aux: Tensor
    combined: Tensor


class ContextJunction(Module):
    """Fuses a main-network feature with the predicted auxiliary feature.

    Refiner: ``combined = conv(main | aux)`` then cross-attention with
    ``combined`` as queries over ``aux`` tokens gives the refined auxiliary
    feature. Junction: ``conv(main | refined)`` followed by a residual
    self-attention branch. ``mode`` names the role: "subtract" on the
    encoder side, "combine" on the decoder side; it only sets what
    :meth:`exact_init` initializes the junction to.
    """

    def __init__(self, main_ch: int, aux_ch: int, mode: str = "subtract",
                 pool: int = 2, rng=None):
        if mode not in ("subtract", "combine"):
            raise ValueError(f"unknown context junction mode {mode!r}")
        if aux_ch > main_ch:
            raise ValueError("auxiliary feature wider than main feature")
        self.mode = mode
        self.main_ch = main_ch
        self.aux_ch = aux_ch
        self.refine_conv = Conv2d(main_ch + aux_ch, aux_ch, 3, rng=rng)
        self.refine_attn = AttentionBlock(aux_ch, pool, rng)
        self.merge_conv = Conv2d(main_ch + aux_ch, main_ch, 3, rng=rng)
        self.merge_attn = AttentionBlock(main_ch, pool, rng)

    def refine(self, main_feat, aux_feat) -> ContextJunctionState:
        combined = self.refine_conv(ag.concat([main_feat, aux_feat], axis=1))
        refined = self.refine_attn(combined, aux_feat)
        return ContextJunctionState(refined, combined)

    def forward(self, main_feat, aux_feat, return_state: bool = False):
        if main_feat.shape[2:] != aux_feat.shape[2:]:
            raise ShapeError(
                f"scale mismatch: main {main_feat.shape} vs auxiliary {aux_feat.shape}"
            )
        if main_feat.shape[1] != self.main_ch or aux_feat.shape[1] != self.aux_ch:
            raise ShapeError("channel count does not match the junction")
        state = self.refine(main_feat, aux_feat)
        local = self.merge_conv(ag.concat([main_feat, state.refined_aux], axis=1))
        out = self.merge_attn(local)
        return (out, state) if return_state else out

    def exact_init(self):
        """Literal subtraction/addition: out[:aux] = main[:aux] -/+ aux.

        The refiner passes ``aux`` through unchanged and both attention
        output projections are zeroed.
        """
        m, a = self.main_ch, self.aux_ch
        sign = -1.0 if self.mode == "subtract" else 1.0
        for conv in (self.refine_conv, self.merge_conv):
            conv.weight.data[...] = 0.0
            conv.bias.data[...] = 0.0
        eye = np.arange(a)
        self.refine_conv.weight.data[eye, m + eye, 1, 1] = 1.0
        self.merge_conv.weight.data[np.arange(m), np.arange(m), 1, 1] = 1.0
        self.merge_conv.weight.data[eye, m + eye, 1, 1] = sign
        self.refine_attn.wo.data[...] = 0.0
        self.merge_attn.wo.data[...] = 0.0


def context_junction(main_feat, aux_feat, junction: ContextJunction):
    return junction(main_feat, aux_feat)


class MainEncoder(Module):
    def __init__(self, cfg: CodecConfig, rng):
        c1f, c2f, c4f, _ = cfg.feat_channels
        e1, e2, e3 = cfg.main_channels
        s = cfg.main_stem
        self.stem = Conv2d(3, s, 3, rng=rng)
        self.act1 = AdaptiveActivation(s + c1f)
        self.down2 = _down(s + c1f, e1, rng)
        self.act2 = AdaptiveActivation(e1 + c2f)
        self.down4 = _down(e1 + c2f, e2, rng)
        self.junction = ContextJunction(e2, c4f, "subtract", cfg.attn_pool, rng)
        self.down8 = _down(e2, e3, rng)
        self.act8 = AdaptiveActivation(e3)
        self.down16 = _down(e3, cfg.m_main, rng)

    def features_at_quarter(self, x, feats: MultiScaleFeatures):
        """Main-path feature entering the junction at 1/4 scale."""
        h = self.act1(_concat_checked(self.stem(x), feats.f1))
        h = self.act2(_concat_checked(self.down2(h), feats.f2))
        return self.down4(h)

    def forward(self, x, feats: MultiScaleFeatures, return_residual: bool = False):
        h4 = self.features_at_quarter(x, feats)
        if h4.shape[2:] != feats.f4.shape[2:]:
            raise ShapeError(f"F4 {feats.f4.shape} does not match 1/4 feature {h4.shape}")
        residual = self.junction(h4, feats.f4)
        y = self.down16(self.act8(self.down8(residual)))
        return (y, residual) if return_residual else y


class MainDecoder(Module):
    def __init__(self, cfg: CodecConfig, rng):
        c1f, c2f, c4f, _ = cfg.feat_channels
        e1, e2, e3 = cfg.main_channels
        s = cfg.main_stem
        self.up8 = _up(cfg.m_main, e3, rng)
        self.act8 = AdaptiveActivation(e3)
        self.up4 = _up(e3, e2, rng)
        self.act4 = AdaptiveActivation(e2)
        self.junction = ContextJunction(e2, c4f, "combine", cfg.attn_pool, rng)
        self.up2 = _up(e2, e1, rng)
        self.act2 = AdaptiveActivation(e1 + c2f)
        self.up1 = _up(e1 + c2f, s, rng)
        self.res1 = ResidualBlock(s + c1f, rng)
        self.out = Conv2d(s + c1f, 3, 3, rng=rng)

    def forward(self, y_hat, feats: MultiScaleFeatures):
        h = self.act4(self.up4(self.act8(self.up8(y_hat))))
        h = self.junction(h, feats.f4)
        h = self.act2(_concat_checked(self.up2(h), feats.f2))
        h = self.res1(_concat_checked(self.up1(h), feats.f1))
        return self.out(h)


def _concat_checked(h, f):
    if h.shape[2:] != f.shape[2:]:
        raise ShapeError(f"scale mismatch: feature {f.shape} vs main path {h.shape}")
    return ag.concat([h, f], axis=1)


class MainNet(Module):
    def __init__(self, cfg: CodecConfig, rng=None):
        rng = rng or np.random.default_rng(cfg.seed + 1)
        self.cfg = cfg
        self.encoder = MainEncoder(cfg, rng)
        self.hyper_encoder = HyperEncoder(cfg.m_main, cfg.main_hyper, rng)
        self.hyper_decoder = HyperDecoder(cfg.main_hyper, cfg.main_hyper, rng)
        self.prior = FactorizedModel(cfg.main_hyper, rng=rng)
        self.estimator = ParameterEstimator(
            split_channels(cfg.m_main, cfg.n_main_segments),
            cfg.main_hyper + cfg.feat_channels[3], cfg.ape_hidden, cfg.sigma_min, rng,
        )
        self.decoder = MainDecoder(cfg, rng)

    @property
    def segments(self):
        return self.estimator.segments

    def encode(self, x, feats: MultiScaleFeatures) -> MainLatents:
        _check_padded(x, self.cfg.pad_multiple)
        y = self.encoder(x, feats)
        return MainLatents(y, self.hyper_encoder(y))

    def ape_segment(self, i, y_hat_prev, z_pm, f16):
        if f16.shape[2:] != z_pm.shape[2:]:
            raise ShapeError(f"F16 {f16.shape} not aligned with latent grid {z_pm.shape}")
        return self.estimator(i, y_hat_prev, ag.concat([z_pm, f16], axis=1))

    def decode(self, y_hat, feats: MultiScaleFeatures) -> Tensor:
        return self.decoder(y_hat, feats)
