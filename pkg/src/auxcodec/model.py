"""The full two-network codec model and its training-time forward pass."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .aux_net import AuxCoarseNet, MultiScaleFeatures
from .config import CodecConfig
from .entropy import GaussianConditional, noise_quantize, rate_bits_tensor
from .layers import Module
from .main_net import MainNet
from .weights import decode_weights, encode_weights, load_weights, weights_digest

STREAMS = ("z_aux", "y_aux", "z", "y")


@dataclass
class TrainOutputs:
    x_hat: Tensor
    likelihoods: dict
    features: MultiScaleFeatures

    def bits(self) -> dict:
        return {k: rate_bits_tensor(v) for k, v in self.likelihoods.items()}


class CodecModel(Module):
    def __init__(self, cfg: CodecConfig = CodecConfig()):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.aux = AuxCoarseNet(cfg, rng)
        self.main = MainNet(cfg, rng)
        self.gaussian = GaussianConditional(cfg.sigma_min)

    def forward_train(self, x, rng: np.random.Generator) -> TrainOutputs:
        """Noise-relaxed rates and straight-through reconstruction."""
        x = ag.as_tensor(x)
        aux, main = self.aux, self.main
        lat = aux.encode(x)
        z_noisy, z_hat = noise_quantize(lat.z_aux, np.zeros(lat.z_aux.shape), rng)
        liks = {"z_aux": aux.prior.likelihood(z_noisy)}
        z_apm = aux.hyper_decoder(z_hat)
        y_hat_aux, liks["y_aux"] = self._segments_train(
            lat.y_aux, aux.segments, lambda i, prev: aux.pe_segment(i, prev, z_apm), rng
        )
        feats = aux.decode(y_hat_aux)

        mlat = main.encode(x, feats)
        zm_noisy, zm_hat = noise_quantize(mlat.z, np.zeros(mlat.z.shape), rng)
        liks["z"] = main.prior.likelihood(zm_noisy)
        z_pm = main.hyper_decoder(zm_hat)
        y_hat, liks["y"] = self._segments_train(
            mlat.y, main.segments,
            lambda i, prev: main.ape_segment(i, prev, z_pm, feats.f16), rng,
        )
        return TrainOutputs(main.decode(y_hat, feats), liks, feats)

    def _segments_train(self, y, segments, estimate, rng):
        prev, liks = [], []
        for i, (a, b) in enumerate(segments):
            mu, sigma = estimate(i, prev)
            r_noisy, y_hat_i = noise_quantize(y[:, a:b], mu, rng)
            liks.append(self.gaussian.likelihood(r_noisy, sigma))
            prev.append(y_hat_i)
        return ag.concat(prev, axis=1), ag.concat(liks, axis=1)

    def digest(self) -> bytes:
        """8-byte identity binding bitstreams to (config, weights)."""
        return hashlib.sha256(self.cfg.digest() + weights_digest(self.state_dict())).digest()[:8]

    # --- persistence ---------------------------------------------------------

    def to_weight_bytes(self) -> bytes:
        return encode_weights(self.state_dict(), self.cfg.to_dict())

    def round_to_float32(self):
        """Make in-memory weights equal to what a weight file stores."""
        for p in self.parameters():
            p.data = p.data.astype("<f4").astype(np.float64)

    @classmethod
    def from_weight_bytes(cls, raw: bytes) -> "CodecModel":
        params, cfg = decode_weights(raw)
        model = cls(CodecConfig.from_dict(cfg))
        model.load_state_dict(params)
        return model

    def save(self, path: Union[str, Path]):
        Path(path).write_bytes(self.to_weight_bytes())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CodecModel":
        params, cfg = load_weights(path)
        model = cls(CodecConfig.from_dict(cfg))
        model.load_state_dict(params)
        return model
