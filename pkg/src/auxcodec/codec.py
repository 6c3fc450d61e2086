"""End-to-end image encoding and decoding.

Coding order (the decoder follows it exactly):

1. ``z_aux`` under the auxiliary factorized prior,
2. ``y_aux`` residuals, one segment at a time, under Gaussian scales from
   the parameter estimator,
3. ``z`` under the main factorized prior,
4. ``y`` residuals, one segment at a time, with the estimator additionally
   conditioned on the predicted 1/16-scale feature.

Each of the four sub-streams has its own range coder instance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import container
from .autograd import Tensor
from .container import ConfigMismatchError, ContainerHeader
from .entropy import LatentCode, SupportOverflowError, quantize, round_half_away
from .model import STREAMS, CodecModel
from .rangecoder import RangeCoderError, RangeDecoder, RangeEncoder


class CodecError(ValueError):
    pass


class CorruptStreamError(container.ContainerError):
    """Sub-stream contents could not be decoded."""


# Latent magnitudes beyond this never come from a sane encoder; the decoder
# treats them as corruption instead of feeding them to the networks.
MAX_SYMBOL = 1 << 24


def _check_symbols(values: np.ndarray, name: str, decoding: bool):
    if values.size and int(np.max(np.abs(values))) >= MAX_SYMBOL:
        if decoding:
            raise CorruptStreamError(f"{name}: decoded symbol magnitude out of range")
        raise CodecError(f"{name}: latent magnitude exceeds {MAX_SYMBOL}")


@dataclass
class CodecTrace:
    """Everything the coder saw, for verification and reporting."""

    codes: dict = field(default_factory=dict)      # stream -> LatentCode
    latents: dict = field(default_factory=dict)    # reconstructed y/z grids
    x_hat: Optional[np.ndarray] = None             # [3, H, W] in [0, 1], cropped
    estimated_bits: dict = field(default_factory=dict)  # -log2 of the model pmf
    table_bits: dict = field(default_factory=dict)      # under the coding tables, escapes included


@dataclass
class EncodeReport:
    width: int
    height: int
    stream_bytes: tuple
    total_bytes: int
    estimated_bits: dict
    table_bits: dict = field(default_factory=dict)

    @property
    def aux_bytes(self) -> int:
        return self.stream_bytes[0] + self.stream_bytes[1]

    @property
    def main_bytes(self) -> int:
        return self.stream_bytes[2] + self.stream_bytes[3]

    @property
    def payload_bytes(self) -> int:
        return sum(self.stream_bytes)

    @property
    def aux_ratio(self) -> float:
        return self.aux_bytes / self.payload_bytes if self.payload_bytes else 0.0

    @property
    def bpp(self) -> float:
        return 8.0 * self.total_bytes / (self.width * self.height)

    def csv_line(self, psnr: Optional[float] = None) -> str:
        p = "" if psnr is None else f"{psnr:.4f}"
        return f"{self.bpp:.6f},{p},{self.aux_bytes},{self.main_bytes},{self.aux_ratio:.2f}"


REPORT_COLUMNS = "bpp,psnr,aux_bytes,main_bytes,aux_ratio"


# --- image helpers ------------------------------------------------------------


def to_model_input(img: np.ndarray, multiple: int) -> Tensor:
    """uint8 [H, W, 3] -> replicate-padded float [1, 3, Hp, Wp] in [0, 1]."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise CodecError(f"expected an RGB image [H, W, 3], got {img.shape}")
    H, W = img.shape[:2]
    if H == 0 or W == 0:
        raise CodecError("cannot encode a zero-size image")
    ph = -H % multiple
    pw = -W % multiple
    padded = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return Tensor(padded.transpose(2, 0, 1)[None].astype(np.float64) / 255.0)


def to_uint8(x_hat: np.ndarray) -> np.ndarray:
    """[3, H, W] float in [0, 1] -> uint8 [H, W, 3]."""
    return np.rint(np.clip(x_hat, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


# --- sub-stream coding ------------------------------------------------------------


def _encode_hyper(prior, z: Tensor, trace: CodecTrace, name: str) -> tuple[bytes, Tensor]:
    z_hat = round_half_away(z.data)
    if not np.all(np.isfinite(z_hat)):
        raise CodecError(f"{name}: non-finite hyper-latent")
    symbols = z_hat.astype(np.int64)
    _check_symbols(symbols, name, decoding=False)
    tables = prior.tables(z.shape)
    enc = RangeEncoder()
    enc.encode(symbols.reshape(-1), tables, escape=True)
    trace.table_bits[name] = float(tables.code_length(symbols, escape=True).sum())
    trace.codes[name] = LatentCode(symbols[0], origin=name)
    trace.latents[name] = z_hat
    trace.estimated_bits[name] = prior.rate_bits(z_hat)
    return enc.finish(), Tensor(z_hat)


def _decode_hyper(prior, data: bytes, shape, trace, name) -> Tensor:
    dec = RangeDecoder(data)
    try:
        symbols = dec.decode(prior.tables(shape), escape=True).reshape(shape)
    except RangeCoderError as exc:
        raise CorruptStreamError(f"{name}: {exc}") from exc
    _check_symbols(symbols, name, decoding=True)
    z_hat = symbols.astype(np.float64)
    trace.codes[name] = LatentCode(symbols[0], origin=name)
    trace.latents[name] = z_hat
    return Tensor(z_hat)


def _encode_segments(y: Tensor, segments, estimate: Callable, gaussian,
                     trace: CodecTrace, name: str) -> tuple[bytes, Tensor]:
    enc = RangeEncoder()
    prev, residuals, bits, table_bits = [], [], 0.0, 0.0
    for i, (a, b) in enumerate(segments):
        mu, sigma = estimate(i, prev)
        if not np.all(np.isfinite(sigma.data)):
            raise CodecError(f"{name} segment {i}: non-finite scale")
        r, y_hat_i = quantize(y.data[:, a:b], mu.data)
        _check_symbols(r, name, decoding=False)
        tables = gaussian.tables(sigma.data)
        enc.encode(r.reshape(-1), tables, escape=True)
        bits += gaussian.rate_bits(r, sigma.data)
        table_bits += float(tables.code_length(r, escape=True).sum())
        residuals.append(r)
        prev.append(Tensor(y_hat_i))
    y_hat = np.concatenate([p.data for p in prev], axis=1)
    trace.codes[name] = LatentCode(np.concatenate(residuals, axis=1)[0], list(segments), name)
    trace.latents[name] = y_hat
    trace.estimated_bits[name] = bits
    trace.table_bits[name] = table_bits
    return enc.finish(), Tensor(y_hat)


def _decode_segments(data: bytes, segments, estimate: Callable, gaussian,
                     trace: CodecTrace, name: str) -> Tensor:
    dec = RangeDecoder(data)
    prev, residuals = [], []
    for i, (a, b) in enumerate(segments):
        mu, sigma = estimate(i, prev)
        if not (np.all(np.isfinite(mu.data)) and np.all(np.isfinite(sigma.data))):
            raise CorruptStreamError(f"{name} segment {i}: non-finite entropy parameters")
        try:
            r = dec.decode(gaussian.tables(sigma.data), escape=True).reshape(mu.shape)
        except RangeCoderError as exc:
            raise CorruptStreamError(f"{name} segment {i}: {exc}") from exc
        _check_symbols(r, name, decoding=True)
        residuals.append(r)
        prev.append(Tensor(r + mu.data))
    y_hat = np.concatenate([p.data for p in prev], axis=1)
    trace.codes[name] = LatentCode(np.concatenate(residuals, axis=1)[0], list(segments), name)
    trace.latents[name] = y_hat
    return Tensor(y_hat)


# --- public API --------------------------------------------------------------------


def encode_image(img: np.ndarray, model: CodecModel):
    """Compress an 8-bit RGB image.

    Returns ``(container_bytes, report, trace)``; ``trace.x_hat`` is the
    encoder-side reconstruction the decoder reproduces bit-exactly.
    """
    cfg = model.cfg
    H, W = np.shape(img)[:2]
    if H >= 1 << 16 or W >= 1 << 16:
        raise CodecError(f"image {W}x{H} exceeds the 16-bit size fields")
    x = to_model_input(img, cfg.pad_multiple)
    aux, main, gauss = model.aux, model.main, model.gaussian
    trace = CodecTrace()

    lat = aux.encode(x)
    s0, z_aux_hat = _encode_hyper(aux.prior, lat.z_aux, trace, "z_aux")
    z_apm = aux.hyper_decoder(z_aux_hat)
    s1, y_aux_hat = _encode_segments(
        lat.y_aux, aux.segments, lambda i, prev: aux.pe_segment(i, prev, z_apm),
        gauss, trace, "y_aux",
    )
    feats = aux.decode(y_aux_hat)

    mlat = main.encode(x, feats)
    s2, z_hat = _encode_hyper(main.prior, mlat.z, trace, "z")
    z_pm = main.hyper_decoder(z_hat)
    s3, y_hat = _encode_segments(
        mlat.y, main.segments, lambda i, prev: main.ape_segment(i, prev, z_pm, feats.f16),
        gauss, trace, "y",
    )
    trace.x_hat = np.clip(main.decode(y_hat, feats).data[0, :, :H, :W], 0.0, 1.0)

    streams = (s0, s1, s2, s3)
    header = ContainerHeader(model.digest(), W, H, cfg.lambda_index,
                             tuple(len(s) for s in streams))
    data = container.pack(header, streams)
    report = EncodeReport(W, H, header.lengths, len(data), dict(trace.estimated_bits),
                          dict(trace.table_bits))
    return data, report, trace


def decode_image(data: bytes, model: CodecModel, return_trace: bool = False):
    """Decompress a container into an 8-bit RGB image [H, W, 3].

    Every failure is a :class:`~auxcodec.container.ContainerError`
    subclass: framing and checksum problems from the container layer,
    :class:`ConfigMismatchError` for foreign streams and
    :class:`CorruptStreamError` when a sub-stream does not decode.
    """
    header, streams = container.unpack(data)
    if header.model_hash != model.digest():
        raise ConfigMismatchError(
            "stream was encoded with a different config/weights "
            f"({header.model_hash.hex()} != {model.digest().hex()})"
        )
    try:
        with np.errstate(all="ignore"):
            trace = _decode_body(header, streams, model)
    except (SupportOverflowError, FloatingPointError, OverflowError) as exc:
        raise CorruptStreamError(f"sub-stream decodes to unusable values: {exc}") from exc
    img = to_uint8(trace.x_hat)
    return (img, trace) if return_trace else img


def _decode_body(header, streams, model: CodecModel) -> CodecTrace:
    cfg = model.cfg
    aux, main, gauss = model.aux, model.main, model.gaussian
    m = cfg.pad_multiple
    Hp, Wp = -(-header.height // m) * m, -(-header.width // m) * m
    hyper_shape_aux = (1, cfg.aux_hyper, Hp // 64, Wp // 64)
    hyper_shape_main = (1, cfg.main_hyper, Hp // 64, Wp // 64)
    trace = CodecTrace()

    z_aux_hat = _decode_hyper(aux.prior, streams[0], hyper_shape_aux, trace, "z_aux")
    z_apm = aux.hyper_decoder(z_aux_hat)
    y_aux_hat = _decode_segments(
        streams[1], aux.segments, lambda i, prev: aux.pe_segment(i, prev, z_apm),
        gauss, trace, "y_aux",
    )
    feats = aux.decode(y_aux_hat)
    z_hat = _decode_hyper(main.prior, streams[2], hyper_shape_main, trace, "z")
    z_pm = main.hyper_decoder(z_hat)
    y_hat = _decode_segments(
        streams[3], main.segments, lambda i, prev: main.ape_segment(i, prev, z_pm, feats.f16),
        gauss, trace, "y",
    )
    H, W = header.height, header.width
    trace.x_hat = np.clip(main.decode(y_hat, feats).data[0, :, :H, :W], 0.0, 1.0)
    if not np.all(np.isfinite(trace.x_hat)):
        raise CorruptStreamError("reconstruction is not finite")
    return trace


__all__ = [
    "CodecError", "CodecTrace", "CorruptStreamError", "EncodeReport", "REPORT_COLUMNS",
    "STREAMS", "decode_image", "encode_image", "to_model_input", "to_uint8",
]
