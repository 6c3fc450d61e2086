"""Quantization, probability models and integer CDF export.

Two models feed the range coder:

* :class:`FactorizedModel` -- a learned per-channel monotone CDF used for
  hyper-latents, which have no prior of their own.
* :class:`GaussianConditional` -- zero-mean Gaussian convolved with a unit
  uniform, with a per-element scale predicted by a parameter estimator.

Both export quantized CDF tables (total ``2**16``) whose last entry is an
escape symbol for values outside the retained support.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special

from . import autograd as ag
from .autograd import Tensor
from .layers import Module, Parameter
from .rangecoder import PRECISION, TableSet

TAIL_MASS = 2.0**-9
LIKELIHOOD_FLOOR = 2.0**-40
_LN2 = math.log(2.0)


class SupportOverflowError(ValueError):
    """The retained alphabet would not fit in a 16-bit frequency table."""


class RateUnderflowWarning(RuntimeWarning):
    """A symbol probability fell below the likelihood floor and was clamped."""


@dataclass
class LatentCode:
    """Integer symbol grid plus its channel segmentation."""

    values: np.ndarray
    segments: list[tuple[int, int]] = field(default_factory=list)
    origin: str = "main"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int64)
        if self.segments:
            check_partition(self.segments, self.values.shape[0])

    def segment(self, i: int) -> np.ndarray:
        a, b = self.segments[i]
        return self.values[a:b]


def check_partition(segments, channels: int):
    edge = 0
    for a, b in segments:
        if a != edge or b <= a:
            raise ValueError(f"segments {segments} do not partition {channels} channels")
        edge = b
    if edge != channels:
        raise ValueError(f"segments {segments} do not partition {channels} channels")


def split_channels(channels: int, parts: int) -> list[tuple[int, int]]:
    """Uniform contiguous channel ranges; earlier ranges take the remainder."""
    if parts < 1 or parts > channels:
        raise ValueError(f"cannot split {channels} channels into {parts} segments")
    base, extra = divmod(channels, parts)
    out, start = [], 0
    for i in range(parts):
        stop = start + base + (1 if i < extra else 0)
        out.append((start, stop))
        start = stop
    return out


# --- quantization ------------------------------------------------------------


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def quantize(y, mu) -> tuple[np.ndarray, np.ndarray]:
    """Residual ``round(y - mu)`` and reconstruction ``residual + mu``."""
    y, mu = _data(y), _data(mu)
    if y.shape != mu.shape:
        raise ag.ShapeError(f"latent {y.shape} and prediction {mu.shape} differ")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(mu))):
        raise ValueError("non-finite latent or prediction")
    residual = round_half_away(y - mu)
    return residual.astype(np.int64), residual + mu


def ste_round(x: Tensor) -> Tensor:
    """Rounding with an identity gradient (straight-through)."""
    ag.mark_nondifferentiable()
    return x + ag.detach(round_half_away(x.data) - x.data)


def noise_quantize(y, mu, rng: Optional[np.random.Generator], noise=None):
    """Training-time relaxation of :func:`quantize`.

    Returns ``(noisy_residual, y_hat)``: the rate path sees ``y - mu + u``
    with ``u ~ U(-1/2, 1/2)``, the distortion path sees
    ``mu + ste_round(y - mu)``.
    """
    y, mu = ag.as_tensor(y), ag.as_tensor(mu)
    residual = y - mu
    if noise is None:
        noise = rng.uniform(-0.5, 0.5, size=residual.shape)
    return residual + noise, mu + ste_round(residual)


# --- rates ---------------------------------------------------------------------


def rate_bits(likelihoods) -> float:
    """Total information content ``-sum(log2 p)`` of given probabilities."""
    p = _data(likelihoods)
    low = p < LIKELIHOOD_FLOOR
    if np.any(low):
        warnings.warn(
            f"{int(low.sum())} probabilities clamped to 2**-40", RateUnderflowWarning, 2
        )
    return float(-np.log2(np.maximum(p, LIKELIHOOD_FLOOR)).sum())


def rate_bits_tensor(likelihoods: Tensor) -> Tensor:
    """Differentiable counterpart of :func:`rate_bits` (floor, no warning)."""
    return ag.sum_(ag.log(ag.maximum(likelihoods, LIKELIHOOD_FLOOR))) * (-1.0 / _LN2)


# --- integer tables -------------------------------------------------------------


def quantize_pmf(pmf: np.ndarray, precision: int = PRECISION) -> np.ndarray:
    """Integer CDF over the retained symbols plus a trailing escape symbol.

    Every retained symbol gets at least frequency 1; the escape absorbs
    whatever remains of ``2**precision`` and always keeps at least 1.
    """
    total = 1 << precision
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.size + 1 > total:
        raise SupportOverflowError(f"{pmf.size} symbols do not fit {precision}-bit table")
    freq = np.maximum(1, np.rint(pmf * total)).astype(np.int64)
    deficit = int(freq.sum()) - (total - 1)
    while deficit > 0:
        i = int(np.argmax(freq))
        take = min(deficit, int(freq[i]) - 1)
        freq[i] -= take
        deficit -= take
    cdf = np.zeros(pmf.size + 2, dtype=np.int64)
    np.cumsum(freq, out=cdf[1:-1])
    cdf[-1] = total
    return cdf


def gaussian_pmf(r, sigma):
    """P(r) for N(0, sigma^2) convolved with U(-1/2, 1/2)."""
    r = np.abs(np.asarray(r, dtype=np.float64))
    sigma = np.asarray(sigma, dtype=np.float64)
    # evaluate in the lower tail where the normal CDF keeps precision
    return special.ndtr((0.5 - r) / sigma) - special.ndtr((-0.5 - r) / sigma)


# per-side tail below half the total escape budget
_GAUSS_TAIL_Z = float(-special.ndtri(TAIL_MASS / 2.0))


class GaussianConditional:
    """Zero-mean Gaussian residual model with a scale floor."""

    def __init__(self, sigma_min: float = 0.04, precision: int = PRECISION,
                 max_half_width: int = 4096):
        self.sigma_min = float(sigma_min)
        self.precision = precision
        self.max_half_width = max_half_width

    def scale(self, raw: Tensor) -> Tensor:
        """Coding scale from a raw network output: max(softplus(raw), floor)."""
        return ag.maximum(ag.softplus(raw), self.sigma_min)

    def likelihood(self, residual: Tensor, sigma: Tensor) -> Tensor:
        r = ag.abs_(ag.as_tensor(residual))
        upper = ag.normal_cdf((0.5 - r) / sigma)
        lower = ag.normal_cdf((-0.5 - r) / sigma)
        return upper - lower

    def rate_bits(self, residual, sigma) -> float:
        sigma = np.maximum(_data(sigma), self.sigma_min)
        return rate_bits(gaussian_pmf(_data(residual), sigma))

    def half_width(self, sigma: float) -> int:
        k = max(0, math.ceil(sigma * _GAUSS_TAIL_Z - 0.5))
        while k > 0 and special.ndtr(-(k - 0.5) / sigma) < TAIL_MASS / 2.0:
            k -= 1
        while special.ndtr(-(k + 0.5) / sigma) >= TAIL_MASS / 2.0:
            k += 1
        return k

    def export_cdf(self, sigma: float) -> tuple[np.ndarray, int]:
        """Integer CDF for one scale; returns ``(cdf, lowest_symbol)``."""
        sigma = max(float(sigma), self.sigma_min)
        k = self.half_width(sigma)
        if k > self.max_half_width:
            raise SupportOverflowError(f"scale {sigma} needs {2 * k + 1} symbols")
        support = np.arange(-k, k + 1)
        return quantize_pmf(gaussian_pmf(support, sigma), self.precision), -k

    def tables(self, sigmas: np.ndarray) -> TableSet:
        """One table per element of ``sigmas`` (flattened, C order)."""
        flat = np.maximum(np.asarray(sigmas, dtype=np.float64).reshape(-1), self.sigma_min)
        uniq, inverse = np.unique(flat, return_inverse=True)
        tables, los = [], []
        for s in uniq:
            cdf, lo = self.export_cdf(s)
            tables.append(cdf)
            los.append(lo)
        return TableSet.from_tables(tables, los).gather(inverse.reshape(-1))


class FactorizedModel(Module):
    """Per-channel learned density for hyper-latents.

    The CDF of channel c is ``sigmoid(f_c(x))`` where ``f_c`` composes four
    monotone scalar-to-vector maps (widths 1->3->3->3->1): positive weights
    via softplus, and tanh-bounded nonlinear couplings between layers.
    """

    filters = (3, 3, 3)

    def __init__(self, channels: int, init_scale: float = 10.0, rng=None,
                 precision: int = PRECISION):
        rng = rng or np.random.default_rng(0)
        self.channels = channels
        self.precision = precision
        dims = (1,) + self.filters + (1,)
        scale = init_scale ** (1.0 / (len(self.filters) + 1))
        self.matrices, self.biases, self.factors = [], [], []
        for i in range(len(dims) - 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(_Leaf(np.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(_Leaf(rng.uniform(-0.5, 0.5, (channels, dims[i + 1], 1))))
            if i < len(dims) - 2:
                self.factors.append(_Leaf(np.zeros((channels, dims[i + 1], 1))))

    def logits_cumulative(self, x: Tensor) -> Tensor:
        """x: [C, 1, N] -> [C, 1, N]."""
        h = x
        for i, m in enumerate(self.matrices):
            h = ag.matmul(ag.softplus(m.p), h) + self.biases[i].p
            if i < len(self.factors):
                h = h + ag.tanh(self.factors[i].p) * ag.tanh(h)
        return h

    def _to_channels(self, z: Tensor) -> Tensor:
        B, C, H, W = z.shape
        if C != self.channels:
            raise ag.ShapeError(f"model has {self.channels} channels, input has {C}")
        return ag.reshape(ag.permute(z, (1, 0, 2, 3)), (C, 1, B * H * W))

    def likelihood(self, z: Tensor) -> Tensor:
        z = ag.as_tensor(z)
        B, C, H, W = z.shape
        v = self._to_channels(z)
        lower = self.logits_cumulative(v - 0.5)
        upper = self.logits_cumulative(v + 0.5)
        sign = -np.sign(lower.data + upper.data)
        sign[sign == 0] = 1.0
        lik = ag.abs_(ag.sigmoid(upper * sign) - ag.sigmoid(lower * sign))
        return ag.permute(ag.reshape(lik, (C, B, H, W)), (1, 0, 2, 3))

    def cdf(self, x: np.ndarray) -> np.ndarray:
        """CDF of every channel at points ``x`` -> [C, len(x)]."""
        x = np.broadcast_to(np.asarray(x, dtype=np.float64), (self.channels, 1, np.size(x)))
        return special.expit(self.logits_cumulative(Tensor(x)).data[:, 0, :])

    def pmf(self, values: np.ndarray) -> np.ndarray:
        """P(n) = CDF(n + 1/2) - CDF(n - 1/2) for integer ``values`` -> [C, len]."""
        v = np.asarray(values, dtype=np.float64)
        lik = self.likelihood(Tensor(np.broadcast_to(v, (1, self.channels, 1, v.size))))
        return lik.data[0, :, 0, :]

    def rate_bits(self, z_hat: np.ndarray) -> float:
        return rate_bits(self.likelihood(Tensor(_data(z_hat))).data)

    def support(self, window: int = 64, widened: int = 4096) -> list[tuple[int, int]]:
        """Per-channel [lo, hi] with tail mass below half the escape budget per side."""
        for w in (window, widened):
            grid = np.arange(-w, w + 1)
            c_lo = self.cdf(grid - 0.5)
            c_hi = self.cdf(grid + 0.5)
            out = []
            ok = True
            for ch in range(self.channels):
                below = np.nonzero(c_lo[ch] < TAIL_MASS / 2.0)[0]
                above = np.nonzero(1.0 - c_hi[ch] < TAIL_MASS / 2.0)[0]
                if below.size == 0 or above.size == 0:
                    ok = False
                    break
                lo = int(grid[below[-1]])
                hi = int(grid[above[0]])
                if hi < lo:
                    lo = hi = int(grid[np.argmax(c_hi[ch] - c_lo[ch])])
                out.append((lo, hi))
            if ok:
                return out
        raise SupportOverflowError("factorized support exceeds the widened search window")

    def export_cdf(self) -> list[tuple[np.ndarray, int]]:
        """One integer CDF per channel, as ``(cdf, lowest_symbol)``."""
        out = []
        for ch, (lo, hi) in enumerate(self.support()):
            grid = np.arange(lo, hi + 1, dtype=np.float64)
            x = np.broadcast_to(grid, (self.channels, 1, grid.size))
            up = special.expit(self.logits_cumulative(Tensor(x + 0.5)).data[ch, 0])
            dn = special.expit(self.logits_cumulative(Tensor(x - 0.5)).data[ch, 0])
            out.append((quantize_pmf(up - dn, self.precision), lo))
        return out

    def tables(self, shape: tuple) -> TableSet:
        """Tables for a [1, C, H, W] grid flattened in C order."""
        _, C, H, W = shape
        per_channel = self.export_cdf()
        base = TableSet.from_tables([c for c, _ in per_channel], [lo for _, lo in per_channel])
        return base.gather(np.repeat(np.arange(C), H * W))


class _Leaf(Module):
    """Holds one parameter so list entries stay discoverable."""

    def __init__(self, data):
        self.p = Parameter(data)
