"""Network building blocks: parameter containers, convolutions, the
per-channel gated activation, residual blocks and global attention."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)


class Module:
    """Minimal parameter container; attributes that are Parameters,
    Modules or lists of Modules are discovered in definition order."""

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

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, padding=None, rng=None):
        rng = rng or np.random.default_rng(0)
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding
        bound = math.sqrt(6.0 / (cin * k * k)) / math.sqrt(2.0)
        self.weight = Parameter(_uniform(rng, (cout, cin, k, k), bound))
        self.bias = Parameter(np.zeros(cout))

    def forward(self, x):
        return ag.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, k=4, stride=2, padding=1, rng=None):
        rng = rng or np.random.default_rng(0)
        self.stride = stride
        self.padding = padding
        # each output pixel sees about cin * (k/stride)^2 taps
        fan_in = cin * (k // stride) ** 2
        bound = math.sqrt(6.0 / fan_in) / math.sqrt(2.0)
        self.weight = Parameter(_uniform(rng, (cin, cout, k, k), bound))
        self.bias = Parameter(np.zeros(cout))

    def forward(self, x):
        return ag.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


def adaptive_act(x: Tensor, gain: Tensor, shift: Tensor) -> Tensor:
    """y = x * sigmoid(gain_c * x + shift_c), per channel c."""
    C = x.shape[1]
    if gain.shape != (C,) or shift.shape != (C,):
        raise ShapeError(f"activation has {gain.shape[0]} channels, input has {C}")
    a = ag.reshape(gain, (1, C, 1, 1))
    b = ag.reshape(shift, (1, C, 1, 1))
    return x * ag.sigmoid(x * a + b)


class AdaptiveActivation(Module):
    """Per-channel gated swish; plain swish at gain=1, shift=0."""

    def __init__(self, channels: int):
        self.gain = Parameter(np.ones(channels))
        self.shift = Parameter(np.zeros(channels))

    def forward(self, x):
        return adaptive_act(x, self.gain, self.shift)


class ResidualBlock(Module):
    """x + conv(act(conv(x))); the second conv starts at zero so the block
    is the identity at initialization."""

    def __init__(self, channels: int, rng=None):
        self.conv1 = Conv2d(channels, channels, 3, rng=rng)
        self.act = AdaptiveActivation(channels)
        self.conv2 = Conv2d(channels, channels, 3, rng=rng)
        self.conv2.weight.data[...] = 0.0

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


def global_attention(
    q_feat: Tensor,
    kv_feat: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    pool: int = 2,
    return_weights: bool = False,
):
    """Single-head attention from every query position to pooled key/value
    tokens, added residually to ``q_feat``.

    Keys and values are ``pool``x``pool`` average-pooled positions of
    ``kv_feat``; queries keep full resolution. Projection matrices act on
    channel row-vectors (``token @ w``).
    """
    B, C, H, W = q_feat.shape
    if kv_feat.shape[:2] != (B, C):
        raise ShapeError(f"query {q_feat.shape} and key/value {kv_feat.shape} disagree")
    kv = ag.avg_pool2d(kv_feat, pool) if pool > 1 else kv_feat
    T = kv.shape[2] * kv.shape[3]
    q = ag.permute(ag.reshape(q_feat, (B, C, H * W)), (0, 2, 1))
    t = ag.permute(ag.reshape(kv, (B, C, T)), (0, 2, 1))
    Q = ag.matmul(q, wq)
    K = ag.matmul(t, wk)
    V = ag.matmul(t, wv)
    scores = ag.matmul(Q, ag.permute(K, (0, 2, 1))) * (1.0 / math.sqrt(C))
    attn = ag.softmax(scores, axis=-1)
    mixed = ag.matmul(ag.matmul(attn, V), wo)
    out = q_feat + ag.reshape(ag.permute(mixed, (0, 2, 1)), (B, C, H, W))
    if return_weights:
        return out, attn
    return out


class AttentionBlock(Module):
    def __init__(self, channels: int, pool: int = 2, rng=None, out_scale: float = 0.1):
        rng = rng or np.random.default_rng(0)
        std = 1.0 / math.sqrt(channels)
        self.pool = pool
        self.wq = Parameter(rng.normal(0.0, std, (channels, channels)))
        self.wk = Parameter(rng.normal(0.0, std, (channels, channels)))
        self.wv = Parameter(rng.normal(0.0, std, (channels, channels)))
        self.wo = Parameter(rng.normal(0.0, out_scale * std, (channels, channels)))

    def forward(self, q_feat, kv_feat: Optional[Tensor] = None, return_weights=False):
        kv_feat = q_feat if kv_feat is None else kv_feat
        return global_attention(
            q_feat, kv_feat, self.wq, self.wk, self.wv, self.wo, self.pool, return_weights
        )
