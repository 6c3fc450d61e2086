"""Rate-distortion training on small patches."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import CodecConfig
from .model import STREAMS, CodecModel, TrainOutputs

log = logging.getLogger(__name__)

DEFAULT_LR = 1e-4
CLIP_NORM = 1.0


class NonFiniteLossError(FloatingPointError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


def rd_loss(x, outputs: TrainOutputs, lam: float):
    """bpp over all four streams + lam * 255^2 * MSE.

    Returns ``(loss, parts)`` where ``parts`` holds float diagnostics.
    """
    x = ag.as_tensor(x)
    B, _, H, W = x.shape
    bits = outputs.bits()
    rate = bits["z_aux"] + bits["y_aux"] + bits["z"] + bits["y"]
    bpp = rate * (1.0 / (B * H * W))
    mse = ag.mean((outputs.x_hat - x) ** 2)
    loss = bpp + mse * (lam * 255.0**2) if lam else bpp
    parts = {"loss": loss.item(), "bpp": bpp.item(), "mse": mse.item()}
    parts.update({f"bits_{k}": v.item() for k, v in bits.items()})
    if not math.isfinite(parts["loss"]):
        raise NonFiniteLossError(f"non-finite loss: {parts}")
    return loss, parts


class Adam:
    """Adam with global gradient-norm clipping."""

    def __init__(self, params, lr=DEFAULT_LR, betas=(0.9, 0.999), eps=1e-8,
                 clip_norm: Optional[float] = CLIP_NORM):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> float:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
        scale = 1.0
        if self.clip_norm and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


@dataclass
class TrainState:
    model: CodecModel
    optimizer: Adam
    step: int = 0
    seed: int = 0
    lam: float = 0.01
    trace: list = field(default_factory=list)

    def save(self, path: Union[str, Path]):
        arrays = {f"w/{k}": v for k, v in self.model.state_dict().items()}
        for i, (m, v) in enumerate(zip(self.optimizer.m, self.optimizer.v)):
            arrays[f"m/{i}"] = m
            arrays[f"v/{i}"] = v
        meta = dict(step=self.step, seed=self.seed, lam=self.lam, t=self.optimizer.t,
                    lr=self.optimizer.lr, config_digest=self.model.cfg.digest().hex())
        np.savez(path, __config__=np.array(repr(self.model.cfg.to_dict())),
                 __meta__=np.array(repr(meta)), **arrays)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TrainState":
        import ast

        with np.load(path, allow_pickle=False) as f:
            cfg = CodecConfig.from_dict(ast.literal_eval(str(f["__config__"])))
            meta = ast.literal_eval(str(f["__meta__"]))
            if meta["config_digest"] != cfg.digest().hex():
                raise ValueError("checkpoint config digest mismatch")
            model = CodecModel(cfg)
            model.load_state_dict({k[2:]: f[k] for k in f.files if k.startswith("w/")})
            opt = Adam(model.parameters(), lr=meta["lr"])
            opt.m = [f[f"m/{i}"].copy() for i in range(len(opt.m))]
            opt.v = [f[f"v/{i}"].copy() for i in range(len(opt.v))]
            opt.t = meta["t"]
        return cls(model, opt, meta["step"], meta["seed"], meta["lam"])


def synthetic_patches(n: int, size: int = 64, seed: int = 0) -> np.ndarray:
    """Smooth, colourful 8-bit-valued patches [n, 3, size, size] in [0, 1].

    Each patch is a random low-frequency field (gradient plus a few
    oriented sinusoids) mixed into RGB through a random colour matrix,
    with an optional hard-edged disc.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.empty((n, 3, size, size))
    for k in range(n):
        fields = []
        for _ in range(3):
            f = rng.normal() * xx + rng.normal() * yy
            for _ in range(3):
                theta = rng.uniform(0, math.pi)
                freq = rng.uniform(0.5, 4.0)
                f = f + 0.5 * rng.normal() * np.sin(
                    2 * math.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy)
                    + rng.uniform(0, 2 * math.pi))
            fields.append(f)
        base = np.stack(fields)
        mix = rng.normal(size=(3, 3)) * 0.25 + np.eye(3) * 0.5
        img = np.tensordot(mix, base, axes=1)
        if rng.random() < 0.5:
            cy, cx, r = rng.uniform(0.2, 0.8, 2).tolist() + [rng.uniform(0.1, 0.3)]
            disc = ((yy - cy) ** 2 + (xx - cx) ** 2) < r * r
            img = img + disc * rng.normal(size=(3, 1, 1))
        lo, hi = img.min(), img.max()
        img = (img - lo) / max(hi - lo, 1e-9)
        img = rng.uniform(0.05, 0.3) + img * rng.uniform(0.5, 0.65)
        out[k] = np.rint(img * 255.0) / 255.0
    return out


def evaluate(model: CodecModel, patches: np.ndarray, lam: float, seed: int = 1234,
             batch_size: int = 10) -> dict:
    """Mean rd_loss parts over all patches with fixed relaxation noise."""
    rng = np.random.default_rng(seed)
    totals: dict = {}
    n = len(patches)
    for start in range(0, n, batch_size):
        x = Tensor(patches[start : start + batch_size])
        _, parts = rd_loss(x, model.forward_train(x, rng), lam)
        w = x.shape[0] / n
        for k, v in parts.items():
            totals[k] = totals.get(k, 0.0) + w * v
    return totals


def train(
    patches: np.ndarray,
    model: Optional[CodecModel] = None,
    config: Optional[CodecConfig] = None,
    steps: int = 200,
    batch_size: int = 1,
    lr: float = DEFAULT_LR,
    seed: int = 0,
    log_every: int = 10,
    state: Optional[TrainState] = None,
    callback: Optional[Callable[[int, dict], None]] = None,
) -> TrainState:
    """Adam on rd_loss over random minibatches of ``patches``.

    Every step's parts are appended to ``state.trace``; a loss above ten
    times the first step's loss stops training with
    :class:`TrainingDivergedError`.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 4 or len(patches) < 1:
        raise ValueError("need at least one [3, H, W] patch")
    if state is None:
        model = model or CodecModel(config or CodecConfig())
        state = TrainState(model, Adam(model.parameters(), lr=lr), seed=seed,
                           lam=model.cfg.lam)
    model, opt = state.model, state.optimizer
    multiple = model.cfg.pad_multiple
    if patches.shape[2] % multiple or patches.shape[3] % multiple:
        raise ValueError(f"patch size must be a multiple of {multiple}")
    initial = state.trace[0]["loss"] if state.trace else None
    for _ in range(steps):
        # per-step stream so a resumed checkpoint replays the same batches and noise
        rng = np.random.default_rng([state.seed, state.step])
        idx = rng.choice(len(patches), size=min(batch_size, len(patches)), replace=False)
        x = Tensor(patches[np.sort(idx)])
        model.zero_grad()
        with ag.Tape() as tape:
            loss, parts = rd_loss(x, model.forward_train(x, rng), state.lam)
        tape.backward(loss)
        tape.clear()
        parts["grad_norm"] = opt.step()
        parts["step"] = state.step
        state.step += 1
        state.trace.append(parts)
        if initial is None:
            initial = parts["loss"]
        if log_every and state.step % log_every == 0:
            log.info("step %d loss %.4f bpp %.4f mse %.6f", state.step, parts["loss"],
                     parts["bpp"], parts["mse"])
        if callback:
            callback(state.step, parts)
        if parts["loss"] > 10.0 * initial:
            raise TrainingDivergedError(
                f"loss {parts['loss']:.4f} exceeds 10x initial {initial:.4f} "
                f"at step {state.step}", state.trace)
    return state


def format_trace_csv(trace: list) -> str:
    cols = ["step", "loss", "bpp", "mse"] + [f"bits_{k}" for k in STREAMS]
    lines = [",".join(cols)]
    for row in trace:
        lines.append(",".join(f"{row[c]:.9g}" if c != "step" else str(row[c]) for c in cols))
    return "\n".join(lines) + "\n"
