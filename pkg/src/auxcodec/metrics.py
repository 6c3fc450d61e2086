"""Quality metrics, RD points and the Bjontegaard rate difference."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np
from scipy.interpolate import CubicSpline

PSNR_CAP = 100.0
RD_HEADER = ("bpp", "psnr_db", "lambda")


class CurveError(ValueError):
    """An RD curve is unusable (too few points, non-monotone)."""


class NoOverlapError(CurveError):
    """The two curves share no PSNR interval."""


class CsvFormatError(ValueError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.lineno = lineno


def psnr(x, x_hat) -> float:
    """PSNR in dB for images on the [0, 1] scale, capped at 100 dB."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    mse = float(np.mean((x - x_hat) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    psnr_db: float
    lam: float = float("nan")

    def __post_init__(self):
        if not self.bpp > 0:
            raise CurveError(f"bpp must be positive, got {self.bpp}")


def _as_arrays(curve) -> tuple[np.ndarray, np.ndarray]:
    if len(curve) and isinstance(curve[0], RDPoint):
        rate = np.array([p.bpp for p in curve], dtype=np.float64)
        quality = np.array([p.psnr_db for p in curve], dtype=np.float64)
    else:
        arr = np.asarray(curve, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise CurveError("curve must be RDPoints or an [n, 2] array of (bpp, psnr)")
        rate, quality = arr[:, 0], arr[:, 1]
    if rate.size < 4:
        raise CurveError(f"need at least 4 points, got {rate.size}")
    if np.any(rate <= 0):
        raise CurveError("rates must be positive")
    order = np.argsort(quality, kind="stable")
    rate, quality = rate[order], quality[order]
    if np.any(np.diff(quality) <= 0):
        raise CurveError("PSNR values must be distinct")
    return rate, quality


def bd_rate(anchor, test) -> float:
    """Average rate difference of ``test`` vs ``anchor`` at equal PSNR, in %.

    Log-rate is interpolated as a natural cubic spline of PSNR for each
    curve and averaged over the shared PSNR interval. Negative means the
    test curve saves bits.
    """
    ra, qa = _as_arrays(anchor)
    rb, qb = _as_arrays(test)
    lo = max(qa[0], qb[0])
    hi = min(qa[-1], qb[-1])
    if not hi > lo:
        raise NoOverlapError(f"PSNR ranges [{qa[0]}, {qa[-1]}] and [{qb[0]}, {qb[-1]}] "
                             "do not overlap")
    sa = CubicSpline(qa, np.log(ra), bc_type="natural")
    sb = CubicSpline(qb, np.log(rb), bc_type="natural")
    diff = (sb.integrate(lo, hi) - sa.integrate(lo, hi)) / (hi - lo)
    return (math.exp(diff) - 1.0) * 100.0


# --- CSV -------------------------------------------------------------------------


def format_rd_csv(points: Iterable[RDPoint]) -> str:
    buf = io.StringIO()
    buf.write(",".join(RD_HEADER) + "\n")
    for p in points:
        buf.write(f"{p.bpp:.6f},{p.psnr_db:.6f},{p.lam:g}\n")
    return buf.getvalue()


def write_rd_csv(path: Union[str, Path], points: Sequence[RDPoint]):
    Path(path).write_text(format_rd_csv(points))


def read_rd_csv(path: Union[str, Path]) -> list[RDPoint]:
    """Read ``bpp,psnr_db,lambda`` rows; errors carry the offending line."""
    text = Path(path).read_text()
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(c.strip() for c in rows[0]) != RD_HEADER:
        raise CsvFormatError(path, 1, f"expected header {','.join(RD_HEADER)}")
    points = []
    for lineno, row in enumerate(rows[1:], 2):
        if not row or not "".join(row).strip():
            continue
        if len(row) != 3:
            raise CsvFormatError(path, lineno, f"expected 3 fields, got {len(row)}")
        try:
            bpp, q, lam = (float(c) for c in row)
            points.append(RDPoint(bpp, q, lam))
        except (ValueError, CurveError) as exc:
            raise CsvFormatError(path, lineno, str(exc)) from exc
    return points
