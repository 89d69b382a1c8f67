"""Image quality metrics: MSE, RMSE, PSNR and windowed SSIM.

Inputs are images in [0, 1], shape (3, H, W) or (H, W). SSIM works on the
luma y = 0.299 R + 0.587 G + 0.114 B over non-overlapping 8x8 windows
(partial windows at the right/bottom edges are dropped) with population
statistics and C1 = (0.01 peak)^2, C2 = (0.03 peak)^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

WINDOW = 8
PSNR_INF = math.inf


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    d = a - b
    return float(np.mean(d * d))


def rmse(a, b) -> float:
    return math.sqrt(mse(a, b))


def psnr_from_mse(m: float, peak: float = 1.0) -> float:
    if m == 0:
        return PSNR_INF
    return 10.0 * math.log10(peak * peak / m)


def psnr(a, b, peak: float = 1.0) -> float:
    return psnr_from_mse(mse(a, b), peak)


def luma(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return img
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def ssim(a, b, peak: float = 1.0) -> float:
    a, b = _pair(a, b)
    ya, yb = luma(a), luma(b)
    h, w = ya.shape
    nh, nw = h // WINDOW, w // WINDOW
    if nh == 0 or nw == 0:
        raise ValueError(f"image {h}x{w} is smaller than one {WINDOW}x{WINDOW} window")

    def blocks(y):
        y = y[: nh * WINDOW, : nw * WINDOW]
        return y.reshape(nh, WINDOW, nw, WINDOW).transpose(0, 2, 1, 3).reshape(nh, nw, -1)

    ba, bb = blocks(ya), blocks(yb)
    mu_a, mu_b = ba.mean(axis=-1), bb.mean(axis=-1)
    da = ba - mu_a[..., None]
    db = bb - mu_b[..., None]
    var_a = (da * da).mean(axis=-1)
    var_b = (db * db).mean(axis=-1)
    cov = (da * db).mean(axis=-1)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    num = (2 * (mu_a * mu_b) + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class ImageScores:
    path: str
    psnr: float
    mse: float
    rmse: float
    ssim: float


@dataclass
class MetricReport:
    images: list[ImageScores] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.images)

    def _mean(self, attr: str) -> float:
        if not self.images:
            raise ValueError("empty corpus")
        return float(np.mean([getattr(s, attr) for s in self.images]))

    @property
    def psnr(self) -> float:
        return self._mean("psnr")

    @property
    def mse(self) -> float:
        return self._mean("mse")

    @property
    def rmse(self) -> float:
        return self._mean("rmse")

    @property
    def ssim(self) -> float:
        return self._mean("ssim")

    def summary(self) -> dict[str, float]:
        return {"psnr": self.psnr, "mse": self.mse, "rmse": self.rmse, "ssim": self.ssim}


def score_pair(pred, target, path: str = "") -> ImageScores:
    m = mse(pred, target)
    return ImageScores(path, psnr_from_mse(m), m, math.sqrt(m), ssim(pred, target))


def fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.6g}"


def write_image_csv(report: MetricReport, path) -> None:
    lines = ["path,psnr,mse,rmse,ssim"]
    for s in report.images:
        lines.append(",".join([s.path, fmt(s.psnr), fmt(s.mse), fmt(s.rmse), fmt(s.ssim)]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def format_table(rows: list[tuple[str, dict[str, float]]]) -> str:
    """Text table with the P-SNR, MSE, R-MSE, SSIM column order."""
    head = f"{'Method':<24}{'P-SNR':>12}{'MSE':>12}{'R-MSE':>12}{'SSIM':>12}"
    out = [head, "-" * len(head)]
    for label, m in rows:
        out.append(f"{label:<24}{fmt(m['psnr']):>12}{fmt(m['mse']):>12}{fmt(m['rmse']):>12}{fmt(m['ssim']):>12}")
    return "\n".join(out)


def evaluate_corpus(checkpoint, manifest, sigma: float | None = None, seed: int | None = None) -> MetricReport:
    """Run the checkpoint's generator over ``manifest`` and score 8-bit outputs."""
    from .trainer import evaluate_checkpoint

    return evaluate_checkpoint(checkpoint, manifest, sigma=sigma, seed=seed)
