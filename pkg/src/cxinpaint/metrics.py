"""Reconstruction quality measures (MSE, PSNR, SSIM) and diff-map anomaly
highlighting.

All metrics operate on the 8-bit intensity scale 0..255; use to_intensity()
to convert normalized [-1, 1] tensors first. SSIM follows the reference
configuration: 11x11 Gaussian window, sigma 1.5, C1 = (0.01*255)^2,
C2 = (0.03*255)^2, averaged over the valid filter positions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = (0.01 * 255.0) ** 2
C2 = (0.03 * 255.0) ** 2


def to_intensity(x: Tensor) -> Tensor:
    """Map normalized [-1, 1] values onto the 0..255 intensity scale."""
    return Tensor((x.array + 1.0) * 127.5)


def _image2d(x: Tensor) -> np.ndarray:
    arr = x.array
    while arr.ndim > 2 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ContractError(f"expected a single 2-d image, got shape {x.shape}")
    return arr


def _check_pair(a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    return _image2d(a), _image2d(b)


def mse(a: Tensor, b: Tensor) -> float:
    aa, ba = _check_pair(a, b)
    d = aa - ba
    return float(np.mean(d * d))


def psnr(a: Tensor, b: Tensor) -> float:
    """10*log10(255^2 / mse) in dB; +inf sentinel for identical images."""
    e = mse(a, b)
    if e == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / e)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 2-d Gaussian weights."""
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(img: np.ndarray, kernel1d: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation with a 1-d kernel along both axes."""
    k = len(kernel1d)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0)
    rows = np.tensordot(rows, kernel1d, axes=([2], [0]))
    cols = np.lib.stride_tricks.sliding_window_view(rows, k, axis=1)
    return np.tensordot(cols, kernel1d, axes=([2], [0]))


def ssim(a: Tensor, b: Tensor, window: int = SSIM_WINDOW,
         sigma: float = SSIM_SIGMA) -> float:
    aa, ba = _check_pair(a, b)
    if min(aa.shape) < window:
        raise ContractError(
            f"image {aa.shape} smaller than the {window}x{window} SSIM window")
    half = (window - 1) / 2.0
    g1 = np.exp(-((np.arange(window) - half) ** 2) / (2.0 * sigma ** 2))
    g1 = g1 / g1.sum()
    mu_a = _filter_valid(aa, g1)
    mu_b = _filter_valid(ba, g1)
    var_a = _filter_valid(aa * aa, g1) - mu_a * mu_a
    var_b = _filter_valid(ba * ba, g1) - mu_b * mu_b
    cov = _filter_valid(aa * ba, g1) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a ** 2 + mu_b ** 2 + C1) * (var_a + var_b + C2)
    return float(np.mean(num / den))


def diff_map(original: Tensor, reconstruction: Tensor) -> Tensor:
    """Doubled absolute pixel difference, clamped to the 8-bit range."""
    aa, ba = _check_pair(original, reconstruction)
    return Tensor(np.minimum(2.0 * np.abs(aa - ba), 255.0))


def anomaly_energy(dmap: Tensor, region: tuple) -> tuple:
    """(mean inside, mean outside) a (top, left, height, width) rectangle."""
    arr = _image2d(dmap)
    top, left, height, width = region
    h, w = arr.shape
    if height < 1 or width < 1 or top < 0 or left < 0 \
            or top + height > h or left + width > w:
        raise ContractError(f"region {region} degenerate for map {arr.shape}")
    if height == h and width == w:
        raise ContractError("region covers the whole map, outside is empty")
    inside_mask = np.zeros(arr.shape, dtype=bool)
    inside_mask[top:top + height, left:left + width] = True
    inside = float(arr[inside_mask].mean())
    outside = float(arr[~inside_mask].mean())
    return inside, outside


@dataclass
class PairMetrics:
    pair_id: str
    mse: float
    psnr: float
    ssim: float


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)

    def add(self, pair_id: str, a: Tensor, b: Tensor) -> PairMetrics:
        pm = PairMetrics(pair_id, mse(a, b), psnr(a, b), ssim(a, b))
        self.rows.append(pm)
        return pm

    def _agg(self, attr: str) -> tuple:
        vals = np.array([getattr(r, attr) for r in self.rows], dtype=np.float64)
        return float(vals.mean()), float(vals.std())

    def summary(self) -> dict:
        """Mean and population standard deviation per metric."""
        if not self.rows:
            raise ContractError("no metric rows to summarize")
        out = {}
        for attr in ("mse", "psnr", "ssim"):
            out[attr] = self._agg(attr)
        return out

    def write_csv(self, path) -> None:
        summary = self.summary()
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["pair_id", "mse", "psnr", "ssim"])
            for r in self.rows:
                wr.writerow([r.pair_id, repr(r.mse), repr(r.psnr), repr(r.ssim)])
            wr.writerow(["mean", repr(summary["mse"][0]),
                         repr(summary["psnr"][0]), repr(summary["ssim"][0])])
            wr.writerow(["std", repr(summary["mse"][1]),
                         repr(summary["psnr"][1]), repr(summary["ssim"][1])])
