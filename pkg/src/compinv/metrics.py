"""PSNR, SSIM and L2 with optional region masks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

PSNR_CAP = 99.0
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def _as_np(img) -> np.ndarray:
    if hasattr(img, "detach"):
        img = img.detach().cpu().numpy()
    return np.asarray(img, dtype=np.float64)


def _check(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")


def l2(x, y, mask=None) -> float:
    """Mean squared error, averaged over channels and the pixels selected by ``mask``."""
    x, y = _as_np(x), _as_np(y)
    _check(x, y)
    err = (x - y) ** 2
    if err.ndim == 3:
        err = err.mean(axis=-1)
    if mask is None:
        return float(err.mean())
    m = _as_np(mask) > 0.5
    if not m.any():
        return float("nan")
    return float(err[m].mean())


def psnr_from_mse(mse: float) -> float:
    if math.isnan(mse):
        return float("nan")
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def psnr(x, y, mask=None) -> float:
    return psnr_from_mse(l2(x, y, mask))


def ssim(x, y, mask=None) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), per channel.

    With ``mask`` the SSIM map is averaged over the selected pixels only.
    """
    x, y = _as_np(x), _as_np(y)
    _check(x, y)
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    # truncate=3.5 gives radius 5, i.e. an 11-tap window
    blur = lambda a: gaussian_filter(a, sigma=1.5, truncate=3.5, mode="reflect")  # noqa: E731
    maps = []
    for c in range(x.shape[-1]):
        a, b = x[..., c], y[..., c]
        mu_a, mu_b = blur(a), blur(b)
        var_a = blur(a * a) - mu_a ** 2
        var_b = blur(b * b) - mu_b ** 2
        cov = blur(a * b) - mu_a * mu_b
        num = (2 * mu_a * mu_b + _SSIM_C1) * (2 * cov + _SSIM_C2)
        den = (mu_a ** 2 + mu_b ** 2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
        maps.append(num / den)
    smap = np.mean(maps, axis=0)
    if mask is None:
        return float(smap.mean())
    m = _as_np(mask) > 0.5
    return float(smap[m].mean()) if m.any() else float("nan")


@dataclass
class MetricsRow:
    frame: int
    psnr: float
    ssim: float
    l2: float
    psnr_masked: float
    psnr_unmasked: float

    HEADER = ("frame", "psnr", "ssim", "l2", "psnr_masked", "psnr_unmasked")

    def csv(self) -> str:
        vals = [self.psnr, self.ssim, self.l2, self.psnr_masked, self.psnr_unmasked]
        return ",".join([str(self.frame), *("%.17g" % v for v in vals)])


def compute_psnr_ssim(x, y, mask=None, frame: int = 0) -> MetricsRow:
    """Full-image metrics plus PSNR inside (mask = 1) and outside the mask."""
    full = l2(x, y)
    if mask is None:
        inside = outside = float("nan")
    else:
        m = _as_np(mask)
        inside = psnr(x, y, m)
        outside = psnr(x, y, 1.0 - m)
    return MetricsRow(frame, psnr_from_mse(full), ssim(x, y), full, inside, outside)


def write_report(path, rows: list[MetricsRow]) -> None:
    lines = [",".join(MetricsRow.HEADER)] + [r.csv() for r in rows]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
