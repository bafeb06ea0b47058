"""Reconstruction losses and blend-weight regularizers.

Images are ``(H, W, 3)`` tensors in [0, 1].  Masks are ``(H, W)`` with 1
marking OOD pixels (``M``); the in-distribution mask is ``1 - M``.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .tensorlab import Tensor


class EmptyMaskError(ValueError):
    """Raised when a masked loss has no pixels to average over."""


def masked_l2(x: Tensor, x_hat: Tensor, m: Tensor) -> Tensor:
    """Sum of channel-averaged squared residuals over ``m``, divided by ``||m||_1``."""
    if x.shape != x_hat.shape:
        raise ValueError(f"image shapes differ: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    m = m.to(x.dtype)
    total = m.sum()
    if float(total) <= 0:
        raise EmptyMaskError("mask selects no pixels")
    per_pixel = (x - x_hat).square().mean(dim=-1)
    return (m * per_pixel).sum() / total


def mse(x: Tensor, x_hat: Tensor) -> Tensor:
    return (x - x_hat).square().mean()


class PerceptualProxy:
    """Frozen random-filter stand-in for LPIPS.

    Two scales (full and 2x average-pooled); each applies its own bank of
    ``n_filters`` random 3x3 filters.  Channel responses are softly unit
    normalized per pixel, ``f / sqrt(|f|^2 + eps)``, and compared with a
    squared L2 distance averaged over pixels.  A mask restricts the average
    to features whose whole receptive field lies inside it.
    """

    def __init__(self, seed: int = 0, n_filters: int = 16, kernel: int = 3, eps: float = 0.1):
        gen = torch.Generator().manual_seed(int(seed))
        self.kernel = kernel
        self.eps = eps
        fan_in = 3 * kernel * kernel
        self._filters = [torch.randn(n_filters, 3, kernel, kernel, generator=gen, dtype=torch.float64) / fan_in ** 0.5
                         for _ in range(2)]

    @property
    def filters(self) -> list[Tensor]:
        return [f.clone() for f in self._filters]

    def _features(self, img: Tensor, scale: int) -> Tensor:
        x = img.permute(2, 0, 1).unsqueeze(0)
        if scale:
            x = F.avg_pool2d(x, 2)
        pad = self.kernel // 2
        x = F.pad(x, (pad, pad, pad, pad), mode="replicate")
        f = F.conv2d(x, self._filters[scale].to(img.dtype))[0]
        return f / torch.sqrt(f.square().sum(dim=0, keepdim=True) + self.eps)

    def _weights(self, m: Tensor, scale: int) -> Tensor:
        w = m.to(torch.get_default_dtype())[None, None]
        if scale:
            w = -F.max_pool2d(-w, 2)
        pad = self.kernel // 2
        w = -F.max_pool2d(F.pad(-w, (pad, pad, pad, pad), value=-1.0), self.kernel, stride=1)
        return w[0, 0]

    def __call__(self, x: Tensor, x_hat: Tensor, m: Tensor | None = None) -> Tensor:
        if x.shape != x_hat.shape:
            raise ValueError(f"image shapes differ: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
        total = x.new_zeros(())
        for scale in (0, 1):
            d = (self._features(x, scale) - self._features(x_hat, scale)).square().sum(dim=0)
            if m is None:
                total = total + d.mean()
            else:
                w = self._weights(m, scale).to(d.dtype)
                total = total + (w * d).sum() / w.sum().clamp_min(1e-12)
        return total


def perceptual_proxy_loss(x: Tensor, x_hat: Tensor, m: Tensor | None = None,
                          proxy: PerceptualProxy | None = None) -> Tensor:
    return (proxy or _default_proxy())(x, x_hat, m)


_PROXY: PerceptualProxy | None = None


def _default_proxy() -> PerceptualProxy:
    global _PROXY
    if _PROXY is None:
        _PROXY = PerceptualProxy(seed=0)
    return _PROXY


def latent_delta_reg(w: Tensor) -> Tensor:
    """Sum over rows i >= 1 of ``||w_i - w_0||^2`` for an ``(L, D)`` latent."""
    return (w[1:] - w[:1]).square().sum()


def blend_sparsity(b: Tensor, ood_mask: Tensor | None = None) -> Tensor:
    """Sum of |b| over the samples of rays outside the OOD mask.

    ``b`` is ``(H, W, K)``; ``ood_mask`` is ``(H, W)`` with 1 = OOD pixel.
    """
    if ood_mask is None:
        return b.abs().sum()
    keep = (ood_mask != 1).to(b.dtype)
    return (keep[..., None] * b.abs()).sum()


def binary_entropy(b: Tensor, eps: float = 0.0) -> Tensor:
    """Elementwise -(b ln b + (1-b) ln(1-b)) with 0 ln 0 = 0."""
    if eps:
        b = b.clamp(eps, 1.0 - eps)
    return -(torch.xlogy(b, b) + torch.xlogy(1.0 - b, 1.0 - b))


def blend_entropy(b: Tensor, eps: float = 0.0) -> Tensor:
    return binary_entropy(b, eps).sum()


def sr_loss(x_hi: Tensor, x_hat_hi: Tensor, proxy: PerceptualProxy | None = None) -> Tensor:
    """Unmasked MSE plus the unmasked perceptual proxy (weight 1)."""
    ones = torch.ones(x_hi.shape[:2], dtype=x_hi.dtype)
    return masked_l2(x_hi, x_hat_hi, ones) + perceptual_proxy_loss(x_hi, x_hat_hi, None, proxy)
