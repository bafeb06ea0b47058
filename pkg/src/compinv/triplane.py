"""Tri-plane features and the MLP decoders that turn them into radiance.

Plane orientation (fixed, checkpoints depend on it): the XY plane is indexed
by (x, y), XZ by (x, z) and YZ by (y, z).  Each axis maps the cube
``[-bound, bound]`` linearly onto texel coordinates ``[0, R-1]``, so the
corner texels sit exactly on the cube faces.  Points outside the cube read
the boundary texels.

Internally the planes are stored as one ``(3, C, R, R)`` tensor in the
layout ``grid_sample`` expects: ``planes[p, c, j, i]`` where ``i`` indexes
the plane's first axis and ``j`` its second.  Serialized planes use the
``(R, R, C)`` layout ``[i, j, c]``.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .tensorlab import ShapeError, Tensor, density_activation

PLANE_NAMES = ("xy", "xz", "yz")
PLANE_AXES = ((0, 1), (0, 2), (1, 2))

IN_HEAD = "in"
OOD_HEAD = "ood"
_HEAD_WIDTH = {IN_HEAD: 4, OOD_HEAD: 5}


class TriPlane:
    """Three axis-aligned ``R x R x C`` feature grids spanning ``[-bound, bound]^3``."""

    def __init__(self, planes: Tensor, bound: float = 1.0):
        if planes.dim() != 4 or planes.shape[0] != 3 or planes.shape[2] != planes.shape[3]:
            raise ShapeError(f"tri-plane tensor must be (3, C, R, R), got {tuple(planes.shape)}")
        if bound <= 0:
            raise ValueError(f"bound must be positive, got {bound}")
        self.planes = planes
        self.bound = float(bound)

    @property
    def resolution(self) -> int:
        return self.planes.shape[-1]

    @property
    def channels(self) -> int:
        return self.planes.shape[1]

    @classmethod
    def zeros(cls, resolution: int = 64, channels: int = 16, bound: float = 1.0) -> "TriPlane":
        return cls(torch.zeros(3, channels, resolution, resolution), bound)

    @classmethod
    def random(cls, resolution: int = 64, channels: int = 16, bound: float = 1.0,
               std: float = 0.1, generator: torch.Generator | None = None) -> "TriPlane":
        planes = torch.randn(3, channels, resolution, resolution, generator=generator) * std
        return cls(planes.requires_grad_(True), bound)

    def parameters(self) -> list[Tensor]:
        return [self.planes]

    def state_dict(self, prefix: str = "triplane") -> dict[str, np.ndarray]:
        data = self.planes.detach().cpu().numpy()
        return {f"{prefix}.{name}": np.ascontiguousarray(data[k].transpose(2, 1, 0))
                for k, name in enumerate(PLANE_NAMES)}

    @classmethod
    def from_state_dict(cls, entries, bound: float, prefix: str = "triplane",
                        requires_grad: bool = False) -> "TriPlane":
        stacked = np.stack([np.asarray(entries[f"{prefix}.{n}"]).transpose(2, 1, 0) for n in PLANE_NAMES])
        planes = torch.tensor(stacked, dtype=torch.get_default_dtype())
        return cls(planes.requires_grad_(requires_grad), bound)


def plane_coords(x: Tensor, bound: float) -> Tensor:
    """Project points ``(P, 3)`` to ``(3, P, 1, 2)`` normalized plane coordinates."""
    n = (x / bound).clamp(-1.0, 1.0)
    return torch.stack([n[:, list(ax)] for ax in PLANE_AXES]).unsqueeze(2)


def sample_triplane(tp: TriPlane, x: Tensor) -> Tensor:
    """Sum of the three bilinear plane reads at points ``x`` (``(..., 3)`` -> ``(..., C)``)."""
    lead = x.shape[:-1]
    pts = x.reshape(-1, 3)
    grid = plane_coords(pts, tp.bound).to(tp.planes.dtype)
    feats = F.grid_sample(tp.planes, grid, mode="bilinear", padding_mode="border", align_corners=True)
    # (3, C, P, 1) -> (P, C)
    return feats.sum(0)[..., 0].transpose(0, 1).reshape(*lead, tp.channels)


class MlpDecoder(nn.Module):
    """Softplus MLP; the head decides the output layout.

    ``in`` head: color (sigmoid, 3) and density (softplus, 1).
    ``ood`` head: color, density and blend weight (sigmoid, 1).
    """

    def __init__(self, in_features: int, hidden: Sequence[int] = (64, 64), head: str = IN_HEAD):
        super().__init__()
        if head not in _HEAD_WIDTH:
            raise ValueError(f"unknown head {head!r}")
        self.head = head
        self.in_features = in_features
        widths = [in_features, *hidden, _HEAD_WIDTH[head]]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].in_features] + [layer.out_features for layer in self.layers]

    def init_normal(self, std: float = 0.1, generator: torch.Generator | None = None) -> "MlpDecoder":
        with torch.no_grad():
            for layer in self.layers:
                layer.weight.copy_(torch.randn(layer.weight.shape, generator=generator) * std)
                layer.bias.copy_(torch.randn(layer.bias.shape, generator=generator) * std)
        return self

    def zero_(self) -> "MlpDecoder":
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self

    def forward(self, h: Tensor) -> Tensor:
        if h.shape[-1] != self.in_features:
            raise ShapeError(f"decoder expects input width {self.in_features}, got {h.shape[-1]}")
        for layer in self.layers[:-1]:
            h = F.softplus(layer(h))
        return self.layers[-1](h)

    def state_entries(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.{k}": v.detach().cpu().numpy() for k, v in self.state_dict().items()}

    def load_entries(self, entries, prefix: str) -> "MlpDecoder":
        dtype = next(self.parameters()).dtype
        state = {k: torch.tensor(np.asarray(entries[f"{prefix}.{k}"]), dtype=dtype) for k in self.state_dict()}
        self.load_state_dict(state)
        return self


def decode_in(feature: Tensor, decoder: MlpDecoder) -> tuple[Tensor, Tensor]:
    if decoder.head != IN_HEAD:
        raise ValueError("decode_in needs an in-distribution decoder")
    out = decoder(feature)
    return torch.sigmoid(out[..., :3]), density_activation(out[..., 3])


def decode_ood(feature: Tensor, phi: Tensor, decoder: MlpDecoder) -> tuple[Tensor, Tensor, Tensor]:
    if decoder.head != OOD_HEAD:
        raise ValueError("decode_ood needs an out-of-distribution decoder")
    phi = phi.expand(*feature.shape[:-1], phi.shape[-1])
    out = decoder(torch.cat([feature, phi], dim=-1))
    return torch.sigmoid(out[..., :3]), density_activation(out[..., 3]), torch.sigmoid(out[..., 4])


class OodLatent:
    """Per-frame latent vectors; each frame gets its own leaf tensor."""

    def __init__(self, codes: Sequence[Tensor]):
        dims = {c.shape for c in codes}
        if len(dims) > 1:
            raise ShapeError(f"all frame codes must share one shape, got {sorted(map(tuple, dims))}")
        self.codes = list(codes)

    @classmethod
    def random(cls, n_frames: int, dim: int = 32, std: float = 1.0,
               generator: torch.Generator | None = None) -> "OodLatent":
        return cls([(torch.randn(dim, generator=generator) * std).requires_grad_(True) for _ in range(n_frames)])

    @property
    def dim(self) -> int:
        return self.codes[0].shape[0]

    def __len__(self) -> int:
        return len(self.codes)

    def __getitem__(self, t: int) -> Tensor:
        return self.codes[t]

    def parameters(self) -> list[Tensor]:
        return list(self.codes)

    def state_entries(self, prefix: str = "phi") -> dict[str, np.ndarray]:
        return {f"{prefix}.{t}": c.detach().cpu().numpy() for t, c in enumerate(self.codes)}

    @classmethod
    def from_entries(cls, entries, n_frames: int, prefix: str = "phi", requires_grad: bool = False) -> "OodLatent":
        dtype = torch.get_default_dtype()
        return cls([torch.tensor(np.asarray(entries[f"{prefix}.{t}"]), dtype=dtype).requires_grad_(requires_grad)
                    for t in range(n_frames)])
