"""Rays, samples and volume rendering of one field or two composited fields.

Camera convention: OpenCV-style camera frame (x right, y down, z forward);
``cam2world`` maps camera to world coordinates and the intrinsics are in
normalized image coordinates (principal point 0.5 = image center).  The ray
through the center of the image of an identity-pose camera points along
``(0, 0, +1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Protocol

import numpy as np
import torch

from .tensorlab import Tensor
from .triplane import MlpDecoder, TriPlane, decode_in, decode_ood, sample_triplane


# ---------------------------------------------------------------------------
# cameras and rays
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Camera:
    cam2world: np.ndarray
    intrinsics: np.ndarray

    def __post_init__(self):
        c2w = np.asarray(self.cam2world, dtype=np.float64).reshape(4, 4)
        k = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "cam2world", c2w)
        object.__setattr__(self, "intrinsics", k)
        rot = c2w[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ValueError("cam2world rotation block is not orthonormal")
        if abs(k[2, 2] - 1.0) > 1e-12:
            raise ValueError("intrinsics[2][2] must be 1")

    def pack(self) -> np.ndarray:
        """25 floats: 16 extrinsic (row-major) then 9 intrinsic."""
        return np.concatenate([self.cam2world.ravel(), self.intrinsics.ravel()])

    @classmethod
    def unpack(cls, values) -> "Camera":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (25,):
            raise ValueError(f"packed camera needs 25 floats, got {values.shape}")
        return cls(values[:16].reshape(4, 4), values[16:].reshape(3, 3))

    @property
    def position(self) -> np.ndarray:
        return self.cam2world[:3, 3]

    @classmethod
    def look_at(cls, position, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0), focal: float = 1.6) -> "Camera":
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        c2w = np.eye(4)
        c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, down, forward, position
        k = np.array([[focal, 0.0, 0.5], [0.0, focal, 0.5], [0.0, 0.0, 1.0]])
        return cls(c2w, k)

    @classmethod
    def orbit(cls, yaw_deg: float, pitch_deg: float = 0.0, radius: float = 2.7, focal: float = 1.6) -> "Camera":
        """Camera on a sphere around the origin; yaw 0 / pitch 0 sits on +z."""
        yaw, pitch = math.radians(yaw_deg), math.radians(pitch_deg)
        pos = radius * np.array([math.sin(yaw) * math.cos(pitch), math.sin(pitch), math.cos(yaw) * math.cos(pitch)])
        return cls.look_at(pos, focal=focal)


class RayBatch(NamedTuple):
    origins: Tensor  # (R, 3)
    directions: Tensor  # (R, 3), unit norm
    pixels: Tensor  # (R, 2) integer (row, col)
    height: int
    width: int


def generate_rays(camera: Camera, width: int, height: int) -> RayBatch:
    """One unit-direction ray per pixel, through the pixel center."""
    k = camera.intrinsics
    if abs(np.linalg.det(k)) < 1e-12:
        raise ValueError("intrinsics are not invertible")
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    u = (cols.ravel() + 0.5) / width
    v = (rows.ravel() + 0.5) / height
    pix = np.stack([u, v, np.ones_like(u)], axis=1)
    d_cam = pix @ np.linalg.inv(k).T
    d_world = d_cam @ camera.cam2world[:3, :3].T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    o_world = np.broadcast_to(camera.cam2world[:3, 3], d_world.shape)
    dtype = torch.get_default_dtype()
    return RayBatch(
        torch.tensor(np.ascontiguousarray(o_world), dtype=dtype),
        torch.tensor(d_world, dtype=dtype),
        torch.tensor(np.stack([rows.ravel(), cols.ravel()], axis=1)),
        height,
        width,
    )


# ---------------------------------------------------------------------------
# sampling along rays
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplingConfig:
    near: float
    far: float
    n_samples: int = 48
    jitter: bool = False
    seed: int = 0

    @classmethod
    def spanning_cube(cls, camera_distance: float, bound: float, n_samples: int = 48, **kw) -> "SamplingConfig":
        """near/far covering the cube's circumscribed sphere from the given distance."""
        r = bound * math.sqrt(3.0)
        return cls(max(camera_distance - r, 1e-3), camera_distance + r, n_samples, **kw)


class SamplePoints(NamedTuple):
    depths: Tensor  # (R, K) strictly increasing
    deltas: Tensor  # (R, K), positive
    positions: Tensor  # (R, K, 3)


def sample_depths(near: float, far: float, n_samples: int, n_rays: int = 1,
                  jitter: bool = False, seed: int = 0) -> tuple[Tensor, Tensor]:
    """Stratified depths and deltas, both ``(n_rays, K)``.

    ``delta_k = t_{k+1} - t_k``; the last sample's delta runs to the far clip.
    """
    if n_samples < 2:
        raise ValueError(f"need at least 2 samples per ray, got {n_samples}")
    if not near < far:
        raise ValueError(f"near ({near}) must be < far ({far})")
    dtype = torch.get_default_dtype()
    bins = torch.arange(n_samples, dtype=dtype)
    width = (far - near) / n_samples
    if jitter:
        gen = torch.Generator().manual_seed(int(seed))
        offset = torch.rand(n_rays, n_samples, generator=gen, dtype=dtype)
    else:
        offset = torch.full((n_rays, n_samples), 0.5, dtype=dtype)
    depths = near + (bins + offset) * width
    deltas = torch.cat([depths[:, 1:] - depths[:, :-1], far - depths[:, -1:]], dim=1)
    return depths, deltas


def sample_along_ray(rays: RayBatch, cfg: SamplingConfig) -> SamplePoints:
    depths, deltas = sample_depths(cfg.near, cfg.far, cfg.n_samples, rays.origins.shape[0], cfg.jitter, cfg.seed)
    positions = rays.origins[:, None, :] + depths[..., None] * rays.directions[:, None, :]
    return SamplePoints(depths, deltas, positions)


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

class FieldSamples(NamedTuple):
    color: Tensor  # (..., 3)
    sigma: Tensor  # (...)
    blend: Tensor | None = None  # (...), OOD fields only


class RadianceField(Protocol):
    def __call__(self, points: Tensor) -> FieldSamples: ...


def _inside(points: Tensor, bound: float) -> Tensor:
    return (points.abs() <= bound).all(dim=-1)


class InDistributionField:
    """Tri-plane + in-distribution decoder.  Density is zero outside the cube."""

    def __init__(self, triplane: TriPlane, decoder: MlpDecoder):
        self.triplane = triplane
        self.decoder = decoder

    def __call__(self, points: Tensor) -> FieldSamples:
        flat = points.reshape(-1, 3)
        idx = _inside(flat, self.triplane.bound).nonzero().squeeze(1)
        color, sigma = decode_in(sample_triplane(self.triplane, flat[idx]), self.decoder)
        full_c = flat.new_zeros(flat.shape[0], 3).index_copy(0, idx, color)
        full_s = flat.new_zeros(flat.shape[0]).index_copy(0, idx, sigma)
        lead = points.shape[:-1]
        return FieldSamples(full_c.reshape(*lead, 3), full_s.reshape(lead))


class OodField:
    """Tri-plane + OOD decoder conditioned on one frame code ``phi``."""

    def __init__(self, triplane: TriPlane, decoder: MlpDecoder, phi: Tensor):
        self.triplane = triplane
        self.decoder = decoder
        self.phi = phi

    def __call__(self, points: Tensor) -> FieldSamples:
        flat = points.reshape(-1, 3)
        idx = _inside(flat, self.triplane.bound).nonzero().squeeze(1)
        color, sigma, blend = decode_ood(sample_triplane(self.triplane, flat[idx]), self.phi, self.decoder)
        n = flat.shape[0]
        full_c = flat.new_zeros(n, 3).index_copy(0, idx, color)
        full_s = flat.new_zeros(n).index_copy(0, idx, sigma)
        full_b = flat.new_zeros(n).index_copy(0, idx, blend)
        lead = points.shape[:-1]
        return FieldSamples(full_c.reshape(*lead, 3), full_s.reshape(lead), full_b.reshape(lead))


class ConstantField:
    """Homogeneous medium; handy for analytic checks."""

    def __init__(self, color, sigma: float, blend: float | None = None):
        self.color = torch.as_tensor(color, dtype=torch.get_default_dtype())
        self.sigma = float(sigma)
        self.blend = blend

    def __call__(self, points: Tensor) -> FieldSamples:
        lead = points.shape[:-1]
        b = None if self.blend is None else torch.full(lead, float(self.blend), dtype=points.dtype)
        return FieldSamples(self.color.to(points.dtype).expand(*lead, 3),
                            torch.full(lead, self.sigma, dtype=points.dtype), b)


# ---------------------------------------------------------------------------
# volume rendering
# ---------------------------------------------------------------------------

def alpha(x: Tensor) -> Tensor:
    """1 - exp(-x)."""
    return -torch.expm1(-x)


def transmittance(optical_depth: Tensor) -> Tensor:
    """exp(-sum_{k'<k} tau_k') along the last axis."""
    acc = torch.cumsum(optical_depth, dim=-1)
    return torch.exp(-torch.cat([torch.zeros_like(acc[..., :1]), acc[..., :-1]], dim=-1))


def volume_weights(sigma: Tensor, deltas: Tensor) -> Tensor:
    tau = sigma * deltas
    return transmittance(tau) * alpha(tau)


def composite_weights(sigma_in: Tensor, sigma_ood: Tensor, blend: Tensor, deltas: Tensor) -> tuple[Tensor, Tensor]:
    """Per-sample weights of the in-distribution and OOD colors under joint transmittance."""
    t_joint = transmittance((sigma_ood + sigma_in) * deltas)
    w_ood = t_joint * (blend * alpha(sigma_ood * deltas))
    w_in = t_joint * ((1.0 - blend) * alpha(sigma_in * deltas))
    return w_in, w_ood


@dataclass
class RenderOutput:
    color: Tensor  # (H, W, 3)
    opacity: Tensor  # (H, W), total accumulated weight
    depth: Tensor | None = None  # (H, W), expected depth (unnormalized)
    blend_map: Tensor | None = None  # (H, W), sum of T^C * b * alpha^O
    opacity_in: Tensor | None = None
    opacity_ood: Tensor | None = None
    ood_color: Tensor | None = None  # (H, W, 3), OOD field alone (its own transmittance)
    blend_samples: Tensor | None = None  # (H, W, K)


def render_field(field: RadianceField, rays: RayBatch, cfg: SamplingConfig) -> RenderOutput:
    """Single-field volume rendering along every ray of the batch."""
    pts = sample_along_ray(rays, cfg)
    s = field(pts.positions)
    w = volume_weights(s.sigma, pts.deltas)
    hw = (rays.height, rays.width)
    color = (w[..., None] * s.color).sum(dim=1)
    return RenderOutput(
        color=color.reshape(*hw, 3),
        opacity=w.sum(dim=1).reshape(hw),
        depth=(w * pts.depths).sum(dim=1).reshape(hw),
    )


def render_composite(field_in: RadianceField, field_ood: RadianceField, rays: RayBatch, cfg: SamplingConfig,
                     remove_ood: bool = False, in_samples: FieldSamples | None = None) -> RenderOutput:
    """Joint rendering of the two fields sharing one set of samples.

    ``in_samples`` lets a caller reuse precomputed in-distribution samples
    when that field is frozen.  ``remove_ood`` zeroes the OOD density and
    blend weight, leaving the in-distribution field alone.
    """
    pts = sample_along_ray(rays, cfg)
    si = in_samples if in_samples is not None else field_in(pts.positions)
    if remove_ood:
        zeros = torch.zeros_like(si.sigma)
        so = FieldSamples(torch.zeros_like(si.color), zeros, zeros)
    else:
        so = field_ood(pts.positions)
    w_in, w_ood = composite_weights(si.sigma, so.sigma, so.blend, pts.deltas)
    hw = (rays.height, rays.width)
    color = (w_in[..., None] * si.color + w_ood[..., None] * so.color).sum(dim=1)
    w_alone = volume_weights(so.sigma, pts.deltas)
    ood_color = (w_alone[..., None] * so.color).sum(dim=1)
    w_total = w_in + w_ood
    return RenderOutput(
        color=color.reshape(*hw, 3),
        opacity=w_total.sum(dim=1).reshape(hw),
        depth=(w_total * pts.depths).sum(dim=1).reshape(hw),
        blend_map=w_ood.sum(dim=1).reshape(hw),
        opacity_in=w_in.sum(dim=1).reshape(hw),
        opacity_ood=w_ood.sum(dim=1).reshape(hw),
        ood_color=ood_color.reshape(*hw, 3),
        blend_samples=so.blend.reshape(*hw, -1),
    )


def render_field_chunked(field: RadianceField, rays: RayBatch, cfg: SamplingConfig, chunk: int = 8192) -> RenderOutput:
    """Render without autograd in ray chunks (large images)."""
    outs = []
    with torch.no_grad():
        for start in range(0, rays.origins.shape[0], chunk):
            sub = RayBatch(rays.origins[start:start + chunk], rays.directions[start:start + chunk],
                           rays.pixels[start:start + chunk], 1, min(chunk, rays.origins.shape[0] - start))
            outs.append(render_field(field, sub, cfg))
    hw = (rays.height, rays.width)
    return RenderOutput(
        color=torch.cat([o.color.reshape(-1, 3) for o in outs]).reshape(*hw, 3),
        opacity=torch.cat([o.opacity.reshape(-1) for o in outs]).reshape(hw),
        depth=torch.cat([o.depth.reshape(-1) for o in outs]).reshape(hw),
    )
