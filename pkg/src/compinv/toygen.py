"""Toy stand-in for a pretrained 3D-aware generator.

A latent code ``w`` (``L x D``) decodes linearly into the parameters of a
soft ellipsoid ("the face"); the analytic radiance field of that ellipsoid
is the ground truth.  A small learned generator maps ``w`` to a tri-plane
plus an in-distribution decoder and is fitted to the analytic family once
("pretraining"), then frozen.  Occluders (box or torus on a per-frame rigid
trajectory) play the out-of-distribution objects, and ``generate_dataset``
renders multi-view frame sequences with masks, clean plates and cameras.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import images
from .renderer import (Camera, FieldSamples, InDistributionField, SamplingConfig, generate_rays, render_field,
                       render_field_chunked)
from .tensorlab import (Tensor, adam_step, AdamState, backward, content_hash, decode_text, encode_text,
                        load_container, save_container, use_precision, zero_grad)
from .triplane import IN_HEAD, MlpDecoder, TriPlane

log = logging.getLogger(__name__)

LATENT_ROWS = 4
LATENT_DIM = 16

# semantic parameter layout of a decoded latent
PARAM_GROUPS = {
    "center": slice(0, 3),
    "radii": slice(3, 6),
    "color": slice(6, 9),
    "gradient": slice(9, 10),
}
N_PARAMS = 10
PARAM_BASE = np.array([0.0, 0.0, 0.0, 0.42, 0.52, 0.40, 0.72, 0.50, 0.40, 0.20])
PARAM_SCALE = np.array([0.05, 0.05, 0.03, 0.05, 0.05, 0.04, 0.10, 0.10, 0.10, 0.10])
MIN_RADIUS = 0.05
LATENT_MAP_SEED = 20240607

SIGMA_MAX = 25.0
SURFACE_SOFTNESS = 0.1  # tau in sigma_max * sigmoid((1 - q) / tau)


# ---------------------------------------------------------------------------
# latent -> scene parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneParams:
    center: np.ndarray
    radii: np.ndarray
    color: np.ndarray
    gradient: float

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.center, self.radii, self.color, [self.gradient]])


class LatentMap:
    """Fixed linear map ``flat(w) -> scene parameters``.

    ``params = base + diag(scale) @ Q @ flat(w)`` with ``Q`` having orthonormal
    rows, so each semantic group owns its own latent subspace.  Radii are
    clamped to stay positive; nothing else is nonlinear.
    """

    def __init__(self, rows: int = LATENT_ROWS, dim: int = LATENT_DIM, seed: int = LATENT_MAP_SEED):
        if rows * dim < N_PARAMS:
            raise ValueError(f"latent too small: {rows}x{dim} < {N_PARAMS} parameters")
        self.rows, self.dim = rows, dim
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((rows * dim, N_PARAMS)))
        self.basis = q.T.copy()  # (N_PARAMS, rows*dim), orthonormal rows
        self.matrix = PARAM_SCALE[:, None] * self.basis

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.dim

    def linear(self, w) -> np.ndarray:
        w = np.asarray(w.detach().cpu() if isinstance(w, Tensor) else w, dtype=np.float64)
        return PARAM_BASE + self.matrix @ w.reshape(-1)

    def decode(self, w) -> SceneParams:
        p = self.linear(w)
        return SceneParams(
            center=p[PARAM_GROUPS["center"]].copy(),
            radii=np.maximum(p[PARAM_GROUPS["radii"]], MIN_RADIUS),
            color=p[PARAM_GROUPS["color"]].copy(),
            gradient=float(p[9]),
        )

    def direction(self, name: str) -> np.ndarray:
        """Unit latent direction (``L x D``) moving one semantic attribute."""
        b = self.basis
        dirs = {
            "radius": b[3] + b[4] + b[5],
            "color": b[6] - b[8],  # warmer: more red, less blue
            "center_x": b[0],
            "center_y": b[1],
            "gradient": b[9],
        }
        if name not in dirs:
            raise KeyError(f"unknown direction {name!r}; available: {', '.join(sorted(dirs))}")
        d = dirs[name]
        return (d / np.linalg.norm(d)).reshape(self.rows, self.dim)

    @staticmethod
    def direction_names() -> list[str]:
        return ["center_x", "center_y", "color", "gradient", "radius"]


# ---------------------------------------------------------------------------
# analytic fields
# ---------------------------------------------------------------------------

def analytic_field(scene: SceneParams, x: Tensor, sigma_max: float = SIGMA_MAX,
                   tau: float = SURFACE_SOFTNESS) -> tuple[Tensor, Tensor]:
    """Soft ellipsoid: density ``sigma_max * sigmoid((1 - q) / tau)``.

    ``q`` is the ellipsoid quadratic form; color is the base color shifted
    linearly along world +y by the gradient strength, clipped to [0, 1].
    """
    dt = x.dtype
    c = torch.as_tensor(scene.center, dtype=dt)
    r = torch.as_tensor(scene.radii, dtype=dt)
    q = ((x - c) / r).square().sum(dim=-1)
    sigma = sigma_max * torch.sigmoid((1.0 - q) / tau)
    base = torch.as_tensor(scene.color, dtype=dt)
    color = (base + scene.gradient * x[..., 1:2]).clamp(0.0, 1.0)
    return color, sigma


class AnalyticSceneField:
    def __init__(self, scene: SceneParams):
        self.scene = scene

    def __call__(self, points: Tensor) -> FieldSamples:
        color, sigma = analytic_field(self.scene, points)
        return FieldSamples(color, sigma)


@dataclass(frozen=True)
class OccluderParams:
    kind: str = "box"
    size: tuple = (0.16, 0.16, 0.07)  # box half extents, or (major, minor) torus radii
    color: tuple = (0.15, 0.35, 0.85)
    softness: float = 0.015
    sigma_max: float = 60.0
    center: tuple = (0.12, -0.05, 0.62)
    orbit_radius: float = 0.14
    cycles: float = 1.0
    spin: float = 0.5  # rotation about z, in turns per orbit
    n_frames: int = 20

    def pose(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        if not 0 <= t < self.n_frames:
            raise IndexError(f"frame {t} out of range [0, {self.n_frames})")
        theta = 2.0 * math.pi * self.cycles * t / self.n_frames
        center = np.asarray(self.center, dtype=np.float64) + self.orbit_radius * np.array(
            [math.cos(theta), math.sin(theta), 0.0])
        a = theta * self.spin
        rot = np.array([[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0], [0.0, 0.0, 1.0]])
        return center, rot


def occluder_sdf(occ: OccluderParams, p: Tensor) -> Tensor:
    if occ.kind == "box":
        q = p.abs() - torch.as_tensor(occ.size, dtype=p.dtype)
        return q.clamp_min(0.0).norm(dim=-1) + q.max(dim=-1).values.clamp_max(0.0)
    if occ.kind == "torus":
        major, minor = occ.size[0], occ.size[1]
        ring = torch.stack([p[..., :2].norm(dim=-1) - major, p[..., 2]], dim=-1)
        return ring.norm(dim=-1) - minor
    raise ValueError(f"unknown occluder kind {occ.kind!r}")


def analytic_occluder(occ: OccluderParams, t: int, x: Tensor) -> tuple[Tensor, Tensor]:
    """Rigidly posed occluder at frame ``t``: soft SDF density, solid color."""
    center, rot = occ.pose(t)
    local = (x - torch.as_tensor(center, dtype=x.dtype)) @ torch.as_tensor(rot, dtype=x.dtype)
    sigma = occ.sigma_max * torch.sigmoid(-occluder_sdf(occ, local) / occ.softness)
    color = torch.as_tensor(occ.color, dtype=x.dtype).expand(*x.shape[:-1], 3)
    return color, sigma


class AnalyticOccluderField:
    def __init__(self, occ: OccluderParams, t: int):
        occ.pose(t)
        self.occ, self.t = occ, t

    def __call__(self, points: Tensor) -> FieldSamples:
        color, sigma = analytic_occluder(self.occ, self.t, points)
        return FieldSamples(color, sigma)


class MixtureField:
    """Two media in the same space: densities add, colors mix by density."""

    def __init__(self, *fields):
        self.fields = fields

    def __call__(self, points: Tensor) -> FieldSamples:
        parts = [f(points) for f in self.fields]
        sigma = sum(p.sigma for p in parts)
        color = sum(p.sigma[..., None] * p.color for p in parts) / sigma.clamp_min(1e-12)[..., None]
        return FieldSamples(color, sigma)


# ---------------------------------------------------------------------------
# learned generator
# ---------------------------------------------------------------------------

class TriplaneGenerator(nn.Module):
    """Latent -> tri-plane map.

    A softplus MLP turns ``flat(w)`` into ``n_basis`` coefficients that mix
    learned basis tri-planes (plus a constant tri-plane).  Basis planes start
    as random low-order polynomials in the plane coordinates.
    """

    def __init__(self, latent_size: int, resolution: int = 32, channels: int = 16,
                 n_basis: int = 16, hidden: int = 64):
        super().__init__()
        self.resolution, self.channels = resolution, channels
        self.coeff = nn.ModuleList([nn.Linear(latent_size, hidden), nn.Linear(hidden, hidden),
                                    nn.Linear(hidden, n_basis)])
        size = 3 * channels * resolution * resolution
        self.basis = nn.Parameter(torch.zeros(n_basis, size))
        self.const = nn.Parameter(torch.zeros(size))

    def init_parameters(self, gen: torch.Generator) -> None:
        with torch.no_grad():
            for layer in self.coeff:
                layer.weight.copy_(torch.randn(layer.weight.shape, generator=gen) / layer.weight.shape[1] ** 0.5)
                layer.bias.zero_()
            r = self.resolution
            lin = torch.linspace(-1.0, 1.0, r, dtype=torch.float64)
            v, u = torch.meshgrid(lin, lin, indexing="ij")
            poly = torch.stack([torch.ones_like(u), u, v, u * u, v * v, u * v]).reshape(6, -1)
            n_basis = self.basis.shape[0]
            mix = torch.randn(n_basis, 3 * self.channels, 6, generator=gen, dtype=torch.float64) * 0.3
            self.basis.copy_((mix @ poly).reshape(n_basis, -1))
            self.const.zero_()

    def forward(self, w: Tensor) -> Tensor:
        h = w.reshape(-1).to(self.basis.dtype)
        for layer in self.coeff[:-1]:
            h = F.softplus(layer(h))
        h = self.coeff[-1](h)
        r = self.resolution
        return (self.const + h @ self.basis).reshape(3, self.channels, r, r)


@dataclass
class PretrainConfig:
    seed: int = 0
    latent_rows: int = LATENT_ROWS
    latent_dim: int = LATENT_DIM
    resolution: int = 32
    channels: int = 16
    n_basis: int = 16
    coeff_hidden: int = 64
    decoder_hidden: tuple = (64, 64)
    bound: float = 1.0
    point_iters: int = 2500
    render_iters: int = 200
    batch_latents: int = 4
    points_per_latent: int = 4096
    render_resolution: int = 32
    n_samples: int = 48
    camera_distance: float = 2.7
    focal: float = 1.6
    lr: float = 2e-3
    patience: int = 400
    precision: str = "float32"

    def dump(self) -> str:
        return _dump_kv(dataclasses.asdict(self))

    @classmethod
    def parse(cls, text: str) -> "PretrainConfig":
        return _parse_kv(text, cls)


class DivergenceError(RuntimeError):
    pass


class ToyGenerator:
    """Frozen prior: latent map + tri-plane generator + in-distribution decoder."""

    def __init__(self, cfg: PretrainConfig):
        self.cfg = cfg
        self.latent_map = LatentMap(cfg.latent_rows, cfg.latent_dim)
        self.generator = TriplaneGenerator(cfg.latent_rows * cfg.latent_dim, cfg.resolution, cfg.channels,
                                           cfg.n_basis, cfg.coeff_hidden)
        self.decoder = MlpDecoder(cfg.channels, cfg.decoder_hidden, IN_HEAD)

    @property
    def latent_shape(self) -> tuple[int, int]:
        return self.cfg.latent_rows, self.cfg.latent_dim

    @property
    def bound(self) -> float:
        return self.cfg.bound

    def parameters(self) -> list[Tensor]:
        return [*self.generator.parameters(), *self.decoder.parameters()]

    def freeze(self) -> "ToyGenerator":
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def to(self, dtype: torch.dtype) -> "ToyGenerator":
        self.generator.to(dtype)
        self.decoder.to(dtype)
        return self

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.parameters())).dtype

    def cast(self, dtype: torch.dtype) -> "ToyGenerator":
        """Frozen generator in ``dtype``; a copy unless it already matches."""
        if self.dtype == dtype:
            return self.freeze()
        return copy.deepcopy(self).to(dtype).freeze()

    def triplane(self, w: Tensor) -> TriPlane:
        return TriPlane(self.generator(w), self.bound)

    def field(self, w: Tensor) -> InDistributionField:
        return InDistributionField(self.triplane(w), self.decoder)

    def mean_latent(self) -> Tensor:
        """Mean of the training latent distribution (standard normal)."""
        return torch.zeros(self.latent_shape)

    def sampling(self, n_samples: int | None = None) -> SamplingConfig:
        return SamplingConfig.spanning_cube(self.cfg.camera_distance, self.bound, n_samples or self.cfg.n_samples)

    # -- persistence -------------------------------------------------------
    def state_entries(self) -> dict[str, np.ndarray]:
        entries: dict[str, np.ndarray] = {"meta.kind": encode_text("generator"),
                                          "meta.config": encode_text(_dump_kv(dataclasses.asdict(self.cfg)))}
        entries["scene.latent_map"] = self.latent_map.matrix
        entries.update({f"generator.{k}": v.detach().cpu().numpy() for k, v in self.generator.state_dict().items()})
        entries.update(self.decoder.state_entries("decoder_in"))
        return entries

    def content_hash(self) -> str:
        return content_hash(self.state_entries())

    def save(self, path) -> Path:
        return save_container(path, self.state_entries())

    @classmethod
    def load(cls, path) -> "ToyGenerator":
        entries = load_container(path)
        if decode_text(entries.get("meta.kind", encode_text(""))) != "generator":
            raise ValueError(f"{path}: not a generator checkpoint")
        cfg = _parse_kv(decode_text(entries["meta.config"]), PretrainConfig)
        # keep the stored precision so the content hash matches the file
        keys = list(cls(cfg).generator.state_dict())
        dtype = torch.from_numpy(np.asarray(entries[f"generator.{keys[0]}"])[:0]).dtype
        with use_precision(dtype):
            gen = cls(cfg)
            gen.to(dtype)
            state = {k: torch.tensor(np.asarray(entries[f"generator.{k}"]), dtype=dtype) for k in keys}
            gen.generator.load_state_dict(state)
            gen.decoder.load_entries(entries, "decoder_in")
        if not np.array_equal(entries["scene.latent_map"], gen.latent_map.matrix):
            raise ValueError(f"{path}: latent map does not match this build")
        return gen.freeze()


def _surface_points(scene: SceneParams, n: int, gen: torch.Generator, spread: float = 0.2) -> Tensor:
    u = torch.randn(n, 3, generator=gen)
    u = u / u.norm(dim=1, keepdim=True)
    scale = 1.0 + spread * torch.randn(n, 1, generator=gen)
    dt = torch.get_default_dtype()
    return torch.as_tensor(scene.center, dtype=dt) + u.to(dt) * scale.to(dt) * torch.as_tensor(scene.radii, dtype=dt)


def _random_camera(gen: torch.Generator, distance: float, focal: float) -> Camera:
    yaw = float(torch.rand((), generator=gen)) * 70.0 - 35.0
    pitch = float(torch.rand((), generator=gen)) * 30.0 - 15.0
    return Camera.orbit(yaw, pitch, distance, focal)


def pretrain_generator(cfg: PretrainConfig | None = None, out: str | os.PathLike | None = None,
                       progress: bool = False) -> ToyGenerator:
    """Fit the generator to the analytic family and freeze it.

    Phase one regresses density and color at random 3D points (half of them
    near the ellipsoid surface); phase two matches low-resolution renders
    from random cameras.  Raises ``DivergenceError`` if the loss stops
    improving for ``patience`` iterations or becomes non-finite.
    """
    cfg = cfg or PretrainConfig()
    with use_precision(cfg.precision):
        torch.manual_seed(cfg.seed)
        gen = torch.Generator().manual_seed(cfg.seed)
        model = ToyGenerator(cfg)
        model.generator.init_parameters(gen)
        with torch.no_grad():
            for layer in model.decoder.layers:
                layer.weight.copy_(torch.randn(layer.weight.shape, generator=gen) / layer.weight.shape[1] ** 0.5)
                layer.bias.zero_()
        params = model.parameters()
        state = AdamState.for_params(params, lr=cfg.lr)
        lmap = model.latent_map
        shape = model.latent_shape
        best, since_best = math.inf, 0
        total_iters = cfg.point_iters + cfg.render_iters
        for it in range(total_iters):
            state.lr = cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + math.cos(math.pi * it / total_iters)))
            zero_grad(params)
            loss = torch.zeros(())
            if it < cfg.point_iters:
                for _ in range(cfg.batch_latents):
                    w = torch.randn(shape, generator=gen)
                    scene = lmap.decode(w)
                    half = cfg.points_per_latent // 2
                    pts = torch.cat([(torch.rand(half, 3, generator=gen) * 2 - 1) * cfg.bound,
                                     _surface_points(scene, cfg.points_per_latent - half, gen)])
                    pts = pts.clamp(-cfg.bound, cfg.bound)
                    tc, ts = analytic_field(scene, pts)
                    field = model.field(w)
                    s = field(pts)
                    wgt = ts / SIGMA_MAX
                    loss = loss + ((s.sigma - ts) / SIGMA_MAX).square().mean() \
                        + ((wgt + 0.02)[:, None] * (s.color - tc).square()).mean()
                loss = loss / cfg.batch_latents
            else:
                for _ in range(max(1, cfg.batch_latents // 2)):
                    w = torch.randn(shape, generator=gen)
                    cam = _random_camera(gen, cfg.camera_distance, cfg.focal)
                    rays = generate_rays(cam, cfg.render_resolution, cfg.render_resolution)
                    sampling = model.sampling()
                    with torch.no_grad():
                        target = render_field(AnalyticSceneField(lmap.decode(w)), rays, sampling).color
                    pred = render_field(model.field(w), rays, sampling).color
                    loss = loss + (pred - target).square().mean()
            value = float(loss.detach())
            if not math.isfinite(value):
                raise DivergenceError(f"pretraining loss became non-finite at iteration {it}")
            backward(loss)
            adam_step(params, state)
            if it == cfg.point_iters:
                best, since_best = math.inf, 0
            if value < best * 0.999:
                best, since_best = value, 0
            else:
                since_best += 1
                if since_best > cfg.patience:
                    raise DivergenceError(f"pretraining loss stalled: best {best:.3e}, "
                                          f"no improvement for {cfg.patience} iterations (at {it})")
            if progress and it % 100 == 0:
                log.info("pretrain it %d loss %.4e", it, value)
        model.freeze()
        if out is not None:
            model.save(out)
    return model


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

@dataclass
class DatasetConfig:
    n_frames: int = 20
    resolution: int = 64
    sr_factor: int = 2
    n_samples: int = 48
    seed: int = 0
    latent_rows: int = LATENT_ROWS
    latent_dim: int = LATENT_DIM
    template_std: float = 0.8
    residual_std: float = 0.3
    yaw_range: float = 20.0
    pitch_amplitude: float = 5.0
    camera_distance: float = 2.7
    focal: float = 1.6
    bound: float = 1.0
    occluder: str = "box"  # box, torus or none
    occluder_size: tuple = (0.16, 0.16, 0.07)
    occluder_color: tuple = (0.15, 0.35, 0.85)
    occluder_center: tuple = (0.12, -0.05, 0.62)
    occluder_orbit: float = 0.14
    occluder_cycles: float = 1.0
    occluder_spin: float = 0.5
    occluder_softness: float = 0.015

    def occluder_params(self) -> OccluderParams | None:
        if self.occluder == "none":
            return None
        return OccluderParams(kind=self.occluder, size=tuple(self.occluder_size), color=tuple(self.occluder_color),
                              softness=self.occluder_softness, center=tuple(self.occluder_center),
                              orbit_radius=self.occluder_orbit, cycles=self.occluder_cycles,
                              spin=self.occluder_spin, n_frames=self.n_frames)

    def sampling(self) -> SamplingConfig:
        return SamplingConfig.spanning_cube(self.camera_distance, self.bound, self.n_samples)

    def camera(self, t: int) -> Camera:
        n = self.n_frames
        yaw = 0.0 if n == 1 else -self.yaw_range + 2.0 * self.yaw_range * t / (n - 1)
        pitch = self.pitch_amplitude * math.sin(2.0 * math.pi * t / n)
        return Camera.orbit(yaw, pitch, self.camera_distance, self.focal)

    def latents(self) -> np.ndarray:
        """Ground-truth per-frame latents: template plus smooth residuals."""
        rng = np.random.default_rng(self.seed)
        shape = (self.latent_rows, self.latent_dim)
        template = self.template_std * rng.standard_normal(shape)
        amp = rng.standard_normal(shape)
        phase = rng.uniform(0, 2 * math.pi, shape)
        t = np.arange(self.n_frames)[:, None, None]
        residual = amp * np.sin(2 * math.pi * t / max(self.n_frames, 1) + phase)
        return template + self.residual_std * residual

    def dump(self) -> str:
        return _dump_kv(dataclasses.asdict(self))

    @classmethod
    def parse(cls, text: str) -> "DatasetConfig":
        return _parse_kv(text, cls)

    @classmethod
    def load(cls, path) -> "DatasetConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"))


@dataclass
class FrameRecord:
    image: Tensor  # (H, W, 3)
    mask: Tensor  # (H, W), 1 = OOD pixel
    camera: Camera
    clean: Tensor | None = None
    image_hr: Tensor | None = None


@dataclass
class DatasetBundle:
    frames: list[FrameRecord]
    gt_latents: np.ndarray  # (N, L, D)
    config: DatasetConfig
    path: Path | None = None

    def __len__(self) -> int:
        return len(self.frames)


def ground_truth_fields(cfg: DatasetConfig, t: int, lmap: LatentMap | None = None):
    """(scene field, occluder field or None) for frame ``t``."""
    lmap = lmap or LatentMap(cfg.latent_rows, cfg.latent_dim)
    scene = AnalyticSceneField(lmap.decode(cfg.latents()[t]))
    occ = cfg.occluder_params()
    return scene, (AnalyticOccluderField(occ, t) if occ is not None else None)


def render_oracle(cfg: DatasetConfig, t: int, camera: Camera, resolution: int, with_occluder: bool = True,
                  lmap: LatentMap | None = None) -> Tensor:
    scene, occ = ground_truth_fields(cfg, t, lmap)
    field = MixtureField(scene, occ) if (with_occluder and occ is not None) else scene
    rays = generate_rays(camera, resolution, resolution)
    return render_field_chunked(field, rays, cfg.sampling()).color


def render_frame(cfg: DatasetConfig, t: int, lmap: LatentMap | None = None) -> dict[str, Tensor]:
    lmap = lmap or LatentMap(cfg.latent_rows, cfg.latent_dim)
    scene, occ = ground_truth_fields(cfg, t, lmap)
    cam = cfg.camera(t)
    res = cfg.resolution
    rays = generate_rays(cam, res, res)
    sampling = cfg.sampling()
    clean = render_field_chunked(scene, rays, sampling).color
    if occ is None:
        frame, mask = clean, torch.zeros(res, res)
    else:
        frame = render_field_chunked(MixtureField(scene, occ), rays, sampling).color
        mask = (render_field_chunked(occ, rays, sampling).opacity > 0.5).to(frame.dtype)
    hr = res * cfg.sr_factor
    rays_hr = generate_rays(cam, hr, hr)
    frame_hr = render_field_chunked(MixtureField(scene, occ) if occ is not None else scene, rays_hr, sampling).color
    return {"frame": frame, "mask": mask, "clean": clean, "frame_hr": frame_hr}


def _fmt(x: float) -> str:
    return "%.17g" % x


def generate_dataset(cfg: DatasetConfig, out: str | os.PathLike) -> DatasetBundle:
    """Render the dataset with the analytic oracle and write it to ``out``.

    Layout: ``frames/%04d.ppm``, ``frames_hr/%04d.ppm``, ``masks/%04d.pgm``,
    ``clean/%04d.ppm``, ``cameras.csv``, ``gt_latents.csv`` and finally
    ``config.txt``, which marks the dataset complete.
    """
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for sub in ("frames", "frames_hr", "masks", "clean"):
            (out / sub).mkdir(exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc
    with use_precision("float64"):
        lmap = LatentMap(cfg.latent_rows, cfg.latent_dim)
        latents = cfg.latents()
        coverage = []
        for t in range(cfg.n_frames):
            r = render_frame(cfg, t, lmap)
            images.write_ppm(out / "frames" / f"{t:04d}.ppm", r["frame"])
            images.write_ppm(out / "frames_hr" / f"{t:04d}.ppm", r["frame_hr"])
            images.write_ppm(out / "clean" / f"{t:04d}.ppm", r["clean"])
            images.write_pgm(out / "masks" / f"{t:04d}.pgm", (r["mask"].numpy() * 255).astype(np.uint8))
            coverage.append(float(r["mask"].mean()))
        if cfg.occluder != "none" and max(coverage) == 0.0:
            raise ValueError("occluder never enters the camera frustum")
        with open(out / "cameras.csv", "w", encoding="utf-8", newline="\n") as fh:
            for t in range(cfg.n_frames):
                fh.write(",".join([str(t), *map(_fmt, cfg.camera(t).pack())]) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        with open(out / "gt_latents.csv", "w", encoding="utf-8", newline="\n") as fh:
            for t in range(cfg.n_frames):
                fh.write(",".join([str(t), *map(_fmt, latents[t].ravel())]) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        with open(out / "config.txt", "w", encoding="utf-8", newline="\n") as fh:
            fh.write(cfg.dump())
            fh.flush()
            os.fsync(fh.fileno())
    return load_dataset(out)


def load_dataset(path: str | os.PathLike, load_hr: bool = True) -> DatasetBundle:
    path = Path(path)
    if not (path / "config.txt").exists():
        raise FileNotFoundError(f"{path}: no config.txt (incomplete or missing dataset)")
    cfg = DatasetConfig.load(path / "config.txt")
    dtype = torch.get_default_dtype()
    cams = {}
    for line in (path / "cameras.csv").read_text(encoding="utf-8").splitlines():
        parts = line.split(",")
        cams[int(parts[0])] = Camera.unpack([float(v) for v in parts[1:]])
    lat = {}
    for line in (path / "gt_latents.csv").read_text(encoding="utf-8").splitlines():
        parts = line.split(",")
        lat[int(parts[0])] = np.array([float(v) for v in parts[1:]]).reshape(cfg.latent_rows, cfg.latent_dim)
    frames = []
    for t in range(cfg.n_frames):
        img = torch.tensor(images.read_image(path / "frames" / f"{t:04d}.ppm"), dtype=dtype)
        mask = torch.tensor(images.read_pnm(path / "masks" / f"{t:04d}.pgm") == 255, dtype=dtype)
        clean = torch.tensor(images.read_image(path / "clean" / f"{t:04d}.ppm"), dtype=dtype)
        hr_path = path / "frames_hr" / f"{t:04d}.ppm"
        hr = torch.tensor(images.read_image(hr_path), dtype=dtype) if load_hr and hr_path.exists() else None
        frames.append(FrameRecord(img, mask, cams[t], clean, hr))
    return DatasetBundle(frames, np.stack([lat[t] for t in range(cfg.n_frames)]), cfg, path)


# ---------------------------------------------------------------------------
# key = value text
# ---------------------------------------------------------------------------

def _dump_kv(values: dict) -> str:
    lines = []
    for k, v in values.items():
        if isinstance(v, (tuple, list)):
            v = ", ".join(_fmt(x) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, float):
            v = _fmt(v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def _parse_kv(text: str, cls):
    """Parse ``key = value`` lines into dataclass ``cls`` using its defaults' types."""
    defaults = cls()
    kwargs = {}
    known = {f.name for f in dataclasses.fields(cls)}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"bad config line: {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        ref = getattr(defaults, key)
        if isinstance(ref, bool):
            kwargs[key] = value.lower() in ("1", "true", "yes")
        elif isinstance(ref, int):
            kwargs[key] = int(value)
        elif isinstance(ref, float):
            kwargs[key] = float(value)
        elif isinstance(ref, tuple):
            items = [s.strip() for s in value.split(",") if s.strip()]
            kind = type(ref[0]) if ref else float
            kwargs[key] = tuple(kind(s) for s in items)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def parse_config(text: str, cls):
    return _parse_kv(text, cls)


def dump_config(obj) -> str:
    return _dump_kv(dataclasses.asdict(obj))
