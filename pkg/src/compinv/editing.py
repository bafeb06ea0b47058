"""Edits on an inverted video: latent directions, OOD removal, novel views."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .inversion import InversionResult, upsample
from .renderer import Camera, RenderOutput, generate_rays, render_composite
from .tensorlab import Tensor, use_precision
from .toygen import DatasetConfig, LatentMap, ToyGenerator

DEFAULT_STRENGTH_RANGE = (-3.0, 3.0)


@dataclass(frozen=True)
class EditDirection:
    name: str
    vector: np.ndarray  # (L, D), unit norm
    strength_range: tuple[float, float] = DEFAULT_STRENGTH_RANGE

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        n = np.linalg.norm(v)
        if not np.isfinite(n) or n == 0:
            raise ValueError(f"direction {self.name!r} has zero or non-finite norm")
        object.__setattr__(self, "vector", v / n)

    def as_tensor(self, shape, dtype=None) -> Tensor:
        v = self.vector
        if v.ndim == 1:
            v = np.broadcast_to(v, shape)
        if tuple(v.shape) != tuple(shape):
            raise ValueError(f"direction {self.name!r} has shape {v.shape}, latent is {tuple(shape)}")
        return torch.tensor(np.ascontiguousarray(v), dtype=dtype or torch.get_default_dtype())


class DirectionRegistry:
    """Named edit directions; persisted as ``name = v0, v1, ...`` lines."""

    def __init__(self, directions: dict[str, EditDirection], shape: tuple[int, int]):
        self.shape = tuple(shape)
        self._dirs = dict(directions)

    @classmethod
    def from_latent_map(cls, lmap: LatentMap) -> "DirectionRegistry":
        return cls({n: EditDirection(n, lmap.direction(n)) for n in lmap.direction_names()}, lmap.shape)

    def names(self) -> list[str]:
        return sorted(self._dirs)

    def get(self, name: str) -> EditDirection:
        if name not in self._dirs:
            raise KeyError(f"unknown direction {name!r}; available: {', '.join(self.names())}")
        return self._dirs[name]

    def dump(self) -> str:
        lines = [f"# shape = {self.shape[0]} x {self.shape[1]}"]
        for n in self.names():
            lines.append(f"{n} = " + ", ".join("%.17g" % v for v in self._dirs[n].vector.ravel()))
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.dump(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path, shape: tuple[int, int]) -> "DirectionRegistry":
        dirs = {}
        for raw in Path(path).read_text(encoding="utf-8").splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            name, _, values = (s.strip() for s in line.partition("="))
            vec = np.array([float(v) for v in values.split(",")])
            if vec.size == shape[1]:
                vec = np.broadcast_to(vec, shape).copy()
            elif vec.size == shape[0] * shape[1]:
                vec = vec.reshape(shape)
            else:
                raise ValueError(f"direction {name!r}: {vec.size} values do not fit a {shape} latent")
            dirs[name] = EditDirection(name, vec)
        return cls(dirs, shape)


def apply_edit(w_t: Tensor, direction: EditDirection, strength: float) -> Tensor:
    lo, hi = direction.strength_range
    if not lo <= strength <= hi:
        raise ValueError(f"strength {strength} outside [{lo}, {hi}] for {direction.name!r}")
    return w_t + strength * direction.as_tensor(w_t.shape, w_t.dtype)


class CompositeScene:
    """Read-only rendering view over a generator and an inversion checkpoint."""

    def __init__(self, generator: ToyGenerator, result: InversionResult, dataset_config: DatasetConfig,
                 cameras: list[Camera] | None = None):
        if result.assets is None:
            raise ValueError("checkpoint has no OOD field; run stage B first")
        self.generator = generator.cast(result.latent.w_temp.dtype)
        self.result = result
        self.config = dataset_config
        self.cameras = cameras
        self.sampling = dataset_config.sampling()
        self.ood_removed = False

    def __len__(self) -> int:
        return len(self.result.latent)

    def latent(self, t: int) -> Tensor:
        with torch.no_grad():
            return self.result.latent.effective(t)

    def camera(self, t: int) -> Camera:
        return self.cameras[t] if self.cameras is not None else self.config.camera(t)

    def render(self, t: int, camera: Camera | None = None, latent: Tensor | None = None,
               resolution: int | None = None, remove_ood: bool | None = None) -> RenderOutput:
        res = resolution or self.config.resolution
        w = self.latent(t) if latent is None else latent
        removed = self.ood_removed if remove_ood is None else remove_ood
        # rays follow the checkpoint's precision, not the caller's default
        with torch.no_grad(), use_precision(w.dtype):
            rays = generate_rays(camera or self.camera(t), res, res)
            return render_composite(self.generator.field(w), self.result.assets.field(t), rays, self.sampling,
                                    remove_ood=removed)

    def render_hr(self, t: int, **kw) -> Tensor:
        low = self.render(t, **kw).color
        if self.result.upsampler is None:
            return low
        with torch.no_grad():
            return upsample(low, self.result.upsampler)


def remove_ood(scene: CompositeScene) -> CompositeScene:
    """Scene view whose renders drop the OOD field (b = 0 and its density = 0)."""
    out = CompositeScene(scene.generator, scene.result, scene.config, scene.cameras)
    out.ood_removed = True
    return out


def render_edit(scene: CompositeScene, t: int, direction: EditDirection, strength: float,
                camera: Camera | None = None) -> RenderOutput:
    return scene.render(t, camera=camera, latent=apply_edit(scene.latent(t), direction, strength))


def render_novel_view(scene: CompositeScene, camera: Camera, t: int, high_res: bool = True) -> Tensor:
    """Composite render from ``camera`` using frame ``t``'s latents and OOD code."""
    if high_res:
        return scene.render_hr(t, camera=camera)
    return scene.render(t, camera=camera).color
