"""Finite-difference check of the full composite objective on a tiny scene."""

from __future__ import annotations

import dataclasses

import torch

from .inversion import FrameTargets, OodAssets, PipelineConfig, composite_loss
from .losses import PerceptualProxy
from .renderer import Camera, SamplingConfig, generate_rays, render_composite
from .tensorlab import finite_diff_check, use_precision
from .toygen import ToyGenerator


def composite_gradient_check(generator: ToyGenerator, n_probes: int = 100, seed: int = 0, resolution: int = 6,
                             n_samples: int = 16, ood_resolution: int = 4, h: float = 1e-4,
                             min_rel_grad: float = 1e-4) -> dict[str, float]:
    """Max relative FD error of the stage-B loss for each parameter group.

    The loss is the OOD-only masked term plus the composite objective
    (L2, blend entropy, blend sparsity, perceptual proxy), evaluated in
    float64 with the in-distribution field driven by a live latent so that
    ``w`` receives gradients too.  Probes skip coordinates whose derivative
    is below ``min_rel_grad`` times the group maximum (roundoff floor).
    """
    with use_precision("float64"):
        generator.to(torch.float64)
        gen = torch.Generator().manual_seed(seed)
        cfg = PipelineConfig(seed=seed, ood_resolution=ood_resolution)
        cam = Camera.orbit(10.0, 5.0, generator.cfg.camera_distance, generator.cfg.focal)
        rays = generate_rays(cam, resolution, resolution)
        sampling = SamplingConfig.spanning_cube(generator.cfg.camera_distance, generator.bound, n_samples)
        image = torch.rand(resolution, resolution, 3, generator=gen, dtype=torch.float64)
        mask = torch.zeros(resolution, resolution)
        mask[: resolution // 2, : resolution // 2] = 1.0
        target = FrameTargets(rays, image, mask, None)
        w = (0.5 * torch.randn(*generator.latent_shape, generator=gen, dtype=torch.float64)).requires_grad_(True)
        assets = OodAssets.init(dataclasses.replace(cfg), 1, generator.bound, gen).requires_grad_(True)
        proxy = PerceptualProxy(seed)
        # the frozen generator's own weights get no gradient; w does
        for p in generator.parameters():
            p.requires_grad_(False)

        def loss():
            out = render_composite(generator.field(w), assets.field(0), rays, sampling)
            return composite_loss(out, target, cfg, proxy).total

        groups = {
            "w": [w],
            "triplane": assets.triplane.parameters(),
            "phi": assets.phi.parameters(),
            "decoder": list(assets.decoder.parameters()),
        }
        return {name: finite_diff_check(loss, params, h=h, n_probes=n_probes, seed=seed + i,
                                        min_rel_grad=min_rel_grad)
                for i, (name, params) in enumerate(groups.items())}
