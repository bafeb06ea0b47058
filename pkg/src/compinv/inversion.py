"""Staged optimization: latent inversion, OOD field fitting, upsampler finetuning.

Stage A optimizes a shared template latent and per-frame residuals against
the in-distribution pixels of each frame.  Stage B fits the OOD tri-plane,
its decoder and per-frame codes through the composite renderer while the
latents stay frozen.  Stage C trains the upsampler on the frozen low-res
composites.  Each step uses one frame (all of its pixels).
"""

from __future__ import annotations

import logging
import math
import subprocess
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .losses import (PerceptualProxy, blend_entropy, blend_sparsity, latent_delta_reg, masked_l2, mse,
                     sr_loss)
from .renderer import (FieldSamples, OodField, RayBatch, RenderOutput, SamplingConfig, generate_rays,
                       render_composite, render_field, sample_along_ray)
from .tensorlab import (AdamState, NonFiniteError, Tensor, adam_step, backward, clip_grad_norm, decode_text,
                        encode_text, load_container, save_container, tensor_hash, use_precision, zero_grad)
from .toygen import DatasetBundle, ToyGenerator, dump_config, parse_config
from .triplane import OOD_HEAD, MlpDecoder, OodLatent, TriPlane

log = logging.getLogger(__name__)

STAGES = ("A", "B", "C")


@dataclass
class PipelineConfig:
    seed: int = 0
    precision: str = "float32"
    strength: float = 0.7
    perceptual_weight: float = 1.0
    # stage A
    stage_a_epochs: int = 200
    stage_a_lr: float = 1e-3
    lambda_delta: float = 1e-3
    # stage B
    stage_b_epochs: int = 200
    stage_b_lr: float = 5e-3
    lambda_b: float = 1.0
    lambda_spar: float = 3.0
    ood_weight: float = 1.0
    ood_resolution: int = 64
    ood_channels: int = 16
    phi_dim: int = 32
    ood_hidden: tuple = (64, 64)
    init_std: float = 0.1
    phi_init_std: float = 1.0
    ood_density_bias: float = -4.0  # start with a nearly empty OOD field
    reg_delay: int = 50  # stage-B epochs before lambda_b and lambda_spar switch on
    # stage C
    stage_c_epochs: int = 100
    stage_c_lr: float = 1e-3
    sr_factor: int = 2
    sr_hidden: int = 16
    # misc
    grad_clip: float = 0.0  # 0 disables; --clip sets 10
    shuffle: bool = True

    def __post_init__(self):
        for name in ("lambda_delta", "lambda_b", "lambda_spar", "ood_weight", "perceptual_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError("residual strength must lie in [0, 1]")
        if self.reg_delay < 0:
            raise ValueError("reg_delay must be >= 0")

    def reg_scale(self, epoch: int) -> float:
        """Multiplier on the blend regularizers at a stage-B epoch.

        Adam rescales every gradient, so even a small consistent push on the
        shared blend head saturates the sigmoid before the OOD field has
        localized the occluder.  Holding the regularizers off for the first
        ``reg_delay`` epochs lets the reconstruction term shape b first.
        """
        return 0.0 if epoch < self.reg_delay else 1.0

    def dump(self) -> str:
        return dump_config(self)

    @classmethod
    def parse(cls, text: str) -> "PipelineConfig":
        return parse_config(text, cls)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class LatentCode:
    """Template latent shared by all frames plus one residual per frame.

    The effective latent of frame ``t`` is ``w_temp + a * w_res[t]`` and is
    always recomputed from the two parts.
    """

    def __init__(self, w_temp: Tensor, w_res: Sequence[Tensor], strength: float = 0.7):
        if not 0.0 <= strength <= 1.0:
            raise ValueError("strength must lie in [0, 1]")
        self.w_temp = w_temp
        self.w_res = list(w_res)
        self.strength = float(strength)

    @classmethod
    def init(cls, template: Tensor, n_frames: int, strength: float = 0.7) -> "LatentCode":
        w_temp = template.detach().clone().requires_grad_(True)
        return cls(w_temp, [torch.zeros_like(w_temp).requires_grad_(True) for _ in range(n_frames)], strength)

    def __len__(self) -> int:
        return len(self.w_res)

    def effective(self, t: int) -> Tensor:
        return self.w_temp + self.strength * self.w_res[t]

    def all_effective(self) -> Tensor:
        with torch.no_grad():
            return torch.stack([self.effective(t) for t in range(len(self))])

    def parameters(self) -> list[Tensor]:
        return [self.w_temp, *self.w_res]

    def requires_grad_(self, flag: bool) -> "LatentCode":
        for p in self.parameters():
            p.requires_grad_(flag)
        return self

    def state_entries(self) -> dict[str, np.ndarray]:
        out = {"latent.w_temp": self.w_temp.detach().cpu().numpy(),
               "latent.strength": np.array([self.strength])}
        out.update({f"latent.w_res.{t}": r.detach().cpu().numpy() for t, r in enumerate(self.w_res)})
        return out

    @classmethod
    def from_entries(cls, entries, n_frames: int) -> "LatentCode":
        dt = torch.get_default_dtype()
        return cls(torch.tensor(entries["latent.w_temp"], dtype=dt),
                   [torch.tensor(entries[f"latent.w_res.{t}"], dtype=dt) for t in range(n_frames)],
                   float(entries["latent.strength"][0]))


class Upsampler(nn.Module):
    """Bilinear upsampling plus a two-conv residual correction.

    The second conv starts at zero, so an untrained upsampler is exactly the
    bilinear upsample.  Replicate padding keeps constant images constant.
    """

    def __init__(self, factor: int = 2, hidden: int = 16):
        super().__init__()
        self.factor = factor
        self.conv1 = nn.Conv2d(3, hidden, 3)
        self.conv2 = nn.Conv2d(hidden, 3, 3)

    def init_parameters(self, gen: torch.Generator, std: float = 0.1) -> "Upsampler":
        with torch.no_grad():
            self.conv1.weight.copy_(torch.randn(self.conv1.weight.shape, generator=gen) * std)
            self.conv1.bias.zero_()
            self.conv2.weight.zero_()
            self.conv2.bias.zero_()
        return self

    def forward(self, img: Tensor) -> Tensor:
        x = img.permute(2, 0, 1).unsqueeze(0)
        up = F.interpolate(x, scale_factor=self.factor, mode="bilinear", align_corners=False)
        h = F.softplus(self.conv1(F.pad(up, (1, 1, 1, 1), mode="replicate")))
        out = up + self.conv2(F.pad(h, (1, 1, 1, 1), mode="replicate"))
        return out[0].permute(1, 2, 0)

    def state_entries(self, prefix: str = "upsampler") -> dict[str, np.ndarray]:
        return {f"{prefix}.{k}": v.detach().cpu().numpy() for k, v in self.state_dict().items()}

    def load_entries(self, entries, prefix: str = "upsampler") -> "Upsampler":
        dt = self.conv1.weight.dtype
        self.load_state_dict({k: torch.tensor(entries[f"{prefix}.{k}"], dtype=dt) for k in self.state_dict()})
        return self


def upsample(image_lr: Tensor, upsampler: Upsampler) -> Tensor:
    return upsampler(image_lr)


@dataclass
class OodAssets:
    triplane: TriPlane
    decoder: MlpDecoder
    phi: OodLatent

    def field(self, t: int) -> OodField:
        return OodField(self.triplane, self.decoder, self.phi[t])

    def parameters(self) -> list[Tensor]:
        return [*self.triplane.parameters(), *self.decoder.parameters(), *self.phi.parameters()]

    def requires_grad_(self, flag: bool) -> "OodAssets":
        for p in self.parameters():
            p.requires_grad_(flag)
        return self

    @classmethod
    def init(cls, cfg: PipelineConfig, n_frames: int, bound: float, gen: torch.Generator) -> "OodAssets":
        tp = TriPlane.random(cfg.ood_resolution, cfg.ood_channels, bound, cfg.init_std, gen)
        dec = MlpDecoder(cfg.ood_channels + cfg.phi_dim, cfg.ood_hidden, OOD_HEAD).init_normal(cfg.init_std, gen)
        with torch.no_grad():
            dec.layers[-1].bias[3] += cfg.ood_density_bias
        phi = OodLatent.random(n_frames, cfg.phi_dim, cfg.phi_init_std, gen)
        return cls(tp, dec, phi)


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

@dataclass
class FrameTargets:
    rays: RayBatch
    image: Tensor
    mask: Tensor  # 1 = OOD
    image_hr: Tensor | None


def prepare_frames(dataset: DatasetBundle) -> list[FrameTargets]:
    dt = torch.get_default_dtype()
    out = []
    for fr in dataset.frames:
        h, w = fr.image.shape[:2]
        out.append(FrameTargets(generate_rays(fr.camera, w, h), fr.image.to(dt), fr.mask.to(dt),
                                None if fr.image_hr is None else fr.image_hr.to(dt)))
    return out


def frame_order(n: int, epoch: int, seed: int, shuffle: bool = True) -> list[int]:
    if not shuffle:
        return list(range(n))
    return [int(i) for i in np.random.default_rng([seed, epoch]).permutation(n)]


def _check(loss: Tensor, stage: str, epoch: int, t: int) -> float:
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NonFiniteError(f"stage {stage}: non-finite loss at epoch {epoch}, frame {t}")
    return value


def _step(loss: Tensor, params: list[Tensor], state: AdamState, cfg: PipelineConfig) -> None:
    zero_grad(params)
    backward(loss)
    if cfg.grad_clip > 0:
        clip_grad_norm(params, cfg.grad_clip)
    adam_step(params, state)


# ---------------------------------------------------------------------------
# stage A
# ---------------------------------------------------------------------------

def stage_a_loss(generator: ToyGenerator, w_t: Tensor, target: FrameTargets, sampling: SamplingConfig,
                 cfg: PipelineConfig, proxy: PerceptualProxy) -> Tensor:
    keep = 1.0 - target.mask
    pred = render_field(generator.field(w_t), target.rays, sampling).color
    loss = masked_l2(pred, target.image, keep)
    if cfg.perceptual_weight:
        loss = loss + cfg.perceptual_weight * proxy(pred, target.image, keep)
    return loss + cfg.lambda_delta * latent_delta_reg(w_t)


def invert_in_distribution(dataset: DatasetBundle, generator: ToyGenerator, cfg: PipelineConfig,
                           latent: LatentCode | None = None, history: list | None = None) -> LatentCode:
    """Optimize template and residual latents against unmasked pixels."""
    frames = prepare_frames(dataset)
    sampling = dataset.config.sampling()
    proxy = PerceptualProxy(cfg.seed)
    if latent is None:
        latent = LatentCode.init(generator.mean_latent(), len(frames), cfg.strength)
    latent.requires_grad_(True)
    params = latent.parameters()
    state = AdamState.for_params(params, lr=cfg.stage_a_lr)
    for epoch in range(cfg.stage_a_epochs):
        losses = []
        for t in frame_order(len(frames), epoch, cfg.seed, cfg.shuffle):
            if float((1.0 - frames[t].mask).sum()) <= 0:
                log.warning("stage A: frame %d is fully masked; skipped", t)
                continue
            loss = stage_a_loss(generator, latent.effective(t), frames[t], sampling, cfg, proxy)
            losses.append(_check(loss, "A", epoch, t))
            _step(loss, params, state, cfg)
        if history is not None and losses:
            history.append(float(np.mean(losses)))
    latent.requires_grad_(False)
    return latent


# ---------------------------------------------------------------------------
# stage B
# ---------------------------------------------------------------------------

@dataclass
class CompositeLossTerms:
    total: Tensor
    ood: Tensor
    recon: Tensor
    entropy: Tensor
    sparsity: Tensor
    perceptual: Tensor


def composite_loss(out: RenderOutput, target: FrameTargets, cfg: PipelineConfig,
                   proxy: PerceptualProxy, reg_scale: float = 1.0) -> CompositeLossTerms:
    """OOD-only masked term plus the composite objective for one frame.

    The blend regularizers are sums over samples divided by the sample count
    ``H * W * K`` so they are on the same per-pixel scale as the data terms.
    """
    b = out.blend_samples
    norm = float(b.numel())
    zero = out.color.new_zeros(())
    if float(target.mask.sum()) > 0:
        ood = masked_l2(out.ood_color, target.image, target.mask)
    else:
        ood = zero
    recon = mse(out.color, target.image)
    entropy = blend_entropy(b, eps=1e-6) / norm
    sparsity = blend_sparsity(b, target.mask) / norm
    perceptual = proxy(out.color, target.image) if cfg.perceptual_weight else zero
    total = (cfg.ood_weight * ood + recon + reg_scale * (cfg.lambda_b * entropy + cfg.lambda_spar * sparsity)
             + cfg.perceptual_weight * perceptual)
    return CompositeLossTerms(total, ood, recon, entropy, sparsity, perceptual)


def cache_in_samples(generator: ToyGenerator, latent: LatentCode, frames: list[FrameTargets],
                     sampling: SamplingConfig) -> list[FieldSamples]:
    cache = []
    with torch.no_grad():
        for t, fr in enumerate(frames):
            pts = sample_along_ray(fr.rays, sampling)
            cache.append(generator.field(latent.effective(t))(pts.positions))
    return cache


def fit_ood_and_composite(dataset: DatasetBundle, generator: ToyGenerator, latent: LatentCode, cfg: PipelineConfig,
                          assets: OodAssets | None = None, history: list | None = None) -> OodAssets:
    """Fit the OOD tri-plane, decoder and per-frame codes; latents stay frozen."""
    frames = prepare_frames(dataset)
    sampling = dataset.config.sampling()
    proxy = PerceptualProxy(cfg.seed)
    if assets is None:
        gen = torch.Generator().manual_seed(cfg.seed + 1)
        assets = OodAssets.init(cfg, len(frames), generator.bound, gen)
    assets.requires_grad_(True)
    latent.requires_grad_(False)
    in_cache = cache_in_samples(generator, latent, frames, sampling)
    params = assets.parameters()
    state = AdamState.for_params(params, lr=cfg.stage_b_lr)
    for epoch in range(cfg.stage_b_epochs):
        totals, masked_err, inside_b = [], [], []
        for t in frame_order(len(frames), epoch, cfg.seed, cfg.shuffle):
            out = render_composite(None, assets.field(t), frames[t].rays, sampling, in_samples=in_cache[t])
            terms = composite_loss(out, frames[t], cfg, proxy, cfg.reg_scale(epoch))
            totals.append(_check(terms.total, "B", epoch, t))
            m = frames[t].mask
            if float(m.sum()) > 0:
                masked_err.append(float(terms.ood.detach()))
                inside_b.append(float((out.blend_map.detach() * m).sum() / m.sum()))
            _step(terms.total, params, state, cfg)
        if history is not None:
            history.append(float(np.mean(totals)))
        if cfg.reg_scale(epoch) == 1.0 and inside_b and np.mean(inside_b) < 0.05 and np.mean(masked_err) > 0.05:
            log.warning("stage B epoch %d: blend inside the mask collapsed (mean %.3f) while masked OOD error "
                        "is %.3f; sparsity may dominate", epoch, np.mean(inside_b), np.mean(masked_err))
    assets.requires_grad_(False)
    return assets


# ---------------------------------------------------------------------------
# stage C
# ---------------------------------------------------------------------------

def render_reconstruction(generator: ToyGenerator, latent: LatentCode, assets: OodAssets, target: FrameTargets,
                          sampling: SamplingConfig, t: int, remove_ood: bool = False) -> RenderOutput:
    with torch.no_grad():
        return render_composite(generator.field(latent.effective(t)), assets.field(t), target.rays, sampling,
                                remove_ood=remove_ood)


def finetune_upsampler(dataset: DatasetBundle, generator: ToyGenerator, latent: LatentCode, assets: OodAssets,
                       cfg: PipelineConfig, upsampler: Upsampler | None = None,
                       history: list | None = None) -> Upsampler:
    """Train only the upsampler on frozen low-res composites against full-res frames."""
    frames = prepare_frames(dataset)
    if any(fr.image_hr is None for fr in frames):
        raise ValueError("stage C needs full-resolution frames (frames_hr/)")
    sampling = dataset.config.sampling()
    proxy = PerceptualProxy(cfg.seed)
    if upsampler is None:
        gen = torch.Generator().manual_seed(cfg.seed + 2)
        upsampler = Upsampler(cfg.sr_factor, cfg.sr_hidden).to(torch.get_default_dtype()).init_parameters(gen)
    lowres = [render_reconstruction(generator, latent, assets, fr, sampling, t).color for t, fr in enumerate(frames)]
    params = list(upsampler.parameters())
    for p in params:
        p.requires_grad_(True)
    state = AdamState.for_params(params, lr=cfg.stage_c_lr)
    for epoch in range(cfg.stage_c_epochs):
        losses = []
        for t in frame_order(len(frames), epoch, cfg.seed, cfg.shuffle):
            loss = sr_loss(frames[t].image_hr, upsampler(lowres[t]), proxy)
            losses.append(_check(loss, "C", epoch, t))
            _step(loss, params, state, cfg)
        if history is not None:
            history.append(float(np.mean(losses)))
    for p in params:
        p.requires_grad_(False)
    return upsampler


# ---------------------------------------------------------------------------
# checkpoint + driver
# ---------------------------------------------------------------------------

@dataclass
class InversionResult:
    config: PipelineConfig
    latent: LatentCode
    assets: OodAssets | None = None
    upsampler: Upsampler | None = None
    stage: str = "A"
    generator_hash: str = ""
    histories: dict = field(default_factory=dict)
    generator_path: str = ""

    def state_entries(self) -> dict[str, np.ndarray]:
        entries = {
            "meta.kind": encode_text("inversion"),
            "meta.stage": encode_text(self.stage),
            "meta.config": encode_text(self.config.dump()),
            "meta.generator_hash": encode_text(self.generator_hash),
            "meta.generator_path": encode_text(self.generator_path),
            "meta.n_frames": np.array([len(self.latent)], dtype=np.int64),
        }
        entries.update(self.latent.state_entries())
        if self.assets is not None:
            entries["meta.ood_bound"] = np.array([self.assets.triplane.bound])
            entries.update(self.assets.triplane.state_dict("triplane"))
            entries.update(self.assets.decoder.state_entries("decoder_ood"))
            entries.update(self.assets.phi.state_entries("phi"))
        if self.upsampler is not None:
            entries.update(self.upsampler.state_entries())
        for name, values in sorted(self.histories.items()):
            entries[f"loss.stage_{name}"] = np.asarray(values, dtype=np.float64)
        return entries

    def save(self, path) -> Path:
        return save_container(path, self.state_entries())

    @classmethod
    def load(cls, path) -> "InversionResult":
        entries = load_container(path)
        if decode_text(entries.get("meta.kind", encode_text(""))) != "inversion":
            raise ValueError(f"{path}: not an inversion checkpoint")
        cfg = PipelineConfig.parse(decode_text(entries["meta.config"]))
        n = int(entries["meta.n_frames"][0])
        latent = LatentCode.from_entries(entries, n)
        assets = None
        if "triplane.xy" in entries:
            bound = float(entries["meta.ood_bound"][0])
            tp = TriPlane.from_state_dict(entries, bound, "triplane")
            dec = MlpDecoder(cfg.ood_channels + cfg.phi_dim, cfg.ood_hidden, OOD_HEAD).to(torch.get_default_dtype())
            dec.load_entries(entries, "decoder_ood")
            assets = OodAssets(tp, dec, OodLatent.from_entries(entries, n, "phi")).requires_grad_(False)
        ups = None
        if "upsampler.conv1.weight" in entries:
            ups = Upsampler(cfg.sr_factor, cfg.sr_hidden).to(torch.get_default_dtype()).load_entries(entries)
            for p in ups.parameters():
                p.requires_grad_(False)
        hist = {k.split("loss.stage_", 1)[1]: list(v) for k, v in entries.items() if k.startswith("loss.stage_")}
        gpath = decode_text(entries["meta.generator_path"]) if "meta.generator_path" in entries else ""
        return cls(cfg, latent, assets, ups, decode_text(entries["meta.stage"]),
                   decode_text(entries["meta.generator_hash"]), hist, gpath)


def run_pipeline(dataset: DatasetBundle, generator: ToyGenerator, cfg: PipelineConfig,
                 stages: str = "ABC", resume: InversionResult | None = None) -> InversionResult:
    """Run the requested stages in order, optionally continuing a checkpoint."""
    stages = stages.upper()
    if any(s not in STAGES for s in stages):
        raise ValueError(f"unknown stage in {stages!r}; expected letters from ABC")
    with use_precision(cfg.precision) as dtype:
        torch.manual_seed(cfg.seed)
        # hash what the caller passed (the stored checkpoint), then run on a cast copy
        ghash = generator.content_hash()
        generator = generator.cast(dtype)
        if resume is not None:
            if resume.generator_hash and resume.generator_hash != ghash:
                raise ValueError("checkpoint was produced with a different generator")
            result = resume
            result.latent = LatentCode([_cast(p, dtype) for p in [result.latent.w_temp]][0],
                                       [_cast(p, dtype) for p in result.latent.w_res], result.latent.strength)
            if result.assets is not None:
                a = result.assets
                result.assets = OodAssets(TriPlane(_cast(a.triplane.planes, dtype), a.triplane.bound),
                                          a.decoder.to(dtype), OodLatent([_cast(p, dtype) for p in a.phi.codes]))
            if result.upsampler is not None:
                result.upsampler.to(dtype)
        else:
            result = InversionResult(cfg, LatentCode.init(generator.mean_latent(), len(dataset), cfg.strength),
                                     generator_hash=ghash)
        for stage in stages:
            hist: list[float] = []
            if stage == "A":
                result.latent = invert_in_distribution(dataset, generator, cfg, result.latent, hist)
            elif stage == "B":
                result.assets = fit_ood_and_composite(dataset, generator, result.latent, cfg, result.assets, hist)
            else:
                if result.assets is None:
                    raise ValueError("stage C needs stage B results")
                result.upsampler = finetune_upsampler(dataset, generator, result.latent, result.assets, cfg,
                                                      result.upsampler, hist)
            result.histories[stage] = result.histories.get(stage, []) + hist
            result.stage = stage
            log.info("stage %s done; last epoch loss %s", stage, hist[-1] if hist else "n/a")
    return result


def _cast(t: Tensor, dtype: torch.dtype) -> Tensor:
    return t.detach().to(dtype).clone()


def parameter_hashes(generator: ToyGenerator, result: InversionResult) -> dict[str, str]:
    """Content hashes of every parameter group, for frozen-parameter checks."""
    out = {"generator": tensor_hash(generator.parameters()),
           "latent": tensor_hash(result.latent.parameters())}
    if result.assets is not None:
        out["ood"] = tensor_hash(result.assets.parameters())
    if result.upsampler is not None:
        out["upsampler"] = tensor_hash(list(result.upsampler.parameters()))
    return out


def git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             timeout=5, cwd=Path(__file__).resolve().parent)
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(path, result: InversionResult, extra: dict | None = None) -> Path:
    """Line-based ``key = value`` run record next to a checkpoint."""
    path = Path(path)
    lines = [f"seed = {result.config.seed}", f"git = {git_describe()}", f"stage = {result.stage}",
             f"generator_hash = {result.generator_hash}"]
    for stage, values in sorted(result.histories.items()):
        if values:
            lines.append(f"final_loss_{stage} = {values[-1]:.17g}")
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    lines += [f"config.{line}" for line in result.config.dump().splitlines()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
