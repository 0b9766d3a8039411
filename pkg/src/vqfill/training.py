"""Two-stage optimisation: autoencoder/codebook learning, then masked fine-tuning."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from vqfill.dataset import DatasetContainer
from vqfill.errors import ConfigError, InstabilityError, StageMismatchError
from vqfill.losses import (
    LossBreakdown,
    adaptive_lambda,
    gan_loss,
    generator_loss,
    grad_norm,
    masked_composite,
    vq_loss,
)
from vqfill.masking import MaskConfig, build_mask
from vqfill.model import (
    ArchSpec,
    Checkpoint,
    PatchDiscriminator,
    PerceptualExtractor,
    VQModel,
    perceptual_distance,
    save_checkpoint,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    beta: float = 0.25
    lr: float = 1e-4
    disc_lr: float = 4e-4
    adam_betas: tuple[float, float] = (0.5, 0.9)
    steps: int = 2000
    batch_size: int = 16
    gan_enabled: bool = True
    gan_start_step: int | None = None  # None: a quarter of the way through
    percept_enabled: bool = False
    percept_weights: str | None = None
    percept_layers: tuple[str, ...] = ("relu1_2", "relu2_2", "relu3_3", "relu4_3")
    percept_weight: float = 1.0
    lambda_clamp: float = 1e4
    seed: int = 0
    dead_code_reset: bool = True
    warm_start_post_quant: bool = True
    warm_start_disc: bool = True
    snapshot_every: int = 100

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        object.__setattr__(self, "percept_layers", tuple(self.percept_layers))
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if not self.beta > 0:
            raise ConfigError("beta must be positive")
        if self.gan_start_step is not None and self.gan_start_step < 0:
            raise ConfigError("gan_start_step must be >= 0")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")

    @property
    def gan_start(self) -> int:
        return self.steps // 4 if self.gan_start_step is None else self.gan_start_step

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["percept_layers"] = list(self.percept_layers)
        return d


def data_scale(frames: np.ndarray) -> float:
    """Global max-abs used to map vorticity into [-1, 1]."""
    scale = float(np.max(np.abs(frames)))
    if not scale > 0:
        raise ConfigError("training frames are identically zero")
    return scale


def latent_footprint(m: torch.Tensor, depth: int) -> torch.Tensor:
    """1 on latent cells whose 2^depth x 2^depth pixel block contains a missing cell."""
    k = 2**depth
    return F.max_pool2d(m, kernel_size=k, stride=k)


def _build_extractor(config: TrainConfig) -> PerceptualExtractor | None:
    if not config.percept_enabled:
        return None
    if not config.percept_weights:
        raise ConfigError("percept_enabled requires percept_weights")
    return PerceptualExtractor(config.percept_weights, config.percept_layers)


StepOutputs = tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor | None, torch.Tensor | None]


class _Fitter:
    """Alternating generator/discriminator optimisation shared by both stages."""

    def __init__(self, model: VQModel, disc: PatchDiscriminator, config: TrainConfig,
                 gen_params: list[nn.Parameter], probe: nn.Parameter,
                 forward: Callable[[torch.Tensor], StepOutputs]):
        self.model, self.disc, self.config = model, disc, config
        self.gen_params = gen_params
        self.probe = probe
        self.forward = forward
        self.extractor = _build_extractor(config)
        self.opt = torch.optim.Adam(gen_params, lr=config.lr, betas=config.adam_betas)
        self.d_opt = torch.optim.Adam(disc.parameters(), lr=config.disc_lr, betas=config.adam_betas)

    def generator_step(self, x: torch.Tensor, step: int) -> tuple[LossBreakdown, torch.Tensor, torch.Tensor, torch.Tensor]:
        cfg = self.config
        self.disc.requires_grad_(False)
        target, out, z_c, z, pix_w, lat_w = self.forward(x)
        parts = vq_loss(target, out, z_c, z, pix_w, lat_w)
        percep = perceptual_distance(target, out, self.extractor) * cfg.percept_weight
        nll = parts["recon"] + percep
        total = nll + parts["codebook"] + cfg.beta * parts["commitment"]
        gen = torch.zeros(())
        lam = 0.0
        gan_active = cfg.gan_enabled and step >= cfg.gan_start
        if gan_active:
            gen = generator_loss(self.disc(out))
            lam = adaptive_lambda(grad_norm(nll, self.probe), grad_norm(gen, self.probe), cfg.lambda_clamp)
            total = total + lam * gen
        if not torch.isfinite(total):
            raise InstabilityError(f"non-finite loss at step {step}")
        self.opt.zero_grad(set_to_none=True)
        total.backward()
        self.opt.step()
        self.disc.requires_grad_(True)
        bd = LossBreakdown(
            recon=parts["recon"].item(), codebook=parts["codebook"].item(), commitment=parts["commitment"].item(),
            perceptual=percep.item(), gan_generator=gen.item(), lambda_used=lam, total=total.item(),
        )
        return bd, target.detach(), out.detach(), z_c.detach()

    def discriminator_step(self, target: torch.Tensor, out: torch.Tensor) -> float:
        _, d_term = gan_loss(self.disc(target), self.disc(out))
        self.d_opt.zero_grad(set_to_none=True)
        (-d_term).backward()
        self.d_opt.step()
        return d_term.item()

    def snapshot(self) -> dict:
        return {"model": copy.deepcopy(self.model.state_dict()), "disc": copy.deepcopy(self.disc.state_dict())}

    def run(self, frames: torch.Tensor, log_path: str | Path | None, on_abort: Callable[[dict], None]) -> list[LossBreakdown]:
        cfg = self.config
        gen = torch.Generator().manual_seed(cfg.seed + 1)
        n = frames.shape[0]
        steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
        order = torch.randperm(n, generator=gen)
        history: list[LossBreakdown] = []
        good = self.snapshot()
        log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
        try:
            self.model.train()
            self.disc.train()
            for step in range(cfg.steps):
                pos = (step % steps_per_epoch) * cfg.batch_size
                if step and step % steps_per_epoch == 0:
                    order = torch.randperm(n, generator=gen)
                batch = frames[order[pos:pos + cfg.batch_size]]
                try:
                    bd, target, out, z_c = self.generator_step(batch, step)
                    if cfg.gan_enabled and step >= cfg.gan_start:
                        bd.gan_discriminator = self.discriminator_step(target, out)
                        if not math.isfinite(bd.gan_discriminator):
                            raise InstabilityError(f"non-finite discriminator loss at step {step}")
                except InstabilityError:
                    on_abort(good)
                    raise
                if cfg.dead_code_reset and (step + 1) % steps_per_epoch == 0:
                    cand = z_c.permute(0, 2, 3, 1).reshape(-1, z_c.shape[1])
                    reset = self.model.codebook.reset_dead_codes(cand, gen)
                    if reset:
                        log.debug("step %d: reset %d dead codes", step, reset)
                history.append(bd)
                if log_fh:
                    log_fh.write(json.dumps({"step": step, **bd.as_dict()}) + "\n")
                if (step + 1) % cfg.snapshot_every == 0:
                    good = self.snapshot()
                if step % 100 == 0 or step == cfg.steps - 1:
                    log.info("step %d recon=%.5f total=%.5f lambda=%.3g", step, bd.recon, bd.total, bd.lambda_used)
        finally:
            if log_fh:
                log_fh.close()
            self.model.eval()
            self.disc.eval()
        return history


def _abort_writer(out: str | Path | None, template: Checkpoint) -> Callable[[dict], None]:
    def write(state: dict) -> None:
        if out is None:
            return
        template.model.load_state_dict(state["model"])
        template.disc.load_state_dict(state["disc"])
        template.attrs["aborted"] = True
        save_checkpoint(out, template)
    return write


def _train_frames(dataset: DatasetContainer) -> np.ndarray:
    idx = dataset.indices("train")
    if idx.size == 0:
        raise ConfigError("dataset has no training frames")
    return dataset.frames[idx]


def train_stage1(dataset: DatasetContainer, config: TrainConfig, arch: ArchSpec | None = None,
                 out: str | Path | None = None, log_path: str | Path | None = None) -> tuple[Checkpoint, list[LossBreakdown]]:
    """Fit encoder, codebook, post-quantization conv, decoder and discriminator on complete fields."""
    if config.stage != 1:
        raise StageMismatchError(f"train_stage1 called with stage={config.stage}")
    frames_np = _train_frames(dataset)
    arch = arch or ArchSpec(grid=frames_np.shape[-1])
    if arch.grid != frames_np.shape[-1] or arch.in_channels != 1:
        raise ConfigError(f"architecture grid {arch.grid}/in_channels {arch.in_channels} does not fit stage-1 data")
    scale = data_scale(frames_np)
    frames = torch.from_numpy((frames_np / scale).astype(np.float32))[:, None]

    torch.manual_seed(config.seed)
    model, disc = VQModel(arch), PatchDiscriminator(arch)
    ckpt = Checkpoint(model, disc, stage=1, scale=scale, attrs={"train": config.to_dict()})

    def forward(x: torch.Tensor) -> StepOutputs:
        x_rec, z_c, z, _ = model(x)
        return x, x_rec, z_c, z, None, None

    fitter = _Fitter(model, disc, config, list(model.parameters()), model.decoder.conv_out.weight, forward)
    history = fitter.run(frames, log_path, _abort_writer(out, ckpt))
    if out is not None:
        save_checkpoint(out, ckpt)
    return ckpt, history


def prepare_stage2(stage1: Checkpoint, config: TrainConfig) -> Checkpoint:
    """Copy a stage-1 checkpoint, widen the encoder input and freeze the decoder."""
    if stage1.stage != 1:
        raise StageMismatchError(f"stage-2 fine-tuning needs a stage-1 checkpoint, got stage {stage1.stage}")
    model = copy.deepcopy(stage1.model)
    disc = copy.deepcopy(stage1.disc)
    torch.manual_seed(config.seed)
    model.expand_input_channels(3)
    if not config.warm_start_post_quant:
        model.post_quant_conv.reset_parameters()
    if not config.warm_start_disc:
        disc = PatchDiscriminator(model.arch)
    model.decoder.requires_grad_(False)
    return Checkpoint(model, disc, stage=2, scale=stage1.scale, attrs={"train": config.to_dict()})


def stage2_forward(model: VQModel, x: torch.Tensor, m: torch.Tensor) -> StepOutputs:
    """Masked forward pass; every output-side loss sees only the composite field."""
    x_mask = x * (1 - m)
    inp = torch.cat([x_mask, (1 - m).expand_as(x), m.expand_as(x)], dim=1)
    x_rec, z_c, z, _ = model(inp)
    comp = masked_composite(x_mask, x_rec, m)
    return x, comp, z_c, z, m, latent_footprint(m, model.arch.depth)


def train_stage2(stage1: Checkpoint, dataset: DatasetContainer, mask: MaskConfig, config: TrainConfig,
                 out: str | Path | None = None, log_path: str | Path | None = None) -> tuple[Checkpoint, list[LossBreakdown]]:
    """Fine-tune encoder, codebook, post-quantization conv and discriminator for completion; decoder frozen."""
    if config.stage != 2:
        raise StageMismatchError(f"train_stage2 called with stage={config.stage}")
    ckpt = prepare_stage2(stage1, config)
    ckpt.mask = dataclasses.asdict(mask)
    model = ckpt.model
    frames_np = _train_frames(dataset)
    grid = frames_np.shape[-1]
    if grid != model.arch.grid:
        raise ConfigError(f"dataset grid {grid} != model grid {model.arch.grid}")
    frames = torch.from_numpy((frames_np / ckpt.scale).astype(np.float32))[:, None]
    m = torch.from_numpy(build_mask(mask, grid, grid).astype(np.float32))[None, None]

    params = [p for name, p in model.named_parameters() if not name.startswith("decoder.")]
    fitter = _Fitter(model, ckpt.disc, config, params, model.post_quant_conv.weight,
                     lambda x: stage2_forward(model, x, m))
    history = fitter.run(frames, log_path, _abort_writer(out, ckpt))
    if out is not None:
        save_checkpoint(out, ckpt)
    return ckpt, history
