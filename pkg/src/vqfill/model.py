"""VQ autoencoder, patch discriminator and perceptual feature distance."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from vqfill import container
from vqfill.errors import ConfigError, DataFormatError


@dataclass(frozen=True)
class ArchSpec:
    grid: int = 64
    in_channels: int = 1
    ch: int = 32
    ch_mult: tuple[int, ...] = (1, 1, 2, 2)
    num_res_blocks: int = 1
    z_dim: int = 8
    codebook_size: int = 512
    disc_ndf: int = 32
    disc_layers: int = 3

    def __post_init__(self):
        object.__setattr__(self, "ch_mult", tuple(self.ch_mult))
        if self.codebook_size < 2:
            raise ConfigError("codebook_size must be >= 2")
        if self.grid % (2 ** self.depth):
            raise ConfigError(f"grid {self.grid} not divisible by 2^{self.depth}")

    @property
    def depth(self) -> int:
        return len(self.ch_mult)

    @property
    def latent_grid(self) -> int:
        return self.grid // 2 ** self.depth

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["ch_mult"] = list(self.ch_mult)
        return d


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(num_groups=min(8, ch), num_channels=ch, eps=1e-6)


def _conv3(cin: int, cout: int) -> nn.Conv2d:
    # Fields are periodic, so convolutions wrap around.
    return nn.Conv2d(cin, cout, 3, padding=1, padding_mode="circular")


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.norm1 = _norm(cin)
        self.conv1 = _conv3(cin, cout)
        self.norm2 = _norm(cout)
        self.conv2 = _conv3(cout, cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Encoder(nn.Module):
    def __init__(self, arch: ArchSpec, in_channels: int | None = None):
        super().__init__()
        cin = arch.in_channels if in_channels is None else in_channels
        widths = [arch.ch * m for m in arch.ch_mult]
        self.conv_in = _conv3(cin, arch.ch)
        blocks: list[nn.Module] = []
        prev = arch.ch
        for w in widths:
            for _ in range(arch.num_res_blocks):
                blocks.append(ResBlock(prev, w))
                prev = w
            blocks.append(nn.Conv2d(prev, prev, 4, stride=2, padding=1, padding_mode="circular"))
        self.down = nn.Sequential(*blocks)
        self.mid = ResBlock(prev, prev)
        self.norm_out = _norm(prev)
        self.conv_out = _conv3(prev, arch.z_dim)

    def forward(self, x):
        h = self.down(self.conv_in(x))
        h = self.mid(h)
        return self.conv_out(F.silu(self.norm_out(h)))


class Upsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = _conv3(ch, ch)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class Decoder(nn.Module):
    def __init__(self, arch: ArchSpec):
        super().__init__()
        widths = [arch.ch * m for m in arch.ch_mult][::-1]
        prev = widths[0]
        self.conv_in = _conv3(arch.z_dim, prev)
        self.mid = ResBlock(prev, prev)
        blocks: list[nn.Module] = []
        for w in widths:
            for _ in range(arch.num_res_blocks):
                blocks.append(ResBlock(prev, w))
                prev = w
            blocks.append(Upsample(prev))
        self.up = nn.Sequential(*blocks)
        self.norm_out = _norm(prev)
        self.conv_out = _conv3(prev, 1)

    def forward(self, z):
        h = self.mid(self.conv_in(z))
        h = self.up(h)
        return self.conv_out(F.silu(self.norm_out(h)))


class Codebook(nn.Module):
    """K code vectors of dimension d plus per-code usage counters."""

    def __init__(self, num_codes: int, dim: int):
        super().__init__()
        if num_codes < 1:
            raise ConfigError("codebook must not be empty")
        self.embedding = nn.Embedding(num_codes, dim)
        self.embedding.weight.data.uniform_(-1.0 / num_codes, 1.0 / num_codes)
        self.register_buffer("usage_counts", torch.zeros(num_codes, dtype=torch.long))

    @property
    def codes(self) -> torch.Tensor:
        return self.embedding.weight

    def nearest(self, flat: torch.Tensor, chunk: int = 2048) -> torch.Tensor:
        """Index of the Euclidean-nearest code for each row; ties go to the lowest index."""
        codes = self.codes.detach()
        out = []
        for start in range(0, flat.shape[0], chunk):
            part = flat[start:start + chunk].detach()
            dist = ((part[:, None, :] - codes[None, :, :]) ** 2).sum(-1)
            out.append(torch.argmin(dist, dim=1))  # argmin returns the first minimum
        if not out:
            return torch.zeros(0, dtype=torch.long, device=flat.device)
        return torch.cat(out)

    def forward(self, z_c: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Quantize a (B, d, h, w) latent; returns the code vectors and (B, h, w) indices."""
        if z_c.shape[1] != self.codes.shape[1]:
            raise ConfigError(f"latent dim {z_c.shape[1]} != codebook dim {self.codes.shape[1]}")
        b, d, h, w = z_c.shape
        flat = z_c.permute(0, 2, 3, 1).reshape(-1, d)
        idx = self.nearest(flat)
        if self.training:
            self.usage_counts += torch.bincount(idx, minlength=self.usage_counts.numel())
        z = self.embedding(idx).view(b, h, w, d).permute(0, 3, 1, 2)
        return z, idx.view(b, h, w)

    @torch.no_grad()
    def reset_dead_codes(self, candidates: torch.Tensor, generator: torch.Generator | None = None) -> int:
        """Reinitialise codes with zero usage from random rows of ``candidates``; clears the counters."""
        dead = torch.nonzero(self.usage_counts == 0).flatten()
        if dead.numel() and candidates.shape[0]:
            pick = torch.randint(0, candidates.shape[0], (dead.numel(),), generator=generator)
            self.embedding.weight.data[dead] = candidates[pick].to(self.codes.dtype)
        self.usage_counts.zero_()
        return int(dead.numel())


def straight_through(z_c: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Forward value ``z``; gradient flows to ``z_c`` unchanged."""
    return z_c + (z - z_c).detach()


class VQModel(nn.Module):
    def __init__(self, arch: ArchSpec):
        super().__init__()
        self.arch = arch
        self.encoder = Encoder(arch)
        self.codebook = Codebook(arch.codebook_size, arch.z_dim)
        self.post_quant_conv = nn.Conv2d(arch.z_dim, arch.z_dim, 1)
        self.decoder = Decoder(arch)

    @property
    def in_channels(self) -> int:
        return self.encoder.conv_in.in_channels

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels or x.shape[-1] != self.arch.grid or x.shape[-2] != self.arch.grid:
            raise ConfigError(
                f"encoder expects (B, {self.in_channels}, {self.arch.grid}, {self.arch.grid}), got {tuple(x.shape)}"
            )
        return self.encoder(x)

    def quantize(self, z_c: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.codebook(z_c)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        h = self.arch.latent_grid
        if z.dim() != 4 or z.shape[1] != self.arch.z_dim or z.shape[-2:] != (h, h):
            raise ConfigError(f"decoder expects (B, {self.arch.z_dim}, {h}, {h}), got {tuple(z.shape)}")
        return self.decoder(self.post_quant_conv(z))

    def forward(self, x: torch.Tensor):
        """Returns ``(x_rec, z_c, z, indices)``; in training mode the decoder sees the straight-through surrogate."""
        z_c = self.encode(x)
        z, idx = self.quantize(z_c)
        x_rec = self.decode(straight_through(z_c, z) if self.training else z)
        return x_rec, z_c, z, idx

    @torch.no_grad()
    def expand_input_channels(self, channels: int = 3) -> None:
        """Widen the first encoder conv; the old kernel goes to channel 0, new channels start at zero."""
        old = self.encoder.conv_in
        if old.in_channels == channels:
            return
        new = nn.Conv2d(channels, old.out_channels, old.kernel_size, padding=old.padding, padding_mode=old.padding_mode)
        new = new.to(old.weight.dtype)
        new.weight.zero_()
        new.weight[:, : old.in_channels] = old.weight
        new.bias.copy_(old.bias)
        self.encoder.conv_in = new
        self.arch = dataclasses.replace(self.arch, in_channels=channels)


class PatchDiscriminator(nn.Module):
    """PatchGAN: ``layers`` stride-2 blocks, one stride-1 block, then a 1-channel logit conv."""

    def __init__(self, arch: ArchSpec):
        super().__init__()
        ndf, n = arch.disc_ndf, arch.disc_layers
        seq: list[nn.Module] = [nn.Conv2d(1, ndf, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        mult = 1
        for i in range(1, n):
            prev, mult = mult, min(2**i, 8)
            seq += [nn.Conv2d(ndf * prev, ndf * mult, 4, stride=2, padding=1),
                    _norm(ndf * mult), nn.LeakyReLU(0.2)]
        prev, mult = mult, min(2**n, 8)
        seq += [nn.Conv2d(ndf * prev, ndf * mult, 4, stride=1, padding=1),
                _norm(ndf * mult), nn.LeakyReLU(0.2),
                nn.Conv2d(ndf * mult, 1, 4, stride=1, padding=1)]
        self.main = nn.Sequential(*seq)
        self.grid = arch.grid

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 1 or x.shape[-2:] != (self.grid, self.grid):
            raise ConfigError(f"discriminator expects (B, 1, {self.grid}, {self.grid}), got {tuple(x.shape)}")
        return self.main(x)


def patch_grid_size(grid: int, layers: int) -> int:
    """Side of the logit grid produced by :class:`PatchDiscriminator`."""
    n = grid
    for _ in range(layers):
        n = (n + 2 - 4) // 2 + 1
    for _ in range(2):
        n = n + 2 - 4 + 1
    return n


VGG16_LAYERS = {"relu1_2": 3, "relu2_2": 8, "relu3_3": 15, "relu4_3": 22, "relu5_3": 29}
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class PerceptualExtractor(nn.Module):
    """Frozen VGG16 feature stack loaded from a local weights file.

    Input fields live in [-1, 1]; they are mapped to [0, 1], replicated to three
    channels and standardised with the ImageNet statistics the network expects.
    """

    def __init__(self, weights_path: str | Path, layers: Sequence[str] = ("relu1_2", "relu2_2", "relu3_3", "relu4_3")):
        super().__init__()
        from torchvision.models import vgg16

        path = Path(weights_path)
        if not path.is_file():
            raise ConfigError(f"perceptual weights file not found: {path}")
        unknown = set(layers) - set(VGG16_LAYERS)
        if unknown:
            raise ConfigError(f"unknown perceptual layers {sorted(unknown)}; choose from {list(VGG16_LAYERS)}")
        state = torch.load(path, map_location="cpu", weights_only=True)
        if any(k.startswith("features.") for k in state):
            state = {k[len("features."):]: v for k, v in state.items() if k.startswith("features.")}
        self.layers = tuple(sorted(layers, key=VGG16_LAYERS.get))
        last = VGG16_LAYERS[self.layers[-1]]
        features = vgg16(weights=None).features[: last + 1]
        missing, _ = features.load_state_dict(state, strict=False)
        if missing:
            raise ConfigError(f"perceptual weights file lacks {len(missing)} tensors, e.g. {missing[0]}")
        self.features = features.eval()
        for p in self.features.parameters():
            p.requires_grad_(False)
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self._taps = {VGG16_LAYERS[name] for name in self.layers}

    def train(self, mode: bool = True):
        super().train(mode)
        self.features.eval()
        return self

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = ((x + 1) / 2).expand(-1, 3, -1, -1)
        h = (h - self.mean.to(h.dtype)) / self.std.to(h.dtype)
        out = []
        for i, layer in enumerate(self.features):
            h = layer(h)
            if i in self._taps:
                out.append(h)
        return out


def perceptual_distance(a: torch.Tensor, b: torch.Tensor, extractor: PerceptualExtractor | None) -> torch.Tensor:
    """Sum over tapped layers of the mean squared feature difference; 0 when disabled."""
    if extractor is None:
        return a.new_zeros(())
    if a.dim() == 2:
        a, b = a[None, None], b[None, None]
    total = a.new_zeros(())
    for fa, fb in zip(extractor(a), extractor(b)):
        total = total + ((fa - fb) ** 2).mean()
    return total


# -- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    model: VQModel
    disc: PatchDiscriminator
    stage: int
    scale: float
    mask: dict | None = None
    attrs: dict = dataclasses.field(default_factory=dict)


def _state_arrays(prefix: str, module: nn.Module) -> dict[str, np.ndarray]:
    out = {}
    for k, v in module.state_dict().items():
        t = v.detach().cpu()
        if t.is_floating_point():
            out[f"{prefix}/{k}"] = t.to(torch.float32).numpy()
        else:
            out[f"{prefix}/{k}"] = t.to(torch.int64).numpy()
    return out


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    arrays = {**_state_arrays("model", ckpt.model), **_state_arrays("disc", ckpt.disc)}
    attrs = dict(ckpt.attrs)
    attrs.update({
        "arch": ckpt.model.arch.to_dict(),
        "stage": ckpt.stage,
        "scale": float(ckpt.scale),
        "mask": ckpt.mask,
    })
    return container.write(path, "checkpoint", arrays, attrs)


def load_checkpoint(path: str | Path) -> Checkpoint:
    src = container.read(path)
    if src.kind != "checkpoint":
        raise DataFormatError(f"{path}: expected a checkpoint container, found {src.kind!r}")
    arch = ArchSpec(**src.attrs["arch"])
    model, disc = VQModel(arch), PatchDiscriminator(arch)
    arrays = src.arrays()
    for prefix, module in (("model", model), ("disc", disc)):
        state = {k[len(prefix) + 1:]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix + "/")}
        ref = module.state_dict()
        state = {k: v.to(ref[k].dtype) if k in ref else v for k, v in state.items()}
        module.load_state_dict(state)
    attrs = {k: v for k, v in src.attrs.items() if k not in ("arch", "stage", "scale", "mask")}
    return Checkpoint(model, disc, int(src.attrs["stage"]), float(src.attrs["scale"]), src.attrs.get("mask"), attrs)
