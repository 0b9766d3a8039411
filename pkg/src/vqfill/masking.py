"""Square occlusion masks and masked model inputs.

Convention: ``M == 1`` marks a missing cell and ``M == 0`` a known one. The
known-cell indicator is ``B = 1 - M``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vqfill.errors import ConfigError


@dataclass(frozen=True)
class MaskConfig:
    name: str
    layout: str = "single"  # "single" | "grid"
    count: int = 1
    mask_side: int = 32
    grid_rows: int = 1
    grid_cols: int = 1
    placement: str = "fixed"  # "fixed" | "random"
    seed: int = 0

    def __post_init__(self):
        if self.layout not in ("single", "grid"):
            raise ConfigError(f"mask {self.name!r}: unknown layout {self.layout!r}")
        if self.placement not in ("fixed", "random"):
            raise ConfigError(f"mask {self.name!r}: unknown placement {self.placement!r}")
        if self.layout == "single" and self.count != 1:
            raise ConfigError(f"mask {self.name!r}: single layout needs count == 1")
        if self.layout == "grid" and self.count != self.grid_rows * self.grid_cols:
            raise ConfigError(f"mask {self.name!r}: count {self.count} != {self.grid_rows}x{self.grid_cols}")
        if self.mask_side < 1:
            raise ConfigError(f"mask {self.name!r}: mask_side must be positive")


def default_mask_configs(grid: int = 256) -> dict[str, MaskConfig]:
    """The three equal-area layouts (1 x half-side, 2x2 quarter-side, 4x4 eighth-side), scaled to ``grid``."""
    if grid % 8:
        raise ConfigError(f"grid {grid} must be divisible by 8")
    return {
        "mask1": MaskConfig("mask1", "single", 1, grid // 2),
        "mask4": MaskConfig("mask4", "grid", 4, grid // 4, 2, 2),
        "mask16": MaskConfig("mask16", "grid", 16, grid // 8, 4, 4),
    }


def _square_origins(config: MaskConfig, h: int, w: int) -> list[tuple[int, int]]:
    s = config.mask_side
    if config.placement == "random":
        rng = np.random.default_rng(config.seed)
        taken = np.zeros((h, w), dtype=bool)
        origins = []
        for _ in range(config.count):
            for _attempt in range(10_000):
                i, j = int(rng.integers(0, h - s + 1)), int(rng.integers(0, w - s + 1))
                if not taken[i:i + s, j:j + s].any():
                    taken[i:i + s, j:j + s] = True
                    origins.append((i, j))
                    break
            else:
                raise ConfigError(f"mask {config.name!r}: could not place {config.count} disjoint squares")
        return origins
    if config.layout == "single":
        return [(int(np.floor(h / 2 - s / 2)), int(np.floor(w / 2 - s / 2)))]
    return [
        (int(np.floor((i + 0.5) * h / config.grid_rows - s / 2)), int(np.floor((j + 0.5) * w / config.grid_cols - s / 2)))
        for i in range(config.grid_rows)
        for j in range(config.grid_cols)
    ]


def build_mask(config: MaskConfig, h: int, w: int) -> np.ndarray:
    """Missing-cell indicator of shape (h, w), dtype uint8."""
    s = config.mask_side
    m = np.zeros((h, w), dtype=np.uint8)
    for i, j in _square_origins(config, h, w):
        if i < 0 or j < 0 or i + s > h or j + s > w:
            raise ConfigError(f"mask {config.name!r}: square at ({i}, {j}) of side {s} leaves the {h}x{w} grid")
        if m[i:i + s, j:j + s].any():
            raise ConfigError(f"mask {config.name!r}: squares overlap")
        m[i:i + s, j:j + s] = 1
    return m


@dataclass
class MaskedSample:
    x: np.ndarray
    x_mask: np.ndarray
    m: np.ndarray


def apply_mask(x: np.ndarray, m: np.ndarray) -> MaskedSample:
    x = np.asarray(x)
    m = np.asarray(m)
    if x.shape != m.shape:
        raise ConfigError(f"field shape {x.shape} does not match mask shape {m.shape}")
    return MaskedSample(x=x, x_mask=x * (1 - m).astype(x.dtype), m=m)


def stack_input(sample: MaskedSample) -> np.ndarray:
    """Channels: masked field, known indicator (1 - M), missing indicator (M)."""
    m = sample.m.astype(sample.x_mask.dtype)
    return np.stack([sample.x_mask, 1 - m, m])
