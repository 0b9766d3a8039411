"""Corpus generation, persistence and loading."""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from vqfill import __version__, container
from vqfill.errors import ConfigError, DataFormatError, VQFillError
from vqfill.solver import FlowField, SolverParams, grf_sample, simulate

log = logging.getLogger(__name__)

TRAIN, TEST = 0, 1


@dataclass(frozen=True)
class DatasetSpec:
    num_runs: int = 8
    train_runs: int = 6
    duration: float = 10.0
    sample_interval: float = 1.0 / 32
    sim_grid: int = 256
    out_grid: int = 64
    base_seed: int = 0
    solver: SolverParams = field(default_factory=SolverParams)
    skip_initial_seconds: float = 0.0
    workers: int = 1

    def __post_init__(self):
        if self.num_runs < 1 or not 0 <= self.train_runs < self.num_runs:
            raise ConfigError(f"need 0 <= train_runs < num_runs, got {self.train_runs}/{self.num_runs}")
        if self.out_grid < 1 or self.sim_grid % self.out_grid:
            raise ConfigError(f"sim_grid {self.sim_grid} is not a multiple of out_grid {self.out_grid}")
        if self.skip_initial_seconds < 0 or self.skip_initial_seconds > self.duration:
            raise ConfigError("skip_initial_seconds must lie in [0, duration]")

    @property
    def frames_per_run(self) -> int:
        total = int(round(self.duration / self.sample_interval)) + 1
        return total - self.skipped_frames

    @property
    def skipped_frames(self) -> int:
        return int(np.ceil(self.skip_initial_seconds / self.sample_interval - 1e-9))

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DatasetSpec":
        d = dict(d)
        d["solver"] = SolverParams(**d.get("solver", {}))
        return cls(**d)


class DatasetContainer:
    """Frames with per-frame split, run index and time.

    ``frames`` is loaded on first access when the container came from disk, so
    ``spec`` and the bookkeeping arrays can be inspected cheaply.
    """

    def __init__(self, spec: DatasetSpec, frames: np.ndarray | None, split: np.ndarray,
                 run: np.ndarray, time: np.ndarray, created: dict | None = None, source=None):
        self.spec = spec
        self._frames = frames
        self.split = np.asarray(split, dtype=np.int8)
        self.run = np.asarray(run, dtype=np.int32)
        self.time = np.asarray(time, dtype=np.float64)
        self.created = dict(created or {})
        self._source = source

    @property
    def frames(self) -> np.ndarray:
        if self._frames is None:
            self._frames = self._source.array("frames")
        return self._frames

    @property
    def frames_loaded(self) -> bool:
        return self._frames is not None

    def __len__(self) -> int:
        return len(self.split)

    def indices(self, which: str) -> np.ndarray:
        code = {"train": TRAIN, "test": TEST}[which]
        return np.flatnonzero(self.split == code)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetContainer):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.created == other.created
            and np.array_equal(self.split, other.split)
            and np.array_equal(self.run, other.run)
            and np.array_equal(self.time, other.time)
            and self.frames.dtype == other.frames.dtype
            and np.array_equal(self.frames, other.frames)
        )


def downsample(field: FlowField, factor: int) -> FlowField:
    """Keep every ``factor``-th node in each direction, starting at index 0."""
    if not isinstance(factor, (int, np.integer)) or factor < 1 or field.n % factor:
        raise ConfigError(f"downsampling factor {factor!r} does not divide grid size {field.n}")
    return FlowField(field.values[::factor, ::factor].copy(), time=field.time, domain_size=field.domain_size)


def _run_one(spec: DatasetSpec, run_idx: int) -> tuple[np.ndarray, np.ndarray]:
    seed = spec.base_seed + run_idx
    try:
        initial = grf_sample(seed, spec.sim_grid)
        traj = simulate(initial, spec.duration, spec.sample_interval, spec.solver, seed=seed)
    except VQFillError as exc:
        raise type(exc)(f"run {run_idx} (seed {seed}): {exc}") from exc
    factor = spec.sim_grid // spec.out_grid
    kept = traj.frames[spec.skipped_frames:]
    frames = np.stack([downsample(f, factor).values for f in kept]).astype(np.float32)
    times = np.array([f.time for f in kept])
    log.info("run %d (seed %d): %d frames, max|w|=%.3g", run_idx, seed, len(kept), np.abs(frames).max())
    return frames, times


def generate_dataset(spec: DatasetSpec) -> DatasetContainer:
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            results = list(pool.map(_run_one, [spec] * spec.num_runs, range(spec.num_runs)))
    else:
        results = [_run_one(spec, r) for r in range(spec.num_runs)]
    frames = np.concatenate([r[0] for r in results])
    times = np.concatenate([r[1] for r in results])
    per_run = spec.frames_per_run
    run = np.repeat(np.arange(spec.num_runs, dtype=np.int32), per_run)
    split = np.where(run < spec.train_runs, TRAIN, TEST).astype(np.int8)
    created = {"generator": f"vqfill {__version__}", "frames_per_run": per_run}
    return DatasetContainer(spec, frames, split, run, times, created)


def write_container(c: DatasetContainer, path: str | Path) -> Path:
    attrs = {"spec": c.spec.to_dict(), "created": c.created, "num_frames": len(c)}
    arrays = {"frames": c.frames.astype("<f4"), "split": c.split, "run": c.run, "time": c.time}
    return container.write(path, "dataset", arrays, attrs)


def read_container(path: str | Path) -> DatasetContainer:
    src = container.read(path)
    if src.kind != "dataset":
        raise DataFormatError(f"{path}: expected a dataset container, found {src.kind!r}")
    spec = DatasetSpec.from_dict(src.attrs["spec"])
    return DatasetContainer(
        spec, None, src.array("split"), src.array("run"), src.array("time"),
        created=src.attrs.get("created"), source=src,
    )
