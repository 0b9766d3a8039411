"""Completion metrics, turbulence statistics and evaluation reports."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch

from vqfill import container
from vqfill.dataset import DatasetContainer
from vqfill.errors import AlignmentError, DataFormatError, MetricError, StageMismatchError
from vqfill.masking import MaskConfig, build_mask
from vqfill.model import Checkpoint
from vqfill.solver import FlowField, vorticity_to_velocity

PDF_BINS = 81
PDF_SIGMAS = 4.0
REFERENCE = "ground_truth"
MODEL = "vqfill"
ZERO_FILL = "zero_fill"


def _scaled_norm(v: np.ndarray) -> float:
    """Euclidean norm computed as max|v| * |v / max|v||, safe from under- and overflow."""
    peak = float(np.max(np.abs(v)))
    if peak == 0:
        return 0.0
    return peak * float(np.sqrt(np.sum((v / peak) ** 2)))


def relative_l2_masked(pred: np.ndarray, x: np.ndarray, m: np.ndarray) -> float:
    """sqrt( sum_M (pred - x)^2 / sum_M x^2 ) over the missing cells M."""
    sel = np.asarray(m).astype(bool)
    if pred.shape != x.shape or x.shape != sel.shape:
        raise MetricError(f"shape mismatch: {pred.shape}, {x.shape}, {sel.shape}")
    if not sel.any():
        raise MetricError("relative L2 undefined for an empty mask")
    ref = np.asarray(x, dtype=np.float64)[sel]
    den = _scaled_norm(ref)
    if den == 0:
        raise MetricError("relative L2 undefined: reference is zero on the masked region")
    return float(_scaled_norm(np.asarray(pred, dtype=np.float64)[sel] - ref) / den)


def energy_spectrum(field: FlowField | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Kinetic-energy spectrum binned on integer wavenumber shells.

    With ``u_hat = fft2(u) / N^2`` (so that ``sum |u_hat|^2 = mean |u|^2``),
    ``E(k) = 1/2 sum_{round(|k'|) = k} (|u1_hat|^2 + |u2_hat|^2)``, hence
    ``sum_k E(k)`` equals the spatial mean of ``|u|^2 / 2``. Returns shell
    indices ``0..kmax`` and ``E``.
    """
    if not isinstance(field, FlowField):
        field = FlowField(field)
    n = field.n
    u1, u2 = vorticity_to_velocity(field)
    e_mode = 0.5 * (np.abs(np.fft.fft2(u1)) ** 2 + np.abs(np.fft.fft2(u2)) ** 2) / float(n) ** 4
    k = np.fft.fftfreq(n, d=1.0 / n)
    shell = np.rint(np.hypot(k[:, None], k[None, :])).astype(int)
    spectrum = np.bincount(shell.ravel(), weights=e_mode.ravel())
    return np.arange(spectrum.size), spectrum


def pdf_range(fields: np.ndarray, sigmas: float = PDF_SIGMAS) -> tuple[float, float]:
    """[mean - 4 std, mean + 4 std] of the pooled values."""
    vals = np.asarray(fields, dtype=np.float64).ravel()
    mu, sd = float(vals.mean()), float(vals.std())
    if sd == 0:
        sd = 1.0
    return mu - sigmas * sd, mu + sigmas * sd


def vorticity_pdf(fields: Iterable[np.ndarray] | np.ndarray, num_bins: int = PDF_BINS,
                  value_range: tuple[float, float] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Normalized density of pooled pointwise vorticity on uniform bins."""
    if isinstance(fields, np.ndarray):
        pooled = fields.astype(np.float64, copy=False).ravel()
    else:
        parts = [np.asarray(f.values if isinstance(f, FlowField) else f, dtype=np.float64).ravel() for f in fields]
        if not parts:
            raise MetricError("vorticity_pdf needs at least one field")
        pooled = np.concatenate(parts)
    if value_range is None:
        value_range = pdf_range(pooled)
    density, edges = np.histogram(pooled, bins=num_bins, range=value_range, density=True)
    return edges, density


# -- model completion ---------------------------------------------------------

@torch.no_grad()
def complete(ckpt: Checkpoint, frames: np.ndarray, m: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Raw decoder predictions (physical units) for masked inputs built from ``frames``."""
    model = ckpt.model.eval()
    mt = torch.from_numpy(np.asarray(m, dtype=np.float32))[None, None]
    out = []
    for start in range(0, len(frames), batch_size):
        x = torch.from_numpy((frames[start:start + batch_size] / ckpt.scale).astype(np.float32))[:, None]
        x_mask = x * (1 - mt)
        inp = torch.cat([x_mask, (1 - mt).expand_as(x), mt.expand_as(x)], dim=1)
        z, _ = model.quantize(model.encode(inp))
        out.append(model.decode(z)[:, 0].double().numpy() * ckpt.scale)
    return np.concatenate(out) if out else np.zeros((0,) + tuple(m.shape))


def composite(frames: np.ndarray, pred: np.ndarray, m: np.ndarray) -> np.ndarray:
    return frames * (1 - m) + pred * m


# -- baselines ----------------------------------------------------------------

def write_completions(path: str | Path, frames: np.ndarray, frame_index: np.ndarray, name: str = "") -> Path:
    """Store externally produced completions aligned to dataset frame indices."""
    return container.write(path, "completions", {"frames": np.asarray(frames, dtype="<f4"),
                                                 "frame_index": np.asarray(frame_index, dtype="<i8")}, {"name": name})


def import_baseline(path: str | Path, dataset: DatasetContainer) -> np.ndarray:
    """Load completions and return them ordered like the dataset's test frames."""
    src = container.read(path)
    if src.kind != "completions":
        raise DataFormatError(f"{path}: expected a completions container, found {src.kind!r}")
    frames = src.array("frames")
    index = src.array("frame_index")
    grid = dataset.spec.out_grid
    if frames.ndim != 3 or frames.shape[1:] != (grid, grid) or len(frames) != len(index):
        raise DataFormatError(f"{path}: completions shaped {frames.shape} with {len(index)} indices, expected (*, {grid}, {grid})")
    lookup = {int(i): k for k, i in enumerate(index)}
    out = np.empty((len(dataset.indices("test")), grid, grid), dtype=np.float64)
    for row, idx in enumerate(dataset.indices("test")):
        if int(idx) not in lookup:
            raise AlignmentError(f"{path}: no completion for test frame index {int(idx)}")
        out[row] = frames[lookup[int(idx)]]
    return out


# -- reports ------------------------------------------------------------------

@dataclass
class ModelEntry:
    errors: np.ndarray
    spectrum: np.ndarray
    pdf: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors))

    @property
    def std(self) -> float:
        return float(np.std(self.errors))


@dataclass
class EvalReport:
    mask: dict
    k: np.ndarray
    pdf_edges: np.ndarray
    models: dict[str, ModelEntry]
    frame_index: np.ndarray
    samples: dict[str, np.ndarray] = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)

    def summary(self) -> dict[str, dict[str, float]]:
        return {name: {"mean": e.mean, "std": e.std} for name, e in self.models.items()}


def evaluate_completions(truth: np.ndarray, m: np.ndarray, completions: Mapping[str, np.ndarray],
                         mask: dict | None = None, frame_index: np.ndarray | None = None,
                         num_samples: int = 5, pdf_bins: int = PDF_BINS, pdf_sigmas: float = PDF_SIGMAS) -> EvalReport:
    """Score each completion set against ``truth``; spectra and PDFs use composite fields."""
    truth = np.asarray(truth, dtype=np.float64)
    m = np.asarray(m)
    edges, _ = vorticity_pdf(truth, pdf_bins, pdf_range(truth, pdf_sigmas))
    value_range = (float(edges[0]), float(edges[-1]))
    k = energy_spectrum(truth[0])[0]
    sets = {REFERENCE: truth, **completions}
    models = {}
    for name, pred in sets.items():
        pred = np.asarray(pred, dtype=np.float64)
        if pred.shape != truth.shape:
            raise DataFormatError(f"completion set {name!r} shaped {pred.shape}, expected {truth.shape}")
        comp = composite(truth, pred, m)
        errors = np.array([relative_l2_masked(p, x, m) for p, x in zip(pred, truth)])
        spectrum = np.mean([energy_spectrum(f)[1] for f in comp], axis=0)
        _, density = vorticity_pdf(comp, pdf_bins, value_range)
        models[name] = ModelEntry(errors, spectrum, density)
    pick = np.linspace(0, len(truth) - 1, min(num_samples, len(truth))).round().astype(int)
    samples = {"index": pick, "truth": truth[pick], "mask": m.astype(np.uint8)}
    for name, pred in completions.items():
        samples[name] = composite(truth[pick], np.asarray(pred, dtype=np.float64)[pick], m)
    return EvalReport(
        mask=dict(mask or {}), k=k, pdf_edges=edges, models=models,
        frame_index=np.arange(len(truth)) if frame_index is None else np.asarray(frame_index),
        samples=samples, attrs={"statistics_on": "composite", "pdf_bins": pdf_bins, "pdf_range_sigmas": pdf_sigmas},
    )


def evaluate(ckpt: Checkpoint, dataset: DatasetContainer, mask: MaskConfig | None = None,
             baselines: Mapping[str, np.ndarray] | None = None, num_samples: int = 5,
             pdf_bins: int = PDF_BINS, pdf_sigmas: float = PDF_SIGMAS) -> EvalReport:
    """Complete every test frame with a stage-2 checkpoint and score it alongside any baselines."""
    if ckpt.stage != 2:
        raise StageMismatchError(f"evaluation needs a stage-2 checkpoint, got stage {ckpt.stage}")
    if ckpt.mask is None:
        raise StageMismatchError("checkpoint carries no mask configuration")
    ckpt_mask = MaskConfig(**ckpt.mask)
    if mask is not None and mask != ckpt_mask:
        raise StageMismatchError(f"checkpoint was fine-tuned for mask {ckpt_mask.name!r}, not {mask.name!r}")
    test = dataset.indices("test")
    if test.size == 0:
        raise DataFormatError("dataset has no test frames")
    truth = dataset.frames[test].astype(np.float64)
    grid = truth.shape[-1]
    m = build_mask(ckpt_mask, grid, grid)
    completions = {MODEL: complete(ckpt, truth, m), ZERO_FILL: np.zeros_like(truth)}
    for name, pred in (baselines or {}).items():
        completions[name] = pred
    return evaluate_completions(truth, m, completions, dataclasses.asdict(ckpt_mask), test,
                                num_samples, pdf_bins, pdf_sigmas)


def write_report(report: EvalReport, path: str | Path) -> Path:
    arrays = {"k": report.k, "pdf_edges": report.pdf_edges, "frame_index": report.frame_index.astype("<i8")}
    for name, e in report.models.items():
        arrays[f"{name}/errors"] = e.errors
        arrays[f"{name}/spectrum"] = e.spectrum
        arrays[f"{name}/pdf"] = e.pdf
    for name, arr in report.samples.items():
        arrays[f"samples/{name}"] = arr if arr.dtype != np.int64 else arr.astype("<i8")
    attrs = {**report.attrs, "mask": report.mask, "models": list(report.models), "summary": report.summary(),
             "sample_sets": list(report.samples)}
    return container.write(path, "report", arrays, attrs)


def read_report(path: str | Path) -> EvalReport:
    src = container.read(path)
    if src.kind != "report":
        raise DataFormatError(f"{path}: expected a report container, found {src.kind!r}")
    a = src.arrays()
    models = {name: ModelEntry(a[f"{name}/errors"], a[f"{name}/spectrum"], a[f"{name}/pdf"]) for name in src.attrs["models"]}
    samples = {name: a[f"samples/{name}"] for name in src.attrs["sample_sets"]}
    attrs = {k: v for k, v in src.attrs.items() if k not in ("mask", "models", "summary", "sample_sets")}
    return EvalReport(src.attrs["mask"], a["k"], a["pdf_edges"], models, a["frame_index"], samples, attrs)
