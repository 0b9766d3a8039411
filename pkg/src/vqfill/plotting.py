"""Figures for evaluation reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from vqfill.evaluation import REFERENCE, ZERO_FILL, EvalReport  # noqa: E402

CMAP_FIELD = "RdBu_r"
CMAP_ERROR = "magma"


def _style(ax, xlabel="", ylabel=""):
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.tick_params(direction="in", which="both")
    ax.grid(alpha=0.3, lw=0.5)


def _curve_style(name: str) -> dict:
    if name == REFERENCE:
        return {"color": "k", "lw": 2.0, "label": "ground truth"}
    if name == ZERO_FILL:
        return {"color": "0.6", "lw": 1.0, "ls": ":", "label": "zero fill"}
    return {"lw": 1.3, "label": name}


def plot_spectrum(report: EvalReport, ax=None):
    if ax is None:
        _, ax = plt.subplots(figsize=(5, 4))
    k = report.k
    for name, entry in report.models.items():
        sel = (k > 0) & (entry.spectrum > 0)
        ax.loglog(k[sel], entry.spectrum[sel], **_curve_style(name))
    _style(ax, "wavenumber $k$", "$E(k)$")
    ax.set_title(f"energy spectrum ({report.mask.get('name', '')})")
    ax.legend(frameon=False, fontsize=8)
    return ax


def plot_pdf(report: EvalReport, ax=None):
    if ax is None:
        _, ax = plt.subplots(figsize=(5, 4))
    edges = report.pdf_edges
    centers = 0.5 * (edges[1:] + edges[:-1])
    for name, entry in report.models.items():
        ax.semilogy(centers, np.where(entry.pdf > 0, entry.pdf, np.nan), **_curve_style(name))
    _style(ax, r"vorticity $\omega$", "density")
    ax.set_title(f"vorticity distribution ({report.mask.get('name', '')})")
    ax.legend(frameon=False, fontsize=8)
    return ax


def _completion_sets(report: EvalReport) -> list[str]:
    return [n for n in report.samples if n not in ("index", "truth", "mask")]


def plot_samples(report: EvalReport):
    """One row per sample: masked input, each completion, ground truth."""
    truth, mask = report.samples["truth"], report.samples["mask"].astype(bool)
    names = _completion_sets(report)
    rows, cols = len(truth), len(names) + 2
    fig, axes = plt.subplots(rows, cols, figsize=(2.0 * cols, 2.0 * rows), squeeze=False)
    for r in range(rows):
        lim = float(np.abs(truth[r]).max()) or 1.0
        masked = np.where(mask, np.nan, truth[r])
        panels = [("input", masked)] + [(n, report.samples[n][r]) for n in names] + [("ground truth", truth[r])]
        for c, (title, img) in enumerate(panels):
            ax = axes[r, c]
            ax.imshow(img.T, origin="lower", cmap=CMAP_FIELD, vmin=-lim, vmax=lim)
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(title, fontsize=9)
    fig.tight_layout()
    return fig


def plot_errors(report: EvalReport):
    """Pointwise absolute completion error for each completion set and sample."""
    truth = report.samples["truth"]
    names = _completion_sets(report)
    rows, cols = len(truth), max(1, len(names))
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.0 * rows), squeeze=False)
    for r in range(rows):
        errs = [np.abs(report.samples[n][r] - truth[r]) for n in names]
        vmax = max((float(e.max()) for e in errs), default=1.0) or 1.0
        for c, (name, err) in enumerate(zip(names, errs)):
            ax = axes[r, c]
            im = ax.imshow(err.T, origin="lower", cmap=CMAP_ERROR, vmin=0, vmax=vmax)
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(f"|error| {name}", fontsize=9)
        fig.colorbar(im, ax=axes[r, -1], fraction=0.046)
    return fig


def render_report(report: EvalReport, out_dir: str | Path, dpi: int = 120) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for stem, draw in (("spectrum", plot_spectrum), ("vorticity_pdf", plot_pdf)):
        fig, ax = plt.subplots(figsize=(5, 4))
        draw(report, ax)
        fig.tight_layout()
        written.append(out / f"{stem}.png")
        fig.savefig(written[-1], dpi=dpi)
        plt.close(fig)
    for stem, draw in (("samples", plot_samples), ("errors", plot_errors)):
        fig = draw(report)
        written.append(out / f"{stem}.png")
        fig.savefig(written[-1], dpi=dpi)
        plt.close(fig)
    return written
