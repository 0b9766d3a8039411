"""Command-line entry point: generate, train-stage1, train-stage2, evaluate, plot, export-mask.

Environment:
  VQFILL_OUT_ROOT  prefix applied to relative ``--out`` paths
  VQFILL_THREADS   number of torch intra-op threads
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path


from vqfill import __version__, config as config_mod, container
from vqfill.errors import ConfigError, StageMismatchError, VQFillError


MANIFEST = "manifest.json"


def _out_path(raw: str) -> Path:
    p = Path(raw)
    root = os.environ.get("VQFILL_OUT_ROOT")
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _artifact_checksums(out: Path) -> dict[str, str]:
    if out.is_file():
        return {out.name: container.sha256_file(out)}
    return {
        str(p.relative_to(out)): container.sha256_file(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != MANIFEST
    }


def _input_checksums(paths: dict[str, str | None]) -> dict[str, str]:
    sums = {}
    for role, p in paths.items():
        if p is None:
            continue
        meta = Path(p) / container.META_FILE
        if meta.is_file():
            sums[role] = json.loads(meta.read_text(encoding="utf-8"))["payload"]["sha256"]
    return sums


def _write_manifest(out: Path, command: str, argv: list[str], cfg: config_mod.PipelineConfig | None,
                    inputs: dict[str, str | None], extra: dict | None = None) -> None:
    target = out if out.is_dir() else out.parent
    manifest = {
        "command": command,
        "argv": argv,
        "version": __version__,
        "config": config_mod.dumps(cfg) if cfg is not None else None,
        "seeds": {
            "global": cfg.seed,
            "dataset_base_seed": cfg.dataset.base_seed,
            "stage1": cfg.stage1.seed,
            "stage2": cfg.stage2.seed,
        } if cfg is not None else {},
        "inputs": _input_checksums(inputs),
        "artifacts": _artifact_checksums(out),
        "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        **(extra or {}),
    }
    (target / MANIFEST).write_text(container.dumps_json(manifest), encoding="utf-8")


def cmd_generate(args, argv) -> None:
    from vqfill.dataset import generate_dataset, write_container

    cfg = config_mod.load(args.config)
    out = _out_path(args.out)
    data = generate_dataset(cfg.dataset)
    write_container(data, out)
    print(f"wrote {len(data)} frames ({len(data.indices('train'))} train / {len(data.indices('test'))} test) to {out}")
    _write_manifest(out, "generate", argv, cfg, {})


def cmd_train_stage1(args, argv) -> None:
    from vqfill.dataset import read_container
    from vqfill.training import train_stage1

    cfg = config_mod.load(args.config)
    out = _out_path(args.out)
    data = read_container(args.data)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, hist = train_stage1(data, cfg.stage1, cfg.model, out=out, log_path=out / "train_log.jsonl")
    ckpt.attrs["data"] = str(Path(args.data).resolve())
    from vqfill.model import save_checkpoint

    save_checkpoint(out, ckpt)
    print(f"stage 1: {len(hist)} steps, final recon {hist[-1].recon if hist else float('nan'):.5f}; checkpoint {out}")
    _write_manifest(out, "train-stage1", argv, cfg, {"data": args.data})


def cmd_train_stage2(args, argv) -> None:
    from vqfill.dataset import read_container
    from vqfill.model import load_checkpoint, save_checkpoint
    from vqfill.training import train_stage2

    cfg = config_mod.load(args.config)
    mask = cfg.mask(args.mask)
    stage1 = load_checkpoint(args.ckpt)
    if stage1.stage != 1:
        raise StageMismatchError(f"{args.ckpt} is a stage-{stage1.stage} checkpoint; stage 2 starts from stage 1")
    data_path = args.data or stage1.attrs.get("data")
    if not data_path:
        raise ConfigError("no dataset given (--data) and none recorded in the stage-1 checkpoint")
    data = read_container(data_path)
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, hist = train_stage2(stage1, data, mask, cfg.stage2, out=out, log_path=out / "train_log.jsonl")
    ckpt.attrs["data"] = str(Path(data_path).resolve())
    save_checkpoint(out, ckpt)
    print(f"stage 2 ({mask.name}): {len(hist)} steps; checkpoint {out}")
    _write_manifest(out, "train-stage2", argv, cfg, {"stage1": args.ckpt, "data": data_path})


def _parse_baselines(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise ConfigError(f"--baseline expects name=path, got {item!r}")
        out[name] = path
    return out


def cmd_evaluate(args, argv) -> None:
    from vqfill.dataset import read_container
    from vqfill.evaluation import evaluate, import_baseline, write_report
    from vqfill.model import load_checkpoint

    cfg = config_mod.load(args.config) if args.config else config_mod.PipelineConfig()
    if args.ckpt is None:
        raise StageMismatchError("evaluate needs a stage-2 checkpoint (--ckpt); run train-stage1 and train-stage2 first")
    ckpt_src = container.read(args.ckpt)
    if ckpt_src.kind != "checkpoint":
        raise StageMismatchError(f"{args.ckpt} is a {ckpt_src.kind} container, not a stage-2 checkpoint")
    ckpt = load_checkpoint(args.ckpt)
    data = read_container(args.data)
    mask = cfg.mask(args.mask) if args.mask else None
    baselines = {name: import_baseline(p, data) for name, p in _parse_baselines(args.baseline).items()}
    ev = cfg.evaluation
    report = evaluate(ckpt, data, mask, baselines, ev.num_samples, ev.pdf_bins, ev.pdf_sigmas)
    out = _out_path(args.out)
    write_report(report, out)
    for name, s in report.summary().items():
        print(f"{report.mask['name']}\t{name}\trelative_l2_mean={s['mean']:.4f}\tstd={s['std']:.4f}")
    _write_manifest(out, "evaluate", argv, cfg if args.config else None,
                    {"ckpt": args.ckpt, "data": args.data, **_parse_baselines(args.baseline)})


def cmd_plot(args, argv) -> None:
    from vqfill.evaluation import read_report
    from vqfill.plotting import render_report

    report = read_report(args.report)
    out = _out_path(args.out)
    paths = render_report(report, out)
    for p in paths:
        print(p)
    _write_manifest(out, "plot", argv, None, {"report": args.report})


def cmd_export_mask(args, argv) -> None:
    from vqfill.masking import build_mask

    cfg = config_mod.load(args.config)
    mask = cfg.mask(args.mask)
    grid = args.grid or cfg.dataset.out_grid
    out = _out_path(args.out)
    m = build_mask(mask, grid, grid)

    container.write(out, "mask", {"mask": m}, {"mask": dataclasses.asdict(mask), "grid": grid})
    print(f"mask {mask.name}: {int(m.sum())} of {m.size} cells missing -> {out}")
    _write_manifest(out, "export-mask", argv, cfg, {})


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vqfill", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"vqfill {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("generate", help="simulate and store the vorticity corpus")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("train-stage1", help="train the autoencoder on complete fields")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_stage1)

    s = sub.add_parser("train-stage2", help="fine-tune for completion under one mask layout")
    s.add_argument("--config", required=True)
    s.add_argument("--ckpt", required=True, help="stage-1 checkpoint")
    s.add_argument("--mask", required=True)
    s.add_argument("--data", help="dataset (defaults to the one recorded in the stage-1 checkpoint)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_stage2)

    s = sub.add_parser("evaluate", help="score a stage-2 checkpoint on the test split")
    s.add_argument("--config")
    s.add_argument("--ckpt")
    s.add_argument("--data", required=True)
    s.add_argument("--mask")
    s.add_argument("--baseline", action="append", default=[], metavar="NAME=PATH")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("plot", help="render report figures")
    s.add_argument("--report", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("export-mask", help="write a mask layout as a 0/1 array container")
    s.add_argument("--config", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--grid", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_mask)
    return p


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    threads = os.environ.get("VQFILL_THREADS")
    if threads:
        import torch

        torch.set_num_threads(int(threads))
    try:
        args.func(args, argv)
    except VQFillError as exc:
        category = type(exc).__name__
        print(f"vqfill: error [{category}]: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


def main() -> None:
    sys.exit(run())
