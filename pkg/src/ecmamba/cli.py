"""Command-line entry points: train, infer, eval, bench-scan."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import ContractError, Tensor, no_grad
from .bench import bench_scan, format_table
from .data import PairGenerator, load_gt_dir
from .io import (CheckpointError, ConfigError, RunConfig, load_model, load_run_config, quantize, read_png,
                 save_model, write_gray_png, write_png)
from .metrics import MetricReport
from .network import ECMamba
from .training import SSIM_WINDOW, NonFiniteLoss, fit


def warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


def fail(msg: str, code: int) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def enhance(model: ECMamba, img: np.ndarray, arms: list | None = None) -> np.ndarray:
    """Correct one [3, H, W] image; odd sizes are reflect-padded to even and cropped back.

    If ``arms`` is a list, the activation response maps of every scan block are appended to it.
    """
    _, H, W = img.shape
    pads = [(0, 0)] + [(0, n % 2) for n in (H, W)]
    # a single row/column cannot be reflected; repeat it instead
    mode = "reflect" if min(H, W) > 1 else "edge"
    padded = np.pad(img, pads, mode=mode)
    dtype = model.estimator.stem.weight.dtype
    with no_grad():
        res = model(Tensor(padded[None].astype(dtype)), keep_arms=arms is not None)
    if arms is not None:
        arms.extend(res.arms)
    out = res.I_out.data[0]
    return out[:, :H, :W].astype(np.float64)


# ---------------------------------------------------------------------------
# train

def cmd_train(args) -> int:
    if args.config is not None and not Path(args.config).is_file():
        return fail(f"config not found: {args.config}", 2)
    try:
        cfg = load_run_config(args.config) if args.config else RunConfig()
        overrides = {k: v for k, v in (("iters", args.iters), ("seed", args.seed)) if v is not None}
        if overrides:
            cfg = RunConfig(**{**cfg.__dict__, **overrides})
    except ConfigError as exc:
        return fail(f"invalid config: {exc}", 2)

    images = None
    if args.data_root is not None:
        if not Path(args.data_root).is_dir():
            return fail(f"data root not found: {args.data_root}", 2)
        try:
            images = load_gt_dir(args.data_root)
        except (ContractError, OSError) as exc:
            return fail(str(exc), 2)

    out = Path(args.out_checkpoint)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out.with_suffix(out.suffix + ".log")
    model = ECMamba(cfg.model_config(), seed=cfg.seed)
    if not args.quiet:
        print(f"model parameters: {model.num_parameters()}")
    gen = PairGenerator(cfg.seed, cfg.crop, images, augment=True, manifest=args.manifest)

    with log_path.open("w") as log:
        def log_line(line: str) -> None:
            log.write(line + "\n")
            log.flush()
            if not args.quiet:
                print(line)

        log_line("# iter, lr, total, l1, ssim, per, constraint_L, constraint_R")
        try:
            result = fit(model, gen.batches(cfg.batch), cfg.train_config(), cfg.loss_weights(), log_line)
        except NonFiniteLoss as exc:
            return fail(str(exc), 1)
    save_model(out, model)
    if not args.quiet:
        print(f"wrote {out} after {cfg.iters} iterations ({result.seconds:.1f} s); log at {log_path}")
    return 0


# ---------------------------------------------------------------------------
# infer

def _load(path: str) -> ECMamba:
    if not Path(path).is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return load_model(path)


def cmd_infer(args) -> int:
    src = Path(args.input)
    if not src.exists():
        return fail(f"input not found: {src}", 2)
    try:
        model = _load(args.checkpoint)
    except CheckpointError as exc:
        return fail(str(exc), 1)
    files = sorted(p for p in src.iterdir() if p.is_file()) if src.is_dir() else [src]
    if not files:
        return fail(f"no input images in {src}", 1)
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = 0
    for path in files:
        try:
            img = read_png(path)
        except (OSError, ContractError, ValueError) as exc:
            warn(f"skipping {path.name}: {exc}")
            continue
        target = out_dir / f"{path.stem}_corrected.png"
        arms: list | None = [] if args.dump_arm else None
        write_png(target, enhance(model, img, arms))
        if arms:
            for i, arm in enumerate(arms):
                write_gray_png(out_dir / f"{path.stem}_arm{i}.png", arm.freq[0])
        written += 1
        print(target)
    if written == 0:
        return fail("no input image could be read", 1)
    return 0


# ---------------------------------------------------------------------------
# eval

def find_pairs(root: Path) -> tuple[list[str], list[str]]:
    """Names with both ``<name>_lq.png`` and ``<name>_gt.png``, and the unpaired files."""
    lq = {p.name[:-len("_lq.png")] for p in root.glob("*_lq.png")}
    gt = {p.name[:-len("_gt.png")] for p in root.glob("*_gt.png")}
    unpaired = [f"{n}_lq.png" for n in sorted(lq - gt)] + [f"{n}_gt.png" for n in sorted(gt - lq)]
    return sorted(lq & gt), unpaired


def evaluate_pairs(root: Path, model: ECMamba | None) -> MetricReport:
    """Scores the corrected LQ image (or the LQ image itself without a model) against GT."""
    names, unpaired = find_pairs(root)
    for name in unpaired:
        warn(f"{name} has no partner; excluded")
    report = MetricReport()
    for name in names:
        try:
            lq, gt = read_png(root / f"{name}_lq.png"), read_png(root / f"{name}_gt.png")
        except (OSError, ContractError, ValueError) as exc:
            warn(f"skipping {name}: {exc}")
            continue
        if lq.shape != gt.shape:
            warn(f"skipping {name}: sizes {lq.shape[1:]} and {gt.shape[1:]} differ")
            continue
        if min(gt.shape[1:]) < SSIM_WINDOW:
            warn(f"skipping {name}: smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
            continue
        # score exactly what infer would write: the 8-bit quantised output
        out = lq if model is None else quantize(enhance(model, lq)).transpose(2, 0, 1) / 255.0
        report.add(name, out, gt)
    return report


def cmd_eval(args) -> int:
    root = Path(args.pairs)
    if not root.is_dir():
        return fail(f"pairs directory not found: {root}", 2)
    try:
        model = _load(args.checkpoint) if args.checkpoint else None
    except CheckpointError as exc:
        return fail(str(exc), 1)
    report = evaluate_pairs(root, model)
    if not report.names:
        return fail("no pairs found", 1)
    print(report.table())
    return 0


# ---------------------------------------------------------------------------
# bench-scan

def _lengths(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("lengths must be >= 1")
    return values


def cmd_bench(args) -> int:
    rows = bench_scan(args.lengths, args.dim, args.state, args.repeats, args.seed)
    print(format_table(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecmamba", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on procedural or on-disk pairs")
    p.add_argument("--config", help="key=value run config (defaults if omitted)")
    p.add_argument("--data-root", help="directory with a gt/ folder of clean PNGs; procedural images if omitted")
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--iters", type=int, help="override the config's iteration count")
    p.add_argument("--seed", type=int, help="override the config's seed")
    p.add_argument("--log", help="training log path (default: <checkpoint>.log)")
    p.add_argument("--manifest", help="write the generated pair parameters here")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="correct PNG images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="PNG file or directory")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--dump-arm", action="store_true",
                   help="also write each block's activation response map as <stem>_arm<i>.png")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM over <name>_lq.png / <name>_gt.png pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--checkpoint", help="score model outputs; without it the LQ images are scored")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-scan", help="time the recurrent and parallel scan kernels")
    p.add_argument("--lengths", type=_lengths, default=[1024, 2048])
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--state", type=int, default=16)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ContractError as exc:
        return fail(str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
