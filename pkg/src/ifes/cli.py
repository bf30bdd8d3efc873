"""Command-line entry point: ``ifes train|fuse|eval|gradcheck|ablate|synth``.

Exit codes: 0 success, 2 configuration, 3 data, 4 integrity, 5 verification,
6 training failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
import zlib
from pathlib import Path

import numpy as np

from . import plotting
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .errors import ConfigError, DataError, IfesError, RegistrationError, VerificationError
from .gradcheck import THRESHOLD, run_gradcheck
from .imageio import (
    find_groups,
    from_tensor,
    load_gray_image,
    load_pairs,
    sample_patches,
    save_gray_image,
    to_tensor,
)
from .metrics import COLUMNS, RANGE_NOTE, MetricReport, evaluate_pair, fmt
from .network import build_network, forward, fuse_with_weight_maps
from .synthetic import synthetic_pair
from .training import train

logger = logging.getLogger("ifes")

OUTPUT_ENV = "IFES_OUTPUT_DIR"
LOG_FIELDS = ("iteration", "L_I", "L_V", "L_F", "L_M", "total", "elapsed")
ABLATION_VARIANTS = ("full", "no_ifem", "s1", "s2", "s3", "s4", "hc", "mae")
ABLATION_FIELDS = ("variant", "stages", *COLUMNS, "VIFF")


def output_dir(cfg, flag=None):
    if flag:
        return Path(flag)
    env = os.environ.get(OUTPUT_ENV)
    return Path(env) if env else Path(cfg.output_dir)


def training_pairs(cfg):
    """Load (and optionally patch) the training data; fails before any step."""
    if not cfg.data_dir:
        raise ConfigError("data_dir is not set")
    pairs, _ = load_pairs(cfg.data_dir, cfg.ir_suffix, cfg.vis_suffix)
    if not pairs:
        raise DataError(f"no complete pairs in {cfg.data_dir}")
    return pairs


def as_training_arrays(pairs, cfg):
    if cfg.patch > 0:
        count = cfg.patches or len(pairs)
        ps = sample_patches(pairs, cfg.patch, count, cfg.seed)
        return [(a[None, None], b[None, None]) for a, b in ps.patches]
    return [p.tensors() for p in pairs]


def run_training(cfg, arrays, out):
    """Train one network, write checkpoint, CSV log, run echo and loss figure."""
    out.mkdir(parents=True, exist_ok=True)
    network = build_network(cfg.net_config())
    log_path = out / "train_log.csv"
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)

        def log_row(row):
            writer.writerow([row["iteration"]] + [repr(float(row[k])) for k in LOG_FIELDS[1:]])
            fh.flush()

        history, _ = train(network, arrays, cfg.loss_config(), cfg.iterations, cfg.optimizer(), log_row)
    ckpt = out / "checkpoint.ifes"
    save_checkpoint(network, ckpt)
    (out / "run.txt").write_text(cfg.dumps() + f"# checkpoint = {ckpt}\n")
    if history:
        plotting.plot_training_curves(history, out / "loss_curves.png", f"{cfg.variant}, {cfg.stages} stages")
    return network, history, ckpt


def cmd_train(args):
    cfg = load_config(args.config, args.set)
    out = output_dir(cfg, args.out)
    arrays = as_training_arrays(training_pairs(cfg), cfg)
    _, history, ckpt = run_training(cfg, arrays, out)
    if history:
        first, last = history[0]["total"], history[-1]["total"]
        print(f"trained {len(history)} iterations: total {first:.6f} -> {last:.6f}")
    print(f"checkpoint: {ckpt}")
    return 0


def fuse_arrays(network, i1, i2, smooth=False):
    o = forward(network, i1, i2)
    fused = fuse_with_weight_maps(o.w1, o.w2, i1, i2, smooth=smooth) if smooth else o.fused
    return fused, o.w1, o.w2


def cmd_fuse(args):
    network = load_checkpoint(args.checkpoint)
    ir, vis = load_gray_image(args.ir), load_gray_image(args.vis)
    if ir.pixels.shape != vis.pixels.shape:
        raise RegistrationError(f"{args.ir} {ir.pixels.shape} and {args.vis} {vis.pixels.shape} are not registered")
    i1, i2 = to_tensor(ir), to_tensor(vis)
    fused, w1, w2 = fuse_arrays(network, i1, i2, args.smooth)
    out = Path(args.out)
    save_gray_image(from_tensor(fused), out)
    if args.maps:
        stem = out.with_suffix("")
        save_gray_image(from_tensor(w1), f"{stem}_w1.pgm")
        save_gray_image(from_tensor(w2), f"{stem}_w2.pgm")
    if args.figure:
        panel = {"infrared": i1[0, 0], "visible": i2[0, 0], "W1": w1[0, 0], "W2": w2[0, 0], "fused": fused[0, 0]}
        plotting.plot_fusion_panel({k: np.clip(v, 0, 1) for k, v in panel.items()}, args.figure)
    print(f"fused: {out}")
    return 0


def evaluate_directory(directory, ir_suffix, vis_suffix, fused_suffix):
    complete, unmatched = find_groups(directory, (ir_suffix, vis_suffix, fused_suffix))
    report = MetricReport()
    for ident, paths in complete:
        report.add(
            evaluate_pair(
                load_gray_image(paths[ir_suffix]),
                load_gray_image(paths[vis_suffix]),
                load_gray_image(paths[fused_suffix]),
                ident,
            )
        )
    return report, unmatched


def cmd_eval(args):
    report, unmatched = evaluate_directory(args.directory, args.ir_suffix, args.vis_suffix, args.fused_suffix)
    text = report.to_csv()
    if args.out:
        Path(args.out).write_text(text)
        if report.rows:
            figure = Path(args.out).with_suffix(".png")
            plotting.plot_metric_rows(
                [r.image for r in report.rows], [r.values() for r in report.rows], COLUMNS, figure
            )
        print(RANGE_NOTE, file=sys.stderr)
    else:
        sys.stdout.write(text)
    if unmatched:
        for p in unmatched:
            print(f"incomplete triple, skipped: {p}", file=sys.stderr)
        return DataError.exit_code
    return 0


def cmd_gradcheck(args):
    start = time.perf_counter()
    results = run_gradcheck(args.seed, samples=args.samples)
    for r in results:
        print(r.line())
    print(f"# runtime {time.perf_counter() - start:.1f}s", file=sys.stderr)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED (threshold {THRESHOLD:g}): {', '.join(failed)}")
        return VerificationError.exit_code
    print(f"all {len(results)} components below {THRESHOLD:g}")
    return 0


def variant_config(cfg, name):
    if name == "full":
        return cfg.replace(variant="full")
    if name == "no_ifem":
        return cfg.replace(variant="no_ifem")
    if name == "hc":
        return cfg.replace(variant="hc")
    if name == "mae":
        return cfg.replace(variant="full", recon_loss="mae")
    if name in ("s1", "s2", "s3", "s4"):
        return cfg.replace(variant="full", stages=int(name[1]))
    raise ConfigError(f"unknown ablation variant {name!r}; choose from {', '.join(ABLATION_VARIANTS)}")


def split_held_out(pairs, fraction=5):
    """Pairs whose identifier CRC32 is divisible by ``fraction`` are held out."""
    is_held = [zlib.crc32(p.identifier.encode()) % fraction == 0 for p in pairs]
    held = [p for p, h in zip(pairs, is_held) if h]
    train_set = [p for p, h in zip(pairs, is_held) if not h]
    if not held or not train_set:
        logger.warning("hash split left one side empty; evaluating on the training pairs")
        return pairs, pairs
    return train_set, held


def cmd_ablate(args):
    cfg = load_config(args.config, args.set)
    names = [v.strip() for v in args.variants.split(",") if v.strip()] if args.variants else list(ABLATION_VARIANTS)
    configs = [(n, variant_config(cfg, n)) for n in names]
    out = output_dir(cfg, args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_pairs, eval_pairs = split_held_out(training_pairs(cfg))
    csv_path = out / "ablation.csv"
    rows = []
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ABLATION_FIELDS)
        fh.flush()
        for name, vcfg in configs:
            network, _, _ = run_training(vcfg, as_training_arrays(train_pairs, vcfg), out / name)
            report = MetricReport()
            for p in eval_pairs:
                i1, i2 = p.tensors()
                fused, _, _ = fuse_arrays(network, i1, i2, vcfg.smooth)
                report.add(evaluate_pair(p.infrared, p.visible, from_tensor(np.clip(fused, 0, 1)), p.identifier))
            mean = report.means()
            rows.append((name, mean.values()))
            writer.writerow([name, vcfg.stages, *(fmt(v) for v in mean.values()), "n/a"])
            fh.flush()
            print(f"{name}: " + " ".join(f"{c}={fmt(v)}" for c, v in zip(COLUMNS, mean.values())))
    plotting.plot_metric_rows([r[0] for r in rows], [r[1] for r in rows], COLUMNS, out / "ablation.png")
    print(f"ablation table: {csv_path}")
    return 0


def cmd_synth(args):
    out = Path(args.directory)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(args.count):
        ir, vis = synthetic_pair(args.size, args.seed + k)
        from_unit = lambda a: from_tensor(a[None, None])  # noqa: E731
        save_gray_image(from_unit(ir), out / f"scene{k:03d}{args.ir_suffix}.pgm")
        save_gray_image(from_unit(vis), out / f"scene{k:03d}{args.vis_suffix}.pgm")
    print(f"wrote {args.count} pairs to {out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="ifes", description="Interactive feature embedding image fusion toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--out", help=f"output directory (else ${OUTPUT_ENV}, else config output_dir)")

    sp = sub.add_parser("train", help="train a network")
    with_config(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("fuse", help="fuse one registered pair with a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("ir")
    sp.add_argument("vis")
    sp.add_argument("out")
    sp.add_argument("--smooth", action="store_true", help="Gaussian-smooth the weight maps (variance 2, 5x5)")
    sp.add_argument("--maps", action="store_true", help="also write <out>_w1.pgm and <out>_w2.pgm")
    sp.add_argument("--figure", help="write a PNG panel of inputs, maps and result")
    sp.set_defaults(func=cmd_fuse)

    sp = sub.add_parser("eval", help="metrics CSV for a directory of (ir, vis, fused) triples")
    sp.add_argument("directory")
    sp.add_argument("--ir-suffix", default="_ir")
    sp.add_argument("--vis-suffix", default="_vis")
    sp.add_argument("--fused-suffix", default="_fused")
    sp.add_argument("--out", help="CSV path (a bar-chart PNG is written beside it); stdout if omitted")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--samples", type=int, default=4, help="coordinates per network parameter array")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("ablate", help="train and evaluate ablation variants")
    with_config(sp)
    sp.add_argument("--variants", help=f"comma list from {','.join(ABLATION_VARIANTS)} (default: all)")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("synth", help="write synthetic registered pairs as PGM")
    sp.add_argument("directory")
    sp.add_argument("--count", type=int, default=3)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--ir-suffix", default="_ir")
    sp.add_argument("--vis-suffix", default="_vis")
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except IfesError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
