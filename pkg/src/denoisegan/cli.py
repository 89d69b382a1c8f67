"""``denoisegan`` command line.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure,
3 gradient check failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; usage errors are 1 here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def _overrides(args, names) -> dict[str, str]:
    out = dict(args.set or [])
    for name in names:
        v = getattr(args, name, None)
        if v is not None:
            out[name] = str(v)
    return out


def _load_run_config(args, names):
    from .config import load_config, resolve

    ov = _overrides(args, names)
    if args.config:
        if not Path(args.config).exists():
            raise UsageError(f"config file not found: {args.config}")
        return load_config(args.config, ov)
    return resolve("", ov, "<defaults>")


# -- subcommands ------------------------------------------------------------
def cmd_synthesize(args) -> int:
    from .data import synthesize_dataset

    if args.count < 0 or args.heldout < 0:
        raise UsageError("--count and --heldout must be >= 0")
    if args.size < 8 or args.size % 4:
        raise UsageError("--size must be a multiple of 4 and >= 8")
    if not 0 <= args.overlap_rate <= 1:
        raise UsageError("--overlap-rate must lie in [0, 1]")
    t0 = time.perf_counter()
    paths = synthesize_dataset(args.out, args.seed, args.count, args.size, args.overlap_rate, args.heldout)
    Path(args.out, "dataset.cfg").write_text(
        f"seed = {args.seed}\ncount = {args.count}\nheldout = {args.heldout}\nsize = {args.size}\n"
        f"overlap_rate = {args.overlap_rate}\n", encoding="utf-8")
    for name, p in paths.items():
        print(f"wrote {p}")
    print(f"{args.count + args.heldout} scenes in {time.perf_counter() - t0:.1f} s")
    return EXIT_OK


TRAIN_FLAGS = ("epochs", "seed", "train_manifest", "heldout_manifest", "batch_size", "profile")


def cmd_train(args) -> int:
    from .trainer import train

    cfg = _load_run_config(args, TRAIN_FLAGS)
    res = train(cfg, args.out, resume=args.resume, plot=not args.no_plot)
    print(f"trained to epoch {res.state.epoch} in {res.seconds:.0f} s; final checkpoint {res.checkpoint}")
    if res.heldout_l1:
        print(f"held-out L1: epoch 0 {res.heldout_l1[0]:.5f} -> final {res.heldout_l1[-1]:.5f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .checkpoint import load_checkpoint
    from .config import write_config
    from .trainer import config_from_checkpoint, infer_layouts

    layouts: list[Path] = []
    for item in args.layout:
        p = Path(item)
        layouts.extend(sorted(p.glob("*.pgm")) if p.is_dir() else [p])
    if not layouts:
        raise UsageError("no layout files given")
    ck = load_checkpoint(args.checkpoint)
    written = infer_layouts(ck, layouts, args.out, args.sigma, args.seed, args.class_table)
    cfg = config_from_checkpoint(ck)
    write_config(cfg.replace(noise_sigma=args.sigma, seed=cfg.seed if args.seed is None else args.seed),
                 Path(args.out) / "run.cfg")
    print(f"wrote {len(written)} image(s) to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .config import write_config
    from .data import read_image, read_manifest
    from .metrics import MetricReport, format_table, score_pair, write_image_csv
    from .report import plot_psnr_histogram

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if (args.checkpoint is None) == (args.images is None):
        raise UsageError("give exactly one of --checkpoint or --images")
    if args.checkpoint:
        from .checkpoint import load_checkpoint
        from .trainer import config_from_checkpoint, evaluate_checkpoint

        ck = load_checkpoint(args.checkpoint)
        rep = evaluate_checkpoint(ck, args.manifest, sigma=args.sigma, seed=args.seed)
        cfg = config_from_checkpoint(ck)
        cfg = cfg.replace(noise_sigma=cfg.noise_sigma if args.sigma is None else args.sigma,
                          seed=cfg.seed if args.seed is None else args.seed)
        write_config(cfg, out / "run.cfg")
        label = Path(args.checkpoint).name
    else:
        # score already rendered images: <images>/<target file name> vs target
        rep = MetricReport()
        for e in read_manifest(args.manifest):
            pred = (read_image(Path(args.images) / e.target.name).astype("float64") + 1) / 2
            ref = (read_image(e.target).astype("float64") + 1) / 2
            rep.images.append(score_pair(pred, ref, str(e.target)))
        label = Path(args.images).name
    if not rep.images:
        raise ValueError(f"empty corpus: {args.manifest} lists no images")
    write_image_csv(rep, out / "per_image.csv")
    plot_psnr_histogram(rep, out / "psnr_hist.png")
    table = format_table([(label, rep.summary())])
    (out / "summary.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .metrics import format_table
    from .trainer import NAMED_ROWS, ablate, grid_rows

    cfg = _load_run_config(args, TRAIN_FLAGS)
    rows = NAMED_ROWS if args.grid == "named" else grid_rows()
    results = ablate(cfg, args.out, rows, plot=not args.no_plot)
    print(format_table(results))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_checks

    try:
        reports = run_checks(args.op or None, eps=args.eps, tol=args.tol)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    for r in reports:
        print(r.line())
    failed = [r.name for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} passed")
    return EXIT_VERIFY if failed else EXIT_OK


# -- parser -----------------------------------------------------------------
def _run_flags(p):
    p.add_argument("--config", help="key = value run config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--profile", choices=["desk", "full"])
    p.add_argument("--train-manifest", dest="train_manifest")
    p.add_argument("--heldout-manifest", dest="heldout_manifest")
    p.add_argument("--set", type=_kv, action="append", metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--no-plot", action="store_true", help="skip the PNG figures")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="denoisegan", description="Denoising conditional GAN for layout-to-image synthesis.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synthesize-dataset", help="write the synthetic overlapping-objects corpus")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--count", type=int, default=200, help="training scenes")
    p.add_argument("--heldout", type=int, default=0, help="extra held-out scenes (heldout.tsv)")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--overlap-rate", dest="overlap_rate", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("train", help="train G and D")
    _run_flags(p)
    p.add_argument("--resume", action="store_true", help="continue from <out>/latest.dgz")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="render layouts with a trained generator")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layout", nargs="+", required=True, help="PGM layout files or directories")
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=0.0, help="input noise level (default 0)")
    p.add_argument("--seed", type=int, help="noise seed (default: the run seed)")
    p.add_argument("--class-table", dest="class_table")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score a checkpoint (or rendered images) on a manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--images", help="directory of rendered PPMs named like the targets")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, help="input noise level (default: the run's)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and score the ablation rows")
    _run_flags(p)
    p.add_argument("--grid", choices=["named", "full"], default="named")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--op", action="append", help="check only this op (repeatable)")
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    from .config import ConfigError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command in ("train", "ablate")
                        else logging.WARNING, format="%(asctime)s %(message)s", datefmt="%H:%M:%S")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - reported, not swallowed
        if args.verbose:
            logging.exception("run failed")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
