"""Command-line interface: ``build-prior``, ``degrade``, ``train``, ``restore``, ``evaluate``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import RestorationError

log = logging.getLogger("illumrestore")


def _interval(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI got {text!r}")
    return lo, hi


def cmd_build_prior(args) -> None:
    from .histprior import build_prior
    from .plotting import plot_prior

    prior = build_prior(args.corpus, args.bins)
    prior.save(args.out)
    if args.figure:
        plot_prior(prior, args.figure)
    print(f"prior from {prior.corpus_size} images written to {args.out}")


def cmd_degrade(args) -> None:
    from .datagen import DegradeSpec, make_corpus

    spec = DegradeSpec(gamma_range_under=args.gamma_under, gamma_range_over=args.gamma_over,
                       noise_sigma=args.sigma, mode=args.mode, rng_seed=args.seed, sigma_jitter=args.jitter)
    entries = make_corpus(args.clean, args.out, spec, args.n)
    print(f"{len(entries)} degraded images written to {args.out}")


def cmd_train(args) -> None:
    from .histprior import HistogramPrior
    from .training import PROFILES, TrainConfig, run_training

    cfg = TrainConfig.load(args.config) if args.config else PROFILES[args.profile]
    if args.set:
        cfg = cfg.with_overrides(dict(kv.split("=", 1) for kv in args.set))
    prior = HistogramPrior.load(args.prior)
    out = run_training(args.corpus, prior, cfg, args.out, progress=args.verbose)
    print(f"checkpoints and loss log written to {out['config'].parent}")


def cmd_restore(args) -> None:
    from .imaging import list_images, load_image, save_image
    from .pipeline import Restorer

    model = Restorer.from_dir(args.checkpoint)
    src = Path(args.input)
    if src.is_dir():
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        jobs = [(p, out_dir / p.with_suffix(".png").name) for p in list_images(src)]
    else:
        jobs = [(src, Path(args.out))]
    for inp, outp in jobs:
        result = model.restore(load_image(inp), args.tstar, args.steps, args.seed, args.stage1_only)
        save_image(result, outp)
    print(f"{len(jobs)} image(s) restored")


def cmd_evaluate(args) -> None:
    from .histprior import HistogramPrior
    from .imaging import load_image
    from .metrics import evaluate_dirs
    from .plotting import plot_metrics

    prior = HistogramPrior.load(args.prior)
    report = evaluate_dirs(args.restored, args.reference, prior)
    report.write_csv(args.out)
    figure = Path(args.out).with_suffix(".png")
    images = [load_image(Path(args.restored) / r.name) for r in report.rows]
    plot_metrics(report, figure, prior, [im if im.shape[2] == 3 else im.repeat(3, axis=2) for im in images])
    m = report.means()
    print(f"{len(report.rows)} pairs: psnr {m['psnr']:.3f} dB, ssim {m['ssim']:.4f}, hist_kl {m['hist_kl']:.4f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="illumrestore", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-prior", help="average illumination histograms of a well-lit corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--bins", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--figure", help="optional PNG of the prior")
    p.set_defaults(func=cmd_build_prior)

    p = sub.add_parser("degrade", help="synthesize an illumination-degraded corpus")
    p.add_argument("--clean", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True, help="number of degraded images")
    p.add_argument("--mode", choices=("under", "over", "mixed"), default="under")
    p.add_argument("--gamma-under", type=_interval, default=(2.0, 5.0), metavar="LO,HI")
    p.add_argument("--gamma-over", type=_interval, default=(0.2, 0.5), metavar="LO,HI")
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--jitter", action="store_true", help="draw sigma uniformly from [0, SIGMA] per image")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train", help="two-stage training")
    p.add_argument("--corpus", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--profile", choices=("desk", "full"), default="desk")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("restore", help="restore an image or a directory of images")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True, help="training output directory")
    p.add_argument("--tstar", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stage1-only", action="store_true", help="emit the exposure-corrected image only")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("evaluate", help="PSNR/SSIM/histogram-KL report against references")
    p.add_argument("--restored", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--out", required=True, help="CSV path; a PNG figure is written alongside")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (RestorationError, OSError, ValueError) as exc:
        print(f"illumrestore {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
