"""Command-line entry point: ``qsamnet {synth,train,derain,eval,gradcheck,params}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from qsamnet.checkpoint import CheckpointError, load_checkpoint
from qsamnet.quaternion import decode_image, encode_image, load_png, save_png

log = logging.getLogger("qsamnet")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_CHECKPOINT = 4
EXIT_SHAPE = 5
EXIT_NUMERIC = 6
EXIT_CHECK_FAILED = 7

PAPER_QSAMNET_PARAMS = 22_278_819
PAPER_HINET_PARAMS = 88_669_702


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _widths(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(w) for w in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"widths must be comma-separated integers, got {text!r}") from None


def _angle_range(text: str) -> tuple[float, float]:
    try:
        parts = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad angle range {text!r}") from None
    if len(parts) == 1:
        return (-abs(parts[0]), abs(parts[0]))
    if len(parts) == 2:
        return (parts[0], parts[1])
    raise argparse.ArgumentTypeError("angle range is either A (meaning ±A) or LO,HI")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qsamnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a paired rainy/clean dataset")
    p.add_argument("--clean-dir", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--pairs", required=True, type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--procedural", type=int, default=0, metavar="N",
                   help="first write N procedural clean scenes into --clean-dir")
    p.add_argument("--scene-size", type=int, default=64)
    p.add_argument("--streaks-per-mpx", type=float, default=4000.0)
    p.add_argument("--len-min", type=float, default=10.0)
    p.add_argument("--len-max", type=float, default=40.0)
    p.add_argument("--width-min", type=float, default=1.0)
    p.add_argument("--width-max", type=float, default=2.5)
    p.add_argument("--angle-range", type=_angle_range, default=(-20.0, 20.0))
    p.add_argument("--intensity-min", type=float, default=0.25)
    p.add_argument("--intensity-max", type=float, default=0.6)
    p.add_argument("--blur-sigma", type=float, default=0.7)

    p = sub.add_parser("train", help="train QSAM-Net on a paired dataset")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--iters", required=True, type=int)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--patch", type=int, default=256)
    p.add_argument("--lr-start", type=float, default=2e-4)
    p.add_argument("--lr-end", type=float, default=1e-7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--widths", type=_widths, default=(16, 32, 64, 128, 256))
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--leaky", type=float, default=0.2)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", type=Path, help="continue from a checkpoint")
    p.add_argument("--real-twin", action="store_true", help="train the real-valued twin instead")

    p = sub.add_parser("derain", help="restore every PNG in a directory")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--in", dest="inp", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--emit-stage1", action="store_true")

    p = sub.add_parser("eval", help="PSNR/SSIM on the Y channel")
    p.add_argument("--restored", required=True, type=Path)
    p.add_argument("--clean", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer op")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probes", type=int, default=3)

    p = sub.add_parser("params", help="parameter counts of a network and its real twin")
    p.add_argument("--config", default="default", help="'default' or a JSON file of network settings")
    return parser


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    from qsamnet.synth import RainParams, make_dataset, write_scenes

    if args.pairs < 0:
        raise CliError("--pairs must be non-negative", EXIT_USAGE)
    if args.procedural:
        write_scenes(args.clean_dir, args.procedural, args.scene_size, seed=args.seed)
    if not args.clean_dir.is_dir():
        raise CliError(f"clean directory not found: {args.clean_dir}", EXIT_MISSING)
    try:
        params = RainParams(
            streaks_per_mpx=args.streaks_per_mpx,
            length=(args.len_min, args.len_max),
            width=(args.width_min, args.width_max),
            angle=args.angle_range,
            intensity=(args.intensity_min, args.intensity_max),
            blur_sigma=args.blur_sigma,
            seed=args.seed,
        )
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    try:
        make_dataset(args.clean_dir, params, args.pairs, args.out)
    except FileNotFoundError as exc:
        raise CliError(str(exc), EXIT_MISSING) from exc
    print(f"wrote {args.pairs} pairs to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from qsamnet.model import NetConfig
    from qsamnet.plotting import plot_loss_curves
    from qsamnet.training import NonFiniteError, PairedDataset, TrainConfig, train

    if not args.data.is_dir():
        raise CliError(f"dataset directory not found: {args.data}", EXIT_MISSING)
    try:
        dataset = PairedDataset(args.data)
        cfg = TrainConfig(
            iterations=args.iters,
            batch=args.batch,
            patch=args.patch,
            lr_start=args.lr_start,
            lr_end=args.lr_end,
            seed=args.seed,
            checkpoint_every=args.checkpoint_every,
        )
        net_cfg = NetConfig(
            widths=args.widths, blocks=args.blocks, slope=args.leaky, seed=args.seed,
            kind="real" if args.real_twin else "quaternion",
        )
    except FileNotFoundError as exc:
        raise CliError(str(exc), EXIT_MISSING) from exc
    except ValueError as exc:
        raise CliError(str(exc), EXIT_SHAPE) from exc
    resume = _read_checkpoint(args.resume) if args.resume else None
    try:
        result = train(dataset, cfg, net_cfg, resume=resume, out_dir=args.out)
    except NonFiniteError as exc:
        raise CliError(str(exc), EXIT_NUMERIC) from exc
    except ValueError as exc:
        raise CliError(str(exc), EXIT_SHAPE) from exc
    totals = _read_loss_csv(args.out / "loss.csv")
    if totals.size:
        plot_loss_curves({"total loss": totals}, args.out / "loss.png")
    last = result.records[-1].loss_total if result.records else float("nan")
    print(f"trained to iteration {result.checkpoint.iteration}; final loss {last:.6g}; checkpoint {args.out / 'final.qsam'}")
    return EXIT_OK


def _read_loss_csv(path: Path) -> np.ndarray:
    if not path.is_file():
        return np.zeros(0)
    data = np.genfromtxt(path, delimiter=",", skip_header=1, ndmin=2)
    return data[:, 4] if data.size else np.zeros(0)


def _read_checkpoint(path: Path):
    if not path.is_file():
        raise CliError(f"checkpoint not found: {path}", EXIT_MISSING)
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise CliError(f"malformed checkpoint {path}: {exc}", EXIT_CHECKPOINT) from exc


def pad_to_multiple(img: np.ndarray, m: int) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = img.shape[:2]
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    return img, (h, w)


def cmd_derain(args) -> int:
    from qsamnet.autograd import no_grad
    from qsamnet.training import restore

    ckpt = _read_checkpoint(args.ckpt)
    try:
        net, _, _ = restore(ckpt)
    except (KeyError, ValueError) as exc:
        raise CliError(f"checkpoint does not describe a QSAM-Net: {exc}", EXIT_CHECKPOINT) from exc
    if not args.inp.is_dir():
        raise CliError(f"input directory not found: {args.inp}", EXIT_MISSING)
    if args.out.resolve() == args.inp.resolve():
        raise CliError("--out must differ from --in; inputs are never overwritten", EXIT_USAGE)
    files = sorted(p for p in args.inp.iterdir() if p.suffix.lower() == ".png")
    args.out.mkdir(parents=True, exist_ok=True)
    for path in files:
        rgb, (h, w) = pad_to_multiple(load_png(path), net.config.divisor)
        x = encode_image(rgb)[None].astype(np.float32)
        with no_grad():
            x1, x2 = net(x)
        save_png(args.out / path.name, decode_image(x2.data[0])[:h, :w])
        if args.emit_stage1:
            save_png(args.out / "stage1" / path.name, decode_image(x1.data[0])[:h, :w])
    print(f"restored {len(files)} images into {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from qsamnet.metrics import evaluate_dirs
    from qsamnet.plotting import plot_metric_report

    for d in (args.restored, args.clean):
        if not d.is_dir():
            raise CliError(f"directory not found: {d}", EXIT_MISSING)
    report = evaluate_dirs(args.restored, args.clean)
    report.write_csv(args.out)
    if report.names:
        plot_metric_report(report, args.out.with_suffix(".png"))
    for name, err in report.errors.items():
        print(f"warning: {name}: {err}", file=sys.stderr)
    print(f"{len(report.names)} images  mean PSNR {report.mean_psnr:.3f} dB  mean SSIM {report.mean_ssim:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from qsamnet.gradsuite import run_suite

    results = run_suite(seed=args.seed, probes=args.probes)
    print(f"{'operation':32s} {'max rel error':>14s} {'probes':>6s}  result")
    ok = True
    for r in results:
        passed = r.passed(args.tol)
        ok &= passed
        print(f"{r.name:32s} {r.max_error:14.3e} {len(r.errors):6d}  {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_params(args) -> int:
    from qsamnet.model import NetConfig, QSAMNet, count_params

    if args.config == "default":
        cfg = NetConfig()
    else:
        path = Path(args.config)
        if not path.is_file():
            raise CliError(f"config file not found: {path}", EXIT_MISSING)
        try:
            cfg = NetConfig.from_dict(json.loads(path.read_text()))
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise CliError(f"bad config {path}: {exc}", EXIT_USAGE) from exc
    c = count_params(QSAMNet(cfg))
    ratios = set(c.per_conv_ratios)
    print(f"widths {list(cfg.widths)}, {cfg.blocks} residual blocks per scale, {len(c.per_conv_ratios)} convolutions")
    print(f"quaternion network      {c.total:>12,d}  (conv weights {c.conv_weights:,d}, biases {c.conv_biases:,d}, norm {c.norm:,d})")
    print(f"real-valued twin        {c.twin_total:>12,d}  (conv weights {c.twin_conv_weights:,d}, biases {c.twin_conv_biases:,d}, norm {c.twin_norm:,d})")
    print(f"twin / quaternion       {c.ratio:12.4f}")
    print(f"per-conv weight ratio   {min(ratios):.4f} .. {max(ratios):.4f} over {len(c.per_conv_ratios)} convolutions")
    print(f"published QSAM-Net size {PAPER_QSAMNET_PARAMS:>12,d}  (HiNet {PAPER_HINET_PARAMS:,d}, ratio {PAPER_HINET_PARAMS / PAPER_QSAMNET_PARAMS:.2f});"
          " not expected to match: block counts and CSFF extent are unpublished")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "derain": cmd_derain,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "params": cmd_params,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except PermissionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
