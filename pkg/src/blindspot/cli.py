"""Command-line surface: corrupt, train, denoise, probe-rf, eval.

Every command is reproducible: identical flags and seed produce
byte-identical outputs, and a manifest written next to each output records
the fully resolved configuration needed to re-run it. Exit codes: 0
success, 1 usage error, 2 data error, 3 numerical abort.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as kvfmt
from .errors import (BlindspotError, CheckpointError, ConfigError, DimensionError,
                     InputError, NumericalAbort, ParameterError, UsageError)
from .evaluation import corruption_seed, cross_sigma_eval, denoise, dirac_probe
from .images import load_folder, save_image
from .network import NetworkConfig
from .noise import corrupt, parse_noise_spec
from .reports import emit_reports
from .training import (NETWORK_KEYS, TrainConfig, load_checkpoint,
                       network_config_from_kv, network_config_to_kv,
                       network_from_checkpoint, train)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_manifest(anchor, command, entries):
    """Write the run manifest next to `anchor` (a file or directory output)."""
    anchor = Path(anchor)
    path = anchor / "manifest.txt" if anchor.is_dir() else anchor.with_name(
        anchor.name + ".manifest")
    payload = {"command": command, "tool_version": __version__, **entries}
    path.write_text(kvfmt.dumps_kv(payload))
    return path


def _parse_sigmas(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise UsageError(f"--sigmas must be comma-separated numbers, got {text!r}")
    if not values:
        raise UsageError("--sigmas is empty")
    return values


def cmd_corrupt(args):
    model = parse_noise_spec(args.noise)
    images = load_folder(args.in_dir)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    sidecar = ["image,sigma"]
    for idx, (name, clean) in enumerate(images):
        rng = np.random.default_rng(corruption_seed(args.seed, idx, model))
        noisy, sigma_map = corrupt(clean[None], model, rng)
        save_image(out_dir / name, noisy[0], bit_depth=16)
        sidecar.append(f"{name},{float(np.mean(sigma_map)) * 255.0:g}")
    (out_dir / "sigma.csv").write_text("\n".join(sidecar) + "\n")

    _write_manifest(out_dir, "corrupt", {
        "noise": model.spec, "seed": args.seed,
        "path.in": args.in_dir, "path.out": args.out})
    return 0


def _load_configs(path, seed_override=None, allow_partial=False):
    """Split a flat config file into network and training configs.

    Unknown keys are hard errors (silent typos corrupt experiments). With
    `allow_partial` the training half may be absent (receptive-field probes
    need only the network keys).
    """
    mapping = kvfmt.parse_kv(Path(path).read_text())
    unknown = set(mapping) - set(NETWORK_KEYS) - set(TrainConfig.KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    net_kv = {k: v for k, v in mapping.items() if k in NETWORK_KEYS}
    train_kv = {k: v for k, v in mapping.items() if k in TrainConfig.KEYS}
    if seed_override is not None:
        train_kv["seed"] = str(seed_override)
    net_cfg = network_config_from_kv(net_kv)
    if allow_partial and not train_kv:
        return net_cfg, None
    return net_cfg, TrainConfig.from_kv(train_kv)


def cmd_train(args):
    net_cfg, train_cfg = _load_configs(args.config, args.seed)
    dataset = load_folder(args.data)
    out = Path(args.out)
    result = train(net_cfg, train_cfg, dataset, checkpoint_path=out)

    loss_path = out.with_name(out.stem + ".loss.csv")
    lines = ["step,loss"]
    lines += [f"{i + 1},{repr(v)}" for i, v in enumerate(result.losses)]
    loss_path.write_text("\n".join(lines) + "\n")

    entries = {"seed": train_cfg.seed, "path.data": args.data, "path.out": args.out,
               "path.config": args.config}
    entries.update({f"config.{k}": v for k, v in network_config_to_kv(net_cfg).items()})
    entries.update({f"config.{k}": v for k, v in train_cfg.to_kv().items()})
    _write_manifest(out, "train", entries)
    print(f"trained {train_cfg.steps} steps, "
          f"final loss {result.losses[-1] if result.losses else float('nan'):.6f}, "
          f"checkpoint {out}")
    return 0


def cmd_denoise(args):
    if args.sigma < 0:
        raise UsageError(f"--sigma must be >= 0, got {args.sigma}")
    ckpt = load_checkpoint(args.ckpt)
    net = network_from_checkpoint(ckpt)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    for name, noisy in load_folder(args.in_dir):
        if noisy.shape[0] != ckpt.net_config.channels:
            raise DimensionError(
                f"{name}: image has {noisy.shape[0]} channels, checkpoint expects "
                f"{ckpt.net_config.channels}")
        restored = denoise(net, noisy, args.sigma, use_posterior=not args.mean_only)
        save_image(out_dir / name, restored, bit_depth=16)

    _write_manifest(out_dir, "denoise", {
        "sigma": f"{args.sigma:g}", "mean_only": bool(args.mean_only),
        "path.ckpt": args.ckpt, "path.in": args.in_dir, "path.out": args.out})
    return 0


def cmd_probe_rf(args):
    if (args.ckpt is None) == (args.config is None):
        raise UsageError("give exactly one of --ckpt or --config")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.ckpt is not None:
        ckpt = load_checkpoint(args.ckpt)
        net_cfg = ckpt.net_config
        probe = dirac_probe(network_from_checkpoint(ckpt))
        source = {"path.ckpt": args.ckpt}
    else:
        net_cfg, _ = _load_configs(args.config, allow_partial=True)
        probe = dirac_probe(net_cfg, seeds=args.seeds, base_seed=args.seed)
        source = {"path.config": args.config, "seeds": args.seeds}

    label = f"depth{net_cfg.depth}"
    emit_reports([], out_dir, footprints={label: probe.footprint})
    (out_dir / "probe.txt").write_text(probe.describe() + "\n")

    entries = {"seed": args.seed, "path.out": args.out, **source}
    entries.update({f"config.{k}": v for k, v in network_config_to_kv(net_cfg).items()})
    _write_manifest(out_dir, "probe-rf", entries)
    print(probe.describe())
    return 0


def cmd_eval(args):
    ckpt = load_checkpoint(args.ckpt)
    images = load_folder(args.clean)
    sigmas = _parse_sigmas(args.sigmas)
    records = cross_sigma_eval(ckpt, images, sigmas, base_seed=args.seed)

    out_csv = Path(args.out)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    emit_reports(records, out_csv.parent, csv_name=out_csv.name)

    _write_manifest(out_csv, "eval", {
        "seed": args.seed, "sigmas": ",".join(f"{s:g}" for s in sigmas),
        "path.ckpt": args.ckpt, "path.clean": args.clean, "path.out": args.out})
    for sigma in sigmas:
        rows = [r for r in records if r.sigma_test == sigma]
        post = np.mean([r.psnr_posterior for r in rows])
        mean = np.mean([r.psnr_mean_only for r in rows])
        print(f"sigma {sigma:g}: posterior {post:.2f} dB, mean-only {mean:.2f} dB")
    return 0


def build_parser():
    parser = _Parser(prog="blindspot",
                     description="Blind-spot denoising: corrupt, train, denoise, "
                                 "probe receptive fields, evaluate.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corrupt", help="corrupt clean images and record sigmas")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--noise", required=True,
                   help="gaussian:S | gaussian-range:LO,HI | poisson:LAM")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("train", help="train on noisy images only")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True, help="flat key = value file")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="restore noisy images with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--sigma", type=float, required=True,
                   help="noise standard deviation in 0-255 units")
    p.add_argument("--out", required=True)
    p.add_argument("--mean-only", action="store_true",
                   help="use the predicted mean, ignore the noisy value")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("probe-rf", help="measure the receptive-field footprint")
    p.add_argument("--ckpt")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=8,
                   help="parameter seeds to average (config probes)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_probe_rf)

    p = sub.add_parser("eval", help="cross-sigma PSNR sweep of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clean", required=True, help="directory of clean images")
    p.add_argument("--sigmas", required=True, help="comma-separated test sigmas")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError, ParameterError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (InputError, CheckpointError, DimensionError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    except BlindspotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
