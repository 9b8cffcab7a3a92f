"""Command line entry point: ``selfscore <command> [options]``.

Global options (``--config``, ``--seed``, ``--out``) may appear before or
after the command name. Exit status: 0 on success, 1 on a numerical or
acceptance failure, 2 on a usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import io as sio
from .bcnn import BayesianUnrolledNet
from .exceptions import FormatError
from .metrics import evaluate_many
from .mri import CoilSensitivities, MultiCoilKSpace, derive_pair_subsample, gen_mask, simulate
from .numerics import RandomStream
from .pipeline import (make_records, run_experiment, sampler_config, score_centers, train_bcnn,
                       train_score)
from .sampler import langevin_cond, langevin_uncond, reconstruct
from .score import NoiseConditionalScoreNet


class UsageError(Exception):
    """Bad or missing command line input; maps to exit status 2."""


def _global_options(defaults: bool) -> argparse.ArgumentParser:
    # The same options are attached to the main parser and to every
    # subparser; only the main parser carries real defaults so that a value
    # given before the command is not reset by the subparser.
    p = argparse.ArgumentParser(add_help=False)
    sup = {} if defaults else {"default": argparse.SUPPRESS}
    p.add_argument("--config", type=Path, help="run configuration file", **({"default": None} if defaults else sup))
    p.add_argument("--seed", type=int, help="integer seed (default 0)", **({"default": 0} if defaults else sup))
    p.add_argument("--out", type=Path, help="output directory (default .)", **({"default": Path(".")} if defaults else sup))
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfscore", parents=[_global_options(True)],
                                     description="Self-supervised score-based MRI reconstruction at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    common = [_global_options(False)]

    p = sub.add_parser("phantom", parents=common, help="simulate a dataset directory")
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--mask-kind", choices=("uniform", "random"), default=None)

    p = sub.add_parser("mask", parents=common, help="generate a sampling mask")
    p.add_argument("--kind", choices=("uniform", "random", "full"), default="random")
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--acceleration", type=int, default=None)
    p.add_argument("--acs", type=int, default=None)

    p = sub.add_parser("simulate", parents=common, help="measure an image: y, mask and its paired subsample")
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--sens", type=Path, required=True)
    p.add_argument("--mask", type=Path, default=None, help="mask file (generated from [data] if omitted)")

    p = sub.add_parser("train-bcnn", parents=common, help="fit the Bayesian unrolled network")
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("train-score", parents=common, help="fit a score network")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--supervised", action="store_true", help="train on ground truths instead of BCNN outputs")
    p.add_argument("--bcnn", type=Path, default=None, help="BCNN weights (needed unless --supervised)")

    p = sub.add_parser("reconstruct", parents=common, help="conditional Langevin reconstruction")
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--data", type=Path, default=None, help="dataset directory; reconstructs every record")
    p.add_argument("--kspace", type=Path, default=None)
    p.add_argument("--mask", type=Path, default=None)
    p.add_argument("--sens", type=Path, default=None)
    p.add_argument("--snapshots", action="store_true", help="write the per-level snapshots")

    p = sub.add_parser("sample", parents=common, help="unconditional annealed Langevin samples")
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--width", type=int, default=None)

    p = sub.add_parser("eval", parents=common, help="NMSE / PSNR / SSIM of magnitude images")
    p.add_argument("--recon", type=Path, required=True)
    p.add_argument("--ref", type=Path, required=True)

    sub.add_parser("verify", parents=common, help="run the oracle suite")

    p = sub.add_parser("experiment", parents=common, help="end-to-end self-score vs supervised run")
    p.add_argument("--no-supervised", action="store_true")
    return parser


def _config(args) -> sio.RunConfig:
    if args.config is None:
        return sio.RunConfig()
    if not args.config.exists():
        raise UsageError(f"--config: file not found: {args.config}")
    return sio.RunConfig.load(args.config)


def _existing(path: Path | None, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    if not path.exists():
        raise UsageError(f"{flag}: file not found: {path}")
    return path


def _out(args) -> Path:
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def _load_score(path: Path) -> NoiseConditionalScoreNet:
    return NoiseConditionalScoreNet.from_weights(sio.load_weights(_existing(path, "--weights")))


def cmd_phantom(args, cfg):
    records = make_records(cfg, args.seed, args.split, args.mask_kind)
    sio.save_dataset(_out(args), records)
    print(f"wrote {len(records)} records to {args.out}")


def cmd_mask(args, cfg):
    d = cfg.data
    width = args.width or d.width
    accel = 1 if args.kind == "full" else (args.acceleration or d.acceleration)
    acs = d.acs if args.acs is None else args.acs
    mask = gen_mask(args.kind, width, accel, acs, RandomStream(args.seed, 0))
    sio.write_mask(_out(args) / "mask.txt", mask)
    print(f"{mask.n_lines} of {mask.width} lines (R = {mask.acceleration:.3f})")


def cmd_simulate(args, cfg):
    d = cfg.data
    truth = sio.read_tensor(_existing(args.image, "--image"))
    sens = CoilSensitivities(sio.read_tensor(_existing(args.sens, "--sens")))
    stream = RandomStream(args.seed, 0)
    if args.mask is not None:
        mask = sio.read_mask(_existing(args.mask, "--mask"))
    else:
        mask = gen_mask(d.mask_kind, truth.shape[-1], d.acceleration, d.acs, stream)
    y = simulate(truth, sens, mask, d.noise, stream)
    pair = derive_pair_subsample(y, d.keep_fraction, d.sub_acs, stream)
    out = _out(args)
    sio.write_tensor(out / "y.sst", pair.y.data)
    sio.write_mask(out / "ymask.txt", pair.y.mask)
    sio.write_tensor(out / "ysub.sst", pair.y_sub.data)
    sio.write_mask(out / "submask.txt", pair.submask)
    print(f"y: {pair.y.mask.n_lines} lines, y_sub: {pair.submask.n_lines} lines")


def _dataset(path: Path):
    return sio.load_dataset(_existing(path, "--data"))


def _history_csv(rows, keys) -> str:
    lines = [",".join(keys)]
    lines += [",".join(f"{r[k]:.10g}" if isinstance(r[k], float) else str(r[k]) for k in keys) for r in rows]
    return "\n".join(lines) + "\n"


def cmd_train_bcnn(args, cfg):
    records = _dataset(args.data)
    model = train_bcnn(cfg, records, args.seed)
    out = _out(args)
    sio.save_weights(out / "bcnn.ssw", model.get_weights())
    (out / "bcnn_history.csv").write_text(_history_csv(model.history_, ("epoch", "loss", "data", "kl")),
                                          encoding="utf-8", newline="\n")
    print(f"final loss {model.history_[-1]['loss']:.6g}" if model.history_ else "no epochs run")


def cmd_train_score(args, cfg):
    records = _dataset(args.data)
    if args.supervised:
        truths = np.stack([r.truth for r in records]).astype(np.complex64)
        centers = np.repeat(truths, cfg.bcnn.n_centers, axis=0)
    else:
        weights = sio.load_weights(_existing(args.bcnn, "--bcnn"))
        bcnn = BayesianUnrolledNet.from_weights(weights)
        centers = score_centers(bcnn, records, cfg.bcnn.n_centers, args.seed)
    model = train_score(cfg, centers, args.seed)
    out = _out(args)
    sio.save_weights(out / "score.ssw", model.get_weights())
    rows = [{"epoch": i, "loss": v} for i, v in enumerate(model.history_)]
    (out / "score_history.csv").write_text(_history_csv(rows, ("epoch", "loss")), encoding="utf-8", newline="\n")
    print(f"trained on {centers.shape[0]} centers")


def cmd_reconstruct(args, cfg):
    model = _load_score(args.weights)
    scfg = sampler_config(cfg, args.seed)
    out = _out(args)
    if args.data is not None:
        jobs = [(f"recon_{i:04d}", r.pair.y, r.sens) for i, r in enumerate(_dataset(args.data))]
    else:
        y = sio.read_tensor(_existing(args.kspace, "--kspace"))
        mask = sio.read_mask(_existing(args.mask, "--mask"))
        sens = CoilSensitivities(sio.read_tensor(_existing(args.sens, "--sens")))
        jobs = [("recon", MultiCoilKSpace(y, mask, cfg.data.noise), sens)]
    bad = 0
    for name, y, sens in jobs:
        image, traces = reconstruct(model, y, sens, model.schedule_, scfg, cfg.sampler.n_samples)
        if not np.all(np.isfinite(image)):
            bad += 1
        sio.write_tensor(out / f"{name}.sst", image)
        sio.export_pgm(np.abs(image), out / f"{name}.pgm")
        (out / f"{name}_residuals.csv").write_text(traces[0].residual_csv(), encoding="utf-8", newline="\n")
        if args.snapshots:
            trace = langevin_cond(model, y, sens, model.schedule_, scfg, RandomStream(scfg.seed, 0),
                                  keep_snapshots=True, log_residuals=False)
            sio.write_tensor(out / f"{name}_snapshots.sst", np.stack(trace.snapshots))
    print(f"reconstructed {len(jobs)} image(s)")
    if bad:
        print(f"error: {bad} reconstruction(s) not finite", file=sys.stderr)
        return 1
    return 0


def cmd_sample(args, cfg):
    model = _load_score(args.weights)
    shape = (args.height or cfg.data.height, args.width or cfg.data.width)
    scfg = sampler_config(cfg, args.seed)
    samples = [langevin_uncond(model, model.schedule_, scfg, shape, stream=RandomStream(args.seed, j)).final
               for j in range(args.n)]
    out = _out(args)
    sio.write_tensor(out / "samples.sst", np.stack(samples))
    for j, s in enumerate(samples):
        sio.export_pgm(np.abs(s), out / f"sample_{j:04d}.pgm")
    print(f"wrote {args.n} sample(s)")


def _stack(a: np.ndarray) -> np.ndarray:
    a = np.abs(a)
    if a.ndim == 2:
        return a[None]
    if a.ndim == 3:
        return a
    raise UsageError(f"expected an image or an image stack, got shape {a.shape}")


def cmd_eval(args, cfg):
    recon = _stack(sio.read_tensor(_existing(args.recon, "--recon")))
    ref = _stack(sio.read_tensor(_existing(args.ref, "--ref")))
    if recon.shape != ref.shape:
        raise UsageError(f"--recon shape {recon.shape} does not match --ref shape {ref.shape}")
    csv = evaluate_many(recon, ref).to_csv()
    (_out(args) / "metrics.csv").write_text(csv, encoding="utf-8", newline="\n")
    sys.stdout.write(csv)


def cmd_verify(args, cfg):
    from .verify import run_all
    results = run_all(log=print)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)} of {len(results)} checks passed")
    return 1 if failed else 0


def cmd_experiment(args, cfg):
    res = run_experiment(cfg, args.seed, supervised=not args.no_supervised, log=print)
    out = _out(args)
    for key, report in res.reports.items():
        (out / f"{key}.csv").write_text(report.to_csv(), encoding="utf-8", newline="\n")
    print(res.summary())
    ok = (res.median_psnr("selfscore_random") >= res.median_psnr("zf_random") + 3.0
          and res.median_psnr("selfscore_uniform") >= res.median_psnr("zf_uniform") + 3.0)
    if "supervised_random" in res.reports:
        ok = ok and abs(res.median_psnr("selfscore_random") - res.median_psnr("supervised_random")) <= 1.5
    return 0 if ok else 1


COMMANDS = {"phantom": cmd_phantom, "mask": cmd_mask, "simulate": cmd_simulate,
            "train-bcnn": cmd_train_bcnn, "train-score": cmd_train_score,
            "reconstruct": cmd_reconstruct, "sample": cmd_sample, "eval": cmd_eval,
            "verify": cmd_verify, "experiment": cmd_experiment}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _config(args)
        status = COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"selfscore {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"selfscore {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"selfscore {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    return int(status or 0)


if __name__ == "__main__":
    sys.exit(main())
