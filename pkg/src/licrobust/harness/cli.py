"""Command-line entry point (``licwb``)."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import torch

from .. import analysis as an
from ..attacks import AttackConfig, arda, srda
from ..coder import compress_file
from ..models import CompressionModel, Family, load_checkpoint, save_checkpoint
from ..optim import ATConfig, TrainConfig, adversarial_finetune, online_update, train_rd, write_trace_csv
from .config import ConfigError, SuiteConfig
from .data import make_dataset
from .io import ImageFormatError, load_image, save_image


def _image(spec):
    """A path, or ``synthetic:SEED[:SIZE]`` for a generated texture."""
    if spec.startswith("synthetic:"):
        parts = spec.split(":")
        size = int(parts[2]) if len(parts) > 2 else 64
        return make_dataset(1, int(parts[1]), size)
    return load_image(spec).pixels


def _dataset(args):
    if args.images:
        return torch.cat([load_image(p).pixels for p in args.images])
    return make_dataset(args.train_images, args.seed + 2, args.train_size)


def _print_report(rep: an.RDReport):
    for k, v in rep.row().items():
        if k in an.REPORT_COLUMNS and v not in ("", -1):
            print(f"{k:>12}: {v}")


def cmd_train(args):
    torch.manual_seed(args.seed)
    model = CompressionModel(Family[args.family], args.lmbda)
    cfg = TrainConfig(args.lmbda, steps=args.steps, crop=args.crop, batch=args.batch, lr=args.lr, lr_final=args.lr_final, warmup=args.warmup, seed=args.seed)
    model, trace = train_rd(model, _dataset(args), cfg)
    save_checkpoint(model, args.out)
    if args.trace:
        write_trace_csv(trace, args.trace)
    print(f"saved {args.out}; final loss {trace[-1].total:.6g}")
    return 0


def cmd_attack(args):
    x = _image(args.image)
    cfg = AttackConfig(args.gamma_r, args.gamma_d, eps=args.eps, steps=args.steps, tau=args.tau)
    models = [load_checkpoint(p) for p in args.checkpoint]
    if args.method == "srda":
        if len(models) != 1:
            print("srda takes exactly one checkpoint", file=sys.stderr)
            return 2
        res = srda(models[0], x, cfg)
    else:
        res = arda(models, x, cfg)
    save_image(res.x_adv, args.out, 16 if args.out.lower().endswith(".ppm") else 8)
    failed = 0
    for i, m in enumerate(models):
        rep = an.perf_variation(m, x, res.x_adv, lambda_index=i, attack=args.method)
        print(f"[{i}] dR={rep.delta_rate:+.5f} bpp  dD={rep.delta_dist:+.4f}")
    if res.unstable or res.aborted:
        print("attack stopped early: " + ("non-finite loss" if res.unstable else "budget never reached"), file=sys.stderr)
        failed = 1
    return failed


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    x = _image(args.image)
    xa = _image(args.adv) if args.adv else x
    _print_report(an.perf_variation(model, x, xa, family=model.family.name))
    if args.bitstream:
        bs = compress_file(model, xa if args.adv else x, args.lambda_index)
        with open(args.bitstream, "wb") as f:
            f.write(bs.to_bytes())
        print(f"wrote {args.bitstream} ({len(bs.to_bytes())} bytes)")
    return 0


def cmd_eci(args):
    model = load_checkpoint(args.checkpoint)
    x, xa = _image(args.image), _image(args.adv)
    print("do_set,bitrate_z,bitrate_y,bitrate,delta_mean,scale")
    for r in an.eci_table(model, x, xa):
        fmt = lambda v: "" if v is None else f"{v:.6f}"
        print(f"{'+'.join(r.do_set) or 'none'},{fmt(r.bitrate_z)},{fmt(r.bitrate_y)},{fmt(r.bitrate)},{fmt(r.delta_mean)},{fmt(r.scale)}")
    return 0


def cmd_ldmr(args):
    model = load_checkpoint(args.checkpoint)
    prof = an.ldmr_cdmr(model, _image(args.image), _image(args.adv))
    if args.out:
        an.write_profile_csv(prof, args.out)
    for r in prof.rows():
        print(f"{r['layer']:>12}  LDMR={r['ldmr']:.4f}  CDMR={r['cdmr']:.4f}")
    return 0


def cmd_defend(args):
    model = load_checkpoint(args.checkpoint)
    if args.method == "at":
        cfg = ATConfig(iters=args.iters, batch=args.batch, crop=args.crop, attack_steps=args.attack_steps, eps=args.eps, seed=args.seed)
        tuned, trace = adversarial_finetune(model, _dataset(args), config=cfg)
        save_checkpoint(tuned, args.out)
        print(f"saved {args.out}; last loss {trace[-1]['total']:.6g}")
        return 0
    xa = _image(args.image)
    res = online_update(model, xa, model.lmbda, args.iters, lr=args.lr)
    save_image(res.x_u, args.out, 16 if args.out.lower().endswith(".ppm") else 8)
    print(f"L_online {res.initial_loss:.6g} -> {res.best_loss:.6g}")
    return 0


def cmd_report(args):
    from .suite import emit_plotdata, run_suite

    cfg = SuiteConfig.load(args.config)
    for name in ("eps", "steps", "tau", "seed", "workers", "output_dir"):
        v = getattr(args, name)
        if v is not None:
            setattr(cfg, name, v)
    cfg.validate()
    bundle = run_suite(cfg)
    for p in emit_plotdata(bundle):
        print(p)
    print(f"{bundle.n_tasks} tasks, {len(bundle.failed)} failed; reports in {bundle.out_dir}")
    for tid, err in sorted(bundle.failed.items()):
        print(f"FAILED {tid}: {err.splitlines()[0]}", file=sys.stderr)
    return 0 if bundle.ok else 1


def _add_train_data(p):
    p.add_argument("--images", nargs="*", default=[], help="PPM/PNG training images (default: synthetic)")
    p.add_argument("--train-images", type=int, default=64)
    p.add_argument("--train-size", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="licwb", description="Rate-distortion attack and defense workbench")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="train one submodel")
    p.add_argument("--family", choices=[f.name for f in Family], default="HYPER_S")
    p.add_argument("--lmbda", type=float, required=True)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--crop", type=int, default=64)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--lr-final", type=float, default=2e-4)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--trace", help="write the loss trace CSV here")
    p.add_argument("--out", required=True)
    _add_train_data(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("attack", help="craft an adversarial image")
    p.add_argument("method", choices=["srda", "arda"])
    p.add_argument("--checkpoint", nargs="+", required=True, help="one checkpoint (srda) or the submodel grid (arda)")
    p.add_argument("--image", required=True, help="path or synthetic:SEED[:SIZE]")
    p.add_argument("--gamma-r", type=float, default=1.0)
    p.add_argument("--gamma-d", type=float, default=0.0)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--steps", type=int, default=64)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("eval", help="RD report for an image (and optional adversarial version)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--adv")
    p.add_argument("--bitstream", help="also write the entropy-coded file")
    p.add_argument("--lambda-index", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    for name, fn, helptext in (("eci", cmd_eci, "entropy causal intervention table"), ("ldmr", cmd_ldmr, "layer-wise distance magnify ratios")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--image", required=True)
        p.add_argument("--adv", required=True)
        if name == "ldmr":
            p.add_argument("--out")
        p.set_defaults(fn=fn)

    p = sub.add_parser("defend", help="adversarial finetuning or online input updating")
    p.add_argument("method", choices=["at", "online"])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", help="attacked image (online)")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--crop", type=int, default=64)
    p.add_argument("--attack-steps", type=int, default=16)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--out", required=True)
    _add_train_data(p)
    p.set_defaults(fn=cmd_defend)

    p = sub.add_parser("report", help="run (or resume) a suite and emit report/plot data")
    p.add_argument("--config", required=True)
    p.add_argument("--eps", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--output-dir", dest="output_dir")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.cmd == "defend":
        if args.iters is None:
            args.iters = 1000 if args.method == "at" else 64
        if args.method == "online" and not args.image:
            print("defend online needs --image", file=sys.stderr)
            return 2
    try:
        return args.fn(args)
    except (ConfigError, ImageFormatError, OSError, ValueError, ArithmeticError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
