"""Command-line entry point: ``binopt <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import landscape as L
from . import metrics as M
from .checkpoint import load_checkpoint
from .config import config_from_dict, load_config
from .train import SWEEP_LRS, Trainer, compare_optimizers, load_parameters, lr_sweep, train


def _config_from_checkpoint(ck):
    cfg = config_from_dict(ck.meta["config"])
    return cfg


def _restore_model(path):
    ck = load_checkpoint(path)
    cfg = _config_from_checkpoint(ck)
    trainer = Trainer(cfg)
    load_parameters(trainer.model, ck)
    return trainer, ck


def cmd_train(args):
    cfg = load_config(args.config)
    out = args.out or cfg.out_dir
    res = train(cfg, out_dir=out, resume=args.resume, stop_after=args.stop_after)
    if res.completed:
        print(json.dumps({k: res.summary[k] for k in
                          ("final_train_accuracy", "final_val_accuracy", "mean_ff_ratio",
                           "final_c2i_ratio")}, indent=2))
    else:
        print(f"stopped; resume from {os.path.join(out, 'checkpoints', 'resume.ckpt')}")


def cmd_compare(args):
    cfg = load_config(args.config)
    out = args.out or cfg.out_dir
    names = [n.strip() for n in args.opt.split(",") if n.strip()]
    if args.lr_sweep:
        sweep = {n: SWEEP_LRS.get(n, [cfg.optimizer.lr]) for n in names}
        rows = lr_sweep(cfg, sweep, out_dir=out)
    else:
        rows = compare_optimizers(cfg, names, out_dir=out)
    for r in rows:
        print(f"{r['run']:<24} val_acc={r['final_val_accuracy']:.4f} "
              f"ff={r['mean_ff_ratio']:.3e} sat0={r['final_saturation_first']:.4f}")


def cmd_landscape(args):
    os.makedirs(args.out, exist_ok=True)
    land = L.ToyLandscape(target=args.target, kappa=args.kappa)
    if args.mode == "toy":
        for opt, lr in (("sgd", args.lr_sgd), ("adam", args.lr_adam)):
            traj = L.simulate(opt, (args.x0, args.y0), args.steps, lr, args.seed, land)
            path = os.path.join(args.out, f"trajectory_{opt}.csv")
            L.write_trajectory_csv(path, traj)
            print(f"{opt}: final ({traj[-1, 1]:.4f}, {traj[-1, 2]:.4f}) L={traj[-1, 7]:.3e} "
                  f"flat-phase |dx|/|dy|={L.flat_phase_ratio(traj):.4f} -> {path}")
    else:
        for kind in ("discrete", "surrogate"):
            xs, ys, vals = L.surface_grid(kind, -args.extent, args.extent, args.resolution, land)
            path = os.path.join(args.out, f"surface_{kind}.csv")
            L.write_grid_csv(path, xs, ys, vals)
            print(f"{kind} surface -> {path}")


def cmd_slice(args):
    trainer, _ = _restore_model(args.checkpoint)
    ds = trainer.train_set
    n = min(args.batch, len(ds))
    xs, ys, vals = L.loss_slice(trainer.model, (ds.x[:n], ds.y[:n]), args.resolution,
                                args.radius, args.seed)
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "slice.csv")
    L.write_grid_csv(path, xs, ys, vals)
    print(f"slice -> {path} (total variation {L.total_variation(vals):.4f})")


def cmd_metrics(args):
    trainer, ck = _restore_model(args.checkpoint)
    model = trainer.model
    w = [p.data for p in model.measured_weights()]
    cams = [M.cam(x) for x in w]
    hist = M.weight_histogram(w)
    report = {
        "iteration": ck.meta.get("global_step"),
        "cam_min": [float(c.min()) for c in cams],
        "cam_mean": [float(c.mean()) for c in cams],
        "sdam": [M.sdam(c) for c in cams],
        "tail_mass_0.75": float(M.tail_mass(hist)),
        "weight_histogram": hist.tolist(),
    }
    if ck.snapshot:
        snap = M.InitSnapshot(tuple(np.asarray(s, dtype=np.int8) for s in ck.snapshot))
        report["c2i_ratio"] = M.c2i_ratio(snap, w)
        report["c2i_literal"] = M.c2i_literal(snap, w)
    print(json.dumps(report, indent=2))


def build_parser():
    p = argparse.ArgumentParser(prog="binopt", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--resume", help="checkpoint written by an interrupted run")
    t.add_argument("--stop-after", type=int, help="interrupt after this many iterations")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("compare-optimizers", help="train the same config with several optimizers")
    c.add_argument("--config", required=True)
    c.add_argument("--opt", default="adam,sgd")
    c.add_argument("--out")
    c.add_argument("--lr-sweep", action="store_true", help="sweep initial learning rates")
    c.set_defaults(func=cmd_compare)

    l = sub.add_parser("landscape", help="toy two-node landscape")
    l.add_argument("--mode", choices=("toy", "surface"), default="toy")
    l.add_argument("--out", default="landscape")
    l.add_argument("--target", type=float, default=2.0)
    l.add_argument("--kappa", type=float, default=0.05)
    l.add_argument("--x0", type=float, default=-2.5)
    l.add_argument("--y0", type=float, default=0.5)
    l.add_argument("--steps", type=int, default=5000)
    l.add_argument("--lr-sgd", type=float, default=0.1)
    l.add_argument("--lr-adam", type=float, default=0.01)
    l.add_argument("--seed", type=int, default=0)
    l.add_argument("--extent", type=float, default=2.0)
    l.add_argument("--resolution", type=int, default=81)
    l.set_defaults(func=cmd_landscape)

    s = sub.add_parser("slice", help="filter-normalized 2-D loss slice of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out")
    s.add_argument("--resolution", type=int, default=21)
    s.add_argument("--radius", type=float, default=1.0)
    s.add_argument("--batch", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_slice)

    m = sub.add_parser("metrics", help="weight diagnostics of a checkpoint")
    m.add_argument("--checkpoint", required=True)
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
