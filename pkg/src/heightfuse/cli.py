"""Command line front end.

Every command is deterministic for a fixed --seed: metrics files use sorted
keys and fixed column orders, logs carry no timestamps, and rerunning a
command with the same inputs reproduces its outputs byte for byte.

Exit codes: 0 on success, 1 on a reported error, 2 on bad usage.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import checks, sim
from .config import RunConfig, data_root
from .grid import save_map
from .network import MODES, FusionNet
from .sim import (build_dataset, disturb_to_fraction, evaluate_mapping,
                  evaluate_navigation, generate_scene, load_episode, read_meta)
from .training import train_network


def _fail(msg: str):
    raise ValueError(msg)


def _fresh(path, overwrite: bool, what: str = "output"):
    if os.path.exists(path) and not overwrite:
        _fail("%s %s exists (use --overwrite to replace it)" % (what, path))


def _write_json(path, obj) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True)
    if path is None:
        print(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


def _load_config(args) -> RunConfig:
    overrides = {}
    for sec, key, attr in (
            ("train", "epochs", "epochs"),
            ("nav", "episodes", "episodes"),
            ("nav", "corruption", "corruption"),
    ):
        if getattr(args, attr, None) is not None:
            overrides[(sec, key)] = getattr(args, attr)
    return RunConfig.resolve(getattr(args, "config", None), overrides)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_scenes(args) -> int:
    cfg = _load_config(args)
    params = cfg.dataset_params().scene
    os.makedirs(args.out, exist_ok=True)
    _fresh(os.path.join(args.out, "scenes.json"), args.overwrite, "scene index")
    rows = []
    for i in range(args.count):
        sc = generate_scene(args.seed * 1000 + i, params)
        save_map(sc.hmap, os.path.join(args.out, "%03d.vgfm" % i))
        rows.append({"index": i, "seed": sc.seed, "objects": len(sc.objects),
                     "max_height": float(sc.hmap.values.max())})
    _write_json(os.path.join(args.out, "scenes.json"),
                {"count": args.count, "seed": args.seed, "scenes": rows})
    print("wrote %d scenes to %s" % (args.count, args.out))
    return 0


def cmd_build_dataset(args) -> int:
    cfg = _load_config(args)
    root = data_root(args.data_dir)
    _fresh(os.path.join(root, "meta.json"), args.overwrite, "dataset")
    os.makedirs(root, exist_ok=True)
    params = cfg.dataset_params()
    meta = build_dataset(root, seed=args.seed, params=params, jobs=args.jobs)
    cfg.write(os.path.join(root, "config.txt"))
    frames = sum(r["length"] for r in meta["episodes"])
    print("dataset at %s: %d scenes (%d train / %d held out), "
          "%d episodes, %d frames"
          % (root, len(meta["scenes"]), len(meta["train_scenes"]),
             len(meta["test_scenes"]), len(meta["episodes"]), frames))
    return 0


def _train_val_split(root, meta):
    """First episode of every training scene is validation, the rest train."""
    train_scenes = set(meta["train_scenes"])
    rows = [r for r in meta["episodes"] if r["scene"] in train_scenes]
    if not rows:
        _fail("dataset has no training episodes")
    val_idx = {}
    for r in rows:
        val_idx.setdefault(r["scene"], r["index"])
    held = set(val_idx.values())
    train, val = [], []
    for r in rows:
        sample = sim.episode_to_sample(load_episode(root, r["index"], meta),
                                       meta["window"])
        (val if r["index"] in held else train).append(sample)
    return train, val


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.mode not in MODES:
        _fail("unknown mode %r (choose from %s)" % (args.mode, ", ".join(MODES)))
    root = data_root(args.data_dir)
    meta = read_meta(root)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "%s.vgfw" % args.mode)
    log = os.path.join(args.out, "%s_log.csv" % args.mode)
    _fresh(ckpt, args.overwrite, "checkpoint")

    train_samples, val_samples = _train_val_split(root, meta)
    net = FusionNet(cfg.network_config(args.mode), seed=args.seed)
    tc = cfg.train_config(args.seed)

    def progress(row):
        print("epoch %3d  lr %.5f  train %.3f  val L1 %.3f m  (%.1fs)"
              % (row["epoch"], row["lr"], row["train_loss"], row["val_l1"],
                 row["seconds"]), flush=True)

    print("training %s on %d sequences (%d validation) for %d epochs"
          % (args.mode, len(train_samples), len(val_samples), tc.epochs))
    history = train_network(net, train_samples, val_samples, tc,
                            log_path=log, checkpoint_path=ckpt,
                            progress=progress if not args.quiet else None)
    cfg.write(os.path.join(args.out, "config.txt"))
    if history:
        print("final val L1 %.3f m, checkpoint %s"
              % (history[-1]["val_l1"], ckpt))
    else:
        print("wrote untrained checkpoint %s" % ckpt)
    return 0


def _load_models(paths) -> dict:
    nets = {}
    for path in paths:
        net = FusionNet.load(path)
        mode = net.config.mode
        if mode in nets:
            _fail("two checkpoints share mode %r" % mode)
        nets[mode] = net
    return nets


def cmd_eval(args) -> int:
    root = data_root(args.data_dir)
    nets = _load_models(args.model)
    if not nets:
        _fail("no models given")
    if args.out is not None:
        _fresh(args.out, args.overwrite, "metrics file")
    report = evaluate_mapping(root, nets, jobs=args.jobs)
    for mode in sorted(report):
        row = report[mode]
        print("%-24s L1 %6.3f m (input %6.3f)  reduction %5.1f%%  "
              "within 5 m %5.1f%%"
              % (mode, row["l1"], row["input_l1"], 100 * row["reduction"],
                 100 * row["acc5"]))
    _write_json(args.out, {"data": root, "mapping": report})
    return 0


def cmd_navigate(args) -> int:
    cfg = _load_config(args)
    root = data_root(args.data_dir)
    meta = read_meta(root)
    seeds = [r["seed"] for r in meta["scenes"] if r["split"] == "test"]
    if not seeds:
        _fail("dataset has no held-out scenes")
    net = FusionNet.load(args.model) if args.model else None
    if args.out is not None:
        _fresh(args.out, args.overwrite, "metrics file")
    report = evaluate_navigation(
        net, seeds, cfg.get("nav", "episodes"), cfg.get("nav", "corruption"),
        seed=args.seed, scene_params=cfg.dataset_params().scene,
        use_ground_truth=args.ground_truth, jobs=args.jobs,
        min_separation=cfg.get("nav", "min_separation"))
    label = ("ground truth" if args.ground_truth
             else net.config.mode if net else "no refinement")
    print("%s: %d/%d goals reached (%.1f%%), %d collisions, "
          "%d unreachable, %d over budget"
          % (label, report["successes"], report["episodes"],
             100 * report["success_rate"], report["collisions"],
             report["unreachable"], report["budget_exceeded"]))
    payload = {"map_source": label, "corruption": cfg.get("nav", "corruption"),
               "seed": args.seed, **report}
    _write_json(args.out, payload)
    return 0


def cmd_disturb_sweep(args) -> int:
    cfg = _load_config(args)
    params = cfg.dataset_params()
    if args.out is not None:
        _fresh(args.out, args.overwrite, "sweep file")
    lines = ["scene_seed,target,achieved"]
    for i in range(args.count):
        scene = generate_scene(args.seed * 1000 + i, params.scene)
        for level in params.corruption_levels:
            _, frac = disturb_to_fraction(scene.hmap, level,
                                          args.seed * 1000 + i + 77)
            lines.append("%d,%g,%.6f" % (scene.seed, level, frac))
            print("scene %d  target %4.0f%%  achieved %5.1f%%"
                  % (scene.seed, 100 * level, 100 * frac))
    if args.out is not None:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    return 0


def cmd_grad_check(args) -> int:
    modes = ()
    if args.modes == "all":
        modes = MODES
    elif args.modes:
        modes = tuple(m.strip() for m in args.modes.split(",") if m.strip())
        for m in modes:
            if m not in MODES:
                _fail("unknown mode %r" % m)
    rows = checks.gradient_report(modes=modes)
    worst = 0.0
    for name, err in rows:
        ok = err < checks.BOUND
        worst = max(worst, err)
        print("%-28s %.3e  %s" % (name, err, "ok" if ok else "FAIL"))
    if args.out is not None:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("check,max_rel_err,ok\n")
            for name, err in rows:
                fh.write("%s,%.12e,%d\n" % (name, err, int(err < checks.BOUND)))
    print("%d checks, worst relative error %.3e (bound %g)"
          % (len(rows), worst, checks.BOUND))
    return 0 if worst < checks.BOUND else 1


def cmd_plot_data(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if args.out is not None:
        _fresh(args.out, args.overwrite, "figure")
    if args.log is not None:
        with open(args.log, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            _fail("empty training log %s" % args.log)
        epochs = [int(r["epoch"]) for r in rows]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(epochs, [float(r["train_loss"]) for r in rows],
                label="train loss", color="tab:blue")
        ax.set_xlabel("epoch")
        ax.set_ylabel("summed train loss", color="tab:blue")
        ax2 = ax.twinx()
        ax2.plot(epochs, [float(r["val_l1"]) for r in rows],
                 label="val L1 (m)", color="tab:orange")
        ax2.set_ylabel("validation L1 (m)", color="tab:orange")
        ax.set_title(os.path.basename(args.log))
        fig.tight_layout()
        fig.savefig(args.out, dpi=120)
        print("wrote %s" % args.out)
        return 0

    root = data_root(args.data_dir)
    meta = read_meta(root)
    ep = load_episode(root, args.episode, meta)
    gt = ep.gt_map.values
    disturbed = ep.input_map.values
    fig, axes = plt.subplots(2, 2, figsize=(9, 8))
    for ax, (img, title) in zip(axes.flat, (
            (gt, "ground truth (m)"),
            (disturbed, "disturbed input (m)"),
            (np.abs(disturbed - gt), "absolute error (m)"),
            (ep.images[0], "camera, first moment"))):
        shown = ax.imshow(img, origin="lower",
                          cmap=None if img.ndim == 3 else "viridis")
        if img.ndim == 2:
            fig.colorbar(shown, ax=ax, shrink=0.8)
        ax.set_title(title)
    xs = [p[0][0] for p in ep.poses]
    ys = [p[0][1] for p in ep.poses]
    axes[0, 0].plot(xs, ys, "w.-", markersize=4)
    axes[0, 0].plot(xs[0], ys[0], "ws", markersize=7, fillstyle="none")
    fig.suptitle("episode %04d, scene %d, corruption target %g"
                 % (args.episode, ep.meta["scene"],
                    ep.meta["corruption_target"]))
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print("wrote %s" % args.out)
    return 0


# ---------------------------------------------------------------------------
# parser


def _common(p, jobs=False, data=False, config=True, overwrite=False):
    p.add_argument("--seed", type=int, default=0,
                   help="master seed for this command (default 0)")
    if config:
        p.add_argument("--config", metavar="FILE",
                       help="sectioned key=value configuration file")
    if data:
        p.add_argument("--data-dir", metavar="DIR",
                       help="dataset root (default $VGF_DATA_DIR or ./data)")
    if jobs:
        p.add_argument("--jobs", type=int, default=1,
                       help="worker processes (default 1)")
    if overwrite:
        p.add_argument("--overwrite", action="store_true",
                       help="replace existing outputs instead of refusing")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="heightfuse",
        description="height map fusion: simulator, training and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", help="generate standalone scene maps")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--count", type=int, default=5)
    _common(p, overwrite=True)
    p.set_defaults(func=cmd_gen_scenes)

    p = sub.add_parser("build-dataset",
                       help="generate the full scene and episode corpus")
    _common(p, jobs=True, data=True, overwrite=True)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="train one network mode on the dataset")
    p.add_argument("--mode", required=True, choices=MODES)
    p.add_argument("--out", default="models", metavar="DIR",
                   help="checkpoint and log directory (default models)")
    p.add_argument("--epochs", type=int, help="override the configured epochs")
    p.add_argument("--quiet", action="store_true",
                   help="suppress per-epoch progress lines")
    _common(p, data=True, overwrite=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mapping accuracy on held-out scenes")
    p.add_argument("--model", action="append", default=[], metavar="FILE",
                   help="checkpoint to evaluate (repeatable)")
    p.add_argument("--out", metavar="FILE",
                   help="write the metrics JSON here instead of stdout")
    _common(p, jobs=True, data=True, config=False, overwrite=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("navigate",
                       help="closed-loop navigation on held-out scenes")
    p.add_argument("--model", metavar="FILE",
                   help="checkpoint to refine with (omit to fly on the raw map)")
    p.add_argument("--ground-truth", action="store_true",
                   help="plan on perfect maps instead of corrupted ones")
    p.add_argument("--episodes", type=int, help="override [nav] episodes")
    p.add_argument("--corruption", type=float,
                   help="override [nav] corruption fraction")
    p.add_argument("--out", metavar="FILE",
                   help="write the metrics JSON here instead of stdout")
    _common(p, jobs=True, data=True, overwrite=True)
    p.set_defaults(func=cmd_navigate)

    p = sub.add_parser("disturb-sweep",
                       help="report achieved corruption per target level")
    p.add_argument("--count", type=int, default=3, metavar="N",
                   help="scenes to sweep (default 3)")
    p.add_argument("--out", metavar="FILE", help="also write a CSV here")
    _common(p, overwrite=True)
    p.set_defaults(func=cmd_disturb_sweep)

    p = sub.add_parser("grad-check",
                       help="finite difference audit of the backward pass")
    p.add_argument("--modes", metavar="LIST",
                   help="comma separated composed modes, or 'all' "
                        "(default: per-operation checks only)")
    p.add_argument("--out", metavar="FILE", help="also write a CSV here")
    _common(p, config=False)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("plot-data", help="render an episode or training log")
    p.add_argument("--episode", type=int, default=0,
                   help="episode index to render (default 0)")
    p.add_argument("--log", metavar="CSV",
                   help="plot a training log instead of an episode")
    p.add_argument("--out", required=True, metavar="PNG")
    _common(p, data=True, config=False, overwrite=True)
    p.set_defaults(func=cmd_plot_data)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
