"""Command line: pointdiffuse <command> [--config FILE] [--set key=value ...].

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import Config, ConfigError, load_config
from .data import FormatError, generate_scene, grid_subsample, load_cloud, preset, save_cloud, training_views

log = logging.getLogger("pointdiffuse")

CKPT_NAME = "model.pdck"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--out-dir", help="output directory (overrides out_dir)")
    p.add_argument("-v", "--verbose", action="store_true")


def _data(p, required=True):
    p.add_argument("--data", action="append", required=required, default=None, help="PDPC scene file (repeatable)")


def _ckpt(p, required=True):
    p.add_argument("--ckpt", required=required, help="PDCK checkpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pointdiffuse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic labelled scene")
    _common(p)
    p.add_argument("--preset", default="separable", choices=("separable", "hard"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", help="fit and freeze the condition encoder")
    _common(p)
    _data(p)

    p = sub.add_parser("train", help="train the denoiser (pretrains the condition encoder unless --ckpt)")
    _common(p)
    _data(p)
    _ckpt(p, required=False)
    p.add_argument("--max-steps", type=int)

    p = sub.add_parser("sample", help="predict labels and write them as a PDPC file")
    _common(p)
    _data(p)
    _ckpt(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, help="sampling steps (default: T)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="mIoU of a model (--ckpt) or of saved predictions (--pred)")
    _common(p)
    _data(p)
    _ckpt(p, required=False)
    p.add_argument("--pred", action="append", help="PDPC file carrying predicted labels")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("sweep-steps", help="mIoU and sampling time versus step count")
    _common(p)
    _data(p)
    _ckpt(p)
    p.add_argument("--steps", default="5,10,20")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=3)

    p = sub.add_parser("perturb", help="mIoU under test-time perturbations")
    _common(p)
    _data(p)
    _ckpt(p)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check of one block")
    _common(p)
    p.add_argument("--block", required=True, choices=("linear", "nle", "pft", "dpn", "net"))
    p.add_argument("--seed", type=int, default=0)
    return parser


def _config(args) -> Config:
    if args.config is not None and not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    if args.out_dir:
        overrides["out_dir"] = args.out_dir
    try:
        return load_config(args.config, overrides)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _load_data(paths, cfg: Config):
    dataset, n_classes = [], 0
    for path in paths:
        cloud, labels, m = load_cloud(path, return_classes=True)
        if labels is None:
            raise ValueError(f"{path} carries no labels")
        if cfg.grid > 0:
            cloud, labels = grid_subsample(cloud, labels, cfg.grid, cfg.max_points)
        dataset.append((cloud, labels))
        n_classes = max(n_classes, m, int(labels.max()) + 1)
    return dataset, n_classes


def _out_dir(cfg: Config) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_pipe(path, cfg: Config):
    from .checkpoint import load_checkpoint
    from .pipeline import PointDiffuse

    arrays = load_checkpoint(path)
    if "dnet.head.bias" not in arrays or "cond.stem.weight" not in arrays:
        raise ValueError(f"{path} is not a model checkpoint")
    pipe = PointDiffuse.build(cfg, int(arrays["dnet.head.bias"].shape[0]),
                              int(arrays["cond.stem.weight"].shape[1]))
    pipe.load_arrays(arrays)
    return pipe


def _training_set(dataset, cfg: Config):
    out = []
    for i, (cloud, labels) in enumerate(dataset):
        out.extend(training_views(cloud, labels, cfg.views, cfg.seed + 1000 * i))
    return out


def _cmd_gen_data(args, cfg):
    cloud, labels = generate_scene(preset(args.preset, args.classes, args.points, args.seed))
    save_cloud(args.out, cloud, labels, args.classes)
    print(f"wrote {args.out}: {cloud.n_points} points, {args.classes} classes")


def _cmd_pretrain(args, cfg):
    from .pipeline import PointDiffuse

    dataset, m = _load_data(args.data, cfg)
    pipe = PointDiffuse.build(cfg, m)
    hist = pipe.pretrain(_training_set(dataset, cfg))
    out = _out_dir(cfg)
    pipe.save(out / CKPT_NAME)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    acc = hist.accuracy[-1] if hist.accuracy else float("nan")
    print(f"pretrained condition encoder: final accuracy {acc:.4f}; wrote {out / CKPT_NAME}")


def _cmd_train(args, cfg):
    from .pipeline import PointDiffuse

    dataset, m = _load_data(args.data, cfg)
    views = _training_set(dataset, cfg)
    if args.ckpt:
        pipe = _load_pipe(args.ckpt, cfg)
    else:
        pipe = PointDiffuse.build(cfg, m)
        pipe.pretrain(views)
    out = _out_dir(cfg)
    hist = pipe.train(views, log_path=out / "train_log.csv", max_steps=args.max_steps)
    pipe.save(out / CKPT_NAME)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    print(f"trained {len(hist.loss)} steps, final loss {hist.loss[-1]:.5f}; wrote {out / CKPT_NAME}")


def _cmd_sample(args, cfg):
    pipe = _load_pipe(args.ckpt, cfg)
    if len(args.data) != 1:
        raise UsageError("sample takes exactly one --data file")
    cloud, _ = load_cloud(args.data[0])
    pred, trace = pipe.sample(cloud, seed=args.seed, T=args.steps)
    save_cloud(args.out, cloud, pred, pipe.n_classes)
    print(f"wrote {args.out}: {len(trace)} reverse steps")


def _cmd_eval(args, cfg):
    from .metrics import evaluate, miou

    dataset, m = _load_data(args.data, cfg)
    if args.pred:
        if len(args.pred) != len(dataset):
            raise UsageError("give one --pred file per --data file")
        preds = []
        for path, (cloud, _) in zip(args.pred, dataset):
            pcloud, plabels = load_cloud(path)
            if plabels is None or pcloud.n_points != cloud.n_points:
                raise ValueError(f"{path} does not match its scene")
            preds.append(plabels)
        report = miou(np.concatenate(preds), np.concatenate([l for _, l in dataset]), m)
    elif args.ckpt:
        report = evaluate(_load_pipe(args.ckpt, cfg), dataset, seed=args.seed)
    else:
        raise UsageError("eval needs --ckpt or --pred")
    ious = " ".join("-" if np.isnan(v) else f"{v:.4f}" for v in report.iou)
    print(f"miou={report.miou:.6f} accuracy={report.accuracy:.6f} points={report.n_points} iou=[{ious}]")


def _cmd_sweep(args, cfg):
    from .metrics import sweep_steps

    try:
        steps = [int(s) for s in args.steps.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--steps expects comma-separated integers, got {args.steps!r}") from None
    dataset, _ = _load_data(args.data, cfg)
    out = _out_dir(cfg)
    rows = sweep_steps(_load_pipe(args.ckpt, cfg), dataset, steps, args.seed, args.repeats,
                       out / "sweep_steps.csv", out / "sweep_steps.svg")
    for r in rows:
        print(f"steps={r.steps} miou={r.miou:.6f} seconds={r.seconds:.4f}")


def _cmd_perturb(args, cfg):
    from .metrics import run_perturbation_suite

    dataset, _ = _load_data(args.data, cfg)
    out = _out_dir(cfg)
    for name, value in run_perturbation_suite(_load_pipe(args.ckpt, cfg), dataset, args.seed,
                                              out / "perturbation.csv"):
        print(f"{name}: miou={value:.6f}")


def _cmd_gradcheck(args, cfg):
    from .train import grad_check

    report = grad_check(args.block, seed=args.seed)
    print(report.line())
    return 0 if report.passed else 2


COMMANDS = {
    "gen-data": _cmd_gen_data, "pretrain": _cmd_pretrain, "train": _cmd_train, "sample": _cmd_sample,
    "eval": _cmd_eval, "sweep-steps": _cmd_sweep, "perturb": _cmd_perturb, "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg) or 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
