"""Command-line entry point: ``mcddpm {phantom,train,eval,infer,sweep}``.

Exit codes: 0 success, 2 bad arguments, 3 missing or invalid data, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import PhantomSpec, generate_phantom_dataset
from .evaluation import EvalReport, score_volume, summarize
from .inference import reconstruct_volume, residual_map
from .io import InvalidCheckpointError, load_checkpoint, read_manifest, save_volume, write_manifest
from .postprocessing import THETA_GRID
from .training import TrainingDivergedError, fit, model_from_checkpoint

EXIT_OK, EXIT_ARGS, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("mcddpm")


class ArgumentError(Exception):
    pass


def _nonempty(path: Path) -> bool:
    return path.exists() and any(path.iterdir())


def cmd_phantom(args) -> int:
    out = Path(args.out)
    if _nonempty(out) and not args.force:
        raise ArgumentError(f"{out} is not empty; pass --force to overwrite")
    spec = PhantomSpec(
        image_size=(args.image_size, args.image_size),
        depth=args.depth,
        n_train=args.n_train,
        n_val=args.n_val,
        n_test=args.n_test,
        anomaly_count=args.anomalies,
        seed=args.seed,
    )
    records = generate_phantom_dataset(spec)
    out.mkdir(parents=True, exist_ok=True)
    path = write_manifest(out / "manifest.tsv", records)
    print(f"wrote {len(records)} volumes and {path}")
    return EXIT_OK


# RunConfig field -> command-line flag for the overridable subset
_TRAIN_FLAGS = {
    "data": "--data",
    "output_dir": "--out",
    "max_epochs": "--max-epochs",
    "lr": "--lr",
    "batch_size": "--batch-size",
    "lam": "--lambda",
    "p_norm": "--p",
    "ablation": "--ablation",
    "seed": "--seed",
    "checkpoint_every": "--checkpoint-every",
    "T": "--T",
    "t_test": "--t-test",
    "base_width": "--base-width",
    "bridge_hidden": "--bridge-hidden",
    "latent_channels": "--latent-channels",
    "depth": "--depth",
    "patch_height": "--patch-height",
    "patch_width": "--patch-width",
}


def _run_config(args) -> RunConfig:
    base = RunConfig()
    if args.config:
        cfg_path = Path(args.config)
        if not cfg_path.is_file():
            raise FileNotFoundError(f"config file not found: {cfg_path}")
        try:
            base = RunConfig.load(cfg_path)
        except ValueError as exc:
            raise ArgumentError(f"{cfg_path}: {exc}") from exc
    overrides = {name: getattr(args, name, None) for name in _TRAIN_FLAGS}
    try:
        return base.replace(**overrides)
    except ValueError as exc:
        raise ArgumentError(str(exc)) from exc


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if not cfg.data:
        raise ArgumentError("no dataset: pass --data or set data= in the config")
    train = read_manifest(cfg.data, "train")
    val = read_manifest(cfg.data, "val")
    if not train:
        raise FileNotFoundError(f"{cfg.data} has no training volumes")
    resume = load_checkpoint(args.resume) if args.resume else None
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    if resume is None and (out / "metrics.csv").exists():
        (out / "metrics.csv").unlink()
    best = fit(train, cfg.train_config(), cfg.model_config(), val or None, resume=resume, out_dir=out)
    print(f"best epoch {best.epoch} val_recon_error {best.val_error}; outputs in {out}")
    return EXIT_OK


def _load_model(path):
    ckpt = load_checkpoint(path)
    model, schedule = model_from_checkpoint(ckpt)
    return ckpt, model, schedule


def cmd_eval(args) -> int:
    ckpt, model, schedule = _load_model(args.checkpoint)
    records = read_manifest(args.data, args.split)
    if not records:
        raise FileNotFoundError(f"no '{args.split}' volumes in {args.data}")
    p = args.p or ckpt.train_config.get("p_norm", 2)
    t_test = args.t_test or ckpt.train_config.get("t_test", 500)
    thetas = list(THETA_GRID) if args.theta_sweep else (args.theta or [0.2])
    volumes = [r.volume for r in records]
    recons = [reconstruct_volume(v, model, schedule, t_test, args.seed) for v in volumes]
    residuals = [residual_map(v, vh, p) for v, vh in zip(volumes, recons)]
    name = args.name or Path(args.data).parent.name
    report = EvalReport()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for theta in thetas:
        scored = [
            score_volume(r.subject_id, r.volume, m, r.ground_truth, theta, args.kernel, args.erosion)
            for r, m in zip(records, residuals)
        ]
        report.add(dataset=name, theta=theta, p=p, checkpoint=str(args.checkpoint), **summarize(volumes, recons, scored))
        if args.heatmaps:
            from .io import save_slice_pngs

            for s in scored:
                save_slice_pngs(out / "heatmaps" / f"theta{theta:g}" / s.subject_id, s.filtered, s.segmentation)
    report.to_csv(out / "report.csv")
    table = report.to_table()
    (out / "report.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_infer(args) -> int:
    ckpt, model, schedule = _load_model(args.checkpoint)
    records = read_manifest(args.data, args.split)
    if not records:
        raise FileNotFoundError(f"no '{args.split}' volumes in {args.data}")
    p = args.p or ckpt.train_config.get("p_norm", 2)
    t_test = args.t_test or ckpt.train_config.get("t_test", 500)
    out = Path(args.out)
    from .postprocessing import postprocess

    for r in records:
        recon = reconstruct_volume(r.volume, model, schedule, t_test, args.seed, repeats=args.repeats)
        amap = residual_map(r.volume, recon, p)
        _, _, seg = postprocess(amap, r.volume, args.theta, args.kernel, args.erosion)
        save_volume(out / "reconstructions" / r.subject_id, recon.astype(np.float32))
        save_volume(out / "anomaly_maps" / r.subject_id, amap.astype(np.float32))
        save_volume(out / "segmentations" / r.subject_id, seg.astype(np.uint8))
        if args.png:
            from .io import save_slice_pngs

            save_slice_pngs(out / "png" / r.subject_id, r.volume, recon, amap)
    print(f"wrote {len(records)} reconstructions to {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    import csv
    from dataclasses import replace as dc_replace

    from .experiment import ExperimentConfig, sweep

    base = ExperimentConfig()
    train = base.train
    if args.max_epochs is not None:
        train = dc_replace(train, max_epochs=args.max_epochs)
    if min(args.lambdas) < 0:
        raise ArgumentError("lambda must be >= 0")
    phantom = dc_replace(base.phantom, seed=args.phantom_seed)
    cfg = dc_replace(base, train=train, phantom=phantom, theta=args.theta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.csv"
    writer = None
    with open(path, "w", newline="") as f:
        def emit(res):
            nonlocal writer
            row = res.row()
            if writer is None:
                writer = csv.DictWriter(f, fieldnames=list(row))
                writer.writeheader()
            writer.writerow(row)
            f.flush()
            print(", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))

        sweep(cfg, args.ablations, args.lambdas, args.seeds, on_result=emit)
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcddpm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="write a synthetic phantom dataset")
    ph.add_argument("--out", required=True)
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--image-size", type=int, default=64)
    ph.add_argument("--depth", type=int, default=24)
    ph.add_argument("--n-train", type=int, default=24)
    ph.add_argument("--n-val", type=int, default=4)
    ph.add_argument("--n-test", type=int, default=8)
    ph.add_argument("--anomalies", type=int, default=2, help="anomalies per test volume")
    ph.add_argument("--force", action="store_true")
    ph.set_defaults(func=cmd_phantom)

    tr = sub.add_parser("train", help="train a model; flags override the config file")
    tr.add_argument("--config")
    tr.add_argument("--resume", help="checkpoint to continue from")
    types = {f.name: f.type for f in fields(RunConfig)}
    for name, flag in _TRAIN_FLAGS.items():
        kind = {"int": int, "float": float}.get(types[name], str)
        kw = {"choices": ["full", "no_bridge", "no_conditioning"]} if name == "ablation" else {}
        if name == "p_norm":
            kw = {"choices": [1, 2]}
        tr.add_argument(flag, dest=name, type=kind, default=None, **kw)
    tr.set_defaults(func=cmd_train)

    for cmd, func, hlp in (("eval", cmd_eval, "score a dataset"), ("infer", cmd_infer, "export reconstructions")):
        p = sub.add_parser(cmd, help=hlp)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True, help="manifest file")
        p.add_argument("--split", default="test")
        p.add_argument("--out", required=True)
        p.add_argument("--p", type=int, choices=[1, 2])
        p.add_argument("--t-test", type=int)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--kernel", type=int, default=5)
        p.add_argument("--erosion", type=int, default=3)
        if cmd == "eval":
            p.add_argument("--theta", type=float, nargs="+")
            p.add_argument("--theta-sweep", action="store_true", help="evaluate every threshold in 0.1..0.5")
            p.add_argument("--name", help="dataset label in the report")
            p.add_argument("--heatmaps", action="store_true")
        else:
            p.add_argument("--theta", type=float, default=0.2)
            p.add_argument("--repeats", type=int, default=1)
            p.add_argument("--png", action="store_true")
        p.set_defaults(func=func)

    sw = sub.add_parser("sweep", help="train and score ablation variants on the default phantom")
    sw.add_argument("--out", required=True)
    sw.add_argument("--ablations", nargs="+", default=["full", "no_bridge", "no_conditioning"],
                    choices=["full", "no_bridge", "no_conditioning"])
    sw.add_argument("--lambdas", nargs="+", type=float, default=[0.5])
    sw.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    sw.add_argument("--max-epochs", type=int)
    sw.add_argument("--phantom-seed", type=int, default=0)
    sw.add_argument("--theta", type=float, default=0.2)
    sw.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ArgumentError as exc:
        print(f"mcddpm: error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (FileNotFoundError, InvalidCheckpointError) as exc:
        print(f"mcddpm: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergedError, FloatingPointError) as exc:
        print(f"mcddpm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
