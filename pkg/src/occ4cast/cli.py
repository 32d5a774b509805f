"""Operator command line: data generation, training, evaluation, plotting.

Every sub-command honors ``--seed``, resolves its configuration with the
precedence CLI flag > config file > preset default, and records a run
manifest (written atomically at start, finalized at exit) under ``--out``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import config as config_mod
from .errors import ConfigError, DataError, NumericalError
from .evaluator import ModelForecaster, OracleForecaster, evaluate, voxelize_prediction
from .fusion import WorldModelConfig
from .grid import write_grid
from .plotting import save_bev_figure, save_metric_curves
from .sequence import load_dataset, save_dataset
from .synthetic import SyntheticWorldSpec, generate_dataset
from .trainer import Checkpoint, TrainConfig, fit


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------

def deep_merge(base: dict, overlay: dict) -> dict:
    out = dict(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def resolve_config(args) -> dict:
    cfg: dict = {"world": {}, "model": {}, "train": {}, "data": {}, "eval": {}}
    if getattr(args, "preset", None):
        cfg = deep_merge(cfg, config_mod.preset(args.preset))
    if getattr(args, "config", None):
        cfg = deep_merge(cfg, config_mod.load_config_file(args.config))
    if getattr(args, "seed", None) is not None:
        cfg["train"]["seed"] = args.seed
    if getattr(args, "device", None):
        cfg["train"]["device"] = args.device
    return cfg


def _field_lines(prefix: str, cls) -> list:
    lines = []
    for f in dataclasses.fields(cls):
        default = f.default
        if default is dataclasses.MISSING and f.default_factory is not dataclasses.MISSING:
            default = f.default_factory()
        lines.append(f"  {prefix}.{f.name} (default: {default})")
    return lines


def config_reference() -> str:
    lines = ["config file fields:"]
    lines += _field_lines("train", TrainConfig)
    lines += _field_lines("model", WorldModelConfig)
    lines += _field_lines("world", SyntheticWorldSpec)
    lines += [
        "  data.path (dataset directory)",
        "  data.count (sequences to generate, default: 0)",
        "  data.val_count (held-out sequences, default: 0)",
        "  data.family_cycle (per-index ego path families, default: none)",
    ]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# run manifest
# ---------------------------------------------------------------------------

class RunManifest:
    def __init__(self, command: str, out_dir: Path, config: dict, seed):
        self.path = Path(out_dir) / "run_manifest.json"
        self.data = {
            "command": command,
            "config": config,
            "seed": seed,
            "code_version": __version__,
            "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "finished": None,
            "status": "running",
            "artifacts": [],
        }
        self._write()

    def _write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, indent=1, sort_keys=True))
        os.replace(tmp, self.path)

    def add_artifact(self, path):
        self.data["artifacts"].append(str(path))

    def finalize(self, status: str = "ok"):
        self.data["status"] = status
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        self._write()


# ---------------------------------------------------------------------------
# sub-commands
# ---------------------------------------------------------------------------

def cmd_make_synthetic(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(args.out)
    seed = cfg["train"].get("seed", 0)
    manifest = RunManifest("make-synthetic", out_dir, cfg, seed)
    try:
        spec = config_mod.from_dict(SyntheticWorldSpec, cfg["world"], "world")
        count = args.count if args.count is not None else int(cfg["data"].get("count", 8))
        if count < 1:
            raise ConfigError("data.count must be >= 1 to generate a dataset")
        family_cycle = cfg["data"].get("family_cycle")
        samples = generate_dataset(spec, count, base_seed=seed, family_cycle=family_cycle)
        save_dataset(out_dir, samples,
                     extra_meta={"seed": seed, "world": config_mod.to_dict(spec)})
        manifest.add_artifact(out_dir / "dataset.json")
        occupancy = np.mean([g.occupied().mean() for s in samples for g in s.future_grids])
        print(f"wrote {count} sequences to {out_dir} "
              f"(mean occupancy {100 * occupancy:.1f}%, seed {seed})")
        manifest.finalize()
        return 0
    except Exception:
        manifest.finalize("failed")
        raise


def _split_dataset(samples, val_count: int):
    if val_count <= 0:
        return samples, []
    if val_count >= len(samples):
        raise ConfigError(f"val_count {val_count} >= dataset size {len(samples)}")
    return samples[:-val_count], samples[-val_count:]


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(args.out)
    data_path = args.data or cfg["data"].get("path")
    if not data_path:
        raise ConfigError("no dataset path: pass --data or set data.path")
    seed = cfg["train"].get("seed", 0)
    manifest = RunManifest("train", out_dir, cfg, seed)
    try:
        samples = load_dataset(data_path)
        train_cfg = config_mod.from_dict(TrainConfig, cfg["train"], "train")
        model_cfg = config_mod.from_dict(WorldModelConfig, cfg["model"], "model")
        train_seqs, val_seqs = _split_dataset(samples, int(cfg["data"].get("val_count", 0)))

        def log_fn(metrics):
            if metrics["step"] % 50 == 0 or metrics["step"] == 1:
                print(f"step {metrics['step']:>5}  loss {metrics['total']:.4f}  "
                      f"chamfer {metrics['chamfer']:.4f}  focal {metrics['focal']:.4f}  "
                      f"lr {metrics['lr']:.2e}")

        fit(train_seqs, model_cfg, train_cfg, val_seqs=val_seqs,
            out_dir=out_dir, resume_from=args.resume, log_fn=log_fn)
        manifest.add_artifact(out_dir / "last")
        manifest.add_artifact(out_dir / "best")
        print(f"checkpoints written to {out_dir}/last and {out_dir}/best")
        manifest.finalize()
        return 0
    except Exception:
        manifest.finalize("failed")
        raise


def parse_traj_source(text: str):
    parts = text.split(":")
    name = parts[0]
    if name not in ("gt", "zero", "noisy"):
        raise ConfigError(f"unknown --traj-source {text!r} (gt | noisy[:sxy[:stheta]] | zero)")
    sigma_xy, sigma_theta = 0.5, 0.1
    if name == "noisy" and len(parts) > 1:
        try:
            sigma_xy = float(parts[1])
            if len(parts) > 2:
                sigma_theta = float(parts[2])
        except ValueError as exc:
            raise ConfigError(f"bad noise sigmas in {text!r}") from exc
    return name, sigma_xy, sigma_theta


def _load_checkpoint_model(args, cfg):
    ckpt = Checkpoint.load(args.checkpoint)
    if cfg.get("model"):
        want = config_mod.from_dict(WorldModelConfig, cfg["model"], "model")
        if config_mod.config_hash(want) != config_mod.config_hash(ckpt.model_config):
            raise ConfigError(
                "checkpoint model config hash does not match the requested config"
            )
    model = ckpt.build_model()
    model.eval()
    return ckpt, model


def _dump_predictions(forecaster, samples, horizons, threshold, out_dir, manifest):
    pred_root = Path(out_dir) / "predictions"
    for sample in sorted(samples, key=lambda s: s.seq_id):
        seq_dir = pred_root / sample.seq_id
        seq_dir.mkdir(parents=True, exist_ok=True)
        max_h = min(max(horizons), sample.num_future)
        if max_h < 1:
            continue
        from .evaluator import stable_seed

        frames = forecaster.forecast_frames(
            sample, sample.trajectory[:max_h], max_h, stable_seed(sample.seq_id, 0))
        blobs = {}
        for h in range(1, max_h + 1):
            gt = sample.future_grids[h - 1]
            pred = voxelize_prediction(frames[h - 1], gt, threshold)
            write_grid(seq_dir / f"frame_{h}_pred.occ4", pred)
            write_grid(seq_dir / f"frame_{h}_gt.occ4", gt)
            pts = frames[h - 1].points
            logits = frames[h - 1].logits
            if isinstance(pts, torch.Tensor):
                pts = pts.detach().cpu().numpy()
                logits = logits.detach().cpu().numpy()
            probs = np.exp(logits - logits.max(axis=-1, keepdims=True))
            probs = probs / probs.sum(axis=-1, keepdims=True)
            blobs[f"points_{h}"] = pts.reshape(-1, 3).astype(np.float32)
            blobs[f"probs_{h}"] = probs.reshape(pts.reshape(-1, 3).shape[0], -1).astype(np.float32)
        np.savez(seq_dir / "points.npz", **blobs)
        (seq_dir / "meta.json").write_text(json.dumps(
            {"seq_id": sample.seq_id, "horizons": list(range(1, max_h + 1)),
             "threshold": threshold}, indent=1))
    manifest.add_artifact(pred_root)


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(args.out)
    seed = cfg["train"].get("seed", 0)
    manifest = RunManifest("eval", out_dir, cfg, seed)
    try:
        samples = load_dataset(args.data)
        horizons = [int(h) for h in args.horizons.split(",")] if args.horizons else None
        source, sigma_xy, sigma_theta = parse_traj_source(args.traj_source)

        if args.oracle:
            forecaster = OracleForecaster()
            horizons = horizons or list(range(1, max(s.num_future for s in samples) + 1))
        else:
            ckpt, model = _load_checkpoint_model(args, cfg)
            forecaster = ModelForecaster(model)
            horizons = horizons or list(range(1, ckpt.model_config.t_max + 1))

        report = evaluate(
            forecaster, samples, horizons, threshold=args.threshold,
            use_mask=args.mask, rayiou=args.rayiou, traj_source=source,
            sigma_xy=sigma_xy, sigma_theta=sigma_theta, seed=seed,
            include_recon=args.recon,
        )
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(
            json.dumps(report.to_dict(), indent=1, sort_keys=True))
        (out_dir / "report.txt").write_text(report.format_table() + "\n")
        manifest.add_artifact(out_dir / "report.json")
        if args.dump_predictions:
            _dump_predictions(forecaster, samples, horizons, args.threshold,
                              out_dir, manifest)
        print(report.format_table())
        manifest.finalize()
        return 0
    except Exception:
        manifest.finalize("failed")
        raise


def cmd_forecast(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(args.out)
    seed = cfg["train"].get("seed", 0)
    manifest = RunManifest("forecast", out_dir, cfg, seed)
    try:
        samples = load_dataset(args.data)
        if args.seq:
            samples = [s for s in samples if s.seq_id == args.seq]
            if not samples:
                raise DataError(f"sequence {args.seq!r} not found in {args.data}")
        samples = samples[:1]
        _, model = _load_checkpoint_model(args, cfg)
        horizon = args.horizon or model.config.t_max
        horizons = list(range(1, min(horizon, samples[0].num_future) + 1))
        _dump_predictions(ModelForecaster(model), samples, horizons,
                          args.threshold, out_dir, manifest)
        print(f"prediction dump written to {out_dir}/predictions/{samples[0].seq_id}")
        manifest.finalize()
        return 0
    except Exception:
        manifest.finalize("failed")
        raise


def cmd_plot(args) -> int:
    out_dir = Path(args.out)
    manifest = RunManifest("plot", out_dir, {"input": str(args.input)}, args.seed)
    try:
        src = Path(args.input)
        out_dir.mkdir(parents=True, exist_ok=True)
        made = 0
        report_path = None
        if src.is_file() and src.suffix == ".json":
            report_path = src
        elif (src / "report.json").exists():
            report_path = src / "report.json"
        if report_path is not None:
            report = json.loads(report_path.read_text())
            if "horizons" not in report:
                raise DataError(f"{report_path}: not a metric report (missing horizons)")
            curve_path = out_dir / "metrics_vs_horizon.png"
            save_metric_curves(curve_path, report)
            manifest.add_artifact(curve_path)
            made += 1

        pred_root = src / "predictions" if src.is_dir() else None
        if pred_root is not None and pred_root.exists():
            from .grid import read_grid

            for seq_dir in sorted(pred_root.iterdir()):
                if not (seq_dir / "meta.json").exists():
                    continue
                meta = json.loads((seq_dir / "meta.json").read_text())
                for h in meta["horizons"]:
                    pred = read_grid(seq_dir / f"frame_{h}_pred.occ4")
                    gt_path = seq_dir / f"frame_{h}_gt.occ4"
                    gt = read_grid(gt_path) if gt_path.exists() else None
                    png = out_dir / f"{meta['seq_id']}_h{h}.png"
                    save_bev_figure(png, gt, pred,
                                    title=f"{meta['seq_id']} +{h} frames",
                                    scale=args.scale)
                    manifest.add_artifact(png)
                    made += 1
        if made == 0:
            raise DataError(f"nothing to plot under {src}: no report.json or predictions/")
        print(f"wrote {made} plot file(s) to {out_dir}")
        manifest.finalize()
        return 0
    except Exception:
        manifest.finalize("failed")
        raise


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="occ4cast",
        description="Trajectory-conditioned 4D occupancy forecasting toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--preset", choices=["smoke", "desk", "full"],
                        help="built-in config preset")
    common.add_argument("--seed", type=int, default=None, help="global RNG seed")
    common.add_argument("--device", default=None, help="torch device (default cpu)")
    common.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("make-synthetic", parents=[common],
                       help="generate a synthetic dataset",
                       epilog=config_reference(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--count", type=int, default=None, help="number of sequences")
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("train", parents=[common], help="train a world model",
                       epilog=config_reference(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", help="checkpoint directory (last/ or best/)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--horizons", default=None, help="comma-separated future frames")
    p.add_argument("--traj-source", default="gt",
                   help="trajectory source: gt | noisy[:sigma_xy[:sigma_theta]] | zero")
    p.add_argument("--mask", dest="mask", action="store_true", default=True,
                   help="evaluate inside the visibility mask (default)")
    p.add_argument("--no-mask", dest="mask", action="store_false")
    p.add_argument("--threshold", type=float, default=0.0,
                   help="voxelization confidence threshold")
    p.add_argument("--rayiou", action="store_true", help="also compute RayIoU")
    p.add_argument("--oracle", action="store_true",
                   help="feed GT back as the prediction (sanity check)")
    p.add_argument("--recon", action="store_true",
                   help="also score the current-frame reconstruction")
    p.add_argument("--dump-predictions", action="store_true",
                   help="write per-frame OCC4 grids and point blobs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("forecast", parents=[common],
                       help="forecast one sequence and dump predictions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seq", default=None, help="sequence id (default: first)")
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--threshold", type=float, default=0.0)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("plot", parents=[common],
                       help="render BEV images and metric curves")
    p.add_argument("--input", required=True, help="eval output dir or report.json")
    p.add_argument("--scale", type=int, default=8, help="pixels per voxel")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
