"""Optimization loop: horizon sampling, AdamW + cosine schedule, checkpoints.

Training draws a supervision horizon per batch (fixed, or uniform over
{2..T_max} under the random-ensemble policy), forecasts with fresh random
anchors, and applies the Chamfer+focal objective to every refinement block's
output.  All randomness flows through one torch.Generator whose state is
checkpointed, so identically seeded runs agree bit-exactly and a resumed run
reproduces the uninterrupted one step for step.
"""

from __future__ import annotations

import dataclasses
import json
import math
import shutil
import time
from dataclasses import dataclass
from pathlib import Path

import torch

from . import config as config_mod
from .anchors import init_anchor_state
from .errors import ConfigError, DataError, NumericalError
from .evaluator import ModelForecaster, evaluate
from .fusion import OccupancyWorldModel, WorldModelConfig
from .backbone import extract_features
from .losses import grid_targets, total_loss_multi


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 70
    batch_size: int = 4
    lr: float = 2e-4
    weight_decay: float = 0.01
    t_max: int = 4
    t_prime: int = 2
    seed: int = 0
    horizon_policy: str = "random-ensemble"   # fixed | random-ensemble
    fixed_horizon: int | None = None          # defaults to t_max
    grad_clip: float = 25.0
    max_steps: int | None = None              # optional cap for bounded runs
    val_interval: int = 0                     # steps between validations; 0 = end only
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    use_mask: bool = True
    device: str = "cpu"

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.horizon_policy not in ("fixed", "random-ensemble"):
            raise ConfigError(f"unknown horizon policy {self.horizon_policy!r}")
        if self.horizon_policy == "random-ensemble" and self.t_max < 2:
            raise ConfigError("random-ensemble policy needs t_max >= 2")


def sample_horizon(t_max: int, gen: torch.Generator) -> int:
    """Uniform draw from {2, ..., t_max}."""
    if t_max < 2:
        raise ConfigError("horizon sampling needs t_max >= 2")
    return int(torch.randint(2, t_max + 1, (1,), generator=gen).item())


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """lr(s) = base * 0.5 * (1 + cos(pi * s / S)); lr(0) = base, lr(S) = 0."""
    if total_steps <= 0:
        return base_lr
    s = min(step, total_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * s / total_steps))


@dataclass
class Checkpoint:
    """Everything needed to reproduce the next training step bit-exactly."""

    model_state: dict
    optimizer_state: dict
    model_config: WorldModelConfig
    train_config: TrainConfig
    epoch: int
    step: int
    rng_state: torch.Tensor
    perm: torch.Tensor
    cursor: int

    def save(self, ckpt_dir):
        ckpt_dir = Path(ckpt_dir)
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        snapshot = {
            "model": config_mod.to_dict(self.model_config),
            "train": config_mod.to_dict(self.train_config),
            "epoch": self.epoch,
            "step": self.step,
            "config_hash": config_mod.config_hash(self.model_config),
        }
        (ckpt_dir / "config.json").write_text(json.dumps(snapshot, indent=1, sort_keys=True))
        torch.save(self.model_state, ckpt_dir / "model.pt")
        torch.save(
            {
                "optimizer": self.optimizer_state,
                "rng_state": self.rng_state,
                "perm": self.perm,
                "cursor": self.cursor,
                "epoch": self.epoch,
                "step": self.step,
            },
            ckpt_dir / "optim.pt",
        )

    @staticmethod
    def load(ckpt_dir) -> "Checkpoint":
        ckpt_dir = Path(ckpt_dir)
        cfg_path = ckpt_dir / "config.json"
        if not cfg_path.exists():
            raise DataError(f"checkpoint config not found: {cfg_path}")
        snapshot = json.loads(cfg_path.read_text())
        model_config = config_mod.from_dict(WorldModelConfig, snapshot["model"], "model")
        train_config = config_mod.from_dict(TrainConfig, snapshot["train"], "train")
        model_state = torch.load(ckpt_dir / "model.pt", weights_only=True)
        extra = torch.load(ckpt_dir / "optim.pt", weights_only=False)
        return Checkpoint(
            model_state=model_state,
            optimizer_state=extra["optimizer"],
            model_config=model_config,
            train_config=train_config,
            epoch=extra["epoch"],
            step=extra["step"],
            rng_state=extra["rng_state"],
            perm=extra["perm"],
            cursor=extra["cursor"],
        )

    def build_model(self) -> OccupancyWorldModel:
        model = OccupancyWorldModel(self.model_config)
        model.load_state_dict(self.model_state)
        return model


def load_model(ckpt_dir) -> OccupancyWorldModel:
    return Checkpoint.load(ckpt_dir).build_model()


class Trainer:
    """One optimizer writer around an OccupancyWorldModel."""

    def __init__(self, model_config: WorldModelConfig, train_config: TrainConfig):
        if model_config.t_max != train_config.t_max:
            raise ConfigError("model t_max and train t_max must agree")
        self.model_config = model_config
        self.config = train_config
        torch.manual_seed(train_config.seed)
        self.model = OccupancyWorldModel(model_config).to(train_config.device)
        self.optimizer = torch.optim.AdamW(
            self.model.parameters(), lr=train_config.lr,
            weight_decay=train_config.weight_decay,
        )
        self.gen = torch.Generator().manual_seed(train_config.seed)
        self.step = 0
        self.epoch = 0
        self._perm = torch.zeros(0, dtype=torch.long)
        self._cursor = 0
        self._target_cache = {}  # id(sample) -> per-frame (points, labels) tensors

    # -- data order -------------------------------------------------------

    def _next_indices(self, n: int) -> list:
        if self._cursor >= self._perm.numel():
            self._perm = torch.randperm(n, generator=self.gen)
            self._cursor = 0
            if self.step > 0:
                self.epoch += 1
        take = min(self.config.batch_size, self._perm.numel() - self._cursor)
        idx = self._perm[self._cursor:self._cursor + take]
        self._cursor += take
        return [int(i) for i in idx]

    # -- single step ------------------------------------------------------

    def pick_horizon(self) -> int:
        cfg = self.config
        if cfg.horizon_policy == "fixed":
            return cfg.fixed_horizon or cfg.t_max
        return sample_horizon(cfg.t_max, self.gen)

    def _anchor_states(self, horizon: int):
        dtype = next(self.model.parameters()).dtype
        if self.model_config.share_initial_anchors:
            seed = int(torch.randint(0, 2**31 - 1, (1,), generator=self.gen).item())
            state = init_anchor_state(self.model_config.anchor, seed, dtype=dtype)
            return [state] * horizon
        seeds = torch.randint(0, 2**31 - 1, (horizon,), generator=self.gen)
        return [init_anchor_state(self.model_config.anchor, int(s), dtype=dtype)
                for s in seeds]

    def _targets_for(self, sample):
        key = id(sample)
        if key not in self._target_cache:
            dtype = next(self.model.parameters()).dtype
            device = next(self.model.parameters()).device
            self._target_cache[key] = grid_targets(
                sample.future_grids, dtype, device, apply_mask=self.config.use_mask)
        return self._target_cache[key]

    def _batch_pyramids(self, batch):
        """Extract pyramids for the whole batch with one backbone call."""
        frames = [frame for sample in batch for frame in sample.past]
        pyramids = extract_features(frames, self.model.encoder)
        groups, start = [], 0
        for sample in batch:
            groups.append(pyramids[start:start + len(sample.past)])
            start += len(sample.past)
        return groups

    def train_step(self, batch):
        """One optimizer update over a list of SequenceSample."""
        cfg = self.config
        horizon = self.pick_horizon()
        for sample in batch:
            if sample.num_future < horizon:
                raise DataError(
                    f"sample {sample.seq_id} provides {sample.num_future} future "
                    f"grids, horizon {horizon} requested"
                )

        self.optimizer.zero_grad(set_to_none=True)
        pyramid_groups = self._batch_pyramids(batch)
        chamfer_acc, focal_acc = 0.0, 0.0
        loss_acc = None
        for sample, pyramids in zip(batch, pyramid_groups):
            states = self._anchor_states(horizon)
            _, intermediates = self.model.forecast(
                states, sample.past, sample.trajectory[:horizon],
                pyramids=pyramids, return_intermediate=True)
            breakdown = total_loss_multi(
                intermediates, sample.future_grids[:horizon],
                gamma=cfg.focal_gamma, alpha=cfg.focal_alpha,
                apply_mask=cfg.use_mask,
                targets=self._targets_for(sample)[:horizon])
            loss = breakdown.total
            if not torch.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss at step {self.step} on sample {sample.seq_id}"
                )
            chamfer_acc += float(breakdown.chamfer.detach())
            focal_acc += float(breakdown.focal.detach())
            loss_acc = loss if loss_acc is None else loss_acc + loss

        loss_acc = loss_acc / len(batch)
        loss_acc.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
        self.optimizer.step()
        self.step += 1
        return {
            "chamfer": chamfer_acc / len(batch),
            "focal": focal_acc / len(batch),
            "total": float(loss_acc.detach()),
            "horizon": horizon,
        }

    # -- checkpointing ----------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            model_state={k: v.detach().clone() for k, v in self.model.state_dict().items()},
            optimizer_state=self.optimizer.state_dict(),
            model_config=self.model_config,
            train_config=self.config,
            epoch=self.epoch,
            step=self.step,
            rng_state=self.gen.get_state().clone(),
            perm=self._perm.clone(),
            cursor=self._cursor,
        )

    @staticmethod
    def from_checkpoint(ckpt: Checkpoint) -> "Trainer":
        trainer = Trainer(ckpt.model_config, ckpt.train_config)
        trainer.model.load_state_dict(ckpt.model_state)
        trainer.optimizer.load_state_dict(ckpt.optimizer_state)
        trainer.gen.set_state(ckpt.rng_state)
        trainer.step = ckpt.step
        trainer.epoch = ckpt.epoch
        trainer._perm = ckpt.perm.clone()
        trainer._cursor = ckpt.cursor
        return trainer

    # -- full loop ---------------------------------------------------------

    def total_steps(self, n_samples: int) -> int:
        steps_per_epoch = math.ceil(n_samples / self.config.batch_size)
        total = self.config.epochs * steps_per_epoch
        if self.config.max_steps is not None:
            total = min(total, self.config.max_steps)
        return total

    def fit(self, train_seqs, val_seqs=None, out_dir=None, log_fn=None) -> Checkpoint:
        """Run the schedule; writes last/ and best/ checkpoints under out_dir."""
        if not train_seqs:
            raise DataError("training dataset is empty")
        cfg = self.config
        out_dir = Path(out_dir) if out_dir is not None else None
        metrics_fh = None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            metrics_fh = open(out_dir / "metrics.jsonl", "a")

        total = self.total_steps(len(train_seqs))
        best_miou = -1.0
        try:
            while self.step < total:
                lr = cosine_lr(self.step, total, cfg.lr)
                for group in self.optimizer.param_groups:
                    group["lr"] = lr
                idx = self._next_indices(len(train_seqs))
                batch = [train_seqs[i] for i in idx]
                t0 = time.perf_counter()
                metrics = self.train_step(batch)
                metrics.update({"step": self.step, "epoch": self.epoch, "lr": lr,
                                "seconds": time.perf_counter() - t0})
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(metrics) + "\n")
                    metrics_fh.flush()
                if log_fn is not None:
                    log_fn(metrics)

                run_val = (
                    val_seqs
                    and cfg.val_interval > 0
                    and self.step % cfg.val_interval == 0
                )
                if run_val:
                    miou = self._validate(val_seqs)
                    if out_dir is not None and miou > best_miou:
                        best_miou = miou
                        self.checkpoint().save(out_dir / "best")
        finally:
            if metrics_fh is not None:
                metrics_fh.close()

        ckpt = self.checkpoint()
        if out_dir is not None:
            ckpt.save(out_dir / "last")
            if val_seqs and cfg.val_interval == 0:
                miou = self._validate(val_seqs)
                if miou > best_miou:
                    best_miou = miou
                    ckpt.save(out_dir / "best")
            if not (out_dir / "best").exists():
                shutil.copytree(out_dir / "last", out_dir / "best")
        return ckpt

    def _validate(self, val_seqs) -> float:
        self.model.eval()
        report = evaluate(ModelForecaster(self.model), val_seqs,
                          horizons=list(range(1, self.config.t_max + 1)),
                          use_mask=self.config.use_mask, seed=self.config.seed)
        self.model.train()
        return report.miou_avg


def fit(train_seqs, model_config: WorldModelConfig, train_config: TrainConfig,
        val_seqs=None, out_dir=None, resume_from=None, log_fn=None) -> Checkpoint:
    """Convenience wrapper: build (or resume) a Trainer and run it."""
    if resume_from is not None:
        trainer = Trainer.from_checkpoint(Checkpoint.load(resume_from))
    else:
        trainer = Trainer(model_config, train_config)
    return trainer.fit(train_seqs, val_seqs=val_seqs, out_dir=out_dir, log_fn=log_fn)
