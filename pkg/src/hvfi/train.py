"""Training loop: AdamW + per-step cosine decay, seeded and resumable."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor, backward
from .checkpoint import apply_params, load_checkpoint, save_checkpoint
from .data import augment
from .losses import total_loss
from .optim import AdamW, cosine_lr
from .pipeline import HVFIModel, ModelConfig


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite; carries the step index."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 1e-4
    epochs: int = 60
    batch_size: int = 4
    crop: int = 64
    seed: int = 0
    checkpoint_every: int = 10   # epochs
    max_steps: int = 0           # 0 = no cap; otherwise stop after this many steps
    augment: bool = True         # disable for pure memorization experiments

    def validate(self, model_cfg: ModelConfig):
        div = 2 ** (model_cfg.levels - 1)
        if self.crop % div != 0:
            raise ValueError(f"crop {self.crop} not divisible by {div}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def parse_config_file(path) -> tuple[TrainConfig, ModelConfig]:
    """Flat key=value text file; keys map onto TrainConfig / ModelConfig."""
    train_fields = {f.name: f.type for f in fields(TrainConfig)}
    model_fields = {f.name: f.type for f in fields(ModelConfig)}
    tkw, mkw = {}, {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in train_fields:
            dest, kind = tkw, train_fields[key]
        elif key in model_fields:
            dest, kind = mkw, model_fields[key]
        else:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        if "bool" in str(kind):
            dest[key] = val.lower() in ("1", "true", "yes")
        elif "float" in str(kind):
            dest[key] = float(val)
        else:
            dest[key] = int(val)
    return TrainConfig(**tkw), ModelConfig(**mkw)


def _loss_log_line(epoch, total, l1s, censuses):
    parts = [str(epoch), f"{total:.6f}"]
    parts += [f"{v:.6f}" for v in l1s]
    parts += [f"{v:.6f}" for v in censuses]
    return "\t".join(parts)


def train(train_cfg: TrainConfig, model_cfg: ModelConfig, dataset,
          out_path=None, resume=None, log_fh=None, callback=None):
    """Train a model on a triplet dataset.

    Returns (model, loss_log) where loss_log is a list of per-epoch strings
    (epoch, total, per-stage L1, per-stage census; tab-separated).
    `callback(step, total_value, l1s)`, if given, runs after each step and may
    return True to stop early. Resume restores parameters, optimizer moments
    and the step counter so the cosine schedule continues where it left off.
    """
    train_cfg.validate(model_cfg)
    if not dataset:
        raise ValueError("empty dataset")
    model = HVFIModel(model_cfg)
    opt = AdamW(model.named_parameters(), lr=train_cfg.lr,
                weight_decay=train_cfg.weight_decay)
    step = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        apply_params(model, ckpt.params)
        opt.load_state_arrays(ckpt.opt_state.items(), ckpt.step)
        step = ckpt.step

    steps_per_epoch = max(1, len(dataset) // train_cfg.batch_size)
    total_steps = train_cfg.epochs * steps_per_epoch
    if train_cfg.max_steps:
        total_steps = min(total_steps, train_cfg.max_steps)

    rng = np.random.default_rng(train_cfg.seed)
    loss_log = []
    stop = False
    start_epoch = step // steps_per_epoch
    for epoch in range(start_epoch, train_cfg.epochs):
        order = rng.permutation(len(dataset))
        epoch_total, epoch_l1, epoch_cen, batches = 0.0, None, None, 0
        for b in range(steps_per_epoch):
            idx = order[b * train_cfg.batch_size:(b + 1) * train_cfg.batch_size]
            if len(idx) == 0:
                continue
            lr_t = cosine_lr(train_cfg.lr, step, total_steps)
            with Tape() as tape:
                batch_total = None
                l1_acc = cen_acc = None
                for j in idx:
                    trip = (augment(dataset[j], rng, train_cfg.crop)
                            if train_cfg.augment else dataset[j])
                    fa = Tensor(trip.frame_a[None])
                    fb = Tensor(trip.frame_b[None])
                    stages = model.forward(fa, fb)
                    loss, l1s, cens = total_loss(
                        [s.stage_output for s in stages],
                        Tensor(trip.target[None]))
                    batch_total = loss if batch_total is None else batch_total + loss
                    l1_acc = (np.array(l1s) if l1_acc is None
                              else l1_acc + np.array(l1s))
                    cen_acc = (np.array(cens) if cen_acc is None
                               else cen_acc + np.array(cens))
                batch_total = batch_total * (1.0 / len(idx))
                value = float(batch_total.data)
                if not np.isfinite(value):
                    raise TrainingDiverged(step, value)
                model.zero_grad()
                backward(batch_total)
            opt.step(lr=lr_t)
            step += 1
            l1s = l1_acc / len(idx)
            cens = cen_acc / len(idx)
            epoch_total += value
            epoch_l1 = l1s if epoch_l1 is None else epoch_l1 + l1s
            epoch_cen = cens if epoch_cen is None else epoch_cen + cens
            batches += 1
            if callback is not None and callback(step, value, list(l1s)):
                stop = True
                break
            if train_cfg.max_steps and step >= train_cfg.max_steps:
                stop = True
                break
        if batches:
            line = _loss_log_line(epoch + 1, epoch_total / batches,
                                  epoch_l1 / batches, epoch_cen / batches)
            loss_log.append(line)
            if log_fh is not None:
                print(line, file=log_fh, flush=True)
        if out_path is not None and (
                stop or epoch + 1 == train_cfg.epochs
                or (epoch + 1) % train_cfg.checkpoint_every == 0):
            save_checkpoint(out_path, model_cfg.to_dict(),
                            [(n, p.data) for n, p in model.named_parameters()],
                            opt_arrays=opt.state_arrays(), step=step)
        if stop:
            break
    if out_path is not None:
        save_checkpoint(out_path, model_cfg.to_dict(),
                        [(n, p.data) for n, p in model.named_parameters()],
                        opt_arrays=opt.state_arrays(), step=step)
    return model, loss_log


def load_model(path) -> HVFIModel:
    ckpt = load_checkpoint(path)
    model = HVFIModel(ModelConfig.from_dict(ckpt.config))
    apply_params(model, ckpt.params)
    return model
