"""Rate-distortion training: Adam, plateau learning-rate schedule, checkpointing."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .data import dataset_iter, steps_per_epoch, synthetic_dataset, to_batch, validation_set
from .network import GabicModel, ModelConfig, rd_loss
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lam: float = 0.025
    crop: int = 64
    batch: int = 8
    lr0: float = 1e-4
    plateau_factor: float = 0.3
    plateau_patience: int = 10
    epochs: int = 20
    seed: int = 0
    attention: str = "knn"
    k: tuple[int, int] | None = None
    heads: int = 1
    max_steps: int | None = None
    clip_norm: float = 1.0
    mode: str = "ste"

    def __post_init__(self):
        if not 0 < self.lam < 1:
            raise ValueError(f"lambda must be in (0, 1), got {self.lam}")
        if not 0 < self.plateau_factor < 1:
            raise ValueError(f"plateau factor must be in (0, 1), got {self.plateau_factor}")
        if self.k is not None:
            self.k = tuple(self.k)

    def model_config(self, base: ModelConfig = ModelConfig()) -> ModelConfig:
        d = base.to_dict()
        d.update(attention=self.attention, heads=self.heads, k=None if self.k is None else list(self.k))
        return ModelConfig.from_dict(d)


# -- optimizer ---------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm is None or total <= max_norm or total == 0.0:
        return grads, total
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              clip_norm: float | None = 1.0) -> float:
    """One Adam update in place; returns the pre-clipping gradient norm."""
    grads, norm = clip_grad_norm(grads, clip_norm)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
    return norm


@dataclass
class PlateauSchedule:
    lr: float = 1e-4
    factor: float = 0.3
    patience: int = 10
    threshold: float = 1e-4
    min_lr: float = 1e-7
    best: float = math.inf
    bad_epochs: int = 0

    def step(self, value: float) -> float:
        """Feed one epoch's validation loss; returns the learning rate to use next."""
        if value < self.best * (1.0 - self.threshold):
            self.best = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs > self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


def plateau_schedule(history: Sequence[float], state: PlateauSchedule) -> float:
    for value in history:
        state.step(value)
    return state.lr


# -- training loop ----------------------------------------------------------------------

@dataclass
class TrainResult:
    model: GabicModel
    log: list[dict]
    val_history: list[float]
    best_val: float
    checkpoint: str | None = None


def evaluate_loss(model: GabicModel, images: Sequence[np.ndarray], lam: float) -> dict:
    """Round-mode estimated loss, bpp and MSE over a list of images (no gradient)."""
    x = Tensor(to_batch(images, T.get_dtype()))
    with T.no_grad():
        out = model.forward(x, "round")
        loss, bpp, mse = rd_loss(x, out["x_hat"], out["rate_y"], out["rate_z"], lam)
    return {"loss": loss.item(), "bpp": bpp.item(), "mse": mse.item()}


def _psnr_from_mse(mse: float) -> float:
    return 10.0 * math.log10(1.0 / mse) if mse > 0 else math.inf


def _state_meta(config: TrainConfig, step: int, adam: AdamState, sched: PlateauSchedule,
                val_history: list[float], best_val: float) -> dict:
    return {
        "train_config": asdict(config),
        "step": step,
        "adam_t": adam.t,
        "schedule": asdict(sched),
        "val_history": val_history,
        "best_val": best_val,
        "lambda": config.lam,
    }


def save_state(path: str, model: GabicModel, config: TrainConfig, step: int, adam: AdamState,
               sched: PlateauSchedule, val_history: list[float], best_val: float) -> None:
    extra = {f"adam.m/{k}": v for k, v in adam.m.items()}
    extra.update({f"adam.v/{k}": v for k, v in adam.v.items()})
    checkpoint.save(path, model, _state_meta(config, step, adam, sched, val_history, best_val), extra)


def train(config: TrainConfig, model: GabicModel | None = None, images: Sequence[np.ndarray] | str | None = None,
          val_images: Sequence[np.ndarray] | None = None, out: str | None = None, log_csv: str | None = None,
          resume: str | None = None, state_out: str | None = None) -> TrainResult:
    """Minimise bpp + lambda * 255^2 * MSE with Adam.

    ``out`` receives the checkpoint with the best validation loss;
    ``state_out`` receives the full training state (optimizer included) at
    the end, which ``resume`` accepts to continue exactly where it stopped.
    """
    if images is None:
        images = synthetic_dataset(200, size=96, seed=config.seed + 17)
    if val_images is None:
        val_images = validation_set(config.crop)
    if model is None:
        model = GabicModel(config.model_config(), seed=config.seed)

    adam = AdamState()
    sched = PlateauSchedule(lr=config.lr0, factor=config.plateau_factor, patience=config.plateau_patience)
    step, val_history, best_val = 0, [], math.inf
    if resume is not None:
        model, meta, extra = checkpoint.load(resume, dtype=T.get_dtype())
        step = meta["step"]
        adam.t = meta["adam_t"]
        adam.m = {k[len("adam.m/"):]: v.astype(T.get_dtype()) for k, v in extra.items() if k.startswith("adam.m/")}
        adam.v = {k[len("adam.v/"):]: v.astype(T.get_dtype()) for k, v in extra.items() if k.startswith("adam.v/")}
        sched = PlateauSchedule(**meta["schedule"])
        val_history = list(meta["val_history"])
        best_val = meta["best_val"]

    n_images = len(images) if isinstance(images, (list, tuple)) else None
    batches = dataset_iter(images, config.crop, config.batch, config.seed, start_step=step, dtype=T.get_dtype())
    per_epoch = steps_per_epoch(n_images, config.batch) if n_images else 25
    total_steps = config.max_steps if config.max_steps is not None else config.epochs * per_epoch
    records: list[dict] = []
    writer = None
    fh = None
    if log_csv is not None:
        fh = open(log_csv, "a" if resume else "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=["step", "loss", "bpp_est", "mse", "psnr", "lr"])
        if not resume:
            writer.writeheader()
    noise_root = T.Rng(config.seed).child(0xA11CE)
    try:
        while step < total_steps:
            x = Tensor(next(batches))
            out_ = model.forward(x, config.mode, noise_root.child(step))
            loss, bpp, mse = rd_loss(x, out_["x_hat"], out_["rate_y"], out_["rate_z"], config.lam)
            model.zero_grad()
            loss.backward()
            grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
            adam_step(model.params, grads, adam, sched.lr, config.clip_norm)
            step += 1
            rec = {"step": step, "loss": loss.item(), "bpp_est": bpp.item(), "mse": mse.item(),
                   "psnr": _psnr_from_mse(mse.item()), "lr": sched.lr}
            records.append(rec)
            if writer:
                writer.writerow(rec)
            if step % per_epoch == 0:
                val = evaluate_loss(model, val_images, config.lam)["loss"]
                val_history.append(val)
                if val < best_val:
                    best_val = val
                    if out is not None:
                        checkpoint.save(out, model, {"lambda": config.lam, "step": step, "val_loss": val,
                                                     "train_config": asdict(config)})
                sched.step(val)
                log.info("step %d val_loss %.4f lr %.2e", step, val, sched.lr)
    finally:
        if fh:
            fh.close()
    if out is not None and not os.path.exists(out):
        checkpoint.save(out, model, {"lambda": config.lam, "step": step, "train_config": asdict(config)})
    if state_out is not None:
        save_state(state_out, model, config, step, adam, sched, val_history, best_val)
    return TrainResult(model, records, val_history, best_val, out)
