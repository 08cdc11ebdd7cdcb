"""AdamW with cosine annealing, checkpoints, and the toy training loop."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from .data import augment, load_dataset
from .errors import NumericError, ValidationError
from .losses import LossConfig, loss_terms
from .network import Model, ModelConfig, build_model
from .rng import split
from .stf import read_stf, write_stf
from .tensor import Tensor, backward

CHECKPOINT_MANIFEST = "checkpoint.json"


def cosine_lr(step: int, total: int, base: float, final: float) -> float:
    """Learning rate for ``step`` in ``[0, total)``: ``base`` at step 0, annealed toward ``final``."""
    if total <= 1:
        return base
    return final + 0.5 * (base - final) * (1.0 + math.cos(math.pi * step / (total - 1)))


class AdamW:
    """Adam with decoupled weight decay: ``p <- p - lr * (wd * p + m_hat / (sqrt(v_hat) + eps))``."""

    def __init__(self, params: List[Tensor], lr: float = 1e-4, weight_decay: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Dict[Tensor, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = grads[p].astype(p.dtype, copy=False)
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - self.lr * (self.weight_decay * p.data + update).astype(p.dtype)


@dataclass
class TrainConfig:
    steps: int = 200
    batch: int = 4
    lr: float = 1e-4
    final_lr: float = 1e-6
    weight_decay: float = 0.01
    augment: bool = True
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)


def save_checkpoint(path: Path, model: Model, extra: Optional[Dict] = None) -> None:
    """Directory bundle: one STF per parameter plus a JSON manifest."""
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    files = {}
    for name, p in model.registry().items():
        fname = f"params/{name}.stf"
        write_stf(path / fname, p.data)
        files[name] = fname
    manifest = {"config": model.config.to_dict(), "params": files}
    manifest.update(extra or {})
    (path / CHECKPOINT_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: Path) -> Model:
    path = Path(path)
    manifest_path = path / CHECKPOINT_MANIFEST
    if not manifest_path.is_file():
        raise ValidationError(f"{path} is not a checkpoint (no {CHECKPOINT_MANIFEST})")
    manifest = json.loads(manifest_path.read_text())
    model = Model(ModelConfig.from_dict(manifest["config"]), 0)
    model.load_state_dict({k: read_stf(path / f) for k, f in manifest["params"].items()})
    return model


def train(model: Model, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
          log: Optional[Callable[[Dict], None]] = None) -> List[Dict]:
    """Minimize ``alpha * CE + beta * Dice`` with AdamW and a cosine schedule.

    Returns one record per step with the total, CE and Dice losses and the
    learning rate used.
    """
    if cfg.steps < 0 or cfg.batch < 1:
        raise ValidationError(f"need steps >= 0 and batch >= 1, got {cfg.steps}, {cfg.batch}")
    params = model.parameters()
    opt = AdamW(params, cfg.lr, cfg.weight_decay)
    sample_rng, aug_rng = split(cfg.seed, 2)
    dtype = params[0].dtype
    history = []
    for step in range(cfg.steps):
        idx = sample_rng.choice(len(images), size=cfg.batch, replace=len(images) < cfg.batch)
        xb, yb = images[idx], labels[idx]
        if cfg.augment:
            pairs = [augment(aug_rng, x, y) for x, y in zip(xb, yb)]
            xb = np.stack([p[0] for p in pairs])
            yb = np.stack([p[1] for p in pairs])
        opt.lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.final_lr)
        try:
            total, ce, dice = loss_terms(model(xb.astype(dtype)), yb, cfg.loss)
            grads = backward(total, params)
        except NumericError as exc:
            raise NumericError(f"non-finite value at step {step}: {exc}") from exc
        rec = {"step": step, "lr": opt.lr, "total": float(total.data), "ce": float(ce.data),
               "dice": float(dice.data)}
        if not all(math.isfinite(rec[k]) for k in ("total", "ce", "dice")):
            raise NumericError(f"loss became NaN/inf at step {step}")
        opt.step(grads)
        history.append(rec)
        if log:
            log(rec)
    return history


def train_toy(config, data_dir: Path, out: Path, cfg: TrainConfig,
              log: Optional[Callable[[Dict], None]] = None) -> List[Dict]:
    """Build, train on a generated dataset, and write the checkpoint and loss log to ``out``."""
    spec, images, labels = load_dataset(data_dir)
    model = build_model(config, cfg.seed)
    c = model.config
    if images.shape[1] != c.in_channels:
        raise ValidationError(f"data has {images.shape[1]} channels, model expects {c.in_channels}")
    if spec.classes > c.classes:
        raise ValidationError(f"data has {spec.classes} classes, model predicts {c.classes}")
    model.check_input(images.shape)
    history = train(model, images, labels, cfg, log)
    out = Path(out)
    train_meta = asdict(cfg)
    save_checkpoint(out, model, {"train": train_meta, "steps_done": len(history)})
    with open(out / "losses.jsonl", "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return history
