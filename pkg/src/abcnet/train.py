"""Training: soft-IoU loss with deep supervision, AdamW with poly decay, and the epoch loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import metrics
from .model import ABC
from .tensor import DTYPE, Tensor, div, mul, no_grad, sigmoid, sub, tsum

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    epochs: int = 300
    base_lr: float = 3e-4
    batch_size: int = 4
    poly_power: float = 0.9
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    loss_eps: float = 1.0
    hflip: bool = False
    checkpoint_every: int = 50
    checkpoint_dir: Optional[str] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        # lr = 0 is allowed: it turns fit into a pure weight-decay / no-op pass
        if self.base_lr < 0:
            raise ValueError("base_lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def soft_iou_loss(logits: Tensor, target, eps: float = 1.0) -> Tensor:
    """1 - (sum p*t + eps) / (sum p + sum t - sum p*t + eps), averaged over the batch."""
    target = np.asarray(target, dtype=DTYPE)
    if target.shape != logits.shape:
        raise ValueError(f"target shape {target.shape} != logits shape {logits.shape}")
    if not np.isin(target, (0.0, 1.0)).all():
        raise ValueError("soft_iou_loss target must be binary")
    axes = tuple(range(1, logits.ndim))
    p = sigmoid(logits)
    t = Tensor(target)
    inter = tsum(mul(p, t), axis=axes)
    union = sub(tsum(p, axis=axes) + target.sum(axis=axes), inter)
    ratio = div(inter + eps, union + eps)
    return sub(1.0, ratio).mean()


def deep_supervision_loss(main: Tensor, aux: Sequence[Tensor], target, eps: float = 1.0) -> Tensor:
    """Equal-weight mean of the soft-IoU loss over the main head and every auxiliary head."""
    terms = [soft_iou_loss(main, target, eps)] + [soft_iou_loss(a, target, eps) for a in aux]
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms))


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

def poly_lr(base_lr: float, it: int, max_iter: int, power: float = 0.9) -> float:
    if max_iter <= 0 or it >= max_iter:
        return 0.0
    return base_lr * (1.0 - it / max_iter) ** power


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamWState,
               lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01) -> None:
    """One bias-corrected Adam update with decoupled weight decay, in place on ``params``."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        if m.shape != p.shape or v.shape != p.shape:
            raise ValueError(f"moment shape mismatch for {name}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= DTYPE(lr * weight_decay) * p
        update = (m / DTYPE(c1)) / (np.sqrt(v / DTYPE(c2)) + DTYPE(eps))
        p -= DTYPE(lr) * update


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    lr: float
    train_iou: float

    def csv(self) -> str:
        return f"{self.epoch},{self.mean_loss:.8f},{self.lr:.8e},{self.train_iou:.6f}"


def stack_samples(samples) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([np.asarray(s.image, dtype=DTYPE) for s in samples])[:, None]
    masks = np.stack([np.asarray(s.mask, dtype=DTYPE) for s in samples])[:, None]
    return images, masks


def fit(model: ABC, dataset, config: TrainConfig, state: Optional[AdamWState] = None,
        log_path: Optional[str] = None) -> list[EpochRecord]:
    """Train ``model`` in place on a sequence of samples (objects with ``image`` and ``mask``).

    Deterministic for a given ``config.seed``. Returns one record per epoch;
    with ``log_path`` the same records are appended to a CSV file as they finish.
    """
    from .checkpoint import save_checkpoint

    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    images, masks = stack_samples(dataset)
    if tuple(images.shape[2:]) != model.config.input_resolution:
        raise ValueError(f"dataset resolution {images.shape[2:]} != model resolution "
                         f"{model.config.input_resolution}")
    state = state if state is not None else AdamWState()
    rng = np.random.default_rng(config.seed)
    named = dict(model.named_parameters())
    n = len(images)
    batches_per_epoch = math.ceil(n / config.batch_size)
    max_iter = config.epochs * batches_per_epoch
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_file = open(log_path, "w") if log_path else None

    records = []
    best_iou = -1.0
    it = 0
    try:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(n)
            losses = []
            counts = metrics.ConfusionCounts(0, 0, 0, 0)
            lr = 0.0
            for b in range(batches_per_epoch):
                idx = order[b * config.batch_size:(b + 1) * config.batch_size]
                x, y = images[idx], masks[idx]
                if config.hflip:
                    flip = rng.random(len(idx)) < 0.5
                    x = np.where(flip[:, None, None, None], x[..., ::-1], x)
                    y = np.where(flip[:, None, None, None], y[..., ::-1], y)
                lr = poly_lr(config.base_lr, it, max_iter, config.poly_power)
                model.zero_grad()
                main, aux = model(Tensor(x))
                loss = deep_supervision_loss(main, aux, y, config.loss_eps)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
                loss.backward()
                params = {k: p.data for k, p in named.items()}
                grads = {k: p.grad for k, p in named.items() if p.grad is not None}
                adamw_step(params, grads, state, lr, config.betas, config.eps, config.weight_decay)
                losses.append(value)
                with no_grad():
                    probs = sigmoid(main.detach()).data
                for prob, gt in zip(probs, y):
                    counts = counts + metrics.confusion(metrics.binarize(prob), gt)
                it += 1
            record = EpochRecord(epoch, float(np.mean(losses)), lr, metrics.iou(counts))
            records.append(record)
            log.info("epoch %d loss %.5f lr %.3e iou %.4f", epoch, record.mean_loss, lr, record.train_iou)
            if log_file:
                log_file.write(record.csv() + "\n")
                log_file.flush()
            if ckpt_dir:
                if epoch % config.checkpoint_every == 0:
                    save_checkpoint(model, state, ckpt_dir / f"epoch_{epoch:04d}.abck")
                if record.train_iou > best_iou:
                    best_iou = record.train_iou
                    save_checkpoint(model, state, ckpt_dir / "best.abck")
    finally:
        if log_file:
            log_file.close()
    return records


def predict(model: ABC, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Sigmoid probabilities of the main head, shape (N, 1, H, W)."""
    images = np.asarray(images, dtype=DTYPE)
    if images.ndim == 3:
        images = images[:, None]
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            logits, _ = model(Tensor(images[i:i + batch_size]))
            out.append(sigmoid(logits).data)
    return np.concatenate(out)
