"""Training recipe: resize, BCE on logits, Adam, cyclic cosine-to-zero schedule."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import torch

from .core import ExperimentConfig, Sample, TrainingError
from .evaluation import dice, predict, threshold
from .model import Checkpoint, SegmentationModel, load_parameters, make_checkpoint, parameter_digest, parameter_set
from .raster import resize_bilinear, resize_nearest

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def resize_for_training(sample: Sample, size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear resize of the image, nearest-neighbour resize of the mask."""
    size = (int(size[0]), int(size[1]))
    if size[0] % 8 or size[1] % 8:
        log.warning("training size %s is not divisible by 8; most presets will reject it", size)
    return resize_bilinear(sample.patch.pixels, size), resize_nearest(sample.mask.values, size)


def _softplus(x: torch.Tensor) -> torch.Tensor:
    # both branches stay finite, so the masked branch cannot poison the gradient;
    # the derivative is exactly sigmoid(x), including at x == 0
    pos = x + torch.log1p(torch.exp(-x.clamp(min=0)))
    neg = torch.log1p(torch.exp(x.clamp(max=0)))
    return torch.where(x > 0, pos, neg)


def bce_loss(logits, targets):
    """Mean binary cross-entropy computed from logits as ``softplus(x) - x*y``.

    Finite for every finite logit.  Torch inputs give a differentiable
    scalar tensor; numpy inputs give a float.
    """
    as_numpy = not isinstance(logits, torch.Tensor)
    x = torch.as_tensor(logits)
    y = torch.as_tensor(targets, dtype=x.dtype, device=x.device)
    if x.shape != y.shape:
        raise ValueError(f"logits shape {tuple(x.shape)} does not match targets {tuple(y.shape)}")
    loss = (_softplus(x) - x * y).mean()
    return float(loss) if as_numpy else loss


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 1e-4
    cycle_epochs: int = 30
    cycles: int = 1
    steps_per_epoch: int = 1

    def __post_init__(self) -> None:
        if self.base_lr <= 0 or min(self.cycle_epochs, self.cycles, self.steps_per_epoch) < 1:
            raise ValueError("schedule fields must all be positive")

    @property
    def cycle_steps(self) -> int:
        return self.cycle_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.cycles * self.cycle_steps


def cosine_lr(step: int, schedule: ScheduleConfig) -> float:
    """base_lr * (1 + cos(pi * t / T)) / 2, restarting every T steps."""
    if not 0 <= step < schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps})")
    t = step % schedule.cycle_steps
    return schedule.base_lr * (1.0 + math.cos(math.pi * t / schedule.cycle_steps)) / 2.0


@dataclass
class AdamState:
    m: dict[str, Any]
    v: dict[str, Any]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: Mapping[str, Any], **hyper: float) -> "AdamState":
        zero = {n: (torch.zeros_like(p) if isinstance(p, torch.Tensor) else np.zeros_like(p))
                for n, p in params.items()}
        return cls(m=dict(zero), v=dict(zero), **hyper)


def _finite(a) -> bool:
    if isinstance(a, torch.Tensor):
        return bool(torch.isfinite(a).all())
    return bool(np.all(np.isfinite(a)))


def _sqrt(a):
    return torch.sqrt(a) if isinstance(a, torch.Tensor) else np.sqrt(a)


def adam_step(params: Mapping[str, Any], grads: Mapping[str, Any], state: AdamState,
              lr: float) -> tuple[dict[str, Any], AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    for name, g in grads.items():
        if not _finite(g):
            raise TrainingError(f"non-finite gradient for parameter {name!r}", parameter=name)
    b1, b2 = state.beta1, state.beta2
    t = state.t + 1
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_params, m, v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if tuple(g.shape) != tuple(p.shape):
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name!r}")
        m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        new_params[name] = p - lr * (m[name] / c1) / (_sqrt(v[name] / c2) + state.eps)
    return new_params, replace(state, m=m, v=v, t=t)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_dice: float
    lr: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)

    @property
    def best_epoch(self) -> int:
        """Index of the highest validation Dice, earliest on ties."""
        best = 0
        for i, rec in enumerate(self.epochs):
            if rec.val_dice > self.epochs[best].val_dice:
                best = i
        return best

    def to_dict(self) -> dict[str, Any]:
        return {"epochs": [asdict(r) for r in self.epochs], "best_epoch": self.best_epoch}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainHistory":
        return cls([EpochRecord(**r) for r in d["epochs"]])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def _stack(samples: Sequence[Sample], size: tuple[int, int], dtype: torch.dtype):
    images, masks = [], []
    for s in samples:
        img, msk = resize_for_training(s, size)
        images.append(img.transpose(2, 0, 1))
        masks.append(msk[None].astype(np.float64))
    return torch.from_numpy(np.stack(images)).to(dtype), torch.from_numpy(np.stack(masks)).to(dtype)


def _augment(x: torch.Tensor, y: torch.Tensor, rng: np.random.Generator):
    xs, ys = [], []
    for xi, yi in zip(x, y):
        k = int(rng.integers(0, 4))
        flip = bool(rng.integers(0, 2))
        if flip:
            xi, yi = xi.flip(-1), yi.flip(-1)
        xs.append(torch.rot90(xi, k, (-2, -1)))
        ys.append(torch.rot90(yi, k, (-2, -1)))
    return torch.stack(xs), torch.stack(ys)


def validation_dice(model: SegmentationModel, samples: Sequence[Sample], config: ExperimentConfig) -> float:
    """Mean per-image Dice of thresholded single-model predictions at native resolution."""
    scores = [dice(threshold(predict([model], s, config), config.threshold), s.mask) for s in samples]
    return math.fsum(scores) / len(scores)


StepHook = Callable[[int, SegmentationModel], None]


def train(model: SegmentationModel, train_samples: Sequence[Sample], val_samples: Sequence[Sample],
          config: ExperimentConfig, init: Checkpoint | None = None, step_hook: StepHook | None = None,
          metadata: Mapping[str, Any] | None = None) -> tuple[Checkpoint, TrainHistory]:
    """Fit ``model`` in place and return the best-validation checkpoint with the history.

    Samples are reshuffled every epoch from a stream seeded by
    ``config.seed``; the learning rate follows ``cosine_lr`` per step.
    ``step_hook(step, model)`` runs before every optimizer step.
    """
    train_samples, val_samples = list(train_samples), list(val_samples)
    if not val_samples:
        raise ValueError("validation set is empty")
    if not train_samples:
        raise ValueError("training set is empty")
    model.to(DTYPES[config.dtype])
    if init is not None:
        load_parameters(model, init, strict=True)

    x_all, y_all = _stack(train_samples, config.train_resolution, DTYPES[config.dtype])
    n = len(train_samples)
    steps_per_epoch = math.ceil(n / config.batch_size)
    schedule = ScheduleConfig(config.base_lr, config.epochs // config.cycles, config.cycles, steps_per_epoch)
    named = dict(model.named_parameters())
    state = AdamState.zeros({k: p.detach() for k, p in named.items()})
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5EED]))
    meta = {"init_digest": parameter_digest(parameter_set(model)), "init_from_checkpoint": init is not None,
            "seed": config.seed}
    meta.update(metadata or {})

    history = TrainHistory()
    best: Checkpoint | None = None
    step = 0
    model.train()
    for epoch in range(config.epochs):
        lr_start = cosine_lr(step, schedule)
        order = rng.permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            idx = torch.from_numpy(order[b * config.batch_size:(b + 1) * config.batch_size])
            x, y = x_all[idx], y_all[idx]
            if config.augment:
                x, y = _augment(x, y, rng)
            if step_hook is not None:
                step_hook(step, model)
            model.zero_grad(set_to_none=True)
            loss = bce_loss(model(x), y)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}", epoch=epoch, step=step)
            loss.backward()
            losses.append(loss.item())
            params = {k: p.detach() for k, p in named.items()}
            grads = {k: (p.grad if p.grad is not None else torch.zeros_like(p)) for k, p in named.items()}
            new_params, state = adam_step(params, grads, state, cosine_lr(step, schedule))
            with torch.no_grad():
                for k, p in named.items():
                    p.copy_(new_params[k])
            step += 1
        val = validation_dice(model, val_samples, config)
        history.epochs.append(EpochRecord(epoch, math.fsum(losses) / len(losses), val, lr_start))
        log.debug("epoch %d loss %.4f val dice %.4f", epoch, history.epochs[-1].train_loss, val)
        if best is None or val > best.metadata["best_val_dice"]:
            best = make_checkpoint(model, epoch=epoch, best_val_dice=val, **meta)
    assert best is not None
    return best, history
