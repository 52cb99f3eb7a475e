"""Parallel multi-resolution training loop and its ablation modes."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from .data import AugmentationConfig, MultiResolutionBatch, iterate_batches, preprocess_eval_set
from .losses import (
    DISTILL_VARIANTS, LossBreakdown, NonFiniteLoss, classification_loss, distillation_loss,
    ensemble_logit, ensemble_loss, softmax_probs, total_loss,
)
from .model import SwitchableClassifier, build_model

log = logging.getLogger(__name__)

MODES = ("parallel+mred", "parallel-only", "individual", "shared-bn", "multi-crop", "single-resolution")
SCHEDULES = ("cosine", "step")

# loss terms driven by each mode
MODE_TERMS = {
    "parallel+mred": ("cls", "ens", "dis"),
    "multi-crop": ("cls", "ens", "dis"),
    "single-resolution": ("cls", "ens", "dis"),
    "parallel-only": ("cls", "ens"),
    "shared-bn": ("cls", "ens"),
    "individual": ("cls",),
}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 128
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "cosine"
    milestones: Tuple[int, ...] = ()
    lr_factor: float = 0.1
    mode: str = "parallel+mred"
    distill_variant: str = "full"
    multi_crop: bool = False
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        for name in ("epochs", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.distill_variant not in DISTILL_VARIANTS:
            raise ValueError(f"distill_variant must be one of {DISTILL_VARIANTS}")
        if "dis" not in MODE_TERMS[self.mode] and self.distill_variant != "full":
            raise ValueError(f"distill_variant only applies to distillation modes, not {self.mode!r}")

    @property
    def terms(self):
        return MODE_TERMS[self.mode]

    @property
    def crops_per_branch(self) -> bool:
        return self.multi_crop or self.mode == "multi-crop"


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    lr: float = 0.0
    sums: Dict[str, float] = field(default_factory=lambda: dict(l_cls=0.0, l_ens=0.0, l_dis=0.0, total=0.0))
    count: int = 0

    def record(self, parts: LossBreakdown, n: int):
        for k in self.sums:
            self.sums[k] += getattr(parts, k) * n
        self.count += n

    def averages(self) -> LossBreakdown:
        c = max(self.count, 1)
        return LossBreakdown(*(self.sums[k] / c for k in ("l_cls", "l_ens", "l_dis", "total")))

    def reset(self):
        self.sums = {k: 0.0 for k in self.sums}
        self.count = 0


# ---------------------------------------------------------------------------
# schedules


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError("step must lie in [0, total_steps]")
    if total_steps == 0:
        return base_lr
    return 0.5 * base_lr * (1 + math.cos(math.pi * step / total_steps))


def step_lr(epoch: int, base_lr: float, milestones: Sequence[int], factor: float = 0.1) -> float:
    return base_lr * factor ** sum(1 for m in milestones if epoch >= m)


def learning_rate(config: TrainConfig, step: int, total_steps: int, epoch: int) -> float:
    if config.schedule == "cosine":
        return cosine_lr(step, total_steps, config.base_lr)
    return step_lr(epoch, config.base_lr, config.milestones, config.lr_factor)


# ---------------------------------------------------------------------------
# model plans per mode


def model_plans(arch: str, resolutions: Sequence[int], num_classes: int,
                config: TrainConfig) -> List[Tuple[str, dict]]:
    """``(tag, build_model kwargs)`` for every model a mode trains.

    ``individual`` and ``single-resolution`` train one model per resolution;
    every other mode trains a single switchable model.
    """
    res = sorted((int(r) for r in resolutions), reverse=True)
    base = dict(arch_id=arch, num_classes=num_classes)
    if config.mode == "individual":
        return [(f"r{r}", dict(base, profile=[r])) for r in res]
    if config.mode == "single-resolution":
        return [(f"r{r}", dict(base, profile=[r], branches=[r] * len(res))) for r in res]
    return [("model", dict(base, profile=res, shared_bn=config.mode == "shared-bn"))]


def make_optimizer(model: SwitchableClassifier, config: TrainConfig) -> torch.optim.SGD:
    net = [p for n, p in model.named_parameters() if n != "raw_scores"]
    groups = [
        dict(params=net, weight_decay=config.weight_decay),
        dict(params=[model.raw_scores], weight_decay=0.0),
    ]
    return torch.optim.SGD(groups, lr=config.base_lr, momentum=config.momentum)


# ---------------------------------------------------------------------------
# one step


def train_step(model: SwitchableClassifier, batch: MultiResolutionBatch, optimizer,
               config: TrainConfig, state: Optional[TrainState] = None,
               terms: Optional[Sequence[str]] = None) -> LossBreakdown:
    """One forward/backward/SGD update over all branches.

    ``terms`` overrides the loss terms implied by ``config.mode``.  When
    neither the classification nor the distillation term is active the
    network is frozen outright: forwards run without autograd and without
    touching running statistics, so only the ensemble scores move.
    """
    terms = set(config.terms if terms is None else terms)
    if len(batch.images) != len(model.branches):
        raise ValueError(f"batch carries {len(batch.images)} resolutions, model has "
                         f"{len(model.branches)} branches")
    idx = []
    for x, r in zip(batch.images, model.branches):
        if x.shape[-1] != r:
            raise ValueError(f"branch expects {r} px images, got {x.shape[-1]}")
        idx.append(model.profile.index(r))
    y = batch.labels

    if terms & {"cls", "dis"}:
        logits = [model(x, s, train=True) for x, s in zip(batch.images, idx)]
    else:
        with torch.no_grad():
            logits = [model(x, s, train=True, update_stats=False) for x, s in zip(batch.images, idx)]

    zero = logits[0].new_zeros(())
    l_cls = classification_loss(logits, y) if "cls" in terms else zero
    l_ens = ensemble_loss(model.raw_scores, logits, y) if "ens" in terms else zero
    if "dis" in terms:
        probs = [softmax_probs(z) for z in logits]
        z0 = ensemble_logit(model.alpha.detach(), [z.detach() for z in logits])
        l_dis = distillation_loss(config.distill_variant, softmax_probs(z0), probs)
    else:
        l_dis = zero
    parts = total_loss(l_cls, l_ens, l_dis)

    optimizer.zero_grad(set_to_none=True)
    if parts.total.requires_grad:
        parts.total.backward()
        optimizer.step()
    out = parts.to_floats()
    if state is not None:
        state.step += 1
        state.record(out, len(y))
    return out


# ---------------------------------------------------------------------------
# full training


METRIC_FIELDS = ("epoch", "step", "lr", "l_cls", "l_ens", "l_dis", "total")


def metric_columns(model: SwitchableClassifier) -> List[str]:
    return (list(METRIC_FIELDS) + [f"acc@{r}" for r in model.profile]
            + [f"alpha_{k + 1}" for k in range(len(model.branches))])


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def train(model: SwitchableClassifier, dataset, config: TrainConfig,
          augmentation: AugmentationConfig = AugmentationConfig(), val_set=None,
          metrics_path=None, checkpoint_dir=None):
    """Train ``model`` in place; returns ``(model, metrics rows)``.

    After every epoch top-1 accuracy is measured on ``val_set`` (or the
    training images when none is given) at every profile resolution with
    eval preprocessing.  ``metrics_path`` receives one CSV row per epoch.
    """
    from .analysis import evaluate
    from .checkpoint import save_checkpoint

    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    torch.manual_seed(config.seed)
    optimizer = make_optimizer(model, config)
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    state = TrainState()
    val_source = val_set if val_set is not None else dataset
    val_cache = {r: preprocess_eval_set(val_source, r, augmentation) for r in model.profile}

    columns = metric_columns(model)
    writer = None
    fh = None
    if metrics_path is not None:
        metrics_path = Path(metrics_path)
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)

    rows = []
    try:
        for epoch in range(config.epochs):
            state.epoch = epoch
            state.reset()
            model.train()
            batches = iterate_batches(dataset, model.branches, augmentation, config.batch_size,
                                      config.seed, epoch, multi_crop=config.crops_per_branch)
            for batch in batches:
                lr = learning_rate(config, state.step, total_steps, epoch)
                for g in optimizer.param_groups:
                    g["lr"] = lr
                state.lr = lr
                try:
                    train_step(model, batch, optimizer, config, state)
                except NonFiniteLoss as e:
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, step {state.step}, lr {lr:.6g}: {e}") from e
            model.eval()
            avg = state.averages()
            row = dict(epoch=epoch + 1, step=state.step, lr=state.lr, l_cls=avg.l_cls,
                       l_ens=avg.l_ens, l_dis=avg.l_dis, total=avg.total)
            for r in model.profile:
                row[f"acc@{r}"] = evaluate(model, val_cache[r], r)["top1"]
            for k, a in enumerate(model.alpha.detach().tolist()):
                row[f"alpha_{k + 1}"] = a
            rows.append(row)
            log.info("epoch %d/%d  loss %.4f  %s", epoch + 1, config.epochs, avg.total,
                     "  ".join(f"{k} {row[k]:.2f}" for k in columns if k.startswith("acc@")))
            if writer is not None:
                writer.writerow([_fmt(row[c]) for c in columns])
                fh.flush()
            if checkpoint_dir is not None and config.checkpoint_every and \
                    (epoch + 1) % config.checkpoint_every == 0 and epoch + 1 < config.epochs:
                save_checkpoint(model, Path(checkpoint_dir) / f"epoch{epoch + 1:03d}")
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_dir is not None:
        save_checkpoint(model, Path(checkpoint_dir) / "final")
    return model, rows


def train_plans(arch, resolutions, num_classes, dataset, config: TrainConfig,
                augmentation: AugmentationConfig = AugmentationConfig(), val_set=None,
                out_dir=None):
    """Build and train every model a mode calls for; returns ``{tag: (model, rows)}``."""
    results = {}
    for tag, kwargs in model_plans(arch, resolutions, num_classes, config):
        model = build_model(seed=config.seed, **kwargs)
        metrics = ckpt = None
        if out_dir is not None:
            out_dir = Path(out_dir)
            metrics = out_dir / "metrics" / f"{tag}.csv"
            ckpt = out_dir / "checkpoints" / tag
        results[tag] = train(model, dataset, config, augmentation, val_set, metrics, ckpt)
    return results


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["milestones"] = list(config.milestones)
    return d
