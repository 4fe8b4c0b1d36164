"""Two-phase training: identity classification, then triplet ranking.

The triplet phase processes triplets one at a time at their own image
sizes, accumulates per-triplet gradients, and applies one momentum-SGD
step every ``batch`` triplets with the summed gradient divided by
``batch``.  Hard triplets come from a pool refreshed every ``refresh_k``
optimizer steps; cut-out grows linearly over the run.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import augment, mining
from . import ndtensor as nd
from .augment import CutoutSchedule, schedule_value
from .errors import NumericFault, ValidationError
from .evalrank import evaluate, extract_index
from .model import (BackboneConfig, EmbeddingModel, forward_classify, forward_embed, init_head,
                    init_model, no_record)

log = logging.getLogger(__name__)

AUGMENTATIONS = ("none", "flip", "crop", "cutout", "all")


@dataclass(frozen=True)
class PretrainConfig:
    iters: int = 800
    batch_size: int = 32
    lr_start: float = 1e-1
    lr_end: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-5
    crop_side: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.lr_start >= self.lr_end > 0:
            raise ValidationError("pretraining needs lr_start >= lr_end > 0")
        if self.iters < 1 or self.batch_size < 1:
            raise ValidationError("pretraining iters and batch_size must be >= 1")


@dataclass(frozen=True)
class TripletConfig:
    batch: int = 16
    lr0: float = 6e-2  # desk calibration; 1e-3 barely moves the small model
    halving_period: int = 512
    margin: float = 0.1
    largest_side: int = 64
    pool_size: int = 256
    refresh_k: int = 16
    top_t: int = 25
    cutout_start: float = 0.0
    cutout_end: float = 0.4
    total_iters: int = 1024
    augment: str = "cutout"
    crop_keep: float = 0.64
    momentum: float = 0.9
    weight_decay: float = 5e-5
    seed: int = 0

    def __post_init__(self):
        if self.batch < 1 or self.total_iters < 1:
            raise ValidationError("triplet batch and total_iters must be >= 1")
        if self.margin <= 0:
            raise ValidationError("margin must be positive")
        if self.augment not in AUGMENTATIONS:
            raise ValidationError(f"augment must be one of {AUGMENTATIONS}")

    @property
    def schedule(self):
        if self.augment not in ("cutout", "all"):
            return CutoutSchedule(0.0, 0.0, self.total_iters)
        return CutoutSchedule(self.cutout_start, self.cutout_end, self.total_iters)

    @property
    def flip(self):
        return self.augment in ("flip", "all")

    @property
    def crop(self):
        return self.augment in ("crop", "all")


def lr_log_halving(it, lr0, period):
    if period < 1:
        raise ValidationError("halving period must be >= 1")
    return lr0 * 2.0 ** (-(it // period))


def lr_log_linear(it, iters, lr_start, lr_end):
    if iters <= 1:
        return lr_start
    return lr_start * (lr_end / lr_start) ** (it / (iters - 1))


class TrainSet:
    """Training images with identity labels remapped to ``0..K-1``."""

    def __init__(self, samples):
        samples = [s for s in samples if s.split == "train"]
        if not samples:
            raise ValidationError("training split is empty")
        self.pixels = [s.pixels for s in samples]
        self.identities = np.array([s.identity for s in samples])
        classes = sorted(set(self.identities.tolist()))
        lookup = {c: i for i, c in enumerate(classes)}
        self.labels = np.array([lookup[i] for i in self.identities])
        self.num_classes = len(classes)
        self._resized = {}

    def __len__(self):
        return len(self.pixels)

    def resized(self, m):
        if m not in self._resized:
            self._resized[m] = [augment.resize_largest_side(p, m) for p in self.pixels]
        return self._resized[m]


# ---------------------------------------------------------------- pretraining


@dataclass
class PretrainResult:
    model: EmbeddingModel
    train_accuracy: float
    losses: list


def classification_accuracy(model, head, trainset: TrainSet, side, chunk=64):
    correct = 0
    for start in range(0, len(trainset), chunk):
        batch = np.stack([augment.resize(p, side, side) for p in trainset.pixels[start:start + chunk]])
        with no_record():
            logits = forward_classify(model, head, nd.Tensor(batch)).data
        correct += int(np.sum(np.argmax(logits, axis=1) == trainset.labels[start:start + chunk]))
    return correct / len(trainset)


def pretrain_classification(samples, model: EmbeddingModel, cfg: PretrainConfig, head=None,
                            progress=None) -> PretrainResult:
    """Fit backbone + temporary head with softmax cross-entropy.

    The returned model is a copy; the head is dropped.  ``progress`` (if
    given) receives ``(iteration, lr, loss)``.
    """
    trainset = samples if isinstance(samples, TrainSet) else TrainSet(samples)
    model = model.copy()
    if head is None:
        head = init_head(model.config.feature_dim, trainset.num_classes, cfg.seed + 1)
    if head.num_identities != trainset.num_classes:
        raise ValidationError("classifier head size differs from the training identity count")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    backbone_params = [p for name, p in model.named_params().items() if not name.startswith("proj.")]
    params = backbone_params + head.params()
    opt = nd.SGDMomentum(params, cfg.momentum, cfg.weight_decay)
    losses = []
    for it in range(cfg.iters):
        idx = rng.integers(len(trainset), size=cfg.batch_size)
        batch = np.stack([augment.random_resized_crop(trainset.pixels[i], cfg.crop_side, rng) for i in idx])
        nd.zero_grads(params)
        with nd.Tape() as tape:
            loss = nd.softmax_cross_entropy(forward_classify(model, head, nd.Tensor(batch)),
                                            trainset.labels[idx])
        value = loss.item()
        if not math.isfinite(value):
            raise NumericFault(f"pretraining loss is {value} at iteration {it}")
        nd.backward(tape, loss)
        lr = lr_log_linear(it, cfg.iters, cfg.lr_start, cfg.lr_end)
        opt.step([p.grad for p in params], lr)
        losses.append(value)
        if progress is not None:
            progress(it, lr, value)
    acc = classification_accuracy(model, head, trainset, cfg.crop_side)
    log.info("pretraining done: final loss %.4f, train accuracy %.3f", losses[-1], acc)
    return PretrainResult(model, acc, losses)


# ---------------------------------------------------------------- triplet phase


class TrainingAborted(NumericFault):
    def __init__(self, message, last_good):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TripletTrace:
    iteration: int
    refs: tuple  # training-set indices of (query, positive, negative)
    images: tuple
    loss: float


@dataclass
class TripletResult:
    model: EmbeddingModel
    steps: list = field(default_factory=list)  # step,lr,mean_loss,active_frac,cutout_frac
    hardness: list = field(default_factory=list)  # refresh,update,pool_mean_loss,sampled_mean_loss
    cutout_fracs: list = field(default_factory=list)
    traces: list = field(default_factory=list)
    optimizer_steps: int = 0


def prepare_triplet_image(pixels, cfg: TripletConfig, frac, rng):
    img = pixels
    if cfg.flip and rng.random() < 0.5:
        img = augment.hflip(img)
    if cfg.crop and rng.random() < 0.5:
        img = augment.random_crop(img, cfg.crop_keep, rng)
    if frac > 0:
        img = augment.cutout(img, frac, rng)
    return img


def triplet_gradients(model, images, margin):
    """Per-triplet loss and fresh gradient arrays (zeros when the hinge is flat)."""
    params = model.params()
    nd.zero_grads(params)
    with nd.Tape() as tape:
        q, p, n = (forward_embed(model, nd.Tensor(x)).embedding for x in images)
        loss = nd.triplet_hinge(q, p, n, margin)
    value = loss.item()
    if value > 0:
        nd.backward(tape, loss)
    return value, [prm.grad for prm in params]


def train_triplet(samples, model: EmbeddingModel, cfg: TripletConfig, trace=False,
                  progress=None) -> TripletResult:
    trainset = samples if isinstance(samples, TrainSet) else TrainSet(samples)
    model = model.copy()
    for prm in model.params():
        prm.requires_grad = True
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 23]))
    # separate stream so augmentation arms see the same triplet sequence
    aug_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 29]))
    images = trainset.resized(cfg.largest_side)
    opt = nd.SGDMomentum(model.params(), cfg.momentum, cfg.weight_decay)
    schedule = cfg.schedule
    acc = [np.zeros_like(p.data) for p in model.params()]
    result = TripletResult(model)

    pool = None
    updates_since = 0
    batch_losses = []
    window_losses = []
    batch_frac = 0.0
    for it in range(cfg.total_iters):
        if pool is None or mining.refresh_due(updates_since, cfg.refresh_k):
            if pool is not None:
                result.hardness[-1]["sampled_mean_loss"] = float(np.mean(window_losses))
            pool = mining.refresh_pool(model, images, trainset.labels, cfg.pool_size, rng, opt.steps)
            result.hardness.append({"refresh": len(result.hardness), "update": opt.steps,
                                    "pool_mean_loss": mining.pool_mean_loss(pool, cfg.margin),
                                    "sampled_mean_loss": float("nan")})
            window_losses = []
            updates_since = 0
        tri = mining.sample_hard_triplet(pool, cfg.margin, cfg.top_t, rng)
        window_losses.append(_pool_loss(pool, tri, cfg.margin))
        refs = tuple(int(pool.sample_refs[i]) for i in tri)
        frac = schedule_value(schedule, it)
        if it % cfg.batch == 0:
            batch_frac = frac
        result.cutout_fracs.append(frac)
        imgs = tuple(prepare_triplet_image(images[r], cfg, frac, aug_rng) for r in refs)
        value, grads = triplet_gradients(model, imgs, cfg.margin)
        if not math.isfinite(value):
            raise TrainingAborted(f"triplet loss is {value} at iteration {it}", model.copy())
        for a, g in zip(acc, grads):
            a += g
        batch_losses.append(value)
        if trace:
            result.traces.append(TripletTrace(it, refs, imgs, value))

        if (it + 1) % cfg.batch == 0:
            step = opt.steps
            lr = lr_log_halving(step * cfg.batch, cfg.lr0, cfg.halving_period)
            try:
                opt.step([a / cfg.batch for a in acc], lr)
            except NumericFault as exc:
                raise TrainingAborted(str(exc), model.copy()) from exc
            for a in acc:
                a.fill(0)
            updates_since += 1
            result.steps.append({"step": step, "lr": lr, "mean_loss": float(np.mean(batch_losses)),
                                 "active_frac": float(np.mean(np.asarray(batch_losses) > 0)),
                                 "cutout_frac": batch_frac})
            if progress is not None:
                progress(result.steps[-1])
            batch_losses = []
    if result.hardness and window_losses:
        result.hardness[-1]["sampled_mean_loss"] = float(np.mean(window_losses))
    result.optimizer_steps = opt.steps
    return result


def _pool_loss(pool, tri, m):
    e = pool.embeddings.astype(np.float64)
    return max(0.0, m + e[tri.query] @ e[tri.negative] - e[tri.query] @ e[tri.positive])


# ---------------------------------------------------------------- ablations


@dataclass(frozen=True)
class Arm:
    name: str
    augment: str = "cutout"
    largest_side: int = 64
    pooling: str = "max"
    pretrain: bool = True


FULL = Arm("full")
ARM_SETS = {
    "augment": [Arm("none", augment="none"), Arm("flip", augment="flip"), Arm("crop", augment="crop"),
               Arm("cutout", augment="cutout"), Arm("all", augment="all")],
    "input_size": [Arm("M48", largest_side=48), Arm("M64", largest_side=64), Arm("M96", largest_side=96)],
    "pooling": [Arm("avg", pooling="avg"), Arm("max", pooling="max")],
    "pretraining": [Arm("no_pretrain", pretrain=False), Arm("pretrain", pretrain=True)],
    "directions": [FULL, Arm("no_aug", augment="none"), Arm("no_pretrain", pretrain=False),
                   Arm("avg_pool", pooling="avg")],
}


@dataclass
class RecipeOutcome:
    model: EmbeddingModel
    pretrain: PretrainResult | None
    triplet: TripletResult


def run_recipe(trainset, arm: Arm, seed, backbone: BackboneConfig, pre_cfg: PretrainConfig,
               tri_cfg: TripletConfig, pretrain_cache=None) -> RecipeOutcome:
    cfg = replace(backbone, pooling=arm.pooling)
    model = init_model(cfg, seed)
    pre = None
    if arm.pretrain:
        key = (cfg, replace(pre_cfg, seed=seed))
        if pretrain_cache is not None and key in pretrain_cache:
            pre = pretrain_cache[key]
        else:
            pre = pretrain_classification(trainset, model, replace(pre_cfg, seed=seed))
            if pretrain_cache is not None:
                pretrain_cache[key] = pre
        model = pre.model
    tcfg = replace(tri_cfg, seed=seed, augment=arm.augment, largest_side=arm.largest_side)
    tri = train_triplet(trainset, model, tcfg)
    return RecipeOutcome(tri.model, pre, tri)


def run_ablation_grid(train_samples, test_samples, arms, seeds, backbone=None, pre_cfg=None,
                      tri_cfg=None, pretrain_cache=None, eval_side=None):
    """Train and evaluate every (arm, seed); returns one row dict per pair."""
    backbone = backbone or BackboneConfig()
    pre_cfg = pre_cfg or PretrainConfig()
    tri_cfg = tri_cfg or TripletConfig()
    trainset = train_samples if isinstance(train_samples, TrainSet) else TrainSet(train_samples)
    cache = {} if pretrain_cache is None else pretrain_cache
    rows = []
    for arm in arms:
        for seed in seeds:
            out = run_recipe(trainset, arm, seed, backbone, pre_cfg, tri_cfg, cache)
            index = extract_index(out.model, test_samples, eval_side or arm.largest_side)
            res = evaluate(index)
            rows.append({"arm": arm.name, "seed": seed, "mAP": res.mAP, "cmc_1": res.rank(1),
                         "cmc_5": res.rank(5)})
            log.info("arm %s seed %d: mAP %.4f", arm.name, seed, res.mAP)
    return rows
