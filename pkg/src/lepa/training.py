"""I-JEPA, LEPA, NoMask and predictor-finetuning objectives and the train loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from lepa.checkpoint import save_checkpoint
from lepa.data import compute_stats, normalize
from lepa.geometry import TransformParams, TransformRanges, sample_transform, warp_image
from lepa.model import LEPAModel, ModelConfig, NumericalError, ema_update

__all__ = [
    "OBJECTIVES",
    "MaskSpec",
    "TrainConfig",
    "LossRecord",
    "sample_masks",
    "lr_at",
    "momentum_at",
    "ijepa_loss",
    "lepa_loss",
    "ijepa_step",
    "lepa_step",
    "nomask_step",
    "finetune_predictor_step",
    "make_optimizer",
    "train",
]

logger = logging.getLogger(__name__)

OBJECTIVES = ("ijepa", "lepa", "nomask", "finetune")
LOSS_WINDOW = 50


@dataclass
class MaskSpec:
    context_indices: np.ndarray
    target_indices: np.ndarray
    grid_h: int
    grid_w: int
    target_blocks: list = field(default_factory=list)

    def __post_init__(self):
        n = self.grid_h * self.grid_w
        for name in ("context_indices", "target_indices"):
            idx = np.asarray(getattr(self, name), dtype=np.int64)
            if idx.size == 0:
                raise ValueError(f"{name} is empty")
            if idx.min() < 0 or idx.max() >= n:
                raise ValueError(f"{name} out of range for a {self.grid_h}x{self.grid_w} grid")
            setattr(self, name, idx)

    @classmethod
    def full(cls, grid_h: int, grid_w: int) -> "MaskSpec":
        idx = np.arange(grid_h * grid_w)
        return cls(idx, idx.copy(), grid_h, grid_w)


@dataclass
class TrainConfig:
    objective: str = "lepa"
    epochs: int = 10
    batch_size: int = 32
    steps_per_epoch: int = 500
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_frac: float = 0.1
    ema_start: float = 0.996
    ema_end: float = 1.0
    n_targets: int = 4
    target_scale_min: float = 0.15
    target_scale_max: float = 0.2
    aspect_min: float = 0.75
    aspect_max: float = 1.5
    context_scale_min: float = 0.85
    context_scale_max: float = 1.0
    tx_min: float = -0.25
    tx_max: float = 0.25
    ty_min: float = -0.25
    ty_max: float = 0.25
    angle_min: float = -math.pi / 2
    angle_max: float = math.pi / 2
    scale_min: float = 0.7
    scale_max: float = 1.4
    seed: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.steps_per_epoch < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and steps_per_epoch >= 1 required")
        if not (0 <= self.ema_start <= self.ema_end <= 1):
            raise ValueError("EMA momentum schedule must satisfy 0 <= start <= end <= 1")
        if not 0 <= self.warmup_frac <= 1:
            raise ValueError("warmup_frac must be in [0, 1]")
        if self.n_targets < 1:
            raise ValueError("n_targets must be >= 1")
        for lo, hi, name in (
            (self.target_scale_min, self.target_scale_max, "target_scale"),
            (self.aspect_min, self.aspect_max, "aspect"),
            (self.context_scale_min, self.context_scale_max, "context_scale"),
        ):
            if not 0 < lo <= hi:
                raise ValueError(f"invalid {name} range [{lo}, {hi}]")
        self.transform_ranges()

    def transform_ranges(self) -> TransformRanges:
        return TransformRanges(
            (self.tx_min, self.tx_max),
            (self.ty_min, self.ty_max),
            (self.angle_min, self.angle_max),
            (self.scale_min, self.scale_max),
        )

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class LossRecord:
    step: int
    loss: float
    lr: float
    momentum: float
    objective: str
    wall_time: float = 0.0
    diverged: bool = False
    loss_var: float = 0.0  # over the trailing LOSS_WINDOW steps
    mrr: float | None = None

    def to_json(self) -> str:
        d = asdict(self)
        if d["mrr"] is None:
            del d["mrr"]
        return json.dumps(d, sort_keys=True)


# -- masks --------------------------------------------------------------------


def _block(rng, grid_h, grid_w, scale, aspect):
    area = scale * grid_h * grid_w
    h = int(round(math.sqrt(area * aspect)))
    w = int(round(math.sqrt(area / aspect)))
    h = min(max(h, 1), grid_h)
    w = min(max(w, 1), grid_w)
    top = int(rng.integers(0, grid_h - h + 1))
    left = int(rng.integers(0, grid_w - w + 1))
    rows, cols = np.meshgrid(np.arange(top, top + h), np.arange(left, left + w), indexing="ij")
    return (rows * grid_w + cols).ravel()


def sample_masks(rng: np.random.Generator, grid_h: int, grid_w: int, cfg: TrainConfig, max_tries: int = 20) -> MaskSpec:
    """Rectangular target blocks plus a context block with the targets removed."""
    for _ in range(max_tries):
        blocks = [
            _block(
                rng,
                grid_h,
                grid_w,
                rng.uniform(cfg.target_scale_min, cfg.target_scale_max),
                rng.uniform(cfg.aspect_min, cfg.aspect_max),
            )
            for _ in range(cfg.n_targets)
        ]
        targets = np.unique(np.concatenate(blocks))
        ctx_block = _block(rng, grid_h, grid_w, rng.uniform(cfg.context_scale_min, cfg.context_scale_max), 1.0)
        context = np.setdiff1d(ctx_block, targets)
        if context.size:
            return MaskSpec(context, targets, grid_h, grid_w, blocks)
    raise RuntimeError(f"could not sample a non-empty context in {max_tries} tries")


# -- schedules ----------------------------------------------------------------


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup followed by cosine decay to zero."""
    total = max(cfg.total_steps, 1)
    warm = int(round(cfg.warmup_frac * total))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    progress = (step - warm) / max(total - warm, 1)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def momentum_at(step: int, cfg: TrainConfig) -> float:
    total = max(cfg.total_steps, 1)
    return cfg.ema_start + (cfg.ema_end - cfg.ema_start) * min(step / total, 1.0)


# -- losses -------------------------------------------------------------------


def _as_tensor(imgs, model):
    dtype = model.pred_pos.dtype
    if isinstance(imgs, torch.Tensor):
        return imgs.to(dtype)
    return torch.as_tensor(np.asarray(imgs), dtype=dtype)


def ijepa_loss(model: LEPAModel, imgs, masks: MaskSpec, predict_fn=None):
    """Latent inpainting: predict teacher embeddings of the target blocks.

    ``predict_fn(model, imgs, masks, targets)`` replaces the predictor; it is
    used to inject oracles in tests. Returns ``(loss, prediction, target)``.
    """
    if np.intersect1d(masks.context_indices, masks.target_indices).size:
        raise ValueError("latent inpainting needs disjoint context and target sets")
    x = _as_tensor(imgs, model)
    target = model.teacher_grid(x)[:, masks.target_indices]
    if predict_fn is not None:
        pred = predict_fn(model, x, masks, target)
    else:
        ident = [TransformParams()] * x.shape[0]
        pred = model.predict(x, ident, masks.context_indices, masks.target_indices)
    return F.mse_loss(pred, target), pred, target


def lepa_loss(model: LEPAModel, imgs, warped, params_list, context_indices=None, predict_fn=None):
    """Predict the full teacher grid of ``warped`` from the student's view of ``imgs``."""
    x = _as_tensor(imgs, model)
    xw = _as_tensor(warped, model)
    target = model.teacher_grid(xw)
    if predict_fn is not None:
        pred = predict_fn(model, x, params_list, target)
    else:
        pred = model.predict(x, params_list, context_indices)
    return F.mse_loss(pred, target), pred, target


# -- steps --------------------------------------------------------------------


def make_optimizer(model: LEPAModel, cfg: TrainConfig):
    if cfg.objective == "finetune":
        params = list(model.predictor.parameters())
    else:
        params = model.trainable_parameters()
    return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


def _apply(model, optimizer, loss, lr, momentum, update_teacher=True):
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss.item()}")
    for g in optimizer.param_groups:
        g["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    for p in model.teacher.parameters():
        if p.grad is not None and torch.any(p.grad != 0):
            raise RuntimeError("teacher received a gradient")
    optimizer.step()
    if update_teacher:
        ema_update(model.teacher, model.student, momentum)


def _warp_batch(raw, params_list, stats):
    warped = np.stack([warp_image(im, p) for im, p in zip(raw, params_list)])
    return normalize(warped, stats)


def _sample_params(rng, n, ranges):
    return [sample_transform(rng, ranges) for _ in range(n)]


def ijepa_step(model, raw, masks, optimizer, stats, lr, momentum, step=0) -> LossRecord:
    """One latent-inpainting update; ``raw`` is a (B, C, H, W) batch in [0, 1]."""
    loss, _, _ = ijepa_loss(model, normalize(raw, stats), masks)
    _apply(model, optimizer, loss, lr, momentum)
    return LossRecord(step, float(loss.item()), lr, momentum, "ijepa")


def lepa_step(model, raw, masks, optimizer, rng, stats, lr, momentum, ranges=None, step=0, params_list=None) -> LossRecord:
    """Joint inpainting and transformation update, one transform per image."""
    if params_list is None:
        params_list = _sample_params(rng, len(raw), ranges)
    loss, _, _ = lepa_loss(
        model,
        normalize(raw, stats),
        _warp_batch(raw, params_list, stats),
        params_list,
        masks.context_indices if masks is not None else None,
    )
    _apply(model, optimizer, loss, lr, momentum)
    return LossRecord(step, float(loss.item()), lr, momentum, "lepa")


def nomask_step(model, raw, optimizer, rng, stats, lr, momentum, ranges=None, step=0, params_list=None) -> LossRecord:
    """Transformation prediction from the full, unmasked context."""
    rec = lepa_step(model, raw, None, optimizer, rng, stats, lr, momentum, ranges, step, params_list)
    rec.objective = "nomask"
    return rec


def finetune_predictor_step(model, raw, optimizer, rng, stats, lr, ranges=None, step=0, params_list=None) -> LossRecord:
    """Predictor-only update with frozen encoders and no EMA."""
    if params_list is None:
        params_list = _sample_params(rng, len(raw), ranges)
    for p in model.student.parameters():
        p.grad = None
        p.requires_grad_(False)
    try:
        loss, _, _ = lepa_loss(model, normalize(raw, stats), _warp_batch(raw, params_list, stats), params_list)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite loss {loss.item()}")
        for g in optimizer.param_groups:
            g["lr"] = lr
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        for p in list(model.student.parameters()) + list(model.teacher.parameters()):
            if p.grad is not None and torch.any(p.grad != 0):
                raise RuntimeError("encoder received a gradient during predictor finetuning")
        optimizer.step()
    finally:
        for p in model.student.parameters():
            p.requires_grad_(True)
    return LossRecord(step, float(loss.item()), lr, 1.0, "finetune")


# -- loop ---------------------------------------------------------------------


def _stack(images):
    return np.stack([np.asarray(getattr(im, "pixels", im), dtype=np.float32) for im in images])


def train(
    cfg: TrainConfig,
    dataset,
    out_dir,
    model_cfg: ModelConfig | None = None,
    model: LEPAModel | None = None,
    stats=None,
    log_every: int = 0,
) -> tuple[LEPAModel, list[LossRecord]]:
    """Run ``cfg.objective`` for ``cfg.epochs`` epochs.

    Writes ``ckpt_epoch{NNN}.lepa`` after every epoch (``000`` is the
    initial state) and appends one JSON record per step to
    ``loss_log.jsonl``. Pass ``model`` to continue from existing weights,
    which finetuning requires.
    """
    raw_all = _stack(dataset)
    if len(raw_all) == 0:
        raise ValueError("dataset is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if model is None:
        if cfg.objective == "finetune":
            raise ValueError("finetuning needs a pretrained model")
        model = LEPAModel(model_cfg or ModelConfig(), seed=cfg.seed)
    mcfg = model.cfg
    if raw_all.shape[1:] != (mcfg.channels, mcfg.img_size, mcfg.img_size):
        raise ValueError(f"dataset images {raw_all.shape[1:]} do not match the model config")
    if stats is None:
        stats = compute_stats(raw_all)
    stats = (np.asarray(stats[0], dtype=np.float64), np.asarray(stats[1], dtype=np.float64))
    extra = {"norm_mean": stats[0].tolist(), "norm_std": stats[1].tolist()}
    torch.manual_seed(cfg.seed)

    optimizer = make_optimizer(model, cfg)
    ranges = cfg.transform_ranges()
    g = mcfg.grid_size
    log_path = out / "loss_log.jsonl"
    records: list[LossRecord] = []
    save_checkpoint(out / "ckpt_epoch000.lepa", model, dict(extra, epoch=0))
    initial_loss = None
    window: list[float] = []
    t0 = time.perf_counter()
    with open(log_path, "w") as log:
        for epoch in range(cfg.epochs):
            for i in range(cfg.steps_per_epoch):
                step = epoch * cfg.steps_per_epoch + i
                rng = np.random.default_rng([cfg.seed, step])
                batch = raw_all[rng.choice(len(raw_all), size=cfg.batch_size, replace=len(raw_all) < cfg.batch_size)]
                lr, mom = lr_at(step, cfg), momentum_at(step, cfg)
                try:
                    if cfg.objective == "ijepa":
                        rec = ijepa_step(model, batch, sample_masks(rng, g, g, cfg), optimizer, stats, lr, mom, step)
                    elif cfg.objective == "lepa":
                        masks = sample_masks(rng, g, g, cfg)
                        rec = lepa_step(model, batch, masks, optimizer, rng, stats, lr, mom, ranges, step)
                    elif cfg.objective == "nomask":
                        rec = nomask_step(model, batch, optimizer, rng, stats, lr, mom, ranges, step)
                    else:
                        rec = finetune_predictor_step(model, batch, optimizer, rng, stats, lr, ranges, step)
                except NumericalError as e:
                    raise NumericalError(
                        f"{e} at step {step}; last good checkpoint: ckpt_epoch{epoch:03d}.lepa in {out}"
                    ) from e
                if initial_loss is None:
                    initial_loss = rec.loss
                rec.diverged = rec.loss > 1e3 * initial_loss
                window.append(rec.loss)
                rec.loss_var = float(np.var(window[-LOSS_WINDOW:]))
                rec.wall_time = round(time.perf_counter() - t0, 3)
                records.append(rec)
                log.write(rec.to_json() + "\n")
                if log_every and step % log_every == 0:
                    logger.info("step %d loss %.5f lr %.2e m %.5f", step, rec.loss, lr, mom)
            log.flush()
            save_checkpoint(out / f"ckpt_epoch{epoch + 1:03d}.lepa", model, dict(extra, epoch=epoch + 1))
    return model, records


def read_loss_log(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def write_config(path, cfg):
    """Flat ``key = value`` text, one field per line."""
    with open(path, "w") as f:
        for k, v in asdict(cfg).items():
            f.write(f"{k} = {v}\n")
