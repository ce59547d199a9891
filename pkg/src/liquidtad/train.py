"""Desk-scale training: label assignment, losses, optimizer and the epoch loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import engine as E
from .detector import Detector, PyramidConfig, decode, nms
from .evaluate import THUMOS_THRESHOLDS, evaluate

log = logging.getLogger(__name__)


class NumericalError(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    seed: int = 0
    center_sampling_radius: float | None = 1.5
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    band_base: int = 4
    clip_grad_norm: float | None = 5.0
    eval_every: int = 10

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EvalConfig:
    thresholds: list = field(default_factory=lambda: list(THUMOS_THRESHOLDS))
    score_threshold: float = 0.1
    iou_threshold: float = 0.5
    max_keep: int = 100


# ---------------------------------------------------------------------------
# label assignment


@dataclass
class LevelTargets:
    cls: np.ndarray     # T_l x num_classes, one-hot on positives
    reg: np.ndarray     # T_l x 2 (left, right) in level-token units
    pos: np.ndarray     # T_l bool
    valid: np.ndarray   # T_l bool, False on padding


def duration_bands(levels, stride=2, base=4):
    """Per-level [lo, hi) durations in level-0 tokens; last level is open-ended."""
    bands = []
    for lvl in range(levels):
        lo = 0.0 if lvl == 0 else base * stride ** (lvl - 1)
        hi = math.inf if lvl == levels - 1 else base * stride ** lvl
        bands.append((float(lo), float(hi)))
    return bands


def assign_targets(segments, cfg: PyramidConfig, tcfg: TrainConfig, num_frames, seconds_per_token):
    dt = seconds_per_token
    Tp = cfg.padded_length(num_frames)
    bands = duration_bands(cfg.levels, cfg.downsample_stride, tcfg.band_base)
    out = []
    for lvl in range(cfg.levels):
        s = cfg.level_stride(lvl)
        n = Tp // s
        centers = np.arange(n) * s * dt
        valid = np.arange(n) * s < num_frames
        cls = np.zeros((n, cfg.num_classes))
        reg = np.zeros((n, 2))
        best_len = np.full(n, np.inf)
        lo, hi = bands[lvl]
        for g in segments:
            length = (g.end - g.start) / dt
            if not lo <= length < hi:
                continue
            inside = (centers >= g.start) & (centers < g.end) & valid
            if tcfg.center_sampling_radius is not None:
                mid = 0.5 * (g.start + g.end)
                inside &= np.abs(centers - mid) <= tcfg.center_sampling_radius * s * dt
            take = inside & (length < best_len)
            if not take.any():
                continue
            best_len[take] = length
            cls[take] = 0.0
            cls[take, g.class_id] = 1.0
            reg[take, 0] = (centers[take] - g.start) / (s * dt)
            reg[take, 1] = (g.end - centers[take]) / (s * dt)
        out.append(LevelTargets(cls, reg, np.isfinite(best_len), valid))
    return out


# ---------------------------------------------------------------------------
# fused loss ops


def _log_sigmoid(z):
    return -(np.maximum(-z, 0) + np.log1p(np.exp(-np.abs(z))))


def _focal_terms(z, y, gamma, alpha):
    p = 0.5 * np.tanh(0.5 * z) + 0.5
    log_p = _log_sigmoid(z)
    log_q = _log_sigmoid(-z)
    q = 1.0 - p
    loss = np.where(y > 0, -alpha * q ** gamma * log_p, -(1 - alpha) * p ** gamma * log_q)
    grad = np.where(y > 0,
                    alpha * q ** gamma * (gamma * p * log_p - q),
                    (1 - alpha) * p ** gamma * (p - gamma * q * log_q))
    return loss, grad


def focal_loss_sum(logits, targets, mask, gamma=2.0, alpha=0.25):
    """Sum of sigmoid focal loss over rows where ``mask`` is True."""
    z = logits.data.astype(np.float64)
    loss, grad = _focal_terms(z, targets, gamma, alpha)
    m = mask[:, None].astype(np.float64)
    total = np.asarray(np.sum(loss * m), dtype=logits.dtype)
    return E.custom_op("focal_loss_sum", total, (logits,), (grad * m).astype(logits.dtype),
                       backward=lambda g_ctx, g: (g * g_ctx,))


def _iou_terms(pred, tgt):
    l, r = pred[:, 0], pred[:, 1]
    a, b = tgt[:, 0], tgt[:, 1]
    inter = np.minimum(l, a) + np.minimum(r, b)
    union = np.maximum(l, a) + np.maximum(r, b)
    iou = inter / union
    # d iou / d l and d iou / d r
    d_inter_l = (l < a).astype(pred.dtype)
    d_union_l = 1.0 - d_inter_l
    d_inter_r = (r < b).astype(pred.dtype)
    d_union_r = 1.0 - d_inter_r
    dl = (d_inter_l * union - inter * d_union_l) / union ** 2
    dr = (d_inter_r * union - inter * d_union_r) / union ** 2
    return iou, np.stack([dl, dr], axis=1)


def iou_loss_sum(reg, targets, pos):
    """Sum of ``1 - IoU`` between predicted and target (left, right) distances."""
    pred = reg.data.astype(np.float64)
    idx = np.nonzero(pos)[0]
    grad = np.zeros_like(pred)
    total = 0.0
    if idx.size:
        iou, d = _iou_terms(pred[idx], targets[idx])
        total = float(np.sum(1.0 - iou))
        grad[idx] = -d
    return E.custom_op("iou_loss_sum", np.asarray(total, dtype=reg.dtype), (reg,),
                       grad.astype(reg.dtype), backward=lambda g_ctx, g: (g * g_ctx,))


def stack_targets(targets):
    cls = np.concatenate([t.cls for t in targets])
    reg = np.concatenate([t.reg for t in targets])
    pos = np.concatenate([t.pos for t in targets])
    valid = np.concatenate([t.valid for t in targets])
    return cls, reg, pos, valid


def loss_terms(outputs, targets, tcfg: TrainConfig):
    """Unnormalized (focal sum, IoU sum, positive count) for one video."""
    cls_t, reg_t, pos, valid = stack_targets(targets)
    if len(outputs) > 1:
        logits = E.concat_rows([o.cls_logits for o in outputs])
        reg = E.concat_rows([o.reg_offsets for o in outputs])
    else:
        logits, reg = outputs[0].cls_logits, outputs[0].reg_offsets
    if logits.shape[0] != cls_t.shape[0]:
        raise E.ShapeError("outputs and targets are misaligned")
    fl = focal_loss_sum(logits, cls_t, valid, tcfg.focal_gamma, tcfg.focal_alpha)
    il = iou_loss_sum(reg, reg_t, pos)
    return fl, il, int(pos.sum())


def loss(outputs, targets, tcfg: TrainConfig):
    """Focal + IoU loss normalized by the positive count (floored at 1)."""
    fl, il, npos = loss_terms(outputs, targets, tcfg)
    return (fl + il) * (1.0 / max(npos, 1))


# ---------------------------------------------------------------------------
# optimizer


class SGD:
    """Momentum SGD with decoupled weight decay on matrix-shaped parameters."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            if self.weight_decay and p.data.ndim >= 2:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * v

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def clip_gradients(params, max_norm):
    norm = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# loops


@dataclass
class TrainResult:
    model: Detector
    loss_curve: list
    epoch_times: list
    initial_loss: float
    final_loss: float
    eval_history: list = field(default_factory=list)
    best_map: float | None = None
    best_epoch: int | None = None


def _targets_for(videos, cfg, tcfg, dt):
    return [assign_targets(v.segments, cfg, tcfg, v.features.shape[0], dt) for v in videos]


def dataset_loss(model, videos, targets, tcfg):
    total, npos = 0.0, 0
    for v, tg in zip(videos, targets):
        fl, il, n = loss_terms(model.forward(v.features, training=False), tg, tcfg)
        total += fl.item() + il.item()
        npos += n
    return total / max(npos, 1)


def predict(model, videos, seconds_per_token, ecfg: EvalConfig, backend=None):
    preds = {}
    for v in videos:
        outs = model.forward(v.features, training=False, backend=backend)
        segs = decode(outs, seconds_per_token, ecfg.score_threshold, num_frames=v.features.shape[0])
        preds[v.video_id] = nms(segs, ecfg.iou_threshold, ecfg.max_keep)
    return preds


def evaluate_model(model, videos, seconds_per_token, ecfg: EvalConfig, backend=None):
    preds = predict(model, videos, seconds_per_token, ecfg, backend)
    gt = {v.video_id: list(v.segments) for v in videos}
    return evaluate(preds, gt, ecfg.thresholds), preds


def train(dataset, model_cfg: PyramidConfig, tcfg: TrainConfig, ecfg: EvalConfig | None = None,
          out_dir=None, model=None, on_epoch=None):
    """Train on the dataset's train split; evaluate on its test split.

    When ``out_dir`` is given the checkpoint with the best test mAP is kept
    there (or the final weights if evaluation never runs).
    """
    ecfg = ecfg or EvalConfig()
    dt = dataset.seconds_per_token
    train_videos = dataset.split("train")
    test_videos = dataset.split("test")
    model = model or Detector(model_cfg, seed=tcfg.seed)
    params = model.parameters()
    opt = SGD(params, tcfg.learning_rate, tcfg.momentum, tcfg.weight_decay)
    rng = np.random.default_rng(tcfg.seed)
    targets = _targets_for(train_videos, model_cfg, tcfg, dt)
    initial = dataset_loss(model, train_videos, targets, tcfg)
    result = TrainResult(model, [], [], initial, initial)
    if out_dir is not None and (tcfg.epochs == 0 or not test_videos or not tcfg.eval_every):
        checkpoint.save(model, out_dir)
    step = 0
    for epoch in range(tcfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_videos))
        losses = []
        for b0 in range(0, len(order), tcfg.batch_size):
            batch = order[b0:b0 + tcfg.batch_size]
            opt.zero_grad()
            with E.Graph() as graph:
                total, npos = None, 0
                for k, i in enumerate(batch):
                    outs = model.forward(train_videos[i].features, training=True,
                                         seed=[tcfg.seed, epoch, step, k])
                    fl, il, n = loss_terms(outs, targets[i], tcfg)
                    term = fl + il
                    total = term if total is None else total + term
                    npos += n
                batch_loss = total * (1.0 / max(npos, 1))
            value = batch_loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b0 // tcfg.batch_size}")
            graph.backward(batch_loss)
            clip_gradients(params, tcfg.clip_grad_norm)
            opt.step()
            losses.append(value)
            step += 1
        result.epoch_times.append(time.perf_counter() - t0)
        result.loss_curve.append(float(np.mean(losses)))
        log.info("epoch %d loss %.5f (%.2fs)", epoch, result.loss_curve[-1], result.epoch_times[-1])
        last = epoch == tcfg.epochs - 1
        if test_videos and tcfg.eval_every and ((epoch + 1) % tcfg.eval_every == 0 or last):
            res, _ = evaluate_model(model, test_videos, dt, ecfg)
            result.eval_history.append({"epoch": epoch + 1, "avg_map": res.avg_map})
            if result.best_map is None or res.avg_map > result.best_map:
                result.best_map, result.best_epoch = res.avg_map, epoch + 1
                if out_dir is not None:
                    checkpoint.save(model, out_dir, extra={"epoch": epoch + 1, "avg_map": res.avg_map})
        elif out_dir is not None and last and not (test_videos and tcfg.eval_every):
            checkpoint.save(model, out_dir)
        if on_epoch:
            on_epoch(epoch, result)
    result.final_loss = dataset_loss(model, train_videos, targets, tcfg)
    return result
