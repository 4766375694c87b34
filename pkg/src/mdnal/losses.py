"""Training objectives for the mixture-density heads, and the SGD trainer."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .detector import (GmmParams, NetworkConfig, anchors_for, forward, init_params, match_anchors,
                       postprocess_gmm)

log = logging.getLogger(__name__)

EPS = float(np.exp(-9.0))
LOG_DENSITY_FLOOR = -700.0
HARD_NEG_RATIO = 3


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class BatchTargets:
    """Stacked match tables for a batch: (B, A) positives/labels, (B, A, 4) offsets."""

    positive: np.ndarray
    labels: np.ndarray
    offsets: np.ndarray

    @classmethod
    def from_matches(cls, matches, offset_scale=(1.0, 1.0, 1.0, 1.0)) -> "BatchTargets":
        return cls(np.stack([m.positive for m in matches]),
                   np.stack([m.labels for m in matches]),
                   np.stack([m.offsets for m in matches]) / np.asarray(offset_scale))

    @property
    def N(self) -> int:
        return int(self.positive.sum())


@dataclass
class LossBreakdown:
    total: ad.Tensor
    L_loc: float
    L_cl_pos: float
    L_cl_neg: float
    N: int

    def row(self) -> tuple:
        return (self.total.item(), self.L_loc, self.L_cl_pos, self.L_cl_neg)


def localization_loss(loc: GmmParams, targets: BatchTargets, eps: float = EPS) -> ad.Tensor:
    """Negative log of the epsilon-floored mixture density of encoded GT offsets.

    ``loc`` fields are (B, A, 4, K) tensors; only positive anchors contribute.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    idx = np.nonzero(targets.positive)
    if not len(idx[0]):
        return ad.Tensor(0.0)
    pi, mu, var = loc.pi[idx], loc.mu[idx], loc.var[idx]  # (P, 4, K)
    g = targets.offsets[idx][:, :, None]
    log_norm = ad.mul(ad.log(ad.mul(var, 2.0 * np.pi)), -0.5)
    log_dens = log_norm - ad.square(ad.sub(g, mu)) / (var * 2.0)
    dens = ad.exp(ad.clamp_min(log_dens, LOG_DENSITY_FLOOR))
    mix = ad.tsum(pi * dens, axis=-1) + eps
    return -ad.tsum(ad.log(mix))


def sample_class_logits(cls: GmmParams, rng: np.random.Generator | None = None, noise=None) -> ad.Tensor:
    """Perturb class means by their predicted standard deviation times a standard normal draw."""
    if cls.var is None:
        raise ValueError("noise-perturbed logits need per-class variances (full_gmm head)")
    if noise is None:
        if rng is None:
            raise ValueError("pass an rng or a frozen noise array")
        noise = rng.standard_normal(cls.mu.shape)
    return cls.mu + ad.sqrt(cls.var) * noise


def hard_negative_select(neg_losses, M: int, N: int) -> np.ndarray:
    """Indices of the min(M*N, len) largest losses; ties go to the lower index."""
    neg_losses = np.asarray(neg_losses, dtype=np.float64)
    k = min(M * N, len(neg_losses))
    if N <= 0 or k <= 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(len(neg_losses)), -neg_losses))
    return np.sort(order[:k])


def _mixture_log_softmax_terms(pi, logits, targets: BatchTargets):
    """Per-anchor -sum_k pi^k log softmax(logits^k)[class] for the GT class and for background."""
    logp = ad.log_softmax(logits)  # (B, A, K, C')
    Cp = logits.shape[-1]
    onehot = np.eye(Cp)[targets.labels][:, :, None, :]
    at_label = ad.tsum(logp * onehot, axis=-1)  # (B, A, K)
    at_bg = logp[:, :, :, 0]
    pos_term = -ad.tsum(pi * at_label, axis=-1)  # (B, A)
    neg_term = -ad.tsum(pi * at_bg, axis=-1)
    return pos_term, neg_term


def _pos_neg(pi, logits, targets: BatchTargets, M: int):
    pos_term, neg_term = _mixture_log_softmax_terms(pi, logits, targets)
    pos_mask = targets.positive.astype(np.float64)
    L_pos = ad.tsum(pos_term * pos_mask)
    neg_mask = np.zeros_like(pos_mask)
    for b in range(pos_mask.shape[0]):
        negatives = np.flatnonzero(~targets.positive[b])
        n_b = int(targets.positive[b].sum())
        chosen = hard_negative_select(neg_term.data[b, negatives], M, n_b)
        neg_mask[b, negatives[chosen]] = 1.0
    L_neg = ad.tsum(neg_term * neg_mask)
    return L_pos, L_neg


def classification_loss_full(cls: GmmParams, targets: BatchTargets, M: int = HARD_NEG_RATIO,
                             rng: np.random.Generator | None = None, noise=None):
    """(L_pos, L_neg) on noise-perturbed logits; one draw shared by both terms."""
    logits = sample_class_logits(cls, rng=rng, noise=noise)
    return _pos_neg(cls.pi, logits, targets, M)


def classification_loss_eff(cls: GmmParams, targets: BatchTargets, M: int = HARD_NEG_RATIO):
    """(L_pos, L_neg) on the raw class means, no sampling."""
    return _pos_neg(cls.pi, cls.mu, targets, M)


def total_loss(L_loc, L_pos, L_neg, N: int) -> ad.Tensor:
    if N <= 0:
        return ad.Tensor(0.0)
    return (ad.as_tensor(L_loc) + L_pos + L_neg) * (1.0 / N)


def _smooth_l1(x) -> ad.Tensor:
    def fwd(a):
        ab = np.abs(a)
        return np.where(ab < 1.0, 0.5 * a * a, ab - 0.5)

    def vjp(g, out, a):
        return (g * np.clip(a, -1.0, 1.0),)

    return ad.apply("smooth_l1", fwd, vjp, x)


def smooth_l1_loss(loc: GmmParams, targets: BatchTargets) -> ad.Tensor:
    """Baseline regression loss on the single-component means."""
    idx = np.nonzero(targets.positive)
    if not len(idx[0]):
        return ad.Tensor(0.0)
    pred = loc.mu[idx][:, :, 0]
    return ad.tsum(_smooth_l1(ad.sub(pred, targets.offsets[idx])))


def detection_loss(gmm, targets: BatchTargets, M: int = HARD_NEG_RATIO,
                   rng: np.random.Generator | None = None, noise=None, eps: float = EPS) -> LossBreakdown:
    """Combined loss for whichever head produced ``gmm``."""
    if gmm.head == "deterministic":
        L_loc = smooth_l1_loss(gmm.loc, targets)
        L_pos, L_neg = classification_loss_eff(gmm.cls, targets, M)
    else:
        L_loc = localization_loss(gmm.loc, targets, eps)
        if gmm.head == "full_gmm":
            L_pos, L_neg = classification_loss_full(gmm.cls, targets, M, rng=rng, noise=noise)
        else:
            L_pos, L_neg = classification_loss_eff(gmm.cls, targets, M)
    N = targets.N
    return LossBreakdown(total_loss(L_loc, L_pos, L_neg, N), ad.as_tensor(L_loc).item(),
                         L_pos.item(), L_neg.item(), N)


# ---------------------------------------------------------------- training

@dataclass
class OptimizerConfig:
    steps: int = 600
    lr: float = 0.02
    momentum: float = 0.9
    batch_size: int = 32
    warmup_frac: float = 0.05
    clip_norm: float = 0.0  # 0 disables
    epochs: float = 0.0  # >0: steps grow to cover this many passes over the labeled set
    max_steps: int = 0  # cap on the grown step count; 0 means no cap

    def steps_for(self, n: int) -> int:
        steps = self.steps
        if self.epochs > 0:
            steps = max(steps, int(np.ceil(self.epochs * n / self.batch_size)))
        if self.max_steps > 0:
            steps = min(steps, max(self.max_steps, self.steps))
        return steps


def learning_rate(step: int, cfg: OptimizerConfig, total: int | None = None) -> float:
    total = cfg.steps if total is None else total
    warm = max(1, int(round(cfg.warmup_frac * total)))
    lr = cfg.lr * min(1.0, (step + 1) / warm)
    if step >= total * 5 / 6:
        lr *= 0.01
    elif step >= total * 2 / 3:
        lr *= 0.1
    return lr


@dataclass
class TrainResult:
    params: dict
    curve: list = field(default_factory=list)  # (step, total, L_loc, L_cl_pos, L_cl_neg)


def scene_targets(scenes, config: NetworkConfig):
    anchors = anchors_for(config)
    return [match_anchors(anchors, s.classes, s.boxes) for s in scenes]


def train(params: dict | None, scenes, config: NetworkConfig, opt: OptimizerConfig, seed: int) -> TrainResult:
    """SGD with momentum, linear warm-up and two x0.1 decays.

    ``params=None`` initialises from ``seed``.  Mini-batches are drawn by
    shuffling the labeled set every epoch; the full set is used when it
    fits in one batch.
    """
    if not len(scenes):
        raise ValueError("train needs at least one labeled scene")
    rng = np.random.default_rng([seed, 0x7A1])
    params = {k: np.array(v, dtype=np.float64) for k, v in
              (init_params(config, seed) if params is None else params).items()}
    names = sorted(params)
    velocity = {k: np.zeros_like(params[k]) for k in names}
    images = np.stack([s.image for s in scenes])
    matches = scene_targets(scenes, config)
    n = len(scenes)
    order, cursor = rng.permutation(n), 0
    curve = []
    total = opt.steps_for(n)
    for step in range(total):
        if n <= opt.batch_size:
            batch = np.arange(n)
        else:
            if cursor + opt.batch_size > n:
                order, cursor = rng.permutation(n), 0
            batch = np.sort(order[cursor:cursor + opt.batch_size])
            cursor += opt.batch_size
        leaves = {k: ad.param(params[k]) for k in names}
        raw = forward(images[batch], leaves, config)
        gmm = postprocess_gmm(raw)
        targets = BatchTargets.from_matches([matches[i] for i in batch], config.offset_scale)
        try:
            br = detection_loss(gmm, targets, rng=rng)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"step {step}: {exc}") from exc
        curve.append((step,) + br.row())
        if not np.isfinite(br.total.item()):
            raise TrainingDiverged(f"step {step}: loss {br.total.item()}")
        if br.N == 0:
            continue
        grads = ad.backward(br.total, [leaves[k] for k in names])
        if opt.clip_norm > 0:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > opt.clip_norm:
                grads = [g * (opt.clip_norm / norm) for g in grads]
        lr = learning_rate(step, opt, total)
        for k, g in zip(names, grads):
            velocity[k] = opt.momentum * velocity[k] - lr * g
            params[k] = params[k] + velocity[k]
    return TrainResult(params, curve)


CURVE_HEADER = ("step", "total", "L_loc", "L_cl_pos", "L_cl_neg")


def write_loss_curve(path, curve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for row in curve:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
