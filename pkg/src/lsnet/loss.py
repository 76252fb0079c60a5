"""Multi-task loss: focal cell classification plus wing endpoint regression.

All functions accept torch tensors (and keep the autograd graph) or plain
floats / numpy arrays (evaluated in float64, returned as floats or arrays).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from lsnet.errors import ConfigError, ContractError

PROB_CLAMP = 1e-7
L1_TIE_RTOL = 1e-12

CLS_VARIANTS = ("focal", "cross_entropy")
REG_VARIANTS = ("wing", "l1", "l2", "smooth_l1")


@dataclass
class LossConfig:
    lam: float = 1.0
    gamma: float = 2.0
    alpha: float = 0.25
    wing_w: float = 10.0
    wing_eps: float = 2.0
    cls_variant: str = "focal"
    reg_variant: str = "wing"

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.wing_w <= 0 or self.wing_eps <= 0:
            raise ConfigError(f"wing w and eps must be > 0, got {self.wing_w}, {self.wing_eps}")
        if self.cls_variant not in CLS_VARIANTS:
            raise ConfigError(f"cls_variant must be one of {CLS_VARIANTS}, got {self.cls_variant!r}")
        if self.reg_variant not in REG_VARIANTS:
            raise ConfigError(f"reg_variant must be one of {REG_VARIANTS}, got {self.reg_variant!r}")

    @property
    def wing_c(self) -> float:
        return wing_constant(self.wing_w, self.wing_eps)


@dataclass
class LossReport:
    total: torch.Tensor
    cls_term: torch.Tensor
    reg_term: torch.Tensor
    positive_cell_count: int

    def as_floats(self) -> dict:
        return {
            "total": float(self.total),
            "cls": float(self.cls_term),
            "reg": float(self.reg_term),
            "positives": self.positive_cell_count,
        }


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), True


def _out(t, plain):
    if not plain:
        return t
    return float(t) if t.ndim == 0 else t.numpy()


def wing_constant(w: float, eps: float) -> float:
    return w - w * math.log1p(w / eps)


def focal_loss(p, y, gamma: float = 2.0, alpha: float = 0.25):
    """Per-cell focal loss ``-alpha_t (1 - p_t)^gamma ln(p_t)``.

    ``p`` is the probability of the "line segment present" class and ``y`` the
    label in {+1, -1}. ``p`` is clamped to ``[1e-7, 1 - 1e-7]``.
    """
    p, plain = _as_tensor(p)
    y = torch.as_tensor(y, dtype=p.dtype)
    p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = y > 0
    p_t = torch.where(pos, p, 1.0 - p)
    alpha_t = torch.where(pos, torch.full_like(p, alpha), torch.full_like(p, 1.0 - alpha))
    return _out(-alpha_t * (1.0 - p_t) ** gamma * torch.log(p_t), plain)


def focal_loss_from_logits(logits, y, gamma: float = 2.0, alpha: float = 0.25):
    """Focal loss on two-channel logits (channel 1 = line present).

    Same values as ``focal_loss(softmax(logits)[..., 1], y)`` but computed
    from ``log_softmax`` for stability.
    """
    logp = torch.log_softmax(logits, dim=-1)
    pos = y > 0
    logp_t = torch.where(pos, logp[..., 1], logp[..., 0])
    logp_t = logp_t.clamp(math.log(PROB_CLAMP), math.log1p(-PROB_CLAMP))
    p_t = logp_t.exp()
    alpha_t = torch.where(pos, torch.full_like(p_t, alpha), torch.full_like(p_t, 1.0 - alpha))
    return -alpha_t * (1.0 - p_t) ** gamma * logp_t


def swap_endpoints(e):
    """``(x1, y1, x2, y2) -> (x2, y2, x1, y1)`` along the last axis."""
    if isinstance(e, torch.Tensor):
        return e[..., [2, 3, 0, 1]]
    return np.asarray(e)[..., [2, 3, 0, 1]]


def _pick_order(e, t):
    # both candidate orders plus a boolean selecting the swapped one
    direct = (t - e).abs().sum(-1)
    swapped = (t - swap_endpoints(e)).abs().sum(-1)
    return direct, swapped, swapped < direct


def endpoint_error_d(e, t):
    """Order-free L1 endpoint error ``min(sum|t - e|, sum|t - swap(e)|)``."""
    e, plain = _as_tensor(e)
    t = torch.as_tensor(t, dtype=e.dtype) if not isinstance(t, torch.Tensor) else t
    direct, swapped, _ = _pick_order(e, t)
    return _out(torch.minimum(direct, swapped), plain)


def wing_loss(d, w: float = 10.0, eps: float = 2.0):
    """``w ln(1 + d/eps)`` for ``d < w``, else ``d - C`` with ``C = w - w ln(1 + w/eps)``."""
    d, plain = _as_tensor(d)
    c = wing_constant(w, eps)
    small = d < w
    # keep the log argument valid on the unused branch
    log_branch = w * torch.log1p(torch.where(small, d, torch.zeros_like(d)) / eps)
    return _out(torch.where(small, log_branch, d - c), plain)


def smooth_l1(d, beta: float = 1.0):
    d, plain = _as_tensor(d)
    return _out(torch.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta), plain)


def regression_loss(e, t, cfg: LossConfig):
    """Per-cell regression penalty for the configured variant.

    The endpoint order is chosen by the swap-min L1 rule first; the variant's
    penalty is then applied (``l2`` squares the coordinate differences of the
    chosen order).
    """
    direct, swapped, use_swap = _pick_order(e, t)
    d = torch.minimum(direct, swapped)
    if cfg.reg_variant == "wing":
        return wing_loss(d, cfg.wing_w, cfg.wing_eps)
    if cfg.reg_variant == "l1":
        return d
    if cfg.reg_variant == "smooth_l1":
        return smooth_l1(d, 1.0)
    # L1 ties are common (both predicted points on one side of both targets);
    # break them by the squared error so the result ignores target order
    sq_direct = ((t - e) ** 2).sum(-1)
    sq_swapped = ((t - swap_endpoints(e)) ** 2).sum(-1)
    tie = (direct - swapped).abs() <= L1_TIE_RTOL * (1.0 + direct.detach().abs())
    return torch.where(tie, torch.minimum(sq_direct, sq_swapped), torch.where(use_swap, sq_swapped, sq_direct))


def classification_loss_from_logits(logits, labels, cfg: LossConfig):
    if cfg.cls_variant == "focal":
        return focal_loss_from_logits(logits, labels, cfg.gamma, cfg.alpha)
    return 2.0 * focal_loss_from_logits(logits, labels, 0.0, 0.5)


def classification_loss(p, labels, cfg: LossConfig):
    if cfg.cls_variant == "focal":
        return focal_loss(p, labels, cfg.gamma, cfg.alpha)
    return 2.0 * focal_loss(p, labels, 0.0, 0.5)


def _reduce(cls_per_cell, labels, reg_pred, reg_target, cfg, cell_mask):
    if cell_mask is None:
        cell_mask = torch.ones_like(labels, dtype=torch.bool)
    else:
        cell_mask = torch.as_tensor(cell_mask, dtype=torch.bool, device=labels.device)
        cell_mask = cell_mask.expand_as(labels)
    n_cells = cell_mask.sum()
    if n_cells == 0:
        raise ContractError("cell mask selects no lattice cells")
    cls_term = (cls_per_cell * cell_mask).sum() / n_cells
    positive = (labels > 0) & cell_mask
    n_pos = int(positive.sum())
    if n_pos == 0:
        reg_term = cls_term.new_zeros(())
    else:
        reg_term = regression_loss(reg_pred[positive], reg_target[positive], cfg).mean()
    total = cls_term + cfg.lam * reg_term
    return LossReport(total, cls_term, reg_term, n_pos)


def _check_shapes(cls_shape, labels, reg_pred, reg_target):
    if tuple(cls_shape) != tuple(labels.shape):
        raise ContractError(f"class output {tuple(cls_shape)} vs labels {tuple(labels.shape)}")
    expected = tuple(labels.shape) + (4,)
    if tuple(reg_pred.shape) != expected or tuple(reg_target.shape) != expected:
        raise ContractError(
            f"regression shapes {tuple(reg_pred.shape)} / {tuple(reg_target.shape)}, expected {expected}"
        )


def multitask_loss(class_probs, labels, reg_pred, reg_target, cfg: LossConfig, cell_mask=None) -> LossReport:
    """``mean(L_cls) + lam * mean_over_positives(L_reg)`` from probabilities.

    ``cell_mask`` (broadcastable to ``labels``) restricts which lattice cells
    take part; cells outside it contribute to neither term.
    """
    class_probs = torch.as_tensor(class_probs)
    if class_probs.ndim == torch.as_tensor(labels).ndim + 1 and class_probs.shape[-1] == 1:
        class_probs = class_probs[..., 0]
    labels = torch.as_tensor(labels)
    reg_pred = torch.as_tensor(reg_pred)
    reg_target = torch.as_tensor(reg_target, dtype=reg_pred.dtype)
    _check_shapes(class_probs.shape, labels, reg_pred, reg_target)
    cls = classification_loss(class_probs, labels, cfg)
    return _reduce(cls, labels, reg_pred, reg_target, cfg, cell_mask)


def multitask_loss_from_logits(class_logits, labels, reg_pred, reg_target, cfg: LossConfig, cell_mask=None) -> LossReport:
    """As ``multitask_loss`` but from raw two-channel logits."""
    labels = torch.as_tensor(labels)
    reg_target = torch.as_tensor(reg_target, dtype=reg_pred.dtype)
    if class_logits.shape[-1] != 2:
        raise ContractError(f"class logits need 2 channels, got {tuple(class_logits.shape)}")
    _check_shapes(class_logits.shape[:-1], labels, reg_pred, reg_target)
    cls = classification_loss_from_logits(class_logits, labels, cfg)
    return _reduce(cls, labels, reg_pred, reg_target, cfg, cell_mask)
