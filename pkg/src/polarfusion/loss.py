"""Detection loss: focal classification term plus weighted smooth-L1 regression on positives.

Every function returns ``(value, gradient)`` with analytic gradients, so the
network graph is seeded through :func:`polarfusion.tensor.loss_node`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, loss_node


@dataclass
class LossConfig:
    gamma: float = 2.0
    alpha_focal: float = 0.25
    alpha_reg: float = 100.0
    eps: float = 1e-4

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("focal gamma must be >= 0")
        if not 0 < self.alpha_focal <= 1:
            raise ValueError("focal balance must be in (0, 1]")
        if self.alpha_reg < 0:
            raise ValueError("regression weight must be >= 0")
        if not 0 < self.eps <= 1e-3:
            raise ValueError("probability clamp must be in (0, 1e-3]")


@dataclass
class TargetMaps:
    """Binary occupancy (.. x 1 x Gr x Ga) and range/azimuth targets (.. x 2 x Gr x Ga)."""

    y_cls: np.ndarray
    y_reg: np.ndarray

    def __post_init__(self):
        self.y_cls = np.asarray(self.y_cls)
        self.y_reg = np.asarray(self.y_reg)
        if not np.isin(self.y_cls, (0, 1)).all():
            raise ValueError("y_cls must be binary")
        if self.y_cls.shape[-3] != 1 or self.y_reg.shape[-3] != 2 or self.y_cls.shape[-2:] != self.y_reg.shape[-2:]:
            raise ShapeError(f"target shapes {self.y_cls.shape} / {self.y_reg.shape} are inconsistent")

    @property
    def positive_mask(self) -> np.ndarray:
        return self.y_cls > 0.5


def focal_loss(y_cls, p, gamma: float = 2.0, alpha: float = 0.25, eps: float = 1e-4):
    """Mean over cells of -alpha_t (1 - p_t)^gamma log(p_t)."""
    y = np.asarray(y_cls, dtype=np.float64)
    p_raw = np.asarray(p, dtype=np.float64)
    if y.shape != p_raw.shape:
        raise ShapeError(f"focal loss shapes differ: {y.shape} vs {p_raw.shape}")
    pc = np.clip(p_raw, eps, 1 - eps)
    inside = (p_raw >= eps) & (p_raw <= 1 - eps)
    pos = y > 0.5
    pt = np.where(pos, pc, 1 - pc)
    at = np.where(pos, alpha, 1 - alpha)
    q = 1 - pt
    log_pt = np.log(pt)
    n = y.size
    value = float(np.sum(-at * q ** gamma * log_pt) / n)
    # d/dpt of -at q^g log pt, then dpt/dp = +1 (pos) or -1 (neg)
    if gamma == 0:
        d_pt = -at / pt
    else:
        d_pt = at * (gamma * q ** (gamma - 1) * log_pt - q ** gamma / pt)
    grad = np.where(pos, d_pt, -d_pt) * inside / n
    return value, grad


def smooth_l1(y_reg, pred, positive_mask):
    """Mean smooth-L1 over masked cells of both regression channels (0 when nothing is masked)."""
    y = np.asarray(y_reg, dtype=np.float64)
    r = np.asarray(pred, dtype=np.float64)
    mask = np.asarray(positive_mask, dtype=bool)
    if y.shape != r.shape:
        raise ShapeError(f"regression shapes differ: {y.shape} vs {r.shape}")
    if mask.shape[-3] == 1:
        mask = np.broadcast_to(mask, y.shape)
    if mask.shape != y.shape:
        raise ShapeError(f"mask shape {positive_mask.shape} incompatible with {y.shape}")
    count = int(mask.sum())
    if count == 0:
        return 0.0, np.zeros_like(r)
    e = np.where(mask, r - y, 0.0)
    ae = np.abs(e)
    quad = ae < 1
    value = float(np.sum(np.where(quad, 0.5 * e * e, ae - 0.5)) / count)
    grad = np.where(quad, e, np.sign(e)) * mask / count
    return value, grad


def detection_loss(pred, target: TargetMaps, cfg: LossConfig | None = None):
    """Return ``(total, {"cls": grad, "reg": grad, "focal": f, "smooth_l1": s})``."""
    cfg = cfg or LossConfig()
    cls = pred.cls.data if isinstance(pred.cls, Tensor) else np.asarray(pred.cls)
    reg = pred.reg.data if isinstance(pred.reg, Tensor) else np.asarray(pred.reg)
    if cls.shape != target.y_cls.shape or reg.shape != target.y_reg.shape:
        raise ShapeError(f"prediction {cls.shape}/{reg.shape} vs target {target.y_cls.shape}/{target.y_reg.shape}")
    f, gf = focal_loss(target.y_cls, cls, cfg.gamma, cfg.alpha_focal, cfg.eps)
    s, gs = smooth_l1(target.y_reg, reg, target.positive_mask)
    total = f + cfg.alpha_reg * s
    return total, {"cls": gf, "reg": cfg.alpha_reg * gs, "focal": f, "smooth_l1": s}


def detection_loss_node(pred, target: TargetMaps, cfg: LossConfig | None = None):
    """Scalar graph node for :func:`detection_loss`; call ``.backward()`` on the result."""
    total, parts = detection_loss(pred, target, cfg)
    node = loss_node(total, [(pred.cls, parts["cls"]), (pred.reg, parts["reg"])])
    return node, parts
