"""Training losses and the evaluation metric, with analytic gradients.

All images are ``H x W x C`` arrays. Each loss returns a :class:`LossResult`
holding the value and the gradient with respect to the prediction. The
least-squares scale between prediction and ground truth is treated as a
constant by default (``scale_grad=False``); passing ``scale_grad=True``
adds its dependence on the prediction so the gradient is exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imgcore import (DEFAULT_LEVELS, downsample_avg2, downsample_avg2_adjoint, downsample_mask,
                      grad_fd, grad_fd_adjoint)

IDENTITY = (0, 1)
SWAPPED = (1, 0)


class DegenerateScale(ValueError):
    pass


class EmptyMask(ValueError):
    pass


@dataclass(frozen=True)
class ScaleFactor:
    value: float
    which: str = "c"


@dataclass
class LossContext:
    """Validity masks for every pyramid level plus the pair masks used by gradient terms."""

    masks: list[np.ndarray]
    gx_masks: list[np.ndarray] = field(init=False)
    gy_masks: list[np.ndarray] = field(init=False)
    counts: list[int] = field(init=False)

    def __post_init__(self):
        self.gx_masks, self.gy_masks, self.counts = [], [], []
        for m in self.masks:
            mx = m.copy()
            mx[:, :-1] &= m[:, 1:]
            my = m.copy()
            my[:-1, :] &= m[1:, :]
            self.gx_masks.append(mx)
            self.gy_masks.append(my)
            self.counts.append(int(m.sum()))
        if self.counts[0] == 0:
            raise EmptyMask("loss needs at least one valid pixel")

    @classmethod
    def from_mask(cls, mask, levels: int = DEFAULT_LEVELS) -> "LossContext":
        masks = [np.asarray(mask, dtype=bool)]
        for _ in range(levels - 1):
            masks.append(downsample_mask(masks[-1]))
        return cls(masks)

    @property
    def levels(self) -> int:
        return len(self.masks)

    @property
    def M(self) -> int:
        return self.counts[0]


def lsq_scale(pred, gt, mask, which: str = "c") -> ScaleFactor:
    """Scalar c minimising ``sum_mask |pred - c * gt|^2``."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise EmptyMask("scale fit needs at least one valid pixel")
    p = np.asarray(pred)[m]
    g = np.asarray(gt)[m]
    den = float((g * g).sum())
    if den <= 0:
        raise DegenerateScale("degenerate scale: ground truth has zero energy on the mask")
    return ScaleFactor(float((p * g).sum()) / den, which)


@dataclass
class LossResult:
    value: float
    grad: np.ndarray | tuple[np.ndarray, np.ndarray]
    scales: tuple[float, ...] = ()
    perm: tuple[int, int] = IDENTITY
    candidates: tuple[float, float] | None = None


def _penalty(d: np.ndarray, norm: str):
    """Per-pixel penalty over the channel axis and its derivative w.r.t. ``d``."""
    if norm == "l1":
        return np.abs(d).sum(axis=-1), np.sign(d)
    if norm == "l2sq":
        return (d * d).sum(axis=-1), 2.0 * d
    if norm == "l2":
        n = np.sqrt((d * d).sum(axis=-1))
        safe = np.where(n > 0, n, 1.0)
        return n, np.where(n[..., None] > 0, d / safe[..., None], 0.0)
    raise ValueError(f"unknown norm {norm!r}")


def _data_term(pred, gt, c, mask, count, norm):
    d = pred - c * gt
    val, dd = _penalty(d, norm)
    m = mask[..., None]
    g = np.where(m, dd, 0.0) / count
    value = float(val[mask].sum()) / count
    return value, g, -float((g * gt).sum())


def _grad_term(pred_t, gt_t, c, ctx: LossContext, t, norm):
    gxp, gyp = grad_fd(pred_t)
    gxg, gyg = grad_fd(gt_t)
    dx = gxp - c * gxg
    dy = gyp - c * gyg
    mx, my = ctx.gx_masks[t], ctx.gy_masks[t]
    dx = np.where(mx[..., None], dx, 0.0)
    dy = np.where(my[..., None], dy, 0.0)
    count = max(ctx.counts[t], 1)
    if norm == "l2":
        # Euclidean norm over both gradient directions and channels jointly
        n = np.sqrt((dx * dx).sum(-1) + (dy * dy).sum(-1))
        safe = np.where(n > 0, n, 1.0)[..., None]
        bx = np.where(n[..., None] > 0, dx / safe, 0.0)
        by = np.where(n[..., None] > 0, dy / safe, 0.0)
        value = float(n.sum()) / count
    else:
        vx, bx = _penalty(dx, norm)
        vy, by = _penalty(dy, norm)
        value = float(vx.sum() + vy.sum()) / count
    bx = np.where(mx[..., None], bx, 0.0) / count
    by = np.where(my[..., None], by, 0.0) / count
    dval_dc = -float((bx * gxg).sum() + (by * gyg).sum())
    return value, grad_fd_adjoint(bx, by), dval_dc


def _matching(pred, gt, c, ctx: LossContext, norm: str, multiscale: bool):
    """Masked data term plus (optionally) multi-scale gradient terms at fixed scale ``c``."""
    value, grad, dc = _data_term(pred, gt, c, ctx.masks[0], ctx.M, norm)
    if not multiscale:
        return value, grad, dc
    pred_t, gt_t = pred, gt
    shapes = []
    for t in range(ctx.levels):
        if t > 0:
            shapes.append(pred_t.shape)
            pred_t = downsample_avg2(pred_t)
            gt_t = downsample_avg2(gt_t)
        v, g, dct = _grad_term(pred_t, gt_t, c, ctx, t, norm)
        for shp in reversed(shapes):
            g = downsample_avg2_adjoint(g, shp)
        value += v
        grad = grad + g
        dc += dct
    return value, grad, dc


def _scale_jacobian(gt, mask):
    m = mask[..., None]
    g = np.where(m, gt, 0.0)
    return g / float((g * g).sum())


def _scaled_matching(pred, gt, ctx, norm, multiscale, scale, scale_grad, which):
    c = lsq_scale(pred, gt, ctx.masks[0], which).value if scale is None else float(scale)
    value, grad, dc = _matching(pred, gt, c, ctx, norm, multiscale)
    if scale_grad:
        grad = grad + dc * _scale_jacobian(gt, ctx.masks[0])
    return value, grad, c


def chrom_loss(pred, gt, ctx: LossContext, *, scale: float | None = None, scale_grad: bool = False) -> LossResult:
    """Scale-invariant L1 chromaticity loss with multi-scale L1 gradient matching."""
    pred = np.asarray(pred, dtype=np.float64)
    value, grad, c = _scaled_matching(pred, np.asarray(gt, dtype=np.float64), ctx, "l1", True, scale, scale_grad, "c_alpha")
    return LossResult(value, grad, (c,))


def _pair_loss(pred_pair, gt_pair, ctx, norm, multiscale, scales, scale_grad, which) -> LossResult:
    p = [np.asarray(x, dtype=np.float64) for x in pred_pair]
    g = [np.asarray(x, dtype=np.float64) for x in gt_pair]
    results = {}
    for i in range(2):
        for j in range(2):
            s = None if scales is None else scales[i][j]
            results[i, j] = _scaled_matching(p[i], g[j], ctx, norm, multiscale, s, scale_grad, which)
    keep = results[0, 0][0] + results[1, 1][0]
    swap = results[0, 1][0] + results[1, 0][0]
    # ties go to the identity pairing
    if swap < keep:
        perm, value = SWAPPED, swap
    else:
        perm, value = IDENTITY, keep
    grads = (results[0, perm[0]][1], results[1, perm[1]][1])
    used = (results[0, perm[0]][2], results[1, perm[1]][2])
    return LossResult(value, grads, used, perm, (keep, swap))


def shading_loss(pred_pair, gt_pair, ctx: LossContext, *, scales=None, scale_grad: bool = False,
                 norm: str = "l2sq") -> LossResult:
    """Permutation-min shading loss: squared-error data term plus multi-scale gradient term.

    ``scales`` optionally fixes the per-pairing scale as a 2x2 nested
    sequence indexed [pred][gt]. ``norm="l2"`` switches to the per-pixel
    Euclidean norm instead of squared error.
    """
    return _pair_loss(pred_pair, gt_pair, ctx, norm, True, scales, scale_grad, "c_S")


def separation_loss(pred_pair, gt_pair, ctx: LossContext, *, scales=None, scale_grad: bool = False) -> LossResult:
    """Permutation-min, scale-aligned L1 loss on the two separated images."""
    return _pair_loss(pred_pair, gt_pair, ctx, "l1", False, scales, scale_grad, "c_I")


def image_error(pred, gt, mask, scale_align: bool = True) -> float:
    """Mean absolute error over masked pixels and channels after aligning ``pred`` to ``gt``.

    The alignment scale is ``<pred, gt> / <pred, pred>``; an all-zero
    prediction is compared unscaled.
    """
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise EmptyMask("metric needs at least one valid pixel")
    p = np.asarray(pred, dtype=np.float64)[m]
    g = np.asarray(gt, dtype=np.float64)[m]
    if scale_align:
        den = float((p * p).sum())
        c = float((p * g).sum()) / den if den > 0 else 0.0
        p = c * p
    return float(np.abs(p - g).mean())


def eval_metric(pred_pair, gt_pair, mask, scale_align: bool = True) -> float:
    """min(E11 + E22, E12 + E21) over the two assignments of predictions to ground truth."""
    e = [[image_error(pred_pair[i], gt_pair[j], mask, scale_align) for j in range(2)] for i in range(2)]
    return min(e[0][0] + e[1][1], e[0][1] + e[1][0])


def chrom_error(pred, gt, mask) -> float:
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise EmptyMask("metric needs at least one valid pixel")
    return float(np.abs(np.asarray(pred)[m] - np.asarray(gt)[m]).mean())
