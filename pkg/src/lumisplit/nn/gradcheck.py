"""Central finite-difference checks for every layer adjoint and every loss gradient.

Everything here runs in float64 with ``h = 1e-5``. The error measure is
``||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-12)``.

Layers are differenced entry by entry. The losses, which are far more
expensive to evaluate, are differenced along ``N_DIRECTIONS`` random
Gaussian directions; the stacked directional derivatives are compared to
``<grad, v>`` with the same norm-based error.

Inputs are drawn away from kinks (relu at 0, |x| at 0, the L1 terms of the
losses) and away from permutation ties, since finite differences are
meaningless across a non-differentiable point.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import losses
from ..imgcore import downsample_avg2, grad_fd
from . import tensor as T

H = 1e-5
TOL = 1e-3
DEFAULT_SEEDS = tuple(range(20))
# NCHW shapes for the layer checks; odd sizes exercise the stride-2 edge handling
LAYER_SHAPES = ((1, 2, 4, 4), (2, 3, 5, 5), (1, 3, 6, 4))
# H x W shapes for the loss checks (3 pyramid levels)
LOSS_SHAPES = ((4, 4), (5, 6), (6, 6))
KINK_MARGIN = 10 * H
TIE_MARGIN = 1e-4
N_DIRECTIONS = 24


def rel_err(a: np.ndarray, n: np.ndarray) -> float:
    a = np.ravel(a)
    n = np.ravel(n)
    den = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / den)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def directional_check(f: Callable[[], float], xs: list[np.ndarray], grads: list[np.ndarray], rng,
                      k: int = N_DIRECTIONS, h: float = H) -> float:
    """Compare ``<grad, v>`` with central differences of ``f`` along ``k`` random directions ``v``."""
    originals = [x.copy() for x in xs]
    ana, num = np.zeros(k), np.zeros(k)
    for j in range(k):
        dirs = [rng.normal(size=x.shape) for x in xs]
        ana[j] = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        for x, x0, d in zip(xs, originals, dirs):
            x[...] = x0 + h * d
        fp = f()
        for x, x0, d in zip(xs, originals, dirs):
            x[...] = x0 - h * d
        fm = f()
        num[j] = (fp - fm) / (2 * h)
    for x, x0 in zip(xs, originals):
        x[...] = x0
    return rel_err(ana, num)


# --- layers -------------------------------------------------------------------------

def _away_from_zero(rng, shape, lo=0.05):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, 1.0, size=shape)


def _leaf(a):
    return T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _layer_case(name: str, rng, shape):
    """Return (inputs, forward) for one op; ``forward(*inputs)`` builds the output tensor."""
    n, c, h, w = shape
    if name == "conv3x3":
        cout = int(rng.integers(1, 4))
        ins = [_leaf(rng.normal(size=shape)), _leaf(rng.normal(size=(cout, c, 3, 3))), _leaf(rng.normal(size=cout))]
        return ins, lambda x, k, b: T.conv2d(x, k, b)
    if name == "conv1x1":
        cout = int(rng.integers(1, 4))
        ins = [_leaf(rng.normal(size=shape)), _leaf(rng.normal(size=(cout, c, 1, 1))), _leaf(rng.normal(size=cout))]
        return ins, lambda x, k, b: T.conv2d(x, k, b)
    if name == "stride2-conv":
        cout = int(rng.integers(1, 4))
        ins = [_leaf(rng.normal(size=shape)), _leaf(rng.normal(size=(cout, c, 3, 3))), _leaf(rng.normal(size=cout))]
        return ins, lambda x, k, b: T.conv2d(x, k, b, stride=2)
    if name == "upsample2":
        return [_leaf(rng.normal(size=shape))], T.upsample2
    if name == "relu":
        return [_leaf(_away_from_zero(rng, shape))], T.relu
    if name == "softplus":
        return [_leaf(rng.normal(scale=2.0, size=shape))], T.softplus
    if name == "concat":
        other = (n, int(rng.integers(1, 4)), h, w)
        return [_leaf(rng.normal(size=shape)), _leaf(rng.normal(size=other))], lambda a, b: T.concat([a, b])
    if name == "channels":
        start = int(rng.integers(0, c))
        stop = int(rng.integers(start + 1, c + 1))
        return [_leaf(rng.normal(size=shape))], lambda x: T.channels(x, start, stop)
    if name == "add":
        return [_leaf(rng.normal(size=shape)), _leaf(rng.normal(size=shape))], T.add
    if name == "scale":
        k = float(rng.normal())
        return [_leaf(rng.normal(size=shape))], lambda x: T.scale(x, k)
    if name == "simplex_head":
        return [_leaf(_away_from_zero(rng, shape))], T.simplex_head
    raise KeyError(name)


LAYER_CHECKS = ("conv3x3", "conv1x1", "stride2-conv", "upsample2", "relu", "softplus",
                "concat", "channels", "add", "scale", "simplex_head")
# registry entry each check exercises (for mutation testing)
LAYER_ADJOINT = {"conv3x3": "conv2d", "conv1x1": "conv2d", "stride2-conv": "conv2d"}


def check_layer(name: str, seed: int, shape) -> float:
    rng = np.random.default_rng([seed, LAYER_CHECKS.index(name), *shape])
    ins, fwd = _layer_case(name, rng, shape)
    out = fwd(*ins)
    probe = rng.normal(size=out.shape)
    out.backward(probe)
    analytic = [t.grad for t in ins]

    def f():
        return float((fwd(*[T.Tensor(t.data) for t in ins]).data * probe).sum())

    errs = [rel_err(a, numeric_grad(f, t.data)) for a, t in zip(analytic, ins)]
    return max(errs)


# --- losses -------------------------------------------------------------------------

def _random_mask(rng, h, w):
    m = rng.random((h, w)) < 0.85
    m[0, 0] = True
    return m


def _l1_args(pred, gt, c, ctx, multiscale):
    """Every argument that goes through |.| in an L1 matching term."""
    args = [(pred - c * gt)[ctx.masks[0]].ravel()]
    if multiscale:
        p, g = pred, gt
        for t in range(ctx.levels):
            if t > 0:
                p, g = downsample_avg2(p), downsample_avg2(g)
            gxp, gyp = grad_fd(p)
            gxg, gyg = grad_fd(g)
            # the last column/row of the forward differences is identically zero
            args.append((gxp - c * gxg)[:, :-1][ctx.gx_masks[t][:, :-1]].ravel())
            args.append((gyp - c * gyg)[:-1][ctx.gy_masks[t][:-1]].ravel())
    return np.concatenate(args)


def _kink_free(pred, gt, ctx, multiscale) -> bool:
    c = losses.lsq_scale(pred, gt, ctx.masks[0]).value
    a = _l1_args(pred, gt, c, ctx, multiscale)
    return a.size == 0 or float(np.abs(a).min()) > KINK_MARGIN


def _pair_scales(pred_pair, gt_pair, mask):
    return [[losses.lsq_scale(pred_pair[i], gt_pair[j], mask).value for j in range(2)] for i in range(2)]


LOSS_CHECKS = ("chrom_loss", "chrom_loss[scale_grad]", "shading_loss", "shading_loss[scale_grad]",
               "shading_loss[l2]", "separation_loss", "separation_loss[scale_grad]")


def _draw_loss_case(name, rng, shape, tries=200):
    h, w = shape
    for _ in range(tries):
        mask = _random_mask(rng, h, w)
        ctx = losses.LossContext.from_mask(mask, 3)
        if name.startswith("chrom"):
            gt = rng.dirichlet(np.ones(3), size=(h, w))
            pred = rng.dirichlet(np.ones(3), size=(h, w))
            if _kink_free(pred, gt, ctx, True):
                return pred, gt, ctx
            continue
        gt = (rng.uniform(0.05, 1.0, size=(h, w, 3)), rng.uniform(0.05, 1.0, size=(h, w, 3)))
        pred = (rng.uniform(0.05, 1.0, size=(h, w, 3)), rng.uniform(0.05, 1.0, size=(h, w, 3)))
        fn = losses.shading_loss if name.startswith("shading") else losses.separation_loss
        r = fn(pred, gt, ctx)
        if abs(r.candidates[0] - r.candidates[1]) <= TIE_MARGIN:
            continue
        if name.startswith("separation"):
            ok = all(_kink_free(pred[i], gt[r.perm[i]], ctx, False) for i in range(2))
            if not ok:
                continue
        return pred, gt, ctx
    raise RuntimeError(f"could not draw a kink-free case for {name}")


def check_loss(name: str, seed: int, shape) -> float:
    rng = np.random.default_rng([seed, 100 + LOSS_CHECKS.index(name), *shape])
    pred, gt, ctx = _draw_loss_case(name, rng, shape)
    full = name.endswith("[scale_grad]")
    if name.startswith("chrom"):
        r = losses.chrom_loss(pred, gt, ctx, scale_grad=full)
        c0 = r.scales[0]

        def f():
            return losses.chrom_loss(pred, gt, ctx, scale=None if full else c0).value

        return directional_check(f, [pred], [r.grad], rng)
    kw = {"norm": "l2"} if name == "shading_loss[l2]" else {}
    fn = losses.shading_loss if name.startswith("shading") else losses.separation_loss
    r = fn(pred, gt, ctx, scale_grad=full, **kw)
    frozen = None if full else _pair_scales(pred, gt, ctx.masks[0])

    def f():
        return fn(pred, gt, ctx, scales=frozen, **kw).value

    return directional_check(f, list(pred), list(r.grad), rng)


# --- suite ------------------------------------------------------------------------

@dataclass
class CheckRow:
    name: str
    kind: str
    cases: int = 0
    max_rel_err: float = 0.0
    worst: tuple = ()

    @property
    def passed(self) -> bool:
        return self.cases > 0 and self.max_rel_err < TOL


@dataclass
class GradcheckReport:
    rows: list[CheckRow] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def table(self) -> str:
        lines = [f"{'check':<28} {'kind':<6} {'cases':>5} {'max_rel_err':>12}  result"]
        for r in self.rows:
            lines.append(f"{r.name:<28} {r.kind:<6} {r.cases:>5} {r.max_rel_err:>12.3e}  {'PASS' if r.passed else 'FAIL'}")
        lines.append(f"{'overall':<28} {'':<6} {sum(r.cases for r in self.rows):>5} "
                     f"{max((r.max_rel_err for r in self.rows), default=0.0):>12.3e}  "
                     f"{'PASS' if self.passed else 'FAIL'}  ({self.seconds:.1f}s)")
        return "\n".join(lines)

    def to_json(self) -> dict:
        return {"passed": self.passed, "tolerance": TOL, "h": H,
                "rows": [{"name": r.name, "kind": r.kind, "cases": r.cases, "max_rel_err": r.max_rel_err,
                          "passed": r.passed} for r in self.rows]}


def run_gradcheck(seeds=DEFAULT_SEEDS, layer_shapes=LAYER_SHAPES, loss_shapes=LOSS_SHAPES,
                  layers=LAYER_CHECKS, loss_names=LOSS_CHECKS) -> GradcheckReport:
    t0 = time.perf_counter()
    report = GradcheckReport()
    for name in layers:
        row = CheckRow(name, "layer")
        for seed in seeds:
            for shape in layer_shapes:
                e = check_layer(name, seed, shape)
                row.cases += 1
                if e >= row.max_rel_err:
                    row.max_rel_err, row.worst = e, (seed, tuple(shape))
        report.rows.append(row)
    for name in loss_names:
        row = CheckRow(name, "loss")
        for seed in seeds:
            for shape in loss_shapes:
                e = check_loss(name, seed, shape)
                row.cases += 1
                if e >= row.max_rel_err:
                    row.max_rel_err, row.worst = e, (seed, tuple(shape))
        report.rows.append(row)
    report.seconds = time.perf_counter() - t0
    return report
