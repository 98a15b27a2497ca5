import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lumisplit import losses as Lo
from lumisplit.losses import (DegenerateScale, EmptyMask, LossContext, chrom_loss, eval_metric, lsq_scale,
                              separation_loss, shading_loss)


# --- independent scalar reference (explicit loops, no shared helpers) ---------------------

def ref_pool(img, mask):
    h, w = len(img), len(img[0])
    ho, wo = (h + 1) // 2, (w + 1) // 2
    out = [[None] * wo for _ in range(ho)]
    mout = [[True] * wo for _ in range(ho)]
    for i in range(ho):
        for j in range(wo):
            cells = [(y, x) for y in (2 * i, 2 * i + 1) for x in (2 * j, 2 * j + 1) if y < h and x < w]
            out[i][j] = [sum(img[y][x][c] for y, x in cells) / len(cells) for c in range(3)]
            mout[i][j] = all(mask[y][x] for y, x in cells)
    return out, mout


def ref_scale(p, g, mask):
    num = den = 0.0
    for y in range(len(p)):
        for x in range(len(p[0])):
            if mask[y][x]:
                for c in range(3):
                    num += p[y][x][c] * g[y][x][c]
                    den += g[y][x][c] ** 2
    return num / den


def ref_pen(v, norm):
    return sum(abs(a) for a in v) if norm == "l1" else sum(a * a for a in v)


def ref_term(p, g, mask, norm, multiscale, levels=3):
    c = ref_scale(p, g, mask)
    M = sum(map(sum, mask))
    total = 0.0
    for y in range(len(p)):
        for x in range(len(p[0])):
            if mask[y][x]:
                total += ref_pen([p[y][x][k] - c * g[y][x][k] for k in range(3)], norm) / M
    if not multiscale:
        return total
    pt, gt, mt = p, g, mask
    for t in range(levels):
        if t:
            pt, m1 = ref_pool(pt, mt)
            gt, _ = ref_pool(gt, mt)
            mt = m1
        Mt = max(sum(map(sum, mt)), 1)
        h, w = len(pt), len(pt[0])
        for y in range(h):
            for x in range(w):
                if x + 1 < w and mt[y][x] and mt[y][x + 1]:
                    d = [(pt[y][x + 1][k] - pt[y][x][k]) - c * (gt[y][x + 1][k] - gt[y][x][k]) for k in range(3)]
                    total += ref_pen(d, norm) / Mt
                if y + 1 < h and mt[y][x] and mt[y + 1][x]:
                    d = [(pt[y + 1][x][k] - pt[y][x][k]) - c * (gt[y + 1][x][k] - gt[y][x][k]) for k in range(3)]
                    total += ref_pen(d, norm) / Mt
    return total


def ref_pair(pp, gg, mask, norm, multiscale):
    L = lambda i, j: ref_term(pp[i].tolist(), gg[j].tolist(), mask.tolist(), norm, multiscale)
    return min(L(0, 0) + L(1, 1), L(0, 1) + L(1, 0))


# --- lsq scale -----------------------------------------------------------------------

def test_lsq_scale_examples():
    m = np.ones((1, 1), bool)
    gt = np.array([[[1.0, 2.0, 0.5]]])
    assert lsq_scale(2 * gt, gt, m).value == pytest.approx(2.0)
    assert lsq_scale(np.array([[[0.0, 1.0, 0.0]]]), np.array([[[1.0, 0.0, 0.0]]]), m).value == 0.0
    # gt=(1,2), pred=(2,2) -> (2+4)/5
    c = lsq_scale(np.array([[[2.0, 2.0]]]), np.array([[[1.0, 2.0]]]), m)
    assert c.value == pytest.approx(1.2)


def test_lsq_scale_errors():
    with pytest.raises(DegenerateScale, match="degenerate scale"):
        lsq_scale(np.ones((2, 2, 3)), np.zeros((2, 2, 3)), np.ones((2, 2), bool))
    with pytest.raises(EmptyMask):
        lsq_scale(np.ones((2, 2, 3)), np.ones((2, 2, 3)), np.zeros((2, 2), bool))
    with pytest.raises(EmptyMask):
        LossContext.from_mask(np.zeros((4, 4), bool))


def test_context_counts():
    m = np.ones((8, 8), bool)
    m[0, 0] = False
    ctx = LossContext.from_mask(m)
    assert ctx.M == 63 and ctx.levels == 3
    assert ctx.counts == [63, 15, 3]
    assert not ctx.gx_masks[0][0, 0] and not ctx.gy_masks[0][0, 0]


# --- chrom loss ----------------------------------------------------------------------

@pytest.mark.parametrize("k", [0.5, 1.0, 2.0])
def test_chrom_loss_scale_invariant(k, rng):
    gt = rng.dirichlet(np.ones(3), size=(8, 8))
    ctx = LossContext.from_mask(rng.random((8, 8)) < 0.9)
    assert chrom_loss(k * gt, gt, ctx).value <= 1e-9


def test_chrom_loss_small_case_brute_force():
    gt = np.full((2, 2, 3), 1 / 3)
    pred = gt.copy()
    pred[1, 0] = [0.5, 0.25, 0.25]
    ctx = LossContext.from_mask(np.ones((2, 2), bool), levels=2)
    r = chrom_loss(pred, gt, ctx)
    assert r.value == pytest.approx(ref_term(pred.tolist(), gt.tolist(), [[True] * 2] * 2, "l1", True, levels=2),
                                    rel=1e-12)


@given(st.integers(0, 2**31), st.integers(4, 7), st.integers(4, 7))
def test_chrom_loss_matches_reference(seed, h, w):
    r = np.random.default_rng(seed)
    gt = r.dirichlet(np.ones(3), size=(h, w))
    pred = r.dirichlet(np.ones(3), size=(h, w))
    mask = r.random((h, w)) < 0.8
    mask[0, 0] = True
    res = chrom_loss(pred, gt, LossContext.from_mask(mask))
    assert res.value == pytest.approx(ref_term(pred.tolist(), gt.tolist(), mask.tolist(), "l1", True), rel=1e-10)
    assert res.value >= 0


# --- pair losses ------------------------------------------------------------------------

def _pair(r, h=4, w=4):
    return (r.uniform(0.05, 1, (h, w, 3)), r.uniform(0.05, 1, (h, w, 3)))


@pytest.mark.parametrize("fn,norm,ms", [(shading_loss, "l2sq", True), (separation_loss, "l1", False)])
def test_pair_loss_random_4x4_brute_force(fn, norm, ms, rng):
    for _ in range(5):
        p, g = _pair(rng), _pair(rng)
        mask = rng.random((4, 4)) < 0.85
        mask[0, 0] = True
        res = fn(p, g, LossContext.from_mask(mask))
        assert res.value == pytest.approx(ref_pair(p, g, mask, norm, ms), rel=1e-10)
        assert res.value == min(res.candidates)


@pytest.mark.parametrize("fn", [shading_loss, separation_loss])
def test_pair_loss_zero_cases(fn, rng):
    g = _pair(rng, 8, 8)
    ctx = LossContext.from_mask(np.ones((8, 8), bool))
    assert fn(g, g, ctx).value <= 1e-12
    swapped = fn((g[1], g[0]), g, ctx)
    assert swapped.value <= 1e-12 and swapped.perm == Lo.SWAPPED
    assert fn((0.3 * g[0], 4.0 * g[1]), g, ctx).value <= 1e-12


@given(st.integers(0, 2**31))
def test_pair_loss_swap_symmetry_exact(seed):
    r = np.random.default_rng(seed)
    p, g = _pair(r, 5, 6), _pair(r, 5, 6)
    ctx = LossContext.from_mask(r.random((5, 6)) < 0.9)
    for fn in (shading_loss, separation_loss):
        a = fn(p, g, ctx)
        b = fn((p[1], p[0]), g, ctx)
        assert a.value == b.value
        assert a.value >= 0


def test_tie_goes_to_identity():
    g = (np.ones((4, 4, 3)), np.ones((4, 4, 3)))
    res = shading_loss(g, g, LossContext.from_mask(np.ones((4, 4), bool)))
    assert res.perm == Lo.IDENTITY


def test_shading_loss_l2_norm_variant(rng):
    p, g = _pair(rng), _pair(rng)
    ctx = LossContext.from_mask(np.ones((4, 4), bool))
    assert shading_loss(p, g, ctx, norm="l2").value != shading_loss(p, g, ctx).value
    with pytest.raises(ValueError):
        shading_loss(p, g, ctx, norm="huber")


# --- masking ---------------------------------------------------------------------------

@given(st.integers(0, 2**31))
def test_masked_pixels_have_no_influence(seed):
    r = np.random.default_rng(seed)
    h, w = 7, 6
    mask = r.random((h, w)) < 0.7
    mask[0, 0] = True
    ctx = LossContext.from_mask(mask)
    gt_a = r.dirichlet(np.ones(3), size=(h, w))
    pa = r.dirichlet(np.ones(3), size=(h, w))
    p, g = _pair(r, h, w), _pair(r, h, w)
    base = [chrom_loss(pa, gt_a, ctx), shading_loss(p, g, ctx), separation_loss(p, g, ctx)]
    noise = lambda a: np.where(mask[..., None], a, a + r.uniform(0.1, 5, a.shape))
    pert = [chrom_loss(noise(pa), noise(gt_a), ctx),
            shading_loss(tuple(map(noise, p)), tuple(map(noise, g)), ctx),
            separation_loss(tuple(map(noise, p)), tuple(map(noise, g)), ctx)]
    for a, b in zip(base, pert):
        assert a.value == b.value
    assert not base[0].grad[~mask].any()
    for gr in base[1].grad + base[2].grad:
        assert not gr[~mask].any()


# --- evaluation metric -----------------------------------------------------------------

def test_eval_metric_examples(rng):
    g = _pair(rng, 6, 6)
    m = np.ones((6, 6), bool)
    assert eval_metric(g, g, m) == 0
    assert eval_metric((2 * g[0], 2 * g[1]), g, m) <= 1e-15
    p = _pair(rng, 6, 6)
    assert eval_metric(p, g, m) == eval_metric((p[1], p[0]), g, m)
    assert eval_metric((2 * g[0], 2 * g[1]), g, m, scale_align=False) > 0.1
    with pytest.raises(EmptyMask):
        eval_metric(g, g, np.zeros((6, 6), bool))


def test_eval_metric_brute_force(rng):
    p, g = _pair(rng, 3, 3), _pair(rng, 3, 3)
    m = rng.random((3, 3)) < 0.8
    m[1, 1] = True

    def E(a, b):
        av, bv = a[m].ravel(), b[m].ravel()
        c = av @ bv / (av @ av)
        return np.mean([abs(c * x - y) for x, y in zip(av, bv)])

    want = min(E(p[0], g[0]) + E(p[1], g[1]), E(p[0], g[1]) + E(p[1], g[0]))
    assert eval_metric(p, g, m) == pytest.approx(want, rel=1e-12)


def test_eval_metric_zero_prediction(rng):
    g = _pair(rng, 4, 4)
    m = np.ones((4, 4), bool)
    z = np.zeros((4, 4, 3))
    # a black prediction is compared unscaled: the error is the mean of the truth
    assert eval_metric((g[0] + g[1], z), g, m) > 0
    assert Lo.image_error(z, g[0], m) == pytest.approx(g[0].mean())


def test_chrom_error():
    a = np.full((2, 2, 3), 1 / 3)
    b = a.copy()
    b[0, 0] = [1, 0, 0]
    m = np.ones((2, 2), bool)
    assert Lo.chrom_error(a, b, m) == pytest.approx((2 / 3 + 1 / 3 + 1 / 3) / 12)
    m[0, 0] = False
    assert Lo.chrom_error(a, b, m) == 0
