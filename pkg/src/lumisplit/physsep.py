"""Physics-based two-light separation from an image and its albedo chromaticity.

Pipeline: divide out albedo chromaticity, normalise to shading
chromaticity, fit a line segment between the two light chromaticities,
read off the relative shading of each pixel along that segment, and split
the input image proportionally.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import imgcore
from .formation import LightPair

log = logging.getLogger(__name__)

ALPHA_EPS = 1e-3
SHADING_EPS = 1e-6
SUM_EPS = 1e-9
TUKEY_C = 0.05
IRLS_ITERS = 10
PERCENTILES = (2.0, 98.0)
DEGENERATE_SPREAD = 0.02
MIN_VALID = 100


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class DescaledImage:
    beta: np.ndarray
    clamped: np.ndarray  # H x W x 3 bool, True where alpha hit the eps floor


@dataclass(frozen=True)
class TwoIlluminantFit:
    lights: LightPair | None
    l1: np.ndarray
    l2: np.ndarray
    z: np.ndarray
    inlier_mask: np.ndarray
    residual_rms: float
    degenerate: bool
    t_range: tuple[float, float] = (0.0, 0.0)

    def to_json(self) -> dict:
        return {"l1": self.l1.tolist(), "l2": self.l2.tolist(), "residual_rms": self.residual_rms,
                "degenerate": self.degenerate, "inliers": int(self.inlier_mask.sum()),
                "t_range": list(self.t_range)}


def descale(img, alpha, eps: float = ALPHA_EPS) -> DescaledImage:
    if eps <= 0:
        raise ValueError("eps must be positive")
    img = np.asarray(img, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if img.shape != alpha.shape:
        raise ValueError(f"image {img.shape} and alpha {alpha.shape} differ")
    clamped = alpha < eps
    return DescaledImage(img / np.maximum(alpha, eps), clamped)


def shading_chromaticity(beta: DescaledImage | np.ndarray, eps: float = SUM_EPS) -> tuple[np.ndarray, np.ndarray]:
    b = beta.beta if isinstance(beta, DescaledImage) else np.asarray(beta, dtype=np.float64)
    return imgcore.chromaticity(b, eps)


def _tukey(r: np.ndarray, c: float) -> np.ndarray:
    u = r / c
    return np.where(np.abs(u) < 1.0, (1.0 - u * u) ** 2, 0.0)


def _weighted_tls(pts: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Weighted total-least-squares line: returns (centroid, unit direction)."""
    sw = w.sum()
    if sw <= 0:
        raise FitError("all fit weights vanished")
    mu = (w[:, None] * pts).sum(axis=0) / sw
    d = pts - mu
    cov = (w[:, None, None] * d[:, :, None] * d[:, None, :]).sum(axis=0) / sw
    _, vecs = np.linalg.eigh(cov)
    u = vecs[:, -1]
    # canonical orientation so the fit is deterministic
    k = int(np.argmax(np.abs(u)))
    if u[k] < 0:
        u = -u
    return mu, u


def irls_line(pts: np.ndarray, weights: np.ndarray, c: float = TUKEY_C, iters: int = IRLS_ITERS):
    """Robust 2-d line fit: Tukey-reweighted total least squares.

    Returns (centroid, direction, perpendicular residuals, robust weights).
    """
    w = weights.astype(np.float64)
    mu, u = _weighted_tls(pts, w)
    normal = np.array([-u[1], u[0]])
    for _ in range(iters):
        r = (pts - mu) @ normal
        rw = _tukey(r, c)
        if (rw * weights).sum() <= 0:
            break
        mu, u = _weighted_tls(pts, rw * weights)
        normal = np.array([-u[1], u[0]])
    r = (pts - mu) @ normal
    return mu, u, r, _tukey(r, c)


def ransac_line(pts: np.ndarray, weights: np.ndarray, c: float = TUKEY_C, iters: int = 200, seed: int = 0):
    """Pick the two-point line with the largest weighted inlier mass, then refine with IRLS."""
    rng = np.random.default_rng(seed)
    n = len(pts)
    best, best_score = None, -1.0
    for _ in range(iters):
        i, j = rng.choice(n, size=2, replace=False)
        d = pts[j] - pts[i]
        nd = np.hypot(*d)
        if nd < 1e-9:
            continue
        normal = np.array([-d[1], d[0]]) / nd
        score = weights[np.abs((pts - pts[i]) @ normal) < c].sum()
        if score > best_score:
            best, best_score = (i, normal), score
    if best is None:
        return irls_line(pts, weights, c)
    i, normal = best
    inl = np.abs((pts - pts[i]) @ normal) < c
    return irls_line(pts, weights * inl, c)


def _lift(rg: np.ndarray) -> np.ndarray:
    v = np.array([rg[0], rg[1], 1.0 - rg[0] - rg[1]])
    v = np.clip(v, 0.0, None)
    return v / v.sum()


def fit_two_illuminant(gamma, weights=None, mask=None, *, tukey_c: float = TUKEY_C, iters: int = IRLS_ITERS,
                       percentiles=PERCENTILES, degenerate_spread: float = DEGENERATE_SPREAD,
                       min_valid: int = MIN_VALID, robust: str = "irls", seed: int = 0) -> TwoIlluminantFit:
    """Fit the two-light segment model to shading chromaticities.

    ``gamma`` is projected onto its (r, g) coordinates, a robust line is
    fitted, and the light chromaticities are placed at low/high
    percentiles of the inliers' position along the line. ``z`` is the
    clamped position of each pixel between the two endpoints (1 at ``l1``).
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    h, w = gamma.shape[:2]
    if mask is None:
        mask = np.ones((h, w), dtype=bool)
    if weights is None:
        weights = np.ones((h, w))
    mask = np.asarray(mask, dtype=bool) & np.isfinite(gamma).all(axis=2)
    n_valid = int(mask.sum())
    if n_valid < min_valid:
        raise FitError(f"too few valid pixels for a fit ({n_valid} < {min_valid})")
    pts = gamma[mask][:, :2]
    wv = np.asarray(weights, dtype=np.float64)[mask]
    if wv.sum() <= 0:
        wv = np.ones_like(wv)
    if robust == "ransac":
        mu, u, resid, rw = ransac_line(pts, wv, tukey_c, seed=seed)
    elif robust == "irls":
        mu, u, resid, rw = irls_line(pts, wv, tukey_c, iters)
    else:
        raise ValueError(f"unknown robust method {robust!r}")
    t = (pts - mu) @ u
    inl = rw > 0
    if not inl.any():
        inl = np.ones_like(inl)
    t_lo, t_hi = np.percentile(t[inl], percentiles)
    spread = float(t_hi - t_lo)

    z_full = np.ones((h, w))
    inlier_mask = np.zeros((h, w), dtype=bool)
    inlier_mask[mask] = inl
    if spread < degenerate_spread:
        l1 = _lift(mu + u * np.median(t[inl]))
        z_full[:] = 1.0
        resid_vec = gamma[mask][inl] - l1
        rms = float(np.sqrt((resid_vec**2).sum(axis=1).mean()))
        return TwoIlluminantFit(None, l1, l1.copy(), z_full, inlier_mask, rms, True, (float(t_lo), float(t_hi)))

    l1 = _lift(mu + u * t_hi)
    l2 = _lift(mu + u * t_lo)
    t_all = (gamma[..., :2] - mu) @ u
    z_full = np.clip((t_all - t_lo) / spread, 0.0, 1.0)
    recon = z_full[..., None] * l1 + (1.0 - z_full[..., None]) * l2
    err = (gamma - recon)[inlier_mask]
    rms = float(np.sqrt((err**2).sum(axis=1).mean())) if len(err) else 0.0
    lights = LightPair(l1, l2) if np.abs(l1 - l2).sum() > 0 else None
    return TwoIlluminantFit(lights, l1, l2, z_full, inlier_mask, rms, False, (float(t_lo), float(t_hi)))


def illuminant_shadings(fit: TwoIlluminantFit) -> tuple[np.ndarray, np.ndarray]:
    z = fit.z[..., None]
    return z * fit.l1, (1.0 - z) * fit.l2


def separate(img, s1, s2, eps: float = SHADING_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Split ``img`` channel-wise in proportion to the two illuminant shadings."""
    img = np.asarray(img, dtype=np.float64)
    if not (img.shape == np.shape(s1) == np.shape(s2)):
        raise ValueError("image and shading shapes differ")
    denom = np.maximum(s1 + s2, eps)
    return img * s1 / denom, img * s2 / denom


@dataclass(frozen=True)
class Separation:
    images: tuple[np.ndarray, np.ndarray]
    fit: TwoIlluminantFit
    shadings: tuple[np.ndarray, np.ndarray]
    gamma: np.ndarray
    unclamped: np.ndarray  # H x W bool, pixels where no division guard kicked in


def separate_with_chrom(img, alpha, *, alpha_eps: float = ALPHA_EPS, shading_eps: float = SHADING_EPS,
                        tau: float = imgcore.DEFAULT_MASK_TAU, **fit_kwargs) -> Separation:
    """Full pipeline: descale, shading chromaticity, fit, shadings, split."""
    img = imgcore.as_linear_image(img)
    beta = descale(img, alpha, alpha_eps)
    gamma, gamma_ok = shading_chromaticity(beta)
    clamped_px = beta.clamped.any(axis=2)
    fit_mask = gamma_ok & ~clamped_px & imgcore.valid_mask(img, tau)
    lum = img.mean(axis=2)
    fit = fit_two_illuminant(gamma, lum, fit_mask, **fit_kwargs)
    s1, s2 = illuminant_shadings(fit)
    if fit.degenerate:
        out = (img.copy(), np.zeros_like(img))
        unclamped = np.ones(img.shape[:2], dtype=bool)
    else:
        out = separate(img, s1, s2, shading_eps)
        unclamped = ((s1 + s2) > shading_eps).all(axis=2)
    return Separation(out, fit, (s1, s2), gamma, unclamped)
