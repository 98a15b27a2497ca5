"""Forward two-light image formation and the synthetic data generators.

A Lambertian pixel lit by two lights of RGB chromaticity ``l1``, ``l2``
observes ``I = R * (lam1 * l1 + lam2 * l2)``; the per-light images are
``R * lam_k * l_k``. Everything here produces :class:`SceneSample` bundles
with exact ground truth for training and evaluation.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import imgcore
from .imgcore import chromaticity, valid_mask

log = logging.getLogger(__name__)

LIGHT_CHANNEL_RANGE = (0.15, 0.7)
DEFAULT_FLASH_CHROM = (1 / 3, 1 / 3, 1 / 3)
SIMPLEX_ATOL = 1e-6


class FormationError(ValueError):
    pass


@dataclass(frozen=True)
class LightPair:
    l1: np.ndarray
    l2: np.ndarray

    def __post_init__(self):
        for name in ("l1", "l2"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.shape != (3,) or np.any(v < 0) or abs(v.sum() - 1.0) > SIMPLEX_ATOL:
                raise FormationError(f"{name}={v} is not an RGB chromaticity")
            object.__setattr__(self, name, v)
        if self.separation <= 0:
            raise FormationError("the two lights must have distinct chromaticities")

    @property
    def separation(self) -> float:
        return float(np.abs(self.l1 - self.l2).sum())

    def swapped(self) -> "LightPair":
        return LightPair(self.l2, self.l1)

    def to_json(self) -> dict:
        return {"l1": self.l1.tolist(), "l2": self.l2.tolist()}


@dataclass(frozen=True)
class ShadingField:
    lambda1: np.ndarray
    lambda2: np.ndarray

    def relative(self) -> tuple[np.ndarray, np.ndarray]:
        total = self.lambda1 + self.lambda2
        safe = np.where(total > 0, total, 1.0)
        z1 = np.where(total > 0, self.lambda1 / safe, 0.5)
        return z1, 1.0 - z1


@dataclass
class SceneSample:
    input: np.ndarray
    albedo_chrom: np.ndarray
    shadings: tuple[np.ndarray, np.ndarray]
    separated: tuple[np.ndarray, np.ndarray]
    mask: np.ndarray
    lights: LightPair | None = None
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.input.shape[:2]


def check_sample(sample: SceneSample, atol: float = 1e-6) -> None:
    """Raise FormationError if ``sample`` violates a SceneSample invariant."""
    img = imgcore.as_linear_image(sample.input)
    h, w = img.shape[:2]
    for arr in (sample.albedo_chrom, *sample.shadings, *sample.separated):
        if arr.shape != (h, w, 3):
            raise FormationError(f"component shape {arr.shape} != {(h, w, 3)}")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise FormationError("component has negative or non-finite values")
    if sample.mask.shape != (h, w):
        raise FormationError("mask shape mismatch")
    if not imgcore.is_chromaticity_map(sample.albedo_chrom):
        raise FormationError("albedo chromaticity off the simplex")
    recon = sample.separated[0] + sample.separated[1]
    if np.abs(recon - img).max() > atol:
        raise FormationError("input is not the sum of the separated images")


def render_two_light(albedo, shadings: ShadingField, lights: LightPair, tau: float = imgcore.DEFAULT_MASK_TAU) -> SceneSample:
    albedo = imgcore.as_linear_image(albedo)
    lam1 = np.asarray(shadings.lambda1, dtype=np.float64)
    lam2 = np.asarray(shadings.lambda2, dtype=np.float64)
    if lam1.shape != albedo.shape[:2] or lam2.shape != albedo.shape[:2]:
        raise FormationError(f"shading maps {lam1.shape}/{lam2.shape} do not match albedo {albedo.shape[:2]}")
    sep1 = albedo * lam1[..., None] * lights.l1
    sep2 = albedo * lam2[..., None] * lights.l2
    img = sep1 + sep2
    alpha, _ = chromaticity(albedo)
    z1, z2 = shadings.relative()
    s1 = z1[..., None] * lights.l1
    s2 = z2[..., None] * lights.l2
    mask = valid_mask(img, tau) & ((lam1 + lam2) > 0)
    return SceneSample(img, alpha, (s1, s2), (sep1, sep2), mask, lights)


def sample_light(rng: np.random.Generator, lo: float = LIGHT_CHANNEL_RANGE[0], hi: float = LIGHT_CHANNEL_RANGE[1], max_tries: int = 10000) -> np.ndarray:
    """Uniform draw from the simplex restricted to ``lo <= channel <= hi``."""
    for _ in range(max_tries):
        v = rng.dirichlet(np.ones(3))
        if np.all(v >= lo) and np.all(v <= hi):
            return v
    raise FormationError(f"could not sample a light with channels in [{lo}, {hi}]")


def sample_light_pair(rng: np.random.Generator, min_sep: float, max_tries: int = 1000) -> LightPair:
    for _ in range(max_tries):
        l1 = sample_light(rng)
        l2 = sample_light(rng)
        if np.abs(l1 - l2).sum() >= min_sep:
            return LightPair(l1, l2)
    raise FormationError(f"no light pair with separation >= {min_sep} after {max_tries} tries")


@dataclass(frozen=True)
class SynthParams:
    size: int = 64
    # None keeps the edge density of 8 regions per 64x64 at any size
    n_albedo_regions: int | None = None
    blob_count: int = 4
    min_sep: float = 0.1
    ambient: float = 0.15
    # hard shadows cast per light; z hits 0 or 1 inside them
    shadow_count: int = 2
    min_shadow_frac: float = 0.03
    albedo_range: tuple[float, float] = (0.1, 1.0)
    brightness_range: tuple[float, float] = (0.6, 1.6)
    noise: float = 0.0
    tau: float = imgcore.DEFAULT_MASK_TAU
    max_tries: int = 50

    def regions(self) -> int:
        if self.n_albedo_regions is not None:
            return self.n_albedo_regions
        return max(2, int(round(8 * (self.size / 64) ** 2)))

    def to_json(self) -> dict:
        return asdict(self)


def _voronoi_albedo(rng, size, n_regions, lo, hi) -> np.ndarray:
    seeds = rng.uniform(0, size, size=(n_regions, 2))
    colors = rng.uniform(lo, hi, size=(n_regions, 3))
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    d2 = (yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2
    return colors[np.argmin(d2, axis=2)]


def _blob_field(rng, size, count, ambient) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    out = np.full((size, size), ambient)
    for _ in range(count):
        cy, cx = rng.uniform(0, size, 2)
        sigma = rng.uniform(0.15, 0.5) * size
        amp = rng.uniform(0.3, 1.0)
        out += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    return out / out.max()


def _disc_shadows(rng, size, count) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    out = np.zeros((size, size), dtype=bool)
    for _ in range(count):
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(0.08, 0.22) * size
        out |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    return out


def _shadow_pair(rng, size, count, min_frac, max_tries):
    if count == 0:
        z = np.zeros((size, size), dtype=bool)
        return z, z
    for _ in range(max_tries):
        sh1 = _disc_shadows(rng, size, count)
        sh2 = _disc_shadows(rng, size, count) & ~sh1
        if sh1.mean() >= min_frac and sh2.mean() >= min_frac:
            return sh1, sh2
    raise FormationError("could not place shadows covering the requested fraction")


def synth_scene(seed: int, params: SynthParams = SynthParams()) -> SceneSample:
    """Procedural two-light scene: Voronoi albedo, blob shading, hard shadows.

    Deterministic in ``seed``.
    """
    if params.size < 16:
        raise FormationError("size must be >= 16")
    if params.regions() < 2:
        raise FormationError("need at least two albedo regions")
    rng = np.random.default_rng(seed)
    n = params.size
    lights = sample_light_pair(rng, params.min_sep)
    albedo = _voronoi_albedo(rng, n, params.regions(), *params.albedo_range)
    lam1 = _blob_field(rng, n, params.blob_count, params.ambient)
    lam2 = _blob_field(rng, n, params.blob_count, params.ambient)
    sh1, sh2 = _shadow_pair(rng, n, params.shadow_count, params.min_shadow_frac, params.max_tries)
    lam1 = np.where(sh1, 0.0, lam1) * rng.uniform(*params.brightness_range)
    lam2 = np.where(sh2, 0.0, lam2) * rng.uniform(*params.brightness_range)
    sample = render_two_light(albedo, ShadingField(lam1, lam2), lights, params.tau)
    if params.noise > 0:
        noisy = sample.input + rng.normal(0.0, params.noise, sample.input.shape)
        noisy = np.where(sample.input > 0, np.clip(noisy, 0.0, None), 0.0)
        # keep input == sep1 + sep2 by pushing the noise into both layers proportionally
        ratio = np.divide(noisy, sample.input, out=np.ones_like(noisy), where=sample.input > 0)
        sample = SceneSample(noisy, sample.albedo_chrom, sample.shadings,
                             (sample.separated[0] * ratio, sample.separated[1] * ratio),
                             sample.mask, lights)
    sample.meta = {"seed": int(seed), "generator": "synth", "params": params.to_json(),
                   "lights": lights.to_json()}
    return sample


def synth_single_light_scene(seed: int, n_lights: int = 4, params: SynthParams = SynthParams()) -> tuple[list[np.ndarray], np.ndarray]:
    """One albedo rendered under ``n_lights`` separate lights, each with its own shading and shadows.

    Returns the single-light images and the albedo chromaticity.
    """
    rng = np.random.default_rng(seed)
    n = params.size
    albedo = _voronoi_albedo(rng, n, params.regions(), *params.albedo_range)
    singles = []
    for _ in range(n_lights):
        light = sample_light(rng)
        lam = _blob_field(rng, n, params.blob_count, params.ambient)
        if params.shadow_count:
            lam = np.where(_disc_shadows(rng, n, params.shadow_count), 0.0, lam)
        lam = lam * rng.uniform(*params.brightness_range)
        singles.append(albedo * lam[..., None] * light)
    alpha, _ = chromaticity(albedo)
    return singles, alpha


def shadings_from_separated(separated, alpha, eps: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Per-light illuminant shadings implied by known separated images and albedo chromaticity.

    With ``sep_k = R * lam_k * l_k`` and ``alpha = R / sum(R)``, dividing by
    alpha leaves ``sum(R) * lam_k * l_k``; normalising by the total over
    channels and lights gives ``z_k * l_k``.
    """
    a = np.maximum(alpha, eps)
    b1 = separated[0] / a
    b2 = separated[1] / a
    total = (b1 + b2).sum(axis=2, keepdims=True)
    safe = np.where(total > 0, total, 1.0)
    s1 = np.where(total > 0, b1 / safe, 0.0)
    s2 = np.where(total > 0, b2 / safe, 0.0)
    return s1, s2


def _global_chromaticity(img, mask) -> np.ndarray:
    rgb = img[mask].sum(axis=0) if mask.any() else img.reshape(-1, 3).sum(axis=0)
    s = rgb.sum()
    return rgb / s if s > 0 else np.asarray(imgcore.NEUTRAL)


def compose_flash_pair(flash, noflash, recolor, gain: float = 1.0,
                       flash_chrom=DEFAULT_FLASH_CHROM, tau: float = imgcore.DEFAULT_MASK_TAU,
                       eps: float = 1e-6) -> SceneSample:
    """Turn a flash/no-flash pair into a two-light sample by adding a recoloured flash back in."""
    flash = imgcore.as_linear_image(flash)
    noflash = imgcore.as_linear_image(noflash)
    if flash.shape != noflash.shape:
        raise FormationError(f"flash {flash.shape} and no-flash {noflash.shape} differ in size")
    recolor = np.asarray(recolor, dtype=np.float64)
    flash_chrom = np.asarray(flash_chrom, dtype=np.float64)
    if gain < 0:
        raise FormationError("gain must be non-negative")
    pure = np.maximum(flash - noflash, 0.0)
    pure_mask = valid_mask(pure, tau)
    if not pure_mask.any():
        raise FormationError("no flash signal: pure flash image is black")
    alpha, alpha_ok = chromaticity(pure, eps)
    light2 = gain * recolor * (pure / flash_chrom)
    img = noflash + light2
    separated = (noflash.copy(), light2)
    shadings = shadings_from_separated(separated, alpha)
    mask = pure_mask & alpha_ok & valid_mask(img, tau)
    lights = None
    ambient = _global_chromaticity(noflash, mask)
    rc = recolor / recolor.sum()
    if np.abs(ambient - rc).sum() > 0:
        lights = LightPair(ambient, rc)
    return SceneSample(img, alpha, shadings, separated, mask, lights,
                       meta={"generator": "compose", "recolor": recolor.tolist(), "gain": float(gain),
                             "flash_chrom": flash_chrom.tolist()})


def gray_world(img, mask=None) -> np.ndarray:
    """Global illuminant chromaticity under the gray-world assumption."""
    img = np.asarray(img, dtype=np.float64)
    if mask is None:
        mask = valid_mask(img)
    return _global_chromaticity(img, mask)


def white_balance(img, mask=None) -> np.ndarray:
    """Divide out the gray-world illuminant; a neutral illuminant maps to identity."""
    est = gray_world(img, mask)
    return np.asarray(img) / (3.0 * est)


def modulate(img, light) -> np.ndarray:
    """Tint a white-balanced image by a light chromaticity (x3, so neutral is identity)."""
    return np.asarray(img) * (3.0 * np.asarray(light, dtype=np.float64))


def make_benchmark(singles: list[list[np.ndarray]], colors: list[LightPair], count: int,
                   alphas: list[np.ndarray] | None = None, seed: int = 0, replace: bool = True,
                   tau: float = imgcore.DEFAULT_MASK_TAU) -> list[SceneSample]:
    """Build two-light test samples from single-light renders.

    Each sample picks a scene, two of its single-light images and a light
    pair; both images are white balanced, tinted with the pair's colours
    and summed. Scenes are drawn with replacement unless ``replace`` is
    False, in which case ``count`` may not exceed the number of scenes.
    """
    if not singles:
        raise FormationError("no scenes given")
    if not colors:
        raise FormationError("no light colours given")
    for i, group in enumerate(singles):
        if len(group) < 2:
            raise FormationError(f"scene {i} has fewer than two single-light images")
    if not replace and count > len(singles):
        raise FormationError(f"asked for {count} samples from {len(singles)} scenes without replacement")
    rng = np.random.default_rng(seed)
    order = rng.choice(len(singles), size=count, replace=replace)
    out = []
    for k, si in enumerate(order):
        group = singles[si]
        a, b = rng.choice(len(group), size=2, replace=False)
        pair = colors[rng.integers(len(colors))]
        wb1 = white_balance(group[a])
        wb2 = white_balance(group[b])
        sep1 = modulate(wb1, pair.l1)
        sep2 = modulate(wb2, pair.l2)
        img = sep1 + sep2
        if alphas is not None:
            alpha = alphas[si]
        else:
            alpha, _ = chromaticity(wb1)
        shadings = shadings_from_separated((sep1, sep2), alpha)
        mask = valid_mask(img, tau)
        out.append(SceneSample(img, alpha, shadings, (sep1, sep2), mask, pair,
                               meta={"generator": "benchmark", "scene": int(si), "singles": [int(a), int(b)],
                                     "index": k, "seed": int(seed), "lights": pair.to_json()}))
    return out
