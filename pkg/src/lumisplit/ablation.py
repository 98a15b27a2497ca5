"""Desk-scale ablation: train the supervision variants and score them on a held-out benchmark.

Rows follow the variant list Chrom-Only, Final-Only, Full-Direct,
Full+physics and SingleNet, plus an oracle row that feeds the true
reflectance chromaticity to the physics separation. Only two checks are
hard failures: the oracle must beat every learned variant, and every
physics-mode output must conserve the input. Whether Full+physics beats
Full-Direct is reported but not enforced.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import losses, physsep
from .formation import SceneSample, SynthParams, make_benchmark, sample_light_pair, synth_scene, synth_single_light_scene
from .nn.train import ConfigError, Model, TrainConfig, infer, predict_alpha, train

log = logging.getLogger(__name__)

CONSERVATION_TOL = 1e-6

# (row label, training mode, inference mode)
VARIANTS = (
    ("Chrom-Only", "chrom_only", "physics"),
    ("Final-Only", "final_only", "direct"),
    ("Full-Direct", "full", "direct"),
    ("Full+physics", "full", "physics"),
    ("SingleNet", "singlenet", "direct"),
)
ORACLE = "Oracle-alpha+physics"


@dataclass
class AblationConfig:
    seed: int = 0
    size: int = 32
    n_train: int = 64
    steps: int = 300
    batch: int = 4
    lr: float = 5e-4
    n_scenes: int = 8
    n_test: int = 16
    n_colors: int = 8

    @classmethod
    def from_dict(cls, d: dict) -> "AblationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ablation keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def training_set(cfg: AblationConfig) -> list[SceneSample]:
    params = SynthParams(size=cfg.size)
    return [synth_scene(cfg.seed * 100003 + k, params) for k in range(cfg.n_train)]


def benchmark_set(cfg: AblationConfig) -> list[SceneSample]:
    """Held-out two-light samples assembled from single-light renders."""
    params = SynthParams(size=cfg.size)
    base = 10**6 + cfg.seed * 1009
    singles, alphas = [], []
    for k in range(cfg.n_scenes):
        s, a = synth_single_light_scene(base + k, 4, params)
        singles.append(s)
        alphas.append(a)
    rng = np.random.default_rng([cfg.seed, 23])
    colors = [sample_light_pair(rng, params.min_sep) for _ in range(cfg.n_colors)]
    return make_benchmark(singles, colors, cfg.n_test, alphas=alphas, seed=cfg.seed)


@dataclass
class Row:
    variant: str
    mode: str
    inference: str
    sep_metric: float
    chrom_l1: float | None
    conservation: float
    fit_failures: int = 0
    per_sample: list[float] = field(default_factory=list)


@dataclass
class AblationReport:
    rows: list[Row]
    checks: dict[str, bool]
    config: dict

    @property
    def passed(self) -> bool:
        return self.checks["oracle_beats_learned"] and self.checks["conservation"]

    def row(self, name: str) -> Row:
        return next(r for r in self.rows if r.variant == name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "mode", "inference", "sep_metric", "chrom_l1", "conservation_max", "fit_failures"])
        for r in self.rows:
            w.writerow([r.variant, r.mode, r.inference, f"{r.sep_metric:.9g}",
                        "" if r.chrom_l1 is None else f"{r.chrom_l1:.9g}", f"{r.conservation:.9g}", r.fit_failures])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {"config": self.config, "checks": self.checks, "passed": self.passed,
                "rows": [asdict(r) for r in self.rows]}

    def table(self) -> str:
        lines = [f"{'variant':<22} {'sep metric':>11} {'chrom L1':>10} {'conserv.':>10}"]
        for r in self.rows:
            ch = "-" if r.chrom_l1 is None else f"{r.chrom_l1:.4f}"
            lines.append(f"{r.variant:<22} {r.sep_metric:>11.4f} {ch:>10} {r.conservation:>10.2e}")
        for k, v in self.checks.items():
            lines.append(f"check {k}: {'PASS' if v else 'FAIL'}")
        return "\n".join(lines)


def _conservation(img, images, unclamped) -> float:
    err = np.abs(img - (images[0] + images[1])).max(axis=2)
    return float(err[unclamped].max()) if unclamped.any() else 0.0


def _score(samples, separate) -> tuple[float, float | None, float, int, list[float]]:
    metrics, chroms, cons, failures = [], [], 0.0, 0
    for s in samples:
        images, alpha, unclamped, failed = separate(s)
        failures += failed
        metrics.append(losses.eval_metric(images, s.separated, s.mask))
        if alpha is not None:
            chroms.append(losses.chrom_error(alpha, s.albedo_chrom, s.mask))
        if unclamped is not None:
            cons = max(cons, _conservation(s.input, images, unclamped))
    chrom = float(np.mean(chroms)) if chroms else None
    return float(np.mean(metrics)), chrom, cons, failures, metrics


def _physics(img, alpha):
    """Physics separation; a failed fit falls back to the single-light answer (I, 0)."""
    try:
        sep = physsep.separate_with_chrom(img, alpha)
        return sep.images, sep.unclamped, 0
    except physsep.FitError:
        return (img.copy(), np.zeros_like(img)), np.ones(img.shape[:2], bool), 1


def run_ablation(cfg: AblationConfig = AblationConfig(), models: dict[str, Model] | None = None) -> AblationReport:
    train_set = training_set(cfg)
    bench = benchmark_set(cfg)
    models = dict(models or {})
    for mode in ("chrom_only", "final_only", "full", "singlenet"):
        if mode not in models:
            tc = TrainConfig(mode=mode, steps=cfg.steps, batch=cfg.batch, seed=cfg.seed, lr=cfg.lr)
            log.info("training %s for %d steps", mode, cfg.steps)
            models[mode] = train(tc, train_set).model

    rows = []
    for label, mode, how in VARIANTS:
        model = models[mode]

        def run(s, model=model, how=how):
            if how == "physics":
                alpha = predict_alpha(model, s.input)
                images, unclamped, failed = _physics(s.input, alpha)
                return images, alpha, unclamped, failed
            out = infer(model, s.input, "direct")
            return out.images, out.alpha, None, 0

        metric, chrom, cons, fails, per = _score(bench, run)
        rows.append(Row(label, mode, how, metric, chrom, cons, fails, per))

    def oracle(s):
        images, unclamped, failed = _physics(s.input, s.albedo_chrom)
        return images, s.albedo_chrom, unclamped, failed

    metric, chrom, cons, fails, per = _score(bench, oracle)
    rows.append(Row(ORACLE, "oracle", "physics", metric, chrom, cons, fails, per))

    learned = [r for r in rows if r.variant != ORACLE]
    oracle_row = rows[-1]
    physics_rows = [r for r in rows if r.inference == "physics"]
    checks = {
        "oracle_beats_learned": all(oracle_row.sep_metric < r.sep_metric for r in learned),
        "conservation": all(r.conservation <= CONSERVATION_TOL for r in physics_rows),
        "full_physics_le_full_direct": rows[3].sep_metric <= rows[2].sep_metric,
    }
    return AblationReport(rows, checks, cfg.to_dict())
