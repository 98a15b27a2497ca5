"""Model assembly, supervised training, checkpoints and inference.

Four supervision regimes are supported:

``chrom_only``  ChromNet trained on the chromaticity loss alone.
``final_only``  the full cascade trained only on the separated images.
``full``        the cascade with chromaticity, shading and separation losses.
``singlenet``   one U-Net mapping the image straight to two images.

Batches are drawn statelessly from ``(seed, step)`` so a run resumed from
a checkpoint replays exactly the same data.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .. import losses, physsep
from ..formation import SceneSample
from .adam import AdamState, adam_step
from .nets import BUILDERS, split_pair
from .tensor import NumericError, Tensor, concat, external, scale, set_nan_check, total

log = logging.getLogger(__name__)

MODES = ("chrom_only", "final_only", "full", "singlenet")
MODE_ROLES = {
    "chrom_only": ("chromnet",),
    "final_only": ("chromnet", "shadingnet", "separatenet"),
    "full": ("chromnet", "shadingnet", "separatenet"),
    "singlenet": ("singlenet",),
}
CHECKPOINT_FORMAT = 1


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    mode: str = "full"
    lr: float = 5e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps_adam: float = 1e-8
    epochs: int = 40
    lr_drop_epoch: int = 35
    steps: int | None = None
    batch: int = 4
    seed: int = 0
    w_alpha: float = 1.0
    w_shading: float = 1.0
    w_sep: float = 1.0
    levels: int = 3
    flips: bool = True
    scale_grad: bool = False
    nan_check: bool = False
    width: int = 16

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.batch < 1 or self.epochs < 1:
            raise ConfigError("batch and epochs must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def total_steps(self, n_samples: int) -> int:
        if self.steps is not None:
            return int(self.steps)
        return self.epochs * math.ceil(n_samples / self.batch)

    def lr_at(self, step: int, n_samples: int) -> float:
        drop = round(self.total_steps(n_samples) * self.lr_drop_epoch / self.epochs)
        return self.lr * (0.1 if step >= drop else 1.0)


class Model:
    """The networks a supervision mode needs, built deterministically from a seed."""

    def __init__(self, mode: str, seed: int = 0, dtype=np.float32, width: int = 16):
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}")
        self.mode = mode
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.nets = OrderedDict()
        for role in MODE_ROLES[mode]:
            kw = {} if role == "separatenet" else {"width": width}
            self.nets[role] = BUILDERS[role](rng, dtype=dtype, **kw)

    @property
    def roles(self) -> tuple[str, ...]:
        return tuple(self.nets)

    @property
    def params(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for net in self.nets.values():
            out.update(net.params)
        return out

    def topology(self) -> dict:
        return {role: net.topology for role, net in self.nets.items()}

    def forward(self, x: Tensor) -> dict[str, Tensor]:
        out = {}
        if "singlenet" in self.nets:
            out["images"] = split_pair(self.nets["singlenet"](x))
            return out
        alpha = self.nets["chromnet"](x)
        out["alpha"] = alpha
        if "shadingnet" in self.nets:
            s = self.nets["shadingnet"](concat([x, alpha]))
            s1, s2 = split_pair(s)
            out["shadings"] = (s1, s2)
            out["images"] = split_pair(self.nets["separatenet"](concat([s1, s2, x])))
        return out


# --- data -------------------------------------------------------------------------

def _chw(a, dtype) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a).transpose(2, 0, 1), dtype=dtype)


@dataclass
class Batch:
    x: np.ndarray
    alpha: np.ndarray
    shadings: tuple[np.ndarray, np.ndarray]
    images: tuple[np.ndarray, np.ndarray]
    contexts: list = field(default_factory=list)


def make_batch(samples: list[SceneSample], flips=None, dtype=np.float32, levels: int = 3) -> Batch:
    xs, al, s1, s2, i1, i2, ctxs = [], [], [], [], [], [], []
    for k, s in enumerate(samples):
        flip = flips is not None and flips[k]

        def f(a):
            return a[:, ::-1] if flip else a

        xs.append(_chw(f(s.input), dtype))
        al.append(_chw(f(s.albedo_chrom), dtype))
        s1.append(_chw(f(s.shadings[0]), dtype))
        s2.append(_chw(f(s.shadings[1]), dtype))
        i1.append(_chw(f(s.separated[0]), dtype))
        i2.append(_chw(f(s.separated[1]), dtype))
        ctxs.append(losses.LossContext.from_mask(np.ascontiguousarray(f(s.mask)), levels))
    st = np.stack
    return Batch(st(xs), st(al), (st(s1), st(s2)), (st(i1), st(i2)), ctxs)


def batch_indices(seed: int, step: int, n: int, batch: int) -> np.ndarray:
    """Indices for ``step``: consecutive slices of a per-epoch shuffled order."""
    start = step * batch
    out = []
    for pos in range(start, start + batch):
        epoch, offset = divmod(pos, n)
        perm = np.random.default_rng([seed, 7, epoch]).permutation(n)
        out.append(perm[offset])
    return np.asarray(out)


def batch_flips(seed: int, step: int, batch: int) -> np.ndarray:
    return np.random.default_rng([seed, 11, step]).random(batch) < 0.5


# --- losses on the graph -----------------------------------------------------------

def _hwc(t: np.ndarray) -> np.ndarray:
    return t.transpose(1, 2, 0)


def _chw_grad(g: np.ndarray) -> np.ndarray:
    return g.transpose(2, 0, 1)


def chrom_term(alpha: Tensor, batch: Batch, scale_grad: bool = False) -> Tensor:
    n = alpha.shape[0]
    value, grads = 0.0, np.zeros(alpha.shape, dtype=np.float64)
    for k in range(n):
        r = losses.chrom_loss(_hwc(alpha.data[k]), _hwc(batch.alpha[k]), batch.contexts[k], scale_grad=scale_grad)
        value += r.value / n
        grads[k] = _chw_grad(r.grad) / n
    return external([alpha], value, [grads])


def pair_term(kind: str, pred: tuple[Tensor, Tensor], gt: tuple[np.ndarray, np.ndarray], batch: Batch,
              scale_grad: bool = False) -> Tensor:
    fn = losses.shading_loss if kind == "shading" else losses.separation_loss
    n = pred[0].shape[0]
    value = 0.0
    g1 = np.zeros(pred[0].shape, dtype=np.float64)
    g2 = np.zeros(pred[1].shape, dtype=np.float64)
    for k in range(n):
        r = fn((_hwc(pred[0].data[k]), _hwc(pred[1].data[k])), (_hwc(gt[0][k]), _hwc(gt[1][k])),
               batch.contexts[k], scale_grad=scale_grad)
        value += r.value / n
        g1[k] = _chw_grad(r.grad[0]) / n
        g2[k] = _chw_grad(r.grad[1]) / n
    return external(list(pred), value, [g1, g2])


def compute_losses(model: Model, batch: Batch, cfg: TrainConfig) -> tuple[Tensor, dict[str, float]]:
    x = Tensor(batch.x)
    out = model.forward(x)
    terms, parts = [], {"alpha": 0.0, "shading": 0.0, "sep": 0.0}
    mode = model.mode
    if mode in ("chrom_only", "full"):
        t = chrom_term(out["alpha"], batch, cfg.scale_grad)
        parts["alpha"] = float(t.data)
        terms.append(_weighted(t, cfg.w_alpha))
    if mode == "full":
        t = pair_term("shading", out["shadings"], batch.shadings, batch, cfg.scale_grad)
        parts["shading"] = float(t.data)
        terms.append(_weighted(t, cfg.w_shading))
    if mode in ("final_only", "full", "singlenet"):
        t = pair_term("sep", out["images"], batch.images, batch, cfg.scale_grad)
        parts["sep"] = float(t.data)
        terms.append(_weighted(t, cfg.w_sep))
    loss = total(terms)
    parts["total"] = float(loss.data)
    return loss, parts


def _weighted(t: Tensor, w: float) -> Tensor:
    return t if w == 1.0 else scale(t, w)


# --- checkpoints ----------------------------------------------------------------------

def _write_f32(path, arr):
    with open(path, "wb") as f:
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_f32(path, shape):
    with open(path, "rb") as f:
        return np.frombuffer(f.read(), dtype="<f4").reshape(shape).astype(np.float32)


def save_checkpoint(path, model: Model, cfg: TrainConfig, state: AdamState, step: int, extra: dict | None = None) -> None:
    os.makedirs(os.path.join(path, "params"), exist_ok=True)
    os.makedirs(os.path.join(path, "adam"), exist_ok=True)
    params = {}
    for name, t in model.params.items():
        fname = f"params/{name}.f32"
        _write_f32(os.path.join(path, fname), t.data)
        entry = {"shape": list(t.shape), "file": fname}
        if name in state.m:
            entry["adam_m"] = f"adam/{name}.m.f32"
            entry["adam_v"] = f"adam/{name}.v.f32"
            _write_f32(os.path.join(path, entry["adam_m"]), state.m[name])
            _write_f32(os.path.join(path, entry["adam_v"]), state.v[name])
        params[name] = entry
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "mode": model.mode,
        "roles": list(model.roles),
        "topology": model.topology(),
        "params": params,
        "step": int(step),
        "adam_t": int(state.t),
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
    }
    if extra:
        manifest["extra"] = extra
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


@dataclass
class Checkpoint:
    model: Model
    config: TrainConfig
    state: AdamState
    step: int
    manifest: dict


def load_checkpoint(path) -> Checkpoint:
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: unsupported checkpoint format {manifest.get('format')}")
    cfg = TrainConfig.from_dict(manifest["config"])
    model = Model(manifest["mode"], seed=cfg.seed, width=cfg.width)
    state = AdamState(t=manifest["adam_t"])
    for name, t in model.params.items():
        entry = manifest["params"].get(name)
        if entry is None or tuple(entry["shape"]) != t.shape:
            raise ConfigError(f"{path}: parameter {name} missing or misshapen")
        t.data = _read_f32(os.path.join(path, entry["file"]), t.shape)
        if "adam_m" in entry:
            state.m[name] = _read_f32(os.path.join(path, entry["adam_m"]), t.shape)
            state.v[name] = _read_f32(os.path.join(path, entry["adam_v"]), t.shape)
    return Checkpoint(model, cfg, state, manifest["step"], manifest)


# --- training loop ------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    state: AdamState
    step: int
    history: list[dict]


LOG_FIELDS = ("step", "alpha", "shading", "sep", "total", "lr")


def train_step(model: Model, state: AdamState, batch: Batch, cfg: TrainConfig, lr: float) -> dict[str, float]:
    params = model.params
    for p in params.values():
        p.zero_grad()
    loss, parts = compute_losses(model, batch, cfg)
    if not np.isfinite(parts["total"]):
        raise NumericError(f"non-finite loss {parts}")
    loss.backward()
    grads = {name: p.grad for name, p in params.items() if p.grad is not None}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    adam_step({n: p.data for n, p in params.items()}, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps_adam)
    return parts


def train(cfg: TrainConfig, dataset: list[SceneSample], out_dir=None, resume=None,
          checkpoint_every: int = 0, log_path=None) -> TrainResult:
    """Train ``cfg.mode`` on ``dataset``; optionally write checkpoints and a CSV metrics log.

    ``resume`` is a :class:`Checkpoint` (or path) to continue from; the data
    order is a pure function of ``(seed, step)`` so resuming is exact.
    """
    if not dataset:
        raise ConfigError("empty dataset")
    set_nan_check(cfg.nan_check)
    if resume is not None:
        ck = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        if ck.model.mode != cfg.mode:
            raise ConfigError(f"checkpoint mode {ck.model.mode} != config mode {cfg.mode}")
        model, state, start = ck.model, ck.state, ck.step
    else:
        model, state, start = Model(cfg.mode, cfg.seed, width=cfg.width), AdamState(), 0
    n = len(dataset)
    steps = cfg.total_steps(n)
    history = []
    writer = None
    logf = None
    if log_path is not None:
        exists = os.path.exists(log_path) and start > 0
        logf = open(log_path, "a" if exists else "w", newline="")
        writer = csv.writer(logf)
        if not exists:
            writer.writerow(LOG_FIELDS)
    try:
        for step in range(start, steps):
            idx = batch_indices(cfg.seed, step, n, cfg.batch)
            flips = batch_flips(cfg.seed, step, cfg.batch) if cfg.flips else None
            batch = make_batch([dataset[i] for i in idx], flips, model.dtype, cfg.levels)
            lr = cfg.lr_at(step, n)
            try:
                parts = train_step(model, state, batch, cfg, lr)
            except NumericError as exc:
                if out_dir is not None:
                    diag = os.path.join(out_dir, "nan_abort")
                    save_checkpoint(diag, model, cfg, state, step, {"error": str(exc)})
                    log.error("numeric failure at step %d, diagnostic checkpoint in %s", step, diag)
                raise
            row = {"step": step, **parts, "lr": lr}
            history.append(row)
            if writer is not None:
                writer.writerow([step] + [f"{row[k]:.9g}" for k in LOG_FIELDS[1:]])
            if checkpoint_every and out_dir is not None and (step + 1) % checkpoint_every == 0:
                save_checkpoint(os.path.join(out_dir, f"step_{step + 1:06d}"), model, cfg, state, step + 1)
    finally:
        if logf is not None:
            logf.close()
        set_nan_check(False)
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "final"), model, cfg, state, steps)
    return TrainResult(model, state, steps, history)


# --- inference ----------------------------------------------------------------------

def _pad_to(img: np.ndarray, mult: int) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = img.shape[:2]
    ph, pw = (-h) % mult, (-w) % mult
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return img, (h, w)


def predict_alpha(model: Model, img) -> np.ndarray:
    if "chromnet" not in model.nets:
        raise ConfigError(f"mode {model.mode} has no chromaticity network")
    x, (h, w) = _pad_to(np.asarray(img, dtype=np.float64), 4)
    out = model.nets["chromnet"](Tensor(_chw(x, model.dtype)[None]))
    return out.data[0].transpose(1, 2, 0)[:h, :w].astype(np.float64)


def predict_direct(model: Model, img) -> tuple[np.ndarray, np.ndarray]:
    if model.mode == "chrom_only":
        raise ConfigError("chrom_only checkpoints can only be used in physics mode")
    x, (h, w) = _pad_to(np.asarray(img, dtype=np.float64), 4)
    out = model.forward(Tensor(_chw(x, model.dtype)[None]))
    i1, i2 = out["images"]
    return (i1.data[0].transpose(1, 2, 0)[:h, :w].astype(np.float64),
            i2.data[0].transpose(1, 2, 0)[:h, :w].astype(np.float64))


@dataclass
class Inference:
    images: tuple[np.ndarray, np.ndarray]
    alpha: np.ndarray | None = None
    fit: physsep.TwoIlluminantFit | None = None


def infer(checkpoint, img, mode: str = "physics") -> Inference:
    """Separate ``img`` with a trained model.

    ``direct`` runs the whole learned pipeline; ``physics`` takes only the
    predicted chromaticity and hands it to the physics separation.
    """
    model = checkpoint.model if isinstance(checkpoint, Checkpoint) else (
        checkpoint if isinstance(checkpoint, Model) else load_checkpoint(checkpoint).model)
    if mode == "direct":
        alpha = predict_alpha(model, img) if "chromnet" in model.nets else None
        return Inference(predict_direct(model, img), alpha)
    if mode == "physics":
        if "chromnet" not in model.nets:
            raise ConfigError(f"role mismatch: {model.mode} has no chromaticity network for physics mode")
        alpha = predict_alpha(model, img)
        sep = physsep.separate_with_chrom(img, alpha)
        return Inference(sep.images, alpha, sep.fit)
    raise ConfigError(f"unknown inference mode {mode!r}")
