"""On-disk dataset layout: one directory per sample.

::

    <root>/<id>/input.pfm alpha.pfm shading1.pfm shading2.pfm
                sep1.pfm sep2.pfm mask.png meta.json
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import imgio
from .formation import FormationError, LightPair, SceneSample

FILES = ("input.pfm", "alpha.pfm", "shading1.pfm", "shading2.pfm", "sep1.pfm", "sep2.pfm", "mask.png", "meta.json")


class DatasetError(ValueError):
    pass


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def dump_json(path, obj) -> None:
    """Write sorted, indented JSON with a trailing newline (stable bytes)."""
    with open(path, "w") as f:
        json.dump(_jsonable(obj), f, indent=2, sort_keys=True)
        f.write("\n")


def sample_id(index: int) -> str:
    return f"{index:05d}"


def write_sample(directory, sample: SceneSample) -> None:
    os.makedirs(directory, exist_ok=True)
    imgio.write_pfm(os.path.join(directory, "input.pfm"), sample.input)
    imgio.write_pfm(os.path.join(directory, "alpha.pfm"), sample.albedo_chrom)
    imgio.write_pfm(os.path.join(directory, "shading1.pfm"), sample.shadings[0])
    imgio.write_pfm(os.path.join(directory, "shading2.pfm"), sample.shadings[1])
    imgio.write_pfm(os.path.join(directory, "sep1.pfm"), sample.separated[0])
    imgio.write_pfm(os.path.join(directory, "sep2.pfm"), sample.separated[1])
    imgio.write_mask(os.path.join(directory, "mask.png"), sample.mask)
    meta = dict(sample.meta)
    if sample.lights is not None:
        meta["lights"] = sample.lights.to_json()
    dump_json(os.path.join(directory, "meta.json"), meta)


def read_sample(directory) -> SceneSample:
    missing = [f for f in FILES if not os.path.exists(os.path.join(directory, f))]
    if missing:
        raise DatasetError(f"{directory}: missing {', '.join(missing)}")

    def img(name):
        return imgio.load_image(os.path.join(directory, name))

    with open(os.path.join(directory, "meta.json")) as f:
        meta = json.load(f)
    lights = None
    if "lights" in meta:
        try:
            lights = LightPair(np.asarray(meta["lights"]["l1"]), np.asarray(meta["lights"]["l2"]))
        except (FormationError, KeyError, TypeError) as exc:
            raise DatasetError(f"{directory}: bad lights in meta.json ({exc})") from exc
    return SceneSample(img("input.pfm"), img("alpha.pfm"), (img("shading1.pfm"), img("shading2.pfm")),
                       (img("sep1.pfm"), img("sep2.pfm")), imgio.read_mask(os.path.join(directory, "mask.png")),
                       lights, meta)


def list_samples(root) -> list[str]:
    """Sample directory names under ``root`` in sorted order."""
    if not os.path.isdir(root):
        raise DatasetError(f"{root}: not a directory")
    return sorted(d for d in os.listdir(root) if os.path.exists(os.path.join(root, d, "meta.json")))


def write_dataset(root, samples) -> list[str]:
    os.makedirs(root, exist_ok=True)
    ids = []
    for k, s in enumerate(samples):
        sid = sample_id(k)
        write_sample(os.path.join(root, sid), s)
        ids.append(sid)
    return ids


def read_dataset(root, limit: int | None = None) -> list[SceneSample]:
    ids = list_samples(root)
    if not ids:
        raise DatasetError(f"{root}: no samples")
    if limit is not None:
        ids = ids[:limit]
    return [read_sample(os.path.join(root, i)) for i in ids]
