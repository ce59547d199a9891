"""Checkpoint = ``params.lqt`` (concatenated LQT1 records) + ``manifest.json``."""
import json
import os
from dataclasses import asdict

import numpy as np

from . import lqt
from .detector import Detector, PyramidConfig

PARAMS_FILE = "params.lqt"
MANIFEST_FILE = "manifest.json"


def save(model: Detector, out_dir, extra=None):
    os.makedirs(out_dir, exist_ok=True)
    cfg = model.cfg
    table = []
    blob = bytearray()
    for p in model.parameters():
        rec = lqt.encode(p.data)
        table.append({"name": p.name, "offset": len(blob), "shape": list(p.shape)})
        blob += rec
    manifest = {
        "format": "LQT1",
        "config": asdict(cfg),
        "decay": {
            "sharing": cfg.decay_sharing,
            "epsilon": cfg.epsilon,
            "dt_policy": {"base_dt": cfg.base_dt, "align_pyramid": cfg.align_dt_pyramid},
        },
        "params": table,
    }
    if extra:
        manifest["extra"] = extra
    with open(os.path.join(out_dir, PARAMS_FILE), "wb") as f:
        f.write(bytes(blob))
    with open(os.path.join(out_dir, MANIFEST_FILE), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return out_dir


def load(ckpt_dir, dtype=None):
    with open(os.path.join(ckpt_dir, MANIFEST_FILE)) as f:
        manifest = json.load(f)
    with open(os.path.join(ckpt_dir, PARAMS_FILE), "rb") as f:
        blob = f.read()
    cfg = PyramidConfig(**manifest["config"])
    model = Detector(cfg)
    params = model.named_parameters()
    seen = set()
    for entry in manifest["params"]:
        name = entry["name"]
        if name not in params:
            raise lqt.CorruptFileError(f"unknown parameter {name!r} in checkpoint")
        arr, _ = lqt.decode(blob, entry["offset"])
        if list(arr.shape) != entry["shape"] or arr.shape != params[name].shape:
            raise lqt.CorruptFileError(f"shape mismatch for {name}: {arr.shape} vs {entry['shape']}")
        p = params[name]
        p.data = arr.astype(dtype or p.data.dtype)
        p.zero_grad()
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise lqt.CorruptFileError(f"checkpoint lacks parameters: {sorted(missing)}")
    return model


def state_arrays(model: Detector):
    return {p.name: np.array(p.data) for p in model.parameters()}
