"""Ablation grids over backend, decay sharing, time step and pyramid depth.

Every cell trains from scratch on the same dataset with the same seed and
reports test-split mAP, training seconds per epoch and inference time.  A
failing cell is recorded with its error and the grid moves on.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import os
import time
import traceback
from dataclasses import dataclass, field

from .train import predict, train
from .evaluate import evaluate

MAP_LABEL = "synthetic avg mAP"

GRIDS = {
    "backend": [
        ("Parallel", {"backend": "parallel"}),
        ("CfcSequential", {"backend": "cfc_sequential"}),
        ("OdeEuler", {"backend": "ode_euler"}),
    ],
    "decay_sharing": [
        ("PerChannel", {"decay_sharing": "per_channel"}),
        ("BlockShared", {"decay_sharing": "block_shared"}),
    ],
    "dt": [
        ("2/30", {"base_dt": 2 / 30, "align_dt_pyramid": False}),
        ("4/30 (default)", {"base_dt": 4 / 30, "align_dt_pyramid": False}),
        ("4/30 + align_dt_pyramid", {"base_dt": 4 / 30, "align_dt_pyramid": True}),
        ("8/30", {"base_dt": 8 / 30, "align_dt_pyramid": False}),
        ("1.0", {"base_dt": 1.0, "align_dt_pyramid": False}),
    ],
    "pyramid_depth": [(f"{n}-level", {"levels": n}) for n in range(4, 9)],
}

COLUMNS = ["setting", MAP_LABEL, "train s/epoch", "inference s", "status"]


@dataclass
class AblationTable:
    which: str
    rows: list = field(default_factory=list)

    def row(self, setting):
        for r in self.rows:
            if r["setting"] == setting:
                return r
        raise KeyError(setting)

    def markdown(self):
        lines = ["| " + " | ".join(COLUMNS) + " |", "|" + "---|" * len(COLUMNS)]
        for r in self.rows:
            cells = [r["setting"], _fmt(r[MAP_LABEL], 4), _fmt(r["train s/epoch"], 2),
                     _fmt(r["inference s"], 3), r["status"]]
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines)

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        stem = os.path.join(out_dir, f"ablation_{self.which}")
        with open(stem + ".json", "w") as f:
            json.dump({"which": self.which, "rows": self.rows}, f, indent=2, sort_keys=True)
        with open(stem + ".csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=COLUMNS, extrasaction="ignore")
            w.writeheader()
            w.writerows(self.rows)
        with open(stem + ".md", "w") as f:
            f.write(self.markdown() + "\n")


def _fmt(v, nd):
    return "n/a" if v is None else f"{v:.{nd}f}"


def run_cell(dataset, model_cfg, tcfg, ecfg, setting=""):
    row = {"setting": setting, MAP_LABEL: None, "train s/epoch": None, "inference s": None,
           "status": "ok", "error": None}
    try:
        # evaluation happens once at the end; the grid compares final weights
        res = train(dataset, model_cfg, dataclasses.replace(tcfg, eval_every=0), ecfg)
        if res.epoch_times:
            row["train s/epoch"] = sum(res.epoch_times) / len(res.epoch_times)
        test = dataset.split("test")
        t0 = time.perf_counter()
        preds = predict(res.model, test, dataset.seconds_per_token, ecfg)
        row["inference s"] = time.perf_counter() - t0
        row[MAP_LABEL] = evaluate(preds, dataset.ground_truth("test"), ecfg.thresholds).avg_map
    except Exception as e:  # noqa: BLE001 - any failure becomes a recorded row
        row["status"] = "failed"
        row["error"] = f"{type(e).__name__}: {e}"
        row["traceback"] = traceback.format_exc(limit=5)
    return row


def _cell_args(which, dataset, model_cfg, tcfg, ecfg):
    if which not in GRIDS:
        raise ValueError(f"unknown ablation {which!r}; choose from {sorted(GRIDS)}")
    for label, changes in GRIDS[which]:
        yield dataset, dataclasses.replace(model_cfg, **changes), tcfg, ecfg, label


def run_ablation(which, dataset, model_cfg, tcfg, ecfg, parallel=False, workers=2, on_row=None):
    table = AblationTable(which)
    cells = list(_cell_args(which, dataset, model_cfg, tcfg, ecfg))
    if parallel and workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as ex:
            rows = list(ex.map(run_cell, *zip(*cells)))
        for r in rows:
            table.rows.append(r)
            if on_row:
                on_row(r)
    else:
        for args in cells:
            r = run_cell(*args)
            table.rows.append(r)
            if on_row:
                on_row(r)
    return table
