"""Synthetic feature sequences with planted action segments.

Background tokens are Gaussian noise; tokens inside a segment carry the
segment class's unit-norm signature scaled by a trapezoid envelope (linear
attack and decay over 10% of the segment length) plus the same noise.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import lqt
from .detector import ActionSegment


class PackingError(ValueError):
    pass


class ManifestMismatchError(ValueError):
    pass


@dataclass
class SyntheticSpec:
    num_videos: int = 250
    num_test: int = 50
    T: int = 256
    Cin: int = 32
    num_classes: int = 5
    segments_per_video: tuple = (1, 3)
    duration_range: tuple = (8, 48)
    noise_sigma: float = 0.25
    base_dt: float = 4 / 30
    ramp_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.segments_per_video = tuple(self.segments_per_video)
        self.duration_range = tuple(self.duration_range)
        lo, hi = self.duration_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad duration_range {self.duration_range}")
        if hi >= self.T:
            raise PackingError(f"max duration {hi} must be below T={self.T}")
        if not 0 <= self.num_test <= self.num_videos:
            raise ValueError("num_test must be within [0, num_videos]")
        kmin, kmax = self.segments_per_video
        if not 0 <= kmin <= kmax:
            raise ValueError(f"bad segments_per_video {self.segments_per_video}")
        if kmax * lo + (kmax - 1) > self.T:
            raise PackingError(
                f"{kmax} segments of at least {lo} tokens cannot fit in T={self.T} without overlap")


@dataclass
class Video:
    video_id: str
    features: np.ndarray
    segments: list
    split: str = "train"


@dataclass
class Dataset:
    spec: SyntheticSpec
    videos: list = field(default_factory=list)
    signatures: np.ndarray = None

    def split(self, name):
        return [v for v in self.videos if v.split == name]

    @property
    def seconds_per_token(self):
        return self.spec.base_dt

    def ground_truth(self, split=None):
        return {v.video_id: list(v.segments) for v in self.videos if split is None or v.split == split}


def class_signatures(num_classes, dim, rng):
    sig = rng.normal(size=(num_classes, dim))
    return sig / np.linalg.norm(sig, axis=1, keepdims=True)


def envelope(duration, ramp_fraction=0.1):
    """Trapezoid over ``duration`` tokens rising and falling over the ramp."""
    r = max(1.0, ramp_fraction * duration)
    i = np.arange(duration) + 0.5
    return np.minimum(1.0, np.minimum(i / r, (duration - i) / r))


def _place(rng, durations, T):
    """Random non-overlapping start positions with at least one gap token."""
    k = len(durations)
    free = T - int(np.sum(durations)) - (k - 1)
    if free < 0:
        raise PackingError(f"segments {durations} do not fit in T={T}")
    # random composition of the free tokens into k+1 gaps
    cuts = np.sort(rng.integers(0, free + 1, size=k))
    gaps = np.diff(np.concatenate([[0], cuts]))
    starts, pos = [], 0
    for j, d in enumerate(durations):
        pos += int(gaps[j])
        starts.append(pos)
        pos += int(d) + 1
    return starts


def _make_video(spec: SyntheticSpec, signatures, seq, index):
    rng = np.random.default_rng(seq)
    kmin, kmax = spec.segments_per_video
    k = int(rng.integers(kmin, kmax + 1))
    lo, hi = spec.duration_range
    durations = rng.integers(lo, hi + 1, size=k)
    while k and int(durations.sum()) + k - 1 > spec.T:
        durations = rng.integers(lo, hi + 1, size=k)
    order = rng.permutation(k)
    durations = durations[order]
    starts = _place(rng, durations, spec.T)
    classes = rng.integers(0, spec.num_classes, size=k)
    feats = np.zeros((spec.T, spec.Cin))
    if spec.noise_sigma > 0:
        feats += rng.normal(0.0, spec.noise_sigma, size=feats.shape)
    segs = []
    for s, d, c in zip(starts, durations.tolist(), classes.tolist()):
        feats[s:s + d] += envelope(d, spec.ramp_fraction)[:, None] * signatures[c]
        segs.append(ActionSegment(s * spec.base_dt, (s + d) * spec.base_dt, int(c), 1.0))
    segs.sort(key=lambda g: g.start)
    split = "test" if index >= spec.num_videos - spec.num_test else "train"
    return Video(f"video_{index:05d}", feats.astype(np.float32), segs, split)


def generate(spec: SyntheticSpec, workers=1):
    """Deterministic in ``spec.seed``; each video draws from its own spawned seed."""
    root = np.random.SeedSequence(spec.seed)
    sig_seq, *video_seqs = root.spawn(spec.num_videos + 1)
    signatures = class_signatures(spec.num_classes, spec.Cin, np.random.default_rng(sig_seq))
    jobs = [(spec, signatures, s, i) for i, s in enumerate(video_seqs)]
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as ex:
            videos = list(ex.map(lambda a: _make_video(*a), jobs))
    else:
        videos = [_make_video(*a) for a in jobs]
    return Dataset(spec, videos, signatures)


# ---------------------------------------------------------------------------
# on-disk layout: manifest.json + features/<video_id>.lqt


def _spec_dict(spec):
    d = asdict(spec)
    d["segments_per_video"] = list(spec.segments_per_video)
    d["duration_range"] = list(spec.duration_range)
    return d


def save(dataset: Dataset, out_dir):
    os.makedirs(os.path.join(out_dir, "features"), exist_ok=True)
    videos = []
    for v in dataset.videos:
        lqt.save(os.path.join(out_dir, "features", f"{v.video_id}.lqt"), v.features)
        videos.append({
            "video_id": v.video_id,
            "split": v.split,
            "T": int(v.features.shape[0]),
            "Cin": int(v.features.shape[1]),
            "segments": [{"start": g.start, "end": g.end, "class": g.class_id} for g in v.segments],
        })
    manifest = {
        "format": "liquidtad-synthetic-v1",
        "base_dt": dataset.spec.base_dt,
        "T": dataset.spec.T,
        "Cin": dataset.spec.Cin,
        "num_classes": dataset.spec.num_classes,
        "spec": _spec_dict(dataset.spec),
        "signatures": np.asarray(dataset.signatures).tolist() if dataset.signatures is not None else None,
        "videos": videos,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    return out_dir


def load(path):
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    spec = SyntheticSpec(**manifest["spec"])
    videos = []
    for entry in manifest["videos"]:
        fpath = os.path.join(path, "features", f"{entry['video_id']}.lqt")
        feats = lqt.load(fpath)
        expected = (entry["T"], entry["Cin"])
        if feats.shape != expected:
            raise ManifestMismatchError(
                f"{fpath}: header shape {feats.shape} disagrees with manifest {expected}")
        segs = [ActionSegment(g["start"], g["end"], g["class"], 1.0) for g in entry["segments"]]
        videos.append(Video(entry["video_id"], feats, segs, entry["split"]))
    sig = manifest.get("signatures")
    return Dataset(spec, videos, None if sig is None else np.asarray(sig))
