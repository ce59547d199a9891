"""Feature-pyramid temporal action detector built from relaxation blocks."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import engine as E
from . import kernels
from .engine import Parameter, Tensor
from .liquid import (Backend, BackendKind, DecaySharingMode, DtPolicy, LptbWeights,
                     lptb_flops, lptb_forward)


@dataclass
class PyramidConfig:
    levels: int = 6
    downsample_stride: int = 2
    embed_dim: int = 64
    blocks_per_level: int = 1
    input_dim: int = 32
    num_classes: int = 5
    head_layers: int = 2
    kernel_size: int = 3
    dropout: float = 0.1
    epsilon: float = 1e-3
    base_dt: float = 4 / 30
    align_dt_pyramid: bool = False
    decay_sharing: str = "block_shared"
    backend: str = "parallel"
    substeps: int = 16
    cls_prior: float = 0.01

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.downsample_stride < 1:
            raise ValueError("downsample_stride must be >= 1")
        if min(self.embed_dim, self.input_dim, self.num_classes, self.blocks_per_level) < 1:
            raise ValueError("dimensions must be positive")
        DecaySharingMode(self.decay_sharing)
        BackendKind(self.backend)

    @property
    def dt_policy(self):
        return DtPolicy(self.base_dt, self.align_dt_pyramid)

    @property
    def sharing(self):
        return DecaySharingMode(self.decay_sharing)

    @property
    def backend_spec(self):
        return Backend(BackendKind(self.backend), self.substeps)

    @property
    def pad_multiple(self):
        return self.downsample_stride ** (self.levels - 1)

    def level_stride(self, level):
        return self.downsample_stride ** level

    def padded_length(self, T):
        m = self.pad_multiple
        return -(-T // m) * m


@dataclass(frozen=True)
class ActionSegment:
    start: float
    end: float
    class_id: int
    score: float = 1.0

    def __post_init__(self):
        if not self.start >= 0:
            raise ValueError(f"segment start must be >= 0, got {self.start}")
        if not self.end > self.start:
            raise ValueError(f"segment end {self.end} must exceed start {self.start}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def duration(self):
        return self.end - self.start


@dataclass
class LevelFeatures:
    features: list
    timestamps: list
    strides: list

    @property
    def lengths(self):
        return [f.shape[0] for f in self.features]


@dataclass
class HeadWeights:
    hidden: list = field(default_factory=list)   # [(w, b), ...]
    cls_w: Parameter = None
    cls_b: Parameter = None
    reg_w: Parameter = None
    reg_b: Parameter = None

    def parameters(self):
        out = [p for pair in self.hidden for p in pair]
        return out + [self.cls_w, self.cls_b, self.reg_w, self.reg_b]


@dataclass
class LevelOutput:
    cls_logits: Tensor      # T_l x num_classes
    reg_offsets: Tensor     # T_l x 2, (left, right) in level-token units
    mask: np.ndarray        # T_l bool, False on padding
    stride: int


def _he(rng, fan_in, fan_out):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


class Detector:
    def __init__(self, cfg: PyramidConfig, seed=0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        C = cfg.embed_dim
        self.stem_w = Parameter(rng.normal(0.0, 1.0 / math.sqrt(cfg.input_dim), size=(cfg.input_dim, C)), "stem.w")
        self.stem_b = Parameter(np.zeros(C), "stem.b")
        self.stem_gamma = Parameter(np.ones(C), "stem.ln_gamma")
        self.stem_beta = Parameter(np.zeros(C), "stem.ln_beta")
        self.blocks = []
        for lvl in range(cfg.levels):
            row = []
            for b in range(cfg.blocks_per_level):
                row.append(LptbWeights.init(
                    C, rng, kernel_size=cfg.kernel_size, dropout_rate=cfg.dropout,
                    prefix=f"level{lvl}.block{b}", sharing=cfg.sharing, epsilon=cfg.epsilon,
                    dt_policy=cfg.dt_policy, stride=cfg.downsample_stride))
            self.blocks.append(row)
        hidden = []
        for i in range(cfg.head_layers):
            hidden.append((Parameter(_he(rng, C, C), f"head.hidden{i}.w"),
                           Parameter(np.zeros(C), f"head.hidden{i}.b")))
        prior = -math.log((1.0 - cfg.cls_prior) / cfg.cls_prior)
        self.head = HeadWeights(
            hidden=hidden,
            cls_w=Parameter(rng.normal(0.0, 0.01, size=(C, cfg.num_classes)), "head.cls.w"),
            cls_b=Parameter(np.full(cfg.num_classes, prior), "head.cls.b"),
            reg_w=Parameter(rng.normal(0.0, 0.01, size=(C, 2)), "head.reg.w"),
            reg_b=Parameter(np.zeros(2), "head.reg.b"),
        )

    # -- parameters ---------------------------------------------------------

    def parameters(self):
        ps = [self.stem_w, self.stem_b, self.stem_gamma, self.stem_beta]
        for row in self.blocks:
            for w in row:
                ps.extend(w.parameters())
        return ps + self.head.parameters()

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def decay_parameters(self):
        return [w.decay.rho for row in self.blocks for w in row]

    def n_params(self):
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # -- forward ------------------------------------------------------------

    def stem(self, x):
        return stem(x, self.stem_w, self.stem_b, self.stem_gamma, self.stem_beta)

    def forward(self, x, training=False, seed=None, backend=None):
        """Run stem, pyramid and heads on one T x Cin sequence.

        The input is right-padded with zeros to a multiple of
        ``stride ** (levels - 1)``; padded tokens are flagged in each level's mask.
        """
        cfg = self.cfg
        xd = x.data if isinstance(x, Tensor) else np.asarray(x)
        T = xd.shape[0]
        if T == 0:
            raise E.ShapeError("empty sequence")
        Tp = cfg.padded_length(T)
        if Tp != T:
            pad = np.zeros((Tp - T, xd.shape[1]), dtype=xd.dtype)
            xd = np.concatenate([xd, pad], axis=0)
        h = self.stem(Tensor(np.asarray(xd, dtype=E.default_dtype())))
        feats = build_pyramid(h, cfg, self.blocks, backend or cfg.backend_spec, training, seed)
        outs = heads(feats, self.head)
        result = []
        for lvl, (cls, reg) in enumerate(outs):
            s = feats.strides[lvl]
            n = cls.shape[0]
            mask = np.arange(n) * s < T
            result.append(LevelOutput(cls, reg, mask, s))
        return result

    __call__ = forward

    def backbone(self, x, backend=None):
        """Stem + pyramid only (no heads); used by the latency benchmark."""
        h = self.stem(x if isinstance(x, Tensor) else Tensor(x))
        return build_pyramid(h, self.cfg, self.blocks, backend or self.cfg.backend_spec)

    def flops(self, T, include_heads=True, backend=None):
        return model_flops(self.cfg, T, include_heads, backend)


def stem(x, w, b, gamma, beta):
    if x.shape[0] == 0:
        raise E.ShapeError("empty sequence")
    return E.layer_norm(E.linear_per_timestep(x, w, b), gamma, beta)


def build_pyramid(x, cfg: PyramidConfig, blocks, backend=None, training=False, seed=None,
                  seconds_per_token=None):
    backend = backend or cfg.backend_spec
    s = cfg.downsample_stride
    T = x.shape[0]
    if T < cfg.pad_multiple or T % cfg.pad_multiple:
        raise E.ShapeError(f"sequence length {T} must be a positive multiple of {cfg.pad_multiple}")
    dt = cfg.base_dt if seconds_per_token is None else seconds_per_token
    feats, stamps, strides = [], [], []
    h = x
    for lvl in range(cfg.levels):
        if lvl > 0 and s > 1:
            h = E.max_pool1d(h, s)
        for b, w in enumerate(blocks[lvl]):
            bseed = None if seed is None else [*np.atleast_1d(seed).tolist(), lvl, b]
            h = lptb_forward(h, w, lvl, backend, training, bseed)
        stride = s ** lvl
        feats.append(h)
        stamps.append(np.arange(h.shape[0]) * stride * dt)
        strides.append(stride)
    return LevelFeatures(feats, stamps, strides)


def heads(feats: LevelFeatures, hw: HeadWeights):
    """Shared classification/regression heads applied to every level at once."""
    C = hw.cls_w.shape[0]
    for f in feats.features:
        if f.shape[1] != C:
            raise E.ShapeError(f"feature width {f.shape[1]} != head width {C}")
    lengths = feats.lengths
    h = E.concat_rows(feats.features) if len(lengths) > 1 else feats.features[0]
    for w, b in hw.hidden:
        h = E.relu(E.linear_per_timestep(h, w, b))
    cls = E.linear_per_timestep(h, hw.cls_w, hw.cls_b)
    reg = E.softplus(E.linear_per_timestep(h, hw.reg_w, hw.reg_b))
    if len(lengths) == 1:
        return [(cls, reg)]
    out, o = [], 0
    for n in lengths:
        out.append((E.take_rows(cls, o, o + n), E.take_rows(reg, o, o + n)))
        o += n
    return out


def model_flops(cfg: PyramidConfig, T, include_heads=True, backend=None):
    """Analytic op count (multiply-accumulate = 1) for one forward pass."""
    backend = backend or cfg.backend_spec
    C, Cin, K = cfg.embed_dim, cfg.input_dim, cfg.kernel_size
    Tp = cfg.padded_length(T)
    total = Tp * (Cin * C + C + 4 * C)      # stem projection + layer norm
    n = Tp
    tokens = 0
    for lvl in range(cfg.levels):
        if lvl > 0:
            total += n * C                   # max-pool comparisons
            n //= cfg.downsample_stride
        tokens += n
        per_block = lptb_flops(n, C, K)
        if backend.kind is BackendKind.ODE_EULER:
            # substeps x (sub, mul, sub) instead of the 2-op blend
            per_block += n * C * (3 * backend.substeps - 2)
        total += cfg.blocks_per_level * per_block
    if include_heads:
        nc = cfg.num_classes
        total += tokens * (cfg.head_layers * (C * C + 2 * C) + C * nc + nc + 2 * C + 2 + 2)
    return int(total)


# ---------------------------------------------------------------------------
# decoding


def decode(outputs, seconds_per_token, score_threshold=0.1, num_frames=None):
    """Turn per-level head outputs into scored segments (before NMS).

    Token ``t`` of a level with cumulative stride ``s`` sits at
    ``t * s * seconds_per_token`` and predicts ``(left, right)`` distances in
    that level's token units.
    """
    if not 0.0 <= score_threshold <= 1.0:
        raise ValueError("score_threshold must be in [0, 1]")
    segs = []
    t_max = None if num_frames is None else num_frames * seconds_per_token
    for out in outputs:
        logits = out.cls_logits.data.astype(np.float64)
        reg = out.reg_offsets.data.astype(np.float64)
        scores = 0.5 * np.tanh(0.5 * logits) + 0.5
        unit = out.stride * seconds_per_token
        mask = out.mask if out.mask is not None else np.ones(len(logits), bool)
        ts, cs = np.nonzero((scores >= score_threshold) & mask[:, None])
        for t, c in zip(ts.tolist(), cs.tolist()):
            center = t * unit
            start = max(center - reg[t, 0] * unit, 0.0)
            end = center + reg[t, 1] * unit
            if t_max is not None:
                end = min(end, t_max)
            if not end > start:
                continue
            segs.append(ActionSegment(start, end, c, float(scores[t, c])))
    return segs


def nms(segments, iou_threshold=0.5, max_keep=100):
    """Greedy hard NMS per class; result sorted by descending score."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou_threshold must be in (0, 1]")
    kept = []
    by_class = {}
    for seg in segments:
        by_class.setdefault(seg.class_id, []).append(seg)
    for cls in sorted(by_class):
        group = sorted(by_class[cls], key=lambda s: -s.score)
        starts = np.array([s.start for s in group], dtype=np.float64)
        ends = np.array([s.end for s in group], dtype=np.float64)
        keep = kernels.nms(starts, ends, float(iou_threshold))
        kept.extend(s for s, k in zip(group, keep) if k)
    kept.sort(key=lambda s: -s.score)
    return kept[:max_keep]


def detect(model: Detector, features, seconds_per_token, score_threshold=0.1,
           iou_threshold=0.5, max_keep=100, backend=None):
    outs = model.forward(features, training=False, backend=backend)
    segs = decode(outs, seconds_per_token, score_threshold, num_frames=len(features))
    return nms(segs, iou_threshold, max_keep)


def config_dict(cfg: PyramidConfig):
    return asdict(cfg)
