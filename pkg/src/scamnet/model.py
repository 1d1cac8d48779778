"""The two-branch network: small conv backbone + 2-level feature pyramid,
anchor-based object branch, context branch with patch expansion, and
element-wise classifier fusion.

The object branch proposes tight patches (existence + delta heads over
anchors, NMS, top-k) and labels them from pooled features; the context branch
re-pools each patch after expanding it about its center and labels the larger
region. Discrete proposal decisions (NMS, top-k, pyramid level choice) are
stop-gradient: boxes are constants inside pooling.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import (AnchorGrid, AnchorLevelConfig, Box, decode_box_delta,
                       expand_patch, generate_anchors, nms)
from .losses import EPS
from .tensor import ParamStore, Tensor


def default_anchor_levels() -> list[AnchorLevelConfig]:
    return [
        AnchorLevelConfig(stride=8, sizes=(10.0, 16.0), ratios=(1.0, 0.5, 2.0)),
        AnchorLevelConfig(stride=16, sizes=(24.0, 36.0), ratios=(1.0, 0.5, 2.0)),
    ]


@dataclass
class BackboneConfig:
    image_size: int = 64
    num_categories: int = 6
    stage_channels: tuple = (8, 16, 32, 64)
    pyramid_stages: tuple = (2, 3)  # stage indices feeding the pyramid
    pyramid_channels: int = 32
    head_hidden: int = 128
    roi_grid: int = 4
    anchor_levels: list[AnchorLevelConfig] = field(default_factory=default_anchor_levels)
    pre_nms: int = 64
    top_k: int = 8
    nms_iou: float = 0.5
    expansion_factor: float = 2.0
    fusion_mode: str = "max"  # "max" or "mean"
    label_threshold: float = 0.5

    def __post_init__(self):
        strides = [2 ** (i + 1) for i in self.pyramid_stages]
        if [lv.stride for lv in self.anchor_levels] != strides:
            raise ValueError(f"anchor strides {[lv.stride for lv in self.anchor_levels]} "
                             f"do not match pyramid strides {strides}")
        counts = {len(lv.sizes) * len(lv.ratios) for lv in self.anchor_levels}
        if len(counts) != 1:
            raise ValueError("per-cell anchor count must be identical across levels")
        if self.fusion_mode not in ("max", "mean"):
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")

    @property
    def anchors_per_cell(self) -> int:
        lv = self.anchor_levels[0]
        return len(lv.sizes) * len(lv.ratios)

    def to_json(self) -> str:
        d = self.__dict__.copy()
        d["anchor_levels"] = [
            {"stride": lv.stride, "sizes": list(lv.sizes), "ratios": list(lv.ratios)}
            for lv in self.anchor_levels
        ]
        for k in ("stage_channels", "pyramid_stages"):
            d[k] = list(d[k])
        return json.dumps(d)

    @staticmethod
    def from_json(blob: str) -> "BackboneConfig":
        d = json.loads(blob)
        d["anchor_levels"] = [
            AnchorLevelConfig(stride=a["stride"], sizes=tuple(a["sizes"]), ratios=tuple(a["ratios"]))
            for a in d["anchor_levels"]
        ]
        for k in ("stage_channels", "pyramid_stages"):
            d[k] = tuple(d[k])
        return BackboneConfig(**d)


# ---------------------------------------------------------------------------
# parameters


# pixel standardization: uniform [0,1] background has mean 0.5, std ~0.29
INPUT_MEAN = 0.5
INPUT_SCALE = 3.46

# Channel-normalized conv outputs are invariant to the weight scale, so the
# effective step size of those layers goes as lr/|w|^2: a smaller init is a
# per-layer learning-rate boost with no change to the realized function.
NORM_CONV_SCALE = 1.0 / 3.0

# Head layers store w/GAIN and multiply their output by GAIN — a
# reparameterization that leaves the initial function identical but scales
# the effective learning rate of the head by GAIN^2. Gains are set per head:
# the step size a head realizes also grows with its input dimensionality, so
# the wide direct-conv anchor heads need smaller gains than the fc heads, and
# the box-delta head (a regression with unbounded loss) stays at 1.
HEAD_GAIN = 4.0
OBJ_GAIN = 4.0
DELTA_GAIN = 1.0


def _uniform(rng, fan_in, shape):
    # fan-in-scaled uniform, relu gain: bound sqrt(6/fan_in)
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: BackboneConfig, seed: int) -> ParamStore:
    """Fan-in-scaled uniform weights, zero biases, fully seeded."""
    rng = np.random.default_rng([seed, 0xC0FFEE])
    p = ParamStore()

    def norm_conv(name, cin, cout, k, scale=NORM_CONV_SCALE):
        # feeds channel_norm: no bias (cancelled), deliberately small init
        p.add(f"{name}.w", _uniform(rng, cin * k * k, (cout, cin, k, k)) * scale)

    def head_conv(name, cin, cout, k, gain):
        p.add(f"{name}.w", _uniform(rng, cin * k * k, (cout, cin, k, k)) / gain)
        p.add(f"{name}.b", np.zeros(cout))

    def head_fc(name, cin, cout, gain):
        p.add(f"{name}.w", _uniform(rng, cin, (cout, cin)) / gain)
        p.add(f"{name}.b", np.zeros(cout))

    cin = 3
    for i, cout in enumerate(cfg.stage_channels):
        norm_conv(f"stage{i}", cin, cout, 3)
        cin = cout
    for si in cfg.pyramid_stages:
        norm_conv(f"lateral{si}", cfg.stage_channels[si], cfg.pyramid_channels, 1)
    head_conv("rpn.obj", cfg.pyramid_channels, cfg.anchors_per_cell, 3, OBJ_GAIN)
    head_conv("rpn.delta", cfg.pyramid_channels, 4 * cfg.anchors_per_cell, 3, DELTA_GAIN)
    flat = cfg.pyramid_channels * cfg.roi_grid * cfg.roi_grid
    for head in ("object_label", "context_label"):
        head_fc(f"{head}.fc1", flat, cfg.head_hidden, HEAD_GAIN)
        head_fc(f"{head}.fc2", cfg.head_hidden, cfg.num_categories, HEAD_GAIN)
    for si in dict.fromkeys((*cfg.pyramid_stages, len(cfg.stage_channels) - 1)):
        head_fc(f"pretrain{si}", cfg.stage_channels[si], cfg.num_categories, HEAD_GAIN)
    return p


def backbone_param_names(params: ParamStore) -> list[str]:
    return [n for n in params.names() if n.startswith("stage")]


# ---------------------------------------------------------------------------
# feature extraction


@dataclass
class PyramidFeatures:
    levels: list[Tensor]  # (pyramid_channels, H, W), fine to coarse
    strides: list[int]
    stage_outputs: list[Tensor]

    def __post_init__(self):
        if sorted(self.strides) != self.strides:
            raise ValueError("pyramid strides must strictly increase")


def _no_bias(w: Tensor) -> Tensor:
    """Zero bias for convolutions whose shift is cancelled by channel_norm."""
    return T.constant(np.zeros(w.shape[0]))


def run_backbone(image: Tensor, params: ParamStore, cfg: BackboneConfig) -> list[Tensor]:
    if image.shape != (3, cfg.image_size, cfg.image_size):
        raise T.ShapeError(f"extract_features: image {image.shape}, "
                           f"config wants (3, {cfg.image_size}, {cfg.image_size})")
    x = T.mul_scalar(image - T.constant(np.full(image.shape, INPUT_MEAN)), INPUT_SCALE)
    outs = []
    for i in range(len(cfg.stage_channels)):
        x = T.relu(T.channel_norm(
            T.conv2d(x, params[f"stage{i}.w"], _no_bias(params[f"stage{i}.w"]),
                     stride=2, pad=1)))
        outs.append(x)
    return outs


def extract_features(image: Tensor, params: ParamStore, cfg: BackboneConfig) -> PyramidFeatures:
    """Backbone stages, then lateral 1x1 projections merged top-down."""
    stages = run_backbone(image, params, cfg)
    laterals = [
        T.conv2d(stages[si], params[f"lateral{si}.w"], _no_bias(params[f"lateral{si}.w"]))
        for si in cfg.pyramid_stages
    ]
    merged = [laterals[-1]]
    for lat in reversed(laterals[:-1]):
        merged.append(lat + T.upsample2x(merged[-1]))
    merged.reverse()  # fine to coarse
    # normalized levels keep pooled patch features on a common scale
    merged = [T.channel_norm(m) for m in merged]
    strides = [2 ** (si + 1) for si in cfg.pyramid_stages]
    return PyramidFeatures(levels=merged, strides=strides, stage_outputs=stages)


# ---------------------------------------------------------------------------
# anchor bookkeeping


class AnchorIndex:
    """Anchor grid plus precomputed flat indices into the RPN head outputs.

    ``obj_index[i]`` addresses anchor i in the concatenation of the flattened
    per-level objectness maps; ``delta_index[i]`` is the four component
    positions in the concatenated flattened delta maps.
    """

    def __init__(self, cfg: BackboneConfig):
        self.grid: AnchorGrid = generate_anchors(cfg.image_size, cfg.anchor_levels)
        a_per_cell = cfg.anchors_per_cell
        cells = [cfg.image_size // lv.stride for lv in cfg.anchor_levels]
        obj_offsets = np.cumsum([0] + [a_per_cell * c * c for c in cells])
        delta_offsets = np.cumsum([0] + [4 * a_per_cell * c * c for c in cells])
        n = len(self.grid)
        self.obj_index = np.empty(n, dtype=np.intp)
        self.delta_index = np.empty((n, 4), dtype=np.intp)
        for i, (li, slot, r, c) in enumerate(self.grid.provenance):
            hw = cells[li]
            self.obj_index[i] = obj_offsets[li] + (slot * hw + r) * hw + c
            base = delta_offsets[li]
            for comp in range(4):
                self.delta_index[i, comp] = base + ((slot * 4 + comp) * hw + r) * hw + c

    @property
    def boxes(self) -> list[Box]:
        return self.grid.boxes


def rpn_forward(feat: PyramidFeatures, params: ParamStore) -> tuple[Tensor, Tensor]:
    """Per-level anchor heads; returns concatenated flat (obj, delta) outputs.

    The heads read the pyramid maps directly through a single 3x3 conv each:
    objectness is close to linearly decodable from those features, and an
    extra randomly-initialized hidden layer only slows the heads down.
    """
    objs, deltas = [], []
    for level in feat.levels:
        objs.append(T.reshape(T.mul_scalar(
            T.conv2d(level, params["rpn.obj.w"], params["rpn.obj.b"], pad=1),
            OBJ_GAIN), (-1,)))
        deltas.append(T.reshape(T.mul_scalar(
            T.conv2d(level, params["rpn.delta.w"], params["rpn.delta.b"], pad=1),
            DELTA_GAIN), (-1,)))
    return T.concat0(objs), T.concat0(deltas)


# ---------------------------------------------------------------------------
# region pooling and the two branches


def select_level(box: Box, strides: list[int], grid: int) -> int:
    """Coarsest level whose cells still subdivide the box into grid bins."""
    target = max(box.w, box.h) / grid
    chosen = 0
    for li, s in enumerate(strides):
        if s <= target:
            chosen = li
    return chosen


def roi_pool(feat: PyramidFeatures, box: Box, grid: int) -> Tensor:
    """Average-pool a pixel-space box from its assigned pyramid level."""
    if box.w < 1.0 or box.h < 1.0:
        raise ValueError(f"degenerate region after clipping: w={box.w}, h={box.h}")
    li = select_level(box, feat.strides, grid)
    s = feat.strides[li]
    x0, y0, x1, y1 = box.extent()
    return T.region_avg_pool(feat.levels[li], (x0 / s, y0 / s, x1 / s, y1 / s), grid)


@dataclass
class BranchOutputs:
    boxes: list[Box]
    p_hat: list[Tensor]  # scalar existence confidences
    deltas: np.ndarray | None  # (P,4) decoded-from deltas; object branch only
    patch_scores: list[Tensor]  # raw (C,) label head outputs
    aggregated: Tensor  # (C,) per-image confidences in (0,1)


def aggregate_patch_labels(p_hat: list[Tensor], patch_scores: list[Tensor],
                           num_categories: int) -> Tensor:
    """Existence-gated elementwise max over patches; empty list -> all EPS."""
    if not patch_scores:
        return T.constant(np.full(num_categories, EPS))
    agg = None
    for p, s in zip(p_hat, patch_scores):
        gated = T.mul(T.reshape(p, (1,)), T.logistic(s))
        agg = gated if agg is None else T.maximum(agg, gated)
    return T.clamp(agg, EPS, 1.0 - EPS)


def _label_head(pooled: Tensor, params: ParamStore, head: str) -> Tensor:
    flat = T.reshape(pooled, (-1,))
    h = T.relu(T.mul_scalar(
        T.dense(flat, params[f"{head}.fc1.w"], params[f"{head}.fc1.b"]), HEAD_GAIN))
    return T.mul_scalar(
        T.dense(h, params[f"{head}.fc2.w"], params[f"{head}.fc2.b"]), HEAD_GAIN)


def object_branch_forward(feat: PyramidFeatures, index: AnchorIndex, params: ParamStore,
                          cfg: BackboneConfig, obj_flat: Tensor, delta_flat: Tensor) -> BranchOutputs:
    """Decode top proposals, NMS, pool and label each kept patch.

    Proposal geometry is recomputed from the current head outputs each call
    and treated as constant (stop-gradient); p_hat keeps its gradient path
    through the objectness logits.
    """
    size = float(cfg.image_size)
    logits = obj_flat.data
    order = np.argsort(-logits, kind="stable")[: cfg.pre_nms]
    cand_boxes, cand_idx = [], []
    for ai in order:
        d = delta_flat.data[index.delta_index[ai]]
        anchor = index.boxes[ai]
        decoded = Box(
            cx=anchor.cx + d[0] * anchor.w,
            cy=anchor.cy + d[1] * anchor.h,
            w=anchor.w * float(np.exp(np.clip(d[2], -4, 4))),
            h=anchor.h * float(np.exp(np.clip(d[3], -4, 4))),
        )
        try:
            clipped = decoded.clip(size, size)
        except ValueError:
            continue
        if clipped.w < 1.0 or clipped.h < 1.0:
            continue
        cand_boxes.append(clipped)
        cand_idx.append(int(ai))
    kept = nms(cand_boxes, [logits[i] for i in cand_idx], cfg.nms_iou, cfg.top_k)

    boxes, p_hat, scores = [], [], []
    deltas = np.zeros((len(kept), 4))
    for row, ki in enumerate(kept):
        ai = cand_idx[ki]
        boxes.append(cand_boxes[ki])
        deltas[row] = delta_flat.data[index.delta_index[ai]]
        p_hat.append(T.logistic(T.take(obj_flat, np.array([ai]))))
        scores.append(_label_head(roi_pool(feat, cand_boxes[ki], cfg.roi_grid), params, "object_label"))
    return BranchOutputs(
        boxes=boxes, p_hat=p_hat, deltas=deltas, patch_scores=scores,
        aggregated=aggregate_patch_labels(p_hat, scores, cfg.num_categories))


def context_branch_forward(feat: PyramidFeatures, obj: BranchOutputs, params: ParamStore,
                           cfg: BackboneConfig) -> BranchOutputs:
    """Expand each object patch about its center and label the larger region.

    No delta head and no existence re-scoring: each context patch inherits
    p_hat from its paired object patch.
    """
    size = float(cfg.image_size)
    boxes = [expand_patch(b, cfg.expansion_factor, size, size) for b in obj.boxes]
    scores = [_label_head(roi_pool(feat, b, cfg.roi_grid), params, "context_label") for b in boxes]
    return BranchOutputs(
        boxes=boxes, p_hat=obj.p_hat, deltas=None, patch_scores=scores,
        aggregated=aggregate_patch_labels(obj.p_hat, scores, cfg.num_categories))


def fuse_branches(object_vec: np.ndarray, context_vec: np.ndarray, mode: str) -> np.ndarray:
    if np.shape(object_vec) != np.shape(context_vec):
        raise T.ShapeError(f"fuse_branches: {np.shape(object_vec)} vs {np.shape(context_vec)}")
    if mode == "max":
        return np.maximum(object_vec, context_vec)
    if mode == "mean":
        return (np.asarray(object_vec) + np.asarray(context_vec)) / 2
    raise ValueError(f"unknown fusion mode {mode!r}")


@dataclass
class ImagePrediction:
    fused: np.ndarray
    object_vec: np.ndarray
    context_vec: np.ndarray
    labels: list[int]
    boxes: list[tuple[Box, int, float]]  # kept object box, argmax category, confidence
    context_boxes: list[Box]


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic for plain arrays (inference paths)."""
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


def forward_branches(image_np: np.ndarray, params: ParamStore, cfg: BackboneConfig,
                     index: AnchorIndex):
    """Full differentiable forward pass; returns everything training needs."""
    feat = extract_features(Tensor(image_np), params, cfg)
    obj_flat, delta_flat = rpn_forward(feat, params)
    obj = object_branch_forward(feat, index, params, cfg, obj_flat, delta_flat)
    ctx = context_branch_forward(feat, obj, params, cfg)
    return feat, obj_flat, delta_flat, obj, ctx


def predict_image(image_np: np.ndarray, params: ParamStore, cfg: BackboneConfig,
                  index: AnchorIndex | None = None) -> ImagePrediction:
    index = index or AnchorIndex(cfg)
    _, _, _, obj, ctx = forward_branches(image_np, params, cfg, index)
    object_vec = obj.aggregated.data.copy()
    context_vec = ctx.aggregated.data.copy()
    fused = fuse_branches(object_vec, context_vec, cfg.fusion_mode)
    labels = [int(c) for c in np.flatnonzero(fused > cfg.label_threshold)]
    boxes = []
    for b, p, s in zip(obj.boxes, obj.p_hat, obj.patch_scores):
        conf = float(p.data[0]) * sigmoid_np(s.data)
        c = int(conf.argmax())
        boxes.append((b, c, float(conf[c])))
    return ImagePrediction(fused=fused, object_vec=object_vec, context_vec=context_vec,
                           labels=labels, boxes=boxes, context_boxes=list(ctx.boxes))


def pretrain_scores_all(image_np: np.ndarray, params: ParamStore,
                        cfg: BackboneConfig) -> list[Tensor]:
    """Temporary global-pool multi-label heads used for backbone pretraining.

    Every stage that later feeds the feature pyramid gets its own head (deep
    supervision): the branches read those stages through 1x1 laterals, so each
    of them — not just the last stage — must become category-selective during
    pretraining. Global max pooling keeps small-object evidence from washing
    out in the mean.
    """
    stages = run_backbone(Tensor(image_np), params, cfg)
    scores = []
    for si in dict.fromkeys((*cfg.pyramid_stages, len(stages) - 1)):
        pooled = T.spatial_max(stages[si])
        scores.append(T.mul_scalar(
            T.dense(pooled, params[f"pretrain{si}.w"], params[f"pretrain{si}.b"]),
            HEAD_GAIN))
    return scores


def pretrain_scores(image_np: np.ndarray, params: ParamStore, cfg: BackboneConfig) -> Tensor:
    """Last-stage pretraining scores (used for phase-0 validation tracking)."""
    return pretrain_scores_all(image_np, params, cfg)[-1]


def save_model(path, params: ParamStore, cfg: BackboneConfig) -> None:
    T.save_checkpoint(path, params, cfg.to_json().encode("utf-8"))


def load_model(path) -> tuple[ParamStore, BackboneConfig]:
    arrays, blob = T.load_checkpoint(path)
    cfg = BackboneConfig.from_json(blob.decode("utf-8"))
    params = ParamStore()
    for name, arr in arrays.items():
        params.add(name, arr)
    return params, cfg
