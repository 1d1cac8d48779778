"""Finite-difference gradient verification: per-operator checks and an
end-to-end check of a one-sample micro model.

Sampled inputs avoid the known non-smooth points (relu at 0, smooth-L1 at
|x|=1, pooling ties, clamp bounds); elsewhere analytic gradients must match
central differences.
"""
from __future__ import annotations

import numpy as np

from . import losses as L
from . import tensor as T
from .config import RunConfig
from .data import DatasetSpec, render_scene
from .model import AnchorIndex, BackboneConfig, init_params
from .geometry import AnchorLevelConfig
from .tensor import Tensor, grad_check
from .train import build_anchor_targets, image_losses

OPERATOR_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3


def _away_from(rng, shape, avoid=(), margin=0.15, scale=2.0):
    """Uniform values rescreened to stay `margin` away from the given points."""
    x = rng.uniform(-scale, scale, size=shape)
    for p in avoid:
        bad = np.abs(x - p) < margin
        while bad.any():
            x[bad] = rng.uniform(-scale, scale, size=int(bad.sum()))
            bad = np.abs(x - p) < margin
    return x


def operator_grad_checks(seed: int = 1) -> dict[str, float]:
    """Max relative FD error per differentiable operator."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    def check(name, build, tensors):
        # weight the output once so the scalarized loss has non-trivial grads
        w = T.constant(rng.normal(size=np.shape(build(tensors).data)))
        results[name] = grad_check(lambda t: T.tsum(T.mul(build(t), w)), tensors,
                                   rng=np.random.default_rng(seed + 1))

    x = Tensor(_away_from(rng, (3, 4)), requires_grad=True)
    y = Tensor(_away_from(rng, (3, 4)), requires_grad=True)
    check("add", lambda t: T.add(t["x"], t["y"]), {"x": x, "y": y})
    check("mul", lambda t: T.mul(t["x"], t["y"]), {"x": x, "y": y})
    check("mul_scalar", lambda t: T.mul_scalar(t["x"], 1.7), {"x": x})
    check("relu", lambda t: T.relu(t["x"]),
          {"x": Tensor(_away_from(rng, (4, 4), avoid=(0,)), requires_grad=True)})
    check("logistic", lambda t: T.logistic(t["x"]), {"x": x})
    check("log", lambda t: T.log(t["x"]),
          {"x": Tensor(rng.uniform(0.2, 3.0, size=(4, 4)), requires_grad=True)})
    check("clamp", lambda t: T.clamp(t["x"], -1.0, 1.0),
          {"x": Tensor(_away_from(rng, (4, 4), avoid=(-1, 1)), requires_grad=True)})
    check("smooth_l1", lambda t: T.smooth_l1(t["x"]),
          {"x": Tensor(_away_from(rng, (5, 3), avoid=(-1, 1)), requires_grad=True)})
    check("maximum", lambda t: T.maximum(t["x"], t["y"]), {"x": x, "y": y})
    check("sum", lambda t: T.tsum(t["x"]), {"x": x})
    check("mean", lambda t: T.tmean(t["x"]), {"x": x})

    dx = Tensor(rng.normal(size=(2, 6)), requires_grad=True)
    dw = Tensor(rng.normal(size=(4, 6)) * 0.4, requires_grad=True)
    db = Tensor(rng.normal(size=4) * 0.2, requires_grad=True)
    check("dense", lambda t: T.dense(t["x"], t["w"], t["b"]),
          {"x": dx, "w": dw, "b": db})

    cx = Tensor(rng.normal(size=(2, 6, 6)), requires_grad=True)
    cw = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.4, requires_grad=True)
    cb = Tensor(rng.normal(size=3) * 0.2, requires_grad=True)
    check("conv2d", lambda t: T.conv2d(t["x"], t["w"], t["b"], stride=2, pad=1),
          {"x": cx, "w": cw, "b": cb})

    # distinct values avoid pooling ties
    pool_in = rng.permutation(36).reshape(1, 6, 6) * 0.1
    check("maxpool2d", lambda t: T.maxpool2d(t["x"]),
          {"x": Tensor(pool_in, requires_grad=True)})
    check("upsample2x", lambda t: T.upsample2x(t["x"]),
          {"x": Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)})
    check("region_avg_pool",
          lambda t: T.region_avg_pool(t["x"], (0.5, 0.25, 3.5, 3.75), 2),
          {"x": Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)})
    check("channel_norm", lambda t: T.channel_norm(t["x"]),
          {"x": Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)})
    check("spatial_mean", lambda t: T.spatial_mean(t["x"]),
          {"x": Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)})
    check("take", lambda t: T.take(t["x"], np.array([0, 3, 5, 5])), {"x": x})
    check("concat0", lambda t: T.concat0([t["x"], t["y"]]), {"x": x, "y": y})
    return results


def micro_config() -> tuple[BackboneConfig, RunConfig]:
    cfg = BackboneConfig(
        image_size=32, num_categories=6, stage_channels=(4, 6, 8, 8),
        pyramid_channels=8, head_hidden=8, roi_grid=2,
        anchor_levels=[AnchorLevelConfig(stride=8, sizes=(10.0,), ratios=(1.0,)),
                       AnchorLevelConfig(stride=16, sizes=(20.0,), ratios=(1.0,))],
        pre_nms=8, top_k=2,
    )
    run = RunConfig(image_size=32, top_k=2, anchor_sample_size=8, anchor_positive_cap=4)
    return cfg, run


def micro_model_grad_check(seed: int = 1, max_coords_per_tensor: int = 5) -> float:
    """FD check of the full four-part loss on one synthetic sample.

    Proposal selection (NMS, top-k, level choice) is recomputed inside every
    forward evaluation and treated as a stop-gradient decision.
    """
    cfg, run = micro_config()
    spec = DatasetSpec(num_train=1, num_val=1, image_size=32, max_objects=2,
                       noise=0.05, seed=seed)
    sample = render_scene(spec, np.random.default_rng([seed, 7]), "micro-0")
    params = init_params(cfg, seed)
    index = AnchorIndex(cfg)
    targets = build_anchor_targets(sample, index, run)

    def build_loss(tensors):
        # fixed per-call rng so anchor sampling is identical across FD evals
        rng = np.random.default_rng([seed, 11])
        l_r, l_p, l_lo, l_lc = image_losses(sample, params, cfg, index, targets, run, rng)
        return L.combine_losses(l_r, l_p, l_lo, l_lc, run.loss_config())

    return grad_check(build_loss, dict(params.items()),
                      max_coords_per_tensor=max_coords_per_tensor,
                      rng=np.random.default_rng(seed))
