"""Staged training: backbone pretrain, frozen-backbone branch training, then
joint fine-tuning. A phase ends when its validation mAP stops improving by
more than a small delta for a few consecutive epochs, or at its epoch cap.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import losses as L
from . import tensor as T
from .config import RunConfig
from .data import CATEGORIES, Sample, load_split
from .geometry import POSITIVE, encode_box_delta, match_anchors
from .metrics import PredictionRecord, mean_average_precision
from .model import (AnchorIndex, BackboneConfig, backbone_param_names,
                    forward_branches, init_params, predict_image,
                    pretrain_scores, pretrain_scores_all, save_model, sigmoid_np)
from .tensor import OptimState, ParamStore, sgd_step


class TrainingAborted(RuntimeError):
    """Raised when the loss or a gradient goes non-finite mid-run."""


@dataclass
class AnchorTargets:
    sampled_pool_pos: np.ndarray  # positive anchor indices
    sampled_pool_neg: np.ndarray  # negative anchor indices
    t_star: np.ndarray  # (n_pos, 4) encoded regression targets


def build_anchor_targets(sample: Sample, index: AnchorIndex, run: RunConfig) -> AnchorTargets:
    gt = [b for _, b in sample.boxes]
    labels, best_gt = match_anchors(index.boxes, gt, run.pos_iou, run.neg_iou)
    pos = np.flatnonzero(labels == POSITIVE)
    neg = np.flatnonzero(labels == 0)
    t_star = np.stack([encode_box_delta(index.boxes[a], gt[best_gt[a]]).as_array() for a in pos]) \
        if len(pos) else np.zeros((0, 4))
    return AnchorTargets(sampled_pool_pos=pos, sampled_pool_neg=neg, t_star=t_star)


def _sample_anchors(tg: AnchorTargets, run: RunConfig, rng: np.random.Generator):
    # Positives are rare (a handful per image vs hundreds of negatives), so
    # they are resampled with replacement up to the cap: an unbalanced sample
    # lets the easy negatives drown the positive gradient and the objectness
    # head settles on predicting the base rate.
    n_pos = run.anchor_positive_cap if len(tg.sampled_pool_pos) else 0
    pos_pick = rng.choice(len(tg.sampled_pool_pos), n_pos,
                          replace=len(tg.sampled_pool_pos) < n_pos) if n_pos else np.array([], dtype=int)
    n_neg = min(len(tg.sampled_pool_neg), run.anchor_sample_size - n_pos)
    neg_pick = rng.choice(len(tg.sampled_pool_neg), n_neg, replace=False) if n_neg else np.array([], dtype=int)
    idx = np.concatenate([tg.sampled_pool_pos[pos_pick], tg.sampled_pool_neg[neg_pick]])
    targets = np.concatenate([np.ones(n_pos), np.zeros(n_neg)])
    return idx.astype(np.intp), targets, pos_pick


def image_losses(sample: Sample, params: ParamStore, cfg: BackboneConfig, index: AnchorIndex,
                 tg: AnchorTargets, run: RunConfig, rng: np.random.Generator):
    """The four loss terms of one image as differentiable scalars."""
    _, obj_flat, delta_flat, obj, ctx = forward_branches(sample.image, params, cfg, index)

    sampled, p_star, pos_pick = _sample_anchors(tg, run, rng)
    l_p = L.patch_loss(T.logistic(T.take(obj_flat, sampled)), p_star)

    if len(pos_pick):
        pos_anchors = tg.sampled_pool_pos[pos_pick]
        didx = index.delta_index[pos_anchors].reshape(-1)
        t_hat = T.reshape(T.take(delta_flat, didx), (len(pos_anchors), 4))
        l_r = L.location_loss(t_hat, tg.t_star[pos_pick])
    else:
        l_r = T.constant(0.0)

    y = sample.labels.astype(np.float64)
    l_lo = L.bce_from_probs(obj.aggregated, y)
    l_lc = L.bce_from_probs(ctx.aggregated, y)
    return l_r, l_p, l_lo, l_lc


def evaluate_records(samples: list[Sample], params: ParamStore, cfg: BackboneConfig,
                     index: AnchorIndex, branch: str = "fused") -> list[PredictionRecord]:
    records = []
    for s in samples:
        pred = predict_image(s.image, params, cfg, index)
        vec = {"fused": pred.fused, "object": pred.object_vec, "context": pred.context_vec}[branch]
        records.append(PredictionRecord(sample_id=s.id, confidences=vec, labels=s.labels))
    return records


def _pretrain_records(samples, params, cfg) -> list[PredictionRecord]:
    out = []
    for s in samples:
        scores = pretrain_scores(s.image, params, cfg).data
        conf = sigmoid_np(scores)
        out.append(PredictionRecord(sample_id=s.id, confidences=conf, labels=s.labels))
    return out


def train(run: RunConfig, data_dir: str, checkpoint_path: str, log_path: str,
          epoch_callback=None, quiet: bool = False) -> dict:
    """Run all three phases; saves the best-validation checkpoint.

    ``epoch_callback(phase, epoch, params)`` is invoked after every epoch.
    Returns a summary dict with the best validation mAP and epochs used.
    """
    train_samples = load_split(os.path.join(data_dir, "train"))
    val_samples = load_split(os.path.join(data_dir, "val"))
    cfg = run.backbone_config()
    loss_cfg = run.loss_config()
    params = init_params(cfg, run.seed)
    index = AnchorIndex(cfg)
    targets = [build_anchor_targets(s, index, run) for s in train_samples]

    log_file = open(log_path, "a", encoding="utf-8")
    state = {"best_map": -1.0, "epoch": 0, "saved": False}

    def log_epoch(phase, parts_mean, val_map):
        rec = {"epoch": state["epoch"], "phase": phase,
               "l_r": parts_mean[0], "l_p": parts_mean[1],
               "l_l_object": parts_mean[2], "l_l_context": parts_mean[3],
               "total": parts_mean[0] + run.alpha * parts_mean[1]
               + run.beta * parts_mean[2] + run.gamma * parts_mean[3],
               "val_mAP": val_map}
        log_file.write(json.dumps(rec) + "\n")
        log_file.flush()
        if not quiet:
            print(f"epoch {state['epoch']:3d} phase {phase} "
                  f"l_r={parts_mean[0]:.4f} l_p={parts_mean[1]:.4f} "
                  f"l_o={parts_mean[2]:.4f} l_c={parts_mean[3]:.4f} val_mAP={val_map:.4f}")

    def run_phase(phase, max_epochs, step_fn, eval_fn, save_best):
        opt = OptimState(learning_rate=run.lr, momentum=run.momentum,
                         weight_decay=run.weight_decay)
        shuffle_rng = np.random.default_rng([run.seed, 100 + phase])
        sample_rng = np.random.default_rng([run.seed, 200 + phase])
        best_in_phase, stale = -1.0, 0
        for _ in range(max_epochs):
            order = shuffle_rng.permutation(len(train_samples))
            sums = np.zeros(4)
            nb = 0
            for start in range(0, len(order), run.batch_size):
                batch = order[start : start + run.batch_size]
                params.zero_grad()
                parts_t = step_fn(batch, sample_rng, opt)
                sums += parts_t
                nb += 1
            opt.learning_rate *= run.lr_decay
            state["epoch"] += 1
            val_map = eval_fn()
            log_epoch(phase, list(sums / nb), val_map)
            if save_best and val_map > state["best_map"]:
                state["best_map"] = val_map
                save_model(checkpoint_path, params, cfg)
                state["saved"] = True
            if epoch_callback:
                epoch_callback(phase, state["epoch"], params)
            if val_map > best_in_phase + run.convergence_delta:
                best_in_phase, stale = val_map, 0
            else:
                best_in_phase = max(best_in_phase, val_map)
                stale += 1
                if stale >= run.convergence_patience:
                    break

    def pretrain_step(batch, rng, opt):
        losses = []
        for si in batch:
            s = train_samples[si]
            y = s.labels.astype(np.float64)
            for scores in pretrain_scores_all(s.image, params, cfg):
                losses.append(L.label_loss(scores, y, loss_cfg))
        total = T.tsum(T.concat0([T.reshape(x, (1,)) for x in losses])) * (1.0 / len(batch))
        if not np.isfinite(total.item()):
            raise TrainingAborted(f"non-finite pretraining loss at epoch {state['epoch']}")
        total.backward()
        sgd_step(params, opt)
        return np.array([0.0, 0.0, total.item(), 0.0])

    def branch_step(batch, rng, opt):
        part_tensors = [[], [], [], []]
        for si in batch:
            s = train_samples[si]
            for slot, t in enumerate(image_losses(s, params, cfg, index, targets[si], run, rng)):
                part_tensors[slot].append(t)
        inv = 1.0 / len(batch)
        means = [T.tsum(T.concat0([T.reshape(x, (1,)) for x in ts])) * inv for ts in part_tensors]
        total = L.combine_losses(*means, loss_cfg)
        if not np.isfinite(total.item()):
            raise TrainingAborted(f"non-finite loss at epoch {state['epoch']}")
        total.backward()
        sgd_step(params, opt)
        return np.array([m.item() for m in means])

    try:
        # phase 0: backbone pretraining through the temporary global-pool head
        run_phase(0, run.epochs_phase0,
                  pretrain_step,
                  lambda: mean_average_precision(_pretrain_records(val_samples, params, cfg))[0],
                  save_best=False)
        # phase 1: freeze the backbone, train pyramid + branches
        params.freeze(backbone_param_names(params))
        run_phase(1, run.epochs_phase1, branch_step,
                  lambda: mean_average_precision(
                      evaluate_records(val_samples, params, cfg, index))[0],
                  save_best=True)
        # phase 2: joint optimization of everything
        params.unfreeze_all()
        run_phase(2, run.epochs_phase2, branch_step,
                  lambda: mean_average_precision(
                      evaluate_records(val_samples, params, cfg, index))[0],
                  save_best=True)
    except (TrainingAborted, T.NonFiniteGradientError) as e:
        log_file.close()
        if state["saved"]:
            raise TrainingAborted(f"{e} (last good checkpoint retained at {checkpoint_path})") from e
        raise
    log_file.close()
    return {"best_val_mAP": state["best_map"], "epochs": state["epoch"],
            "checkpoint": checkpoint_path, "categories": list(CATEGORIES)}
