"""Run configuration: every hyperparameter, all overridable, JSON-loadable."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .losses import LossConfig
from .model import BackboneConfig


@dataclass
class RunConfig:
    lr: float = 0.002
    momentum: float = 0.5
    weight_decay: float = 0.01
    batch_size: int = 2
    epochs_phase0: int = 5
    epochs_phase1: int = 15
    epochs_phase2: int = 10
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    sigma: float = 0.5
    sigma_mode: str = "squash"
    expansion_factor: float = 2.0
    fusion_mode: str = "max"
    pos_iou: float = 0.5
    neg_iou: float = 0.3
    nms_iou: float = 0.5
    label_threshold: float = 0.5
    top_k: int = 8
    image_size: int = 64
    num_categories: int = 6
    seed: int = 42
    lr_decay: float = 1.0  # per-epoch lr multiplier; 1.0 = constant rate
    anchor_sample_size: int = 32
    anchor_positive_cap: int = 16
    convergence_delta: float = 0.002
    convergence_patience: int = 3

    @staticmethod
    def from_file(path) -> "RunConfig":
        with open(path, encoding="utf-8") as f:
            values = json.load(f)
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return RunConfig(**values)

    def with_overrides(self, **overrides) -> "RunConfig":
        return dataclasses.replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            image_size=self.image_size,
            num_categories=self.num_categories,
            top_k=self.top_k,
            nms_iou=self.nms_iou,
            expansion_factor=self.expansion_factor,
            fusion_mode=self.fusion_mode,
            label_threshold=self.label_threshold,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(alpha=self.alpha, beta=self.beta, gamma=self.gamma,
                          sigma_factor=self.sigma, sigma_mode=self.sigma_mode)
