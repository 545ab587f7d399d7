"""Toy domain-shift experiment: pre-train on one synthetic texture domain,
stream a visually different domain, and compare online adaptation modes."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .adaptation import AdaptConfig, OptimConfig, TrainResult, dataset_stream, gradient_alignment, \
    meta_train, model_loss_fn, online_adapt, sliding_windows
from .data_io import SequenceDataset
from .networks import ArchitectureConfig, VONet, build_model
from .synthetic import SyntheticSceneConfig, generate_synthetic, motion_script

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ToySetup:
    height: int = 32
    width: int = 96
    window_length: int = 3
    train_sequences: int = 6
    train_frames: int = 40
    stream_frames: int = 300
    iterations: int = 600
    alpha: float = 1e-3
    online_alpha: float = 1e-3
    batch_size: int = 4

    def arch(self) -> ArchitectureConfig:
        return ArchitectureConfig.tiny(self.height, self.width)


def domain_a(setup: ToySetup, seed: int, frames: int) -> SequenceDataset:
    """Source domain: checkerboard textures, lateral camera motion."""
    cfg = SyntheticSceneConfig(
        texture="checker", depth_model="heightfield", motion=motion_script("lateral", frames - 1, seed=seed),
        height=setup.height, width=setup.width, seed=seed, render="raycast",
    )
    return generate_synthetic(cfg, f"A{seed}")


def domain_b(setup: ToySetup, seed: int, frames: int) -> SequenceDataset:
    """Target domain: smooth noise texture with a different palette, wandering motion."""
    cfg = SyntheticSceneConfig(
        texture="perlin", depth_model="heightfield", motion=motion_script("wander", frames - 1, seed=seed),
        height=setup.height, width=setup.width, seed=seed, render="raycast",
        mean_color=(0.35, 0.5, 0.3), contrast=0.5, texture_scale=0.8,
    )
    return generate_synthetic(cfg, f"B{seed}")


def source_sequences(setup: ToySetup, seed: int) -> List[SequenceDataset]:
    return [domain_a(setup, 1000 * seed + k, setup.train_frames) for k in range(setup.train_sequences)]


def train_toy(setup: ToySetup, seed: int, meta: bool, data: Optional[List[SequenceDataset]] = None) -> TrainResult:
    data = data if data is not None else source_sequences(setup, seed)
    model = build_model(setup.arch(), seed=seed)
    cfg = OptimConfig(alpha=setup.alpha, window_length=setup.window_length, iterations=setup.iterations,
                      meta=meta, batch_size_train=setup.batch_size,
                      stats_iterations=min(1000, setup.iterations))
    return meta_train(data, model, cfg, seed=seed)


def clone(model: VONet) -> VONet:
    m = VONet(model.cfg).to(next(model.parameters()).dtype)
    m.load_state_dict(model.state_dict())
    return m


def run_online(trained: TrainResult, stream: SequenceDataset, setup: ToySetup, mode: str,
               lstm: bool = True, fa: bool = True):
    cfg = AdaptConfig(mode=mode, window_length=setup.window_length, alpha=setup.online_alpha, lstm=lstm, fa=fa)
    return online_adapt(dataset_stream(stream), clone(trained.model), trained.source_stats, stream.K, cfg)


def mean_gradient_cosine(model: VONet, ds: SequenceDataset, window_length: int, pairs: int = 50) -> float:
    """Mean cosine between gradients of consecutive windows of ``ds``."""
    m = clone(model)
    m.aligner.mode = "instant"
    fn = model_loss_fn(m, ds.K)
    params = dict(m.named_parameters())
    wins = list(sliding_windows(ds, window_length))
    cos = [gradient_alignment(fn, params, a.batch(), b.batch())[1] for a, b in zip(wins[:pairs], wins[1 : pairs + 1])]
    return float(np.mean(cos))
